fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    let out = std::path::Path::new(&crate_dir).join("include/survint.h");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_language(cbindgen::Language::C)
        .with_include_guard("SURVINT_H")
        .with_cpp_compat(true)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(&out);
        }
        Err(e) => {
            // Keep the committed header if generation fails; it is kept in
            // sync by CI builds where cbindgen parses cleanly.
            println!("cargo:warning=cbindgen failed ({e}); using committed include/survint.h");
        }
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
