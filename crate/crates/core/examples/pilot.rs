use survint::simulation::{run_study, StudySpec};

fn main() {
    let reps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let spec = StudySpec {
        rho_list: vec![0.2, 0.3, 0.5],
        replications: reps,
        seed: 20230406,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let res = run_study(&spec).unwrap();
    println!("elapsed: {:?}, failures: {}", t0.elapsed(), res.failed_replications);
    println!("{:>3} {:>5} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7}", "sc", "rho", "ARB", "PRMSE", "Cov", "Wid", "E[a]", "SD[a]");
    for m in &res.metrics {
        println!(
            "{:>3} {:>5} {:>8.4} {:>8.4} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            m.scenario, m.rho, m.arb, m.prmse, m.cov, m.wid, m.a_mean, m.a_psd
        );
    }
}
