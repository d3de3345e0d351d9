//! Runs the synthetic harmonization experiment and prints its report.
//!
//! Usage: `cargo run --release -p segrenorm --example phantom_experiment [iterations] [work_dir]`

use std::path::PathBuf;

use segrenorm::experiment::{run_experiment, ExperimentConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::default();
    if let Some(it) = args.next() {
        cfg.translator.iterations = Some(it.parse().expect("iterations must be an integer"));
    }
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("segrenorm-phantom"));
    let t0 = std::time::Instant::now();
    let out = run_experiment(&cfg, &dir, |m| eprintln!("[{:>7.1}s] {m}", t0.elapsed().as_secs_f64())).unwrap_or_else(|e| {
        eprintln!("experiment failed: {e}");
        std::process::exit(1);
    });
    print!("{}", out.report.to_json());
    let (ks, kh) = out.kid_means();
    let (ds, dh) = out.foreground_dice();
    println!("kid source {ks:.5} harmonized {kh:.5} ratio {:.3}", kh / ks);
    println!("dice source {ds:.4} harmonized {dh:.4} gain {:.4}", dh - ds);
}
