//! Compare the full method against its ablations (no contrastive learning,
//! no intrinsic rewards) on identical seeds and budgets.
//!
//! Usage: `cargo run --release --example ablation_study [steps] [n_seeds]`

use r3dm::config::ConfigFile;
use r3dm::trainer::{run_ablation, Variant};

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5_000);
    let n_seeds: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let seeds: Vec<u64> = (0..n_seeds).collect();

    let config_path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/twin_fires_desk.json");
    let cfg = ConfigFile::load(&config_path).expect("desk config parses");

    println!("{steps} env steps per run, seeds {seeds:?}");
    let report = run_ablation(
        &cfg.env,
        &cfg.effective_run(),
        &[Variant::Full, Variant::NoCl, Variant::NoIntrinsic],
        &seeds,
        steps,
    )
    .expect("ablation runs");

    println!("{:<14} {:<24} median", "variant", "final success per seed");
    for (variant, finals, med) in &report.results {
        let joined: Vec<String> = finals.iter().map(|v| format!("{v:.2}")).collect();
        println!("{:<14} {:<24} {med:.3}", variant.name(), joined.join(" "));
    }
}
