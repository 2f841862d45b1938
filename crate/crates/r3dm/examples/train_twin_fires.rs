//! Train the full method on the twin-fires gridworld with the desk config.
//!
//! Usage: `cargo run --release --example train_twin_fires [steps] [seed]`
//! (defaults: 30000 steps, seed 0; the shipped acceptance runs use 150000).

use std::time::Instant;

use r3dm::config::ConfigFile;
use r3dm::trainer::{train_run, Variant};

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30_000);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let config_path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/twin_fires_desk.json");
    let cfg = ConfigFile::load(&config_path).expect("desk config parses");

    println!("training {steps} env steps on twin-fires (seed {seed})");
    let t0 = Instant::now();
    let run = train_run(cfg.env.clone(), cfg.effective_run(), steps, seed, Variant::Full)
        .expect("training runs");
    let dt = t0.elapsed().as_secs_f64();
    println!("step     episodes success  return   td       cl       r_pol    r_dyn    eps");
    for row in &run.metrics {
        println!(
            "{:<8} {:<8} {:<8.3} {:<8.2} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:.3}",
            row.step,
            row.episode,
            row.success_rate,
            row.mean_return,
            row.td_loss,
            row.cl_loss,
            row.r_pol_mean,
            row.r_dyn_mean,
            row.epsilon
        );
    }
    println!(
        "final greedy success {:.3} in {:.0}s ({:.0} env steps/s)",
        run.final_success,
        dt,
        steps as f64 / dt
    );
}
