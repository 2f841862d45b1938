//! Train the role-agnostic world model on the deterministic 1-D drift
//! fixture and report the reconstruction error.

use r3dm::worldmodel::train_on_drift_fixture;

fn main() {
    let updates: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let report = train_on_drift_fixture(updates, 21);
    let head: f64 = report.losses[..50.min(report.losses.len())].iter().sum::<f64>()
        / 50.min(report.losses.len()) as f64;
    let tail_n = 50.min(report.losses.len());
    let tail: f64 =
        report.losses[report.losses.len() - tail_n..].iter().sum::<f64>() / tail_n as f64;
    println!("updates:             {updates}");
    println!("loss (first 50):     {head:.4}");
    println!("loss (last 50):      {tail:.4}");
    println!("final recon MSE:     {:.5}", report.final_recon_mse);
    println!("target:              <= 0.01");
}
