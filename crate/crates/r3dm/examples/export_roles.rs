//! Train briefly, checkpoint, then export per-timestep role embeddings with
//! cluster labels — the library-level equivalent of `r3dm export-roles`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use r3dm::checkpoint::Checkpoint;
use r3dm::config::ConfigFile;
use r3dm::rolecl::kmeans;
use r3dm::trainer::{greedy_episode, train_run, Variant};

fn main() {
    let config_path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/twin_fires_desk.json");
    let cfg = ConfigFile::load(&config_path).expect("desk config parses");
    let run_cfg = cfg.effective_run();

    println!("training 2000 steps to get a non-trivial policy...");
    let run = train_run(cfg.env.clone(), run_cfg.clone(), 2000, 0, Variant::Full).unwrap();

    let dir = std::env::temp_dir().join("r3dm_export_roles_example");
    std::fs::create_dir_all(&dir).unwrap();
    let ckpt_path = dir.join("checkpoint.json");
    Checkpoint::capture(&cfg, &run.nets, &run.targets).save(&ckpt_path).unwrap();
    println!("checkpoint written to {}", ckpt_path.display());

    // Reload and export two greedy episodes.
    let (nets, _) = Checkpoint::load(&ckpt_path).unwrap().restore().unwrap();
    let env = r3dm::env::TwinFires::new(cfg.env.clone()).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for ep in 0..2 {
        let rec = greedy_episode(&env, &nets.encoder, &nets.q_head, &mut rng);
        println!("episode {ep}: {} steps, success {}", rec.len(), rec.success);
        for (t, roles) in rec.roles.iter().enumerate().take(3) {
            let clusters = kmeans(roles, run_cfg.cluster_count, t as u64);
            println!(
                "  t={t}: cluster labels {:?}, |z_0| = {:.3}",
                clusters.labels,
                roles.row(0).iter().map(|v| v * v).sum::<f64>().sqrt()
            );
        }
    }
}
