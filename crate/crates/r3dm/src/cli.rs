//! Command-line entry points: train, ablate, verify, export-roles.
//!
//! Exit codes: 0 success, 1 verification/acceptance failure, 2 usage or
//! configuration error. Rollout parallelism is capped by the
//! `R3DM_NUM_WORKERS` environment variable (default 1; determinism is only
//! guaranteed single-worker).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ConfigFile;
use crate::env::TabularMdp;
use crate::error::{R3dmError, Result};
use crate::trainer::{
    median, train_run_with, MetricsRow, Variant, METRICS_HEADER,
};

#[derive(Parser)]
#[command(name = "r3dm", about = "Role-based multi-agent Q-learning with dual world-model intrinsic rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics plus checkpoints.
    Train(TrainArgs),
    /// Train every requested variant over every seed and summarize medians.
    Ablate(AblateArgs),
    /// Run the oracle verification suites.
    Verify(VerifyArgs),
    /// Export role embeddings, cluster labels and metric plots from a checkpoint.
    ExportRoles(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Environment-step budget.
    #[arg(long)]
    steps: u64,
    /// Output directory (refused when non-empty unless --force).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    force: bool,
    /// One of: full, no_cl, no_intrinsic.
    #[arg(long, default_value = "full")]
    variant: String,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated variants.
    #[arg(long, default_value = "full,no_cl,no_intrinsic")]
    variants: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// One of: identities, gradients, igm, all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Inject a corrupted-gradient fixture; the run must then fail.
    #[arg(long, default_value_t = false)]
    negative_control: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of greedy episodes to export.
    #[arg(long)]
    episodes: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    force: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional metrics.csv to render as SVG charts.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print and exit 0; real usage errors exit 2.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Verify(args) => cmd_verify(&args.suite, args.negative_control),
        Command::ExportRoles(args) => cmd_export_roles(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(R3dmError::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(out)?;
    }
    Ok(())
}

fn run_one_training(
    cfg: &ConfigFile,
    seed: u64,
    steps: u64,
    variant: Variant,
    out: &Path,
) -> Result<Vec<MetricsRow>> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    let run_cfg = cfg.effective_run();

    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.csv"))?);
    writeln!(metrics_file, "{METRICS_HEADER}")?;

    let out_dir = out.to_path_buf();
    let cfg_echo = cfg.clone();
    let artifacts = train_run_with(
        cfg.env.clone(),
        run_cfg,
        steps,
        seed,
        variant,
        |row, nets, targets, _| {
            writeln!(metrics_file, "{}", row.to_csv()).expect("metrics row writes");
            metrics_file.flush().expect("metrics flush");
            let ckpt = Checkpoint::capture(&cfg_echo, nets, targets);
            let path = out_dir.join(format!("checkpoint_{:09}.json", row.step));
            ckpt.save(&path).expect("checkpoint writes");
        },
    )?;
    Ok(artifacts.metrics)
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let cfg = ConfigFile::load(&args.config)?;
    let variant = Variant::parse(&args.variant)?;
    prepare_out_dir(&args.out, args.force)?;
    let rows = run_one_training(&cfg, args.seed, args.steps, variant, &args.out)?;
    println!("wrote {} metric rows to {}", rows.len(), args.out.join("metrics.csv").display());
    Ok(0)
}

fn cmd_ablate(args: &AblateArgs) -> Result<i32> {
    let cfg = ConfigFile::load(&args.config)?;
    let variants: Vec<Variant> = args
        .variants
        .split(',')
        .map(|v| Variant::parse(v.trim()))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| R3dmError::Config(format!("bad seed '{s}'")))
        })
        .collect::<Result<_>>()?;
    prepare_out_dir(&args.out, args.force)?;

    let mut summary = String::from("variant,seed,final_success\n");
    let mut medians = Vec::new();
    for &variant in &variants {
        let mut finals = Vec::new();
        for &seed in &seeds {
            let dir = args.out.join(format!("{}_seed{}", variant.name(), seed));
            let rows = run_one_training(&cfg, seed, args.steps, variant, &dir)?;
            let final_success = rows.last().map(|r| r.success_rate).unwrap_or(0.0);
            finals.push(final_success);
            summary.push_str(&format!("{},{},{}\n", variant.name(), seed, final_success));
        }
        let med = if finals.is_empty() { 0.0 } else { median(&finals) };
        medians.push((variant, med));
    }
    summary.push('\n');
    summary.push_str("variant,median_final_success\n");
    for (variant, med) in &medians {
        summary.push_str(&format!("{},{}\n", variant.name(), med));
        println!("{:<14} median final success {med}", variant.name());
    }
    std::fs::write(args.out.join("summary.csv"), summary)?;
    Ok(0)
}

fn cmd_export_roles(args: &ExportArgs) -> Result<i32> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (nets, _) = ckpt.restore()?;
    prepare_out_dir(&args.out, args.force)?;
    let cfg = ckpt.config.effective_run();
    let env = crate::env::TwinFires::new(ckpt.config.env.clone())?;
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);

    let role_dim = cfg.role_dim;
    let mut csv = String::from("episode,timestep,agent,cluster");
    for d in 1..=role_dim {
        csv.push_str(&format!(",z_{d}"));
    }
    csv.push('\n');

    let mut log_entries = Vec::new();
    for ep in 0..args.episodes {
        let rec = crate::trainer::greedy_episode(&env, &nets.encoder, &nets.q_head, &mut rng);
        for (t, roles) in rec.roles.iter().enumerate() {
            let seed = (args.seed ^ 0x9E3779B97F4A7C15)
                .wrapping_add(ep as u64 * 1_000_003)
                .wrapping_add(t as u64);
            let assignment = crate::rolecl::kmeans(roles, cfg.cluster_count, seed);
            for agent in 0..roles.nrows() {
                csv.push_str(&format!("{ep},{t},{agent},{}", assignment.labels[agent]));
                for d in 0..role_dim {
                    csv.push_str(&format!(",{}", roles[(agent, d)]));
                }
                csv.push('\n');
            }
            log_entries.push(crate::env::StepLogEntry {
                step_index: t,
                actions: rec.actions[t].clone(),
                reward: rec.rewards[t],
                done: rec.dones[t],
            });
        }
    }
    std::fs::write(args.out.join("roles.csv"), csv)?;
    crate::env::write_episode_log(&args.out.join("episodes.log"), &log_entries)?;

    if let Some(metrics) = &args.metrics {
        let text = std::fs::read_to_string(metrics)?;
        let mut success = Vec::new();
        let mut ret = Vec::new();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() >= 4 {
                let step: f64 = cols[0].parse().map_err(|_| R3dmError::Parse("bad step".into()))?;
                success.push((step, cols[2].parse().map_err(|_| R3dmError::Parse("bad success".into()))?));
                ret.push((step, cols[3].parse().map_err(|_| R3dmError::Parse("bad return".into()))?));
            }
        }
        crate::plot::line_chart_svg(&args.out.join("success.svg"), "greedy success rate", &success)?;
        crate::plot::line_chart_svg(&args.out.join("return.svg"), "mean return", &ret)?;
    }
    println!("exported {} episodes to {}", args.episodes, args.out.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// Verification suites
// ---------------------------------------------------------------------------

/// One executed verification check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed residual (suite-specific meaning).
    pub residual: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: &str, residual: f64, tolerance: f64) -> Self {
        Check { name: name.to_string(), passed: residual <= tolerance, residual, tolerance }
    }
}

/// Exact identities: the tabular MI decomposition, intrinsic-reward
/// degeneracies, contrastive closed forms, schedules and distribution
/// arithmetic.
pub fn suite_identities() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(0xA11CE);

    // Mutual-information decomposition on random tabular MDPs.
    let mut worst = 0.0f64;
    let mut worst_vs_independent = 0.0f64;
    for i in 0..20 {
        let states = rng.gen_range(2..=8);
        let actions = rng.gen_range(2..=4);
        let roles = rng.gen_range(2..=3);
        let k = 1 + (i % 3);
        let mdp = TabularMdp::random(&mut rng, states, actions, roles);
        let (lhs, rhs) = crate::intrinsic::mi_decomposition_oracle(&mdp, k).expect("valid mdp");
        worst = worst.max((lhs - rhs).abs());
        let independent = crate::oracles::enumerate_trajectory_mi(&mdp, k);
        worst_vs_independent = worst_vs_independent.max((lhs - independent).abs());
    }
    checks.push(Check::new("mi_decomposition_identity_20_random_mdps", worst, 1e-9));
    checks.push(Check::new("mi_matches_independent_enumeration", worst_vs_independent, 1e-9));

    // Policy intrinsic reward: zero under identical roles, non-negative,
    // agrees with independent KL summation.
    let head = {
        let mut r = ChaCha20Rng::seed_from_u64(7);
        crate::qmixer::QHead::new(&mut r, 6, 4, 8, 5)
    };
    let mut worst_zero = 0.0f64;
    let mut min_value = f64::INFINITY;
    for _ in 0..10_000 {
        let n = rng.gen_range(2..5);
        let e = Array2::from_shape_fn((n, 6), |_| rng.gen_range(-1.0..1.0));
        let shared: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let identical = Array2::from_shape_fn((n, 4), |(_, j)| shared[j]);
        let masks = Array2::from_elem((n, 5), 1.0);
        let zero_case = crate::intrinsic::policy_intrinsic(&head, &[e.clone()], &identical, &[masks.clone()]);
        for v in zero_case {
            worst_zero = worst_zero.max(v.abs());
        }
        let varied = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
        let values = crate::intrinsic::policy_intrinsic(&head, &[e], &varied, &[masks]);
        for v in values {
            min_value = min_value.min(v);
        }
    }
    checks.push(Check::new("policy_reward_zero_under_identical_roles", worst_zero, 1e-12));
    checks.push(Check::new("policy_reward_nonnegative_10000_cases", (-min_value).max(0.0), 0.0));

    let mut worst_kl = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..5);
        let e = Array2::from_shape_fn((n, 6), |_| rng.gen_range(-1.0..1.0));
        let roles = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
        let masks = Array2::from_elem((n, 5), 1.0);
        let got = crate::intrinsic::policy_intrinsic(&head, &[e.clone()], &roles, &[masks.clone()]);
        // Independent recomputation through the KL oracle.
        for i in 0..n {
            let mut dists: Vec<Vec<f64>> = Vec::new();
            for j in 0..n {
                let mut zt = Array2::zeros((n, 4));
                for r in 0..n {
                    zt.row_mut(r).assign(&roles.row(j));
                }
                let q = head.forward_frozen(&e, &zt, &masks);
                let row: Vec<f64> = q.row(i).to_vec();
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = exps.iter().sum();
                dists.push(exps.into_iter().map(|v| v / s).collect());
            }
            let own = dists[i].clone();
            let mut mean = vec![0.0; 5];
            for d in &dists {
                for (m, v) in mean.iter_mut().zip(d) {
                    *m += v / n as f64;
                }
            }
            let want = crate::oracles::kl_oracle(&own, &mean);
            worst_kl = worst_kl.max((got[i] - want).abs());
        }
    }
    checks.push(Check::new("policy_reward_matches_kl_oracle", worst_kl, 1e-9));

    // Dynamics intrinsic reward: exact cancellation and the beta reductions.
    checks.push(dynamics_cancellation_check());

    // Contrastive closed forms.
    checks.extend(contrastive_closed_form_checks(&mut rng));

    // Schedules and update rules.
    let cfg = crate::config::RunConfig::default();
    let eps_resid = [
        (crate::trainer::epsilon_at(&cfg, 0) - 1.0).abs(),
        (crate::trainer::epsilon_at(&cfg, 40_000) - 0.51).abs(),
        (crate::trainer::epsilon_at(&cfg, 80_000) - 0.02).abs(),
        (crate::trainer::epsilon_at(&cfg, 200_000) - 0.02).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    checks.push(Check::new("epsilon_linear_ramp_published_points", eps_resid, 1e-12));

    let mut online = crate::encoders::RoleHead::zeros(1, 1);
    online.l1.w[(0, 0)] = 1.0;
    let mut key = crate::encoders::RoleHead::zeros(1, 1);
    crate::encoders::momentum_update(&online, &mut key, 0.005).expect("valid zeta");
    let momentum_resid = (key.l1.w[(0, 0)] - 0.995f64).abs();
    checks.push(Check::new("momentum_update_scalar_bitwise", momentum_resid, 0.0));

    let online_t = Array2::from_elem((1, 1), 1.0);
    let mut tgt = Array2::from_elem((1, 1), 0.0);
    crate::trainer::soft_update_target(&[&online_t], &mut [&mut tgt], 0.005);
    let soft_resid = (tgt[(0, 0)] - ((1.0 - 0.005) * 0.0 + 0.005 * 1.0)).abs();
    checks.push(Check::new("soft_target_update_scalar_bitwise", soft_resid, 0.0));

    // Distribution arithmetic: unimix endpoints and the Gaussian closed form.
    let mut tape = crate::tape::Tape::new();
    let mut row = vec![0.0; 16];
    row[5] = 1.0;
    let p = tape.leaf(Array2::from_shape_vec((1, 16), row).unwrap());
    let mixed = crate::nn::unimix(&mut tape, p, 0.01, 16);
    let v = tape.value(mixed);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let unimix_resid = (max - 0.990625).abs().max((min - 0.000625).abs());
    checks.push(Check::new("unimix_one_hot_arithmetic", unimix_resid, 1e-12));

    let o = tape.leaf(Array2::from_shape_vec((1, 4), vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let ll = crate::nn::gaussian_loglik_rows(&mut tape, o, o);
    let want = -2.0 * (2.0 * std::f64::consts::PI).ln();
    checks.push(Check::new(
        "decoder_gaussian_loglik_at_mean",
        (tape.value(ll)[(0, 0)] - want).abs(),
        1e-12,
    ));

    // Posterior normalization and class floor over random inputs.
    let dims = crate::worldmodel::RssmDims {
        obs_dim: 3,
        n_actions: 2,
        hidden: 8,
        units: 8,
        latent_vars: 4,
        latent_classes: 4,
        unimix_ratio: 0.01,
        role_dim: None,
    };
    let model = crate::worldmodel::Rssm::new(&mut rng, dims);
    let mut norm_resid = 0.0f64;
    let mut floor_violation = 0.0f64;
    let floor = 0.01 / 4.0;
    for _ in 0..1000 {
        let h = Array2::from_shape_fn((1, 8), |_| rng.gen_range(-2.0..2.0));
        let obs = Array2::from_shape_fn((1, 3), |_| rng.gen_range(-2.0..2.0));
        let post = crate::worldmodel::posterior_probs(&model, &h, &obs);
        for g in 0..4 {
            let s: f64 = (0..4).map(|c| post[(0, g * 4 + c)]).sum();
            norm_resid = norm_resid.max((s - 1.0).abs());
        }
        for &p in post.iter() {
            floor_violation = floor_violation.max(floor - p);
        }
    }
    checks.push(Check::new("latent_rows_normalized", norm_resid, 1e-9));
    checks.push(Check::new("latent_class_floor_respected", floor_violation.max(0.0), 0.0));

    checks
}

fn dynamics_cancellation_check() -> Check {
    use crate::worldmodel::{rollout_posteriors, Rssm, RssmDims};
    let dims_a = RssmDims {
        obs_dim: 3,
        n_actions: 2,
        hidden: 8,
        units: 8,
        latent_vars: 4,
        latent_classes: 4,
        unimix_ratio: 0.01,
        role_dim: None,
    };
    let mut seed_rng = ChaCha20Rng::seed_from_u64(99);
    let agnostic = Rssm::new(&mut seed_rng, dims_a);
    let mut role_model = Rssm::new(
        &mut ChaCha20Rng::seed_from_u64(99),
        RssmDims { role_dim: Some(3), ..dims_a },
    );
    // Zero the role columns and copy shared structure.
    role_model.seq_proj = agnostic.seq_proj.clone();
    role_model.seq_gru = agnostic.seq_gru.clone();
    role_model.enc_l1 = agnostic.enc_l1.clone();
    role_model.enc_l2 = agnostic.enc_l2.clone();
    role_model.enc_out = agnostic.enc_out.clone();
    role_model.h0 = agnostic.h0.clone();
    role_model.dyn_out.w.fill(0.0);
    for r in 0..8 {
        role_model.dyn_out.w.row_mut(r).assign(&agnostic.dyn_out.w.row(r));
    }
    role_model.dyn_out.b = agnostic.dyn_out.b.clone();
    role_model.dec_l1.w.fill(0.0);
    for r in 0..8 + 16 {
        role_model.dec_l1.w.row_mut(r).assign(&agnostic.dec_l1.w.row(r));
    }
    role_model.dec_l1.b = agnostic.dec_l1.b.clone();
    role_model.dec_l2 = agnostic.dec_l2.clone();
    role_model.dec_out = agnostic.dec_out.clone();

    let mut data_rng = ChaCha20Rng::seed_from_u64(5);
    let steps = 5;
    let obs: Vec<Array2<f64>> = (0..steps)
        .map(|_| Array2::from_shape_fn((2, 3), |_| data_rng.gen_range(-1.0..1.0)))
        .collect();
    let actions: Vec<Array2<f64>> = (0..steps)
        .map(|_| {
            let mut a = Array2::zeros((2, 2));
            for i in 0..2 {
                a[(i, data_rng.gen_range(0..2))] = 1.0;
            }
            a
        })
        .collect();
    let roles = Array2::from_elem((2, 3), 0.4);
    let mut r1 = ChaCha20Rng::seed_from_u64(1234);
    let mut r2 = ChaCha20Rng::seed_from_u64(1234);
    let steps_role = rollout_posteriors(&role_model, &obs, &actions, &mut r1);
    let steps_agn = rollout_posteriors(&agnostic, &obs, &actions, &mut r2);
    let cfg = crate::config::IntrinsicConfig { beta1: 1.0, beta2: 0.0, k: 1, ..Default::default() };
    let mut worst = 0.0f64;
    for t in 0..steps - 1 {
        let r = crate::intrinsic::dynamics_intrinsic(
            &role_model,
            &agnostic,
            &steps_role,
            &steps_agn,
            &obs,
            &roles,
            t,
            &cfg,
        );
        for v in r {
            worst = worst.max(v.abs());
        }
    }
    // The beta1 = beta2 = 0 reduction: pure agnostic surprise.
    let cfg0 = crate::config::IntrinsicConfig { beta1: 0.0, beta2: 0.0, k: 1, ..Default::default() };
    let got = crate::intrinsic::dynamics_intrinsic(
        &role_model,
        &agnostic,
        &steps_role,
        &steps_agn,
        &obs,
        &roles,
        0,
        &cfg0,
    );
    for (i, &v) in got.iter().enumerate() {
        let st = &steps_agn[1].state;
        let ll = crate::worldmodel::decode_loglik(&agnostic, &st.h, &st.d_sample, None, &obs[1]);
        worst = worst.max((v + ll[(i, 0)]).abs());
    }
    Check::new("dynamics_reward_cancellation_and_reductions", worst, 0.0)
}

fn contrastive_closed_form_checks(rng: &mut ChaCha20Rng) -> Vec<Check> {
    use crate::rolecl::{contrastive_loss, BilinearScore};
    let mut checks = Vec::new();

    // W = 0 closed form: mean of -ln(|pos_i| / n).
    let queries = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
    let e = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
    let mut c = Array2::zeros((3, 2));
    c[(0, 0)] = 1.0;
    c[(1, 0)] = 1.0;
    c[(2, 1)] = 1.0;
    let key_enc = crate::encoders::RoleHead::new(rng, 4, 2);
    let w = BilinearScore::zeros(2);
    let out = contrastive_loss(&queries, &e, &c, &key_enc, &w);
    let want = -((2.0f64 / 3.0).ln() * 2.0 + (1.0f64 / 3.0).ln()) / 3.0;
    checks.push(Check::new("contrastive_w_zero_closed_form", (out.loss - want).abs(), 1e-12));

    let mut min_loss = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(2..6);
        let q = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let emb = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
        let mut cm = Array2::zeros((n, 2));
        for i in 0..n {
            cm[(i, rng.gen_range(0..2))] = 1.0;
        }
        let kenc = crate::encoders::RoleHead::new(rng, 4, 3);
        let bw = BilinearScore { w: Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)) };
        let r = contrastive_loss(&q, &emb, &cm, &kenc, &bw);
        min_loss = min_loss.min(r.loss);
    }
    checks.push(Check::new("contrastive_nonnegative_1000_draws", (-min_loss).max(0.0), 1e-12));
    checks
}

/// Finite-difference gradient suites over every hand-built network.
pub fn suite_gradients() -> Vec<Check> {
    use crate::oracles::finite_diff_check;
    let mut checks = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(0xBEEF);

    // Recurrent encoder unroll.
    {
        let enc = crate::encoders::TrajectoryEncoder::new(&mut rng, 5, 6);
        let xs: Vec<Array2<f64>> =
            (0..3).map(|_| Array2::from_shape_fn((2, 5), |_| rng.gen_range(-1.0..1.0))).collect();
        let names = crate::encoders::TrajectoryEncoder::tensor_names();
        let run = |tensors: &[(String, Array2<f64>)]| -> f64 {
            let e = crate::encoders::TrajectoryEncoder {
                proj: crate::nn::Dense { w: tensors[0].1.clone(), b: tensors[1].1.clone() },
                gru: crate::nn::GruCell {
                    w_ih: tensors[2].1.clone(),
                    w_hh: tensors[3].1.clone(),
                    b_ih: tensors[4].1.clone(),
                    b_hh: tensors[5].1.clone(),
                    hidden: 6,
                },
            };
            let mut tape = crate::tape::Tape::new();
            let vars = e.mount(&mut tape);
            let mut h = tape.leaf(Array2::zeros((2, 6)));
            for x in &xs {
                let xv = tape.leaf(x.clone());
                h = vars.forward(&mut tape, xv, h);
            }
            let sq = tape.mul(h, h);
            let loss = tape.mean_all(sq);
            tape.scalar(loss)
        };
        let params: Vec<(String, Array2<f64>)> = names
            .iter()
            .zip(enc.tensors())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let mut tape = crate::tape::Tape::new();
        let vars = enc.mount(&mut tape);
        let mut h = tape.leaf(Array2::zeros((2, 6)));
        for x in &xs {
            let xv = tape.leaf(x.clone());
            h = vars.forward(&mut tape, xv, h);
        }
        let sq = tape.mul(h, h);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let analytic: Vec<(String, Array2<f64>)> = names
            .iter()
            .zip(vars.var_list())
            .map(|(n, v)| (n.to_string(), grads.get(v).clone()))
            .collect();
        let report = finite_diff_check(run, &params, &analytic, 40);
        checks.push(Check::new("trajectory_encoder_unroll_gradients", report.max_relative_error, 1e-4));
    }

    // Contrastive loss gradients w.r.t. queries and W.
    {
        let n = 5;
        let rdim = 4;
        let queries0 = Array2::from_shape_fn((n, rdim), |_| rng.gen_range(-1.0..1.0));
        let w0 = Array2::from_shape_fn((rdim, rdim), |_| rng.gen_range(-0.5..0.5));
        let keys = Array2::from_shape_fn((n, rdim), |_| rng.gen_range(-1.0..1.0));
        let mut c = Array2::zeros((n, 2));
        for i in 0..n {
            c[(i, i % 2)] = 1.0;
        }
        let pos = crate::rolecl::positive_mask(&c);
        let run = |tensors: &[(String, Array2<f64>)]| -> f64 {
            let mut tape = crate::tape::Tape::new();
            let q = tape.leaf(tensors[0].1.clone());
            let w = tape.leaf(tensors[1].1.clone());
            let loss = crate::rolecl::contrastive_loss_graph(&mut tape, q, w, &keys, &pos);
            tape.scalar(loss)
        };
        let mut tape = crate::tape::Tape::new();
        let q = tape.leaf(queries0.clone());
        let w = tape.leaf(w0.clone());
        let loss = crate::rolecl::contrastive_loss_graph(&mut tape, q, w, &keys, &pos);
        let grads = tape.backward(loss);
        let report = finite_diff_check(
            run,
            &[("queries".into(), queries0), ("w".into(), w0)],
            &[("queries".into(), grads.get(q).clone()), ("w".into(), grads.get(w).clone())],
            200,
        );
        checks.push(Check::new("contrastive_loss_gradients", report.max_relative_error, 1e-4));
    }

    // Utility head gradients.
    {
        let head = crate::qmixer::QHead::new(&mut rng, 3, 2, 4, 3);
        let e = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let z = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
        let mask = Array2::from_elem((2, 3), 1.0);
        let names = crate::qmixer::QHead::tensor_names();
        let run = |tensors: &[(String, Array2<f64>)]| -> f64 {
            let h = crate::qmixer::QHead {
                l1: crate::nn::Dense { w: tensors[0].1.clone(), b: tensors[1].1.clone() },
                l2: crate::nn::Dense { w: tensors[2].1.clone(), b: tensors[3].1.clone() },
            };
            let mut tape = crate::tape::Tape::new();
            let vars = h.mount(&mut tape);
            let ev = tape.leaf(e.clone());
            let zv = tape.leaf(z.clone());
            let q = vars.forward(&mut tape, ev, zv, &mask);
            let loss = tape.sum_all(q);
            tape.scalar(loss)
        };
        let params: Vec<(String, Array2<f64>)> = names
            .iter()
            .zip(head.tensors())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let mut tape = crate::tape::Tape::new();
        let vars = head.mount(&mut tape);
        let ev = tape.leaf(e.clone());
        let zv = tape.leaf(z.clone());
        let q = vars.forward(&mut tape, ev, zv, &mask);
        let loss = tape.sum_all(q);
        let grads = tape.backward(loss);
        let analytic: Vec<(String, Array2<f64>)> = names
            .iter()
            .zip(vars.var_list())
            .map(|(n, v)| (n.to_string(), grads.get(v).clone()))
            .collect();
        let report = finite_diff_check(run, &params, &analytic, 50);
        checks.push(Check::new("utility_head_gradients", report.max_relative_error, 1e-4));
    }

    checks
}

/// Factorization consistency: per-agent greedy equals exhaustive joint argmax
/// and the mixture is monotone.
pub fn suite_igm() -> Vec<Check> {
    use crate::qmixer::{greedy_joint_action, mix_single, Mixer, MixerDims};
    let mut rng = ChaCha20Rng::seed_from_u64(0x16E);
    let dims = |n: usize| MixerDims {
        n_agents: n,
        state_len: 5,
        role_dim: 4,
        state_embed_dim: 6,
        attn_embed_dim: 8,
        attn_out_dim: 6,
        heads: 2,
        hyper_hidden: 8,
        mix_dim: 8,
    };

    let mut mismatches = 0usize;
    let mut worst_drop = 0.0f64;
    for trial in 0..1000 {
        let n = 1 + (trial % 3);
        let n_actions = 2 + (trial % 4);
        let mixer = Mixer::new(&mut rng, dims(n));
        let roles = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
        let sh: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sr: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = Array2::from_shape_fn((n, n_actions), |_| rng.gen_range(-2.0..2.0));
        let mask = Array2::from_elem((n, n_actions), 1.0);
        let greedy = greedy_joint_action(&q, &mask);
        let brute = crate::oracles::brute_force_joint_argmax(
            |joint| {
                let chosen: Vec<f64> = joint.iter().enumerate().map(|(i, &a)| q[(i, a)]).collect();
                mix_single(&mixer, &chosen, &roles, &sh, &sr).0
            },
            &vec![n_actions; n],
        );
        if greedy.actions != brute {
            mismatches += 1;
        }
        // Monotonicity probe.
        let base: Vec<f64> = (0..n).map(|i| q[(i, 0)]).collect();
        let (v0, _) = mix_single(&mixer, &base, &roles, &sh, &sr);
        let bump = rng.gen_range(0..n);
        let mut plus = base.clone();
        plus[bump] += 1.0;
        let (v1, _) = mix_single(&mixer, &plus, &roles, &sh, &sr);
        worst_drop = worst_drop.max(v0 - v1);
    }
    vec![
        Check::new("igm_greedy_equals_brute_force_1000_mixers", mismatches as f64, 0.0),
        Check::new("mixture_monotone_under_value_bumps", worst_drop.max(0.0), 1e-9),
    ]
}

/// A deliberately corrupted gradient fixture; the harness must flag it.
pub fn negative_control_check() -> Check {
    let x = Array2::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap();
    let mut grad = x.clone();
    grad[(0, 1)] += 0.5; // injected corruption
    let report = crate::oracles::finite_diff_check(
        |ps: &[(String, Array2<f64>)]| ps[0].1.iter().map(|v| 0.5 * v * v).sum(),
        &[("x".into(), x)],
        &[("x".into(), grad)],
        200,
    );
    Check::new("negative_control_corrupted_gradient", report.max_relative_error, 1e-4)
}

/// Run one suite (or `all`) and print per-check lines. Returns the exit code.
pub fn cmd_verify(suite: &str, negative_control: bool) -> Result<i32> {
    let mut checks = match suite {
        "identities" => suite_identities(),
        "gradients" => suite_gradients(),
        "igm" => suite_igm(),
        "all" => {
            let mut all = suite_identities();
            all.extend(suite_gradients());
            all.extend(suite_igm());
            all
        }
        other => {
            return Err(R3dmError::Config(format!(
                "unknown suite '{other}' (expected identities, gradients, igm or all)"
            )))
        }
    };
    if negative_control {
        checks.push(negative_control_check());
    }
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {} residual={:.3e} tol={:.1e}", c.name, c.residual, c.tolerance);
        if !c.passed {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", checks.len(), failed);
    Ok(if failed == 0 { 0 } else { 1 })
}
