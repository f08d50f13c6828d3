//! The four subcommands and their artifacts.
//!
//! Every on-disk artifact is a pure function of the resolved config, so
//! rerunning a command reproduces each file byte for byte; wall-clock timing
//! goes to stdout only.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cyclematch::eval::{
    detect_trivial_solution, evaluate_retrieval, CyclicShiftEmbedder, Embedder,
    GroundTruthEmbedder, SweepAxis, DETECTOR_STREAM, EVAL_STREAM,
};
use cyclematch::gradcheck::{run_suite_with_fault, Fault, SuiteConfig};
use cyclematch::sim::{derive_rng, IdentityWorld, SymmetrySchedule};
use cyclematch::train::{build_model, train_two_stage, LearnedEmbedder, TrainConfig};

use crate::config::{resolve, ExperimentConfig, Overrides};

/// Cross-camera pairs sampled by the trivial-solution probe.
const DETECTOR_PAIRS: usize = 20;

/// Band the default symmetry sweep's endpoint gap is judged against.
const ALPHA_ENDPOINT_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, clap::Args)]
pub struct GradcheckArgs {
    /// Random instances per loss-gradient operation.
    #[arg(long, default_value_t = SuiteConfig::default().instances)]
    pub instances: usize,
    /// Random instances per parameter-gradient operation.
    #[arg(long, default_value_t = SuiteConfig::default().param_instances)]
    pub param_instances: usize,
    /// Random instances per standalone vector-Jacobian product.
    #[arg(long, default_value_t = SuiteConfig::default().vjp_instances)]
    pub vjp_instances: usize,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = SuiteConfig::default().tolerance)]
    pub tolerance: f64,
    #[arg(long, default_value_t = SuiteConfig::default().seed)]
    pub seed: u64,
    /// Deliberately corrupt one backward pass to prove the checker fails.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Clone, Debug, clap::Args)]
pub struct TrainArgs {
    /// TOML config file; missing keys take the documented defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, repeatable: --set stage2_iters=0
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Clone, Debug, clap::Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; an interrupted sweep resumes from its rows.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Clone, Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Checkpoint written by the train subcommand.
    #[arg(long, conflicts_with = "fixture")]
    pub checkpoint: Option<PathBuf>,
    /// Diagnostic reference instead of a checkpoint:
    /// ground-truth (perfect retrieval) or cyclic-shift (consistent-but-wrong).
    #[arg(long)]
    pub fixture: Option<String>,
    /// Optional output directory for metrics.json and the resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Verifies every hand-derived gradient; nonzero exit on any failure.
pub fn gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let cfg = SuiteConfig {
        instances: args.instances,
        param_instances: args.param_instances,
        vjp_instances: args.vjp_instances,
        seed: args.seed,
        tolerance: args.tolerance,
        ..SuiteConfig::default()
    };
    let fault = args.inject_fault.then_some(Fault::FlipInputGradientSign);
    let t0 = Instant::now();
    let reports = run_suite_with_fault(&cfg, fault)?;
    println!("{:<42} {:>6} {:>12} {:>10}  result", "operation", "checks", "max rel err", "tolerance");
    let mut all_ok = true;
    for r in &reports {
        all_ok &= r.passed();
        println!(
            "{:<42} {:>6} {:>12.3e} {:>10.1e}  {}",
            r.op,
            r.checks,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{} operations checked in {:.2}s: {}",
        reports.len(),
        t0.elapsed().as_secs_f64(),
        if all_ok { "all gradients verified" } else { "GRADIENT CHECK FAILED" }
    );
    Ok(if all_ok { 0 } else { 1 })
}

/// Retrieval plus the trivial-solution diagnostic, both on seed-derived
/// streams, so train-time and checkpoint evaluation agree exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub map: f64,
    pub n_queries: usize,
    pub consistency: f64,
    pub identity_match: f64,
    pub flagged: bool,
}

fn evaluate_model(model: &dyn Embedder, world: &IdentityWorld, seed: u64) -> Result<EvalReport> {
    let mut eval_rng = derive_rng(seed, EVAL_STREAM);
    let m = evaluate_retrieval(model, world, world.n_identities(), &mut eval_rng)?;
    let mut probe_rng = derive_rng(seed, DETECTOR_STREAM);
    let t = detect_trivial_solution(
        model,
        world,
        world.n_identities(),
        DETECTOR_PAIRS,
        &mut probe_rng,
    )?;
    Ok(EvalReport {
        rank1: m.rank1,
        map: m.map,
        n_queries: m.n_queries,
        consistency: t.consistency,
        identity_match: t.identity_match,
        flagged: t.flagged,
    })
}

fn print_report(r: &EvalReport) {
    println!("rank-1 {:.4}  mAP {:.4}  ({} queries)", r.rank1, r.map, r.n_queries);
    println!(
        "cycle consistency {:.3}  identity match {:.3}  trivial-solution flag: {}",
        r.consistency, r.identity_match, r.flagged
    );
}

#[derive(Serialize, Deserialize)]
struct TrainSummary {
    iterations: usize,
    final_loss_intra: Option<f64>,
    final_loss_inter: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrainMetricsFile {
    eval: EvalReport,
    train: TrainSummary,
}

#[derive(Serialize, Deserialize)]
struct EvalMetricsFile {
    eval: EvalReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Trains on the configured world and writes config.toml, log.csv,
/// model.json, and metrics.json into the output directory.
pub fn train(args: &TrainArgs) -> Result<i32> {
    let cfg = resolve(args.config.as_deref(), &args.set, &args.overrides)?;
    let train_cfg = cfg.train_config()?;
    let world = cfg.build_world()?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    println!(
        "world: {} identities x {} dims, {} cameras (world seed {})",
        world.n_identities(),
        world.d_obs(),
        world.n_cameras(),
        cfg.world_seed
    );
    let mut model = build_model(&world, &train_cfg, train_cfg.seed)?;
    println!(
        "model: {} -> {} embedder, {} parameters (seed {})",
        model.d_in(),
        model.d_out(),
        model.n_params(),
        train_cfg.seed
    );

    let t0 = Instant::now();
    let log = train_two_stage(&world, &mut model, &train_cfg)?;
    let (final_intra, final_inter) = log.final_losses();
    println!(
        "trained {} iterations in {:.2}s (final loss: intra {}, inter {})",
        log.records.len(),
        t0.elapsed().as_secs_f64(),
        final_intra.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        final_inter.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
    );

    let report = evaluate_model(&model, &world, cfg.seed)?;
    print_report(&report);

    fs::write(args.out.join("config.toml"), cfg.to_toml())?;
    log.write_csv(&args.out.join("log.csv"))?;
    model.save_checkpoint(&args.out.join("model.json"))?;
    let metrics = TrainMetricsFile {
        eval: report,
        train: TrainSummary {
            iterations: log.records.len(),
            final_loss_intra: final_intra,
            final_loss_inter: final_inter,
        },
    };
    write_json(&args.out.join("metrics.json"), &metrics)?;
    println!(
        "wrote {}/{{config.toml, log.csv, model.json, metrics.json}}",
        args.out.display()
    );
    Ok(0)
}

/// Evaluates a checkpoint or a diagnostic fixture on the configured world.
pub fn eval(args: &EvalArgs) -> Result<i32> {
    let cfg = resolve(args.config.as_deref(), &args.set, &args.overrides)?;
    let world = cfg.build_world()?;
    let report = match (&args.checkpoint, args.fixture.as_deref()) {
        (Some(path), None) => {
            let model = LearnedEmbedder::load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            evaluate_model(&model, &world, cfg.seed)?
        }
        (None, Some("ground-truth")) => {
            let fixture = GroundTruthEmbedder::new(world.n_identities())?;
            evaluate_model(&fixture, &world, cfg.seed)?
        }
        (None, Some("cyclic-shift")) => {
            let fixture = CyclicShiftEmbedder::new(world.n_identities())?;
            evaluate_model(&fixture, &world, cfg.seed)?
        }
        (None, Some(other)) => {
            bail!("unknown fixture '{other}' (expected ground-truth or cyclic-shift)")
        }
        _ => bail!("eval needs exactly one of --checkpoint PATH or --fixture NAME"),
    };
    print_report(&report);
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("config.toml"), cfg.to_toml())?;
        write_json(&out.join("metrics.json"), &EvalMetricsFile { eval: report })?;
        println!("wrote {}/{{config.toml, metrics.json}}", out.display());
    }
    Ok(0)
}

#[derive(Serialize)]
struct PointSummary {
    tau_mean: f64,
    n_seeds: usize,
    mean_rank1: f64,
    se_rank1: f64,
    mean_map: f64,
}

#[derive(Serialize)]
struct AlphaVerdict {
    endpoint_gap: f64,
    tolerance: f64,
    within_tolerance: bool,
}

#[derive(Serialize)]
struct BetaVerdict {
    monotone_non_decreasing: bool,
    inversions: usize,
    /// Largest drop between adjacent grid points, 0 when none.
    worst_drop: f64,
    /// True when at most one inversion occurs and it stays within the pooled
    /// standard error of the two points involved.
    monotone_ok: bool,
}

#[derive(Serialize)]
struct SweepSummaryFile {
    axis: String,
    fixed_other: f64,
    n_seeds: usize,
    points: Vec<PointSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<AlphaVerdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<BetaVerdict>,
}

/// One finished sweep row; keyed by grid index and seed.
type SweepRows = BTreeMap<(usize, u64), (f64, f64)>;

fn rows_csv(cfg: &ExperimentConfig, rows: &SweepRows) -> String {
    let mut out = String::from("axis,tau_mean,seed,rank1,map\n");
    for (&(gi, seed), &(rank1, map)) in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            cfg.sweep_axis.as_str(),
            cfg.sweep_grid[gi],
            seed,
            rank1,
            map
        ));
    }
    out
}

/// Reads rows of a previous run of the same sweep; rows that no longer match
/// the grid, the seed range, or the axis are dropped.
fn read_existing_rows(path: &Path, cfg: &ExperimentConfig) -> Result<SweepRows> {
    let mut rows = SweepRows::new();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(rows),
        Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
    };
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            bail!("malformed sweep row '{line}' in {}", path.display());
        }
        if fields[0] != cfg.sweep_axis.as_str() {
            continue;
        }
        let tau: f64 = fields[1].parse().with_context(|| format!("row '{line}'"))?;
        let seed: u64 = fields[2].parse().with_context(|| format!("row '{line}'"))?;
        let rank1: f64 = fields[3].parse().with_context(|| format!("row '{line}'"))?;
        let map: f64 = fields[4].parse().with_context(|| format!("row '{line}'"))?;
        let in_range =
            seed >= cfg.seed && seed < cfg.seed + cfg.sweep_seeds as u64;
        if let Some(gi) = cfg.sweep_grid.iter().position(|&g| g == tau) {
            if in_range {
                rows.insert((gi, seed), (rank1, map));
            }
        }
    }
    Ok(rows)
}

fn mean_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Trains one model per (grid value, seed), appending each finished row to
/// rows.csv so an interrupted sweep resumes where it stopped, then writes the
/// per-point summary.
pub fn sweep(args: &SweepArgs) -> Result<i32> {
    let cfg = resolve(args.config.as_deref(), &args.set, &args.overrides)?;
    let base = cfg.train_config()?;
    if cfg.sweep_grid.is_empty() {
        bail!("sweep_grid must name at least one symmetry mean");
    }
    if cfg.sweep_seeds == 0 {
        bail!("sweep_seeds must be at least 1");
    }
    // Validate every grid value (and the fixed mean) up front.
    for &tau in &cfg.sweep_grid {
        match cfg.sweep_axis {
            SweepAxis::Alpha => SymmetrySchedule::new(tau, cfg.sweep_fixed)?,
            SweepAxis::Beta => SymmetrySchedule::new(cfg.sweep_fixed, tau)?,
        };
    }

    let world = cfg.build_world()?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    // Resuming only makes sense against the identical config; a stale
    // config.toml without rows is just overwritten.
    let rows_path = args.out.join("rows.csv");
    let config_path = args.out.join("config.toml");
    let resolved = cfg.to_toml();
    if rows_path.exists() {
        match fs::read_to_string(&config_path) {
            Ok(prev) if prev == resolved => {}
            _ => bail!(
                "{} holds rows from a different sweep config; use a fresh --out directory",
                args.out.display()
            ),
        }
    }
    fs::write(&config_path, &resolved)?;
    let mut rows = read_existing_rows(&rows_path, &cfg)?;
    let total = cfg.sweep_grid.len() * cfg.sweep_seeds;
    if !rows.is_empty() {
        println!("resuming: {}/{} rows already done", rows.len(), total);
    }

    let t0 = Instant::now();
    for (gi, &tau) in cfg.sweep_grid.iter().enumerate() {
        for s in 0..cfg.sweep_seeds {
            let seed = cfg.seed + s as u64;
            if rows.contains_key(&(gi, seed)) {
                continue;
            }
            let schedule = match cfg.sweep_axis {
                SweepAxis::Alpha => SymmetrySchedule::new(tau, cfg.sweep_fixed)?,
                SweepAxis::Beta => SymmetrySchedule::new(cfg.sweep_fixed, tau)?,
            };
            let run_cfg = TrainConfig { schedule, seed, ..base.clone() };
            let mut model = build_model(&world, &run_cfg, seed)?;
            train_two_stage(&world, &mut model, &run_cfg)?;
            let mut eval_rng = derive_rng(seed, EVAL_STREAM);
            let m = evaluate_retrieval(&model, &world, world.n_identities(), &mut eval_rng)?;
            rows.insert((gi, seed), (m.rank1, m.map));
            fs::write(&rows_path, rows_csv(&cfg, &rows))?;
            println!(
                "{} = {}  seed {}: rank-1 {:.4}  mAP {:.4}  [{}/{}]",
                cfg.sweep_axis.as_str(),
                tau,
                seed,
                m.rank1,
                m.map,
                rows.len(),
                total
            );
        }
    }

    let mut points = Vec::with_capacity(cfg.sweep_grid.len());
    for (gi, &tau) in cfg.sweep_grid.iter().enumerate() {
        let rank1s: Vec<f64> =
            rows.iter().filter(|((g, _), _)| *g == gi).map(|(_, &(r, _))| r).collect();
        let maps: Vec<f64> =
            rows.iter().filter(|((g, _), _)| *g == gi).map(|(_, &(_, m))| m).collect();
        let (mean_rank1, se_rank1) = mean_se(&rank1s);
        let (mean_map, _) = mean_se(&maps);
        points.push(PointSummary {
            tau_mean: tau,
            n_seeds: rank1s.len(),
            mean_rank1,
            se_rank1,
            mean_map,
        });
    }

    let alpha = (cfg.sweep_axis == SweepAxis::Alpha && points.len() >= 2).then(|| {
        let gap = (points.last().unwrap().mean_rank1 - points[0].mean_rank1).abs();
        AlphaVerdict {
            endpoint_gap: gap,
            tolerance: ALPHA_ENDPOINT_TOLERANCE,
            within_tolerance: gap <= ALPHA_ENDPOINT_TOLERANCE,
        }
    });
    let beta = (cfg.sweep_axis == SweepAxis::Beta && points.len() >= 2).then(|| {
        let mut inversions = 0usize;
        let mut worst_drop = 0.0f64;
        let mut all_within_se = true;
        for pair in points.windows(2) {
            let drop = pair[0].mean_rank1 - pair[1].mean_rank1;
            if drop > 0.0 {
                inversions += 1;
                worst_drop = worst_drop.max(drop);
                let pooled = (pair[0].se_rank1.powi(2) + pair[1].se_rank1.powi(2)).sqrt();
                all_within_se &= drop <= pooled;
            }
        }
        BetaVerdict {
            monotone_non_decreasing: inversions == 0,
            inversions,
            worst_drop,
            monotone_ok: inversions == 0 || (inversions == 1 && all_within_se),
        }
    });

    for p in &points {
        println!(
            "{} = {}: mean rank-1 {:.4} (se {:.4}, {} seeds)",
            cfg.sweep_axis.as_str(),
            p.tau_mean,
            p.mean_rank1,
            p.se_rank1,
            p.n_seeds
        );
    }
    match (&alpha, &beta) {
        (Some(a), _) => println!(
            "endpoint gap {:.4} (tolerance {}): {}",
            a.endpoint_gap,
            a.tolerance,
            if a.within_tolerance { "within tolerance" } else { "EXCEEDS tolerance" }
        ),
        (_, Some(b)) => println!(
            "monotone non-decreasing: {} ({} inversions, worst drop {:.4})",
            b.monotone_ok, b.inversions, b.worst_drop
        ),
        _ => {}
    }

    let summary = SweepSummaryFile {
        axis: cfg.sweep_axis.as_str().to_string(),
        fixed_other: cfg.sweep_fixed,
        n_seeds: cfg.sweep_seeds,
        points,
        alpha,
        beta,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "{} rows in {:.1}s; wrote {}/{{rows.csv, summary.json, config.toml}}",
        total,
        t0.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(0)
}
