//! Experiment driver: generate synthetic heavy-tailed mixtures, run the
//! recovery pipeline or its stages on CSV data, and score estimates against
//! ground truth. Data is CSV, configs and reports are JSON, and every random
//! choice derives from one root seed, so runs replay exactly.

// Validation uses `!(x > 0.0)` on purpose: unlike `x <= 0.0`, it also fails
// NaN, which must never pass a range check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use heavyica::damping::{damp, damped_cum4_bound_check, select_r};
use heavyica::fourier::recover_unitary;
use heavyica::geometry::{covariance_query_eps, orthogonalize};
use heavyica::moments::{required_samples, MomentBound};
use heavyica::oracle::{MembershipOracle, OracleParams};
use heavyica::pipeline::{baseline_whitening, match_and_score, run_pipeline};
use heavyica::rng;
use heavyica::sources::{symmetrize, SampleMatrix};
use heavyica::{Error, Result, WalkParams};
use nalgebra::DMatrix;
use rayon::prelude::*;

use config::ExperimentConfig;
use report::{
    matrix_rows, rows_matrix, CompareBaselineReport, CompareSeedRow, DampReport, EvaluateReport,
    FailureReport, MatchReport, ModelSidecar, OrthogonalizeReport, PipelineReport, RecoverReport,
};

#[derive(Parser)]
#[command(
    name = "heavyica",
    version,
    about = "Heavy-tailed ICA experiments: centroid-body orthogonalization plus gaussian damping"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Root seed override; defaults to the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run on this CSV instead of generating data from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model sidecar (JSON) supplying ground truth for scoring when data
    /// comes from a file.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw sources, mix them, and write data.csv plus model.json.
    Generate(CommonArgs),
    /// Symmetrize and whiten through the centroid-body walk; writes the
    /// orthogonalized CSV and a report with B and Sigma.
    Orthogonalize(DataArgs),
    /// Select a damping radius and write the damped batch plus a report.
    Damp(DataArgs),
    /// Eigen-recovery of orthonormal mixing columns. With --data, runs
    /// directly on the given (already damped) batch; otherwise generates
    /// from the config and runs the damping-only pipeline.
    Recover(DataArgs),
    /// Full run: symmetrize, orthogonalize, damp, recover, score.
    Pipeline(DataArgs),
    /// Score an estimated mixing matrix against ground truth.
    Evaluate(EvaluateArgs),
    /// Paired-seed comparison of centroid whitening against covariance
    /// whitening on the config's instance.
    CompareBaseline(CompareArgs),
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSON holding the estimate: a pipeline report (key "b_mix"), a model
    /// sidecar (key "a"), or a bare {"rows": [[...]]} matrix.
    #[arg(long)]
    estimate: PathBuf,
    /// JSON holding the truth, same accepted shapes.
    #[arg(long)]
    truth: PathBuf,
    /// Where to write report.json; omitted means stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Paired seeds to run.
    #[arg(long, default_value_t = 5)]
    trials: u64,
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("HEAVYICA_THREADS") {
        match v.parse::<usize>() {
            Ok(k) if k > 0 => {
                // Ignore the error if a pool already exists; the variable is
                // a cap, not a guarantee.
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build_global();
            }
            _ => {
                eprintln!("warning: HEAVYICA_THREADS={v} is not a positive integer; ignoring");
            }
        }
    }

    let cli = Cli::parse();
    let (name, outcome) = match cli.cmd {
        Cmd::Generate(a) => ("generate", cmd_generate(&a)),
        Cmd::Orthogonalize(a) => ("orthogonalize", cmd_orthogonalize(&a)),
        Cmd::Damp(a) => ("damp", cmd_damp(&a)),
        Cmd::Recover(a) => ("recover", cmd_recover(&a)),
        Cmd::Pipeline(a) => ("pipeline", cmd_pipeline(&a)),
        Cmd::Evaluate(a) => ("evaluate", cmd_evaluate(&a)),
        Cmd::CompareBaseline(a) => ("compare-baseline", cmd_compare_baseline(&a)),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let failure = FailureReport::from_error(&e, name);
            eprintln!(
                "{}",
                serde_json::to_string(&failure).expect("failure report serializes")
            );
            ExitCode::FAILURE
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn guard_overwrite(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("cannot serialize report: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad JSON {}: {e}", path.display())))
}

struct LoadedRun {
    cfg: ExperimentConfig,
    root_seed: u64,
    data: SampleMatrix,
    /// Ground truth, when available (generated in-process or via --model).
    truth: Option<TruthInfo>,
}

struct TruthInfo {
    a: DMatrix<f64>,
    s_min: f64,
    s_max: f64,
}

/// Load config, then either generate the observation matrix or read the CSV
/// given on the command line (with its optional model sidecar).
fn load_run(common: &CommonArgs, data: Option<&Path>, model: Option<&Path>) -> Result<LoadedRun> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let root_seed = common.seed.unwrap_or(cfg.seed);
    match data {
        Some(csv) => {
            let x = SampleMatrix::read_csv(csv)?;
            if x.dim() != cfg.sources.len() {
                return Err(Error::Config(format!(
                    "{} has {} columns but the config lists {} sources",
                    csv.display(),
                    x.dim(),
                    cfg.sources.len()
                )));
            }
            let truth = match model {
                Some(p) => {
                    let sidecar: ModelSidecar =
                        serde_json::from_value(read_json(p)?).map_err(|e| {
                            Error::Config(format!("bad model sidecar {}: {e}", p.display()))
                        })?;
                    Some(TruthInfo {
                        a: rows_matrix(&sidecar.a)?,
                        s_min: sidecar.s_min,
                        s_max: sidecar.s_max,
                    })
                }
                None => None,
            };
            Ok(LoadedRun {
                cfg,
                root_seed,
                data: x,
                truth,
            })
        }
        None => {
            let model = cfg.build_model(root_seed)?;
            let x = model.observe(cfg.n_samples, rng::derive_seed(root_seed, "cli:data", 0))?;
            let truth = Some(TruthInfo {
                a: model.a.clone(),
                s_min: model.s_min,
                s_max: model.s_max,
            });
            Ok(LoadedRun {
                cfg,
                root_seed,
                data: x,
                truth,
            })
        }
    }
}

fn singular_bounds(run: &LoadedRun) -> (f64, f64) {
    match &run.truth {
        Some(t) => (t.s_min, t.s_max),
        // Without ground truth the config must say; unit bounds otherwise.
        None => (1.0, 1.0),
    }
}

/// Drop an odd trailing row, then pairwise-difference.
fn symmetrized(x: &SampleMatrix) -> Result<SampleMatrix> {
    let rows = x.n_samples();
    if rows.is_multiple_of(2) {
        symmetrize(x)
    } else {
        let trimmed = SampleMatrix::from_data(
            x.data.rows(0, rows - 1).into_owned(),
            x.seed,
            x.model_id.clone(),
        );
        symmetrize(&trimmed)
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_generate(args: &CommonArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let root_seed = args.seed.unwrap_or(cfg.seed);
    let model = cfg.build_model(root_seed)?;
    let data_seed = rng::derive_seed(root_seed, "cli:data", 0);
    let x = model.observe(cfg.n_samples, data_seed)?;

    ensure_out_dir(&args.out)?;
    let data_path = args.out.join("data.csv");
    let model_path = args.out.join("model.json");
    guard_overwrite(&[data_path.clone(), model_path.clone()], args.force)?;

    x.write_csv(&data_path)?;
    write_json(
        &model_path,
        &ModelSidecar::new(&model, cfg.n_samples, root_seed, data_seed),
    )?;
    println!(
        "wrote {} ({} rows, {} columns) and {}",
        data_path.display(),
        x.n_samples(),
        x.dim(),
        model_path.display()
    );
    Ok(())
}

fn cmd_orthogonalize(args: &DataArgs) -> Result<()> {
    let run = load_run(&args.common, args.data.as_deref(), args.model.as_deref())?;
    if run.cfg.has_first_momentless_source() {
        return Err(Error::Config(
            "orthogonalization needs finite first moments; these sources only support the \
             damping-only path (recover with assume_unitary)"
                .into(),
        ));
    }
    let (s_min, s_max) = singular_bounds(&run);
    let cfg = run.cfg.pipeline_config(s_min, s_max, run.root_seed);

    let n = run.data.dim();
    let sym = symmetrized(&run.data)?;
    let eps_c = covariance_query_eps(cfg.eps, n);
    let mut oracle_params = OracleParams::for_centroid(
        n,
        cfg.s_min,
        cfg.s_max,
        eps_c,
        cfg.delta,
        cfg.n_freeze.min(sym.n_samples()),
        rng::derive_seed(cfg.seed, "pipeline:oracle", 0),
    )?
    .widened_for_symmetrized();
    oracle_params.solver = cfg.solver;
    oracle_params.query_budget = cfg.query_budget;
    let oracle = MembershipOracle::centroid(&sym, oracle_params)?;

    let mut warnings = Vec::new();
    let bound_eps = oracle_params.validity_eps();
    if bound_eps > 0.0 && bound_eps < 1.0 {
        if let Ok(bound) = MomentBound::new(cfg.moment_m, cfg.gamma, bound_eps, cfg.delta) {
            if let Ok(req) = required_samples(&bound, n, cfg.s_max) {
                let frozen = oracle.frozen().n_samples() as u64;
                if frozen < req {
                    warnings.push(format!(
                        "support estimates use {frozen} frozen samples; the worst-case bound \
                         for per-direction accuracy {bound_eps:.3e} asks for {req}"
                    ));
                }
            }
        }
    }

    let mut walk = cfg
        .walk
        .unwrap_or_else(|| WalkParams::default_for_dim(n, 0));
    walk.seed = rng::derive_seed(cfg.seed, "pipeline:walk", 0);
    let (y, orth) = orthogonalize(&sym, &oracle, cfg.walk_points, &walk)?;

    ensure_out_dir(&args.common.out)?;
    let csv_path = args.common.out.join("orthogonalized.csv");
    let report_path = args.common.out.join("report.json");
    let mut outputs = vec![csv_path.clone(), report_path.clone()];
    let sym_path = args.common.out.join("symmetrized.csv");
    if cfg.keep_stages {
        outputs.push(sym_path.clone());
    }
    guard_overwrite(&outputs, args.common.force)?;

    y.write_csv(&csv_path)?;
    if cfg.keep_stages {
        sym.write_csv(&sym_path)?;
    }
    let report = OrthogonalizeReport {
        dim: n,
        rows_in: run.data.n_samples(),
        rows_symmetrized: sym.n_samples(),
        seed: run.root_seed,
        b: matrix_rows(&orth.b),
        sigma: matrix_rows(&orth.cov.sigma),
        walk: orth.cov.walk,
        oracle_queries: oracle.total_queries(),
        eps_c,
        sample_budget_warning: report::sample_budget_warning(&warnings),
        warnings,
    };
    write_json(&report_path, &report)?;
    println!(
        "wrote {} and {} ({} oracle queries)",
        csv_path.display(),
        report_path.display(),
        report.oracle_queries
    );
    Ok(())
}

fn cmd_damp(args: &DataArgs) -> Result<()> {
    let run = load_run(&args.common, args.data.as_deref(), args.model.as_deref())?;
    let (s_min, s_max) = singular_bounds(&run);
    let cfg = run.cfg.pipeline_config(s_min, s_max, run.root_seed);

    let mut damping_cfg = cfg.damping;
    damping_cfg.seed = rng::derive_seed(cfg.seed, "pipeline:damping", 0);
    let params = select_r(&run.data, &damping_cfg)?;
    let batch = damp(
        &run.data,
        params.r,
        rng::derive_seed(cfg.seed, "pipeline:damp", 0),
    )?;
    let bound_check = damped_cum4_bound_check(
        &batch,
        params.c1,
        rng::derive_seed(cfg.seed, "cli:bound-check", 0),
    )?;

    ensure_out_dir(&args.common.out)?;
    let csv_path = args.common.out.join("damped.csv");
    let report_path = args.common.out.join("report.json");
    guard_overwrite(&[csv_path.clone(), report_path.clone()], args.common.force)?;

    batch.samples.write_csv(&csv_path)?;
    let report = DampReport {
        dim: run.data.dim(),
        rows_in: run.data.n_samples(),
        seed: run.root_seed,
        acceptance_rate: batch.acceptance_rate,
        accepted: batch.accepted(),
        attempted: batch.attempted,
        params,
        bound_check,
    };
    write_json(&report_path, &report)?;
    println!(
        "wrote {} ({} of {} rows kept at R = {:.4}) and {}",
        csv_path.display(),
        report.accepted,
        report.attempted,
        report.params.r,
        report_path.display()
    );
    Ok(())
}

fn cmd_recover(args: &DataArgs) -> Result<()> {
    match &args.data {
        // Pure stage: the input is an already-damped batch.
        Some(csv) => {
            let run = load_run(&args.common, Some(csv), args.model.as_deref())?;
            let cfg = {
                let (s_min, s_max) = singular_bounds(&run);
                run.cfg.pipeline_config(s_min, s_max, run.root_seed)
            };
            let mut probe = cfg.probe.clone();
            probe.seed = rng::derive_seed(cfg.seed, "pipeline:probe", 0);
            let (v, diagnostics) = recover_unitary(&run.data, &probe)?;
            let match_score = match &run.truth {
                Some(t) => Some(MatchReport::from(&match_and_score(&v, &t.a)?)),
                None => None,
            };

            ensure_out_dir(&args.common.out)?;
            let report_path = args.common.out.join("report.json");
            guard_overwrite(std::slice::from_ref(&report_path), args.common.force)?;
            let report = RecoverReport {
                dim: run.data.dim(),
                rows_in: run.data.n_samples(),
                seed: run.root_seed,
                v: matrix_rows(&v),
                recovery: diagnostics,
                match_score,
            };
            write_json(&report_path, &report)?;
            println!("wrote {}", report_path.display());
            Ok(())
        }
        // Damping-only pipeline on generated data; the mixing must already
        // be orthonormal for the result to mean anything.
        None => {
            let run = load_run(&args.common, None, None)?;
            let (s_min, s_max) = singular_bounds(&run);
            let mut cfg = run.cfg.pipeline_config(s_min, s_max, run.root_seed);
            cfg.assume_unitary = true;
            let truth = run.truth.as_ref().map(|t| t.a.clone());
            let res = run_pipeline(&run.data, truth.as_ref(), &cfg)?;
            write_pipeline_outputs(&args.common, &run, &res, &cfg)
        }
    }
}

fn cmd_pipeline(args: &DataArgs) -> Result<()> {
    let run = load_run(&args.common, args.data.as_deref(), args.model.as_deref())?;
    if run.cfg.has_first_momentless_source() && !run.cfg.assume_unitary {
        return Err(Error::Config(
            "sources without a first moment cannot be orthogonalized; set assume_unitary \
             (the mixing must be orthonormal) to run the damping-only path"
                .into(),
        ));
    }
    let (s_min, s_max) = singular_bounds(&run);
    let cfg = run.cfg.pipeline_config(s_min, s_max, run.root_seed);
    let truth = run.truth.as_ref().map(|t| t.a.clone());
    let res = run_pipeline(&run.data, truth.as_ref(), &cfg)?;
    write_pipeline_outputs(&args.common, &run, &res, &cfg)
}

fn write_pipeline_outputs(
    common: &CommonArgs,
    run: &LoadedRun,
    res: &heavyica::pipeline::RecoveryResult,
    cfg: &heavyica::PipelineConfig,
) -> Result<()> {
    ensure_out_dir(&common.out)?;
    let report_path = common.out.join("report.json");
    let mut outputs = vec![report_path.clone()];
    let stage_paths = [
        common.out.join("symmetrized.csv"),
        common.out.join("orthogonalized.csv"),
        common.out.join("damped.csv"),
    ];
    if cfg.keep_stages {
        outputs.extend(stage_paths.iter().cloned());
    }
    guard_overwrite(&outputs, common.force)?;

    if let Some(stages) = &res.stages {
        stages.symmetrized.write_csv(&stage_paths[0])?;
        stages.orthogonalized.write_csv(&stage_paths[1])?;
        stages.damped.write_csv(&stage_paths[2])?;
    }
    let report = PipelineReport::new(res, run.data.dim(), run.data.n_samples(), run.root_seed);
    write_json(&report_path, &report)?;
    match &report.match_score {
        Some(m) => println!(
            "wrote {} (max column error {:.4}, amari {:.4})",
            report_path.display(),
            m.max_error,
            m.amari_index
        ),
        None => println!("wrote {}", report_path.display()),
    }
    Ok(())
}

/// Accept a matrix from a pipeline report ("b_mix"), a model sidecar ("a"),
/// a recover report ("v"), or a bare {"rows": ...} document.
fn matrix_from_json(path: &Path) -> Result<DMatrix<f64>> {
    let value = read_json(path)?;
    for key in ["b_mix", "a", "v", "rows"] {
        if let Some(node) = value.get(key) {
            let rows: Vec<Vec<f64>> = serde_json::from_value(node.clone()).map_err(|e| {
                Error::Config(format!(
                    "{} has a malformed {key} matrix: {e}",
                    path.display()
                ))
            })?;
            return rows_matrix(&rows);
        }
    }
    Err(Error::Config(format!(
        "{} holds no matrix under any of the keys b_mix, a, v, rows",
        path.display()
    )))
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let est = matrix_from_json(&args.estimate)?;
    let truth = matrix_from_json(&args.truth)?;
    let score = match_and_score(&est, &truth)?;
    let report = EvaluateReport {
        dim: truth.nrows(),
        match_score: MatchReport::from(&score),
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("cannot serialize report: {e}")))?;
    println!("{text}");
    if let Some(dir) = &args.out {
        ensure_out_dir(dir)?;
        let path = dir.join("report.json");
        guard_overwrite(std::slice::from_ref(&path), args.force)?;
        std::fs::write(&path, text)
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_compare_baseline(args: &CompareArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.common.config)?;
    if cfg.has_first_momentless_source() {
        return Err(Error::Config(
            "the whitening comparison needs finite first moments".into(),
        ));
    }
    if args.trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    let root_seed = args.common.seed.unwrap_or(cfg.seed);

    // Paired seeds run in parallel; each trial draws its own model and data.
    let rows: Vec<Result<CompareSeedRow>> = (0..args.trials)
        .into_par_iter()
        .map(|k| compare_one(&cfg, root_seed, k))
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let centroid_wins = rows.iter().filter(|r| r.centroid_won).count();

    ensure_out_dir(&args.common.out)?;
    let report_path = args.common.out.join("report.json");
    guard_overwrite(std::slice::from_ref(&report_path), args.common.force)?;
    let report = CompareBaselineReport {
        trials: rows.len(),
        centroid_wins,
        rows,
    };
    write_json(&report_path, &report)?;
    println!(
        "wrote {} (centroid map won {}/{} trials)",
        report_path.display(),
        report.centroid_wins,
        report.trials
    );
    Ok(())
}

fn compare_one(cfg: &ExperimentConfig, root_seed: u64, k: u64) -> Result<CompareSeedRow> {
    let trial_seed = rng::derive_seed(root_seed, "cli:compare-trial", k);
    let model = cfg.build_model(trial_seed)?;
    let x = model.observe(cfg.n_samples, rng::derive_seed(trial_seed, "cli:data", 0))?;
    let pipe = cfg.pipeline_config(model.s_min, model.s_max, trial_seed);

    let n = x.dim();
    let sym = symmetrized(&x)?;
    let eps_c = covariance_query_eps(pipe.eps, n);
    let mut oracle_params = OracleParams::for_centroid(
        n,
        pipe.s_min,
        pipe.s_max,
        eps_c,
        pipe.delta,
        pipe.n_freeze.min(sym.n_samples()),
        rng::derive_seed(pipe.seed, "pipeline:oracle", 0),
    )?
    .widened_for_symmetrized();
    oracle_params.solver = pipe.solver;
    oracle_params.query_budget = pipe.query_budget;
    let oracle = MembershipOracle::centroid(&sym, oracle_params)?;
    let mut walk = pipe
        .walk
        .unwrap_or_else(|| WalkParams::default_for_dim(n, 0));
    walk.seed = rng::derive_seed(pipe.seed, "pipeline:walk", 0);
    let (_, orth) = orthogonalize(&sym, &oracle, pipe.walk_points, &walk)?;
    let (_, w) = baseline_whitening(&sym)?;

    let centroid_spread = conditioning_spread(&(&orth.b * &model.a));
    let whitening_spread = conditioning_spread(&(&w * &model.a));
    Ok(CompareSeedRow {
        seed_index: k,
        centroid_spread,
        whitening_spread,
        centroid_won: centroid_spread > whitening_spread,
    })
}

/// Smallest over largest eigenvalue of `(MA)^T MA`. Both maps zero the
/// off-diagonal on their own batch, so the honest contrast is how well
/// conditioned the orthogonalized mixing is: the centroid map's spectrum is
/// pinned by the body geometry, while whitening inherits the unbounded
/// fluctuation of heavy-tailed variance estimates.
fn conditioning_spread(ma: &DMatrix<f64>) -> f64 {
    let m = ma.transpose() * ma;
    let eig = nalgebra::SymmetricEigen::new(m);
    eig.eigenvalues.min() / eig.eigenvalues.max()
}
