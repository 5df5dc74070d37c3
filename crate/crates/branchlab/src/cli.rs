//! Command-line pipeline: spectrum → decompose → constants → moments →
//! simulate → verify, plus closed-form oracles for debugging.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 verification
//! failure (a check ran and did not pass), 3 internal error.

use crate::decompose::{self, Decomposition};
use crate::model::{self, BranchingModel};
use crate::moments::{MomentEngine, VarianceConstants};
use crate::simulate::{self, ObservableSpec, SimOptions};
use crate::spectral::{self, EigenBasis, SpectralDeclaration, Spectrum};
use crate::verify::{self, CltComponent, EnsembleData, HeydeInput, LilMode};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_VERIFY_FAILED: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn verify_failed(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VERIFY_FAILED,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "branchlab",
    about = "Spectral analysis and exact Monte Carlo for supercritical branching processes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalues, Jordan structure and biorthogonal bases of the mean
    /// generator.
    Spectrum(SpectrumArgs),
    /// Project a test function and split it into large/critical/small
    /// components.
    Decompose(DecomposeArgs),
    /// Limiting variance constants σ²_sm, σ²_cr, σ²_la.
    Constants(ConstantsArgs),
    /// Exact moments of ⟨f, X_t⟩ along a grid (ODE route) with CSV
    /// output.
    Moments(MomentsArgs),
    /// Exact event-driven ensemble simulation with CSV output.
    Simulate(SimulateArgs),
    /// Statistical verification against ensemble output.
    Verify(VerifyArgs),
    /// Closed-form single-state references (debugging aid).
    #[command(hide = true)]
    Oracle(OracleArgs),
}

#[derive(Args)]
struct ModelArg {
    /// Model JSON file ({d, Q, beta, offspring}).
    model: PathBuf,
    /// Declared spectral structure JSON (eigenvalues + block sizes),
    /// for defective or nearly-defective generators.
    #[arg(long)]
    declared: Option<PathBuf>,
    /// Eigenvalue clustering tolerance.
    #[arg(long, default_value_t = spectral::DEFAULT_CLUSTER_TOL)]
    cluster_tol: f64,
}

#[derive(Args)]
struct SpectrumArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Output JSON path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Test function: `phi1`, `ones`, `e:<state>`, or an inline JSON
    /// array like `[1,0]`.
    #[arg(long)]
    f: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConstantsArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    f: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MomentsArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    f: String,
    /// Grid end.
    #[arg(long)]
    t_max: f64,
    /// Grid step.
    #[arg(long)]
    step: f64,
    /// Highest moment order (1–4).
    #[arg(long, default_value_t = 4)]
    order: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// MomentTable CSV (columns t, x, m1..m4).
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    f: String,
    /// Initial counts per state, comma separated (e.g. `1,0`).
    #[arg(long)]
    initial: String,
    #[arg(long)]
    t_max: f64,
    #[arg(long)]
    step: f64,
    #[arg(long)]
    reps: u64,
    /// Master seed; replicate r uses the documented child stream
    /// key(seed, r). Required: no implicit entropy.
    #[arg(long)]
    seed: u64,
    /// Clusters whose martingale rows H^(k) are recorded (1-based,
    /// comma separated).
    #[arg(long, default_value = "1")]
    observe_k: String,
    #[arg(long, default_value_t = simulate::DEFAULT_POP_CAP)]
    pop_cap: u64,
    /// Ensemble CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional summary JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyMode {
    Clt,
    Lil,
    Martingale,
    Heyde,
}

#[derive(Clone, Copy, ValueEnum)]
enum ComponentArg {
    Sm,
    Cr,
    La,
}

#[derive(Clone, Copy, ValueEnum)]
enum LilModeArg {
    Noncritical,
    Critical,
}

#[derive(Args)]
struct VerifyArgs {
    /// What to verify.
    #[arg(value_enum)]
    mode: VerifyMode,
    /// Model JSON (single-state for heyde unless --pmf is given).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    declared: Option<PathBuf>,
    /// Ensemble CSV produced by `simulate`.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    #[arg(long)]
    f: Option<String>,
    /// Constants JSON from `constants` (recomputed when omitted).
    #[arg(long)]
    constants: Option<PathBuf>,
    /// CLT: time at which the statistic is formed.
    #[arg(long)]
    t: Option<f64>,
    /// CLT: which component.
    #[arg(long, value_enum)]
    component: Option<ComponentArg>,
    #[arg(long, default_value_t = verify::DEFAULT_KS_TOL)]
    ks_tol: f64,
    #[arg(long, default_value_t = verify::DEFAULT_VARIANCE_TOL)]
    v_tol: f64,
    /// LIL: normalization mode.
    #[arg(long, value_enum)]
    lil_mode: Option<LilModeArg>,
    #[arg(long, default_value_t = verify::DEFAULT_WINDOW_LO)]
    window_lo: f64,
    /// LIL: window end (horizon − 4 when omitted).
    #[arg(long)]
    window_hi: Option<f64>,
    #[arg(long, default_value_t = verify::DEFAULT_BAND.0)]
    band_lo: f64,
    #[arg(long, default_value_t = verify::DEFAULT_BAND.1)]
    band_hi: f64,
    /// LIL: minimal in-band fraction counted as a pass.
    #[arg(long, default_value_t = 0.8)]
    min_fraction: f64,
    /// Martingale: 1-based cluster index.
    #[arg(long)]
    k: Option<usize>,
    /// Heyde: discrete offspring pmf `p0,p1,p2,...`.
    #[arg(long)]
    pmf: Option<String>,
    /// Report JSON path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plot-ready CSV of the empirical distribution.
    #[arg(long)]
    dist_csv: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(subcommand)]
    which: OracleCommand,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Geometric-law moments of unit-rate binary fission.
    Yule {
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long)]
        t: f64,
    },
    /// Extinction probability of the binary birth–death process.
    Extinction {
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long)]
        p0: f64,
        #[arg(long)]
        p2: f64,
        #[arg(long)]
        t: f64,
    },
}

/// Entry point used by `main`; returns the process exit code.
pub fn run() -> i32 {
    run_from(std::env::args().collect::<Vec<_>>())
}

/// Testable entry point.
pub fn run_from(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits; everything
            // else is a usage error (exit 1 with usage text).
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                EXIT_OK
            } else {
                EXIT_VALIDATION
            };
        }
    };
    let result = match cli.command {
        Command::Spectrum(args) => cmd_spectrum(args),
        Command::Decompose(args) => cmd_decompose(args),
        Command::Constants(args) => cmd_constants(args),
        Command::Moments(args) => cmd_moments(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Oracle(args) => cmd_oracle(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

// ---------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------

struct Pipeline {
    model: BranchingModel,
    spectrum: Spectrum,
    basis: EigenBasis,
}

fn load_pipeline(arg: &ModelArg) -> Result<Pipeline, CliError> {
    load_pipeline_at(&arg.model, arg.declared.as_deref(), arg.cluster_tol)
}

fn load_pipeline_at(
    model_path: &Path,
    declared: Option<&Path>,
    cluster_tol: f64,
) -> Result<Pipeline, CliError> {
    let model = model::load_model(model_path).map_err(|e| CliError::validation(e.to_string()))?;
    let l = model::mean_generator(&model);
    let pair = match declared {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
            let declaration: SpectralDeclaration = serde_json::from_str(&text)
                .map_err(|e| CliError::validation(format!("declaration parse: {e}")))?;
            spectral::declared_structure(&l, &declaration)
        }
        None => spectral::compute_spectrum(&l, cluster_tol),
    };
    let (spectrum, basis) = pair.map_err(|e| CliError::validation(e.to_string()))?;
    Ok(Pipeline {
        model,
        spectrum,
        basis,
    })
}

fn resolve_f(spec: &str, pipeline: &Pipeline) -> Result<DVector<f64>, CliError> {
    let d = pipeline.model.dim();
    let parsed: Option<DVector<f64>> = match spec {
        "phi1" => Some(pipeline.basis.phi1().clone()),
        "ones" => Some(DVector::from_element(d, 1.0)),
        other if other.starts_with("e:") => {
            let idx: usize = other[2..]
                .parse()
                .map_err(|_| CliError::validation(format!("bad state index in f spec `{other}`")))?;
            if idx >= d {
                return Err(CliError::validation(format!(
                    "f spec `{other}` indexes state {idx}, model has d = {d}"
                )));
            }
            let mut v = DVector::zeros(d);
            v[idx] = 1.0;
            Some(v)
        }
        other if other.starts_with('[') => {
            let vals: Vec<f64> = serde_json::from_str(other)
                .map_err(|e| CliError::validation(format!("inline f parse: {e}")))?;
            if vals.len() != d {
                return Err(CliError::validation(format!(
                    "inline f has length {}, model has d = {d}",
                    vals.len()
                )));
            }
            Some(DVector::from_vec(vals))
        }
        _ => None,
    };
    parsed.ok_or_else(|| {
        CliError::validation(format!(
            "unrecognized f spec `{spec}` (use phi1 | ones | e:<state> | [..])"
        ))
    })
}

fn make_grid(t_max: f64, step: f64) -> Result<Vec<f64>, CliError> {
    if !(t_max > 0.0) || !(step > 0.0) || step > t_max {
        return Err(CliError::validation("need 0 < step <= t_max"));
    }
    let n = (t_max / step).round() as usize;
    Ok((0..=n).map(|i| i as f64 * step).collect())
}

fn complex_json(z: &num_complex::Complex64) -> serde_json::Value {
    json!({"re": z.re, "im": z.im})
}

fn matrix_json(m: &nalgebra::DMatrix<num_complex::Complex64>) -> serde_json::Value {
    let rows: Vec<Vec<serde_json::Value>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| complex_json(&m[(i, j)])).collect())
        .collect();
    json!(rows)
}

/// Every number in emitted JSON must be finite.
fn assert_finite(value: &serde_json::Value) -> Result<(), CliError> {
    match value {
        serde_json::Value::Number(n) => {
            if n.as_f64().map_or(false, |x| !x.is_finite()) {
                Err(CliError::internal("non-finite numeric in JSON output"))
            } else {
                Ok(())
            }
        }
        serde_json::Value::Null => Ok(()),
        serde_json::Value::Array(items) => items.iter().try_for_each(assert_finite),
        serde_json::Value::Object(map) => map.values().try_for_each(assert_finite),
        _ => Ok(()),
    }
}

fn emit_json(value: &serde_json::Value, out: Option<&Path>) -> CliResult {
    assert_finite(value)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::internal(format!("JSON encoding: {e}")))?;
    match out {
        Some(path) => std::fs::write(path, text.as_bytes())
            .map_err(|e| CliError::internal(format!("{}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::internal(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text.as_bytes())
        .map_err(|e| CliError::internal(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------

fn cmd_spectrum(args: SpectrumArgs) -> CliResult {
    let p = load_pipeline(&args.model)?;
    let lc = crate::linalg::to_complex(&model::mean_generator(&p.model));
    // Residuals recomputed for the report.
    let mut biorth_residual = 0.0f64;
    for k in 0..p.spectrum.count() {
        for kk in 0..p.spectrum.count() {
            let gram = p.basis.phi(k).transpose() * p.basis.phi_hat(kk).map(|z| z.conj());
            for i in 0..gram.nrows() {
                for j in 0..gram.ncols() {
                    let expected = if k == kk && i == j { 1.0 } else { 0.0 };
                    biorth_residual = biorth_residual.max((gram[(i, j)] - expected).norm());
                }
            }
        }
    }
    let mut action_residual = 0.0f64;
    for k in 0..p.spectrum.count() {
        let st = p.spectrum.structure(k);
        let nk = st.multiplicity;
        let mut upper = nalgebra::DMatrix::<num_complex::Complex64>::identity(nk, nk)
            * (-p.spectrum.lambda(k));
        let mut pos = 0;
        for &size in &st.block_sizes {
            for i in 1..size {
                upper[(pos + i - 1, pos + i)] = num_complex::Complex64::new(1.0, 0.0);
            }
            pos += size;
        }
        let diff = &lc * p.basis.phi(k) - p.basis.phi(k) * upper;
        action_residual = action_residual.max(diff.iter().map(|z| z.norm()).fold(0.0, f64::max));
    }

    let clusters: Vec<serde_json::Value> = (0..p.spectrum.count())
        .map(|k| {
            json!({
                "k": k + 1,
                "lambda": complex_json(&p.spectrum.lambda(k)),
                "generator_eigenvalue": complex_json(&(-p.spectrum.lambda(k))),
                "multiplicity": p.spectrum.structure(k).multiplicity,
                "block_sizes": p.spectrum.structure(k).block_sizes,
                "conjugate_of": p.spectrum.conjugate(k) + 1,
                "class": to_value(&p.spectrum.class_of(k)).unwrap_or(serde_json::Value::Null),
                "phi": matrix_json(p.basis.phi(k)),
                "phi_hat": matrix_json(p.basis.phi_hat(k)),
            })
        })
        .collect();
    let report = json!({
        "d": p.model.dim(),
        "lambda_1": p.spectrum.lambda1(),
        "supercritical": p.spectrum.lambda1() < 0.0,
        "phi_1": p.basis.phi1().as_slice(),
        "phi_1_hat": p.basis.phi1_hat().as_slice(),
        "clusters": clusters,
        "residuals": {"biorthogonality": biorth_residual, "action": action_residual},
        "cluster_tol": p.spectrum.cluster_tol(),
    });
    emit_json(&report, args.out.as_deref())
}

fn decomposition_json(p: &Pipeline, dec: &Decomposition) -> serde_json::Value {
    let v: Vec<serde_json::Value> = (0..p.spectrum.count())
        .map(|k| {
            let vk = dec.projection.coefficients(k);
            json!({
                "k": k + 1,
                "v": vk.iter().map(complex_json).collect::<Vec<_>>(),
            })
        })
        .collect();
    let leading: Vec<serde_json::Value> = dec
        .f_cr_leading
        .iter()
        .map(|(k, fv)| {
            json!({"k": k + 1, "F": fv.iter().map(complex_json).collect::<Vec<_>>()})
        })
        .collect();
    json!({
        "projection": v,
        "gamma": dec.gamma.map(|g| g + 1),
        "zeta": dec.zeta.map(|z| z + 1),
        "tau": dec.tau,
        "tau_cr": dec.tau_cr,
        "f_la": dec.f_la.as_slice(),
        "f_cr": dec.f_cr.as_slice(),
        "f_sm": dec.f_sm.as_slice(),
        "f_cr_leading": leading,
    })
}

fn cmd_decompose(args: DecomposeArgs) -> CliResult {
    let p = load_pipeline(&args.model)?;
    let f = resolve_f(&args.f, &p)?;
    let dec = decompose::split(&p.spectrum, &p.basis, &f);
    emit_json(&decomposition_json(&p, &dec), args.out.as_deref())
}

fn constants_json(
    p: &Pipeline,
    dec: &Decomposition,
    constants: &VarianceConstants,
) -> serde_json::Value {
    json!({
        "lambda_1": p.spectrum.lambda1(),
        "sigma_sm_sq": constants.sigma_sm_sq,
        "sigma_cr_sq": constants.sigma_cr_sq,
        "sigma_la_sq": constants.sigma_la_sq,
        "tau_cr": constants.tau_cr,
        "gamma": dec.gamma.map(|g| g + 1),
        "tau": dec.tau,
    })
}

fn cmd_constants(args: ConstantsArgs) -> CliResult {
    let p = load_pipeline(&args.model)?;
    let f = resolve_f(&args.f, &p)?;
    let dec = decompose::split(&p.spectrum, &p.basis, &f);
    let engine = MomentEngine::new(&p.model, &p.spectrum, &p.basis);
    let constants = engine
        .variance_constants(&dec)
        .map_err(|e| CliError::internal(e.to_string()))?;
    emit_json(&constants_json(&p, &dec, &constants), args.out.as_deref())
}

fn cmd_moments(args: MomentsArgs) -> CliResult {
    if !(1..=4).contains(&args.order) {
        return Err(CliError::validation("order must be between 1 and 4"));
    }
    let p = load_pipeline(&args.model)?;
    let f = resolve_f(&args.f, &p)?;
    let grid = make_grid(args.t_max, args.step)?;
    let engine = MomentEngine::new(&p.model, &p.spectrum, &p.basis);
    let table = engine.moment_ode(&f, &grid, args.order);

    let per_t: Vec<serde_json::Value> = grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let ms: Vec<Vec<f64>> = (0..args.order)
                .map(|k| table.m[k][i].iter().copied().collect())
                .collect();
            json!({"t": t, "m": ms})
        })
        .collect();
    let report = json!({
        "order": args.order,
        "f": f.as_slice(),
        "moments": per_t,
    });
    emit_json(&report, args.out.as_deref())?;

    if let Some(csv_path) = &args.out_csv {
        let mut csv = String::from("t,x,m1,m2,m3,m4\n");
        for (i, &t) in grid.iter().enumerate() {
            for x in 0..p.model.dim() {
                csv.push_str(&format!("{t},{x}"));
                for k in 0..4 {
                    if k < args.order {
                        csv.push_str(&format!(",{}", table.m[k][i][x]));
                    } else {
                        csv.push(',');
                    }
                }
                csv.push('\n');
            }
        }
        write_text(csv_path, &csv)?;
    }
    Ok(())
}

fn parse_u64_list(text: &str) -> Result<Vec<u64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| CliError::validation(format!("bad count `{s}`: {e}")))
        })
        .collect()
}

fn cmd_simulate(args: SimulateArgs) -> CliResult {
    let p = load_pipeline(&args.model)?;
    let f = resolve_f(&args.f, &p)?;
    let initial = parse_u64_list(&args.initial)?;
    if initial.len() != p.model.dim() {
        return Err(CliError::validation(format!(
            "initial counts have length {}, model has d = {}",
            initial.len(),
            p.model.dim()
        )));
    }
    let grid = make_grid(args.t_max, args.step)?;
    let requested_k: Vec<usize> = args
        .observe_k
        .split(',')
        .map(|s| {
            let one_based: usize = s
                .trim()
                .parse()
                .map_err(|e| CliError::validation(format!("bad cluster index `{s}`: {e}")))?;
            if one_based == 0 || one_based > p.spectrum.count() {
                return Err(CliError::validation(format!(
                    "cluster index {one_based} out of range 1..={}",
                    p.spectrum.count()
                )));
            }
            Ok(one_based - 1)
        })
        .collect::<Result<_, _>>()?;
    let spec = ObservableSpec { f, requested_k };
    let opts = SimOptions {
        pop_cap: args.pop_cap,
    };
    let ens = simulate::ensemble(
        &p.model,
        &p.spectrum,
        &p.basis,
        &initial,
        &grid,
        args.reps,
        args.seed,
        &spec,
        &opts,
    );
    let csv = simulate::write_ensemble_csv(&ens, p.model.dim());
    write_text(&args.out, &csv)?;
    if let Some(summary_path) = &args.summary {
        let summary = simulate::summarize(&ens);
        emit_json(&to_value(&summary)?, Some(summary_path))?;
    }
    Ok(())
}

fn load_constants(
    path: Option<&Path>,
    engine: &MomentEngine<'_>,
    dec: &Decomposition,
) -> Result<VarianceConstants, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::validation(format!("constants parse: {e}")))?;
            let get = |key: &str| -> Result<f64, CliError> {
                value
                    .get(key)
                    .and_then(|v| v.as_f64())
                    .ok_or_else(|| CliError::validation(format!("constants missing `{key}`")))
            };
            Ok(VarianceConstants {
                sigma_sm_sq: get("sigma_sm_sq")?,
                sigma_cr_sq: get("sigma_cr_sq")?,
                sigma_la_sq: get("sigma_la_sq")?,
                tau_cr: value.get("tau_cr").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
            })
        }
        None => engine
            .variance_constants(dec)
            .map_err(|e| CliError::internal(e.to_string())),
    }
}

fn cmd_verify(args: VerifyArgs) -> CliResult {
    if matches!(args.mode, VerifyMode::Heyde) {
        return cmd_verify_heyde(&args);
    }
    let model_path = args
        .model
        .as_ref()
        .ok_or_else(|| CliError::validation("--model is required"))?;
    let p = load_pipeline_at(
        model_path,
        args.declared.as_deref(),
        spectral::DEFAULT_CLUSTER_TOL,
    )?;
    let f_spec = args
        .f
        .as_ref()
        .ok_or_else(|| CliError::validation("--f is required"))?;
    let f = resolve_f(f_spec, &p)?;
    let dec = decompose::split(&p.spectrum, &p.basis, &f);
    let engine = MomentEngine::new(&p.model, &p.spectrum, &p.basis);
    let constants = load_constants(args.constants.as_deref(), &engine, &dec)?;

    let ensemble_path = args
        .ensemble
        .as_ref()
        .ok_or_else(|| CliError::validation("--ensemble is required"))?;
    let text = std::fs::read_to_string(ensemble_path)
        .map_err(|e| CliError::validation(format!("{}: {e}", ensemble_path.display())))?;
    let data = EnsembleData::from_csv(&text, p.model.dim())
        .map_err(|e| CliError::validation(e.to_string()))?;

    match args.mode {
        VerifyMode::Clt => {
            let t = args
                .t
                .ok_or_else(|| CliError::validation("--t is required for clt"))?;
            let component = match args
                .component
                .ok_or_else(|| CliError::validation("--component is required for clt"))?
            {
                ComponentArg::Sm => CltComponent::Sm,
                ComponentArg::Cr => CltComponent::Cr,
                ComponentArg::La => CltComponent::LaCompensated,
            };
            let report = verify::clt_check(
                &data,
                &p.spectrum,
                &p.basis,
                &dec,
                &constants,
                t,
                component,
                args.ks_tol,
                args.v_tol,
            )
            .map_err(|e| CliError::validation(e.to_string()))?;
            emit_json(&to_value(&report)?, args.out.as_deref())?;
            if let Some(path) = &args.dist_csv {
                // Reproduce the samples for plotting.
                let samples = verify::clt_check_samples(
                    &data,
                    &p.spectrum,
                    &p.basis,
                    &dec,
                    &constants,
                    t,
                    component,
                )
                .map_err(|e| CliError::internal(e.to_string()))?;
                write_text(path, &verify::distribution_csv(&samples, report.target_variance))?;
            }
            if !report.pass {
                return Err(CliError::verify_failed(format!(
                    "CLT check failed: KS {} (tol {}), variance ratio {} (tol {})",
                    report.ks_statistic, report.ks_tol, report.variance_ratio, report.variance_tol
                )));
            }
            Ok(())
        }
        VerifyMode::Lil => {
            let mode = match args
                .lil_mode
                .ok_or_else(|| CliError::validation("--lil-mode is required for lil"))?
            {
                LilModeArg::Noncritical => LilMode::NonCritical,
                LilModeArg::Critical => LilMode::Critical,
            };
            let horizon = *data.grid.last().unwrap_or(&0.0);
            let window_hi = args
                .window_hi
                .unwrap_or(horizon - verify::HORIZON_MARGIN);
            let report = verify::lil_envelope(
                &data,
                &p.spectrum,
                &p.basis,
                &dec,
                &constants,
                mode,
                (args.window_lo, window_hi),
                (args.band_lo, args.band_hi),
            )
            .map_err(|e| CliError::validation(e.to_string()))?;
            emit_json(&to_value(&report)?, args.out.as_deref())?;
            if let Some(path) = &args.dist_csv {
                let mut ratios = report.ratios.clone();
                ratios.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                let n = ratios.len() as f64;
                let mut csv = String::from("ratio,empirical_cdf\n");
                for (i, r) in ratios.iter().enumerate() {
                    csv.push_str(&format!("{},{}\n", r, (i + 1) as f64 / n));
                }
                write_text(path, &csv)?;
            }
            if report.fraction_in_band < args.min_fraction && !report.degenerate {
                return Err(CliError::verify_failed(format!(
                    "LIL envelope: only {:.1}% of trajectories in band (need {:.1}%)",
                    100.0 * report.fraction_in_band,
                    100.0 * args.min_fraction
                )));
            }
            Ok(())
        }
        VerifyMode::Martingale => {
            let k_one_based = args
                .k
                .ok_or_else(|| CliError::validation("--k is required for martingale"))?;
            if k_one_based == 0 || k_one_based > p.spectrum.count() {
                return Err(CliError::validation(format!(
                    "cluster index {k_one_based} out of range"
                )));
            }
            let report = verify::martingale_check(&data, &p.spectrum, &p.basis, k_one_based - 1)
                .map_err(|e| CliError::validation(e.to_string()))?;
            emit_json(&to_value(&report)?, args.out.as_deref())?;
            if !report.pass {
                return Err(CliError::verify_failed(format!(
                    "martingale check failed: max drift z = {}, variance bounded = {}",
                    report.max_mean_drift_z, report.variance_bounded
                )));
            }
            Ok(())
        }
        VerifyMode::Heyde => unreachable!(),
    }
}

fn cmd_verify_heyde(args: &VerifyArgs) -> CliResult {
    let report = if let Some(pmf_text) = &args.pmf {
        let pmf: Vec<f64> = pmf_text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| CliError::validation(format!("bad pmf entry `{s}`: {e}")))
            })
            .collect::<Result<_, _>>()?;
        verify::heyde_crosscheck(HeydeInput::DiscretePmf(&pmf))
    } else {
        let model_path = args
            .model
            .as_ref()
            .ok_or_else(|| CliError::validation("heyde needs --model or --pmf"))?;
        let model =
            model::load_model(model_path).map_err(|e| CliError::validation(e.to_string()))?;
        verify::heyde_crosscheck(HeydeInput::ContinuousSingleState(&model))
    }
    .map_err(|e| CliError::validation(e.to_string()))?;
    emit_json(&to_value(&report)?, args.out.as_deref())?;
    if report.consistent == Some(false) {
        return Err(CliError::verify_failed(format!(
            "Heyde cross-check inconsistent: sigma2 {} vs sigma2_la {:?}",
            report.sigma2, report.sigma2_la
        )));
    }
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> CliResult {
    let value = match args.which {
        OracleCommand::Yule { beta, t } => {
            let ms: Vec<f64> = (1..=4).map(|k| crate::oracle::yule_moments(beta, t, k)).collect();
            json!({"beta": beta, "t": t, "moments": ms,
                   "martingale_variance": crate::oracle::yule_martingale_variance(beta, t)})
        }
        OracleCommand::Extinction { beta, p0, p2, t } => {
            json!({"beta": beta, "p0": p0, "p2": p2, "t": t,
                   "extinction_probability": crate::oracle::birth_death_extinction(beta, p0, p2, t)})
        }
    };
    emit_json(&value, None)
}
