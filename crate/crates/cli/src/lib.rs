//! Command-line driver: generate problems, run EKI variants, write traces
//! and invariant reports.
//!
//! Exit codes: `0` success, `2` invalid configuration or input file,
//! `3` runtime failure, `4` an asserted invariant failed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use eki_core::diagnostics::{fit_rate, Quantity, RateFit, Report, RunTrace, Tolerances};
use eki_core::ensemble::{run_with_frame, RunConfig, Variant};
use eki_core::idealized::{run_idealized, NoisePairing};
use eki_core::rng::split_seed;
use eki_core::subspaces::{predict_eigenvalues_deterministic, predict_eigenvalues_stochastic};
use eki_core::{generate, BatteryInput, EkiError, Frame, NormKind, ProblemInstance, ProblemSpec};
use rayon::prelude::*;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "eki", version, about = "Ensemble Kalman inversion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random problem and write it to a JSON file.
    Generate(GenerateArgs),
    /// Run EKI and write trace.csv, eigenvalues.csv and report.json.
    Run(RunArgs),
    /// Run the invariant battery on a problem file.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    /// Observation dimension.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// State dimension.
    #[arg(long, default_value_t = 12)]
    pub d: usize,
    /// Rank of H.
    #[arg(long, default_value_t = 6)]
    pub h: usize,
    /// Ensemble size.
    #[arg(long = "J", default_value_t = 5)]
    pub j: usize,
    /// Use noise-free data y = H v_true.
    #[arg(long)]
    pub noiseless: bool,
}

impl SpecArgs {
    fn spec(&self, seed: u64) -> ProblemSpec {
        ProblemSpec {
            n: self.n,
            d: self.d,
            target_h: self.h,
            j: self.j,
            seed,
            noise_on_data: !self.noiseless,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output file.
    #[arg(short = 'o', long = "output", default_value = "problem.json")]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Deterministic,
    Stochastic,
    #[value(alias = "idealized")]
    IdealizedStochastic,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Deterministic => Variant::Deterministic,
            VariantArg::Stochastic => Variant::Stochastic,
            VariantArg::IdealizedStochastic => Variant::IdealizedStochastic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum)]
pub enum Emit {
    Trace,
    Report,
    Eigenvalues,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Problem file; when absent a problem is generated from the spec flags.
    #[arg(long)]
    pub problem: Option<PathBuf>,
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long, value_enum, default_value_t = VariantArg::Deterministic)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    /// Independent noise streams; replication k uses split_seed(seed, k).
    #[arg(long, default_value_t = 1)]
    pub replications: usize,
    /// Noise seed, and the problem seed when generating. Defaults to 42, or
    /// to the seed stored in the problem file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "EKI_OUTPUT_DIR", default_value = "eki-out")]
    pub out: PathBuf,
    /// Overrides every invariant tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Stop once every particle's ‖𝒫θ‖ is below this (0 disables).
    #[arg(long, default_value_t = 0.0)]
    pub stop_tol: f64,
    /// Idealized runs draw noise from an independent stream.
    #[arg(long, conflicts_with = "paired_noise")]
    pub fresh_noise: bool,
    /// Idealized runs reuse the draws of the stochastic run with the same seed (default).
    #[arg(long)]
    pub paired_noise: bool,
    /// Outputs to write.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Emit::Trace, Emit::Report, Emit::Eigenvalues])]
    pub emit: Vec<Emit>,
    /// Record Σ⁻¹- and HᵀΣ⁻¹H-weighted norms instead of Euclidean ones.
    #[arg(long)]
    pub weighted_norms: bool,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    pub problem: PathBuf,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_enum, default_value_t = VariantArg::Deterministic)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Invariant(_) => EXIT_INVARIANT,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
            CliError::Invariant(m) => write!(f, "invariant failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<EkiError> for CliError {
    fn from(e: EkiError) -> Self {
        match e {
            EkiError::NotSymmetric { .. }
            | EkiError::NotPositiveDefinite
            | EkiError::DimensionMismatch(_)
            | EkiError::TooFewParticles(_)
            | EkiError::NoiseDimensionMismatch { .. }
            | EkiError::InvalidArgument(_)
            | EkiError::SchemaVersionMismatch { .. }
            | EkiError::ChecksumMismatch { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Parses `args` and runs the command, printing to stdout/stderr.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(&cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("eki: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Run(a) => cmd_run(a, out).map(|_| ()),
        Command::Verify(a) => cmd_verify(a, out).map(|_| ()),
    }
}

pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = args.spec.spec(args.seed);
    spec.validate()?;
    let inst = generate(&spec)?;
    inst.save(&args.output)?;
    let frame = Frame::from_initial(&inst.ens0, &inst.obs, &inst.y)?;
    writeln!(
        out,
        "wrote {} (n={}, d={}, h={}, J={}, r={}, seed={})",
        args.output.display(),
        spec.n,
        spec.d,
        spec.target_h,
        spec.j,
        frame.r(),
        spec.seed
    )
    .map_err(io_err(&args.output))?;
    Ok(())
}

/// What `run` produced.
#[derive(Debug)]
pub struct RunSummary {
    pub traces: Vec<RunTrace>,
    pub report: Report,
    /// Per replication: fitted slopes of max-particle ‖𝒫θ‖ and ‖ℙω‖.
    pub slopes: Vec<(Option<RateFit>, Option<RateFit>)>,
    pub fit_range: Option<(usize, usize)>,
}

fn load_or_generate(
    problem: &Option<PathBuf>,
    spec: &SpecArgs,
    seed: Option<u64>,
) -> Result<ProblemInstance, CliError> {
    match problem {
        Some(p) => Ok(ProblemInstance::load(p)?),
        None => {
            let spec = spec.spec(seed.unwrap_or(42));
            spec.validate()?;
            Ok(generate(&spec)?)
        }
    }
}

fn tolerances(tol: Option<f64>) -> Result<Tolerances, CliError> {
    match tol {
        None => Ok(Tolerances::default()),
        Some(t) if t > 0.0 && t.is_finite() => Ok(Tolerances::uniform(t)),
        Some(t) => Err(CliError::Validation(format!(
            "--tol must be positive, got {t}"
        ))),
    }
}

/// Default fit window `[max(1, iters/100), iters]`.
pub fn default_fit_range(iters: usize) -> Option<(usize, usize)> {
    let lo = (iters / 100).max(1);
    (iters > lo).then_some((lo, iters))
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<RunSummary, CliError> {
    if args.iters < 1 {
        return Err(CliError::Validation("--iters must be at least 1".into()));
    }
    if args.replications < 1 {
        return Err(CliError::Validation(
            "--replications must be at least 1".into(),
        ));
    }
    if !(args.stop_tol >= 0.0) {
        return Err(CliError::Validation(
            "--stop-tol must be nonnegative".into(),
        ));
    }
    let tol = tolerances(args.tol)?;
    let inst = load_or_generate(&args.problem, &args.spec, args.seed)?;
    let seed = args.seed.unwrap_or(inst.spec.seed);
    let variant: Variant = args.variant.into();
    let pairing = if args.fresh_noise {
        NoisePairing::Fresh
    } else {
        NoisePairing::Paired
    };
    let norm = if args.weighted_norms {
        NormKind::Weighted
    } else {
        NormKind::Euclidean
    };
    let frame = Frame::from_initial(&inst.ens0, &inst.obs, &inst.y)?.with_norm(norm);

    let rep_seed = |k: usize| {
        if args.replications == 1 {
            seed
        } else {
            split_seed(seed, k as u64)
        }
    };
    let traces: Vec<RunTrace> = (0..args.replications)
        .into_par_iter()
        .map(|k| -> Result<RunTrace, CliError> {
            let s = rep_seed(k);
            match variant {
                Variant::IdealizedStochastic => Ok(run_idealized(
                    &inst.ens0, &inst.obs, &inst.y, &frame, args.iters, s, pairing,
                )?),
                _ => {
                    let config = RunConfig {
                        variant,
                        max_iters: args.iters,
                        stop_tol: args.stop_tol,
                        seed: s,
                    };
                    Ok(run_with_frame(&inst.ens0, &inst.obs, &inst.y, &config, &frame)?.1)
                }
            }
        })
        .collect::<Result<_, _>>()?;

    let report = inst_report(&inst, variant, args.iters, rep_seed(0), &tol);

    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    if args.emit.contains(&Emit::Trace) {
        write_trace(&args.out.join("trace.csv"), &traces[0])?;
        if args.replications > 1 {
            for (k, t) in traces.iter().enumerate() {
                write_trace(&args.out.join(format!("trace_rep{k}.csv")), t)?;
            }
        }
    }
    if args.emit.contains(&Emit::Eigenvalues) {
        write_eigenvalues(&args.out.join("eigenvalues.csv"), &traces[0], &frame)?;
    }
    if args.emit.contains(&Emit::Report) {
        let path = args.out.join("report.json");
        let text =
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
    }

    let fit_range = default_fit_range(args.iters);
    let slopes: Vec<_> = traces
        .iter()
        .map(|t| match fit_range {
            Some(range) if t.records.last().map(|r| r.iter) == Some(args.iters) => (
                fit_rate(t, Quantity::PTheta, range).ok(),
                fit_rate(t, Quantity::POmega, range).ok(),
            ),
            _ => (None, None),
        })
        .collect();
    if args.replications > 1 {
        write_slopes(&args.out.join("slopes.csv"), &slopes)?;
    }

    let summary = RunSummary {
        traces,
        report,
        slopes,
        fit_range,
    };
    print_run_summary(out, args, variant, &frame, &summary)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if !summary.report.passed() {
        let names: Vec<_> = summary
            .report
            .failures()
            .map(|c| c.check_name.as_str())
            .collect();
        return Err(CliError::Invariant(names.join(", ")));
    }
    Ok(summary)
}

fn inst_report(
    inst: &ProblemInstance,
    variant: Variant,
    iters: usize,
    seed: u64,
    tol: &Tolerances,
) -> Report {
    eki_core::invariant_battery(
        &BatteryInput {
            obs: &inst.obs,
            y: &inst.y,
            ens0: &inst.ens0,
            variant,
            iters,
            seed,
        },
        tol,
    )
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// One row per particle per record; `particle` is 0-based.
pub fn write_trace(path: &Path, trace: &RunTrace) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["iter", "particle", "variant"];
    header.extend(Quantity::ALL.iter().map(|q| q.column()));
    w.write_record(&header).map_err(csv_err(path))?;
    let variant = trace.variant.as_str();
    for rec in &trace.records {
        for j in 0..rec.particles() {
            let mut row = vec![rec.iter.to_string(), j.to_string(), variant.to_string()];
            row.extend(Quantity::ALL.iter().map(|q| rec.get(*q)[j].to_string()));
            w.write_record(&row).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// `iter,ell,measured,predicted`; `ell` is 1-based. Predictions follow the
/// deterministic recurrence for deterministic runs and the idealized closed
/// form otherwise.
pub fn write_eigenvalues(path: &Path, trace: &RunTrace, frame: &Frame) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["iter", "ell", "measured", "predicted"])
        .map_err(csv_err(path))?;
    let r = frame.r();
    let delta0 = frame.obs_basis.delta0.rows(0, r).into_owned();
    let mut det = delta0.clone();
    let mut at = 0;
    for rec in &trace.records {
        let predicted = match trace.variant {
            Variant::Deterministic => {
                // Records are consecutive, so advance incrementally.
                if rec.iter >= at {
                    det = predict_eigenvalues_deterministic(&det, rec.iter - at);
                } else {
                    det = predict_eigenvalues_deterministic(&delta0, rec.iter);
                }
                at = rec.iter;
                det.clone()
            }
            _ => predict_eigenvalues_stochastic(&delta0, rec.iter),
        };
        for (l, m) in rec.eigenvalues.iter().enumerate() {
            w.write_record([
                rec.iter.to_string(),
                (l + 1).to_string(),
                m.to_string(),
                predicted[l].to_string(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn write_slopes(
    path: &Path,
    slopes: &[(Option<RateFit>, Option<RateFit>)],
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["replication", "P_theta_slope", "P_omega_slope"])
        .map_err(csv_err(path))?;
    let show = |f: &Option<RateFit>| f.map(|f| f.slope.to_string()).unwrap_or_default();
    for (k, (a, b)) in slopes.iter().enumerate() {
        w.write_record([k.to_string(), show(a), show(b)])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn print_run_summary(
    out: &mut dyn Write,
    args: &RunArgs,
    variant: Variant,
    frame: &Frame,
    s: &RunSummary,
) -> std::io::Result<()> {
    writeln!(
        out,
        "{variant}: {} iteration(s), {} replication(s), r={}, h={}",
        args.iters,
        args.replications,
        frame.r(),
        frame.obs_basis.h
    )?;
    if let Some((lo, hi)) = s.fit_range {
        let p = mean(s.slopes.iter().filter_map(|x| x.0.map(|f| f.slope)));
        let w = mean(s.slopes.iter().filter_map(|x| x.1.map(|f| f.slope)));
        let show = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(
            out,
            "slope over i in [{lo}, {hi}]: P_theta {}  P_omega {}",
            show(p),
            show(w)
        )?;
    }
    let failed = s.report.failures().count();
    writeln!(
        out,
        "invariants: {} checks, {} failed; outputs in {}",
        s.report.checks.len(),
        failed,
        args.out.display()
    )
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<Report, CliError> {
    let tol = tolerances(args.tol)?;
    let inst = ProblemInstance::load(&args.problem)?;
    let seed = args.seed.unwrap_or(inst.spec.seed);
    let report = inst_report(&inst, args.variant.into(), args.iters, seed, &tol);
    print_table(out, &report).map_err(|e| CliError::Runtime(e.to_string()))?;
    if report.passed() {
        Ok(report)
    } else {
        Err(CliError::Invariant(format!(
            "{} check(s) failed",
            report.failures().count()
        )))
    }
}

pub fn print_table(out: &mut dyn Write, report: &Report) -> std::io::Result<()> {
    let width = report
        .checks
        .iter()
        .map(|c| c.check_name.len())
        .max()
        .unwrap_or(5)
        .max(5);
    writeln!(
        out,
        "{:<width$}  {:>12}  {:>10}  status",
        "check", "measured", "tolerance"
    )?;
    for c in &report.checks {
        let measured = c.measured.map_or("-".to_string(), |m| format!("{m:.3e}"));
        let status = match (c.asserted, c.pass) {
            (_, _) if c.measured.is_none() && c.pass => "n/a",
            (false, _) => "info",
            (true, true) => "pass",
            (true, false) => "FAIL",
        };
        writeln!(
            out,
            "{:<width$}  {:>12}  {:>10.1e}  {status}",
            c.check_name, measured, c.tolerance
        )?;
    }
    Ok(())
}
