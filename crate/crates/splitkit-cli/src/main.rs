//! splitkit: convergence studies for the F/D exponential splitting families
//! on u'(t) = (A + B(t)) u(t).
//!
//! Exit codes: 0 success, 2 configuration error, 3 cell or check failure,
//! 4 IO error while writing artifacts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use splitkit::study::{DEFAULT_MATRIX_DIM, DEFAULT_SCHRODINGER_N, DEFAULT_TRANSPORT_DX};
use splitkit::{
    csv_string, defaults_for, emit_outputs, kernel_integral, optimal_tau_f,
    run_convergence_study, BackendVariant, EmitMode, Error, Family, ProblemKind, ReferenceMode,
    Result, StudyConfig,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_FAILURE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "splitkit",
    version,
    about = "Second-order exponential splitting integrators for u' = (A + B(t)) u"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a convergence study over (tau, h) cells; prints the CSV table to
    /// stdout and optionally writes CSV/SVG artifacts.
    Study(StudyArgs),
    /// Report the error-kernel integral; family F also reports the optimal
    /// tau where the integral vanishes.
    Kernels(KernelsArgs),
    /// Run the library invariant checks and print one PASS/FAIL line each.
    Verify,
}

#[derive(Args)]
struct StudyArgs {
    /// Flat `key = value` config file; keys match the long flag names and
    /// unknown keys are errors. Flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model problem (defaults to schrodinger).
    #[arg(long, value_enum)]
    problem: Option<ProblemArg>,
    /// Splitting family (defaults to F for schrodinger/matrix, D for transport).
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    /// Splitting parameter; repeatable or comma-separated.
    #[arg(long = "tau", value_delimiter = ',')]
    taus: Vec<f64>,
    /// Step size; repeatable or comma-separated, strictly decreasing, T/h integral.
    #[arg(long = "h", value_delimiter = ',')]
    hs: Vec<f64>,
    /// Integration horizon T.
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Exponential-action backend.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Error reference: closed-form solution (transport only) or a fine-step
    /// Strang run with Richardson validation.
    #[arg(long = "ref", value_enum)]
    reference: Option<RefArg>,
    /// Directory for emitted artifacts; nothing is written without it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which artifacts to write under --out.
    #[arg(long, value_enum)]
    emit: Option<EmitArg>,
    /// Schrödinger grid size (schrodinger only).
    #[arg(long = "grid-n")]
    grid_n: Option<usize>,
    /// Transport grid spacing (transport only).
    #[arg(long)]
    dx: Option<f64>,
    /// Random-problem dimension (matrix only).
    #[arg(long)]
    dim: Option<usize>,
    /// Random-problem seed (matrix only).
    #[arg(long)]
    seed: Option<u64>,
    /// Stepping-loop timing repetitions per cell; the median is reported.
    #[arg(long = "timing-repeats")]
    timing_repeats: Option<usize>,
}

#[derive(Args)]
struct KernelsArgs {
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Evaluation point; defaults to tau* for F and the argmin 1/2 for D.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemArg {
    Schrodinger,
    Transport,
    Matrix,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    #[value(name = "F", alias = "f")]
    F,
    #[value(name = "D", alias = "d")]
    D,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Family {
        match f {
            FamilyArg::F => Family::F,
            FamilyArg::D => Family::D,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    /// Cached dense scaling-and-squaring for every stage.
    Dense,
    /// Arnoldi approximation of exp(cH)v for every stage.
    Krylov,
    /// Per-operator dispatch: diagonal fast path where tagged, dense up to
    /// dim 512, Krylov above.
    DiagonalAuto,
}

impl From<BackendArg> for BackendVariant {
    fn from(b: BackendArg) -> BackendVariant {
        match b {
            BackendArg::Dense => BackendVariant::Dense,
            BackendArg::Krylov => BackendVariant::Krylov { m: 64, eps: 1e-10 },
            BackendArg::DiagonalAuto => BackendVariant::Auto,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RefArg {
    Exact,
    FineStep,
}

impl From<RefArg> for ReferenceMode {
    fn from(r: RefArg) -> ReferenceMode {
        match r {
            RefArg::Exact => ReferenceMode::Exact,
            RefArg::FineStep => ReferenceMode::FineStep,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EmitArg {
    Csv,
    Svg,
    Both,
}

impl From<EmitArg> for EmitMode {
    fn from(e: EmitArg) -> EmitMode {
        match e {
            EmitArg::Csv => EmitMode::Csv,
            EmitArg::Svg => EmitMode::Svg,
            EmitArg::Both => EmitMode::Both,
        }
    }
}

/// Study settings from one source (config file or flags); `None` means
/// "not given here". Flag values win over file values.
#[derive(Default)]
struct Overrides {
    problem: Option<ProblemArg>,
    family: Option<FamilyArg>,
    taus: Option<Vec<f64>>,
    hs: Option<Vec<f64>>,
    t_end: Option<f64>,
    backend: Option<BackendArg>,
    reference: Option<RefArg>,
    out: Option<PathBuf>,
    emit: Option<EmitArg>,
    grid_n: Option<usize>,
    dx: Option<f64>,
    dim: Option<usize>,
    seed: Option<u64>,
    timing_repeats: Option<usize>,
}

impl Overrides {
    fn from_args(a: &StudyArgs) -> Overrides {
        Overrides {
            problem: a.problem,
            family: a.family,
            taus: (!a.taus.is_empty()).then(|| a.taus.clone()),
            hs: (!a.hs.is_empty()).then(|| a.hs.clone()),
            t_end: a.t_end,
            backend: a.backend,
            reference: a.reference,
            out: a.out.clone(),
            emit: a.emit,
            grid_n: a.grid_n,
            dx: a.dx,
            dim: a.dim,
            seed: a.seed,
            timing_repeats: a.timing_repeats,
        }
    }

    /// `self` wins; `base` fills the gaps.
    fn merged_over(self, base: Overrides) -> Overrides {
        Overrides {
            problem: self.problem.or(base.problem),
            family: self.family.or(base.family),
            taus: self.taus.or(base.taus),
            hs: self.hs.or(base.hs),
            t_end: self.t_end.or(base.t_end),
            backend: self.backend.or(base.backend),
            reference: self.reference.or(base.reference),
            out: self.out.or(base.out),
            emit: self.emit.or(base.emit),
            grid_n: self.grid_n.or(base.grid_n),
            dx: self.dx.or(base.dx),
            dim: self.dim.or(base.dim),
            seed: self.seed.or(base.seed),
            timing_repeats: self.timing_repeats.or(base.timing_repeats),
        }
    }
}

fn config_error(path: &Path, lineno: usize, msg: impl std::fmt::Display) -> Error {
    Error::Configuration(format!("{}:{}: {msg}", path.display(), lineno + 1))
}

fn parse_value_enum<T: ValueEnum>(
    path: &Path,
    lineno: usize,
    key: &str,
    value: &str,
) -> Result<T> {
    T::from_str(value, true)
        .map_err(|_| config_error(path, lineno, format!("invalid value '{value}' for {key}")))
}

fn parse_number<T: std::str::FromStr>(
    path: &Path,
    lineno: usize,
    key: &str,
    value: &str,
) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_error(path, lineno, format!("invalid value '{value}' for {key}")))
}

fn parse_number_list(path: &Path, lineno: usize, key: &str, value: &str) -> Result<Vec<f64>> {
    let items: Vec<&str> = value
        .split([',', ' ', '\t'])
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(config_error(path, lineno, format!("empty value for {key}")));
    }
    items
        .into_iter()
        .map(|s| parse_number(path, lineno, key, s))
        .collect()
}

/// Flat `key = value` config; `#` starts a comment; repeated `tau`/`h` keys
/// and comma/space lists both extend the corresponding list.
fn parse_config(path: &Path) -> Result<Overrides> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Configuration(format!("cannot read config {}: {e}", path.display())))?;
    let mut ov = Overrides::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(config_error(path, lineno, format!("expected key = value, got '{line}'")));
        };
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(config_error(path, lineno, format!("empty value for {key}")));
        }
        match key {
            "problem" => ov.problem = Some(parse_value_enum(path, lineno, key, value)?),
            "family" => ov.family = Some(parse_value_enum(path, lineno, key, value)?),
            "tau" => ov
                .taus
                .get_or_insert_with(Vec::new)
                .extend(parse_number_list(path, lineno, key, value)?),
            "h" => ov
                .hs
                .get_or_insert_with(Vec::new)
                .extend(parse_number_list(path, lineno, key, value)?),
            "t-end" => ov.t_end = Some(parse_number(path, lineno, key, value)?),
            "backend" => ov.backend = Some(parse_value_enum(path, lineno, key, value)?),
            "ref" => ov.reference = Some(parse_value_enum(path, lineno, key, value)?),
            "out" => ov.out = Some(PathBuf::from(value)),
            "emit" => ov.emit = Some(parse_value_enum(path, lineno, key, value)?),
            "grid-n" => ov.grid_n = Some(parse_number(path, lineno, key, value)?),
            "dx" => ov.dx = Some(parse_number(path, lineno, key, value)?),
            "dim" => ov.dim = Some(parse_number(path, lineno, key, value)?),
            "seed" => ov.seed = Some(parse_number(path, lineno, key, value)?),
            "timing-repeats" => ov.timing_repeats = Some(parse_number(path, lineno, key, value)?),
            other => {
                return Err(config_error(path, lineno, format!("unknown key '{other}'")));
            }
        }
    }
    Ok(ov)
}

/// Model parameters only apply to their own problem kind; anything else is
/// a silent no-op waiting to mislead, so reject it.
fn reject_foreign_params(kind: &ProblemKind, ov: &Overrides) -> Result<()> {
    let bad = |what: &str, problem: &str| {
        Err(Error::Configuration(format!(
            "{what} applies only to the {problem} problem, but problem is {}",
            kind.name()
        )))
    };
    if ov.grid_n.is_some() && !matches!(kind, ProblemKind::Schrodinger { .. }) {
        return bad("grid-n", "schrodinger");
    }
    if ov.dx.is_some() && !matches!(kind, ProblemKind::Transport { .. }) {
        return bad("dx", "transport");
    }
    if ov.dim.is_some() && !matches!(kind, ProblemKind::Matrix { .. }) {
        return bad("dim", "matrix");
    }
    if ov.seed.is_some() && !matches!(kind, ProblemKind::Matrix { .. }) {
        return bad("seed", "matrix");
    }
    Ok(())
}

fn build_config(ov: &Overrides) -> Result<StudyConfig> {
    let kind = match ov.problem.unwrap_or(ProblemArg::Schrodinger) {
        ProblemArg::Schrodinger => ProblemKind::Schrodinger {
            grid_n: ov.grid_n.unwrap_or(DEFAULT_SCHRODINGER_N),
        },
        ProblemArg::Transport => ProblemKind::Transport {
            dx: ov.dx.unwrap_or(DEFAULT_TRANSPORT_DX),
        },
        ProblemArg::Matrix => ProblemKind::Matrix {
            dim: ov.dim.unwrap_or(DEFAULT_MATRIX_DIM),
        },
    };
    reject_foreign_params(&kind, ov)?;

    let mut cfg = defaults_for(kind);
    if let Some(f) = ov.family {
        cfg.family = f.into();
    }
    if let Some(taus) = &ov.taus {
        cfg.taus = taus.clone();
    }
    if let Some(hs) = &ov.hs {
        cfg.hs = hs.clone();
    }
    if let Some(t) = ov.t_end {
        cfg.t_end = t;
    }
    if let Some(b) = ov.backend {
        cfg.backend = b.into();
    }
    if let Some(r) = ov.reference {
        cfg.reference = r.into();
    }
    if let Some(out) = &ov.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(e) = ov.emit {
        cfg.emit = e.into();
    }
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(r) = ov.timing_repeats {
        cfg.timing_repeats = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_study(args: &StudyArgs) -> Result<ExitCode> {
    let file_ov = match &args.config {
        Some(path) => parse_config(path)?,
        None => Overrides::default(),
    };
    let ov = Overrides::from_args(args).merged_over(file_ov);
    let cfg = build_config(&ov)?;

    let table = run_convergence_study(&cfg)?;
    print!("{}", csv_string(&table));
    if table.reference_tolerance > 0.0 {
        eprintln!("reference tolerance: {:.3e}", table.reference_tolerance);
    }
    for fit in &table.fitted {
        eprintln!(
            "fitted order tau={:.4}: {:.3} ({} points)",
            fit.tau, fit.order, fit.points_used
        );
    }
    if let Some(dir) = &cfg.out_dir {
        for p in emit_outputs(&table, dir, cfg.emit)? {
            eprintln!("wrote {}", p.display());
        }
    }
    if table.any_failed() {
        for row in table.rows.iter().filter(|r| r.failure.is_some()) {
            eprintln!(
                "cell failure tau={:.4} h={:.6}: {}",
                row.tau,
                row.h,
                row.failure.as_deref().unwrap_or("unknown")
            );
        }
        return Ok(ExitCode::from(EXIT_FAILURE));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_kernels(args: &KernelsArgs) -> Result<ExitCode> {
    let family: Family = args.family.into();
    println!("family {family}");
    let default_tau = match family {
        Family::F => {
            let ts = optimal_tau_f();
            println!("tau* = {ts:.17}");
            ts
        }
        Family::D => {
            // |integral| is minimized at the midpoint; it never vanishes
            println!("argmin tau = 0.5");
            0.5
        }
    };
    let tau = args.tau.unwrap_or(default_tau);
    let v = kernel_integral(family, tau)?;
    println!("kernel_integral({tau:.17}) = {v:e}");
    Ok(ExitCode::SUCCESS)
}

fn run_verify() -> Result<ExitCode> {
    let results = splitkit::run_all();
    let passed = results.iter().filter(|r| r.passed).count();
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", r.name, r.detail);
    }
    println!("{passed}/{} checks passed", results.len());
    if passed == results.len() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_FAILURE))
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Configuration(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version go to stdout and succeed; real usage errors
            // are configuration errors
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Study(args) => run_study(args),
        Command::Kernels(args) => run_kernels(args),
        Command::Verify => run_verify(),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
