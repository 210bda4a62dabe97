//! Convergence-study harness: runs a (problem, family) pair over a grid of
//! (tau, h) cells, measures global errors against a reference at T, fits
//! convergence orders, and emits CSV tables and log-log SVG plots.

use std::path::{Path, PathBuf};

use ndarray::Array1;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::expaction::{BackendVariant, ExpActionBackend};
use crate::models::{
    random_matrix_problem, schrodinger_problem, transport_exact_on_grid, transport_problem,
    ModelSpec,
};
use crate::operator::EvolutionProblem;
use crate::quadrature::Family;
use crate::splitting::{build_d, build_f, integrate, IntegrateOptions, SplittingScheme};

/// Which model a study runs on, with its discretization parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProblemKind {
    Schrodinger { grid_n: usize },
    Transport { dx: f64 },
    Matrix { dim: usize },
}

impl ProblemKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::Schrodinger { .. } => "schrodinger",
            ProblemKind::Transport { .. } => "transport",
            ProblemKind::Matrix { .. } => "matrix",
        }
    }
}

/// Reference solution used for the global error at T.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceMode {
    /// Closed-form solution on the grid; transport only.
    Exact,
    /// Self reference: midpoint Strang at h_ref = h_min/64, Richardson
    /// verified against h_ref/2; the h_ref/2 state is the reference and the
    /// measured difference becomes the reference tolerance.
    FineStep,
}

/// Which artifacts emit_outputs writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmitMode {
    Csv,
    Svg,
    Both,
}

/// Full description of a convergence study.
#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub problem: ProblemKind,
    pub family: Family,
    pub taus: Vec<f64>,
    pub hs: Vec<f64>,
    pub t_end: f64,
    pub backend: BackendVariant,
    pub reference: ReferenceMode,
    pub out_dir: Option<PathBuf>,
    pub emit: EmitMode,
    /// Seed for the matrix problem kind.
    pub seed: u64,
    /// Stepping-loop timings per cell; the median is reported.
    pub timing_repeats: usize,
}

/// tau* = (3 - sqrt(3))/6, the F-family error-kernel root.
pub fn tau_star() -> f64 {
    (3.0 - 3.0f64.sqrt()) / 6.0
}

/// Study defaults reproducing the headline figures at desk scale.
pub fn defaults_for(problem: ProblemKind) -> StudyConfig {
    match problem {
        ProblemKind::Schrodinger { .. } => StudyConfig {
            problem,
            family: Family::F,
            taus: vec![0.0, 0.175, tau_star(), 0.25, 0.375, 0.5],
            hs: vec![0.02, 0.01, 5e-3, 2.5e-3, 1.25e-3],
            t_end: 1.0,
            backend: BackendVariant::Auto,
            reference: ReferenceMode::FineStep,
            out_dir: None,
            emit: EmitMode::Both,
            seed: 42,
            timing_repeats: 3,
        },
        ProblemKind::Transport { .. } => StudyConfig {
            problem,
            family: Family::D,
            taus: vec![0.2, 0.4, 0.5, 0.6, 0.8],
            hs: vec![0.02, 0.01, 5e-3, 2.5e-3, 1.25e-3],
            t_end: 1.0,
            backend: BackendVariant::Auto,
            reference: ReferenceMode::Exact,
            out_dir: None,
            emit: EmitMode::Both,
            seed: 42,
            timing_repeats: 3,
        },
        ProblemKind::Matrix { .. } => StudyConfig {
            problem,
            family: Family::F,
            taus: vec![0.0, 0.25, 0.5],
            hs: vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0],
            t_end: 1.0,
            backend: BackendVariant::Auto,
            reference: ReferenceMode::FineStep,
            out_dir: None,
            emit: EmitMode::Both,
            seed: 42,
            timing_repeats: 3,
        },
    }
}

/// Default model parameters for the CLI.
pub const DEFAULT_SCHRODINGER_N: usize = 128;
pub const DEFAULT_TRANSPORT_DX: f64 = 0.004;
pub const DEFAULT_MATRIX_DIM: usize = 8;

fn ulp(x: f64) -> f64 {
    let a = x.abs();
    f64::from_bits(a.to_bits() + 1) - a
}

impl StudyConfig {
    /// Config invariants; violations are configuration errors.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Configuration(m));
        match self.problem {
            ProblemKind::Schrodinger { grid_n } if grid_n < 32 => {
                return cfg_err(format!("schrodinger grid_n must be >= 32, got {grid_n}"));
            }
            ProblemKind::Transport { dx } if !(dx > 0.0 && dx <= 0.02) => {
                return cfg_err(format!("transport dx must lie in (0, 0.02], got {dx}"));
            }
            ProblemKind::Matrix { dim } if !(2..=64).contains(&dim) => {
                return cfg_err(format!("matrix dim must lie in [2, 64], got {dim}"));
            }
            _ => {}
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return cfg_err(format!("t_end must be positive, got {}", self.t_end));
        }
        if self.taus.is_empty() {
            return cfg_err("tau list is empty".into());
        }
        let hi = match self.family {
            Family::F => 0.5,
            Family::D => 1.0,
        };
        for &tau in &self.taus {
            if !(0.0..=hi).contains(&tau) {
                return cfg_err(format!(
                    "tau = {tau} outside family {} range [0, {hi}]",
                    self.family
                ));
            }
        }
        for (i, &a) in self.taus.iter().enumerate() {
            if self.taus[i + 1..].iter().any(|&b| b.to_bits() == a.to_bits()) {
                return cfg_err(format!("duplicate tau = {a}"));
            }
        }
        if self.hs.is_empty() {
            return cfg_err("h list is empty".into());
        }
        for w in self.hs.windows(2) {
            if !(w[1] < w[0]) {
                return cfg_err(format!(
                    "h list must be strictly decreasing, got {} then {}",
                    w[0], w[1]
                ));
            }
        }
        for &h in &self.hs {
            if !(h > 0.0) {
                return cfg_err(format!("nonpositive h = {h}"));
            }
            let ratio = self.t_end / h;
            if (ratio - ratio.round()).abs() > 4.0 * ulp(ratio) || ratio.round() < 1.0 {
                return cfg_err(format!("T/h must be an integer: T = {}, h = {h}", self.t_end));
            }
        }
        if self.reference == ReferenceMode::Exact
            && !matches!(self.problem, ProblemKind::Transport { .. })
        {
            return cfg_err("exact reference is only available for the transport problem".into());
        }
        if self.timing_repeats == 0 {
            return cfg_err("timing_repeats must be at least 1".into());
        }
        Ok(())
    }
}

/// One (tau, h) cell of a study. CSV serializes the first seven fields; the
/// rest support order fits, cost ratios, and failure reporting.
#[derive(Clone, Debug)]
pub struct CellRow {
    pub problem: &'static str,
    pub family: Family,
    pub tau: f64,
    pub h: f64,
    pub steps: u64,
    /// Weighted discrete L2 error at T; NaN when the cell failed.
    pub error_l2: f64,
    /// Median stepping-loop wall time over the configured repeats.
    pub runtime_ms: f64,
    pub stage_count: usize,
    /// Relative drift of the state norm over the integration.
    pub norm_drift: f64,
    /// Error is within 100x the measured reference tolerance, so the cell
    /// is excluded from order fits.
    pub below_noise_floor: bool,
    pub failure: Option<String>,
}

impl CellRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{:.16e},{:.16e},{},{},{:.3}",
            self.problem, self.family, self.tau, self.h, self.steps, self.error_l2,
            self.runtime_ms
        )
    }
}

/// Least-squares slope of ln(error) vs ln(h) for one tau.
#[derive(Clone, Copy, Debug)]
pub struct FittedOrder {
    pub tau: f64,
    pub order: f64,
    pub points_used: usize,
}

/// Study outcome: all cells plus per-tau fitted orders.
#[derive(Clone, Debug)]
pub struct ErrorTable {
    pub config: StudyConfig,
    pub rows: Vec<CellRow>,
    pub fitted: Vec<FittedOrder>,
    /// Measured Richardson difference of the fine-step reference; 0 when the
    /// reference is exact.
    pub reference_tolerance: f64,
}

impl ErrorTable {
    pub fn rows_for_tau(&self, tau: f64) -> impl Iterator<Item = &CellRow> {
        self.rows
            .iter()
            .filter(move |r| r.tau.to_bits() == tau.to_bits())
    }

    pub fn error_at(&self, tau: f64, h: f64) -> Option<f64> {
        self.rows_for_tau(tau)
            .find(|r| r.h.to_bits() == h.to_bits())
            .map(|r| r.error_l2)
    }

    pub fn fitted_order(&self, tau: f64) -> Option<f64> {
        self.fitted
            .iter()
            .find(|f| f.tau.to_bits() == tau.to_bits())
            .map(|f| f.order)
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.failure.is_some())
    }
}

fn build_problem(cfg: &StudyConfig) -> Result<EvolutionProblem> {
    match cfg.problem {
        ProblemKind::Schrodinger { grid_n } => schrodinger_problem(grid_n, cfg.t_end),
        ProblemKind::Transport { dx } => transport_problem(dx, cfg.t_end),
        ProblemKind::Matrix { dim } => random_matrix_problem(dim, cfg.seed, cfg.t_end),
    }
}

fn build_scheme(family: Family, tau: f64) -> Result<SplittingScheme> {
    match family {
        Family::F => build_f(tau),
        Family::D => build_d(tau),
    }
}

/// Reference state at T plus the measured reference tolerance.
fn reference_state(
    cfg: &StudyConfig,
    problem: &EvolutionProblem,
    backend: &ExpActionBackend,
) -> Result<(Array1<Complex64>, f64)> {
    match cfg.reference {
        ReferenceMode::Exact => {
            let dx = match cfg.problem {
                ProblemKind::Transport { dx } => dx,
                _ => unreachable!("validated: exact reference implies transport"),
            };
            let grid = ModelSpec::transport(dx)?.grid;
            Ok((transport_exact_on_grid(&grid, cfg.t_end, 1e-12)?, 0.0))
        }
        ReferenceMode::FineStep => {
            let h_min = *cfg.hs.last().expect("validated: nonempty");
            let h_ref = h_min / 64.0;
            let strang = build_f(0.5)?;
            let opts = IntegrateOptions::default();
            let base = integrate(&strang, problem, backend, h_ref, opts)?;
            let halved = integrate(&strang, problem, backend, 0.5 * h_ref, opts)?;
            let tol = problem.weighted_norm(&(&base.state - &halved.state));
            Ok((halved.state, tol))
        }
    }
}

fn median_ms(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs every (tau, h) cell of the study. Cell failures are recorded on the
/// row (error NaN) and do not abort the rest of the study.
pub fn run_convergence_study(cfg: &StudyConfig) -> Result<ErrorTable> {
    cfg.validate()?;
    let problem = build_problem(cfg)?;
    let backend = ExpActionBackend::with_variant(cfg.backend);
    let (reference, ref_tol) = reference_state(cfg, &problem, &backend)?;
    let norm0 = problem.weighted_norm(&problem.u0);
    let name = cfg.problem.name();

    let schemes = cfg
        .taus
        .iter()
        .map(|&tau| build_scheme(cfg.family, tau))
        .collect::<Result<Vec<SplittingScheme>>>()?;

    struct Cell {
        scheme: usize,
        row: CellRow,
        timings: Vec<f64>,
        state: Option<Array1<Complex64>>,
    }
    let mut cells = Vec::with_capacity(cfg.taus.len() * cfg.hs.len());
    for (si, &tau) in cfg.taus.iter().enumerate() {
        for &h in &cfg.hs {
            cells.push(Cell {
                scheme: si,
                row: CellRow {
                    problem: name,
                    family: cfg.family,
                    tau,
                    h,
                    steps: (cfg.t_end / h).round() as u64,
                    error_l2: f64::NAN,
                    runtime_ms: f64::NAN,
                    stage_count: schemes[si].stages().len(),
                    norm_drift: f64::NAN,
                    below_noise_floor: false,
                    failure: None,
                },
                timings: Vec::with_capacity(cfg.timing_repeats),
                state: None,
            });
        }
    }

    // timing repeats interleave as whole-grid sweeps: one cell's samples are
    // then separated in time, so a transient host stall inflates at most one
    // of them and the per-cell median rejects it
    for sweep in 0..cfg.timing_repeats {
        for cell in cells.iter_mut().filter(|c| c.row.failure.is_none()) {
            let scheme = &schemes[cell.scheme];
            match integrate(scheme, &problem, &backend, cell.row.h, IntegrateOptions::default()) {
                Ok(rep) => {
                    cell.timings.push(rep.stepping.as_secs_f64() * 1e3);
                    if sweep == 0 {
                        cell.row.steps = rep.steps;
                        cell.state = Some(rep.state);
                    }
                }
                Err(e) => {
                    cell.row.failure = Some(e.to_string());
                    cell.state = None;
                }
            }
        }
    }

    let rows = cells
        .into_iter()
        .map(|mut cell| {
            if let Some(u) = cell.state {
                cell.row.error_l2 = problem.weighted_norm(&(&u - &reference));
                cell.row.runtime_ms = median_ms(cell.timings);
                cell.row.norm_drift = (problem.weighted_norm(&u) - norm0).abs() / norm0;
                cell.row.below_noise_floor = ref_tol > 0.0 && cell.row.error_l2 < 100.0 * ref_tol;
            }
            cell.row
        })
        .collect();

    let mut table = ErrorTable {
        config: cfg.clone(),
        rows,
        fitted: Vec::new(),
        reference_tolerance: ref_tol,
    };
    table.fitted = cfg
        .taus
        .iter()
        .filter_map(|&tau| estimate_order(&table, tau).ok())
        .collect();
    Ok(table)
}

/// Least-squares order fit over the usable rows of one tau (finite positive
/// error, above the noise floor). Needs at least three points.
pub fn estimate_order(table: &ErrorTable, tau: f64) -> Result<FittedOrder> {
    let pts: Vec<(f64, f64)> = table
        .rows_for_tau(tau)
        .filter(|r| r.error_l2.is_finite() && r.error_l2 > 0.0 && !r.below_noise_floor)
        .map(|r| (r.h.ln(), r.error_l2.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "order fit for tau = {tau} has {} usable points, needs 3",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let xbar = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ybar = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy = pts.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)).sum::<f64>();
    let sxx = pts.iter().map(|p| (p.0 - xbar) * (p.0 - xbar)).sum::<f64>();
    Ok(FittedOrder {
        tau,
        order: sxy / sxx,
        points_used: pts.len(),
    })
}

/// Mean per-step stepping time (ms) over the successful rows with the given
/// stage count: total timed stepping time over total steps, so every step
/// weighs equally and short noisy cells cannot dominate the estimate.
pub fn mean_per_step_ms(table: &ErrorTable, stage_count: usize) -> Option<f64> {
    let (mut ms, mut steps) = (0.0, 0u64);
    for r in table.rows.iter().filter(|r| {
        r.stage_count == stage_count && r.runtime_ms.is_finite() && r.steps > 0
    }) {
        ms += r.runtime_ms;
        steps += r.steps;
    }
    (steps > 0).then(|| ms / steps as f64)
}

/// Per-step cost of the 5-stage F schemes relative to the 3-stage ones.
pub fn stage_cost_ratio(table: &ErrorTable) -> Option<f64> {
    Some(mean_per_step_ms(table, 5)? / mean_per_step_ms(table, 3)?)
}

/// The seven-column CSV table; identical configs and seeds give byte-identical
/// output except for the runtime column.
pub fn csv_string(table: &ErrorTable) -> String {
    let mut s = String::from("problem,family,tau,h,steps,error_l2,runtime_ms\n");
    for row in &table.rows {
        s.push_str(&row.csv_line());
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Log-log error plot: one polyline per tau, hollow markers for noise-floor
/// points, and a dashed slope-2 guide.
pub fn svg_string(table: &ErrorTable) -> String {
    let cfg = &table.config;
    let (width, height) = (860.0, 600.0);
    let (xl, xr, yt, yb) = (80.0, 620.0, 50.0, 530.0);

    let mut pts = Vec::new();
    for r in &table.rows {
        if r.error_l2.is_finite() && r.error_l2 > 0.0 {
            pts.push((r.h.log10(), r.error_l2.log10()));
        }
    }
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"13\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{xl}\" y=\"28\">{} convergence, family {} (L2 error vs h, log-log)</text>\n",
        cfg.problem.name(),
        cfg.family
    ));
    if pts.is_empty() {
        s.push_str("<text x=\"300\" y=\"300\">no usable data</text>\n</svg>\n");
        return s;
    }

    let min_max = |it: &mut dyn Iterator<Item = f64>| {
        it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
    };
    let (mut hx0, mut hx1) = min_max(&mut pts.iter().map(|p| p.0));
    let (mut ey0, mut ey1) = min_max(&mut pts.iter().map(|p| p.1));
    let padx = 0.05 * (hx1 - hx0).max(0.5);
    let pady = 0.08 * (ey1 - ey0).max(0.5);
    hx0 -= padx;
    hx1 += padx;
    ey0 -= pady;
    ey1 += pady;
    let sx = move |lh: f64| xl + (lh - hx0) / (hx1 - hx0) * (xr - xl);
    let sy = move |le: f64| yb - (le - ey0) / (ey1 - ey0) * (yb - yt);

    s.push_str(&format!(
        "<rect x=\"{xl}\" y=\"{yt}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        xr - xl,
        yb - yt
    ));
    let mut k = hx0.ceil() as i64;
    while k as f64 <= hx1 {
        let x = sx(k as f64);
        s.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{yt}\" x2=\"{x:.2}\" y2=\"{yb}\" stroke=\"#ddd\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">1e{k}</text>\n",
            x,
            yb + 20.0
        ));
        k += 1;
    }
    let mut k = ey0.ceil() as i64;
    while k as f64 <= ey1 {
        let y = sy(k as f64);
        s.push_str(&format!(
            "<line x1=\"{xl}\" y1=\"{y:.2}\" x2=\"{xr}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">1e{k}</text>\n",
            xl - 8.0,
            y + 4.0
        ));
        k += 1;
    }
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">h</text>\n",
        0.5 * (xl + xr),
        yb + 42.0
    ));

    // slope-2 guide anchored just above the largest-h errors
    let hmax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let at_hmax: Vec<f64> = pts
        .iter()
        .filter(|p| (p.0 - hmax).abs() < 1e-12)
        .map(|p| p.1)
        .collect();
    let anchor = at_hmax.iter().sum::<f64>() / at_hmax.len() as f64 + 0.35;
    let guide = |lh: f64| anchor + 2.0 * (lh - hmax);
    let (g0, g1) = (hx0 + padx, hx1 - padx);
    s.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#888\" \
         stroke-dasharray=\"6,4\"/>\n",
        sx(g0),
        sy(guide(g0)),
        sx(g1),
        sy(guide(g1))
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"#888\">h^2</text>\n",
        sx(0.5 * (g0 + g1)) + 6.0,
        sy(guide(0.5 * (g0 + g1))) - 6.0
    ));

    for (ti, &tau) in cfg.taus.iter().enumerate() {
        let color = PALETTE[ti % PALETTE.len()];
        let mut line = String::new();
        let mut markers = String::new();
        for r in table.rows_for_tau(tau) {
            if !(r.error_l2.is_finite() && r.error_l2 > 0.0) {
                continue;
            }
            let (x, y) = (sx(r.h.log10()), sy(r.error_l2.log10()));
            if r.below_noise_floor {
                markers.push_str(&format!(
                    "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3.5\" fill=\"white\" \
                     stroke=\"{color}\"/>\n"
                ));
            } else {
                line.push_str(&format!("{x:.2},{y:.2} "));
                markers.push_str(&format!(
                    "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>\n"
                ));
            }
        }
        if !line.is_empty() {
            s.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                line.trim_end()
            ));
        }
        s.push_str(&markers);
        let ly = 60.0 + 22.0 * ti as f64;
        s.push_str(&format!(
            "<line x1=\"640\" y1=\"{ly}\" x2=\"668\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n"
        ));
        let order = table
            .fitted_order(tau)
            .map(|o| format!("{o:.2}"))
            .unwrap_or_else(|| "n/a".into());
        s.push_str(&format!(
            "<text x=\"676\" y=\"{:.2}\">tau={tau:.4} (order {order})</text>\n",
            ly + 4.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes study.csv and/or study.svg under dir; returns the written paths.
pub fn emit_outputs(table: &ErrorTable, dir: &Path, emit: EmitMode) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if matches!(emit, EmitMode::Csv | EmitMode::Both) {
        let p = dir.join("study.csv");
        std::fs::write(&p, csv_string(table))?;
        written.push(p);
    }
    if matches!(emit, EmitMode::Svg | EmitMode::Both) {
        let p = dir.join("study.svg");
        std::fs::write(&p, svg_string(table))?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_cfg() -> StudyConfig {
        let mut cfg = defaults_for(ProblemKind::Matrix { dim: 4 });
        cfg.taus = vec![0.25];
        cfg.hs = vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0];
        cfg.timing_repeats = 1;
        cfg
    }

    #[test]
    fn validate_catches_bad_configs() {
        let good = matrix_cfg();
        assert!(good.validate().is_ok());

        let mut c = matrix_cfg();
        c.taus.clear();
        assert!(matches!(c.validate(), Err(Error::Configuration(_))));

        let mut c = matrix_cfg();
        c.taus = vec![0.6];
        assert!(c.validate().is_err(), "tau beyond F range");
        c.family = Family::D;
        assert!(c.validate().is_ok(), "same tau fine for D");

        let mut c = matrix_cfg();
        c.taus = vec![0.25, 0.25];
        assert!(c.validate().is_err(), "duplicate tau");

        let mut c = matrix_cfg();
        c.hs = vec![0.1, 0.2];
        assert!(c.validate().is_err(), "hs must decrease");

        let mut c = matrix_cfg();
        c.hs = vec![0.3];
        assert!(c.validate().is_err(), "T/h must be integral");

        let mut c = matrix_cfg();
        c.reference = ReferenceMode::Exact;
        assert!(c.validate().is_err(), "exact reference is transport-only");

        let mut c = matrix_cfg();
        c.timing_repeats = 0;
        assert!(c.validate().is_err());

        let mut c = matrix_cfg();
        c.problem = ProblemKind::Schrodinger { grid_n: 16 };
        assert!(c.validate().is_err(), "grid below Schrödinger guard");
    }

    #[test]
    fn defaults_have_expected_shape() {
        let s = defaults_for(ProblemKind::Schrodinger { grid_n: 128 });
        assert_eq!(s.taus.len(), 6);
        assert_eq!(s.hs.len(), 5);
        assert_eq!(s.family, Family::F);
        assert!((s.taus[2] - 0.21132486540518713).abs() < 1e-16);
        assert!(s.validate().is_ok());

        let t = defaults_for(ProblemKind::Transport { dx: 0.004 });
        assert_eq!(t.family, Family::D);
        assert_eq!(t.reference, ReferenceMode::Exact);
        assert_eq!(t.hs, vec![0.02, 0.01, 5e-3, 2.5e-3, 1.25e-3]);
        assert!(t.validate().is_ok());
    }

    #[test]
    fn matrix_study_converges_at_second_order() {
        let table = run_convergence_study(&matrix_cfg()).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(!table.any_failed());
        assert!(table.reference_tolerance > 0.0);
        let order = table.fitted_order(0.25).expect("fit exists");
        assert!(
            (1.8..=2.2).contains(&order),
            "fitted order {order} outside [1.8, 2.2]"
        );
        // errors strictly decrease with h
        let errs: Vec<f64> = table.rows.iter().map(|r| r.error_l2).collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn csv_is_deterministic_except_runtime() {
        let cfg = matrix_cfg();
        let a = csv_string(&run_convergence_study(&cfg).unwrap());
        let b = csv_string(&run_convergence_study(&cfg).unwrap());
        let strip = |s: &str| {
            s.lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        let mut lines = a.lines();
        assert_eq!(
            lines.next().unwrap(),
            "problem,family,tau,h,steps,error_l2,runtime_ms"
        );
        let first = lines.next().unwrap();
        assert!(
            first.starts_with("matrix,F,2.5000000000000000e-1,1.2500000000000000e-1,8,"),
            "unexpected row: {first}"
        );
    }

    #[test]
    fn order_fit_needs_three_points_and_recovers_slopes() {
        let cfg = matrix_cfg();
        let mk_row = |h: f64, err: f64, noise: bool| CellRow {
            problem: "matrix",
            family: Family::F,
            tau: 0.25,
            h,
            steps: (1.0 / h).round() as u64,
            error_l2: err,
            runtime_ms: 1.0,
            stage_count: 5,
            norm_drift: 0.0,
            below_noise_floor: noise,
            failure: None,
        };
        let mut table = ErrorTable {
            config: cfg,
            rows: vec![
                mk_row(0.1, 3e-3, false),
                mk_row(0.05, 7.5e-4, false),
                mk_row(0.025, 1.875e-4, false),
                mk_row(0.0125, 5e-5, true),
            ],
            fitted: Vec::new(),
            reference_tolerance: 1e-6,
        };
        let fit = estimate_order(&table, 0.25).unwrap();
        assert_eq!(fit.points_used, 3, "noise-floor row excluded");
        assert!((fit.order - 2.0).abs() < 1e-12);
        table.rows[1].below_noise_floor = true;
        assert!(matches!(
            estimate_order(&table, 0.25),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn per_step_cost_uses_stage_counts() {
        let mut table = ErrorTable {
            config: matrix_cfg(),
            rows: Vec::new(),
            fitted: Vec::new(),
            reference_tolerance: 0.0,
        };
        let mk = |stages: usize, steps: u64, runtime: f64| CellRow {
            problem: "matrix",
            family: Family::F,
            tau: 0.1,
            h: 0.1,
            steps,
            error_l2: 1e-3,
            runtime_ms: runtime,
            stage_count: stages,
            norm_drift: 0.0,
            below_noise_floor: false,
            failure: None,
        };
        // step-weighted: (10 + 30)/(10 + 40) = 0.8 per step, not the cell
        // mean 0.875
        table.rows.push(mk(3, 10, 10.0));
        table.rows.push(mk(3, 40, 30.0));
        table.rows.push(mk(5, 20, 32.0));
        let r = stage_cost_ratio(&table).unwrap();
        assert!((r - 2.0).abs() < 1e-12, "ratio {r}");
        table.rows.retain(|r| r.stage_count != 5);
        assert!(stage_cost_ratio(&table).is_none());
    }

    #[test]
    fn failed_cells_become_nan_rows() {
        let mut table = run_convergence_study(&matrix_cfg()).unwrap();
        assert!(!table.any_failed());
        // a failed cell keeps its row with a NaN error marker
        table.rows[1].error_l2 = f64::NAN;
        table.rows[1].failure = Some("injected".into());
        let csv = csv_string(&table);
        let bad_line = csv.lines().nth(2).unwrap();
        assert!(bad_line.contains(",NaN,"), "row: {bad_line}");
        assert!(table.any_failed());
    }

    #[test]
    fn svg_has_series_guide_and_legend() {
        let table = run_convergence_study(&matrix_cfg()).unwrap();
        let svg = svg_string(&table);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("h^2"));
        assert!(svg.contains("tau=0.2500"));
        assert!(svg.contains("matrix convergence, family F"));
    }

    #[test]
    fn emit_writes_requested_artifacts() {
        let table = run_convergence_study(&matrix_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let both = emit_outputs(&table, dir.path(), EmitMode::Both).unwrap();
        assert_eq!(both.len(), 2);
        assert!(both[0].ends_with("study.csv") && both[0].exists());
        assert!(both[1].ends_with("study.svg") && both[1].exists());
        let csv_only = emit_outputs(&table, &dir.path().join("sub"), EmitMode::Csv).unwrap();
        assert_eq!(csv_only.len(), 1);
        let content = std::fs::read_to_string(&csv_only[0]).unwrap();
        assert_eq!(content, csv_string(&table));
    }

    #[test]
    fn transport_study_smoke_with_exact_reference() {
        // tiny grid and horizon: exercises the exact-reference path cheaply
        let mut cfg = defaults_for(ProblemKind::Transport { dx: 0.02 });
        cfg.t_end = 0.25;
        cfg.taus = vec![0.5];
        cfg.hs = vec![0.25 / 4.0, 0.25 / 8.0, 0.25 / 16.0];
        cfg.timing_repeats = 1;
        let table = run_convergence_study(&cfg).unwrap();
        assert!(!table.any_failed());
        assert_eq!(table.reference_tolerance, 0.0);
        // errors decrease until the spatial floor; at dx=0.02 and these h
        // the first refinement must at least shrink the error
        let errs: Vec<f64> = table.rows.iter().map(|r| r.error_l2).collect();
        assert!(errs[0] > errs[1], "{errs:?}");
        assert!(errs[2] < 1e-3, "{errs:?}");
    }
}
