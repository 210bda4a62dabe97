//! Truncated Neumann-series and fine-step references. Both are independent
//! of the splitting constructions and arbitrate their local order.

use ndarray::Array1;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::expaction::ExpActionBackend;
use crate::operator::{DenseOperator, EvolutionProblem};
use crate::splitting::{build_f, integrate, IntegrateOptions};

/// Depth and base panel count for the nested Duhamel integrals remain
/// guarded: each extra depth multiplies cost by the node count of a level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeumannConfig {
    pub depth: usize,
    pub panels: usize,
}

impl Default for NeumannConfig {
    fn default() -> Self {
        NeumannConfig { depth: 2, panels: 4 }
    }
}

pub const NEUMANN_MAX_DEPTH: usize = 4;
pub const NEUMANN_MIN_PANELS: usize = 4;
pub const NEUMANN_MAX_DIM: usize = 32;

// 4-point Gauss-Legendre on [-1, 1]
const GL4_NODES: [f64; 4] = [
    -0.8611363115940526,
    -0.3399810435848563,
    0.3399810435848563,
    0.8611363115940526,
];
const GL4_WEIGHTS: [f64; 4] = [
    0.3478548451374538,
    0.6521451548625461,
    0.6521451548625461,
    0.3478548451374538,
];

/// Partial sum u^[n](h) = sum_{d=0}^n K^d[e^{.A} u0](h) of the Neumann
/// series, where K[u](h) = integral_0^h e^{(h-s)A} B(s) u(s) ds. Nested
/// integrals are evaluated on [0, 1] after s = h sigma, with composite
/// 4-point Gauss-Legendre whose panel count doubles per nesting level
/// outward, keeping the quadrature error below the h^{n+2} truncation term.
pub fn neumann_iterate(
    problem: &EvolutionProblem,
    backend: &ExpActionBackend,
    h: f64,
    cfg: NeumannConfig,
) -> Result<Array1<Complex64>> {
    if !(h >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be non-negative, got {h}"
        )));
    }
    if cfg.depth > NEUMANN_MAX_DEPTH {
        return Err(Error::Resource(format!(
            "Neumann depth {} exceeds the cost guard {NEUMANN_MAX_DEPTH}",
            cfg.depth
        )));
    }
    if cfg.panels < NEUMANN_MIN_PANELS {
        return Err(Error::Resource(format!(
            "panel count {} below the accuracy floor {NEUMANN_MIN_PANELS}",
            cfg.panels
        )));
    }
    if problem.dim() > NEUMANN_MAX_DIM {
        return Err(Error::Resource(format!(
            "dimension {} exceeds the oracle guard {NEUMANN_MAX_DIM}; \
             use reference_solution for large problems",
            problem.dim()
        )));
    }
    if h > 1.0 {
        return Err(Error::Resource(format!(
            "step {h} > 1 is outside the oracle's validated range"
        )));
    }
    // flows inside the nested integrals use throwaway coefficients; an
    // unpinned copy keeps them out of the backend cache
    let a_free = problem.a.unpinned();
    let mut acc = backend.exp_action(&problem.a, re(h), &problem.u0)?;
    for d in 1..=cfg.depth {
        let term = nested_term(problem, &a_free, backend, d, h, cfg.panels << (d - 1))?;
        acc.zip_mut_with(&term, |a, &t| *a += t);
    }
    Ok(acc)
}

/// K^d[e^{.A} u0](t), with `panels` at this level and half as many inward.
fn nested_term(
    problem: &EvolutionProblem,
    a_free: &DenseOperator,
    backend: &ExpActionBackend,
    d: usize,
    t: f64,
    panels: usize,
) -> Result<Array1<Complex64>> {
    if d == 0 {
        return backend.exp_action(a_free, re(t), &problem.u0);
    }
    let mut acc: Array1<Complex64> = Array1::zeros(problem.dim());
    if t == 0.0 {
        return Ok(acc);
    }
    let inner_panels = (panels / 2).max(NEUMANN_MIN_PANELS);
    for p in 0..panels {
        let lo = p as f64 / panels as f64;
        let hi = (p + 1) as f64 / panels as f64;
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        for (&xi, &wi) in GL4_NODES.iter().zip(&GL4_WEIGHTS) {
            let sigma = mid + half * xi;
            let w = half * wi;
            let inner = nested_term(problem, a_free, backend, d - 1, t * sigma, inner_panels)?;
            let bv = problem.b.eval(t * sigma).apply(&inner)?;
            let flowed = backend.exp_action(a_free, re(t * (1.0 - sigma)), &bv)?;
            acc.zip_mut_with(&flowed, |a, &f| *a += f * w);
        }
    }
    acc.mapv_inplace(|z| z * t);
    Ok(acc)
}

/// Fine-step midpoint-Strang reference at time t with a Richardson
/// convergence gate: the fine step is t/refinement, and halving it must move
/// the result by less than 1e-10 in relative norm.
pub fn reference_solution(
    problem: &EvolutionProblem,
    backend: &ExpActionBackend,
    t: f64,
    refinement: u64,
) -> Result<Array1<Complex64>> {
    if refinement < 10_000 {
        return Err(Error::InvalidArgument(format!(
            "refinement {refinement} gives a fine step above 1e-4 of the horizon"
        )));
    }
    if !(0.0..=problem.t_end * (1.0 + 1e-12)).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "reference time {t} outside [0, {}]",
            problem.t_end
        )));
    }
    if t == 0.0 {
        return Ok(problem.u0.clone());
    }
    let truncated = EvolutionProblem::new(
        problem.a.clone(),
        problem.b.clone(),
        problem.u0.clone(),
        t,
    )?;
    let strang = build_f(0.5).expect("tau in range");
    let h_fine = t / refinement as f64;
    let base = integrate(&strang, &truncated, backend, h_fine, IntegrateOptions::default())?;
    let halved = integrate(
        &strang,
        &truncated,
        backend,
        h_fine / 2.0,
        IntegrateOptions::default(),
    )?;
    let mut diff = base.state.clone();
    diff.zip_mut_with(&halved.state, |d, &h| *d -= h);
    let rel_diff = problem.weighted_norm(&diff) / problem.weighted_norm(&halved.state).max(1e-300);
    if rel_diff >= 1e-10 {
        return Err(Error::ReferenceUnconverged {
            rel_diff,
            base: base.state,
            halved: halved.state,
        });
    }
    Ok(base.state)
}

fn re(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}
