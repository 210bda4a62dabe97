//! Quadrature rules underlying the two splitting families, their Peano error
//! kernels, and the closed-form kernel-integral criterion that selects the
//! optimal F-family node.

use crate::error::{Error, Result};

/// Splitting family: F is the five-exponential symmetric family on
/// tau in [0, 1/2]; D is the modified-exponent family on tau in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    F,
    D,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::F => write!(f, "F"),
            Family::D => write!(f, "D"),
        }
    }
}

/// Real polynomial in ascending coefficient order.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        let mut p = Polynomial { coeffs };
        while p.coeffs.len() > 1 && *p.coeffs.last().unwrap() == 0.0 {
            p.coeffs.pop();
        }
        if p.coeffs.is_empty() {
            p.coeffs.push(0.0);
        }
        p
    }

    /// s^k
    pub fn monomial(k: usize) -> Self {
        let mut coeffs = vec![0.0; k + 1];
        coeffs[k] = 1.0;
        Polynomial::new(coeffs)
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * s + c)
    }

    pub fn derivative(&self) -> Polynomial {
        if self.coeffs.len() == 1 {
            return Polynomial::new(vec![0.0]);
        }
        Polynomial::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, &c)| c * k as f64)
                .collect(),
        )
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Polynomial::new(out)
    }

    /// Exact definite integral via the antiderivative.
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |x: f64| {
            self.coeffs
                .iter()
                .enumerate()
                .rev()
                .fold(0.0, |acc, (k, &c)| acc * x + c / (k + 1) as f64)
                * x
        };
        anti(hi) - anti(lo)
    }
}

/// Nodes on [0, 1] with weights and derivative orders (0 = value, 1 = first
/// derivative). Order-0 weights sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule1D {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub derivative_orders: Vec<u32>,
}

impl QuadratureRule1D {
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>, derivative_orders: Vec<u32>) -> Result<Self> {
        if nodes.len() != weights.len() || nodes.len() != derivative_orders.len() {
            return Err(Error::InvalidArgument(
                "rule entry vectors must have equal length".into(),
            ));
        }
        if nodes.is_empty() {
            return Err(Error::InvalidArgument("rule must have at least one node".into()));
        }
        if nodes.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::InvalidArgument("rule nodes must lie in [0, 1]".into()));
        }
        if derivative_orders.iter().any(|&d| d > 1) {
            return Err(Error::InvalidArgument(
                "only value and first-derivative entries are supported".into(),
            ));
        }
        let w0: f64 = weights
            .iter()
            .zip(&derivative_orders)
            .filter(|(_, &d)| d == 0)
            .map(|(w, _)| w)
            .sum();
        if (w0 - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "order-0 weights must sum to 1, got {w0}"
            )));
        }
        Ok(QuadratureRule1D {
            nodes,
            weights,
            derivative_orders,
        })
    }
}

/// Nodes on the triangle 0 <= t2 <= t1 <= 1; weights sum to 1/2, the
/// triangle's area.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexQuadratureRule {
    pub nodes: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

impl SimplexQuadratureRule {
    pub fn new(nodes: Vec<(f64, f64)>, weights: Vec<f64>) -> Result<Self> {
        if nodes.len() != weights.len() || nodes.is_empty() {
            return Err(Error::InvalidArgument(
                "simplex rule requires matching nonempty node/weight lists".into(),
            ));
        }
        for &(t1, t2) in &nodes {
            if !(0.0..=1.0).contains(&t1) || !(0.0..=1.0).contains(&t2) || t2 > t1 {
                return Err(Error::InvalidArgument(format!(
                    "simplex node ({t1}, {t2}) outside 0 <= t2 <= t1 <= 1"
                )));
            }
        }
        let w: f64 = weights.iter().sum();
        if (w - 0.5).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "simplex weights must sum to 1/2, got {w}"
            )));
        }
        Ok(SimplexQuadratureRule { nodes, weights })
    }
}

/// Merge exactly coincident nodes, summing weights. At tau = 1/2 the two
/// F-family nodes collapse to the midpoint so the compiled scheme has three
/// stages.
fn merge_1d(entries: Vec<(f64, f64, u32)>) -> (Vec<f64>, Vec<f64>, Vec<u32>) {
    let mut merged: Vec<(f64, f64, u32)> = Vec::new();
    for (x, w, d) in entries {
        if let Some(e) = merged.iter_mut().find(|e| e.0 == x && e.2 == d) {
            e.1 += w;
        } else {
            merged.push((x, w, d));
        }
    }
    let nodes = merged.iter().map(|e| e.0).collect();
    let weights = merged.iter().map(|e| e.1).collect();
    let orders = merged.iter().map(|e| e.2).collect();
    (nodes, weights, orders)
}

fn merge_simplex(entries: Vec<((f64, f64), f64)>) -> (Vec<(f64, f64)>, Vec<f64>) {
    let mut merged: Vec<((f64, f64), f64)> = Vec::new();
    for (x, w) in entries {
        if let Some(e) = merged.iter_mut().find(|e| e.0 == x) {
            e.1 += w;
        } else {
            merged.push((x, w));
        }
    }
    (
        merged.iter().map(|e| e.0).collect(),
        merged.iter().map(|e| e.1).collect(),
    )
}

/// F-family rules: trapezoid-like pair at {tau, 1 - tau} for the first
/// Duhamel integral and the three-node triangle rule for the second.
pub fn f_family_rules(tau: f64) -> Result<(QuadratureRule1D, SimplexQuadratureRule)> {
    if !(0.0..=0.5).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "family F requires tau in [0, 1/2], got {tau}"
        )));
    }
    let hi = 1.0 - tau;
    let (nodes, weights, orders) = merge_1d(vec![(hi, 0.5, 0), (tau, 0.5, 0)]);
    let rule1 = QuadratureRule1D::new(nodes, weights, orders)?;
    let (snodes, sweights) = merge_simplex(vec![
        ((hi, hi), 0.125),
        ((hi, tau), 0.25),
        ((tau, tau), 0.125),
    ]);
    let rule2 = SimplexQuadratureRule::new(snodes, sweights)?;
    Ok((rule1, rule2))
}

/// D-family (Birkhoff) rules: value plus first derivative at tau for the
/// first integral, single node for the second. The derivative entry is
/// dropped when its weight vanishes (tau = 1/2, pure midpoint).
pub fn d_family_rules(tau: f64) -> Result<(QuadratureRule1D, SimplexQuadratureRule)> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "family D requires tau in [0, 1], got {tau}"
        )));
    }
    let dw = (1.0 - 2.0 * tau) / 2.0;
    let mut entries = vec![(tau, 1.0, 0)];
    if dw != 0.0 {
        entries.push((tau, dw, 1));
    }
    let (nodes, weights, orders) = merge_1d(entries);
    let rule1 = QuadratureRule1D::new(nodes, weights, orders)?;
    let rule2 = SimplexQuadratureRule::new(vec![(tau, tau)], vec![0.5])?;
    Ok((rule1, rule2))
}

/// Applies a 1D rule to f on [0, 1]. A derivative closure is required when
/// the rule carries first-derivative entries.
pub fn apply_rule_1d(
    rule: &QuadratureRule1D,
    f: &dyn Fn(f64) -> f64,
    df: Option<&dyn Fn(f64) -> f64>,
) -> Result<f64> {
    let mut acc = 0.0;
    for ((&x, &w), &d) in rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .zip(&rule.derivative_orders)
    {
        match d {
            0 => acc += w * f(x),
            1 => match df {
                Some(df) => acc += w * df(x),
                None => {
                    return Err(Error::Configuration(
                        "rule has derivative entries but no derivative was supplied".into(),
                    ))
                }
            },
            _ => unreachable!("orders validated at construction"),
        }
    }
    Ok(acc)
}

/// Piecewise-polynomial Peano kernel of a family's first-integral rule,
/// normalized without the h^3/2 prefactor: the rule error on f is
/// (1/2) * integral of K(s) f''(s) ds.
#[derive(Clone, Debug)]
pub struct ErrorKernel {
    pub family: Family,
    pub tau: f64,
    pieces: Vec<(f64, f64, Polynomial)>,
}

impl ErrorKernel {
    pub fn new(family: Family, tau: f64) -> Result<Self> {
        let range_ok = match family {
            Family::F => (0.0..=0.5).contains(&tau),
            Family::D => (0.0..=1.0).contains(&tau),
        };
        if !range_ok {
            return Err(Error::InvalidArgument(format!(
                "tau = {tau} outside the {family} family range"
            )));
        }
        let pieces = match family {
            Family::F => vec![
                (0.0, tau, Polynomial::new(vec![0.0, 0.0, 1.0])),
                (tau, 1.0 - tau, Polynomial::new(vec![tau, -1.0, 1.0])),
                (1.0 - tau, 1.0, Polynomial::new(vec![1.0, -2.0, 1.0])),
            ],
            // Peano-derived form; the integral at tau = 1/2 reproduces the
            // classical midpoint constant 1/24 after the 1/2 prefactor.
            Family::D => vec![
                (0.0, tau, Polynomial::new(vec![0.0, 0.0, 1.0])),
                (tau, 1.0, Polynomial::new(vec![1.0, -2.0, 1.0])),
            ],
        };
        let pieces = pieces.into_iter().filter(|(lo, hi, _)| hi > lo).collect();
        Ok(ErrorKernel { family, tau, pieces })
    }

    pub fn pieces(&self) -> &[(f64, f64, Polynomial)] {
        &self.pieces
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidArgument(format!(
                "kernel argument s = {s} outside [0, 1]"
            )));
        }
        for (lo, hi, p) in &self.pieces {
            if s >= *lo && s <= *hi {
                return Ok(p.eval(s));
            }
        }
        unreachable!("pieces tile [0, 1]")
    }

    /// Exact integral of the kernel over [0, 1] from the piecewise
    /// antiderivatives; no numeric quadrature.
    pub fn integral(&self) -> f64 {
        self.pieces
            .iter()
            .map(|(lo, hi, p)| p.integral(*lo, *hi))
            .sum()
    }

    /// Exact rule error (1/2) * integral K(s) f''(s) ds predicted by the
    /// kernel for a polynomial integrand.
    pub fn predicted_error(&self, f: &Polynomial) -> f64 {
        let fpp = f.derivative().derivative();
        0.5 * self
            .pieces
            .iter()
            .map(|(lo, hi, p)| p.mul(&fpp).integral(*lo, *hi))
            .sum::<f64>()
    }
}

/// Integral of the family kernel at tau, in closed form.
pub fn kernel_integral(family: Family, tau: f64) -> Result<f64> {
    Ok(ErrorKernel::new(family, tau)?.integral())
}

/// The F-family node where the kernel integral vanishes: (3 - sqrt(3))/6,
/// the lower two-point Gauss-Legendre node. Found by bisection; the kernel
/// integral is strictly increasing in tau on [0, 1/2].
pub fn optimal_tau_f() -> f64 {
    let g = |t: f64| kernel_integral(Family::F, t).expect("tau in range");
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    debug_assert!(g(lo) < 0.0 && g(hi) > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Independent arbiter: exact integral minus rule application for a
/// polynomial integrand of degree <= 6.
pub fn quadrature_error_oracle(rule: &QuadratureRule1D, f: &Polynomial) -> Result<f64> {
    if f.degree() > 6 {
        return Err(Error::InvalidArgument(format!(
            "oracle supports degree <= 6, got {}",
            f.degree()
        )));
    }
    let exact = f.integral(0.0, 1.0);
    let fd = f.derivative();
    let approx = apply_rule_1d(rule, &|s| f.eval(s), Some(&|s| fd.eval(s)))?;
    Ok(exact - approx)
}
