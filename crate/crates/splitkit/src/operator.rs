//! Dense operators, time-dependent operator families, and evolution problems
//! for u'(t) = [A + B(t)] u(t).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};

static NEXT_OPERATOR_ID: AtomicU64 = AtomicU64::new(1);

/// Structure tag. An optimization hint for matvec and exponential dispatch;
/// a tag that does not match the entries is rejected at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    General,
    Diagonal,
    /// Entries vanish outside |i - j| <= bandwidth.
    Banded(usize),
}

impl Structure {
    /// Bandwidth lattice: Diagonal = 0, General = unbounded.
    fn bandwidth(self, dim: usize) -> usize {
        match self {
            Structure::Diagonal => 0,
            Structure::Banded(b) => b,
            Structure::General => dim.saturating_sub(1),
        }
    }

    fn from_bandwidth(bw: usize, dim: usize) -> Structure {
        if bw == 0 {
            Structure::Diagonal
        } else if bw + 1 < dim {
            Structure::Banded(bw)
        } else {
            Structure::General
        }
    }
}

/// Square complex matrix with an identity used as an exponential-cache key.
///
/// Every constructor mints a fresh identity; clones share it. Operators that
/// stay fixed across integration steps (the A of an evolution problem) are
/// pinned so exponential caches may retain entries keyed by their identity.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    id: u64,
    entries: Array2<Complex64>,
    structure: Structure,
    pinned: bool,
}

impl DenseOperator {
    pub fn new(entries: Array2<Complex64>) -> Result<Self> {
        Self::with_structure(entries, Structure::General)
    }

    pub fn with_structure(entries: Array2<Complex64>, structure: Structure) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c {
            return Err(Error::InvalidArgument(format!(
                "operator must be square, got {r}x{c}"
            )));
        }
        if r == 0 {
            return Err(Error::InvalidArgument("operator dimension is zero".into()));
        }
        let claimed = structure.bandwidth(r);
        if claimed + 1 < r {
            for ((i, j), v) in entries.indexed_iter() {
                let d = i.abs_diff(j);
                if d > claimed && (v.re != 0.0 || v.im != 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "structure tag {structure:?} inconsistent: nonzero entry at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(DenseOperator {
            id: NEXT_OPERATOR_ID.fetch_add(1, Ordering::Relaxed),
            entries,
            structure,
            pinned: false,
        })
    }

    /// Constructor for matrices whose tag holds by construction (only entries
    /// inside the claimed band were ever written); skips the consistency scan,
    /// which costs a full O(dim^2) pass that dominates per-step time at PDE sizes.
    fn trusted(entries: Array2<Complex64>, structure: Structure) -> Self {
        DenseOperator {
            id: NEXT_OPERATOR_ID.fetch_add(1, Ordering::Relaxed),
            entries,
            structure,
            pinned: false,
        }
    }

    pub fn from_diagonal(diag: &[Complex64]) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::InvalidArgument("operator dimension is zero".into()));
        }
        let n = diag.len();
        let mut entries = Array2::zeros((n, n));
        for (i, v) in diag.iter().enumerate() {
            entries[(i, i)] = *v;
        }
        Ok(Self::trusted(entries, Structure::Diagonal))
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::from_diagonal(&vec![Complex64::new(1.0, 0.0); dim])
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("operator dimension is zero".into()));
        }
        Ok(Self::trusted(Array2::zeros((dim, dim)), Structure::Diagonal))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<Complex64> {
        &self.entries
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_pinned(&self) -> bool {
        self.pinned
    }

    /// Marks the operator as long-lived so exponential caches keep entries
    /// keyed by its identity. Applied to problem A matrices at construction.
    pub fn pin(&mut self) {
        self.pinned = true;
    }

    /// A copy exempt from exponential caching; for throwaway coefficients
    /// (nested-quadrature flows) that would otherwise flood the cache.
    pub fn unpinned(&self) -> DenseOperator {
        let mut c = self.clone();
        c.pinned = false;
        c
    }

    pub fn diagonal(&self) -> Array1<Complex64> {
        self.entries.diag().to_owned()
    }

    /// Matrix 1-norm (max column abs sum). Banded operators scan only the
    /// band; entries outside it are exactly zero by the structure invariant.
    pub fn one_norm(&self) -> f64 {
        let n = self.dim();
        let bw = self.structure.bandwidth(n);
        let mut sums = vec![0.0; n];
        if bw + 1 >= n {
            for row in self.entries.outer_iter() {
                for (j, v) in row.iter().enumerate() {
                    sums[j] += v.norm();
                }
            }
        } else {
            let es = self.entries.as_slice().expect("row-major entries");
            for i in 0..n {
                let lo = i.saturating_sub(bw);
                let hi = (i + bw + 1).min(n);
                for j in lo..hi {
                    sums[j] += es[i * n + j].norm();
                }
            }
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    /// Matvec dispatched on the structure tag.
    pub fn apply(&self, v: &Array1<Complex64>) -> Result<Array1<Complex64>> {
        let n = self.dim();
        if v.len() != n {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: operator {n}, vector {}",
                v.len()
            )));
        }
        let vs = v.as_slice().expect("contiguous vector");
        let es = self.entries.as_slice().expect("row-major entries");
        let mut out = Array1::zeros(n);
        let os = out.as_slice_mut().expect("contiguous output");
        match self.structure {
            Structure::Diagonal => {
                for i in 0..n {
                    os[i] = es[i * n + i] * vs[i];
                }
            }
            Structure::Banded(b) => {
                for i in 0..n {
                    let lo = i.saturating_sub(b);
                    let hi = (i + b + 1).min(n);
                    let row = &es[i * n + lo..i * n + hi];
                    let xs = &vs[lo..hi];
                    let (mut re, mut im) = (0.0, 0.0);
                    for (a, x) in row.iter().zip(xs) {
                        re += a.re * x.re - a.im * x.im;
                        im += a.re * x.im + a.im * x.re;
                    }
                    os[i] = Complex64::new(re, im);
                }
            }
            Structure::General => {
                for i in 0..n {
                    let row = &es[i * n..(i + 1) * n];
                    let (mut re, mut im) = (0.0, 0.0);
                    for (a, x) in row.iter().zip(vs) {
                        re += a.re * x.re - a.im * x.im;
                        im += a.re * x.im + a.im * x.re;
                    }
                    os[i] = Complex64::new(re, im);
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &DenseOperator) -> Result<DenseOperator> {
        self.combine(other, |x, y| x + y)
    }

    pub fn sub(&self, other: &DenseOperator) -> Result<DenseOperator> {
        self.combine(other, |x, y| x - y)
    }

    /// Entrywise combination confined to the union band when both operands
    /// are banded, so diagonal-plus-diagonal stays O(dim).
    fn combine(
        &self,
        other: &DenseOperator,
        op: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Result<DenseOperator> {
        self.check_dim(other)?;
        let n = self.dim();
        let bw = self
            .structure
            .bandwidth(n)
            .max(other.structure.bandwidth(n));
        let structure = Structure::from_bandwidth(bw, n);
        if bw + 1 >= n {
            let mut entries = self.entries.clone();
            entries.zip_mut_with(&other.entries, |x, &y| *x = op(*x, y));
            return Ok(Self::trusted(entries, structure));
        }
        let mut out = Array2::<Complex64>::zeros((n, n));
        let os = out.as_slice_mut().expect("row-major entries");
        let xs = self.entries.as_slice().expect("row-major entries");
        let ys = other.entries.as_slice().expect("row-major entries");
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let hi = (i + bw + 1).min(n);
            for j in lo..hi {
                os[i * n + j] = op(xs[i * n + j], ys[i * n + j]);
            }
        }
        Ok(Self::trusted(out, structure))
    }

    pub fn scale(&self, c: Complex64) -> DenseOperator {
        let n = self.dim();
        let bw = self.structure.bandwidth(n);
        if bw + 1 >= n {
            return Self::trusted(self.entries.mapv(|v| v * c), self.structure);
        }
        let mut out = Array2::<Complex64>::zeros((n, n));
        let os = out.as_slice_mut().expect("row-major entries");
        let es = self.entries.as_slice().expect("row-major entries");
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let hi = (i + bw + 1).min(n);
            for j in lo..hi {
                os[i * n + j] = es[i * n + j] * c;
            }
        }
        Self::trusted(out, self.structure)
    }

    pub fn matmul(&self, other: &DenseOperator) -> Result<DenseOperator> {
        self.check_dim(other)?;
        let n = self.dim();
        let bw = self
            .structure
            .bandwidth(n)
            .saturating_add(other.structure.bandwidth(n));
        DenseOperator::with_structure(
            matmul_entries(&self.entries, &other.entries),
            Structure::from_bandwidth(bw.min(n), n),
        )
    }

    fn check_dim(&self, other: &DenseOperator) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }
}

/// Row-major ikj matmul; fast enough for the dense exponentials this crate
/// computes (dim <= 2048 guard upstream).
pub(crate) fn matmul_entries(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    let mut c = Array2::<Complex64>::zeros((n, m));
    let asl = a.as_slice().expect("row-major");
    let bsl = b.as_slice().expect("row-major");
    let csl = c.as_slice_mut().expect("row-major");
    for i in 0..n {
        let crow = &mut csl[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = asl[i * k + kk];
            if aik.re == 0.0 && aik.im == 0.0 {
                continue;
            }
            let brow = &bsl[kk * m..(kk + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                cv.re += aik.re * bv.re - aik.im * bv.im;
                cv.im += aik.re * bv.im + aik.im * bv.re;
            }
        }
    }
    c
}

/// [X, Y] = XY - YX.
pub fn commutator(x: &DenseOperator, y: &DenseOperator) -> Result<DenseOperator> {
    x.matmul(y)?.sub(&y.matmul(x)?)
}

type OpFn = Arc<dyn Fn(f64) -> DenseOperator + Send + Sync>;
type DiagFn = Arc<dyn Fn(f64) -> Array1<Complex64> + Send + Sync>;

/// How time derivatives of B(t) are obtained.
#[derive(Clone)]
pub enum DerivativeMode {
    Analytic { d1: OpFn, d2: Option<OpFn> },
    FiniteDifference { delta: f64 },
}

/// Default centered-difference step for a scheme running at step size h.
pub fn default_fd_delta(h: f64) -> f64 {
    f64::max(1e-5, h * 1e-3)
}

/// Time-dependent operator family t -> B(t) with a derivative mode and an
/// optional closed-form closure for C(t) = [B(t), A] + B'(t).
#[derive(Clone)]
pub struct TimeDependentOperator {
    eval: OpFn,
    deriv: DerivativeMode,
    commutator_override: Option<OpFn>,
    diag_eval: Option<DiagFn>,
    diag_commutator: Option<DiagFn>,
    dim: usize,
}

impl TimeDependentOperator {
    pub fn new(
        eval: impl Fn(f64) -> DenseOperator + Send + Sync + 'static,
        deriv: DerivativeMode,
    ) -> Result<Self> {
        if let DerivativeMode::FiniteDifference { delta } = deriv {
            if !(delta > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "finite-difference step must be positive, got {delta}"
                )));
            }
        }
        let eval: OpFn = Arc::new(eval);
        let dim = eval(0.0).dim();
        Ok(TimeDependentOperator {
            eval,
            deriv,
            commutator_override: None,
            diag_eval: None,
            diag_commutator: None,
            dim,
        })
    }

    pub fn with_analytic_derivative(
        eval: impl Fn(f64) -> DenseOperator + Send + Sync + 'static,
        d1: impl Fn(f64) -> DenseOperator + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::new(
            eval,
            DerivativeMode::Analytic {
                d1: Arc::new(d1),
                d2: None,
            },
        )
    }

    pub fn with_analytic_derivatives(
        eval: impl Fn(f64) -> DenseOperator + Send + Sync + 'static,
        d1: impl Fn(f64) -> DenseOperator + Send + Sync + 'static,
        d2: impl Fn(f64) -> DenseOperator + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::new(
            eval,
            DerivativeMode::Analytic {
                d1: Arc::new(d1),
                d2: Some(Arc::new(d2)),
            },
        )
    }

    pub fn with_finite_difference(
        eval: impl Fn(f64) -> DenseOperator + Send + Sync + 'static,
        delta: f64,
    ) -> Result<Self> {
        Self::new(eval, DerivativeMode::FiniteDifference { delta })
    }

    /// Registers C(t) = [B(t), A] + B'(t) in closed form, bypassing the
    /// discrete commutator in effective_c.
    pub fn set_commutator_override(
        &mut self,
        c: impl Fn(f64) -> DenseOperator + Send + Sync + 'static,
    ) {
        self.commutator_override = Some(Arc::new(c));
    }

    pub fn has_commutator_override(&self) -> bool {
        self.commutator_override.is_some()
    }

    /// Registers an O(dim) closure for the diagonal of B(t). Only valid when
    /// eval(t) is diagonal for every t; must produce the same values, which
    /// lets stepping skip dense storage for multiplication operators.
    pub fn set_diagonal_eval(
        &mut self,
        f: impl Fn(f64) -> Array1<Complex64> + Send + Sync + 'static,
    ) {
        self.diag_eval = Some(Arc::new(f));
    }

    /// Registers the diagonal of the closed-form C(t); same contract as
    /// set_diagonal_eval relative to the commutator override.
    pub fn set_diagonal_commutator(
        &mut self,
        f: impl Fn(f64) -> Array1<Complex64> + Send + Sync + 'static,
    ) {
        self.diag_commutator = Some(Arc::new(f));
    }

    pub fn eval_diagonal(&self, t: f64) -> Option<Array1<Complex64>> {
        self.diag_eval.as_ref().map(|f| f(t))
    }

    pub fn commutator_diagonal(&self, t: f64) -> Option<Array1<Complex64>> {
        self.diag_commutator.as_ref().map(|f| f(t))
    }

    pub fn eval(&self, t: f64) -> DenseOperator {
        (self.eval)(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// d^order/dt^order B(t), order in {1, 2}.
pub fn b_derivative(b: &TimeDependentOperator, t: f64, order: u32) -> Result<DenseOperator> {
    if order != 1 && order != 2 {
        return Err(Error::InvalidArgument(format!(
            "derivative order must be 1 or 2, got {order}"
        )));
    }
    match &b.deriv {
        DerivativeMode::Analytic { d1, d2 } => {
            if order == 1 {
                Ok(d1(t))
            } else {
                match d2 {
                    Some(d2) => Ok(d2(t)),
                    None => Err(Error::Configuration(
                        "second derivative requested but no analytic B'' registered".into(),
                    )),
                }
            }
        }
        DerivativeMode::FiniteDifference { delta } => {
            let d = *delta;
            let plus = b.eval(t + d);
            let minus = b.eval(t - d);
            if order == 1 {
                Ok(plus.sub(&minus)?.scale(Complex64::new(0.5 / d, 0.0)))
            } else {
                let mid = b.eval(t).scale(Complex64::new(2.0, 0.0));
                Ok(plus
                    .add(&minus)?
                    .sub(&mid)?
                    .scale(Complex64::new(1.0 / (d * d), 0.0)))
            }
        }
    }
}

/// How effective_c obtains the commutator term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommutatorMode {
    /// [B(t), A] computed from the matrices plus b_derivative.
    Discrete,
    /// User-registered closed-form closure on the B family.
    AnalyticOverride,
}

/// C(t) = [B(t), A] + B'(t), the modified-exponent correction of the D family.
pub fn effective_c(
    b: &TimeDependentOperator,
    a: &DenseOperator,
    t: f64,
    mode: CommutatorMode,
) -> Result<DenseOperator> {
    match mode {
        CommutatorMode::AnalyticOverride => match &b.commutator_override {
            Some(c) => Ok(c(t)),
            None => Err(Error::Configuration(
                "analytic-override requested but no commutator closure registered".into(),
            )),
        },
        CommutatorMode::Discrete => {
            let bt = b.eval(t);
            commutator(&bt, a)?.add(&b_derivative(b, t, 1)?)
        }
    }
}

/// Linear nonautonomous problem u' = [A + B(t)] u on [0, t_end].
#[derive(Clone)]
pub struct EvolutionProblem {
    pub a: DenseOperator,
    pub b: TimeDependentOperator,
    pub u0: Array1<Complex64>,
    pub t_end: f64,
    pub norm_weights: Option<Array1<f64>>,
}

impl EvolutionProblem {
    pub fn new(
        mut a: DenseOperator,
        b: TimeDependentOperator,
        u0: Array1<Complex64>,
        t_end: f64,
    ) -> Result<Self> {
        if b.dim() != a.dim() || u0.len() != a.dim() {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: A {}, B {}, u0 {}",
                a.dim(),
                b.dim(),
                u0.len()
            )));
        }
        if !(t_end > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {t_end}"
            )));
        }
        a.pin();
        Ok(EvolutionProblem {
            a,
            b,
            u0,
            t_end,
            norm_weights: None,
        })
    }

    pub fn with_norm_weights(mut self, w: Array1<f64>) -> Result<Self> {
        if w.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "weight vector length {} does not match dimension {}",
                w.len(),
                self.dim()
            )));
        }
        if w.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidArgument(
                "norm weights must be strictly positive".into(),
            ));
        }
        self.norm_weights = Some(w);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// Weighted discrete L2 norm; plain l2 when no weights are set.
    pub fn weighted_norm(&self, v: &Array1<Complex64>) -> f64 {
        match &self.norm_weights {
            Some(w) => v
                .iter()
                .zip(w.iter())
                .map(|(x, &wi)| wi * x.norm_sqr())
                .sum::<f64>()
                .sqrt(),
            None => v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt(),
        }
    }
}
