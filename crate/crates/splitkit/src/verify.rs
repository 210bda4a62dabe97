//! Fast built-in self checks for the `verify` CLI subcommand: structural
//! identities, kernel facts, and backend cross-validations that run in a few
//! seconds without touching the PDE-scale problems.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::expaction::ExpActionBackend;
use crate::models::{random_matrix_problem, transport_exact};
use crate::operator::{commutator, DenseOperator};
use crate::quadrature::{
    apply_rule_1d, d_family_rules, f_family_rules, kernel_integral, optimal_tau_f,
    quadrature_error_oracle, ErrorKernel, Family, Polynomial,
};
use crate::splitting::{build_d, build_f, compile_from_quadrature, step};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(
    name: &'static str,
    f: impl FnOnce() -> std::result::Result<String, String>,
) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn gate(ok: bool, detail: String) -> std::result::Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, n: usize) -> DenseOperator {
    let e = Array2::from_shape_fn((n, n), |_| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    DenseOperator::new(e).expect("square")
}

fn rand_vector(rng: &mut ChaCha8Rng, n: usize) -> Array1<Complex64> {
    Array1::from_shape_fn(n, |_| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    })
}

fn norm(v: &Array1<Complex64>) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Runs every check; the CLI prints one line per entry.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("kernel-root", || {
            let tau = optimal_tau_f();
            let closed = (3.0 - 3.0f64.sqrt()) / 6.0;
            let integral =
                kernel_integral(Family::F, tau).map_err(|e| e.to_string())?;
            gate(
                (tau - closed).abs() <= 1e-12 && integral.abs() <= 1e-13,
                format!("tau* = {tau:.17}, |I_F(tau*)| = {:.2e}", integral.abs()),
            )
        }),
        check("peano-identity", || {
            let mut worst: f64 = 0.0;
            for family in [Family::F, Family::D] {
                let hi = if family == Family::F { 0.5 } else { 1.0 };
                for k in 0..=8 {
                    let tau = hi * k as f64 / 8.0;
                    let kernel = ErrorKernel::new(family, tau).map_err(|e| e.to_string())?;
                    let (rule, _) = match family {
                        Family::F => f_family_rules(tau),
                        Family::D => d_family_rules(tau),
                    }
                    .map_err(|e| e.to_string())?;
                    for deg in [2usize, 3, 4] {
                        let f = Polynomial::monomial(deg);
                        let predicted = kernel.predicted_error(&f);
                        let direct = quadrature_error_oracle(&rule, &f)
                            .map_err(|e| e.to_string())?;
                        worst = worst.max((predicted - direct).abs());
                    }
                }
            }
            gate(worst <= 1e-13, format!("max |Peano - direct| = {worst:.2e}"))
        }),
        check("rule-exactness", || {
            // both families integrate affine integrands exactly
            let mut worst: f64 = 0.0;
            for tau in [0.0, 0.21, 0.37, 0.5] {
                let (rule, _) = f_family_rules(tau).map_err(|e| e.to_string())?;
                let got = apply_rule_1d(&rule, &|s| 3.0 * s - 1.0, None)
                    .map_err(|e| e.to_string())?;
                worst = worst.max((got - 0.5).abs());
            }
            for tau in [0.0, 0.3, 0.72, 1.0] {
                let (rule, _) = d_family_rules(tau).map_err(|e| e.to_string())?;
                let got = apply_rule_1d(&rule, &|s| 3.0 * s - 1.0, Some(&|_| 3.0))
                    .map_err(|e| e.to_string())?;
                worst = worst.max((got - 0.5).abs());
            }
            gate(worst <= 1e-15, format!("max affine defect = {worst:.2e}"))
        }),
        check("weight-normalization", || {
            let mut worst: f64 = 0.0;
            let sum0 = |r: &crate::quadrature::QuadratureRule1D| {
                r.weights
                    .iter()
                    .zip(&r.derivative_orders)
                    .filter(|(_, &d)| d == 0)
                    .map(|(w, _)| w)
                    .sum::<f64>()
            };
            for k in 0..=10 {
                let (rf, sf) = f_family_rules(0.05 * k as f64).map_err(|e| e.to_string())?;
                let (rd, sd) = d_family_rules(0.1 * k as f64).map_err(|e| e.to_string())?;
                worst = worst.max((sum0(&rf) - 1.0).abs());
                worst = worst.max((sum0(&rd) - 1.0).abs());
                worst = worst.max((sf.weights.iter().sum::<f64>() - 0.5).abs());
                worst = worst.max((sd.weights.iter().sum::<f64>() - 0.5).abs());
            }
            gate(worst <= 1e-14, format!("max weight-sum defect = {worst:.2e}"))
        }),
        check("kernel-shape-d", || {
            // I_D positive with its minimum at the midpoint
            let mut min_tau = f64::NAN;
            let mut min_val = f64::INFINITY;
            for k in 0..=100 {
                let tau = k as f64 / 100.0;
                let v = kernel_integral(Family::D, tau).map_err(|e| e.to_string())?;
                if v <= 0.0 {
                    return Err(format!("I_D({tau}) = {v} not positive"));
                }
                if v < min_val {
                    min_val = v;
                    min_tau = tau;
                }
            }
            gate(
                (min_tau - 0.5).abs() <= 1e-12 && (min_val - 1.0 / 12.0).abs() <= 1e-14,
                format!("argmin = {min_tau}, min = {min_val:.6}"),
            )
        }),
        check("commutator-antisymmetry", || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = rand_matrix(&mut rng, 5);
            let y = rand_matrix(&mut rng, 5);
            let xy = commutator(&x, &y).map_err(|e| e.to_string())?;
            let yx = commutator(&y, &x).map_err(|e| e.to_string())?;
            let defect = xy
                .add(&yx)
                .map_err(|e| e.to_string())?
                .entries()
                .iter()
                .map(|v| v.norm())
                .fold(0.0f64, f64::max);
            gate(defect <= 1e-14, format!("max |[X,Y]+[Y,X]| = {defect:.2e}"))
        }),
        check("expm-semigroup", || {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let h = rand_matrix(&mut rng, 6);
            let v = rand_vector(&mut rng, 6);
            let backend = ExpActionBackend::dense();
            let whole = backend
                .exp_action(&h, Complex64::new(0.7, 0.0), &v)
                .map_err(|e| e.to_string())?;
            let a = backend
                .exp_action(&h, Complex64::new(0.3, 0.0), &v)
                .map_err(|e| e.to_string())?;
            let split = backend
                .exp_action(&h, Complex64::new(0.4, 0.0), &a)
                .map_err(|e| e.to_string())?;
            let rel = norm(&(&whole - &split)) / norm(&whole);
            gate(rel <= 1e-12, format!("semigroup defect = {rel:.2e}"))
        }),
        check("expm-nilpotent", || {
            // strictly upper triangular: the series terminates exactly
            let n = 4;
            let mut e = Array2::zeros((n, n));
            e[(0, 1)] = Complex64::new(2.0, 0.0);
            e[(1, 2)] = Complex64::new(-1.0, 0.5);
            e[(2, 3)] = Complex64::new(0.3, 0.0);
            let op = DenseOperator::new(e).unwrap();
            let backend = ExpActionBackend::dense();
            let v = Array1::from_elem(n, Complex64::new(1.0, 0.0));
            let got = backend
                .exp_action(&op, Complex64::new(1.0, 0.0), &v)
                .map_err(|e| e.to_string())?;
            // exp(N)v with N^4 = 0: v + Nv + N^2 v/2 + N^3 v/6
            let nv = op.apply(&v).unwrap();
            let n2v = op.apply(&nv).unwrap();
            let n3v = op.apply(&n2v).unwrap();
            let want = &v + &nv + &n2v.mapv(|x| x / 2.0) + &n3v.mapv(|x| x / 6.0);
            let defect = norm(&(&got - &want));
            gate(defect <= 1e-13, format!("nilpotent defect = {defect:.2e}"))
        }),
        check("diagonal-fast-path", || {
            let d: Vec<Complex64> = (0..8)
                .map(|i| Complex64::new(-0.3 * i as f64, 0.4 * i as f64))
                .collect();
            let op = DenseOperator::from_diagonal(&d).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let v = rand_vector(&mut rng, 8);
            let backend = ExpActionBackend::auto();
            let got = backend
                .exp_action(&op, Complex64::new(0.9, 0.0), &v)
                .map_err(|e| e.to_string())?;
            let want = Array1::from_shape_fn(8, |i| (d[i] * 0.9).exp() * v[i]);
            let defect = norm(&(&got - &want)) / norm(&want);
            gate(defect <= 1e-14, format!("diagonal defect = {defect:.2e}"))
        }),
        check("krylov-vs-dense", || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let g = rand_matrix(&mut rng, 40);
            let gh = DenseOperator::new(Array2::from_shape_fn((40, 40), |(i, j)| {
                g.entries()[(j, i)].conj()
            }))
            .unwrap();
            let skew = g.sub(&gh).map_err(|e| e.to_string())?.scale(Complex64::new(0.5, 0.0));
            let v = rand_vector(&mut rng, 40);
            let dense = ExpActionBackend::dense()
                .exp_action(&skew, Complex64::new(0.8, 0.0), &v)
                .map_err(|e| e.to_string())?;
            let krylov = ExpActionBackend::krylov(40, 1e-12)
                .exp_action(&skew, Complex64::new(0.8, 0.0), &v)
                .map_err(|e| e.to_string())?;
            let rel = norm(&(&dense - &krylov)) / norm(&dense);
            gate(rel <= 1e-10, format!("krylov-dense gap = {rel:.2e}"))
        }),
        check("self-composition", || {
            let problem = random_matrix_problem(6, 11, 1.0).map_err(|e| e.to_string())?;
            let backend = ExpActionBackend::dense();
            let h = 0.2;
            let quarter = build_f(0.25).map_err(|e| e.to_string())?;
            let strang = build_f(0.5).map_err(|e| e.to_string())?;
            let one = step(&quarter, &problem, &backend, 0.1, h, &problem.u0)
                .map_err(|e| e.to_string())?;
            let half = step(&strang, &problem, &backend, 0.1, 0.5 * h, &problem.u0)
                .map_err(|e| e.to_string())?;
            let two = step(&strang, &problem, &backend, 0.1 + 0.5 * h, 0.5 * h, &half)
                .map_err(|e| e.to_string())?;
            let rel = norm(&(&one - &two)) / norm(&one);
            gate(rel <= 1e-12, format!("F(h,1/4) vs Strang^2 gap = {rel:.2e}"))
        }),
        check("consistency-sums", || {
            for k in 0..=10 {
                let tf = 0.05 * k as f64;
                let s = build_f(tf).map_err(|e| e.to_string())?;
                if s.a_coeff_sum() != 1.0 || s.b_weight_sum() != 1.0 {
                    return Err(format!(
                        "F({tf}): sums {} / {}",
                        s.a_coeff_sum(),
                        s.b_weight_sum()
                    ));
                }
                let td = 0.1 * k as f64;
                let s = build_d(td).map_err(|e| e.to_string())?;
                if s.a_coeff_sum() != 1.0 || s.b_weight_sum() != 1.0 {
                    return Err(format!(
                        "D({td}): sums {} / {}",
                        s.a_coeff_sum(),
                        s.b_weight_sum()
                    ));
                }
            }
            Ok("exact unit sums for both families on the tau grid".into())
        }),
        check("compile-roundtrip", || {
            for tau in [0.0, 0.21, 0.5] {
                let (rule, simplex) = f_family_rules(tau).map_err(|e| e.to_string())?;
                let compiled =
                    compile_from_quadrature(&rule, &simplex).map_err(|e| e.to_string())?;
                let built = build_f(tau).map_err(|e| e.to_string())?;
                if compiled.stages() != built.stages() {
                    return Err(format!("F({tau}) stages differ after compilation"));
                }
            }
            for tau in [0.0, 0.3, 0.8, 1.0] {
                let (rule, simplex) = d_family_rules(tau).map_err(|e| e.to_string())?;
                let compiled =
                    compile_from_quadrature(&rule, &simplex).map_err(|e| e.to_string())?;
                let built = build_d(tau).map_err(|e| e.to_string())?;
                if compiled.stages() != built.stages() {
                    return Err(format!("D({tau}) stages differ after compilation"));
                }
            }
            Ok("quadrature rules compile back to their schemes".into())
        }),
        check("transport-pde-residual", || {
            let d = 1e-4;
            let mut worst: f64 = 0.0;
            for (x, t) in [(0.7, 0.9), (-0.4, 0.3)] {
                let u = |x: f64, t: f64| transport_exact(x, t, 1e-12).map_err(|e| e.to_string());
                let ut = (u(x, t + d)? - u(x, t - d)?) / (2.0 * d);
                let ux = (u(x + d, t)? - u(x - d, t)?) / (2.0 * d);
                let r = 2.0 * x - t;
                let f = -(-r * r).exp();
                worst = worst.max((ut + ux - f * u(x, t)?).abs());
            }
            gate(worst <= 1e-5, format!("max PDE residual = {worst:.2e}"))
        }),
        check("time-reversibility", || {
            let problem = random_matrix_problem(5, 12, 1.0).map_err(|e| e.to_string())?;
            let backend = ExpActionBackend::dense();
            let h = 0.15;
            let fwd = build_f(0.21).map_err(|e| e.to_string())?;
            let u1 = step(&fwd, &problem, &backend, 0.3, h, &problem.u0)
                .map_err(|e| e.to_string())?;
            // mirrored scheme on the reversed problem undoes the step
            let rev = fwd.time_mirrored();
            let neg_a = problem.a.unpinned().scale(Complex64::new(-1.0, 0.0));
            let b = problem.b.clone();
            let neg_b = crate::operator::TimeDependentOperator::with_finite_difference(
                move |t| b.eval(t).scale(Complex64::new(-1.0, 0.0)),
                1e-5,
            )
            .map_err(|e| e.to_string())?;
            let backwards = crate::operator::EvolutionProblem::new(
                neg_a,
                neg_b,
                u1.clone(),
                1.0,
            )
            .map_err(|e| e.to_string())?;
            let back = step(&rev, &backwards, &backend, 0.3, h, &u1)
                .map_err(|e| e.to_string())?;
            let rel = norm(&(&back - &problem.u0)) / norm(&problem.u0);
            gate(rel <= 1e-10, format!("round-trip defect = {rel:.2e}"))
        }),
    ]
}
