//! Marginalization over the parameter axis and error metrics against the
//! analytical densities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::net::{InputScaler, NetworkParams};
use crate::problems::GdeeProblem;

/// Default quadrature order for evaluating trained networks.
pub const DEFAULT_ORDER: usize = 32;
/// Order used for oracle-grade references.
pub const REFERENCE_ORDER: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub order: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Gauss–Legendre rule of order `n` on `[a, b]`. Nodes are roots of `P_n`
/// found by Newton iteration from Chebyshev-like initial guesses.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> QuadratureRule {
    assert!(n >= 1, "quadrature order must be at least 1");
    assert!(a < b, "quadrature interval must satisfy a < b");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // descending x in [-1, 1] ↦ ascending nodes
        nodes[i] = mid - half * x;
        nodes[n - 1 - i] = mid + half * x;
        weights[i] = half * w;
        weights[n - 1 - i] = half * w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = mid;
    }
    QuadratureRule { order: n, nodes, weights }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// `Σ_k w_k f(x, θ_k, t)` for each `x`.
pub fn marginalize_with(f: impl Fn(f64, f64, f64) -> f64, t: f64, x_grid: &[f64], rule: &QuadratureRule) -> Vec<f64> {
    x_grid
        .iter()
        .map(|&x| rule.integrate(|th| f(x, th, t)))
        .collect()
}

/// Network marginal `p_X(x, t) ≈ Σ_k w_k N(x, θ_k, t)`.
pub fn marginalize(net: &NetworkParams, scaler: &InputScaler, t: f64, x_grid: &[f64], rule: &QuadratureRule) -> Vec<f64> {
    marginalize_with(|x, th, t| net.eval_raw(scaler, [x, th, t]), t, x_grid, rule)
}

/// Quadrature rule on the problem's parameter window.
pub fn theta_rule(problem: &GdeeProblem, order: usize) -> QuadratureRule {
    gauss_legendre(order, problem.theta.lo, problem.theta.hi)
}

/// Row-major dense matrix; rows index time, columns index `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "grid shape mismatch");
        Grid { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged grid");
        Grid::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMetrics {
    /// `‖E‖_F/‖R‖_F`, or `‖E‖_F` when the reference is zero.
    pub rel_l2: f64,
    pub max_abs: f64,
    /// Largest singular value of the error matrix.
    pub spectral_norm: f64,
    /// Set when `rel_l2` holds the absolute norm because `‖R‖_F = 0`.
    pub zero_reference: bool,
}

/// Metrics of `E = pred − reference`.
pub fn error_metrics(pred: &Grid, reference: &Grid) -> ErrorMetrics {
    assert_eq!((pred.rows, pred.cols), (reference.rows, reference.cols), "shape mismatch");
    let err = Grid::new(
        pred.rows,
        pred.cols,
        pred.data.iter().zip(&reference.data).map(|(p, r)| p - r).collect(),
    );
    let ef = err.frobenius();
    let rf = reference.frobenius();
    let zero_reference = rf == 0.0;
    let spectral = spectral_norm(&err);
    debug_assert!(spectral <= ef * (1.0 + 1e-9) + 1e-300);
    debug_assert!(spectral * (1.0 + 1e-9) >= ef / (err.rows.min(err.cols).max(1) as f64).sqrt());
    ErrorMetrics {
        rel_l2: if zero_reference { ef } else { ef / rf },
        max_abs: err.data.iter().fold(0.0, |m, v| m.max(v.abs())),
        spectral_norm: spectral,
        zero_reference,
    }
}

/// Largest singular value by power iteration on `EᵀE` (relative tolerance
/// 1e-10, at most 10⁴ iterations) from a fixed pseudo-random start.
pub fn spectral_norm(e: &Grid) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_5eed);
    let v0: Vec<f64> = (0..e.cols).map(|_| rng.random::<f64>() - 0.5).collect();
    spectral_norm_from(e, v0, 1e-10, 10_000)
}

pub fn spectral_norm_from(e: &Grid, start: Vec<f64>, tol: f64, max_iter: usize) -> f64 {
    if e.data.iter().all(|&v| v == 0.0) || e.cols == 0 {
        return 0.0;
    }
    let mut v = start;
    let mut n = norm(&v);
    if n == 0.0 {
        v = vec![1.0; e.cols];
        n = norm(&v);
    }
    v.iter_mut().for_each(|x| *x /= n);
    let mut sigma = 0.0;
    let mut ev = vec![0.0; e.rows];
    for _ in 0..max_iter {
        for (r, out) in ev.iter_mut().enumerate() {
            let row = &e.data[r * e.cols..(r + 1) * e.cols];
            *out = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let next_sigma = norm(&ev);
        let mut w = vec![0.0; e.cols];
        for (r, &s) in ev.iter().enumerate() {
            let row = &e.data[r * e.cols..(r + 1) * e.cols];
            for (wc, a) in w.iter_mut().zip(row) {
                *wc += a * s;
            }
        }
        let wn = norm(&w);
        if wn == 0.0 {
            return next_sigma;
        }
        w.iter_mut().for_each(|x| *x /= wn);
        v = w;
        let converged = (next_sigma - sigma).abs() <= tol * next_sigma;
        sigma = next_sigma;
        if converged {
            break;
        }
    }
    sigma
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Predicted and reference marginals on an `x`-grid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalEval {
    pub t: f64,
    pub x: Vec<f64>,
    pub p_pred: Vec<f64>,
    pub p_exact: Vec<f64>,
    pub p_exact_smoothed: Vec<f64>,
    /// Against the smoothed reference.
    pub metrics: ErrorMetrics,
}

impl MarginalEval {
    pub fn compute(
        net: &NetworkParams,
        scaler: &InputScaler,
        problem: &GdeeProblem,
        t: f64,
        x_grid: &[f64],
        rule: &QuadratureRule,
    ) -> Self {
        let p_pred = marginalize(net, scaler, t, x_grid, rule);
        let branches = problem.monotone_branches(t);
        let p_exact = x_grid.iter().map(|&x| problem.exact_marginal_on(&branches, x, t).value).collect();
        let p_exact_smoothed: Vec<f64> = x_grid.iter().map(|&x| problem.smoothed_marginal(x, t)).collect();
        let metrics = error_metrics(
            &Grid::new(1, x_grid.len(), p_pred.clone()),
            &Grid::new(1, x_grid.len(), p_exact_smoothed.clone()),
        );
        MarginalEval {
            t,
            x: x_grid.to_vec(),
            p_pred,
            p_exact,
            p_exact_smoothed,
            metrics,
        }
    }

    /// Trapezoid `∫ p_pred dx` over the grid.
    pub fn predicted_mass(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.p_pred.windows(2))
            .map(|(x, p)| 0.5 * (x[1] - x[0]) * (p[0] + p[1]))
            .sum()
    }
}
