//! Collocation sets: Latin-hypercube interior points, anchor points on the
//! initial time slice, and a gradient-weighted importance group.
//!
//! All randomness comes from ChaCha8 streams keyed by `(seed, epoch)`, so a
//! set is reproducible bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::net::{InputScaler, NetworkParams, INPUT_DIM};
use crate::problems::GdeeProblem;

/// Name of the generator, recorded in run logs.
pub const RNG_ALGORITHM: &str = "ChaCha8";
pub const DEFAULT_POOL_FACTOR: usize = 10;
const SAMPLING_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub type Point = [f64; INPUT_DIM];

/// Sampling stream for `(seed, epoch)`; independent of the stream used for
/// network initialization.
pub fn sampling_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SAMPLING_SALT);
    rng.set_stream(epoch + 1);
    rng
}

/// `n` points with exactly one point per stratum in every dimension.
pub fn lhs_sample<R: Rng>(n: usize, bounds: &[(f64, f64)], rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; bounds.len()]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        perm.shuffle(rng);
        let width = (hi - lo) / n as f64;
        for (i, p) in pts.iter_mut().enumerate() {
            let u: f64 = rng.random();
            p[d] = (lo + width * (perm[i] as f64 + u)).min(hi);
        }
    }
    pts
}

/// `(x, θ, t)` box of a problem.
pub fn problem_box(problem: &GdeeProblem) -> [(f64, f64); INPUT_DIM] {
    [
        (problem.x.lo, problem.x.hi),
        (problem.theta.lo, problem.theta.hi),
        (problem.time.lo, problem.time.hi),
    ]
}

/// `√((∂N/∂t)² + (∂N/∂x)²)` in raw coordinates.
pub fn gradient_weight(net: &NetworkParams, scaler: &InputScaler, point: Point) -> f64 {
    let (_, g) = net.eval_raw_with_gradient(scaler, point);
    g[0].hypot(g[2])
}

/// Systematic resampling of `n_out` points from a uniform pool of
/// `pool_factor · n_out` candidates with probability proportional to
/// `weight`. Falls back to a uniform choice when the total weight is below
/// `1e-12` per candidate.
pub fn importance_resample_with<R: Rng>(
    weight: impl Fn(Point) -> f64,
    bounds: &[(f64, f64); INPUT_DIM],
    n_out: usize,
    pool_factor: usize,
    rng: &mut R,
) -> Vec<Point> {
    if n_out == 0 {
        return Vec::new();
    }
    let pool_size = n_out * pool_factor.max(2);
    let pool: Vec<Point> = (0..pool_size)
        .map(|_| std::array::from_fn(|d| bounds[d].0 + (bounds[d].1 - bounds[d].0) * rng.random::<f64>()))
        .collect();
    let weights: Vec<f64> = pool
        .iter()
        .map(|&p| {
            let w = weight(p);
            if w.is_finite() && w > 0.0 {
                w
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total >= 1e-12 * pool_size as f64) {
        return uniform_choice(&pool, n_out, rng);
    }
    let step = total / n_out as f64;
    let mut target = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n_out);
    let mut cum = 0.0;
    let mut idx = 0;
    while out.len() < n_out {
        while idx + 1 < pool_size && cum + weights[idx] <= target {
            cum += weights[idx];
            idx += 1;
        }
        out.push(pool[idx]);
        target += step;
    }
    out
}

fn uniform_choice<R: Rng>(pool: &[Point], n_out: usize, rng: &mut R) -> Vec<Point> {
    (0..n_out).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Importance group drawn with the network's `(t, x)` gradient magnitude as
/// the weight field.
pub fn importance_resample<R: Rng>(
    net: &NetworkParams,
    scaler: &InputScaler,
    bounds: &[(f64, f64); INPUT_DIM],
    n_out: usize,
    pool_factor: usize,
    rng: &mut R,
) -> Vec<Point> {
    importance_resample_with(|p| gradient_weight(net, scaler, p), bounds, n_out, pool_factor, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    /// LHS points first, then the `n_importance` importance points.
    pub interior: Vec<Point>,
    pub n_importance: usize,
    /// Anchor points, all with `t = t_min`.
    pub anchor: Vec<Point>,
    pub fraction: f64,
    pub epoch: u64,
    pub seed: u64,
}

impl CollocationSet {
    pub fn lhs_points(&self) -> &[Point] {
        &self.interior[..self.interior.len() - self.n_importance]
    }

    pub fn importance_points(&self) -> &[Point] {
        &self.interior[self.interior.len() - self.n_importance..]
    }
}

/// Interior `LHS((1−ρ)n) ∪ importance(ρn)` plus `n_anchor` LHS anchor
/// points on `t = t_min`. At epoch 0 the importance group is drawn uniformly.
#[allow(clippy::too_many_arguments)]
pub fn build_collocation(
    problem: &GdeeProblem,
    net: &NetworkParams,
    scaler: &InputScaler,
    n_interior: usize,
    n_anchor: usize,
    fraction: f64,
    pool_factor: usize,
    seed: u64,
    epoch: u64,
) -> CollocationSet {
    let bounds = problem_box(problem);
    let mut rng = sampling_rng(seed, epoch);
    let n_importance = ((fraction * n_interior as f64).round() as usize).min(n_interior);
    let n_lhs = n_interior - n_importance;
    let mut interior: Vec<Point> = lhs_sample(n_lhs, &bounds, &mut rng)
        .into_iter()
        .map(|p| [p[0], p[1], p[2]])
        .collect();
    let important = if epoch == 0 {
        importance_resample_with(|_| 0.0, &bounds, n_importance, pool_factor, &mut rng)
    } else {
        importance_resample(net, scaler, &bounds, n_importance, pool_factor, &mut rng)
    };
    interior.extend(important);
    let t0 = problem.time.lo;
    let anchor = lhs_sample(n_anchor, &bounds[..2], &mut rng)
        .into_iter()
        .map(|p| [p[0], p[1], t0])
        .collect();
    CollocationSet {
        interior,
        n_importance,
        anchor,
        fraction,
        epoch,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{default_dims, Activation};
    use crate::problems::CaseId;

    fn strata_flat(points: &[Vec<f64>], bounds: &[(f64, f64)]) -> bool {
        let n = points.len();
        bounds.iter().enumerate().all(|(d, &(lo, hi))| {
            let mut seen = vec![false; n];
            for p in points {
                let k = (((p[d] - lo) / (hi - lo) * n as f64).floor() as usize).min(n - 1);
                if seen[k] {
                    return false;
                }
                seen[k] = true;
            }
            true
        })
    }

    #[test]
    fn lhs_is_stratified() {
        let mut rng = sampling_rng(7, 0);
        let b = [(0.0, 1.0), (0.0, 1.0)];
        assert!(strata_flat(&lhs_sample(4, &b, &mut rng), &b));
        let b3 = [(-0.2, 0.3), (0.7, 2.4), (0.9, 1.1)];
        for n in [1, 10, 997] {
            assert!(strata_flat(&lhs_sample(n, &b3, &mut rng), &b3));
        }
    }

    #[test]
    fn lhs_single_point_in_box() {
        let mut rng = sampling_rng(1, 0);
        let p = &lhs_sample(1, &[(2.0, 3.0)], &mut rng)[0];
        assert!(p[0] >= 2.0 && p[0] <= 3.0);
    }

    #[test]
    fn same_seed_same_points() {
        let b = [(0.0, 1.0); 3];
        let a = lhs_sample(50, &b, &mut sampling_rng(3, 5));
        let c = lhs_sample(50, &b, &mut sampling_rng(3, 5));
        assert_eq!(a, c);
        assert_ne!(a, lhs_sample(50, &b, &mut sampling_rng(3, 6)));
    }

    #[test]
    fn zero_and_linear_weights() {
        let scaler = InputScaler::new([-2.0, 0.0, 0.0], [2.0, 1.0, 1.0]).unwrap();
        let zero = NetworkParams::zeros(&default_dims(), Activation::Tanh).unwrap();
        assert_eq!(gradient_weight(&zero, &scaler, [0.3, 0.5, 0.5]), 0.0);
        // f = x_raw via a [3, 1] linear net on scaled input x_s = x/2
        let mut lin = NetworkParams::zeros(&[3, 1], Activation::Tanh).unwrap();
        lin.layers_mut()[0].weights[0] = 2.0;
        for p in [[0.3, 0.5, 0.5], [-1.9, 0.1, 0.9]] {
            assert!((gradient_weight(&lin, &scaler, p) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_weight_matches_finite_differences() {
        let problem = GdeeProblem::with_defaults(CaseId::Sdof);
        let b = problem_box(&problem);
        let scaler = InputScaler::new(b.map(|v| v.0), b.map(|v| v.1)).unwrap();
        let net = NetworkParams::init_glorot(&default_dims(), Activation::Swish, 11).unwrap();
        let p = [0.01, 1.3, 1.02];
        let hx = 1e-6 * (b[0].1 - b[0].0);
        let ht = 1e-6 * (b[2].1 - b[2].0);
        let fx = (net.eval_raw(&scaler, [p[0] + hx, p[1], p[2]]) - net.eval_raw(&scaler, [p[0] - hx, p[1], p[2]])) / (2.0 * hx);
        let ft = (net.eval_raw(&scaler, [p[0], p[1], p[2] + ht]) - net.eval_raw(&scaler, [p[0], p[1], p[2] - ht])) / (2.0 * ht);
        let w = gradient_weight(&net, &scaler, p);
        assert!((w - fx.hypot(ft)).abs() < 1e-6 * w);
    }

    #[test]
    fn empty_request() {
        let b = [(0.0, 1.0); 3];
        assert!(importance_resample_with(|_| 1.0, &b, 0, 10, &mut sampling_rng(1, 0)).is_empty());
    }

    #[test]
    fn piecewise_weights_give_three_to_one() {
        let b = [(0.0, 1.0); 3];
        let pts = importance_resample_with(|p| if p[0] < 0.5 { 3.0 } else { 1.0 }, &b, 10_000, 10, &mut sampling_rng(5, 1));
        let left = pts.iter().filter(|p| p[0] < 0.5).count() as f64;
        let ratio = left / (pts.len() as f64 - left);
        assert!((ratio / 3.0 - 1.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn piecewise_weights_chi_square() {
        // four quarters with weights 1:2:3:4, 10⁴ draws, 3 dof: 1% critical value 11.345
        let b = [(0.0, 1.0); 3];
        let w = |p: Point| 1.0 + (p[0] * 4.0).floor().min(3.0);
        let pts = importance_resample_with(w, &b, 10_000, 10, &mut sampling_rng(9, 2));
        let mut counts = [0.0; 4];
        for p in &pts {
            counts[((p[0] * 4.0).floor() as usize).min(3)] += 1.0;
        }
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let e = 10_000.0 * (k as f64 + 1.0) / 10.0;
                (c - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < 11.345, "χ² = {chi2}, counts {counts:?}");
    }

    #[test]
    fn constant_field_falls_back_to_uniform() {
        let b = [(0.0, 1.0); 3];
        let pts = importance_resample_with(|_| 0.0, &b, 4000, 10, &mut sampling_rng(2, 3));
        let left = pts.iter().filter(|p| p[0] < 0.5).count() as f64 / 4000.0;
        assert!((left - 0.5).abs() < 0.04);
    }

    #[test]
    fn collocation_counts_and_anchor_time() {
        let problem = GdeeProblem::with_defaults(CaseId::Sdof);
        let b = problem_box(&problem);
        let scaler = InputScaler::new(b.map(|v| v.0), b.map(|v| v.1)).unwrap();
        let net = NetworkParams::init_glorot(&default_dims(), Activation::Tanh, 1).unwrap();
        let set = build_collocation(&problem, &net, &scaler, 2500, 500, 0.2, 10, 1, 100);
        assert_eq!(set.n_importance, 500);
        assert_eq!(set.lhs_points().len(), 2000);
        assert_eq!(set.anchor.len(), 500);
        assert!(set.anchor.iter().all(|p| p[2] == problem.time.lo));
        for p in &set.interior {
            for d in 0..3 {
                assert!(p[d] >= b[d].0 && p[d] <= b[d].1);
            }
        }
        let pure = build_collocation(&problem, &net, &scaler, 2500, 500, 0.0, 10, 1, 0);
        assert_eq!(pure.n_importance, 0);
        let again = build_collocation(&problem, &net, &scaler, 2500, 500, 0.2, 10, 1, 100);
        assert_eq!(set, again);
    }
}
