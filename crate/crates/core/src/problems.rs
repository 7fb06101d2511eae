//! Benchmark density-evolution problems with closed-form characteristic
//! responses, drifts, and exact marginal densities.
//!
//! Each case tracks one scalar response `X(θ, t)` driven by one uniformly
//! distributed parameter `θ ∈ [θ₁, θ₂]`:
//!
//! * `sdof`: free vibration `ẍ + ω²x = 0`, `θ = ω`.
//! * `beam_free`: cantilever tip deflection in the first mode, `θ = α`
//!   (square root of flexural rigidity over mass per length).
//! * `beam_forced`: cantilever tip under first-mode harmonic forcing with
//!   uncertain phase, `θ = ψ`.
//!
//! The joint density obeys the transport equation `∂p/∂t + Ẋ ∂p/∂x = 0`.
//! Its point-mass initial condition is replaced by a Gaussian of bandwidth
//! `h`; because `Ẋ` does not depend on `x` the smoothed profile
//! `δ_h(x − X(θ,t)) p_θ(θ)` is itself an exact solution.
//!
//! The tip factor `φ₁(l)` enters the free-beam marginal denominator together
//! with `μ₁²` (`√2 μ₁² |φ₁(l)| ≈ 2.980` for `l = 1`); dropping `μ₁²` gives
//! `0.8475` and a marginal that no longer integrates to one.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::marginal::gauss_legendre;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("unknown case `{0}` (expected sdof, beam_free or beam_forced)")]
    UnknownCase(String),
    #[error("invalid interval for {name}: [{lo}, {hi}]")]
    InvalidInterval { name: &'static str, lo: f64, hi: f64 },
    #[error("invalid problem constant: {0}")]
    InvalidConstant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaseId {
    Sdof,
    BeamFree,
    BeamForced,
}

impl CaseId {
    pub const ALL: [CaseId; 3] = [CaseId::Sdof, CaseId::BeamFree, CaseId::BeamForced];

    pub fn name(self) -> &'static str {
        match self {
            CaseId::Sdof => "sdof",
            CaseId::BeamFree => "beam_free",
            CaseId::BeamForced => "beam_forced",
        }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CaseId {
    type Err = ProblemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sdof" => Ok(CaseId::Sdof),
            "beam_free" => Ok(CaseId::BeamFree),
            "beam_forced" => Ok(CaseId::BeamForced),
            other => Err(ProblemError::UnknownCase(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(name: &'static str, lo: f64, hi: f64) -> Result<Self, ProblemError> {
        if lo.is_finite() && hi.is_finite() && lo < hi {
            Ok(Interval { lo, hi })
        } else {
            Err(ProblemError::InvalidInterval { name, lo, hi })
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// `n ≥ 2` equally spaced points including both ends.
    pub fn linspace(&self, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (self.lo + self.hi)];
        }
        (0..n)
            .map(|i| if i + 1 == n { self.hi } else { self.lo + self.width() * i as f64 / (n - 1) as f64 })
            .collect()
    }
}

/// Smallest positive root of `1 + cos μ cosh μ = 0` (cantilever, unit length),
/// by bisection on `[1.8, 1.9]`.
pub fn cantilever_mu1() -> f64 {
    let f = |m: f64| 1.0 + m.cos() * m.cosh();
    let (mut a, mut b) = (1.8_f64, 1.9_f64);
    let mut fa = f(a);
    debug_assert!(fa * f(b) < 0.0);
    while b - a > 1e-13 {
        let mid = 0.5 * (a + b);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if fa * fm < 0.0 {
            b = mid;
        } else {
            a = mid;
            fa = fm;
        }
    }
    0.5 * (a + b)
}

/// First cantilever mode shape
/// `φ(x) = (cos μx − cosh μx) − (sin μl + sinh μl)/(cos μl + cosh μl)·(sin μx − sinh μx)`.
pub fn mode_shape(mu: f64, x: f64, l: f64) -> f64 {
    let ml = mu * l;
    let ratio = (ml.sin() + ml.sinh()) / (ml.cos() + ml.cosh());
    let mx = mu * x;
    (mx.cos() - mx.cosh()) - ratio * (mx.sin() - mx.sinh())
}

/// First-mode data of a cantilever of length `l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamModal {
    pub length: f64,
    /// μ₁ with `μ₁ l` the first root of the frequency equation.
    pub mu1: f64,
    /// φ₁(l), the tip value of the first mode shape.
    pub tip: f64,
    pub a1: f64,
    pub b1: f64,
}

impl BeamModal {
    pub fn new(length: f64) -> Result<Self, ProblemError> {
        if !(length.is_finite() && length > 0.0) {
            return Err(ProblemError::InvalidConstant(format!("beam length {length}")));
        }
        let mu1 = cantilever_mu1() / length;
        Ok(BeamModal {
            length,
            mu1,
            tip: mode_shape(mu1, length, length),
            a1: 1.0,
            b1: 1.0,
        })
    }

    /// Natural frequency `ω₁ = α μ₁²`.
    pub fn omega(&self, alpha: f64) -> f64 {
        alpha * self.mu1 * self.mu1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CaseParams {
    /// `θ = ω`.
    Sdof { x0: f64, v0: f64 },
    /// `θ = α`.
    BeamFree { modal: BeamModal },
    /// `θ = ψ`, first mode both for the initial shape and the forcing.
    BeamForced {
        modal: BeamModal,
        alpha: f64,
        forcing_freq: f64,
        q0: f64,
    },
}

impl CaseParams {
    pub fn id(&self) -> CaseId {
        match self {
            CaseParams::Sdof { .. } => CaseId::Sdof,
            CaseParams::BeamFree { .. } => CaseId::BeamFree,
            CaseParams::BeamForced { .. } => CaseId::BeamForced,
        }
    }

    pub fn default_for(id: CaseId) -> Self {
        let modal = BeamModal::new(1.0).expect("unit beam");
        match id {
            CaseId::Sdof => CaseParams::Sdof { x0: 0.1, v0: 0.0 },
            CaseId::BeamFree => CaseParams::BeamFree { modal },
            CaseId::BeamForced => CaseParams::BeamForced {
                modal,
                alpha: 1.0,
                forcing_freq: 2.0,
                q0: 1.0,
            },
        }
    }
}

/// `(θ range, time window)` defaults per case.
pub fn default_windows(_id: CaseId) -> ((f64, f64), (f64, f64)) {
    ((FRAC_PI_4, 3.0 * FRAC_PI_4), (0.9, 1.1))
}

pub const DEFAULT_X_PAD: f64 = 0.1;
pub const DEFAULT_H_FRACTION: f64 = 0.02;
const X_SCAN: usize = 512;
const BRANCH_GRID: usize = 2048;
const SINGULAR_SLOPE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GdeeProblem {
    pub case: CaseParams,
    pub theta: Interval,
    pub time: Interval,
    pub x: Interval,
    /// Mollifier bandwidth in response units.
    pub h: f64,
}

/// One root `θ_κ` of `X(θ, t) − x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaRoot {
    pub theta: f64,
    /// `|∂X/∂θ|` at the root.
    pub slope: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeltaRoots {
    pub roots: Vec<DeltaRoot>,
    /// Set when some root has `|∂X/∂θ| < 1e-12`.
    pub singular: bool,
}

/// Exact marginal density at a point; `+∞` when a root is degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactDensity {
    pub value: f64,
    pub singular: bool,
}

impl GdeeProblem {
    /// Builds a problem whose `x`-interval is the scanned image of the
    /// `(θ, t)` box padded by `x_pad` of its width on each side, and whose
    /// bandwidth is `h_fraction` of the padded width.
    pub fn new(
        case: CaseParams,
        theta: (f64, f64),
        time: (f64, f64),
        x_pad: f64,
        h_fraction: f64,
    ) -> Result<Self, ProblemError> {
        let theta = Interval::new("theta", theta.0, theta.1)?;
        let time = Interval::new("t", time.0, time.1)?;
        if !(x_pad.is_finite() && x_pad >= 0.0) {
            return Err(ProblemError::InvalidConstant(format!("x_pad {x_pad}")));
        }
        if !(h_fraction.is_finite() && h_fraction > 0.0) {
            return Err(ProblemError::InvalidConstant(format!("h fraction {h_fraction}")));
        }
        validate_case(&case)?;
        let mut problem = GdeeProblem {
            case,
            theta,
            time,
            x: Interval { lo: 0.0, hi: 1.0 },
            h: 1.0,
        };
        let (lo, hi) = problem.scan_response_range();
        let pad = x_pad * (hi - lo);
        problem.x = Interval::new("x", lo - pad, hi + pad)?;
        problem.h = h_fraction * problem.x.width();
        Ok(problem)
    }

    pub fn with_defaults(id: CaseId) -> Self {
        let (theta, time) = default_windows(id);
        Self::new(CaseParams::default_for(id), theta, time, DEFAULT_X_PAD, DEFAULT_H_FRACTION).expect("default problem is valid")
    }

    pub fn id(&self) -> CaseId {
        self.case.id()
    }

    fn scan_response_range(&self) -> (f64, f64) {
        let thetas = self.theta.linspace(X_SCAN);
        let times = self.time.linspace(X_SCAN);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &th in &thetas {
            for &t in &times {
                let x = self.response(th, t);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        (lo, hi)
    }

    /// Characteristic response `X(θ, t)`.
    pub fn response(&self, theta: f64, t: f64) -> f64 {
        match self.case {
            CaseParams::Sdof { x0, v0 } => {
                let wt = theta * t;
                v0 / theta * wt.sin() + x0 * wt.cos()
            }
            CaseParams::BeamFree { modal } => {
                let wt = modal.omega(theta) * t;
                modal.tip * (modal.a1 * wt.cos() + modal.b1 * wt.sin())
            }
            CaseParams::BeamForced {
                modal,
                alpha,
                forcing_freq,
                q0,
            } => {
                let w = modal.omega(alpha);
                let wt = w * t;
                let ft = forcing_freq * t;
                let k = q0 / (forcing_freq * forcing_freq - w * w);
                let forced = k * ((forcing_freq / w * wt.sin() - ft.sin()) * theta.cos() + (wt.cos() - ft.cos()) * theta.sin());
                modal.tip * (wt.sin() + wt.cos() + forced)
            }
        }
    }

    /// `Ẋ(θ, t) = ∂X/∂t`.
    pub fn drift(&self, theta: f64, t: f64) -> f64 {
        match self.case {
            CaseParams::Sdof { x0, v0 } => {
                let wt = theta * t;
                v0 * wt.cos() - x0 * theta * wt.sin()
            }
            CaseParams::BeamFree { modal } => {
                let w = modal.omega(theta);
                let wt = w * t;
                modal.tip * w * (-modal.a1 * wt.sin() + modal.b1 * wt.cos())
            }
            CaseParams::BeamForced {
                modal,
                alpha,
                forcing_freq,
                q0,
            } => {
                let w = modal.omega(alpha);
                let wt = w * t;
                let ft = forcing_freq * t;
                let k = q0 / (forcing_freq * forcing_freq - w * w);
                let forced = k
                    * ((forcing_freq * wt.cos() - forcing_freq * ft.cos()) * theta.cos()
                        + (-w * wt.sin() + forcing_freq * ft.sin()) * theta.sin());
                modal.tip * (w * (wt.cos() - wt.sin()) + forced)
            }
        }
    }

    /// `∂X/∂θ`.
    pub fn response_theta_derivative(&self, theta: f64, t: f64) -> f64 {
        match self.case {
            CaseParams::Sdof { x0, v0 } => {
                let wt = theta * t;
                -v0 / (theta * theta) * wt.sin() + v0 * t / theta * wt.cos() - x0 * t * wt.sin()
            }
            CaseParams::BeamFree { modal } => {
                let m2 = modal.mu1 * modal.mu1;
                let wt = modal.omega(theta) * t;
                modal.tip * m2 * t * (-modal.a1 * wt.sin() + modal.b1 * wt.cos())
            }
            CaseParams::BeamForced { .. } => {
                let (c1, c2, _) = self.forced_coefficients(0.0, t).expect("forced case");
                c1 * theta.cos() - c2 * theta.sin()
            }
        }
    }

    /// `p_θ(θ)`: uniform on the parameter window, zero outside.
    pub fn p_theta(&self, theta: f64) -> f64 {
        if self.theta.contains(theta) {
            1.0 / self.theta.width()
        } else {
            0.0
        }
    }

    /// Gaussian kernel `δ_h(d)`.
    pub fn mollifier(&self, d: f64) -> f64 {
        let z = d / self.h;
        (-0.5 * z * z).exp() / (self.h * (2.0 * PI).sqrt())
    }

    /// Smoothed joint density `δ_h(x − X(θ,t)) p_θ(θ)`.
    pub fn mollified_joint(&self, x: f64, theta: f64, t: f64) -> f64 {
        self.mollifier(x - self.response(theta, t)) * self.p_theta(theta)
    }

    /// `(p̃, ∂p̃/∂x, ∂p̃/∂t)` from the Gaussian composition.
    pub fn mollified_joint_partials(&self, x: f64, theta: f64, t: f64) -> (f64, f64, f64) {
        let d = x - self.response(theta, t);
        let p = self.mollifier(d) * self.p_theta(theta);
        let dp_dd = -d / (self.h * self.h) * p;
        (p, dp_dd, -dp_dd * self.drift(theta, t))
    }

    /// Peak of the smoothed joint, `p_θ/(h√(2π))`.
    pub fn joint_peak(&self) -> f64 {
        1.0 / (self.theta.width() * self.h * (2.0 * PI).sqrt())
    }

    /// Largest `|Ẋ|/h` over a coarse scan of the box: the inverse time scale of
    /// the smoothed joint.
    pub fn frequency_scale(&self) -> f64 {
        let mut m: f64 = 0.0;
        for &th in &self.theta.linspace(64) {
            for &t in &self.time.linspace(64) {
                m = m.max(self.drift(th, t).abs());
            }
        }
        m / self.h
    }

    /// Coefficients of `X(ψ, t) − x = c₁ sin ψ + c₂ cos ψ + c₃` for the forced beam.
    pub fn forced_coefficients(&self, x: f64, t: f64) -> Option<(f64, f64, f64)> {
        match self.case {
            CaseParams::BeamForced {
                modal,
                alpha,
                forcing_freq,
                q0,
            } => {
                let w = modal.omega(alpha);
                let wt = w * t;
                let ft = forcing_freq * t;
                let k = modal.tip * q0 / (forcing_freq * forcing_freq - w * w);
                let c1 = k * (wt.cos() - ft.cos());
                let c2 = k * (forcing_freq / w * wt.sin() - ft.sin());
                let c3 = modal.tip * (wt.sin() + wt.cos()) - x;
                Some((c1, c2, c3))
            }
            _ => None,
        }
    }

    /// Partition of the parameter window into intervals on which `X(·, t)` is
    /// monotone, split at sign changes of `∂X/∂θ` on a 2048-point grid.
    pub fn monotone_branches(&self, t: f64) -> Vec<(f64, f64)> {
        let grid = self.theta.linspace(BRANCH_GRID);
        let d = |th: f64| self.response_theta_derivative(th, t);
        let mut cuts = vec![self.theta.lo];
        let mut prev = d(grid[0]);
        for w in grid.windows(2) {
            let next = d(w[1]);
            if prev == 0.0 && w[0] > self.theta.lo {
                cuts.push(w[0]);
            } else if prev * next < 0.0 {
                cuts.push(brent_root(d, w[0], w[1], prev, next, 1e-14));
            }
            prev = next;
        }
        cuts.push(self.theta.hi);
        cuts.dedup();
        cuts.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// All `θ_κ` in the window with `X(θ_κ, t) = x`.
    pub fn find_delta_roots(&self, x: f64, t: f64) -> DeltaRoots {
        let branches = self.monotone_branches(t);
        self.find_delta_roots_on(&branches, x, t)
    }

    pub fn find_delta_roots_on(&self, branches: &[(f64, f64)], x: f64, t: f64) -> DeltaRoots {
        let f = |th: f64| self.response(th, t) - x;
        let mut out = DeltaRoots::default();
        let push = |theta: f64, out: &mut DeltaRoots| {
            let slope = self.response_theta_derivative(theta, t).abs();
            if slope < SINGULAR_SLOPE {
                out.singular = true;
            }
            out.roots.push(DeltaRoot { theta, slope });
        };
        for (i, &(a, b)) in branches.iter().enumerate() {
            let fa = f(a);
            let fb = f(b);
            if fa == 0.0 {
                push(a, &mut out);
            } else if fb == 0.0 {
                if i + 1 == branches.len() {
                    push(b, &mut out);
                }
            } else if fa * fb < 0.0 {
                push(brent_root(f, a, b, fa, fb, 1e-15), &mut out);
            }
        }
        out
    }

    /// `p_X(x, t) = Σ_κ p_θ(θ_κ)/|∂X/∂θ(θ_κ)|`.
    pub fn exact_marginal(&self, x: f64, t: f64) -> ExactDensity {
        let branches = self.monotone_branches(t);
        self.exact_marginal_on(&branches, x, t)
    }

    pub fn exact_marginal_on(&self, branches: &[(f64, f64)], x: f64, t: f64) -> ExactDensity {
        let roots = self.find_delta_roots_on(branches, x, t);
        if roots.singular {
            return ExactDensity {
                value: f64::INFINITY,
                singular: true,
            };
        }
        let value = roots.roots.iter().map(|r| self.p_theta(r.theta) / r.slope).sum();
        ExactDensity { value, singular: false }
    }

    /// `∫ δ_h(x − X(θ,t)) p_θ(θ) dθ` by composite Gauss–Legendre
    /// (256 panels × 16 nodes).
    pub fn smoothed_marginal(&self, x: f64, t: f64) -> f64 {
        let rule = composite_rule(self.theta.lo, self.theta.hi, 256, 16);
        rule.iter().map(|&(th, w)| w * self.mollified_joint(x, th, t)).sum()
    }

    /// `∫ p_X(x, t) dx` evaluated piecewise between fold values of `X(·, t)`
    /// with a cosine substitution that absorbs the inverse-square-root
    /// singularities at the folds.
    pub fn exact_marginal_mass(&self, t: f64) -> f64 {
        let branches = self.monotone_branches(t);
        let mut breaks: Vec<f64> = branches.iter().flat_map(|&(a, b)| [self.response(a, t), self.response(b, t)]).collect();
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
        let rule = composite_rule(0.0, 1.0, 16, 24);
        let mut mass = 0.0;
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            for &(s, ws) in &rule {
                let c = (PI * s).cos();
                let x = a + 0.5 * (b - a) * (1.0 - c);
                let dx = 0.5 * (b - a) * PI * (PI * s).sin();
                let p = self.exact_marginal_on(&branches, x, t);
                if !p.singular {
                    mass += ws * p.value * dx;
                }
            }
        }
        mass
    }

    /// Closed-form SDOF roots for zero initial velocity:
    /// `ω = (±cos⁻¹(x/x₀) + 2κπ)/t` inside the window.
    pub fn sdof_closed_form_roots(&self, x: f64, t: f64) -> Option<Vec<f64>> {
        let CaseParams::Sdof { x0, v0 } = self.case else {
            return None;
        };
        if v0 != 0.0 {
            return None;
        }
        let r = x / x0;
        if !(-1.0..=1.0).contains(&r) {
            return Some(Vec::new());
        }
        let base = r.acos();
        let mut roots = Vec::new();
        let kmax = (self.theta.hi * t / (2.0 * PI)).ceil() as i64 + 1;
        for k in -1..=kmax {
            for branch in [base, -base] {
                let w = (branch + 2.0 * PI * k as f64) / t;
                if self.theta.contains(w) && !roots.iter().any(|&q: &f64| (q - w).abs() < 1e-12) {
                    roots.push(w);
                }
            }
        }
        roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(roots)
    }

    /// Closed-form forced-beam roots: the two arctangent branches, each
    /// shifted by multiples of π into the window and kept only where they
    /// solve `c₁ sin ψ + c₂ cos ψ + c₃ = 0`. `None` when the discriminant
    /// `c₁²(c₁² + c₂² − c₃²)` is negative or `c₁ = 0`.
    pub fn forced_closed_form_roots(&self, x: f64, t: f64) -> Option<Vec<f64>> {
        let (c1, c2, c3) = self.forced_coefficients(x, t)?;
        let disc = c1 * c1 * (c1 * c1 + c2 * c2 - c3 * c3);
        if disc < 0.0 || c1 == 0.0 {
            return None;
        }
        let q = disc.sqrt();
        let candidates = [
            ((-c1 * c1 * c3 - c2 * q) / ((-c2 * c3 + q) * c1)).atan(),
            ((c1 * c1 * c3 - c2 * q) / ((c2 * c3 + q) * c1)).atan(),
        ];
        let scale = c1.abs().max(c2.abs()).max(c3.abs()).max(1e-300);
        let mut roots: Vec<f64> = Vec::new();
        let kmin = ((self.theta.lo - FRAC_PI_4 * 2.0) / PI).floor() as i64 - 1;
        let kmax = ((self.theta.hi + FRAC_PI_4 * 2.0) / PI).ceil() as i64 + 1;
        for base in candidates {
            for k in kmin..=kmax {
                let psi = base + PI * k as f64;
                let resid = c1 * psi.sin() + c2 * psi.cos() + c3;
                if self.theta.contains(psi) && resid.abs() < 1e-9 * scale && !roots.iter().any(|&r| (r - psi).abs() < 1e-9) {
                    roots.push(psi);
                }
            }
        }
        roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(roots)
    }
}

fn validate_case(case: &CaseParams) -> Result<(), ProblemError> {
    let ok = match *case {
        CaseParams::Sdof { x0, v0 } => x0.is_finite() && v0.is_finite() && (x0 != 0.0 || v0 != 0.0),
        CaseParams::BeamFree { modal } => modal.length > 0.0,
        CaseParams::BeamForced {
            modal,
            alpha,
            forcing_freq,
            q0,
        } => {
            let w = modal.omega(alpha);
            alpha > 0.0 && q0.is_finite() && forcing_freq.is_finite() && (forcing_freq * forcing_freq - w * w).abs() > 1e-9
        }
    };
    if ok {
        Ok(())
    } else {
        Err(ProblemError::InvalidConstant(format!("{case:?}")))
    }
}

/// Nodes and weights of `panels` equal Gauss–Legendre panels of order `order` on `[a, b]`.
pub fn composite_rule(a: f64, b: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let width = (b - a) / panels as f64;
    let base = gauss_legendre(order, 0.0, width);
    let mut out = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let off = a + width * p as f64;
        out.extend(base.nodes.iter().zip(&base.weights).map(|(&x, &w)| (off + x, w)));
    }
    out
}

/// Brent's method on a bracket with `f(a)·f(b) < 0`.
pub fn brent_root(f: impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fb: f64, xtol: f64) -> f64 {
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut bisected = true;
    for _ in 0..200 {
        if fb == 0.0 || (b - a).abs() <= xtol {
            return b;
        }
        let mut s = if fa != fc && fb != fc {
            a * fb * fc / ((fa - fb) * (fa - fc)) + b * fa * fc / ((fb - fa) * (fb - fc)) + c * fa * fb / ((fc - fa) * (fc - fb))
        } else {
            b - fb * (b - a) / (fb - fa)
        };
        let lo = (3.0 * a + b) / 4.0;
        let outside = if lo < b { s < lo || s > b } else { s > lo || s < b };
        let tol = xtol.max(f64::EPSILON * b.abs());
        if outside
            || (bisected && (s - b).abs() >= (b - c).abs() / 2.0)
            || (!bisected && (s - b).abs() >= (c - d).abs() / 2.0)
            || (bisected && (b - c).abs() < tol)
            || (!bisected && (c - d).abs() < tol)
        {
            s = 0.5 * (a + b);
            bisected = true;
        } else {
            bisected = false;
        }
        let fs = f(s);
        d = c;
        c = b;
        fc = fb;
        if fa * fs < 0.0 {
            b = s;
            fb = fs;
        } else {
            a = s;
            fa = fs;
        }
        if fa.abs() < fb.abs() {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut fa, &mut fb);
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn sdof() -> GdeeProblem {
        GdeeProblem::with_defaults(CaseId::Sdof)
    }

    #[test]
    fn mu1_root() {
        let mu = cantilever_mu1();
        assert!((mu - 1.87510407).abs() < 1e-6);
        assert!((1.0 + mu.cos() * mu.cosh()).abs() < 1e-10);
        assert!(mu > 1.8 && mu < 1.9);
    }

    #[test]
    fn mode_shape_values() {
        let mu = cantilever_mu1();
        assert_eq!(mode_shape(mu, 0.0, 1.0), 0.0);
        let tip = mode_shape(mu, 1.0, 1.0);
        assert!((tip + 0.5993).abs() < 1e-3, "{tip}");
        let identity = 2.0 * (mu.cos().powi(2) - 1.0) / (mu.cos() + mu.cosh());
        assert!((tip - identity).abs() < 1e-10);
        // clamped end has zero slope
        let h = 1e-6;
        let slope = (mode_shape(mu, h, 1.0) - mode_shape(mu, -h, 1.0)) / (2.0 * h);
        assert!(slope.abs() < 1e-8);
    }

    #[test]
    fn sdof_response_and_drift() {
        let p = sdof();
        assert_eq!(p.response(1.3, 0.0), 0.1);
        assert!(p.response(FRAC_PI_2, 1.0).abs() < 1e-17);
        assert_eq!(p.drift(2.0, 0.0), 0.0);
        assert!((p.drift(FRAC_PI_2, 1.0) + 0.157080).abs() < 1e-6);
    }

    #[test]
    fn beam_free_initial_tip() {
        let p = GdeeProblem::with_defaults(CaseId::BeamFree);
        assert!((p.response(1.7, 0.0) + 0.5993).abs() < 1e-3);
    }

    #[test]
    fn drift_matches_time_derivative() {
        for id in CaseId::ALL {
            let p = GdeeProblem::with_defaults(id);
            for &th in &p.theta.linspace(7) {
                for &t in &p.time.linspace(5) {
                    let h = 1e-6;
                    let fd = (p.response(th, t + h) - p.response(th, t - h)) / (2.0 * h);
                    let d = p.drift(th, t);
                    assert!((fd - d).abs() < 1e-6 * d.abs().max(1e-3), "{id} θ={th} t={t}: {fd} vs {d}");
                    let fd_th = (p.response(th + h, t) - p.response(th - h, t)) / (2.0 * h);
                    let d_th = p.response_theta_derivative(th, t);
                    assert!((fd_th - d_th).abs() < 1e-6 * d_th.abs().max(1e-3), "{id} ∂θ");
                }
            }
        }
    }

    #[test]
    fn sdof_roots() {
        let p = sdof();
        let r = p.find_delta_roots(0.0, 1.0);
        assert_eq!(r.roots.len(), 1);
        assert!((r.roots[0].theta - FRAC_PI_2).abs() < 1e-10);
        let r = p.find_delta_roots(0.05, 1.0);
        assert_eq!(r.roots.len(), 1);
        assert!((r.roots[0].theta - 0.5f64.acos()).abs() < 1e-10);
        assert!(p.find_delta_roots(0.099, 1.0).roots.is_empty());
    }

    #[test]
    fn sdof_exact_marginal() {
        let p = sdof();
        let v = p.exact_marginal(0.0, 1.0);
        assert!(!v.singular);
        assert!((v.value - 20.0 / PI).abs() < 1e-9);
        assert!((v.value - 6.36620).abs() < 1e-5);
        assert_eq!(p.exact_marginal(0.099, 1.0).value, 0.0);
    }

    #[test]
    fn singular_root_is_flagged() {
        // beam_free has interior folds; evaluate exactly at a fold value
        let p = GdeeProblem::with_defaults(CaseId::BeamFree);
        let br = p.monotone_branches(1.0);
        assert!(br.len() > 1);
        let fold = br[0].1;
        let x = p.response(fold, 1.0);
        let d = p.exact_marginal(x, 1.0);
        assert!(d.singular);
        assert_eq!(d.value, f64::INFINITY);
    }

    #[test]
    fn mollified_joint_shape() {
        let p = sdof();
        let (th, t) = (1.2, 1.0);
        let x = p.response(th, t);
        let peak = p.p_theta(th) / (p.h * (2.0 * PI).sqrt());
        assert!((p.mollified_joint(x, th, t) - peak).abs() < 1e-12 * peak);
        assert!(p.mollified_joint(x + 10.5 * p.h, th, t) < 1e-20 * peak);
        let rule = composite_rule(x - 12.0 * p.h, x + 12.0 * p.h, 16, 16);
        let mass: f64 = rule.iter().map(|&(xx, w)| w * p.mollified_joint(xx, th, t)).sum();
        assert!((mass - p.p_theta(th)).abs() < 1e-8);
    }

    #[test]
    fn smoothed_marginal_is_even_for_symmetric_sdof() {
        let p = sdof();
        for &x in &[0.0, 0.013, 0.05, 0.07, 0.08] {
            let a = p.smoothed_marginal(x, 1.0);
            let b = p.smoothed_marginal(-x, 1.0);
            assert!((a - b).abs() < 1e-9 * a.max(1.0), "x={x}: {a} vs {b}");
        }
    }

    #[test]
    fn smoothed_marginal_converges_to_exact() {
        let (theta, time) = default_windows(CaseId::Sdof);
        let p = GdeeProblem::new(CaseParams::default_for(CaseId::Sdof), theta, time, DEFAULT_X_PAD, 0.001).unwrap();
        let v = p.smoothed_marginal(0.0, 1.0);
        assert!((v / (20.0 / PI) - 1.0).abs() < 0.005, "{v}");
    }

    #[test]
    fn forced_closed_forms_agree_with_bracketing() {
        let p = GdeeProblem::with_defaults(CaseId::BeamForced);
        let mut checked = 0;
        for &t in &[0.9, 1.0, 1.1] {
            for &x in &p.x.linspace(41) {
                let Some(closed) = p.forced_closed_form_roots(x, t) else { continue };
                let found = p.find_delta_roots(x, t);
                assert_eq!(closed.len(), found.roots.len(), "x={x} t={t}");
                for (c, r) in closed.iter().zip(&found.roots) {
                    assert!((c - r.theta).abs() < 1e-8);
                }
                checked += closed.len();
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn x_domain_contains_response_image() {
        for id in CaseId::ALL {
            let p = GdeeProblem::with_defaults(id);
            assert!(p.h > 0.0);
            for &th in &p.theta.linspace(33) {
                for &t in &p.time.linspace(33) {
                    assert!(p.x.contains(p.response(th, t)));
                }
            }
        }
    }

    #[test]
    fn unknown_case_is_rejected() {
        assert!("beam".parse::<CaseId>().is_err());
        assert_eq!("BEAM_FREE".parse::<CaseId>().unwrap(), CaseId::BeamFree);
    }
}
