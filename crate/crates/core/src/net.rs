//! Multilayer perceptron surrogate `N(x, θ, t; χ)`.
//!
//! Parameters are stored per layer with weights in row-major `(n_out × n_in)`
//! order. The flat parameter layout used by the optimizers is layer-major:
//! all weights of layer 0 (row-major), then the bias of layer 0, then layer 1,
//! and so on.
//!
//! Inputs are mapped affinely from the training box onto `[-1, 1]³` by an
//! [`InputScaler`] before the first layer. Hidden layers share one activation;
//! the output layer is linear and unconstrained in sign.

use std::fmt;
use std::fs;
use std::io::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Network input dimension: `(x, θ, t)`.
pub const INPUT_DIM: usize = 3;

const MAGIC: &str = "GDEE-PINN-NET v1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid layer dimensions: {0}")]
    InvalidDims(String),
    #[error("parameter vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid input scaler: {0}")]
    InvalidScaler(String),
    #[error("network file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Swish,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Swish => "swish",
        }
    }

    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Swish => z * sigmoid(z),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        self.eval_with_derivatives(z).1
    }

    #[inline]
    pub fn second_derivative(self, z: f64) -> f64 {
        self.eval_with_derivatives(z).2
    }

    /// `(σ(z), σ'(z), σ''(z))` in closed form.
    #[inline]
    pub fn eval_with_derivatives(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
            Activation::Swish => {
                let s = sigmoid(z);
                let ds = s * (1.0 - s);
                (z * s, s + z * ds, ds * (2.0 + z * (1.0 - 2.0 * s)))
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "swish" => Ok(Activation::Swish),
            other => Err(format!("unsupported activation `{other}` (expected tanh or swish)")),
        }
    }
}

/// Logistic function without overflow for large `|z|`.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn activate(kind: Activation, z: f64) -> f64 {
    kind.eval(z)
}

/// One affine map `z = W a + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `(n_out × n_in)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Layer {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.n_in + col]
    }

    pub fn num_params(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    dims: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
}

/// Default architecture: 4 hidden layers of width 20.
pub fn default_dims() -> Vec<usize> {
    layer_dims(4, 20)
}

pub fn layer_dims(depth: usize, width: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(depth + 2);
    dims.push(INPUT_DIM);
    dims.extend(std::iter::repeat_n(width, depth));
    dims.push(1);
    dims
}

pub fn validate_dims(dims: &[usize]) -> Result<(), NetError> {
    if dims.len() < 2 {
        return Err(NetError::InvalidDims(format!("need at least 2 entries, got {dims:?}")));
    }
    if dims[0] != INPUT_DIM {
        return Err(NetError::InvalidDims(format!("first entry must be {INPUT_DIM}, got {}", dims[0])));
    }
    if *dims.last().unwrap() != 1 {
        return Err(NetError::InvalidDims(format!("last entry must be 1, got {}", dims.last().unwrap())));
    }
    if dims.contains(&0) {
        return Err(NetError::InvalidDims(format!("zero-width layer in {dims:?}")));
    }
    Ok(())
}

/// Σ (dims[ℓ+1]·dims[ℓ] + dims[ℓ+1]).
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl NetworkParams {
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self, NetError> {
        validate_dims(dims)?;
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(NetworkParams {
            dims: dims.to_vec(),
            activation,
            layers,
        })
    }

    /// Glorot-normal weights, `std = √(2/(fan_in + fan_out))`, zero biases.
    /// Draws come from ChaCha8 seeded with `seed`, in flat parameter order.
    pub fn init_glorot(dims: &[usize], activation: Activation, seed: u64) -> Result<Self, NetError> {
        let mut net = Self::zeros(dims, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let std = (2.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut layer.weights {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        param_count(&self.dims)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn unflatten(flat: &[f64], dims: &[usize], activation: Activation) -> Result<Self, NetError> {
        let mut net = Self::zeros(dims, activation)?;
        net.assign_flat(flat)?;
        Ok(net)
    }

    /// Overwrites all parameters from a flat vector in [`flatten`](Self::flatten) order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), NetError> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(NetError::LengthMismatch {
                expected,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Output for an input already in network coordinates.
    pub fn forward(&self, input: [f64; INPUT_DIM]) -> f64 {
        let mut a: Vec<f64> = input.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.bias.clone();
            for (i, zi) in z.iter_mut().enumerate() {
                let row = &layer.weights[i * layer.n_in..(i + 1) * layer.n_in];
                *zi += row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
            }
            if l < last {
                for zi in &mut z {
                    *zi = self.activation.eval(*zi);
                }
            }
            a = z;
        }
        a[0]
    }

    /// Output and its gradient with respect to the (network-coordinate) input,
    /// by forward tangent propagation in plain floating point.
    pub fn forward_with_gradient(&self, input: [f64; INPUT_DIM]) -> (f64, [f64; INPUT_DIM]) {
        let mut a: Vec<f64> = input.to_vec();
        // tangents[k][i] = ∂a_i/∂u_k
        let mut tan: [Vec<f64>; INPUT_DIM] = std::array::from_fn(|k| {
            let mut e = vec![0.0; INPUT_DIM];
            e[k] = 1.0;
            e
        });
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.bias.clone();
            let mut dz: [Vec<f64>; INPUT_DIM] = std::array::from_fn(|_| vec![0.0; layer.n_out]);
            for i in 0..layer.n_out {
                let row = &layer.weights[i * layer.n_in..(i + 1) * layer.n_in];
                z[i] += row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
                for k in 0..INPUT_DIM {
                    dz[k][i] = row.iter().zip(&tan[k]).map(|(w, x)| w * x).sum::<f64>();
                }
            }
            if l < last {
                for i in 0..layer.n_out {
                    let (s, ds, _) = self.activation.eval_with_derivatives(z[i]);
                    z[i] = s;
                    for dzk in dz.iter_mut() {
                        dzk[i] *= ds;
                    }
                }
            }
            a = z;
            tan = dz;
        }
        (a[0], [tan[0][0], tan[1][0], tan[2][0]])
    }

    /// Output at a raw `(x, θ, t)` point.
    pub fn eval_raw(&self, scaler: &InputScaler, point: [f64; INPUT_DIM]) -> f64 {
        self.forward(scaler.scale(point))
    }

    /// Output and raw-coordinate gradient `(∂N/∂x, ∂N/∂θ, ∂N/∂t)`.
    pub fn eval_raw_with_gradient(&self, scaler: &InputScaler, point: [f64; INPUT_DIM]) -> (f64, [f64; INPUT_DIM]) {
        let (v, g) = self.forward_with_gradient(scaler.scale(point));
        let s = scaler.factors();
        (v, [g[0] * s[0], g[1] * s[1], g[2] * s[2]])
    }
}

/// Per-dimension affine map `[lo, hi] → [-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputScaler {
    pub lo: [f64; INPUT_DIM],
    pub hi: [f64; INPUT_DIM],
}

impl InputScaler {
    pub fn new(lo: [f64; INPUT_DIM], hi: [f64; INPUT_DIM]) -> Result<Self, NetError> {
        for k in 0..INPUT_DIM {
            if !(lo[k].is_finite() && hi[k].is_finite() && lo[k] < hi[k]) {
                return Err(NetError::InvalidScaler(format!(
                    "dimension {k}: need finite lo < hi, got [{}, {}]",
                    lo[k], hi[k]
                )));
            }
        }
        Ok(InputScaler { lo, hi })
    }

    /// Scaler that leaves inputs unchanged.
    pub fn identity() -> Self {
        InputScaler {
            lo: [-1.0; INPUT_DIM],
            hi: [1.0; INPUT_DIM],
        }
    }

    #[inline]
    pub fn scale(&self, p: [f64; INPUT_DIM]) -> [f64; INPUT_DIM] {
        std::array::from_fn(|k| 2.0 * (p[k] - self.lo[k]) / (self.hi[k] - self.lo[k]) - 1.0)
    }

    pub fn unscale(&self, u: [f64; INPUT_DIM]) -> [f64; INPUT_DIM] {
        std::array::from_fn(|k| 0.5 * (u[k] * (self.hi[k] - self.lo[k]) + self.lo[k] + self.hi[k]))
    }

    /// `d(scaled)/d(raw)` per dimension.
    #[inline]
    pub fn factors(&self) -> [f64; INPUT_DIM] {
        std::array::from_fn(|k| 2.0 / (self.hi[k] - self.lo[k]))
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the network and scaler as line-oriented text.
pub fn save_net(net: &NetworkParams, scaler: &InputScaler, path: &Path) -> Result<(), NetError> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("activation {}\n", net.activation));
    let dims: Vec<String> = net.dims.iter().map(|d| d.to_string()).collect();
    out.push_str(&format!("dims {}\n", dims.join(" ")));
    let mut sc = Vec::with_capacity(2 * INPUT_DIM);
    for k in 0..INPUT_DIM {
        sc.push(fmt_f64(scaler.lo[k]));
        sc.push(fmt_f64(scaler.hi[k]));
    }
    out.push_str(&format!("scaler {}\n", sc.join(" ")));
    let flat = net.flatten();
    out.push_str(&format!("params {}\n", flat.len()));
    for v in flat {
        out.push_str(&fmt_f64(v));
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

fn format_err(line: usize, msg: impl Into<String>) -> NetError {
    NetError::Format { line, msg: msg.into() }
}

fn parse_finite(tok: &str, line: usize) -> Result<f64, NetError> {
    let v: f64 = tok
        .parse()
        .map_err(|_| format_err(line, format!("unparsable number `{tok}`")))?;
    if !v.is_finite() {
        return Err(format_err(line, format!("non-finite value `{tok}`")));
    }
    Ok(v)
}

fn keyed_line<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, key: &str, last_line: usize) -> Result<(usize, Vec<&'a str>), NetError> {
    let (no, text) = lines
        .next()
        .ok_or_else(|| format_err(last_line + 1, format!("missing `{key}` line")))?;
    let mut toks = text.split_whitespace();
    match toks.next() {
        Some(k) if k == key => Ok((no, toks.collect())),
        _ => Err(format_err(no, format!("expected `{key}` line"))),
    }
}

pub fn parse_net(text: &str) -> Result<(NetworkParams, InputScaler), NetError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(format_err(1, format!("missing magic header `{MAGIC}`"))),
    }
    let (no, toks) = keyed_line(&mut lines, "activation", 1)?;
    let activation: Activation = toks
        .first()
        .ok_or_else(|| format_err(no, "missing activation name"))?
        .parse()
        .map_err(|e: String| format_err(no, e))?;
    let (no, toks) = keyed_line(&mut lines, "dims", no)?;
    let dims = toks
        .iter()
        .map(|t| t.parse::<usize>().map_err(|_| format_err(no, format!("bad dimension `{t}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    validate_dims(&dims).map_err(|e| format_err(no, e.to_string()))?;
    let (no, toks) = keyed_line(&mut lines, "scaler", no)?;
    if toks.len() != 2 * INPUT_DIM {
        return Err(format_err(no, format!("scaler needs {} numbers, got {}", 2 * INPUT_DIM, toks.len())));
    }
    let vals = toks.iter().map(|t| parse_finite(t, no)).collect::<Result<Vec<_>, _>>()?;
    let scaler = InputScaler::new(
        std::array::from_fn(|k| vals[2 * k]),
        std::array::from_fn(|k| vals[2 * k + 1]),
    )
    .map_err(|e| format_err(no, e.to_string()))?;
    let (no, toks) = keyed_line(&mut lines, "params", no)?;
    let declared: usize = toks
        .first()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| format_err(no, "missing parameter count"))?;
    let expected = param_count(&dims);
    if declared != expected {
        return Err(format_err(no, format!("parameter count {declared} does not match dims (expected {expected})")));
    }
    let mut flat = Vec::with_capacity(expected);
    let mut last = no;
    for (no, text) in lines {
        last = no;
        let t = text.trim();
        if t.is_empty() {
            continue;
        }
        if flat.len() == expected {
            return Err(format_err(no, "trailing data after parameters"));
        }
        flat.push(parse_finite(t, no)?);
    }
    if flat.len() != expected {
        return Err(format_err(
            last,
            format!("count mismatch: expected {expected} parameters, found {}", flat.len()),
        ));
    }
    let net = NetworkParams::unflatten(&flat, &dims, activation)?;
    Ok((net, scaler))
}

pub fn load_net(path: &Path) -> Result<(NetworkParams, InputScaler), NetError> {
    let text = fs::read_to_string(path)?;
    parse_net(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count() {
        assert_eq!(param_count(&default_dims()), 1361);
    }

    #[test]
    fn glorot_std_and_zero_bias() {
        let net = NetworkParams::init_glorot(&default_dims(), Activation::Tanh, 7).unwrap();
        let w = &net.layers()[1].weights;
        assert_eq!(w.len(), 400);
        let mean = w.iter().sum::<f64>() / 400.0;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 399.0;
        let target = (2.0f64 / 40.0).sqrt();
        assert!((target - 0.223607).abs() < 1e-6);
        assert!((var.sqrt() / target - 1.0).abs() < 0.2, "std {}", var.sqrt());
        assert!(net.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn glorot_is_deterministic() {
        let a = NetworkParams::init_glorot(&default_dims(), Activation::Swish, 99).unwrap();
        let b = NetworkParams::init_glorot(&default_dims(), Activation::Swish, 99).unwrap();
        assert_eq!(a, b);
        let c = NetworkParams::init_glorot(&default_dims(), Activation::Swish, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_dims_rejected() {
        assert!(NetworkParams::init_glorot(&[2, 20, 1], Activation::Tanh, 0).is_err());
        assert!(NetworkParams::init_glorot(&[3, 20, 2], Activation::Tanh, 0).is_err());
        assert!(NetworkParams::init_glorot(&[3], Activation::Tanh, 0).is_err());
    }

    #[test]
    fn activation_values() {
        assert_eq!(activate(Activation::Swish, 0.0), 0.0);
        assert!((activate(Activation::Swish, 1.0) - 0.731059).abs() < 1e-6);
        assert_eq!(activate(Activation::Tanh, 0.0), 0.0);
        // no overflow at extreme arguments
        assert!(activate(Activation::Swish, -800.0).abs() < 1e-300);
        assert_eq!(activate(Activation::Swish, 800.0), 800.0);
        assert!(Activation::Swish.derivative(-800.0).is_finite());
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for kind in [Activation::Tanh, Activation::Swish] {
            for &z in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
                let h = 1e-5;
                let (_, d1, d2) = kind.eval_with_derivatives(z);
                let fd1 = (kind.eval(z + h) - kind.eval(z - h)) / (2.0 * h);
                let fd2 = (kind.derivative(z + h) - kind.derivative(z - h)) / (2.0 * h);
                assert!((d1 - fd1).abs() < 1e-9, "{kind} d1 at {z}");
                assert!((d2 - fd2).abs() < 1e-9, "{kind} d2 at {z}");
            }
        }
    }

    #[test]
    fn relu_is_rejected() {
        assert!("relu".parse::<Activation>().is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = NetworkParams::unflatten(&vec![0.0; 1361], &default_dims(), Activation::Tanh).unwrap();
        for p in [[0.1, 0.2, 0.3], [-5.0, 3.0, 1e3]] {
            assert_eq!(net.forward(p), 0.0);
        }
    }

    #[test]
    fn unflatten_length_mismatch() {
        let err = NetworkParams::unflatten(&[0.0; 10], &default_dims(), Activation::Tanh).unwrap_err();
        assert!(matches!(err, NetError::LengthMismatch { expected: 1361, got: 10 }));
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let net = NetworkParams::init_glorot(&default_dims(), Activation::Swish, 3).unwrap();
        let u = [0.1, 0.5, -0.3];
        let (v, g) = net.forward_with_gradient(u);
        assert_eq!(v, net.forward(u));
        for k in 0..3 {
            let h = 1e-6;
            let mut up = u;
            let mut dn = u;
            up[k] += h;
            dn[k] -= h;
            let fd = (net.forward(up) - net.forward(dn)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7 * (1.0 + g[k].abs()));
        }
    }

    #[test]
    fn scaler_maps_box_to_unit_cube() {
        let s = InputScaler::new([-0.1, 0.5, 0.9], [0.1, 2.0, 1.1]).unwrap();
        assert_eq!(s.scale([-0.1, 0.5, 0.9]), [-1.0, -1.0, -1.0]);
        assert_eq!(s.scale([0.1, 2.0, 1.1]), [1.0, 1.0, 1.0]);
        let p = [0.03, 1.1, 1.0];
        let back = s.unscale(s.scale(p));
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() < 1e-15);
        }
        assert!(InputScaler::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn file_roundtrip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = NetworkParams::init_glorot(&[3, 7, 5, 1], Activation::Tanh, 11).unwrap();
        let scaler = InputScaler::new([-0.1, 0.7, 0.9], [0.1, 2.4, 1.1]).unwrap();
        save_net(&net, &scaler, &path).unwrap();
        let (net2, scaler2) = load_net(&path).unwrap();
        assert_eq!(net, net2);
        assert_eq!(scaler, scaler2);
        let p = [0.02, 1.3, 1.0];
        assert_eq!(net.eval_raw(&scaler, p).to_bits(), net2.eval_raw(&scaler2, p).to_bits());

        let text = fs::read_to_string(&path).unwrap();
        let bad_magic = text.replacen(MAGIC, "NOT-A-NET v1", 1);
        assert!(matches!(parse_net(&bad_magic), Err(NetError::Format { line: 1, .. })));

        let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        match parse_net(&truncated) {
            Err(NetError::Format { msg, .. }) => assert!(msg.contains("count mismatch"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut lines: Vec<&str> = text.lines().collect();
        lines[8] = "NaN";
        match parse_net(&lines.join("\n")) {
            Err(NetError::Format { line, .. }) => assert_eq!(line, 9),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
