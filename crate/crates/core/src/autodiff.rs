//! Scalar expression tape with forward tangents over network inputs and
//! reverse accumulation over network parameters.
//!
//! Every network input direction is carried as a [`TangentBundle`] whose
//! primal and tangent components are themselves tape nodes, so any scalar
//! built from outputs and input derivatives can be differentiated with respect
//! to the parameters by a single reverse sweep ([`ExprTape::param_gradient`]).
//!
//! Nodes are evaluated eagerly when recorded; the tape is append-only and
//! therefore topologically ordered.

use thiserror::Error;

use crate::net::{Activation, NetworkParams, INPUT_DIM};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite intermediate value in layer {layer}")]
    NonFinite { layer: usize },
    #[error("root node {root} is not on the tape (tape has {len} nodes)")]
    RootNotOnTape { root: usize, len: usize },
}

/// Handle to a scalar node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Param,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// σ(a) for the given activation.
    Act(Activation, usize),
    /// σ'(a), closed form.
    ActPrime(Activation, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: f64,
}

#[derive(Debug, Default, Clone)]
pub struct ExprTape {
    nodes: Vec<Node>,
    params: Vec<usize>,
    roots: Vec<usize>,
}

impl ExprTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: f64) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Gradients are reported in registration order.
    pub fn param(&mut self, value: f64) -> Var {
        let v = self.push(Op::Param, value);
        self.params.push(v.0);
        v
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Op::Const, value)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0].value
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn act(&mut self, kind: Activation, a: Var) -> Var {
        let v = kind.eval(self.value(a));
        self.push(Op::Act(kind, a.0), v)
    }

    pub fn act_prime(&mut self, kind: Activation, a: Var) -> Var {
        let v = kind.derivative(self.value(a));
        self.push(Op::ActPrime(kind, a.0), v)
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// Records `v` as an output scalar.
    pub fn mark_root(&mut self, v: Var) {
        self.roots.push(v.0);
    }

    pub fn roots(&self) -> Vec<Var> {
        self.roots.iter().map(|&i| Var(i)).collect()
    }

    /// `∂root/∂p` for every registered parameter, in registration order.
    pub fn param_gradient(&self, root: Var) -> Result<Vec<f64>, AutodiffError> {
        if root.0 >= self.nodes.len() {
            return Err(AutodiffError::RootNotOnTape {
                root: root.0,
                len: self.nodes.len(),
            });
        }
        let mut adj = vec![0.0; root.0 + 1];
        adj[root.0] = 1.0;
        for i in (0..=root.0).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match self.nodes[i].op {
                Op::Param | Op::Const => {}
                Op::Add(a, b) => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Op::Sub(a, b) => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[a].value, self.nodes[b].value);
                    adj[a] += g * vb;
                    adj[b] += g * va;
                }
                Op::Scale(a, c) => adj[a] += g * c,
                Op::Act(kind, a) => adj[a] += g * kind.derivative(self.nodes[a].value),
                Op::ActPrime(kind, a) => adj[a] += g * kind.second_derivative(self.nodes[a].value),
            }
        }
        Ok(self
            .params
            .iter()
            .map(|&p| if p <= root.0 { adj[p] } else { 0.0 })
            .collect())
    }
}

/// A primal value with one tangent per seeded input direction.
#[derive(Debug, Clone, Copy)]
pub struct TangentBundle {
    pub primal: Var,
    pub tangents: [Var; INPUT_DIM],
}

/// Network parameters registered on a tape, layer by layer.
#[derive(Debug, Clone)]
pub struct TapeNetwork {
    activation: Activation,
    /// (n_in, n_out, weights row-major, bias)
    layers: Vec<(usize, usize, Vec<Var>, Vec<Var>)>,
}

impl TapeNetwork {
    /// Registers all parameters of `net` on `tape` in flat-parameter order.
    pub fn register(tape: &mut ExprTape, net: &NetworkParams) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|layer| {
                let w = layer.weights.iter().map(|&v| tape.param(v)).collect();
                let b = layer.bias.iter().map(|&v| tape.param(v)).collect();
                (layer.n_in, layer.n_out, w, b)
            })
            .collect();
        TapeNetwork {
            activation: net.activation(),
            layers,
        }
    }

    /// Records the network at `input` (network coordinates). Tangent `j`
    /// is the directional derivative along `seeds[j]`.
    pub fn forward(
        &self,
        tape: &mut ExprTape,
        input: [f64; INPUT_DIM],
        seeds: [[f64; INPUT_DIM]; INPUT_DIM],
    ) -> Result<TangentBundle, AutodiffError> {
        if input.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { layer: 0 });
        }
        let last = self.layers.len() - 1;
        let mut primal: Vec<Var> = Vec::new();
        let mut tangents: [Vec<Var>; INPUT_DIM] = Default::default();
        for (l, (n_in, n_out, w, b)) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(*n_out);
            let mut dz: [Vec<Var>; INPUT_DIM] = Default::default();
            for i in 0..*n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                if l == 0 {
                    let mut terms: Vec<Var> = row.iter().zip(input).map(|(&wv, u)| tape.scale(wv, u)).collect();
                    terms.push(b[i]);
                    z.push(tape.sum(&terms));
                    for (j, seed) in seeds.iter().enumerate() {
                        let terms: Vec<Var> = row.iter().zip(seed).map(|(&wv, &s)| tape.scale(wv, s)).collect();
                        dz[j].push(tape.sum(&terms));
                    }
                } else {
                    let mut terms: Vec<Var> = row.iter().zip(&primal).map(|(&wv, &a)| tape.mul(wv, a)).collect();
                    terms.push(b[i]);
                    z.push(tape.sum(&terms));
                    for j in 0..INPUT_DIM {
                        let terms: Vec<Var> = row.iter().zip(&tangents[j]).map(|(&wv, &a)| tape.mul(wv, a)).collect();
                        dz[j].push(tape.sum(&terms));
                    }
                }
            }
            if l < last {
                for i in 0..*n_out {
                    let zi = z[i];
                    let deriv = tape.act_prime(self.activation, zi);
                    z[i] = tape.act(self.activation, zi);
                    for dzj in dz.iter_mut() {
                        dzj[i] = tape.mul(deriv, dzj[i]);
                    }
                }
            }
            let finite = z.iter().chain(dz.iter().flatten()).all(|&v| tape.value(v).is_finite());
            if !finite {
                return Err(AutodiffError::NonFinite { layer: l });
            }
            primal = z;
            tangents = dz;
        }
        Ok(TangentBundle {
            primal: primal[0],
            tangents: std::array::from_fn(|j| tangents[j][0]),
        })
    }
}

/// Identity seeds: tangents are the partials along each input axis.
pub fn unit_seeds() -> [[f64; INPUT_DIM]; INPUT_DIM] {
    std::array::from_fn(|j| std::array::from_fn(|k| if j == k { 1.0 } else { 0.0 }))
}

/// Network output and its input gradient, both recorded on a fresh tape.
pub fn record_forward(
    params: &NetworkParams,
    input: [f64; INPUT_DIM],
) -> Result<(ExprTape, TangentBundle), AutodiffError> {
    let mut tape = ExprTape::new();
    let net = TapeNetwork::register(&mut tape, params);
    let out = net.forward(&mut tape, input, unit_seeds())?;
    tape.mark_root(out.primal);
    for t in out.tangents {
        tape.mark_root(t);
    }
    Ok((tape, out))
}

/// `(N(u), ∂N/∂u)` for an input in network coordinates.
pub fn forward_with_input_tangents(
    params: &NetworkParams,
    input: [f64; INPUT_DIM],
) -> Result<(f64, [f64; INPUT_DIM]), AutodiffError> {
    let (tape, out) = record_forward(params, input)?;
    Ok((tape.value(out.primal), out.tangents.map(|t| tape.value(t))))
}

/// Central-difference gradient `(f(p+εeᵢ) − f(p−εeᵢ))/(2ε)`.
pub fn finite_diff_probe(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut p = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let up = f(&p);
            p[i] = orig - step;
            let dn = f(&p);
            p[i] = orig;
            (up - dn) / (2.0 * step)
        })
        .collect()
}
