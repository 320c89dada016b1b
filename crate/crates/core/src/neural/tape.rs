//! Vector-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every vector produced during a forward pass together
//! with the operation that produced it. Values are computed eagerly when a
//! node is pushed; [`Tape::backward`] walks the nodes in reverse creation
//! order and accumulates parameter gradients into a [`Grads`] buffer.

use nalgebra::{DMatrix, DVector};

use crate::geometry::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: DMatrix<f64>,
}

/// Named parameter tensors. Vectors (biases) are stored as `n x 1` matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DMatrix<f64>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &DMatrix<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DMatrix<f64> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            tensors: self
                .params
                .iter()
                .map(|p| DMatrix::zeros(p.value.nrows(), p.value.ncols()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<DMatrix<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &DMatrix<f64> {
        &self.tensors[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            *t *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    /// Rescales to `max_norm` when the global norm exceeds it. Returns whether
    /// clipping happened.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> bool {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    /// Externally supplied value; gradients stop here.
    Leaf,
    Linear {
        w: ParamId,
        b: Option<ParamId>,
        x: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    OneMinus(NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    Concat(Vec<NodeId>),
    /// `reshape(k, rows, cols) * v` with `k` row-major.
    MatVec {
        k: NodeId,
        v: NodeId,
        rows: usize,
    },
    /// Value supplied by the caller; gradient is `jac^T g`.
    Linearized {
        x: NodeId,
        jac: DMatrix<f64>,
    },
    Select {
        x: NodeId,
        idx: Vec<usize>,
    },
    /// Wraps one component into `[-pi, pi)`; unit derivative.
    Wrap {
        x: NodeId,
        at: usize,
    },
    /// Sum of squared residuals `x - target`; `wrap` marks an angular component.
    SquaredError {
        x: NodeId,
        target: DVector<f64>,
        wrap: Option<usize>,
    },
    /// Sum of Huber penalties of the residuals.
    Huber {
        x: NodeId,
        target: DVector<f64>,
        wrap: Option<usize>,
        delta: f64,
    },
    Sum(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    value: DVector<f64>,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn residual(x: &DVector<f64>, target: &DVector<f64>, wrap: Option<usize>) -> DVector<f64> {
    let mut r = x - target;
    if let Some(i) = wrap {
        r[i] = wrap_angle(r[i]);
    }
    r
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn activate(x: &DVector<f64>, act: Activation) -> DVector<f64> {
    match act {
        Activation::Identity => x.clone(),
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Tanh => x.map(f64::tanh),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DVector<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    /// Which ReLU outputs are positive, in recording order. Two passes with
    /// the same pattern lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Act(_, Activation::Relu)))
            .flat_map(|n| n.value.iter().map(|v| *v > 0.0))
            .collect()
    }

    fn eval(&self, op: &Op, params: Option<&ParamStore>) -> DVector<f64> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf => unreachable!("leaf values are supplied"),
            Op::Linear { w, b, x } => {
                let params = params.expect("linear op needs parameters");
                let mut out = params.get(*w) * v(x);
                if let Some(b) = b {
                    out += params.get(*b).column(0);
                }
                out
            }
            Op::Add(a, b) => v(a) + v(b),
            Op::Sub(a, b) => v(a) - v(b),
            Op::Mul(a, b) => v(a).component_mul(v(b)),
            Op::OneMinus(a) => v(a).map(|e| 1.0 - e),
            Op::Scale(a, s) => v(a) * *s,
            Op::Act(a, act) => activate(v(a), *act),
            Op::Concat(parts) => {
                let total = parts.iter().map(|p| v(p).len()).sum();
                let mut out = DVector::zeros(total);
                let mut off = 0;
                for p in parts {
                    let pv = v(p);
                    out.rows_mut(off, pv.len()).copy_from(pv);
                    off += pv.len();
                }
                out
            }
            Op::MatVec { k, v: vec, rows } => {
                let kv = v(k);
                let x = v(vec);
                let cols = x.len();
                DVector::from_fn(*rows, |i, _| (0..cols).map(|j| kv[i * cols + j] * x[j]).sum())
            }
            Op::Linearized { .. } => unreachable!("linearized values are supplied"),
            Op::Select { x, idx } => DVector::from_iterator(idx.len(), idx.iter().map(|&i| v(x)[i])),
            Op::Wrap { x, at } => {
                let mut out = v(x).clone();
                out[*at] = wrap_angle(out[*at]);
                out
            }
            Op::SquaredError { x, target, wrap } => {
                DVector::from_element(1, residual(v(x), target, *wrap).norm_squared())
            }
            Op::Huber {
                x,
                target,
                wrap,
                delta,
            } => {
                let r = residual(v(x), target, *wrap);
                DVector::from_element(1, r.iter().map(|&e| huber(e, *delta)).sum())
            }
            Op::Sum(parts) => DVector::from_element(1, parts.iter().map(|p| v(p)[0]).sum()),
        }
    }

    fn push(&mut self, op: Op, params: Option<&ParamStore>) -> NodeId {
        let value = self.eval(&op, params);
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: DVector<f64>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, params: &ParamStore, w: ParamId, b: Option<ParamId>, x: NodeId) -> NodeId {
        self.push(Op::Linear { w, b, x }, Some(params))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b), None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b), None)
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::OneMinus(a), None)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s), None)
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        if act == Activation::Identity {
            return a;
        }
        self.push(Op::Act(a, act), None)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()), None)
    }

    /// `reshape(k, rows, v.len()) * v`, `k` stored row-major.
    pub fn mat_vec(&mut self, k: NodeId, v: NodeId, rows: usize) -> NodeId {
        assert_eq!(self.value(k).len(), rows * self.value(v).len(), "mat_vec shape");
        self.push(Op::MatVec { k, v, rows }, None)
    }

    /// Records a nonlinear map whose value was computed elsewhere, with its
    /// Jacobian at `x`.
    pub fn linearized(&mut self, x: NodeId, value: DVector<f64>, jac: DMatrix<f64>) -> NodeId {
        assert_eq!(jac.shape(), (value.len(), self.value(x).len()), "linearized shape");
        self.nodes.push(Node {
            value,
            op: Op::Linearized { x, jac },
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn select(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        self.push(
            Op::Select {
                x,
                idx: idx.to_vec(),
            },
            None,
        )
    }

    pub fn wrap(&mut self, x: NodeId, at: usize) -> NodeId {
        self.push(Op::Wrap { x, at }, None)
    }

    pub fn squared_error(&mut self, x: NodeId, target: DVector<f64>, wrap: Option<usize>) -> NodeId {
        self.push(Op::SquaredError { x, target, wrap }, None)
    }

    pub fn huber(&mut self, x: NodeId, target: DVector<f64>, wrap: Option<usize>, delta: f64) -> NodeId {
        self.push(
            Op::Huber {
                x,
                target,
                wrap,
                delta,
            },
            None,
        )
    }

    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Sum(parts.to_vec()), None)
    }

    /// Recomputes every node from its recorded inputs.
    pub fn replay(&self, params: &ParamStore) -> Vec<DVector<f64>> {
        let mut scratch = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf | Op::Linearized { .. } => node.value.clone(),
                _ => scratch.eval(&node.op, Some(params)),
            };
            scratch.nodes.push(Node {
                value,
                op: node.op.clone(),
            });
        }
        scratch.nodes.into_iter().map(|n| n.value).collect()
    }

    /// Reverse pass seeded with `d(loss)/d(node)` for each seed node. Parameter
    /// gradients are added into `grads`; returns the gradient of every node.
    pub fn backward(
        &self,
        seeds: &[(NodeId, DVector<f64>)],
        params: &ParamStore,
        grads: &mut Grads,
    ) -> NodeGrads {
        let mut g: Vec<Option<DVector<f64>>> = vec![None; self.nodes.len()];
        let Some(start) = seeds.iter().map(|s| s.0 .0).max() else {
            return NodeGrads { grads: g };
        };
        for (id, seed) in seeds {
            accumulate(&mut g, *id, seed.clone());
        }
        for i in (0..=start).rev() {
            let Some(gi) = g[i].clone() else { continue };
            let node = &self.nodes[i];
            let v = |id: &NodeId| &self.nodes[id.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Linear { w, b, x } => {
                    grads.tensors[w.0].ger(1.0, &gi, v(x), 1.0);
                    if let Some(b) = b {
                        let mut col = grads.tensors[b.0].column_mut(0);
                        col += &gi;
                    }
                    accumulate(&mut g, *x, params.get(*w).tr_mul(&gi));
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, gi.clone());
                    accumulate(&mut g, *b, gi);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g, *a, gi.clone());
                    accumulate(&mut g, *b, -gi);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut g, *a, gi.component_mul(v(b)));
                    accumulate(&mut g, *b, gi.component_mul(v(a)));
                }
                Op::OneMinus(a) => accumulate(&mut g, *a, -gi),
                Op::Scale(a, s) => accumulate(&mut g, *a, gi * *s),
                Op::Act(a, act) => {
                    let y = &node.value;
                    let local = match act {
                        Activation::Identity => gi,
                        Activation::Relu => gi.zip_map(y, |gv, yv| if yv > 0.0 { gv } else { 0.0 }),
                        Activation::Tanh => gi.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)),
                        Activation::Sigmoid => gi.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)),
                    };
                    accumulate(&mut g, *a, local);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = v(p).len();
                        accumulate(&mut g, *p, gi.rows(off, n).into_owned());
                        off += n;
                    }
                }
                Op::MatVec { k, v: vec, rows } => {
                    let kv = v(k);
                    let x = v(vec);
                    let cols = x.len();
                    let mut gk = DVector::zeros(kv.len());
                    let mut gx = DVector::zeros(cols);
                    for r in 0..*rows {
                        for c in 0..cols {
                            gk[r * cols + c] = gi[r] * x[c];
                            gx[c] += gi[r] * kv[r * cols + c];
                        }
                    }
                    accumulate(&mut g, *k, gk);
                    accumulate(&mut g, *vec, gx);
                }
                Op::Linearized { x, jac } => accumulate(&mut g, *x, jac.tr_mul(&gi)),
                Op::Select { x, idx } => {
                    let mut gx = DVector::zeros(v(x).len());
                    for (k, &src) in idx.iter().enumerate() {
                        gx[src] += gi[k];
                    }
                    accumulate(&mut g, *x, gx);
                }
                Op::Wrap { x, .. } => accumulate(&mut g, *x, gi),
                Op::SquaredError { x, target, wrap } => {
                    let r = residual(v(x), target, *wrap);
                    accumulate(&mut g, *x, r * (2.0 * gi[0]));
                }
                Op::Huber {
                    x,
                    target,
                    wrap,
                    delta,
                } => {
                    let r = residual(v(x), target, *wrap);
                    let d = r.map(|e| e.clamp(-*delta, *delta)) * gi[0];
                    accumulate(&mut g, *x, d);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        accumulate(&mut g, *p, gi.clone());
                    }
                }
            }
        }
        NodeGrads { grads: g }
    }
}

fn accumulate(g: &mut [Option<DVector<f64>>], id: NodeId, delta: DVector<f64>) {
    match &mut g[id.0] {
        Some(existing) => *existing += delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Per-node gradients from a reverse pass.
#[derive(Debug, Clone)]
pub struct NodeGrads {
    grads: Vec<Option<DVector<f64>>>,
}

impl NodeGrads {
    /// Gradient w.r.t. a node; `None` if the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&DVector<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}
