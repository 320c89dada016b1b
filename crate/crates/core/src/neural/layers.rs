use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::tape::{Activation, NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};

/// Uniform in `+-sqrt(1/fan_in)`.
fn init_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let bound = (1.0 / cols as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        DenseLayer {
            weight: store.add(format!("{name}.weight"), init_matrix(output_dim, input_dim, rng)),
            bias: store.add(format!("{name}.bias"), DMatrix::zeros(output_dim, 1)),
            activation,
            input_dim,
            output_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        check_len("dense input", self.input_dim, tape.value(x).len())?;
        let pre = tape.linear(store, self.weight, Some(self.bias), x);
        Ok(tape.activation(pre, self.activation))
    }
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        });
    }
    Ok(())
}

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// c  = tanh(W_c x + U_c (r * h) + b_c)
/// h' = (1 - z) * h + z * c
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_c: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_c: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_c: ParamId,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let w = |gate: &str, store: &mut ParamStore, rng: &mut _| {
            store.add(format!("{name}.w_{gate}"), init_matrix(hidden_dim, input_dim, rng))
        };
        let w_z = w("z", store, rng);
        let w_r = w("r", store, rng);
        let w_c = w("c", store, rng);
        let u = |gate: &str, store: &mut ParamStore, rng: &mut _| {
            store.add(format!("{name}.u_{gate}"), init_matrix(hidden_dim, hidden_dim, rng))
        };
        let u_z = u("z", store, rng);
        let u_r = u("r", store, rng);
        let u_c = u("c", store, rng);
        let b = |gate: &str, store: &mut ParamStore| store.add(format!("{name}.b_{gate}"), DMatrix::zeros(hidden_dim, 1));
        GruCell {
            input_dim,
            hidden_dim,
            w_z,
            w_r,
            w_c,
            u_z,
            u_r,
            u_c,
            b_z: b("z", store),
            b_r: b("r", store),
            b_c: b("c", store),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: NodeId, x: NodeId) -> Result<NodeId> {
        check_len("gru input", self.input_dim, tape.value(x).len())?;
        check_len("gru hidden", self.hidden_dim, tape.value(h).len())?;
        let gate = |tape: &mut Tape, w, u, b, hh: NodeId, act| {
            let wx = tape.linear(store, w, Some(b), x);
            let uh = tape.linear(store, u, None, hh);
            let pre = tape.add(wx, uh);
            tape.activation(pre, act)
        };
        let z = gate(tape, self.w_z, self.u_z, self.b_z, h, Activation::Sigmoid);
        let r = gate(tape, self.w_r, self.u_r, self.b_r, h, Activation::Sigmoid);
        let rh = tape.mul(r, h);
        let c = gate(tape, self.w_c, self.u_c, self.b_c, rh, Activation::Tanh);
        let keep = tape.one_minus(z);
        let old = tape.mul(keep, h);
        let new = tape.mul(z, c);
        Ok(tape.add(old, new))
    }
}

/// One GRU step outside of any recorded graph.
pub fn gru_step(cell: &GruCell, store: &ParamStore, h_prev: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    let mut tape = Tape::new();
    let h = tape.leaf(h_prev.clone());
    let xi = tape.leaf(x.clone());
    let out = cell.forward(&mut tape, store, h, xi)?;
    Ok(tape.value(out).clone())
}
