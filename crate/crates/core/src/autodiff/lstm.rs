//! Four-gate LSTM built from tape primitives.
//!
//! Gate blocks are packed `[input | forget | candidate | output]` along the
//! trailing axis of the `4·hidden` pre-activations.

use super::Var;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LstmParams {
    /// `[d_in, 4·hidden]`
    pub w_ih: Var,
    /// `[hidden, 4·hidden]`
    pub w_hh: Var,
    /// `[4·hidden]`
    pub bias: Var,
}

impl LstmParams {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[0]
    }

    fn validate(&self) -> Result<usize> {
        let h = self.hidden();
        let (ih, hh, b) = (self.w_ih.shape(), self.w_hh.shape(), self.bias.shape());
        if ih.len() != 2 || ih[1] != 4 * h || hh != [h, 4 * h] || b != [4 * h] {
            return Err(Error::dim(
                "lstm",
                format!("inconsistent parameters: w_ih {ih:?}, w_hh {hh:?}, bias {b:?}"),
            ));
        }
        Ok(h)
    }
}

/// One step: `c_t = f⊙c_prev + i⊙g`, `h_t = o⊙tanh(c_t)`.
pub fn lstm_cell_step(x_t: &Var, h_prev: &Var, c_prev: &Var, params: &LstmParams) -> Result<(Var, Var)> {
    params.validate()?;
    let x_proj = x_t.matmul(&params.w_ih)?;
    gate_step(&x_proj, h_prev, c_prev, params)
}

/// Shared tail of a step once the input projection `x_t·W_ih` is known.
fn gate_step(x_proj: &Var, h_prev: &Var, c_prev: &Var, params: &LstmParams) -> Result<(Var, Var)> {
    let h = params.hidden();
    if h_prev.shape() != c_prev.shape() || h_prev.shape().last() != Some(&h) {
        return Err(Error::dim(
            "lstm",
            format!("state shapes h {:?} / c {:?} do not match hidden {h}", h_prev.shape(), c_prev.shape()),
        ));
    }
    let pre = x_proj.add(&h_prev.matmul(&params.w_hh)?)?.add_bias(&params.bias)?;
    let i = pre.slice(1, 0..h)?.sigmoid()?;
    let f = pre.slice(1, h..2 * h)?.sigmoid()?;
    let g = pre.slice(1, 2 * h..3 * h)?.tanh()?;
    let o = pre.slice(1, 3 * h..4 * h)?.sigmoid()?;
    let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
    let h_t = o.mul(&c.tanh()?)?;
    Ok((h_t, c))
}

/// Runs the cell over a `[batch, time, d_in]` sequence from zero state and
/// returns the full hidden sequence `[batch, time, hidden]`.
pub fn lstm_sequence(x: &Var, params: &LstmParams) -> Result<Var> {
    let hidden = params.validate()?;
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != params.input_dim() {
        return Err(Error::dim(
            "lstm",
            format!("input {shape:?} must be [batch, time, {}]", params.input_dim()),
        ));
    }
    let (b, t, d_in) = (shape[0], shape[1], shape[2]);
    let tape = x.tape().clone();
    // Project every time step at once, then slice per step.
    let proj = x.reshape(&[b * t, d_in])?.matmul(&params.w_ih)?.reshape(&[b, t, 4 * hidden])?;
    let mut h = tape.constant(crate::Tensor::zeros(vec![b, hidden]));
    let mut c = h.clone();
    let mut outputs = Vec::with_capacity(t);
    for step in 0..t {
        let x_proj = proj.slice(1, step..step + 1)?.reshape(&[b, 4 * hidden])?;
        let (h_next, c_next) = gate_step(&x_proj, &h, &c, params)?;
        outputs.push(h_next.reshape(&[b, 1, hidden])?);
        h = h_next;
        c = c_next;
    }
    let refs: Vec<&Var> = outputs.iter().collect();
    Var::concat(&refs, 1)
}
