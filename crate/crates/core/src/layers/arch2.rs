//! Architecture 2: scaled dot-product attention over predecessor layers.
//!
//! `q = h̃_j·W^Q`, `k_i = h_i·W^K`, `v_i = h_i·W^V`, with one key and one
//! value projection shared across all predecessors. Per head, scores are
//! `⟨q, k_i⟩ / √(d_k/H)` on the head's slices, softmaxed over `i < j`, and
//! the head output is `Σ_i α_i v_i` on the value slice. Heads are
//! concatenated back to width `d_v`.

use super::{as_rows, zeros_like, LayerState};
use crate::autodiff::Var;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Arch2Integrator {
    w_query: Var,
    w_key: Var,
    w_value: Var,
    num_heads: usize,
}

impl Arch2Integrator {
    /// `w_query`/`w_key` are `[d, d_k]`, `w_value` is `[d, d_v]`.
    pub fn new(w_query: Var, w_key: Var, w_value: Var, num_heads: usize) -> Result<Self> {
        let (q, k, v) = (w_query.shape(), w_key.shape(), w_value.shape());
        if q.len() != 2 || q != k || v.len() != 2 || v[0] != q[0] {
            return Err(Error::dim("arch2", format!("inconsistent projections W^Q {q:?}, W^K {k:?}, W^V {v:?}")));
        }
        if num_heads == 0 || q[1] % num_heads != 0 || v[1] % num_heads != 0 {
            return Err(Error::Config(format!(
                "d_k = {} and d_v = {} must both be divisible by {num_heads} heads",
                q[1], v[1]
            )));
        }
        Ok(Self {
            w_query,
            w_key,
            w_value,
            num_heads,
        })
    }

    pub fn d_k(&self) -> usize {
        self.w_query.shape()[1]
    }

    pub fn d_v(&self) -> usize {
        self.w_value.shape()[1]
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }
}

pub fn arch2_integrate(h_tilde: &Var, state: &LayerState, integ: &Arch2Integrator) -> Result<Var> {
    arch2_integrate_with_weights(h_tilde, state, integ).map(|(a, _)| a)
}

/// Like [`arch2_integrate`], also returning per-head attention weights as
/// `[rows, n_predecessors]`.
pub fn arch2_integrate_with_weights(h_tilde: &Var, state: &LayerState, integ: &Arch2Integrator) -> Result<(Var, Vec<Var>)> {
    let shape = h_tilde.shape();
    let d = *shape.last().ok_or_else(|| Error::dim("arch2", "scalar input"))?;
    if integ.w_query.shape()[0] != d {
        return Err(Error::dim(
            "arch2",
            format!("W^Q {:?} does not accept width {d}", integ.w_query.shape()),
        ));
    }
    let d_v = integ.d_v();
    let mut out_shape = shape.clone();
    *out_shape.last_mut().unwrap() = d_v;
    if state.is_empty() {
        return Ok((zeros_like(h_tilde, out_shape), Vec::new()));
    }
    for h in state.outputs() {
        if h.shape() != shape {
            return Err(Error::dim("arch2", format!("predecessor {:?} does not match h̃ {shape:?}", h.shape())));
        }
    }

    let q = as_rows(h_tilde)?.matmul(&integ.w_query)?;
    let (keys, values): (Vec<Var>, Vec<Var>) = state
        .outputs()
        .iter()
        .map(|h| {
            let rows = as_rows(h)?;
            Ok((rows.matmul(&integ.w_key)?, rows.matmul(&integ.w_value)?))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();

    let (kh, vh) = (integ.d_k() / integ.num_heads, d_v / integ.num_heads);
    let inv_scale = 1.0 / (kh as f64).sqrt();
    let mut heads = Vec::with_capacity(integ.num_heads);
    let mut weights = Vec::with_capacity(integ.num_heads);
    for hd in 0..integ.num_heads {
        let q_h = q.slice(1, hd * kh..(hd + 1) * kh)?;
        let scores: Vec<Var> = keys
            .iter()
            .map(|k| q_h.mul(&k.slice(1, hd * kh..(hd + 1) * kh)?)?.sum_axis(1)?.scale(inv_scale))
            .collect::<Result<_>>()?;
        let score_refs: Vec<&Var> = scores.iter().collect();
        let alpha = Var::concat(&score_refs, 1)?.softmax(1)?;
        let mut acc: Option<Var> = None;
        for (i, v) in values.iter().enumerate() {
            let term = v.slice(1, hd * vh..(hd + 1) * vh)?.scale_rows(&alpha.slice(1, i..i + 1)?)?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        heads.push(acc.expect("non-empty state"));
        weights.push(alpha);
    }
    let a = if heads.len() == 1 {
        heads.pop().unwrap()
    } else {
        let refs: Vec<&Var> = heads.iter().collect();
        Var::concat(&refs, 1)?
    };
    Ok((a.reshape(&out_shape)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::Tensor;
    use rand::SeedableRng;

    fn integ(tape: &Tape, d: usize, heads: usize, seed: u64) -> Arch2Integrator {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = || tape.param(Tensor::uniform(vec![d, d], 0.8, &mut rng));
        Arch2Integrator::new(m(), m(), m(), heads).unwrap()
    }

    #[test]
    fn single_predecessor_gets_full_weight() {
        let tape = Tape::new();
        let it = integ(&tape, 3, 1, 1);
        let h = tape.constant(Tensor::from_rows(&[&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5]]));
        let h1 = tape.constant(Tensor::from_rows(&[&[0.4, -0.3, 0.9], &[2.0, 0.0, -0.5]]));
        let mut state = LayerState::new();
        state.push(h1.clone()).unwrap();
        let (a, w) = arch2_integrate_with_weights(&h, &state, &it).unwrap();
        assert!(w[0].value().data().iter().all(|&x| x == 1.0));
        let expect = h1.matmul(&it.w_value).unwrap().value();
        assert_eq!(a.value(), expect);
    }

    #[test]
    fn identical_predecessors_split_evenly() {
        let tape = Tape::new();
        let it = integ(&tape, 4, 2, 2);
        let h = tape.constant(Tensor::from_rows(&[&[0.1, 0.2, 0.3, 0.4]]));
        let h1 = tape.constant(Tensor::from_rows(&[&[1.0, -0.3, 0.9, 0.2]]));
        let mut state = LayerState::new();
        state.push(h1.clone()).unwrap();
        state.push(h1).unwrap();
        let (_, w) = arch2_integrate_with_weights(&h, &state, &it).unwrap();
        for head in w {
            assert_eq!(head.value().data(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn empty_state_is_zero() {
        let tape = Tape::new();
        let it = integ(&tape, 2, 1, 3);
        let h = tape.constant(Tensor::new(vec![1, 3, 2], vec![1.0; 6]).unwrap());
        let a = arch2_integrate(&h, &LayerState::new(), &it).unwrap();
        assert_eq!(a.shape(), vec![1, 3, 2]);
        assert!(a.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_must_divide_dims() {
        let tape = Tape::new();
        let m = || tape.param(Tensor::zeros(vec![4, 6]));
        assert!(matches!(Arch2Integrator::new(m(), m(), m(), 4), Err(Error::Config(_))));
    }
}
