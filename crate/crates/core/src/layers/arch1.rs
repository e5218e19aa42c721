//! Architecture 1: projected predecessors scored by per-head linear scorers.
//!
//! Candidates for layer `j`, in order: `h̃_j`, the projected task vector
//! (when present), then `v_{j,i} = h_i·W_{j,i}` for every `i < j`. Each head
//! `k` owns a scorer `w^(k)` of length `n_candidates · d/H`, laid out as one
//! `d/H` segment per candidate. Candidate `c` scores
//! `⟨cand_c[k-th d/H slice], w^(k)[segment c]⟩`; a softmax over candidates
//! gives the head's weights; the head output is the weighted sum of the
//! full candidates. Heads are averaged.
//!
//! Projections use the row-vector convention: `W_{j,i}` is stored `[d, d]`
//! and applied as `h·W`.

use super::{as_rows, zeros_like, LayerState, TaskEmbedding};
use crate::autodiff::Var;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Arch1Integrator {
    proj: Vec<Var>,
    task_proj: Option<Var>,
    scorers: Vec<Var>,
    num_heads: usize,
}

impl Arch1Integrator {
    /// `proj` holds one `[d, d]` matrix per predecessor; `task_proj` is
    /// `[d_t, d]`; `scorers` holds `num_heads` vectors of length
    /// `n_candidates · d / num_heads`. With no predecessors and no task
    /// vector the integrator is inert and `scorers` may be empty.
    pub fn new(d: usize, proj: Vec<Var>, task_proj: Option<Var>, scorers: Vec<Var>, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {num_heads} heads")));
        }
        for p in &proj {
            if p.shape() != [d, d] {
                return Err(Error::dim("arch1", format!("projection {:?} must be [{d}, {d}]", p.shape())));
            }
        }
        if let Some(tp) = &task_proj {
            let s = tp.shape();
            if s.len() != 2 || s[1] != d {
                return Err(Error::dim("arch1", format!("task projection {s:?} must be [d_t, {d}]")));
            }
        }
        let candidates = 1 + usize::from(task_proj.is_some()) + proj.len();
        let active = candidates > 1;
        if active {
            let seg = candidates * d / num_heads;
            if scorers.len() != num_heads || scorers.iter().any(|w| w.shape() != [seg]) {
                return Err(Error::dim(
                    "arch1",
                    format!("expected {num_heads} scorers of length {seg} for {candidates} candidates"),
                ));
            }
        }
        Ok(Self {
            proj,
            task_proj,
            scorers,
            num_heads,
        })
    }

    pub fn num_predecessors(&self) -> usize {
        self.proj.len()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }
}

pub fn arch1_integrate(h_tilde: &Var, state: &LayerState, integ: &Arch1Integrator, task: &TaskEmbedding) -> Result<Var> {
    arch1_integrate_with_weights(h_tilde, state, integ, task).map(|(a, _)| a)
}

/// Like [`arch1_integrate`], also returning each head's candidate weights
/// as `[rows, n_candidates]`.
pub fn arch1_integrate_with_weights(
    h_tilde: &Var,
    state: &LayerState,
    integ: &Arch1Integrator,
    task: &TaskEmbedding,
) -> Result<(Var, Vec<Var>)> {
    let shape = h_tilde.shape();
    let d = *shape.last().ok_or_else(|| Error::dim("arch1", "scalar input"))?;
    if state.len() != integ.proj.len() {
        return Err(Error::Contract(format!(
            "integrator built for {} predecessors, state holds {}",
            integ.proj.len(),
            state.len()
        )));
    }
    if task.present() != integ.task_proj.is_some() {
        return Err(Error::Contract("task embedding presence does not match integrator".into()));
    }
    for h in state.outputs() {
        if h.shape() != shape {
            return Err(Error::dim("arch1", format!("candidate {:?} does not match h̃ {shape:?}", h.shape())));
        }
    }
    if state.is_empty() && !task.present() {
        return Ok((zeros_like(h_tilde, shape), Vec::new()));
    }
    let x = as_rows(h_tilde)?;
    let rows = x.shape()[0];

    let mut candidates = vec![x.clone()];
    if let (Some(t), Some(tp)) = (&task.t, &integ.task_proj) {
        let dt = t.shape().iter().product::<usize>();
        let projected = t.reshape(&[1, dt])?.matmul(tp)?.reshape(&[d])?;
        candidates.push(zeros_like(&x, vec![rows, d]).add_bias(&projected)?);
    }
    for (h, w) in state.outputs().iter().zip(&integ.proj) {
        candidates.push(as_rows(h)?.matmul(w)?);
    }

    let hs = d / integ.num_heads;
    let mut head_sum: Option<Var> = None;
    let mut weights = Vec::with_capacity(integ.num_heads);
    for (k, scorer) in integ.scorers.iter().enumerate() {
        let scores: Vec<Var> = candidates
            .iter()
            .enumerate()
            .map(|(c, cand)| {
                let seg = scorer.slice(0, c * hs..(c + 1) * hs)?.reshape(&[hs, 1])?;
                cand.slice(1, k * hs..(k + 1) * hs)?.matmul(&seg)
            })
            .collect::<Result<_>>()?;
        let score_refs: Vec<&Var> = scores.iter().collect();
        let alpha = Var::concat(&score_refs, 1)?.softmax(1)?;
        let mut head: Option<Var> = None;
        for (c, cand) in candidates.iter().enumerate() {
            let term = cand.scale_rows(&alpha.slice(1, c..c + 1)?)?;
            head = Some(match head {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let head = head.expect("at least one candidate");
        head_sum = Some(match head_sum {
            Some(acc) => acc.add(&head)?,
            None => head,
        });
        weights.push(alpha);
    }
    let a = head_sum
        .expect("at least one head")
        .scale(1.0 / integ.num_heads as f64)?
        .reshape(&shape)?;
    Ok((a, weights))
}
