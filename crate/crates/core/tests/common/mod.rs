//! Straight-line re-evaluation of the model forward pass over plain `f64`
//! slices. Nothing here goes through the tape or the library's ops; only
//! parameter tensors are read from the model.

#![allow(dead_code)]

use aila::autodiff::Tape;
use aila::data::BatchInput;
use aila::model::{KnockoutMask, Model, Variant};
use aila::Tensor;

fn param<'a>(model: &'a Model, name: &str) -> &'a [f64] {
    model
        .params()
        .get(name)
        .unwrap_or_else(|| panic!("model has no parameter {name}"))
        .data()
}

/// `v·W` for a row vector `v` of length `rows` and row-major `W[rows, cols]`.
fn vec_mat(v: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (k, &vk) in v.iter().enumerate() {
        for m in 0..cols {
            out[m] += vk * w[k * cols + m];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// LSTM over `[batch, time, d_in]` with gates packed `[i | f | g | o]`.
pub fn lstm(x: &[f64], batch: usize, time: usize, d_in: usize, w_ih: &[f64], w_hh: &[f64], bias: &[f64]) -> Vec<f64> {
    let hid = bias.len() / 4;
    let mut out = vec![0.0; batch * time * hid];
    for b in 0..batch {
        let mut h = vec![0.0; hid];
        let mut c = vec![0.0; hid];
        for t in 0..time {
            let xt = &x[(b * time + t) * d_in..(b * time + t + 1) * d_in];
            let a = vec_mat(xt, w_ih, 4 * hid);
            let r = vec_mat(&h, w_hh, 4 * hid);
            let pre: Vec<f64> = (0..4 * hid).map(|g| a[g] + r[g] + bias[g]).collect();
            for u in 0..hid {
                let i = sigmoid(pre[u]);
                let f = sigmoid(pre[hid + u]);
                let g = pre[2 * hid + u].tanh();
                let o = sigmoid(pre[3 * hid + u]);
                c[u] = f * c[u] + i * g;
                h[u] = o * c[u].tanh();
            }
            out[(b * time + t) * hid..(b * time + t + 1) * hid].copy_from_slice(&h);
        }
    }
    out
}

pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let s = (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| g * (v - mean) / s + b)
        .collect()
}

/// One position of the linear integrator. Returns `a` and per-head weights.
pub fn arch1_row(
    h_tilde: &[f64],
    preds: &[&[f64]],
    projs: &[&[f64]],
    task: Option<Vec<f64>>,
    scorers: &[&[f64]],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = h_tilde.len();
    let heads = scorers.len();
    let hs = d / heads;
    let mut cands: Vec<Vec<f64>> = vec![h_tilde.to_vec()];
    if let Some(t) = task {
        cands.push(t);
    }
    for (h, w) in preds.iter().zip(projs) {
        cands.push(vec_mat(h, w, d));
    }
    let mut a = vec![0.0; d];
    let mut weights = Vec::new();
    for (k, w) in scorers.iter().enumerate() {
        let scores: Vec<f64> = cands
            .iter()
            .enumerate()
            .map(|(c, cand)| (0..hs).map(|s| cand[k * hs + s] * w[c * hs + s]).sum())
            .collect();
        let alpha = softmax(&scores);
        for (c, cand) in cands.iter().enumerate() {
            for m in 0..d {
                a[m] += alpha[c] * cand[m] / heads as f64;
            }
        }
        weights.push(alpha);
    }
    (a, weights)
}

/// One position of the attention integrator.
pub fn arch2_row(
    h_tilde: &[f64],
    preds: &[&[f64]],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    d_k: usize,
    d_v: usize,
    heads: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let q = vec_mat(h_tilde, wq, d_k);
    let keys: Vec<Vec<f64>> = preds.iter().map(|h| vec_mat(h, wk, d_k)).collect();
    let vals: Vec<Vec<f64>> = preds.iter().map(|h| vec_mat(h, wv, d_v)).collect();
    let (kh, vh) = (d_k / heads, d_v / heads);
    let mut a = vec![0.0; d_v];
    let mut weights = Vec::new();
    for hd in 0..heads {
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| (0..kh).map(|s| q[hd * kh + s] * k[hd * kh + s]).sum::<f64>() / (kh as f64).sqrt())
            .collect();
        let alpha = softmax(&scores);
        for (i, v) in vals.iter().enumerate() {
            for s in 0..vh {
                a[hd * vh + s] += alpha[i] * v[hd * vh + s];
            }
        }
        weights.push(alpha);
    }
    (a, weights)
}

pub struct Reference {
    /// `[batch, outputs]`, row-major.
    pub prediction: Vec<f64>,
    /// `h_1..h_N`, each `[batch, time, d]` row-major.
    pub layers: Vec<Vec<f64>>,
    /// Per layer, per position, per head: the integration weights.
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Full forward pass of an LSTM-based model on dense `[batch, time, d_in]`
/// input. `knockout` holds 0-based layer indices.
pub fn forward(model: &Model, x: &Tensor, knockout: &[usize]) -> Reference {
    let cfg = model.config();
    let (b, t, d_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = cfg.hidden;
    let rows = b * t;
    let mut layers: Vec<Vec<f64>> = Vec::new();
    let mut all_weights = Vec::new();
    let mut input = x.data().to_vec();
    let mut width = d_in;
    let task: Option<Vec<f64>> = cfg.task_embedding.map(|_| {
        let tv = param(model, "task.t");
        tv.to_vec()
    });
    for j in 0..cfg.num_layers {
        let name = |s: &str| format!("layer{}.{s}", j + 1);
        let base_in = if cfg.variant == Variant::DenseConcat && j > 0 {
            let w = param(model, &name("dense.proj"));
            let mut out = Vec::with_capacity(rows * d);
            for r in 0..rows {
                let cat: Vec<f64> = layers.iter().flat_map(|h| h[r * d..(r + 1) * d].to_vec()).collect();
                out.extend(vec_mat(&cat, w, d));
            }
            width = d;
            out
        } else {
            input.clone()
        };
        let h_tilde = lstm(
            &base_in,
            b,
            t,
            width,
            param(model, &name("lstm.w_ih")),
            param(model, &name("lstm.w_hh")),
            param(model, &name("lstm.bias")),
        );
        let (gain, bias) = (param(model, &name("ln.gain")), param(model, &name("ln.bias")));
        let mut h = Vec::with_capacity(rows * d);
        let mut layer_weights = Vec::new();
        for r in 0..rows {
            let ht = &h_tilde[r * d..(r + 1) * d];
            let preds: Vec<&[f64]> = layers.iter().map(|l| &l[r * d..(r + 1) * d]).collect();
            let agg: Option<Vec<f64>> = match cfg.variant {
                Variant::Aila1 if j > 0 || task.is_some() => {
                    let projs: Vec<&[f64]> = (1..=j)
                        .map(|i| param(model, &name(&format!("arch1.proj{i}"))))
                        .collect();
                    let scorers: Vec<&[f64]> = (0..cfg.heads)
                        .map(|k| param(model, &name(&format!("arch1.scorer{k}"))))
                        .collect();
                    let tproj = task.as_ref().map(|tv| vec_mat(tv, param(model, &name("arch1.task_proj")), d));
                    let (a, w) = arch1_row(ht, &preds, &projs, tproj, &scorers);
                    layer_weights.push(w);
                    Some(a)
                }
                Variant::Aila2 if j > 0 => {
                    let (a, w) = arch2_row(
                        ht,
                        &preds,
                        param(model, &name("arch2.w_query")),
                        param(model, &name("arch2.w_key")),
                        param(model, &name("arch2.w_value")),
                        cfg.d_k(),
                        cfg.d_v(),
                        cfg.heads,
                    );
                    layer_weights.push(w);
                    Some(a)
                }
                Variant::ResidualSum if j > 0 => Some(preds[j - 1].to_vec()),
                _ => None,
            };
            let pre: Vec<f64> = match agg {
                Some(a) => ht.iter().zip(&a).map(|(u, v)| (u + v).max(0.0)).collect(),
                None => ht.iter().map(|u| u.max(0.0)).collect(),
            };
            h.extend(layer_norm_row(&pre, gain, bias, cfg.ln_eps));
        }
        if knockout.contains(&j) {
            h.iter_mut().for_each(|v| *v = 0.0);
        }
        all_weights.push(layer_weights);
        input = h.clone();
        width = d;
        layers.push(h);
    }
    let last = layers.last().unwrap();
    let (hw, hb) = (param(model, "head.weight"), param(model, "head.bias"));
    let outs = hb.len();
    let mut prediction = Vec::with_capacity(b * outs);
    for bi in 0..b {
        let r = bi * t + t - 1;
        let y = vec_mat(&last[r * d..(r + 1) * d], hw, outs);
        prediction.extend(y.iter().zip(hb).map(|(u, v)| u + v));
    }
    Reference {
        prediction,
        layers,
        weights: all_weights,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation between the model and the reference over predictions,
/// every layer output and every integration weight.
pub fn deviation(model: &Model, x: &Tensor, knockout: &[usize]) -> f64 {
    let tape = Tape::new();
    let bound = model.params().bind(&tape, false);
    let out = model
        .forward(&tape, &bound, &BatchInput::Dense(x.clone()), &KnockoutMask::layers(knockout.iter().copied()))
        .unwrap();
    let reference = forward(model, x, knockout);
    let mut worst = max_abs_diff(out.prediction.value().data(), &reference.prediction);
    for (h, r) in out.state.outputs().iter().zip(&reference.layers) {
        worst = worst.max(max_abs_diff(h.value().data(), r));
    }
    for (layer, ref_layer) in out.attention.iter().zip(&reference.weights) {
        if layer.is_empty() {
            assert!(ref_layer.is_empty());
            continue;
        }
        for (k, head) in layer.iter().enumerate() {
            let w = head.value();
            let n = w.shape()[1];
            for (row, ref_row) in ref_layer.iter().enumerate() {
                worst = worst.max(max_abs_diff(&w.data()[row * n..(row + 1) * n], &ref_row[k]));
            }
        }
    }
    worst
}
