//! The finite-difference suite run by `aila gradcheck` and the acceptance
//! tests: every differentiable op, the integrators, and whole models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_gradients, GradCheckReport, DEFAULT_STEP};
use crate::autodiff::{lstm_cell_step, lstm_sequence, LstmParams, Tape, Var, DEFAULT_LN_EPS};
use crate::data::{BatchInput, InputSpec};
use crate::error::Result;
use crate::layers::{
    arch1_integrate, arch2_integrate, layer_update, Arch1Integrator, Arch2Integrator, BaseKind, LayerNormParams,
    LayerState, TaskEmbedding,
};
use crate::model::{HeadKind, KnockoutMask, Model, ModelConfig, Variant};
use crate::params::BoundParams;
use crate::tensor::Tensor;
use crate::train::{binary_ce, mse_loss, multiclass_ce, LossKind};

/// Tolerance for single primitive ops.
pub const OP_TOL: f64 = 1e-5;
/// Tolerance for compositions (layer norm, integrators, whole models).
pub const MODEL_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteScale {
    /// Every op plus aila1/aila2 at N=2, d=4, H∈{1,2}, T=3, batch 2.
    Small,
    /// Adds baselines, token inputs, classification heads, task
    /// embeddings, deeper stacks and knockout.
    Full,
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    /// `op`, `layer` or `model`.
    pub kind: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

struct Suite {
    rng: ChaCha8Rng,
    entries: Vec<SuiteEntry>,
}

impl Suite {
    fn rand(&mut self, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape.to_vec(), 1.0, &mut self.rng)
    }

    /// Entries of magnitude at least 0.2, keeping ReLU inputs off the kink.
    fn rand_off_zero(&mut self, shape: &[usize]) -> Tensor {
        self.rand(shape).map(|v| if v.abs() < 0.2 { v.signum() * 0.2 + v } else { v })
    }

    fn check<F>(&mut self, kind: &'static str, tol: f64, label: &str, inputs: &[Tensor], f: F) -> Result<()>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let report = check_gradients(label, inputs, DEFAULT_STEP, f)?;
        self.entries.push(SuiteEntry {
            kind,
            tolerance: tol,
            report,
        });
        Ok(())
    }

    /// Weighted sum with fixed random weights, so every output entry gets a
    /// distinct upstream gradient.
    fn probe(&mut self, shape: &[usize]) -> Tensor {
        self.rand(shape)
    }
}

fn weighted(tape: &Tape, v: &Var, w: &Tensor) -> Result<Var> {
    v.mul(&tape.constant(w.clone()))?.sum()
}

pub fn run_suite(scale: SuiteScale) -> Result<Vec<SuiteEntry>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(0x9c4e),
        entries: Vec::new(),
    };
    primitive_ops(&mut s)?;
    layer_ops(&mut s)?;
    for variant in [Variant::Aila1, Variant::Aila2] {
        for heads in [1, 2] {
            let cfg = ModelConfig {
                num_layers: 2,
                hidden: 4,
                heads,
                ..ModelConfig::new(variant)
            };
            model_check(&mut s, &format!("model {variant} N=2 d=4 H={heads}"), cfg, ModelInput::Dense { t: 3 }, None)?;
        }
    }
    if scale == SuiteScale::Full {
        full_extras(&mut s)?;
    }
    Ok(s.entries)
}

fn primitive_ops(s: &mut Suite) -> Result<()> {
    let a = s.rand(&[3, 4]);
    let b = s.rand(&[4, 2]);
    // Plain matmul is held to a tighter bound than the other ops.
    s.check("op", 1e-6, "matmul", &[a, b], |_, v| v[0].matmul(&v[1])?.sum())?;

    let (x, y, w) = (s.rand(&[2, 3]), s.rand(&[2, 3]), s.probe(&[2, 3]));
    let w2 = w.clone();
    s.check("op", OP_TOL, "add", &[x.clone(), y.clone()], move |t, v| weighted(t, &v[0].add(&v[1])?, &w))?;
    let w = w2.clone();
    s.check("op", OP_TOL, "sub", &[x.clone(), y.clone()], move |t, v| weighted(t, &v[0].sub(&v[1])?, &w))?;
    let w = w2.clone();
    s.check("op", OP_TOL, "mul", &[x.clone(), y], move |t, v| weighted(t, &v[0].mul(&v[1])?, &w))?;
    let w = w2.clone();
    s.check("op", OP_TOL, "scale", &[x.clone()], move |t, v| weighted(t, &v[0].scale(-1.7)?, &w))?;

    let (x3, bias, col, w3) = (s.rand(&[2, 2, 3]), s.rand(&[3]), s.rand(&[2, 2, 1]), s.probe(&[2, 2, 3]));
    let w = w3.clone();
    s.check("op", OP_TOL, "add_bias", &[x3.clone(), bias], move |t, v| weighted(t, &v[0].add_bias(&v[1])?, &w))?;
    let w = w3.clone();
    s.check("op", OP_TOL, "scale_rows", &[x3.clone(), col], move |t, v| weighted(t, &v[0].scale_rows(&v[1])?, &w))?;

    let xr = s.rand_off_zero(&[2, 3]);
    let w = w2.clone();
    s.check("op", OP_TOL, "relu", &[xr], move |t, v| weighted(t, &v[0].relu()?, &w))?;
    let w = w2.clone();
    s.check("op", OP_TOL, "sigmoid", &[x.clone()], move |t, v| weighted(t, &v[0].sigmoid()?, &w))?;
    let w = w2.clone();
    s.check("op", OP_TOL, "tanh", &[x.clone()], move |t, v| weighted(t, &v[0].tanh()?, &w))?;
    s.check("op", OP_TOL, "sum", &[x.clone()], |_, v| v[0].sum())?;
    s.check("op", OP_TOL, "mean", &[x.clone()], |_, v| v[0].mean())?;

    let wa = s.probe(&[2, 1, 3]);
    let w = wa.clone();
    s.check("op", OP_TOL, "sum_axis", &[x3.clone()], move |t, v| weighted(t, &v[0].sum_axis(1)?, &w))?;
    s.check("op", OP_TOL, "mean_axis", &[x3.clone()], move |t, v| weighted(t, &v[0].mean_axis(1)?, &wa))?;

    for axis in [1, 2] {
        let w = w3.clone();
        s.check("op", OP_TOL, &format!("softmax axis {axis}"), &[x3.clone().map(|v| 3.0 * v)], move |t, v| {
            weighted(t, &v[0].softmax(axis)?, &w)
        })?;
    }

    let (p, q, wc) = (s.rand(&[2, 2]), s.rand(&[2, 3]), s.probe(&[2, 5]));
    s.check("op", OP_TOL, "concat", &[p, q], move |t, v| weighted(t, &Var::concat(&[&v[0], &v[1]], 1)?, &wc))?;
    let ws = s.probe(&[2, 2, 2]);
    s.check("op", OP_TOL, "slice", &[x3.clone()], move |t, v| weighted(t, &v[0].slice(2, 1..3)?, &ws))?;
    let wr = s.probe(&[4, 3]);
    s.check("op", OP_TOL, "reshape", &[x3.clone()], move |t, v| weighted(t, &v[0].reshape(&[4, 3])?, &wr))?;

    let table = s.rand(&[5, 3]);
    let we = s.probe(&[2, 3, 3]);
    s.check("op", OP_TOL, "embedding", &[table], move |t, v| {
        weighted(t, &Var::embedding(&v[0], &[1, 0, 4, 4, 2, 3], &[2, 3], Some(0))?, &we)
    })?;

    let (pred, target) = (s.rand(&[3, 1]), s.rand(&[3, 1]));
    s.check("op", OP_TOL, "mse_loss", &[pred.clone()], move |_, v| mse_loss(&v[0], &target))?;
    let labels = Tensor::matrix(3, 1, vec![1.0, 0.0, 1.0])?;
    s.check("op", OP_TOL, "binary_ce", &[pred.map(|v| 2.0 * v)], move |_, v| binary_ce(&v[0], &labels))?;
    let labels = Tensor::matrix(3, 1, vec![2.0, 0.0, 1.0])?;
    let logits = s.rand(&[3, 3]);
    s.check("op", OP_TOL, "multiclass_ce", &[logits], move |_, v| multiclass_ce(&v[0], &labels))?;

    let (gain, lb, xl, wl) = (s.rand(&[4]), s.rand(&[4]), s.rand(&[3, 4]), s.probe(&[3, 4]));
    s.check("op", MODEL_TOL, "layer_norm", &[xl, gain, lb], move |t, v| {
        weighted(t, &v[0].layer_norm(&v[1], &v[2], DEFAULT_LN_EPS)?, &wl)
    })?;

    let (d_in, h) = (2, 3);
    let lstm_inputs = vec![
        s.rand(&[2, d_in]),
        s.rand(&[2, h]),
        s.rand(&[2, h]),
        s.rand(&[d_in, 4 * h]),
        s.rand(&[h, 4 * h]),
        s.rand(&[4 * h]),
    ];
    s.check("op", OP_TOL, "lstm_cell_step", &lstm_inputs, |_, v| {
        let p = LstmParams {
            w_ih: v[3].clone(),
            w_hh: v[4].clone(),
            bias: v[5].clone(),
        };
        let (hn, cn) = lstm_cell_step(&v[0], &v[1], &v[2], &p)?;
        hn.sum()?.add(&cn.sum()?)
    })?;
    let seq_inputs = vec![lstm_inputs[3].clone(), lstm_inputs[4].clone(), lstm_inputs[5].clone(), s.rand(&[2, 3, d_in])];
    s.check("op", OP_TOL, "lstm 3 steps, sum(h_T)", &seq_inputs, |_, v| {
        let p = LstmParams {
            w_ih: v[0].clone(),
            w_hh: v[1].clone(),
            bias: v[2].clone(),
        };
        lstm_sequence(&v[3], &p)?.slice(1, 2..3)?.sum()
    })?;

    let (w1, r1) = (s.rand(&[3, 4]), s.rand(&[4, 3]));
    let (g1, b1, target) = (s.rand(&[3]), s.rand(&[3]), s.rand(&[2, 3]));
    let xin = s.rand(&[2, 3]);
    s.check("op", OP_TOL, "matmul > relu > layer_norm > mse", &[w1, r1, g1, b1], move |t, v| {
        let x = t.constant(xin.clone());
        let y = x.matmul(&v[0])?.relu()?.matmul(&v[1])?.layer_norm(&v[2], &v[3], DEFAULT_LN_EPS)?;
        mse_loss(&y, &target)
    })?;
    Ok(())
}

fn layer_ops(s: &mut Suite) -> Result<()> {
    let d = 4;
    let (ht, a, g, b, w) = (s.rand(&[2, d]), s.rand(&[2, d]), s.rand(&[d]), s.rand(&[d]), s.probe(&[2, d]));
    s.check("layer", MODEL_TOL, "layer_update", &[ht, a, g, b], move |t, v| {
        let ln = LayerNormParams {
            gain: v[2].clone(),
            bias: v[3].clone(),
            eps: DEFAULT_LN_EPS,
        };
        weighted(t, &layer_update(&v[0], &v[1], &ln)?, &w)
    })?;

    for heads in [1, 2] {
        // h̃, h1, h2, W_1, W_2, task vector, task projection, scorers.
        let dt = 3;
        let mut inputs = vec![
            s.rand(&[2, 3, d]),
            s.rand(&[2, 3, d]),
            s.rand(&[2, 3, d]),
            s.rand(&[d, d]),
            s.rand(&[d, d]),
            s.rand(&[dt]),
            s.rand(&[dt, d]),
        ];
        for _ in 0..heads {
            inputs.push(s.rand(&[4 * d / heads]).map(|v| 2.0 * v));
        }
        let w = s.probe(&[2, 3, d]);
        s.check("layer", MODEL_TOL, &format!("arch1_integrate H={heads}"), &inputs, move |t, v| {
            let mut state = LayerState::new();
            state.push(v[1].clone())?;
            state.push(v[2].clone())?;
            let integ = Arch1Integrator::new(d, vec![v[3].clone(), v[4].clone()], Some(v[6].clone()), v[7..].to_vec(), heads)?;
            let task = TaskEmbedding { t: Some(v[5].clone()) };
            weighted(t, &arch1_integrate(&v[0], &state, &integ, &task)?, &w)
        })?;

        let inputs = vec![
            s.rand(&[2, 3, d]),
            s.rand(&[2, 3, d]),
            s.rand(&[2, 3, d]),
            s.rand(&[d, d]).map(|v| 2.0 * v),
            s.rand(&[d, d]).map(|v| 2.0 * v),
            s.rand(&[d, d]),
        ];
        let w = s.probe(&[2, 3, d]);
        s.check("layer", MODEL_TOL, &format!("arch2_integrate H={heads}"), &inputs, move |t, v| {
            let mut state = LayerState::new();
            state.push(v[1].clone())?;
            state.push(v[2].clone())?;
            let integ = Arch2Integrator::new(v[3].clone(), v[4].clone(), v[5].clone(), heads)?;
            weighted(t, &arch2_integrate(&v[0], &state, &integ)?, &w)
        })?;
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum ModelInput {
    Dense { t: usize },
    Flat,
    Tokens,
}

fn model_check(s: &mut Suite, label: &str, cfg: ModelConfig, input: ModelInput, knockout: Option<usize>) -> Result<()> {
    let batch = 2;
    let (spec, x) = match input {
        ModelInput::Dense { t } => (InputSpec::Dense { dim: 2 }, BatchInput::Dense(s.rand(&[batch, t, 2]))),
        ModelInput::Flat => (InputSpec::Dense { dim: 3 }, BatchInput::Dense(s.rand(&[batch, 3]))),
        ModelInput::Tokens => (
            InputSpec::Tokens {
                vocab: 6,
                embed_dim: 3,
                pad_id: 0,
            },
            BatchInput::Tokens {
                ids: vec![0, 3, 1, 5, 2, 4, 4, 1],
                batch,
                len: 4,
            },
        ),
    };
    let loss = LossKind::for_head(cfg.head);
    let targets = match cfg.head {
        HeadKind::Regression => s.rand(&[batch, 1]),
        HeadKind::BinaryClassification => Tensor::matrix(batch, 1, vec![1.0, 0.0])?,
        HeadKind::Multiclass(k) => Tensor::matrix(batch, 1, vec![(k - 1) as f64, 0.0])?,
    };
    let model = Model::new(cfg, spec, 11)?;
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    // LayerNorm starts at gain 1, bias 0. A batch row whose units are all
    // dead then maps to an exact zero, which puts the next ReLU exactly on
    // its kink. Jitter those parameters so the check runs at a generic point.
    let values: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(name, t)| {
            let jitter = s.rand(t.shape()).map(|v| 0.5 * v);
            match name.rsplit('.').next() {
                Some("gain") | Some("bias") if name.contains(".ln.") => t.zip_map(&jitter, |a, b| a + b),
                _ => t.clone(),
            }
        })
        .collect();
    let mask = KnockoutMask::layers(knockout);
    s.check("model", MODEL_TOL, label, &values, move |tape, v| {
        let bound = BoundParams::from_vars(names.iter().cloned().zip(v.iter().cloned()));
        let pred = model.forward(tape, &bound, &x, &mask)?.prediction;
        loss.apply(&pred, &targets)
    })
}

fn full_extras(s: &mut Suite) -> Result<()> {
    let small = |v: Variant| ModelConfig {
        num_layers: 2,
        hidden: 4,
        ..ModelConfig::new(v)
    };
    for v in [Variant::Plain, Variant::ResidualSum, Variant::DenseConcat] {
        model_check(s, &format!("model {v} N=2 d=4"), small(v), ModelInput::Dense { t: 3 }, None)?;
    }
    for v in [Variant::Aila1, Variant::Aila2] {
        let deep = ModelConfig {
            num_layers: 3,
            heads: 2,
            ..small(v)
        };
        model_check(s, &format!("model {v} N=3 H=2"), deep.clone(), ModelInput::Dense { t: 2 }, None)?;
        model_check(s, &format!("model {v} N=3 knockout layer 2"), deep, ModelInput::Dense { t: 2 }, Some(1))?;
        let mlp = ModelConfig {
            base: BaseKind::Mlp,
            head: HeadKind::Multiclass(3),
            ..small(v)
        };
        model_check(s, &format!("model {v} mlp base, 3-class head"), mlp, ModelInput::Flat, None)?;
        let tok = ModelConfig {
            head: HeadKind::BinaryClassification,
            ..small(v)
        };
        model_check(s, &format!("model {v} token input, binary head"), tok, ModelInput::Tokens, None)?;
    }
    let task = ModelConfig {
        task_embedding: Some(3),
        heads: 2,
        ..small(Variant::Aila1)
    };
    model_check(s, "model aila1 with task embedding", task, ModelInput::Dense { t: 3 }, None)?;
    let narrow_keys = ModelConfig {
        d_k: Some(2),
        heads: 2,
        ..small(Variant::Aila2)
    };
    model_check(s, "model aila2 d_k=2 H=2", narrow_keys, ModelInput::Dense { t: 3 }, None)
}
