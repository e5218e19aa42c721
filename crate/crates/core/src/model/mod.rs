//! N-layer networks: both AILA variants plus fixed-skip baselines behind
//! one interface.
//!
//! Parameter names follow `layer{j}.{component}.{tensor}` with 1-based `j`,
//! plus `embedding`, `task.t` and `head.{weight,bias}`. Every parameter is
//! initialized from its own name-seeded stream, so variants built with
//! the same seed share identical base, normalization and head weights.

mod checkpoint;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};

use crate::autodiff::{LstmParams, Tape, Var};
use crate::data::{BatchInput, InputSpec, TargetKind};
use crate::error::{Error, Result};
use crate::layers::{
    arch1_integrate_with_weights, arch2_integrate_with_weights, base_forward, layer_update, Arch1Integrator,
    Arch2Integrator, BaseKind, BaseLayer, LayerNormParams, LayerState, TaskEmbedding,
};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Aila1,
    Aila2,
    Plain,
    ResidualSum,
    DenseConcat,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Aila1,
        Variant::Aila2,
        Variant::Plain,
        Variant::ResidualSum,
        Variant::DenseConcat,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Aila1 => "aila1",
            Variant::Aila2 => "aila2",
            Variant::Plain => "plain",
            Variant::ResidualSum => "residual_sum",
            Variant::DenseConcat => "dense_concat",
        }
    }

    pub fn is_baseline(&self) -> bool {
        !matches!(self, Variant::Aila1 | Variant::Aila2)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Regression,
    BinaryClassification,
    Multiclass(usize),
}

impl HeadKind {
    pub fn outputs(&self) -> usize {
        match self {
            HeadKind::Regression | HeadKind::BinaryClassification => 1,
            HeadKind::Multiclass(k) => *k,
        }
    }

    pub fn matches(&self, target: TargetKind) -> bool {
        matches!(
            (self, target),
            (HeadKind::Regression, TargetKind::Regression)
                | (HeadKind::BinaryClassification, TargetKind::Binary)
        ) || matches!((self, target), (HeadKind::Multiclass(a), TargetKind::Multiclass(b)) if *a == b)
    }
}

fn default_layers() -> usize {
    4
}
fn default_hidden() -> usize {
    64
}
fn default_heads() -> usize {
    1
}
fn default_base() -> BaseKind {
    BaseKind::Lstm
}
fn default_head() -> HeadKind {
    HeadKind::Regression
}
fn default_eps() -> f64 {
    crate::autodiff::DEFAULT_LN_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Query/key width for Architecture 2; defaults to `hidden`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_k: Option<usize>,
    /// Value width for Architecture 2; must equal `hidden`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_v: Option<usize>,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_base")]
    pub base: BaseKind,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    /// Task-vector width `d_t` (Architecture 1 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_embedding: Option<usize>,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Defaults: 4 layers, width 64, one head, LSTM base, regression head.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            num_layers: default_layers(),
            hidden: default_hidden(),
            d_k: None,
            d_v: None,
            heads: default_heads(),
            base: default_base(),
            head: default_head(),
            task_embedding: None,
            ln_eps: default_eps(),
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_k.unwrap_or(self.hidden)
    }

    pub fn d_v(&self) -> usize {
        self.d_v.unwrap_or(self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.hidden == 0 || self.heads == 0 {
            return fail("hidden and heads must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return fail(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.d_v() != self.hidden {
            return fail(format!(
                "d_v = {} must equal hidden = {} for the residual update",
                self.d_v(),
                self.hidden
            ));
        }
        if self.d_k() == 0 || self.d_k() % self.heads != 0 {
            return fail(format!("d_k {} is not divisible by {} heads", self.d_k(), self.heads));
        }
        if let HeadKind::Multiclass(k) = self.head {
            if k < 2 {
                return fail("multiclass head needs at least 2 classes".into());
            }
        }
        match self.task_embedding {
            Some(0) => return fail("task_embedding width must be positive".into()),
            Some(_) if self.variant != Variant::Aila1 => {
                return fail("task_embedding is only supported by aila1".into());
            }
            _ => {}
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }
}

/// Layer indices (0-based) whose outputs are forced to zero after they are
/// computed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KnockoutMask(BTreeSet<usize>);

impl KnockoutMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn layers(indices: impl IntoIterator<Item = usize>) -> Self {
        Self(indices.into_iter().collect())
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.contains(&layer)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

pub struct ForwardOutput {
    /// `[batch, outputs]`.
    pub prediction: Var,
    /// `h_1..h_N` after the update and any knockout.
    pub state: LayerState,
    /// Per layer, per head integration weights (empty for baselines and for
    /// layers without predecessors).
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    input: InputSpec,
    params: ParamStore,
}

impl Model {
    /// Builds and initializes a model. Baselines and AILA variants go
    /// through the same constructor.
    pub fn new(config: ModelConfig, input: InputSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for spec in layout(&config, input)? {
            match spec.init {
                Init::Uniform { fan_in } => params.insert_uniform(seed, &spec.name, spec.shape, fan_in)?,
                Init::Const(c) => params.insert(spec.name, Tensor::full(spec.shape, c))?,
            }
        }
        Ok(Self { config, input, params })
    }

    /// Builds one of the fixed-skip baselines.
    pub fn baseline(variant: Variant, mut config: ModelConfig, input: InputSpec, seed: u64) -> Result<Self> {
        if !variant.is_baseline() {
            return Err(Error::Config(format!("`{variant}` is not a baseline variant")));
        }
        config.variant = variant;
        config.task_embedding = None;
        Self::new(config, input, seed)
    }

    /// Wraps existing parameters, checking them against the layout implied
    /// by `config`. The error lists every missing, unexpected or
    /// mis-shaped tensor.
    pub fn from_params(config: ModelConfig, input: InputSpec, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config, input)?;
        let mut diff = Vec::new();
        for spec in &expected {
            match params.get(&spec.name) {
                None => diff.push(format!("missing {} {:?}", spec.name, spec.shape)),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    diff.push(format!("{}: expected {:?}, found {:?}", spec.name, spec.shape, t.shape()))
                }
                _ => {}
            }
        }
        for name in params.names() {
            if !expected.iter().any(|s| s.name == name) {
                diff.push(format!("unexpected {name}"));
            }
        }
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!("parameter mismatch: {}", diff.join("; "))));
        }
        // Re-order to the canonical layout.
        let mut ordered = ParamStore::new();
        for spec in expected {
            ordered.insert(spec.name.clone(), params.get(&spec.name).unwrap().clone())?;
        }
        Ok(Self {
            config,
            input,
            params: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) {
        debug_assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Runs the network on `tape` with parameters already bound to it.
    pub fn forward(&self, tape: &Tape, bound: &BoundParams, input: &BatchInput, knockout: &KnockoutMask) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let n = cfg.num_layers;
        if let Some(bad) = knockout.iter().find(|&j| j >= n) {
            return Err(Error::Config(format!("knockout layer index {bad} out of range for {n} layers")));
        }
        let x = self.embed_input(tape, bound, input)?;
        let task = match cfg.task_embedding {
            Some(_) => TaskEmbedding { t: Some(bound.get("task.t")?) },
            None => TaskEmbedding::absent(),
        };

        let mut state = LayerState::new();
        let mut attention = Vec::with_capacity(n);
        let mut layer_input = x;
        for j in 0..n {
            let name = |s: &str| format!("layer{}.{s}", j + 1);
            let base_in = if cfg.variant == Variant::DenseConcat && j > 0 {
                let refs: Vec<&Var> = state.outputs().iter().collect();
                let cat = Var::concat(&refs, refs[0].shape().len() - 1)?;
                let mut shape = cat.shape();
                let width = *shape.last().unwrap();
                let rows = cat.reshape(&[shape.iter().product::<usize>() / width, width])?;
                let projected = rows.matmul(&bound.get(&name("dense.proj"))?)?;
                *shape.last_mut().unwrap() = cfg.hidden;
                projected.reshape(&shape)?
            } else {
                layer_input.clone()
            };
            let h_tilde = base_forward(&base_in, &self.base_layer(bound, j)?)?;
            let ln = LayerNormParams {
                gain: bound.get(&name("ln.gain"))?,
                bias: bound.get(&name("ln.bias"))?,
                eps: cfg.ln_eps,
            };

            let (aggregate, weights) = match cfg.variant {
                Variant::Aila1 if j > 0 || task.present() => {
                    let integ = self.arch1(bound, j)?;
                    let (a, w) = arch1_integrate_with_weights(&h_tilde, &state, &integ, &task)?;
                    (Some(a), w)
                }
                Variant::Aila2 if j > 0 => {
                    let integ = self.arch2(bound, j)?;
                    let (a, w) = arch2_integrate_with_weights(&h_tilde, &state, &integ)?;
                    (Some(a), w)
                }
                Variant::ResidualSum if j > 0 => (state.last().cloned(), Vec::new()),
                _ => (None, Vec::new()),
            };
            let h = match aggregate {
                Some(a) => layer_update(&h_tilde, &a, &ln)?,
                None => h_tilde.relu()?.layer_norm(&ln.gain, &ln.bias, ln.eps)?,
            };
            let h = if knockout.contains(j) {
                tape.constant(Tensor::zeros(h.shape()))
            } else {
                h
            };
            state.push(h.clone())?;
            attention.push(weights);
            layer_input = h;
        }

        let last = state.last().expect("at least one layer");
        let readout = match last.shape().as_slice() {
            [b, t, d] => last.slice(1, t - 1..*t)?.reshape(&[*b, *d])?,
            _ => last.clone(),
        };
        let prediction = readout
            .matmul(&bound.get("head.weight")?)?
            .add_bias(&bound.get("head.bias")?)?;
        Ok(ForwardOutput {
            prediction,
            state,
            attention,
        })
    }

    /// Inference on a fresh tape; parameters are recorded as constants.
    pub fn predict(&self, input: &BatchInput, knockout: &KnockoutMask) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        Ok(self.forward(&tape, &bound, input, knockout)?.prediction.value())
    }

    fn embed_input(&self, tape: &Tape, bound: &BoundParams, input: &BatchInput) -> Result<Var> {
        let expect_rank = match self.config.base {
            BaseKind::Lstm => 3,
            BaseKind::Mlp => 2,
        };
        let x = match (input, self.input) {
            (BatchInput::Dense(t), InputSpec::Dense { dim }) => {
                if t.rank() != expect_rank || t.last_dim() != dim {
                    return Err(Error::dim(
                        "model_input",
                        format!(
                            "input {:?} does not fit a {} base with {dim} features",
                            t.shape(),
                            self.config.base
                        ),
                    ));
                }
                tape.constant(t.clone())
            }
            (BatchInput::Tokens { ids, batch, len }, InputSpec::Tokens { pad_id, .. }) => {
                if self.config.base != BaseKind::Lstm {
                    return Err(Error::Config("token inputs need a sequence (lstm) base".into()));
                }
                Var::embedding(&bound.get("embedding")?, ids, &[*batch, *len], Some(pad_id))?
            }
            _ => return Err(Error::Contract("batch input kind does not match the model's input spec".into())),
        };
        Ok(x)
    }

    fn base_layer(&self, bound: &BoundParams, j: usize) -> Result<BaseLayer> {
        let p = |s: &str| bound.get(&format!("layer{}.{s}", j + 1));
        Ok(match self.config.base {
            BaseKind::Lstm => BaseLayer::Lstm(LstmParams {
                w_ih: p("lstm.w_ih")?,
                w_hh: p("lstm.w_hh")?,
                bias: p("lstm.bias")?,
            }),
            BaseKind::Mlp => BaseLayer::Mlp {
                weight: p("mlp.weight")?,
                bias: p("mlp.bias")?,
            },
        })
    }

    fn arch1(&self, bound: &BoundParams, j: usize) -> Result<Arch1Integrator> {
        let p = |s: String| bound.get(&format!("layer{}.arch1.{s}", j + 1));
        let proj = (1..=j).map(|i| p(format!("proj{i}"))).collect::<Result<Vec<_>>>()?;
        let task_proj = match self.config.task_embedding {
            Some(_) => Some(p("task_proj".into())?),
            None => None,
        };
        let scorers = (0..self.config.heads)
            .map(|k| p(format!("scorer{k}")))
            .collect::<Result<Vec<_>>>()?;
        Arch1Integrator::new(self.config.hidden, proj, task_proj, scorers, self.config.heads)
    }

    fn arch2(&self, bound: &BoundParams, j: usize) -> Result<Arch2Integrator> {
        let p = |s: &str| bound.get(&format!("layer{}.arch2.{s}", j + 1));
        Arch2Integrator::new(p("w_query")?, p("w_key")?, p("w_value")?, self.config.heads)
    }
}

/// Number of learnable scalars.
pub fn param_count(model: &Model) -> usize {
    model.param_count()
}

enum Init {
    Uniform { fan_in: usize },
    Const(f64),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Canonical parameter registry for a configuration.
fn layout(cfg: &ModelConfig, input: InputSpec) -> Result<Vec<ParamSpec>> {
    let d = cfg.hidden;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });

    let in_dim = match input {
        InputSpec::Dense { dim } => dim,
        InputSpec::Tokens { vocab, embed_dim, pad_id } => {
            if pad_id >= vocab {
                return Err(Error::Config(format!("pad id {pad_id} outside vocabulary {vocab}")));
            }
            push("embedding".into(), vec![vocab, embed_dim], Init::Uniform { fan_in: 1 });
            embed_dim
        }
    };
    if in_dim == 0 {
        return Err(Error::Config("input dimension must be positive".into()));
    }
    if let Some(dt) = cfg.task_embedding {
        push("task.t".into(), vec![dt], Init::Uniform { fan_in: dt });
    }
    for j in 0..cfg.num_layers {
        let l = j + 1;
        let base_in = if j == 0 { in_dim } else { d };
        if cfg.variant == Variant::DenseConcat && j > 0 {
            push(format!("layer{l}.dense.proj"), vec![j * d, d], Init::Uniform { fan_in: j * d });
        }
        match cfg.base {
            BaseKind::Lstm => {
                push(format!("layer{l}.lstm.w_ih"), vec![base_in, 4 * d], Init::Uniform { fan_in: d });
                push(format!("layer{l}.lstm.w_hh"), vec![d, 4 * d], Init::Uniform { fan_in: d });
                push(format!("layer{l}.lstm.bias"), vec![4 * d], Init::Uniform { fan_in: d });
            }
            BaseKind::Mlp => {
                push(format!("layer{l}.mlp.weight"), vec![base_in, d], Init::Uniform { fan_in: base_in });
                push(format!("layer{l}.mlp.bias"), vec![d], Init::Uniform { fan_in: base_in });
            }
        }
        push(format!("layer{l}.ln.gain"), vec![d], Init::Const(1.0));
        push(format!("layer{l}.ln.bias"), vec![d], Init::Const(0.0));
        match cfg.variant {
            Variant::Aila1 if j > 0 || cfg.task_embedding.is_some() => {
                for i in 1..=j {
                    push(format!("layer{l}.arch1.proj{i}"), vec![d, d], Init::Uniform { fan_in: d });
                }
                if let Some(dt) = cfg.task_embedding {
                    push(format!("layer{l}.arch1.task_proj"), vec![dt, d], Init::Uniform { fan_in: dt });
                }
                let candidates = 1 + usize::from(cfg.task_embedding.is_some()) + j;
                let seg = candidates * d / cfg.heads;
                for k in 0..cfg.heads {
                    push(format!("layer{l}.arch1.scorer{k}"), vec![seg], Init::Uniform { fan_in: seg });
                }
            }
            Variant::Aila2 if j > 0 => {
                let (dk, dv) = (cfg.d_k(), cfg.d_v());
                push(format!("layer{l}.arch2.w_query"), vec![d, dk], Init::Uniform { fan_in: d });
                push(format!("layer{l}.arch2.w_key"), vec![d, dk], Init::Uniform { fan_in: d });
                push(format!("layer{l}.arch2.w_value"), vec![d, dv], Init::Uniform { fan_in: d });
            }
            _ => {}
        }
    }
    let out = cfg.head.outputs();
    push("head.weight".into(), vec![d, out], Init::Uniform { fan_in: d });
    push("head.bias".into(), vec![out], Init::Uniform { fan_in: d });
    Ok(specs)
}
