//! The spiking student (embedding → encoder neuron → blocks of SFSA + SFFN →
//! temporal readout → LM head, unrolled over `T` steps) and the dense
//! pre-LN teacher it is distilled from.
//!
//! Student block, per time step, with `x` the binary input spikes and `r`
//! the integer residual stream (spike sums):
//!
//! ```text
//! r ← r + SFSA(x)
//! m = SN_mid(r)
//! r ← r + SFFN(m)
//! x = SN_out(r)
//! ```
//!
//! The encoder spikes start both streams. Binary spikes are summed on the
//! membrane side before the next neuron, so every sublayer still consumes
//! binary input.

use std::collections::HashMap;

use crate::attention::{causal_mask, csa_step, sfsa_step, AttnVars, CausalMask, SfsaNeurons};
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::neurons::{LifParams, NeuronMode, NeuronSpec, NeuronState, SpikingLayer, TernaryParams};
use crate::numerics::{seeded_normal, Rng, Tensor};

/// Byte-level vocabulary: 256 byte values plus a beginning-of-sequence id.
pub const BYTE_VOCAB: usize = 257;
pub const BOS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub t_steps: usize,
    pub neuron_mode: NeuronMode,
    pub lif: LifParams,
    pub ternary: TernaryParams,
    /// Threshold of the attention-score neuron.
    pub attn_thr: f64,
    /// Use the surrogate curve instead of hard thresholds in the forward pass.
    pub relaxed: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            t_steps: 2,
            neuron_mode: NeuronMode::Binary,
            lif: LifParams::default(),
            ternary: TernaryParams::default(),
            attn_thr: 1.0,
            relaxed: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return fail(format!("model.vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "model.d_model ({}) must be a positive multiple of model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.t_steps == 0 {
            return fail("model.t_steps must be >= 1".into());
        }
        if self.max_seq_len == 0 {
            return fail("model.max_seq_len must be >= 1".into());
        }
        if self.d_ff == 0 {
            return fail("model.d_ff must be >= 1".into());
        }
        if !(self.attn_thr > 0.0) {
            return fail(format!("model.attn_thr must be > 0, got {}", self.attn_thr));
        }
        if !(self.init_std >= 0.0) {
            return fail(format!("model.init_std must be >= 0, got {}", self.init_std));
        }
        self.lif.validate()?;
        self.ternary.validate()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn neuron_spec(&self) -> NeuronSpec {
        NeuronSpec {
            mode: self.neuron_mode,
            lif: self.lif,
            ternary: self.ternary,
            relaxed: self.relaxed,
            detach_reset: false,
        }
    }

    /// Ordered `key = value` pairs; floats use shortest round-trip form.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("vocab_size", self.vocab_size.to_string()),
            kv("d_model", self.d_model.to_string()),
            kv("n_layers", self.n_layers.to_string()),
            kv("n_heads", self.n_heads.to_string()),
            kv("d_ff", self.d_ff.to_string()),
            kv("max_seq_len", self.max_seq_len.to_string()),
            kv("t_steps", self.t_steps.to_string()),
            kv("neuron_mode", self.neuron_mode.as_str().to_string()),
            kv("lif_beta", self.lif.beta.to_string()),
            kv("lif_u_thr", self.lif.u_thr.to_string()),
            kv("surrogate_alpha", self.lif.surrogate_alpha.to_string()),
            kv("ternary_alpha", self.ternary.alpha.to_string()),
            kv("ternary_u_reset", self.ternary.u_reset.to_string()),
            kv("ternary_beta", self.ternary.beta.to_string()),
            kv("attn_thr", self.attn_thr.to_string()),
            kv("relaxed", self.relaxed.to_string()),
            kv("init_std", self.init_std.to_string()),
        ]
    }

    /// Applies one `key = value` setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "t_steps" => self.t_steps = parse(key, value)?,
            "neuron_mode" => self.neuron_mode = NeuronMode::parse(value)?,
            "lif_beta" => self.lif.beta = parse(key, value)?,
            "lif_u_thr" => self.lif.u_thr = parse(key, value)?,
            "surrogate_alpha" => self.lif.surrogate_alpha = parse(key, value)?,
            "ternary_alpha" => self.ternary.alpha = parse(key, value)?,
            "ternary_u_reset" => self.ternary.u_reset = parse(key, value)?,
            "ternary_beta" => self.ternary.beta = parse(key, value)?,
            "attn_thr" => self.attn_thr = parse(key, value)?,
            "relaxed" => self.relaxed = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Spiking student.
    Snn,
    /// Dense teacher.
    Ann,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Snn => "snn",
            ModelKind::Ann => "ann",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "snn" => Ok(Self::Snn),
            "ann" => Ok(Self::Ann),
            other => Err(Error::Format(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.tensors[id] = t;
            return id;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn by_id(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Parameter ids of one block.
#[derive(Clone, Debug)]
struct BlockIds {
    w_q: usize,
    b_q: usize,
    w_k: usize,
    b_k: usize,
    w_v: usize,
    b_v: usize,
    w_out: usize,
    b_out: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    /// Teacher only: (ln1.g, ln1.b, ln2.g, ln2.b).
    norms: Option<[usize; 4]>,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockIds>,
    ln_f: Option<[usize; 2]>,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn resolve(kind: ModelKind, cfg: &ModelConfig, p: &ParamStore) -> Result<Self> {
        let check = |name: &str, shape: &[usize]| -> Result<usize> {
            let id = p.id(name)?;
            if p.by_id(id).shape() != shape {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    p.by_id(id).shape(),
                    shape
                )));
            }
            Ok(id)
        };
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("blocks.{l}.{s}");
            let norms = match kind {
                ModelKind::Ann => Some([
                    check(&n("ln1.g"), &[d])?,
                    check(&n("ln1.b"), &[d])?,
                    check(&n("ln2.g"), &[d])?,
                    check(&n("ln2.b"), &[d])?,
                ]),
                ModelKind::Snn => None,
            };
            blocks.push(BlockIds {
                w_q: check(&n("attn.w_q"), &[d, d])?,
                b_q: check(&n("attn.b_q"), &[d])?,
                w_k: check(&n("attn.w_k"), &[d, d])?,
                b_k: check(&n("attn.b_k"), &[d])?,
                w_v: check(&n("attn.w_v"), &[d, d])?,
                b_v: check(&n("attn.b_v"), &[d])?,
                w_out: check(&n("attn.w_out"), &[d, d])?,
                b_out: check(&n("attn.b_out"), &[d])?,
                w1: check(&n("ffn.w1"), &[d, f])?,
                b1: check(&n("ffn.b1"), &[f])?,
                w2: check(&n("ffn.w2"), &[f, d])?,
                b2: check(&n("ffn.b2"), &[d])?,
                norms,
            });
        }
        let ln_f = match kind {
            ModelKind::Ann => Some([check("ln_f.g", &[d])?, check("ln_f.b", &[d])?]),
            ModelKind::Snn => None,
        };
        Ok(Self {
            tok_emb: check("tok_emb", &[v, d])?,
            pos_emb: check("pos_emb", &[cfg.max_seq_len, d])?,
            blocks,
            ln_f,
            head_w: check("head.w", &[d, v])?,
            head_b: check("head.b", &[v])?,
        })
    }
}

/// A configured network and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Normal(0, `init_std`) weights and embeddings, zero biases, unit norm
    /// gains.
    pub fn init(kind: ModelKind, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed(seed);
        let (d, f, v, s) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.init_std);
        let mut p = ParamStore::new();
        p.insert("tok_emb", seeded_normal(&mut rng, &[v, d], s)?);
        p.insert("pos_emb", seeded_normal(&mut rng, &[cfg.max_seq_len, d], s)?);
        for l in 0..cfg.n_layers {
            let n = |x: &str| format!("blocks.{l}.{x}");
            if kind == ModelKind::Ann {
                p.insert(n("ln1.g"), Tensor::ones(&[d]));
                p.insert(n("ln1.b"), Tensor::zeros(&[d]));
            }
            for proj in ["q", "k", "v", "out"] {
                p.insert(n(&format!("attn.w_{proj}")), seeded_normal(&mut rng, &[d, d], s)?);
                p.insert(n(&format!("attn.b_{proj}")), Tensor::zeros(&[d]));
            }
            if kind == ModelKind::Ann {
                p.insert(n("ln2.g"), Tensor::ones(&[d]));
                p.insert(n("ln2.b"), Tensor::zeros(&[d]));
            }
            p.insert(n("ffn.w1"), seeded_normal(&mut rng, &[d, f], s)?);
            p.insert(n("ffn.b1"), Tensor::zeros(&[f]));
            p.insert(n("ffn.w2"), seeded_normal(&mut rng, &[f, d], s)?);
            p.insert(n("ffn.b2"), Tensor::zeros(&[d]));
        }
        if kind == ModelKind::Ann {
            p.insert("ln_f.g", Tensor::ones(&[d]));
            p.insert("ln_f.b", Tensor::zeros(&[d]));
        }
        p.insert("head.w", seeded_normal(&mut rng, &[d, v], s)?);
        p.insert("head.b", Tensor::zeros(&[v]));
        let model = Self { kind, cfg, params: p };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        Layout::resolve(self.kind, &self.cfg, &self.params).map(|_| ())
    }

    /// Number of network parameters actually allocated (distillation
    /// adapters excluded).
    pub fn allocated_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !n.starts_with(ADAPTER_PREFIX))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Closed-form parameter count:
    /// `V·d + L_max·d + n_layers·(4d² + 2·d·d_ff + biases + norms) + d·V + V`.
    pub fn param_count_formula(kind: ModelKind, cfg: &ModelConfig) -> usize {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let biases = 4 * d + f + d;
        let norms = if kind == ModelKind::Ann { 4 * d } else { 0 };
        let final_norm = if kind == ModelKind::Ann { 2 * d } else { 0 };
        v * d + cfg.max_seq_len * d + cfg.n_layers * (4 * d * d + 2 * d * f + biases + norms) + final_norm + d * v + v
    }

    fn layout(&self) -> Result<Layout> {
        Layout::resolve(self.kind, &self.cfg, &self.params)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Validation("token sequence is empty".into()));
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::Validation(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} out of range for vocab_size {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }
}

/// Parameter-name prefix of distillation adapters living in a student store.
pub const ADAPTER_PREFIX: &str = "adapt.";

/// Graph handles for every parameter of a store.
pub struct Bound(Vec<Var>);

impl Bound {
    /// Records every parameter on `g`, as trainable leaves when `trainable`.
    pub fn new(g: &mut Graph, params: &ParamStore, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .enumerate()
            .map(|(id, t)| if trainable { g.param(id, t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Self(vars)
    }

    pub fn var(&self, id: usize) -> Var {
        self.0[id]
    }
}

/// Spiking FFN weights: `FC(x) = SN(x·W + b)`, `SFFN = FC₂ ∘ FC₁`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Neuron groups of one SFFN.
#[derive(Clone, Debug)]
pub struct SffnNeurons {
    pub fc1: SpikingLayer,
    pub fc2: SpikingLayer,
}

impl SffnNeurons {
    pub fn new(spec: NeuronSpec) -> Self {
        Self { fc1: SpikingLayer::new(spec), fc2: SpikingLayer::new(spec) }
    }
}

pub fn sffn_step(
    g: &mut Graph,
    x: Var,
    w: [Var; 4],
    neurons: &mut SffnNeurons,
) -> Result<Var> {
    let h = g.linear(x, w[0], Some(w[1]))?;
    let h = neurons.fc1.step(g, h)?;
    let o = g.linear(h, w[2], Some(w[3]))?;
    neurons.fc2.step(g, o)
}

/// One SFFN time step on plain tensors; `states` are `(fc1, fc2)` membranes.
pub fn sffn_forward(
    x_spikes: &Tensor,
    w: &FfnWeights,
    states: &(NeuronState, NeuronState),
    spec: &NeuronSpec,
) -> Result<(Tensor, (NeuronState, NeuronState))> {
    crate::attention::validate_spikes(x_spikes, spec)?;
    if x_spikes.cols() != w.w1.rows() || w.w1.cols() != w.w2.rows() {
        return Err(Error::Dimension(format!(
            "sffn shapes: input {:?}, w1 {:?}, w2 {:?}",
            x_spikes.shape(),
            w.w1.shape(),
            w.w2.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(x_spikes.clone());
    let vars = [
        g.constant(w.w1.clone()),
        g.constant(w.b1.clone()),
        g.constant(w.w2.clone()),
        g.constant(w.b2.clone()),
    ];
    let mut n = SffnNeurons::new(*spec);
    n.fc1.load_state(&mut g, &states.0);
    n.fc2.load_state(&mut g, &states.1);
    let out = sffn_step(&mut g, x, vars, &mut n)?;
    let st = (
        n.fc1.export_state(&g).expect("stepped"),
        n.fc2.export_state(&g).expect("stepped"),
    );
    Ok((g.value(out).clone(), st))
}

/// Mean over time of the pre-head representations, then one dense head.
pub fn decode_logits(steps: &[Tensor], head_w: &Tensor, head_b: &Tensor) -> Result<Tensor> {
    let first = steps
        .first()
        .ok_or_else(|| Error::Validation("decode_logits needs at least one time step".into()))?;
    let mut sum = Tensor::zeros(first.shape());
    for s in steps {
        first.check_same_shape(s)?;
        sum.add_assign(s);
    }
    let mean = sum.scale(1.0 / steps.len() as f64);
    let y = mean.matmul(head_w)?;
    let b = head_b.data();
    let c = y.cols();
    let data = y.data().iter().enumerate().map(|(i, v)| v + b[i % c]).collect();
    Tensor::new(y.shape(), data)
}

/// Spike and element counts feeding one sublayer, over all time steps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FiringCounter {
    /// Number of nonzero spikes.
    pub spikes: u64,
    /// Neurons per time step.
    pub neurons: u64,
    pub steps: u64,
}

impl FiringCounter {
    pub fn record(&mut self, spikes: &Tensor) {
        self.spikes += spikes.data().iter().filter(|&&v| v != 0.0).count() as u64;
        self.neurons = spikes.len() as u64;
        self.steps += 1;
    }

    /// Spikes per neuron per time step.
    pub fn rate(&self) -> f64 {
        if self.neurons == 0 || self.steps == 0 {
            0.0
        } else {
            self.spikes as f64 / (self.neurons * self.steps) as f64
        }
    }
}

/// Firing counters of the two sublayer inputs of one block.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerFiring {
    pub sfsa_input: FiringCounter,
    pub sffn_input: FiringCounter,
}

/// Everything one spiking forward pass records for distillation and energy
/// accounting.
#[derive(Clone, Debug)]
pub struct TraceBundle {
    pub t_steps: usize,
    pub seq_len: usize,
    /// Per layer `[T, h, L, L]` post-neuron attention spikes.
    pub attn_spikes: Vec<Tensor>,
    /// Per layer `[T, L, d]` block output spikes.
    pub hidden: Vec<Tensor>,
    /// Real embedding fed to the encoder neuron, per time step.
    pub embedding_out: Vec<Tensor>,
    pub firing: Vec<LayerFiring>,
    /// Dense-equivalent MACs per block (SFSA + SFFN).
    pub flop_counts: Vec<u64>,
}

/// Tape handles of one spiking forward pass.
pub struct SnnTape {
    pub logits: Var,
    /// Real-valued embedding, identical at every time step.
    pub emb: Var,
    /// `[layer][t][head]` attention spikes.
    pub attn: Vec<Vec<Vec<Var>>>,
    /// `[layer][t]` block output spikes.
    pub hidden: Vec<Vec<Var>>,
    pub firing: Vec<LayerFiring>,
}

struct StudentBlockNeurons {
    sfsa: SfsaNeurons,
    mid: SpikingLayer,
    ffn: SffnNeurons,
    out: SpikingLayer,
}

impl Model {
    /// Records the spiking forward pass for `tokens` on `g`.
    pub fn snn_tape(&self, g: &mut Graph, bound: &Bound, tokens: &[usize]) -> Result<SnnTape> {
        if self.kind != ModelKind::Snn {
            return Err(Error::Config("snn forward on a dense model".into()));
        }
        self.check_tokens(tokens)?;
        let lay = self.layout()?;
        let cfg = &self.cfg;
        let spec = cfg.neuron_spec();
        let l = tokens.len();
        let positions: Vec<usize> = (0..l).collect();
        let tok = g.gather(bound.var(lay.tok_emb), tokens)?;
        let pos = g.gather(bound.var(lay.pos_emb), &positions)?;
        let emb = g.add(tok, pos)?;
        let mask = g.constant(causal_mask(l, None)?.m);

        let mut encoder = SpikingLayer::new(spec);
        let mut blocks: Vec<StudentBlockNeurons> = (0..cfg.n_layers)
            .map(|_| StudentBlockNeurons {
                sfsa: SfsaNeurons::new(spec, cfg.n_heads, cfg.attn_thr),
                mid: SpikingLayer::new(spec),
                ffn: SffnNeurons::new(spec),
                out: SpikingLayer::new(spec),
            })
            .collect();
        let attn_vars: Vec<AttnVars> = lay
            .blocks
            .iter()
            .map(|b| AttnVars {
                w_q: bound.var(b.w_q),
                w_k: bound.var(b.w_k),
                w_v: bound.var(b.w_v),
                w_out: bound.var(b.w_out),
                b_q: Some(bound.var(b.b_q)),
                b_k: Some(bound.var(b.b_k)),
                b_v: Some(bound.var(b.b_v)),
                b_out: Some(bound.var(b.b_out)),
            })
            .collect();

        let mut attn = vec![Vec::with_capacity(cfg.t_steps); cfg.n_layers];
        let mut hidden = vec![Vec::with_capacity(cfg.t_steps); cfg.n_layers];
        let mut firing = vec![LayerFiring::default(); cfg.n_layers];
        let mut readout = Vec::with_capacity(cfg.t_steps);
        for _t in 0..cfg.t_steps {
            let mut x = encoder.step(g, emb)?;
            let mut r = x;
            for (li, (b, n)) in lay.blocks.iter().zip(blocks.iter_mut()).enumerate() {
                firing[li].sfsa_input.record(g.value(x));
                let step = sfsa_step(g, x, &attn_vars[li], mask, &mut n.sfsa)?;
                r = g.add(r, step.out)?;
                let m = n.mid.step(g, r)?;
                firing[li].sffn_input.record(g.value(m));
                let w = [b.w1, b.b1, b.w2, b.b2].map(|id| bound.var(id));
                let f = sffn_step(g, m, w, &mut n.ffn)?;
                r = g.add(r, f)?;
                x = n.out.step(g, r)?;
                attn[li].push(step.attn_spikes);
                hidden[li].push(x);
            }
            readout.push(x);
        }
        let pooled = g.average(&readout)?;
        let logits = g.linear(pooled, bound.var(lay.head_w), Some(bound.var(lay.head_b)))?;
        Ok(SnnTape { logits, emb, attn, hidden, firing })
    }

    /// Spiking forward pass: `[L, vocab]` logits and the full trace bundle.
    pub fn snn_forward(&self, tokens: &[usize]) -> Result<(Tensor, TraceBundle)> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params, false);
        let tape = self.snn_tape(&mut g, &bound, tokens)?;
        let stack = |vs: &[Var]| Tensor::stack(&vs.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>());
        let mut attn_spikes = Vec::with_capacity(self.cfg.n_layers);
        let mut hidden = Vec::with_capacity(self.cfg.n_layers);
        for li in 0..self.cfg.n_layers {
            let per_t: Vec<Tensor> =
                tape.attn[li].iter().map(|heads| stack(heads)).collect::<Result<_>>()?;
            attn_spikes.push(Tensor::stack(&per_t)?);
            hidden.push(stack(&tape.hidden[li])?);
        }
        let flops = crate::energy::count_flops(&self.cfg, tokens.len())?;
        let trace = TraceBundle {
            t_steps: self.cfg.t_steps,
            seq_len: tokens.len(),
            attn_spikes,
            hidden,
            embedding_out: vec![g.value(tape.emb).clone(); self.cfg.t_steps],
            firing: tape.firing,
            flop_counts: flops.blocks.iter().map(|b| b.sfsa() + b.sffn).collect(),
        };
        Ok((g.value(tape.logits).clone(), trace))
    }
}

/// Tape handles of one dense forward pass.
pub struct AnnTape {
    pub logits: Var,
    pub emb: Var,
    /// `[layer][head]` softmax attention maps.
    pub attn: Vec<Vec<Var>>,
    /// Residual stream after each block.
    pub hidden: Vec<Var>,
}

/// Plain-tensor outputs of [`Model::ann_forward`].
#[derive(Clone, Debug)]
pub struct AnnOutputs {
    pub logits: Tensor,
    pub embedding: Tensor,
    /// Per layer `[h, L, L]`.
    pub attn_maps: Vec<Tensor>,
    /// Per layer `[L, d]`.
    pub hidden: Vec<Tensor>,
}

const LN_EPS: f64 = 1e-5;

fn affine_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

impl Model {
    /// Records the dense pre-LN forward pass for `tokens` on `g`.
    pub fn ann_tape(&self, g: &mut Graph, bound: &Bound, tokens: &[usize]) -> Result<AnnTape> {
        if self.kind != ModelKind::Ann {
            return Err(Error::Config("dense forward on a spiking model".into()));
        }
        self.check_tokens(tokens)?;
        let lay = self.layout()?;
        let l = tokens.len();
        let positions: Vec<usize> = (0..l).collect();
        let tok = g.gather(bound.var(lay.tok_emb), tokens)?;
        let pos = g.gather(bound.var(lay.pos_emb), &positions)?;
        let emb = g.add(tok, pos)?;
        let mask: CausalMask = causal_mask(l, None)?;
        let mut x = emb;
        let mut attn = Vec::with_capacity(self.cfg.n_layers);
        let mut hidden = Vec::with_capacity(self.cfg.n_layers);
        for b in &lay.blocks {
            let [g1, b1, g2, b2] = b.norms.expect("dense block norms").map(|id| bound.var(id));
            let h = affine_norm(g, x, g1, b1)?;
            let vars = AttnVars {
                w_q: bound.var(b.w_q),
                w_k: bound.var(b.w_k),
                w_v: bound.var(b.w_v),
                w_out: bound.var(b.w_out),
                b_q: Some(bound.var(b.b_q)),
                b_k: Some(bound.var(b.b_k)),
                b_v: Some(bound.var(b.b_v)),
                b_out: Some(bound.var(b.b_out)),
            };
            let (a, maps) = csa_step(g, h, &vars, &mask, self.cfg.n_heads)?;
            x = g.add(x, a)?;
            let h = affine_norm(g, x, g2, b2)?;
            let h = g.linear(h, bound.var(b.w1), Some(bound.var(b.b1)))?;
            let h = g.relu(h);
            let f = g.linear(h, bound.var(b.w2), Some(bound.var(b.b2)))?;
            x = g.add(x, f)?;
            attn.push(maps);
            hidden.push(x);
        }
        let [gf, bf] = lay.ln_f.expect("final norm").map(|id| bound.var(id));
        let h = affine_norm(g, x, gf, bf)?;
        let logits = g.linear(h, bound.var(lay.head_w), Some(bound.var(lay.head_b)))?;
        Ok(AnnTape { logits, emb, attn, hidden })
    }

    pub fn ann_forward(&self, tokens: &[usize]) -> Result<AnnOutputs> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params, false);
        let tape = self.ann_tape(&mut g, &bound, tokens)?;
        let attn_maps = tape
            .attn
            .iter()
            .map(|heads| Tensor::stack(&heads.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok(AnnOutputs {
            logits: g.value(tape.logits).clone(),
            embedding: g.value(tape.emb).clone(),
            attn_maps,
            hidden: tape.hidden.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// `[L, vocab]` logits from whichever forward pass matches the model kind.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        match self.kind {
            ModelKind::Snn => Ok(self.snn_forward(tokens)?.0),
            ModelKind::Ann => Ok(self.ann_forward(tokens)?.logits),
        }
    }
}

/// Result of [`generate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<usize>,
    /// Generation steps whose context was cut from the left to fit
    /// `max_seq_len`.
    pub truncated_steps: usize,
}

/// Autoregressive continuation. Every step re-runs the (possibly truncated)
/// prefix from fresh neuron states. `temperature == 0` is greedy with ties
/// broken toward the lowest id.
pub fn generate(
    model: &Model,
    prompt: &[usize],
    n_new: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Validation("prompt must not be empty".into()));
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Validation(format!("temperature must be >= 0, got {temperature}")));
    }
    let mut tokens = prompt.to_vec();
    let mut truncated_steps = 0;
    for _ in 0..n_new {
        let start = tokens.len().saturating_sub(model.cfg.max_seq_len);
        if start > 0 {
            truncated_steps += 1;
        }
        let logits = model.logits(&tokens[start..])?;
        let last = logits.row(logits.rows() - 1);
        let next = if temperature == 0.0 {
            argmax(last)
        } else {
            let row = Tensor::new(&[1, last.len()], last.to_vec())?;
            let probs = softmax_rows(&row, temperature);
            sample(probs.data(), rng.uniform())
        };
        tokens.push(next);
    }
    Ok(Generation { tokens, truncated_steps })
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
