//! Surrogate-gradient BPTT through the unrolled tape, Adam with warmup +
//! cosine decay and global-norm clipping, and the teacher / student
//! training loops.

use std::io::Write;

use crate::corpus::{windows, Corpus, Window};
use crate::distill::{
    attention_loss_g, embedding_loss_g, feature_loss_g, layer_map, AttnTargets, FeatAdapterVars,
    FeatTargets, SpadConfig,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamGrads, Var};
use crate::model::{parse, Bound, Model, ModelKind, ADAPTER_PREFIX};
use crate::neurons::{
    eligibility_trace, eligibility_trace_with_reset, surrogate_grad, LifParams,
};
use crate::numerics::{seeded_normal, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Micro-batches summed into one optimizer step.
    pub grad_accum: usize,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Tokens per training window.
    pub seq_len: usize,
    /// Upper bound on validation windows scored by [`validation_ce`].
    pub val_windows: usize,
    pub spad: Option<SpadConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 5e-4,
            warmup_ratio: 0.2,
            total_steps: 1000,
            batch_size: 8,
            grad_accum: 1,
            grad_clip: 0.7,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            seq_len: 64,
            val_windows: 32,
            spad: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return fail(format!("train.warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio));
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("train.grad_clip must be > 0, got {}", self.grad_clip));
        }
        if !(self.lr_peak >= 0.0) {
            return fail(format!("train.lr_peak must be >= 0, got {}", self.lr_peak));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.seq_len == 0 {
            return fail("train.batch_size, train.grad_accum and train.seq_len must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("train.adam_beta1 and train.adam_beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("train.adam_eps must be > 0".into());
        }
        if let Some(s) = &self.spad {
            s.validate()?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("lr_peak", self.lr_peak.to_string()),
            kv("warmup_ratio", self.warmup_ratio.to_string()),
            kv("total_steps", self.total_steps.to_string()),
            kv("batch_size", self.batch_size.to_string()),
            kv("grad_accum", self.grad_accum.to_string()),
            kv("grad_clip", self.grad_clip.to_string()),
            kv("adam_beta1", self.adam_beta1.to_string()),
            kv("adam_beta2", self.adam_beta2.to_string()),
            kv("adam_eps", self.adam_eps.to_string()),
            kv("seed", self.seed.to_string()),
            kv("seq_len", self.seq_len.to_string()),
            kv("val_windows", self.val_windows.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr_peak" => self.lr_peak = parse(key, value)?,
            "warmup_ratio" => self.warmup_ratio = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "grad_accum" => self.grad_accum = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "val_windows" => self.val_windows = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown train key `{key}`"))),
        }
        Ok(())
    }
}

/// Linear ramp `0 → lr_peak` over the first `round(warmup_ratio·total)`
/// steps, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps;
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    let warm = (cfg.warmup_ratio * total as f64).round() as usize;
    if step < warm {
        return cfg.lr_peak * step as f64 / warm as f64;
    }
    if total == warm {
        return cfg.lr_peak;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients by `threshold / ‖g‖` when the global L2 norm
/// exceeds `threshold`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("clip threshold must be > 0, got {threshold}")));
    }
    let norm = global_norm(grads);
    if norm > threshold {
        let c = threshold / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    Ok(norm)
}

/// First and second Adam moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        let ps: Vec<&Tensor> = model.params.iter().map(|(_, t)| t).collect();
        Self::zeros_like(&ps)
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        p.check_same_shape(&grads[i])?;
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *pj -= lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Reverse sweep over the recorded unroll: gradients of `loss` for every
/// parameter of a store with `n_params` entries (zeros where unused).
pub fn bptt_backward(g: &Graph, loss: Var, n_params: usize, shapes: &[&[usize]]) -> Result<Vec<Tensor>> {
    let ParamGrads { entries } = g.backward(loss)?;
    let mut out: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    if out.len() != n_params {
        return Err(Error::Internal("parameter shape list does not match store".into()));
    }
    for (id, t) in entries {
        let slot = out.get_mut(id).ok_or_else(|| Error::Internal(format!("gradient for unknown parameter {id}")))?;
        slot.add_assign(&t);
    }
    Ok(out)
}

/// Gradient of `Σ_t Σ_b c_t ⊙ S_t` for one LIF layer `U_t = X_t·W + βU_{t−1} − U_thr·S_{t−1}`
/// via eligibility traces: `∂L/∂W = Σ_t e_tᵀ·δ_t` with `δ_t = c_t ⊙ σ'(U_t − U_thr)`.
/// `inputs[t]`: `[B, n]` with `n = 1` when `keep_reset` (the reset path then
/// enters the trace decay); any width when the reset is detached.
pub fn eligibility_weight_grad(
    w: &Tensor,
    inputs: &[Tensor],
    upstream: &[Tensor],
    p: &LifParams,
    keep_reset: bool,
) -> Result<Tensor> {
    if inputs.len() != upstream.len() || inputs.is_empty() {
        return Err(Error::Dimension("eligibility: inputs and upstream gradients differ in length".into()));
    }
    // Forward pass recording membranes.
    let mut u_prev: Option<Tensor> = None;
    let mut s_prev: Option<Tensor> = None;
    let mut slopes = Vec::with_capacity(inputs.len());
    for x in inputs {
        let mut u = x.matmul(w)?;
        if let (Some(up), Some(sp)) = (&u_prev, &s_prev) {
            u = u.add(&up.scale(p.beta))?.sub(&sp.scale(p.u_thr))?;
        }
        let s = u.map(|v| if v >= p.u_thr { 1.0 } else { 0.0 });
        slopes.push(surrogate_grad(&u.map(|v| v - p.u_thr), p.surrogate_alpha));
        u_prev = Some(u);
        s_prev = Some(s);
    }
    let mut grad = Tensor::zeros(w.shape());
    if keep_reset {
        if w.rows() != 1 {
            return Err(Error::Dimension("reset-aware traces need a single input per neuron".into()));
        }
        // With one input the trace of W[0, j] lives in column j.
        let per_neuron: Vec<Tensor> = inputs
            .iter()
            .map(|x| x.matmul(&Tensor::ones(&[1, w.cols()])))
            .collect::<Result<_>>()?;
        let traces = eligibility_trace_with_reset(&per_neuron, &slopes, p)?;
        for (t, e) in traces.iter().enumerate() {
            let delta = upstream[t].mul(&slopes[t])?;
            let contrib = e.mul(&delta)?;
            for b in 0..contrib.rows() {
                for j in 0..contrib.cols() {
                    let v = grad.get2(0, j) + contrib.get2(b, j);
                    grad.set2(0, j, v);
                }
            }
        }
    } else {
        let traces = eligibility_trace(inputs, p.beta)?;
        for (t, e) in traces.iter().enumerate() {
            let delta = upstream[t].mul(&slopes[t])?;
            grad.add_assign(&e.matmul_at(&delta)?);
        }
    }
    Ok(grad)
}

/// Parameter ids of the distillation adapters inside a student store.
#[derive(Clone, Debug)]
pub struct AdapterIds {
    pub emb: Option<usize>,
    /// Per student layer `(projection, gain, bias)`.
    pub feat: Vec<(Option<usize>, usize, usize)>,
}

/// Adds any missing adapters (`adapt.*`) needed to compare `student` with
/// `teacher`; projections start at Normal(0, 1/√d_S).
pub fn ensure_adapters(student: &mut Model, teacher: &Model, seed: u64) -> Result<AdapterIds> {
    let (ds, dt) = (student.cfg.d_model, teacher.cfg.d_model);
    let mut rng = Rng::seed(seed ^ 0xada9_7e55);
    let std = 1.0 / (ds as f64).sqrt();
    let p = &mut student.params;
    let mut ensure = |name: String, make: &mut dyn FnMut() -> Result<Tensor>| -> Result<usize> {
        if p.contains(&name) {
            p.id(&name)
        } else {
            Ok(p.insert(name, make()?))
        }
    };
    let emb = if ds != dt {
        Some(ensure(format!("{ADAPTER_PREFIX}emb.w"), &mut || seeded_normal(&mut rng, &[ds, dt], std))?)
    } else {
        None
    };
    let mut feat = Vec::new();
    for l in 0..student.cfg.n_layers {
        let w = if ds != dt {
            Some(ensure(format!("{ADAPTER_PREFIX}feat.{l}.w"), &mut || seeded_normal(&mut rng, &[ds, dt], std))?)
        } else {
            None
        };
        let g = ensure(format!("{ADAPTER_PREFIX}feat.{l}.g"), &mut || Ok(Tensor::ones(&[dt])))?;
        let b = ensure(format!("{ADAPTER_PREFIX}feat.{l}.b"), &mut || Ok(Tensor::zeros(&[dt])))?;
        feat.push((w, g, b));
    }
    Ok(AdapterIds { emb, feat })
}

/// Checks a teacher can supervise `student` under SpAD.
pub fn check_teacher(student: &Model, teacher: &Model, seq_len: usize) -> Result<Vec<usize>> {
    if teacher.kind != ModelKind::Ann {
        return Err(Error::Config("teacher checkpoint must be a dense model".into()));
    }
    if student.kind != ModelKind::Snn {
        return Err(Error::Config("distillation needs a spiking student".into()));
    }
    if teacher.cfg.vocab_size != student.cfg.vocab_size {
        return Err(Error::Config(format!(
            "teacher vocab_size {} differs from student {}",
            teacher.cfg.vocab_size, student.cfg.vocab_size
        )));
    }
    if teacher.cfg.max_seq_len < seq_len {
        return Err(Error::Config(format!(
            "teacher max_seq_len {} is shorter than seq_len {seq_len}",
            teacher.cfg.max_seq_len
        )));
    }
    let (hs, ht) = (student.cfg.n_heads, teacher.cfg.n_heads);
    if ht < hs || ht % hs != 0 {
        return Err(Error::Config(format!("teacher n_heads {ht} is not a multiple of student n_heads {hs}")));
    }
    if student.cfg.n_layers == 0 {
        return Ok(Vec::new());
    }
    layer_map(student.cfg.n_layers, teacher.cfg.n_layers)
}

/// Frozen teacher plus everything needed to score a student against it.
pub struct Supervisor<'a> {
    pub teacher: &'a Model,
    pub spad: SpadConfig,
    pub layer_map: Vec<usize>,
    pub adapters: AdapterIds,
}

/// Per-batch loss values: λ-weighted components (emb, attn, feat, soft,
/// hard), their sum, and the mean block-input firing rate of spiking models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub weighted: [f64; 5],
    pub firing_rate: Option<f64>,
}

/// Records the mean loss over `batch` on `g` with parameters bound from
/// `model` and returns its node.
pub fn batch_loss(
    g: &mut Graph,
    model: &Model,
    bound: &Bound,
    sup: Option<&Supervisor>,
    batch: &[Window],
) -> Result<(Var, StepLoss)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut totals = Vec::with_capacity(batch.len());
    let mut weighted = [0.0; 5];
    let mut rate_sum = 0.0;
    let mut rate_n = 0usize;
    for w in batch {
        let (logits, parts): (Var, Vec<(usize, f64, Var)>) = match model.kind {
            ModelKind::Ann => {
                let tape = model.ann_tape(g, bound, &w.inputs)?;
                let ce = g.cross_entropy(tape.logits, &w.targets)?;
                (tape.logits, vec![(4, 1.0, ce)])
            }
            ModelKind::Snn => {
                let tape = model.snn_tape(g, bound, &w.inputs)?;
                for f in &tape.firing {
                    rate_sum += f.sfsa_input.rate();
                    rate_n += 1;
                }
                match sup {
                    None => {
                        let ce = g.cross_entropy(tape.logits, &w.targets)?;
                        (tape.logits, vec![(4, 1.0, ce)])
                    }
                    Some(s) => (tape.logits, spad_terms(g, model, bound, s, &tape, w)?),
                }
            }
        };
        let _ = logits;
        let mut terms = Vec::with_capacity(parts.len());
        for (i, lambda, v) in parts {
            weighted[i] += lambda * g.value(v).item() / batch.len() as f64;
            terms.push((lambda, v));
        }
        totals.push(g.weighted_sum(&terms)?);
    }
    let loss = g.average(&totals)?;
    let total = g.value(loss).item();
    let firing_rate = (rate_n > 0).then(|| rate_sum / rate_n as f64);
    Ok((loss, StepLoss { total, weighted, firing_rate }))
}

fn spad_terms(
    g: &mut Graph,
    student: &Model,
    bound: &Bound,
    sup: &Supervisor,
    tape: &crate::model::SnnTape,
    w: &Window,
) -> Result<Vec<(usize, f64, Var)>> {
    let lam = sup.spad.lambda;
    let t_out = sup.teacher.ann_forward(&w.inputs)?;
    let cfg = &student.cfg;
    let attn_p = LifParams { u_thr: cfg.attn_thr, ..cfg.lif };
    let mut parts = Vec::with_capacity(5);
    if lam[0] > 0.0 {
        let proj = sup.adapters.emb.map(|id| bound.var(id));
        let e = embedding_loss_g(g, &t_out.embedding, &[tape.emb], proj)?;
        parts.push((0, lam[0], e));
    }
    if lam[1] > 0.0 && cfg.n_layers > 0 {
        let mut per_layer = Vec::with_capacity(cfg.n_layers);
        for (l, &tl) in sup.layer_map.iter().enumerate() {
            let targets = AttnTargets::new(&t_out.attn_maps[tl], cfg.n_heads, cfg.t_steps, &attn_p)?;
            per_layer.push(attention_loss_g(g, &targets, &tape.attn[l], sup.spad.gamma_attn)?);
        }
        let a = g.average(&per_layer)?;
        parts.push((1, lam[1], a));
    }
    if lam[2] > 0.0 && cfg.n_layers > 0 {
        let mut per_layer = Vec::with_capacity(cfg.n_layers);
        for (l, &tl) in sup.layer_map.iter().enumerate() {
            let targets = FeatTargets::new(&t_out.hidden[tl], cfg.t_steps, &cfg.lif);
            let (pw, pg, pb) = sup.adapters.feat[l];
            let vars = FeatAdapterVars {
                w: pw.map(|id| bound.var(id)),
                gain: bound.var(pg),
                bias: bound.var(pb),
            };
            per_layer.push(feature_loss_g(g, &targets, &tape.hidden[l], vars, sup.spad.gamma_feat)?);
        }
        let f = g.average(&per_layer)?;
        parts.push((2, lam[2], f));
    }
    if lam[3] > 0.0 {
        let s = g.soft_kl(&t_out.logits, tape.logits, sup.spad.tau)?;
        parts.push((3, lam[3], s));
    }
    if lam[4] > 0.0 {
        let h = g.cross_entropy(tape.logits, &w.targets)?;
        parts.push((4, lam[4], h));
    }
    if parts.is_empty() {
        return Err(Error::Config("all distillation weights are zero".into()));
    }
    Ok(parts)
}

/// Mean next-token cross-entropy over up to `max_windows` validation windows.
pub fn validation_ce(model: &Model, tokens: &[usize], seq_len: usize, max_windows: usize) -> Result<f64> {
    let ws = windows(tokens, seq_len);
    if ws.is_empty() {
        return Err(Error::Validation(format!(
            "validation split of {} tokens is too short for windows of {seq_len}",
            tokens.len()
        )));
    }
    let n = ws.len().min(max_windows.max(1));
    let mut sum = 0.0;
    for w in &ws[..n] {
        sum += crate::distill::loss_hard(&model.logits(&w.inputs)?, &w.targets)?;
    }
    Ok(sum / n as f64)
}

/// Fraction of next-token positions where the greedy prediction is correct.
pub fn next_token_accuracy(model: &Model, tokens: &[usize], seq_len: usize, max_windows: usize) -> Result<f64> {
    let ws = windows(tokens, seq_len);
    if ws.is_empty() {
        return Err(Error::Validation("too few tokens for one window".into()));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for w in ws.iter().take(max_windows.max(1)) {
        let logits = model.logits(&w.inputs)?;
        for (r, &t) in w.targets.iter().enumerate() {
            hit += (crate::model::argmax(logits.row(r)) == t) as usize;
            n += 1;
        }
    }
    Ok(hit as f64 / n as f64)
}

pub const METRICS_MAGIC: &str = "# bispik-metrics 1";
pub const METRICS_HEADER: &str = "step\tlr\ttotal\temb\tattn\tfeat\tsoft\thard\tfiring_rate";

fn metrics_line(step: usize, lr: f64, l: &StepLoss) -> String {
    let rate = l.firing_rate.map_or_else(|| "NA".to_string(), |r| r.to_string());
    let w = l.weighted;
    format!("{step}\t{lr}\t{}\t{}\t{}\t{}\t{}\t{}\t{rate}", l.total, w[0], w[1], w[2], w[3], w[4])
}

/// What a training run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub adam: AdamState,
    /// Per optimizer step.
    pub history: Vec<StepLoss>,
}

/// Trains `model` on next-token windows of `corpus.train`. With a teacher
/// and `cfg.spad`, a spiking student is optimized on the λ-weighted SpAD
/// objective; otherwise on cross-entropy alone. One metrics line per step
/// goes to `metrics`.
pub fn train_loop(
    cfg: &TrainConfig,
    mut model: Model,
    corpus: &Corpus,
    teacher: Option<&Model>,
    adam: Option<AdamState>,
    metrics: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if cfg.seq_len > model.cfg.max_seq_len {
        return Err(Error::Config(format!(
            "train.seq_len {} exceeds model.max_seq_len {}",
            cfg.seq_len, model.cfg.max_seq_len
        )));
    }
    let supervisor = match (teacher, cfg.spad) {
        (Some(t), Some(spad)) => {
            let map = check_teacher(&model, t, cfg.seq_len)?;
            let adapters = ensure_adapters(&mut model, t, cfg.seed)?;
            Some(Supervisor { teacher: t, spad, layer_map: map, adapters })
        }
        (Some(_), None) => return Err(Error::Config("a teacher was given without spad settings".into())),
        (None, Some(_)) => return Err(Error::Config("spad settings need a teacher".into())),
        (None, None) => None,
    };
    let train = windows(&corpus.train, cfg.seq_len);
    if train.is_empty() {
        return Err(Error::Validation(format!(
            "training split of {} tokens is too short for windows of {}",
            corpus.train.len(),
            cfg.seq_len
        )));
    }
    let mut adam = match adam {
        Some(a) if a.m.len() == model.params.len() => a,
        Some(_) => return Err(Error::Format("optimizer state does not match the parameters".into())),
        None => AdamState::for_model(&model),
    };
    let io = |e| Error::io("metrics", e);
    writeln!(metrics, "{METRICS_MAGIC}").map_err(io)?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(io)?;

    let mut rng = Rng::seed(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let shapes: Vec<Vec<usize>> = model.params.iter().map(|(_, t)| t.shape().to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let mut grads: Vec<Tensor> = shape_refs.iter().map(|s| Tensor::zeros(s)).collect();
        let mut step_loss = StepLoss { total: 0.0, weighted: [0.0; 5], firing_rate: None };
        let mut rate_acc = 0.0;
        for _ in 0..cfg.grad_accum {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                batch.push(train[order[cursor]].clone());
                cursor += 1;
            }
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &model.params, true);
            let (loss, l) = batch_loss(&mut g, &model, &bound, supervisor.as_ref(), &batch)?;
            let gs = bptt_backward(&g, loss, model.params.len(), &shape_refs)?;
            let k = 1.0 / cfg.grad_accum as f64;
            for (acc, g1) in grads.iter_mut().zip(&gs) {
                acc.add_assign(&g1.scale(k));
            }
            step_loss.total += l.total * k;
            for i in 0..5 {
                step_loss.weighted[i] += l.weighted[i] * k;
            }
            if let Some(r) = l.firing_rate {
                rate_acc += r * k;
                step_loss.firing_rate = Some(rate_acc);
            }
        }
        if !step_loss.total.is_finite() {
            return Err(Error::Evaluation(format!("non-finite loss at step {step}")));
        }
        clip_gradients(&mut grads, cfg.grad_clip)?;
        let lr = lr_schedule(step, cfg);
        adam_step(model.params.tensors_mut(), &grads, &mut adam, lr, cfg)?;
        writeln!(metrics, "{}", metrics_line(step, lr, &step_loss)).map_err(io)?;
        history.push(step_loss);
    }
    Ok(TrainOutcome { model, adam, history })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= w {
            sum -= xs[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// True when the `ma`-step moving average at the end of every `span`-step
/// window (starting once a full average exists) is below its start.
pub fn moving_average_decreases(xs: &[f64], ma: usize, span: usize) -> bool {
    let avg = moving_average(xs, ma);
    let first = ma.saturating_sub(1);
    (first..avg.len()).filter(|&s| s + span < avg.len()).all(|s| avg[s + span] < avg[s])
}
