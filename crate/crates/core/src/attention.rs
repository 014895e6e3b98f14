//! Softmax-free spiking attention (SFSA), its Hadamard causal mask, and the
//! softmax causal self-attention (CSA) used by the dense teacher.
//!
//! One SFSA time step:
//!
//! 1. `q, k, v = x·W + b` (real currents from binary spikes)
//! 2. `spike_q/k/v = SN(q/k/v)`
//! 3. per head `scores = spike_q · spike_kᵀ`, integers in `[0, d_head]`
//! 4. `spike_attn = SN_attn(mask ⊙ scores)`
//! 5. `spike_attn_out = SN(spike_attn · spike_v)` (again integer currents)
//! 6. `fp_out = spike_attn_out · W_out + b_out`
//! 7. `out = SN(fp_out)`
//!
//! No scaling and no softmax appear; the attention neuron's threshold plays
//! the normalizing role.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::neurons::{NeuronMode, NeuronSpec, NeuronState, SpikingLayer};
use crate::numerics::{seeded_normal, Rng, Tensor};

/// Binary `[L, L]` mask: `m[i][j] = 1` iff `j ≤ i` and key `j` is not padding.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalMask {
    pub m: Tensor,
}

impl CausalMask {
    pub fn seq_len(&self) -> usize {
        self.m.rows()
    }
}

pub fn causal_mask(seq_len: usize, pad_mask: Option<&[f64]>) -> Result<CausalMask> {
    if seq_len == 0 {
        return Err(Error::Validation("causal mask needs seq_len >= 1".into()));
    }
    if let Some(pad) = pad_mask {
        if pad.len() != seq_len {
            return Err(Error::Dimension(format!(
                "pad mask of length {} for sequence of {seq_len}",
                pad.len()
            )));
        }
        if let Some(bad) = pad.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!("pad mask must be binary, found {bad}")));
        }
    }
    let mut m = Tensor::zeros(&[seq_len, seq_len]);
    for i in 0..seq_len {
        for j in 0..=i {
            let keep = pad_mask.map_or(1.0, |p| p[j]);
            m.set2(i, j, keep);
        }
    }
    Ok(CausalMask { m })
}

/// Query/key/value/output projections, each `[d_model, d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
    pub b_q: Option<Tensor>,
    pub b_k: Option<Tensor>,
    pub b_v: Option<Tensor>,
    pub b_out: Option<Tensor>,
}

impl AttnWeights {
    /// Normal(0, `std`) projections and zero biases.
    pub fn init(rng: &mut Rng, d_model: usize, std: f64) -> Result<Self> {
        let mut w = || seeded_normal(rng, &[d_model, d_model], std);
        let (w_q, w_k, w_v, w_out) = (w()?, w()?, w()?, w()?);
        let b = || Some(Tensor::zeros(&[d_model]));
        Ok(Self { w_q, w_k, w_v, w_out, b_q: b(), b_k: b(), b_v: b(), b_out: b() })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    fn validate(&self) -> Result<()> {
        let d = self.d_model();
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_out", &self.w_out)] {
            if w.shape() != [d, d] {
                return Err(Error::Dimension(format!("{name} must be [{d}, {d}], got {:?}", w.shape())));
            }
        }
        for b in [&self.b_q, &self.b_k, &self.b_v, &self.b_out].into_iter().flatten() {
            if b.len() != d {
                return Err(Error::Dimension(format!("bias of length {} for width {d}", b.len())));
            }
        }
        Ok(())
    }
}

/// Projection weights as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
    pub b_q: Option<Var>,
    pub b_k: Option<Var>,
    pub b_v: Option<Var>,
    pub b_out: Option<Var>,
}

impl AttnVars {
    pub fn constants(g: &mut Graph, w: &AttnWeights) -> Self {
        let mut opt = |b: &Option<Tensor>| b.as_ref().map(|t| g.constant(t.clone()));
        let (b_q, b_k, b_v, b_out) = (opt(&w.b_q), opt(&w.b_k), opt(&w.b_v), opt(&w.b_out));
        Self {
            w_q: g.constant(w.w_q.clone()),
            w_k: g.constant(w.w_k.clone()),
            w_v: g.constant(w.w_v.clone()),
            w_out: g.constant(w.w_out.clone()),
            b_q,
            b_k,
            b_v,
            b_out,
        }
    }
}

/// The six neuron groups of one SFSA module (one attention neuron per head).
#[derive(Clone, Debug)]
pub struct SfsaNeurons {
    q: SpikingLayer,
    k: SpikingLayer,
    v: SpikingLayer,
    attn: Vec<SpikingLayer>,
    attn_out: SpikingLayer,
    out: SpikingLayer,
}

impl SfsaNeurons {
    pub fn new(spec: NeuronSpec, n_heads: usize, attn_thr: f64) -> Self {
        Self {
            q: SpikingLayer::new(spec),
            k: SpikingLayer::new(spec),
            v: SpikingLayer::new(spec),
            attn: (0..n_heads).map(|_| SpikingLayer::with_threshold(spec, attn_thr)).collect(),
            attn_out: SpikingLayer::new(spec),
            out: SpikingLayer::new(spec),
        }
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut SpikingLayer> {
        [&mut self.q, &mut self.k, &mut self.v]
            .into_iter()
            .chain(self.attn.iter_mut())
            .chain([&mut self.attn_out, &mut self.out])
    }

    fn load(&mut self, g: &mut Graph, state: &SfsaState) {
        for (layer, st) in self.all_mut().zip(state.groups()) {
            layer.load_state(g, st);
        }
    }

    fn export(&self, g: &Graph, like: &SfsaState) -> SfsaState {
        let layers = [&self.q, &self.k, &self.v]
            .into_iter()
            .chain(self.attn.iter())
            .chain([&self.attn_out, &self.out]);
        let mut groups: Vec<NeuronState> = layers
            .zip(like.groups())
            .map(|(l, prev)| l.export_state(g).unwrap_or_else(|| prev.clone()))
            .collect();
        let out = groups.pop().expect("out");
        let attn_out = groups.pop().expect("attn_out");
        let attn = groups.split_off(3);
        let v = groups.pop().expect("v");
        let k = groups.pop().expect("k");
        let q = groups.pop().expect("q");
        SfsaState { q, k, v, attn, attn_out, out }
    }
}

/// Plain-tensor membrane state of every SFSA neuron group.
#[derive(Clone, Debug, PartialEq)]
pub struct SfsaState {
    pub q: NeuronState,
    pub k: NeuronState,
    pub v: NeuronState,
    pub attn: Vec<NeuronState>,
    pub attn_out: NeuronState,
    pub out: NeuronState,
}

impl SfsaState {
    pub fn zeros(seq_len: usize, d_model: usize, n_heads: usize) -> Self {
        let wide = || NeuronState::zeros(&[seq_len, d_model]);
        Self {
            q: wide(),
            k: wide(),
            v: wide(),
            attn: (0..n_heads).map(|_| NeuronState::zeros(&[seq_len, seq_len])).collect(),
            attn_out: wide(),
            out: wide(),
        }
    }

    fn groups(&self) -> impl Iterator<Item = &NeuronState> {
        [&self.q, &self.k, &self.v]
            .into_iter()
            .chain(self.attn.iter())
            .chain([&self.attn_out, &self.out])
    }
}

/// Tape handles of one SFSA step.
#[derive(Clone, Debug)]
pub struct SfsaStep {
    pub out: Var,
    /// Post-neuron attention spikes, one `[L, L]` node per head.
    pub attn_spikes: Vec<Var>,
    /// Masked integer scores fed to the attention neuron, per head.
    pub scores: Vec<Var>,
    /// Integer `spike_attn · spike_v` currents, heads concatenated.
    pub attn_values: Var,
}

/// Records one SFSA time step on `g`.
pub fn sfsa_step(
    g: &mut Graph,
    x: Var,
    w: &AttnVars,
    mask: Var,
    neurons: &mut SfsaNeurons,
) -> Result<SfsaStep> {
    let n_heads = neurons.attn.len();
    let d = g.value(w.w_q).cols();
    if d % n_heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    let d_head = d / n_heads;
    let q = g.linear(x, w.w_q, w.b_q)?;
    let k = g.linear(x, w.w_k, w.b_k)?;
    let v = g.linear(x, w.w_v, w.b_v)?;
    let sq = neurons.q.step(g, q)?;
    let sk = neurons.k.step(g, k)?;
    let sv = neurons.v.step(g, v)?;
    let mut attn_spikes = Vec::with_capacity(n_heads);
    let mut scores = Vec::with_capacity(n_heads);
    let mut values = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(sq, h * d_head, d_head)?;
        let kh = g.slice_cols(sk, h * d_head, d_head)?;
        let vh = g.slice_cols(sv, h * d_head, d_head)?;
        let raw = g.matmul_bt(qh, kh)?;
        let masked = g.mul(raw, mask)?;
        let sa = neurons.attn[h].step(g, masked)?;
        values.push(g.matmul(sa, vh)?);
        attn_spikes.push(sa);
        scores.push(masked);
    }
    let attn_values = if n_heads == 1 { values[0] } else { g.concat_cols(&values)? };
    let s_ao = neurons.attn_out.step(g, attn_values)?;
    let fp = g.linear(s_ao, w.w_out, w.b_out)?;
    let out = neurons.out.step(g, fp)?;
    Ok(SfsaStep { out, attn_spikes, scores, attn_values })
}

/// Plain-tensor result of [`sfsa_forward`].
#[derive(Clone, Debug)]
pub struct SfsaOutput {
    pub out_spikes: Tensor,
    /// `[h, L, L]` post-neuron attention spikes.
    pub attn_spikes: Tensor,
    /// `[h, L, L]` masked integer scores.
    pub attn_scores: Tensor,
    /// `[L, d]` integer attention-value currents.
    pub attn_values: Tensor,
    pub states: SfsaState,
}

pub(crate) fn validate_spikes(x: &Tensor, spec: &NeuronSpec) -> Result<()> {
    if spec.relaxed {
        return Ok(());
    }
    let ok = |v: f64| match spec.mode {
        NeuronMode::Binary => v == 0.0 || v == 1.0,
        NeuronMode::Ternary => v == 0.0 || v.abs() == spec.ternary.alpha,
    };
    match x.data().iter().find(|&&v| !ok(v)) {
        Some(bad) => Err(Error::Validation(format!(
            "{} spike input contains {bad}",
            spec.mode.as_str()
        ))),
        None => Ok(()),
    }
}

/// One SFSA time step on plain tensors. `x_spikes` is `[L, d_model]`.
pub fn sfsa_forward(
    x_spikes: &Tensor,
    w: &AttnWeights,
    mask: &CausalMask,
    states: &SfsaState,
    spec: &NeuronSpec,
    attn_thr: f64,
) -> Result<SfsaOutput> {
    w.validate()?;
    validate_spikes(x_spikes, spec)?;
    let seq_len = x_spikes.rows();
    if mask.seq_len() != seq_len {
        return Err(Error::Dimension(format!(
            "mask for {} positions, input has {seq_len}",
            mask.seq_len()
        )));
    }
    if x_spikes.cols() != w.d_model() {
        return Err(Error::Dimension(format!(
            "input width {} vs d_model {}",
            x_spikes.cols(),
            w.d_model()
        )));
    }
    let n_heads = states.attn.len();
    let mut g = Graph::new();
    let vars = AttnVars::constants(&mut g, w);
    let x = g.constant(x_spikes.clone());
    let m = g.constant(mask.m.clone());
    let mut neurons = SfsaNeurons::new(*spec, n_heads, attn_thr);
    neurons.load(&mut g, states);
    let step = sfsa_step(&mut g, x, &vars, m, &mut neurons)?;
    let stack = |vs: &[Var]| Tensor::stack(&vs.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>());
    Ok(SfsaOutput {
        out_spikes: g.value(step.out).clone(),
        attn_spikes: stack(&step.attn_spikes)?,
        attn_scores: stack(&step.scores)?,
        attn_values: g.value(step.attn_values).clone(),
        states: neurons.export(&g, states),
    })
}

/// Records softmax causal self-attention on `g`; returns the projected output
/// and the per-head `[L, L]` attention maps.
pub fn csa_step(
    g: &mut Graph,
    x: Var,
    w: &AttnVars,
    mask: &CausalMask,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(w.w_q).cols();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    let d_head = d / n_heads;
    let q = g.linear(x, w.w_q, w.b_q)?;
    let k = g.linear(x, w.w_k, w.b_k)?;
    let v = g.linear(x, w.w_v, w.b_v)?;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut maps = Vec::with_capacity(n_heads);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * d_head, d_head)?;
        let kh = g.slice_cols(k, h * d_head, d_head)?;
        let vh = g.slice_cols(v, h * d_head, d_head)?;
        let logits = g.matmul_bt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let p = g.masked_softmax(logits, &mask.m)?;
        heads.push(g.matmul(p, vh)?);
        maps.push(p);
    }
    let cat = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let out = g.linear(cat, w.w_out, w.b_out)?;
    Ok((out, maps))
}

/// Plain-tensor CSA: returns `out: [L, d]` and `attn_map: [h, L, L]`.
pub fn csa_forward(
    x: &Tensor,
    w: &AttnWeights,
    mask: &CausalMask,
    n_heads: usize,
) -> Result<(Tensor, Tensor)> {
    w.validate()?;
    if mask.seq_len() != x.rows() {
        return Err(Error::Dimension(format!(
            "mask for {} positions, input has {}",
            mask.seq_len(),
            x.rows()
        )));
    }
    let mut g = Graph::new();
    let vars = AttnVars::constants(&mut g, w);
    let xv = g.constant(x.clone());
    let (out, maps) = csa_step(&mut g, xv, &vars, mask, n_heads)?;
    let maps = Tensor::stack(&maps.iter().map(|&m| g.value(m).clone()).collect::<Vec<_>>())?;
    Ok((g.value(out).clone(), maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neurons::LifParams;

    fn binary_input(rng: &mut Rng, l: usize, d: usize, p: f64) -> Tensor {
        let data = (0..l * d).map(|_| if rng.uniform() < p { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[l, d], data).unwrap()
    }

    #[test]
    fn mask_shapes() {
        let m = causal_mask(3, None).unwrap();
        assert_eq!(m.m.data(), &[1., 0., 0., 1., 1., 0., 1., 1., 1.]);
        let m = causal_mask(3, Some(&[1.0, 1.0, 0.0])).unwrap();
        assert_eq!(m.m.data(), &[1., 0., 0., 1., 1., 0., 1., 1., 0.]);
        assert_eq!(causal_mask(1, None).unwrap().m.data(), &[1.0]);
        assert!(causal_mask(2, Some(&[1.0, 0.5])).is_err());
        assert!(causal_mask(0, None).is_err());
    }

    #[test]
    fn silent_input_stays_silent() {
        let mut rng = Rng::seed(1);
        let w = AttnWeights::init(&mut rng, 8, 0.5).unwrap();
        let spec = NeuronSpec::binary(LifParams::default());
        let mask = causal_mask(4, None).unwrap();
        let out = sfsa_forward(
            &Tensor::zeros(&[4, 8]),
            &w,
            &mask,
            &SfsaState::zeros(4, 8, 2),
            &spec,
            1.0,
        )
        .unwrap();
        assert_eq!(out.out_spikes.max_abs(), 0.0);
        assert_eq!(out.attn_scores.max_abs(), 0.0);
    }

    #[test]
    fn all_ones_queries_and_keys_score_d_head() {
        // Large positive biases force every q/k/v neuron to fire.
        let d = 8;
        let mut w = AttnWeights::init(&mut Rng::seed(2), d, 0.0).unwrap();
        w.b_q = Some(Tensor::full(&[d], 5.0));
        w.b_k = Some(Tensor::full(&[d], 5.0));
        let spec = NeuronSpec::binary(LifParams::default());
        let mask = causal_mask(3, None).unwrap();
        let out = sfsa_forward(&Tensor::zeros(&[3, d]), &w, &mask, &SfsaState::zeros(3, d, 2), &spec, 1.0)
            .unwrap();
        let s = &out.attn_scores;
        // d_head = 4; entries below and on the diagonal are 4, above are 0.
        for h in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let v = s.data()[h * 9 + i * 3 + j];
                    assert_eq!(v, if j <= i { 4.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn rejects_non_binary_and_mismatched_mask() {
        let w = AttnWeights::init(&mut Rng::seed(3), 4, 0.1).unwrap();
        let spec = NeuronSpec::binary(LifParams::default());
        let mask = causal_mask(2, None).unwrap();
        let st = SfsaState::zeros(2, 4, 1);
        let bad = Tensor::full(&[2, 4], 0.5);
        assert!(matches!(sfsa_forward(&bad, &w, &mask, &st, &spec, 1.0), Err(Error::Validation(_))));
        let mask3 = causal_mask(3, None).unwrap();
        assert!(matches!(
            sfsa_forward(&Tensor::zeros(&[2, 4]), &w, &mask3, &st, &spec, 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn scores_are_integers_and_state_carries() {
        let mut rng = Rng::seed(4);
        let (l, d) = (5, 8);
        let w = AttnWeights::init(&mut rng, d, 0.6).unwrap();
        let spec = NeuronSpec::binary(LifParams::default());
        let mask = causal_mask(l, None).unwrap();
        let mut st = SfsaState::zeros(l, d, 2);
        for _ in 0..3 {
            let x = binary_input(&mut rng, l, d, 0.5);
            let out = sfsa_forward(&x, &w, &mask, &st, &spec, 1.0).unwrap();
            for v in out.attn_scores.data().iter().chain(out.attn_values.data()) {
                assert!((v - v.round()).abs() < 1e-9 && *v >= 0.0);
            }
            assert!(out.attn_scores.data().iter().all(|&v| v <= 4.0));
            for v in out.out_spikes.data().iter().chain(out.attn_spikes.data()) {
                assert!(*v == 0.0 || *v == 1.0);
            }
            assert_ne!(out.states, st);
            st = out.states;
        }
    }

    #[test]
    fn csa_rows_are_distributions() {
        let mut rng = Rng::seed(5);
        let w = AttnWeights::init(&mut rng, 8, 0.5).unwrap();
        let x = seeded_normal(&mut rng, &[4, 8], 1.0).unwrap();
        let (out, maps) = csa_forward(&x, &w, &causal_mask(4, None).unwrap(), 2).unwrap();
        assert_eq!(out.shape(), &[4, 8]);
        assert_eq!(maps.shape(), &[2, 4, 4]);
        for r in 0..8 {
            let row = maps.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let i = r % 4;
            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
        }
        let x1 = seeded_normal(&mut rng, &[1, 8], 1.0).unwrap();
        let (_, m1) = csa_forward(&x1, &w, &causal_mask(1, None).unwrap(), 2).unwrap();
        assert_eq!(m1.data(), &[1.0, 1.0]);
    }

    #[test]
    fn csa_equal_logits_split_evenly() {
        // Zero query projection makes every logit equal.
        let mut w = AttnWeights::init(&mut Rng::seed(6), 4, 0.5).unwrap();
        w.w_q = Tensor::zeros(&[4, 4]);
        let x = seeded_normal(&mut Rng::seed(7), &[2, 4], 1.0).unwrap();
        let (_, maps) = csa_forward(&x, &w, &causal_mask(2, None).unwrap(), 1).unwrap();
        assert!((maps.get2(1, 0) - 0.5).abs() < 1e-15);
        assert!((maps.get2(1, 1) - 0.5).abs() < 1e-15);
    }
}
