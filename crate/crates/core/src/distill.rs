//! Teacher→student alignment losses: embedding, spike attention, spike
//! features, softened logits and ground-truth targets, plus the structural
//! helpers (layer map, head pooling, projections) that make teacher and
//! student tensors comparable.
//!
//! Every loss has a tape version used in training and a plain-tensor
//! wrapper that evaluates the same tape on constants.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::neurons::{constant_drive_spikes, LifParams};
use crate::numerics::{Rng, Tensor};

pub const LOSS_NAMES: [&str; 5] = ["emb", "attn", "feat", "soft", "hard"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpadConfig {
    /// Weights of (emb, attn, feat, soft, hard).
    pub lambda: [f64; 5],
    pub tau: f64,
    pub gamma_attn: f64,
    pub gamma_feat: f64,
}

impl Default for SpadConfig {
    fn default() -> Self {
        Self { lambda: [0.2, 0.1, 0.1, 0.3, 0.3], tau: 2.0, gamma_attn: 0.5, gamma_feat: 0.5 }
    }
}

impl SpadConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.lambda.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.lambda.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config(format!(
                "spad.lambda must be non-negative and sum to 1, got {:?} (sum {sum})",
                self.lambda
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("spad.tau must be > 0, got {}", self.tau)));
        }
        for (name, g) in [("gamma_attn", self.gamma_attn), ("gamma_feat", self.gamma_feat)] {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!("spad.{name} must lie in (0, 1), got {g}")));
            }
        }
        Ok(())
    }

    /// Weight of one named component.
    pub fn weight(&self, name: &str) -> Option<f64> {
        LOSS_NAMES.iter().position(|&n| n == name).map(|i| self.lambda[i])
    }
}

/// λ-weighted total and its per-component contributions.
pub fn loss_total(components: [f64; 5], cfg: &SpadConfig) -> Result<(f64, [f64; 5])> {
    cfg.validate()?;
    let mut weighted = [0.0; 5];
    for i in 0..5 {
        weighted[i] = cfg.lambda[i] * components[i];
    }
    Ok((weighted.iter().sum(), weighted))
}

/// Zero-based teacher layer for each student layer: student layer `i`
/// (one-based) aligns to teacher layer `⌈i·B/M⌉`, which is uniform skipping
/// with stride `B/M` whenever it divides.
pub fn layer_map(n_student: usize, n_teacher: usize) -> Result<Vec<usize>> {
    if n_student == 0 || n_teacher == 0 {
        return Err(Error::Config("layer_map needs at least one layer on each side".into()));
    }
    if n_student > n_teacher {
        return Err(Error::Config(format!(
            "student depth {n_student} exceeds teacher depth {n_teacher}"
        )));
    }
    Ok((1..=n_student).map(|i| (i * n_teacher).div_ceil(n_student) - 1).collect())
}

/// Mean-pools `[h_T, L, L]` teacher heads in contiguous groups down to
/// `h_s` heads.
pub fn pool_heads(a: &Tensor, h_s: usize) -> Result<Tensor> {
    let shape = a.shape();
    if shape.len() != 3 || h_s == 0 || shape[0] < h_s || shape[0] % h_s != 0 {
        return Err(Error::Alignment(format!(
            "cannot map teacher heads {shape:?} onto {h_s} student heads"
        )));
    }
    let group = shape[0] / h_s;
    if group == 1 {
        return Ok(a.clone());
    }
    let heads: Vec<Tensor> = (0..h_s)
        .map(|s| {
            let parts: Vec<Tensor> = (0..group).map(|k| a.index_outer(s * group + k)).collect();
            Tensor::stack(&parts).map(|t| t.mean_outer())
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&heads)
}

/// Entry-wise spike trains of LIF neurons driven from rest by the constant
/// currents in `a`: `T` tensors shaped like `a`.
pub fn sigma_spike(a: &Tensor, t_steps: usize, p: &LifParams) -> Vec<Tensor> {
    let trains: Vec<Vec<f64>> =
        a.data().iter().map(|&v| constant_drive_spikes(v, t_steps, p).collect()).collect();
    (0..t_steps)
        .map(|t| Tensor::new(a.shape(), trains.iter().map(|tr| tr[t]).collect()).expect("same shape"))
        .collect()
}

/// Time-mean of [`sigma_spike`], the rate-coded image `g(a)`.
pub fn sigma_rate(a: &Tensor, t_steps: usize, p: &LifParams) -> Tensor {
    let n = t_steps.max(1) as f64;
    a.map(|v| constant_drive_spikes(v, t_steps, p).sum::<f64>() / n)
}

/// `[T, ...a.shape]` spike proxy of a teacher attention map.
pub fn spike_encode_teacher_attention(a_ann: &Tensor, t_steps: usize, p: &LifParams) -> Result<Tensor> {
    if !a_ann.all_finite() {
        return Err(Error::Validation("teacher attention contains non-finite values".into()));
    }
    Tensor::stack(&sigma_spike(a_ann, t_steps, p))
}

/// One stochastic σ_spike trial: a LIF neuron started at a random phase
/// `U_0 ~ U[0, U_thr)` and driven by `a` plus Gaussian current noise.
/// Returns the time-mean spike count.
pub fn sigma_spike_trial(a: f64, t_steps: usize, p: &LifParams, noise_std: f64, rng: &mut Rng) -> f64 {
    let mut u = rng.uniform() * p.u_thr;
    let mut s = 0.0;
    let mut count = 0.0;
    for _ in 0..t_steps {
        u = a + noise_std * rng.normal() + p.beta * u - s * p.u_thr;
        s = if u >= p.u_thr { 1.0 } else { 0.0 };
        count += s;
    }
    count / t_steps.max(1) as f64
}

/// Teacher-side targets of the attention loss for one layer, already pooled
/// to the student's head count.
#[derive(Clone, Debug)]
pub struct AttnTargets {
    /// Per head `[L, L]` softmax maps.
    pub maps: Vec<Tensor>,
    /// Per head time-mean of the spike proxy.
    pub rates: Vec<Tensor>,
}

impl AttnTargets {
    pub fn new(a_ann: &Tensor, n_heads: usize, t_steps: usize, p: &LifParams) -> Result<Self> {
        let pooled = pool_heads(a_ann, n_heads)?;
        let maps: Vec<Tensor> = (0..n_heads).map(|h| pooled.index_outer(h)).collect();
        let rates = maps.iter().map(|m| sigma_rate(m, t_steps, p)).collect();
        Ok(Self { maps, rates })
    }
}

/// `γ·MSE(rate target, mean_t A) + (1−γ)·MSE(A_ANN, mean_t A)` averaged over
/// heads; `student[t][h]` are the spike-attention nodes.
pub fn attention_loss_g(
    g: &mut Graph,
    targets: &AttnTargets,
    student: &[Vec<Var>],
    gamma: f64,
) -> Result<Var> {
    let n_heads = targets.maps.len();
    if student.is_empty() || student.iter().any(|s| s.len() != n_heads) {
        return Err(Error::Alignment(format!(
            "student attention has {:?} heads per step, teacher {n_heads}",
            student.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let mut per_head = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let steps: Vec<Var> = student.iter().map(|s| s[h]).collect();
        let mean = g.average(&steps)?;
        let shape = g.value(mean).shape().to_vec();
        if shape != targets.maps[h].shape() {
            return Err(Error::Alignment(format!(
                "student attention {shape:?} vs teacher {:?}",
                targets.maps[h].shape()
            )));
        }
        let rate = g.constant(targets.rates[h].clone());
        let map = g.constant(targets.maps[h].clone());
        let rate_term = g.mse(rate, mean)?;
        let map_term = g.mse(map, mean)?;
        per_head.push(g.weighted_sum(&[(gamma, rate_term), (1.0 - gamma, map_term)])?);
    }
    g.average(&per_head)
}

/// Learnable student→teacher feature map `LN(x·W)·gain + bias`; `W` is
/// absent when widths agree.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatAdapter {
    pub w: Option<Tensor>,
    pub gain: Tensor,
    pub bias: Tensor,
}

impl FeatAdapter {
    pub fn identity(d: usize) -> Self {
        Self { w: None, gain: Tensor::ones(&[d]), bias: Tensor::zeros(&[d]) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeatAdapterVars {
    pub w: Option<Var>,
    pub gain: Var,
    pub bias: Var,
}

const FEAT_LN_EPS: f64 = 1e-5;

/// Feature targets for one student layer.
#[derive(Clone, Debug)]
pub struct FeatTargets {
    pub hidden: Tensor,
    /// `g(H_ANN)`: time-mean of σ_spike of the teacher features.
    pub rate: Tensor,
}

impl FeatTargets {
    pub fn new(h_ann: &Tensor, t_steps: usize, p: &LifParams) -> Self {
        Self { hidden: h_ann.clone(), rate: sigma_rate(h_ann, t_steps, p) }
    }
}

/// `γ·MSE(g(H_ANN), P(mean_t H)) + (1−γ)·MSE(H_ANN, LN(mean_t H·W)·gain + bias)`,
/// where `P` is the projection alone (identity when widths agree).
pub fn feature_loss_g(
    g: &mut Graph,
    targets: &FeatTargets,
    student: &[Var],
    adapter: FeatAdapterVars,
    gamma: f64,
) -> Result<Var> {
    if student.is_empty() {
        return Err(Error::Alignment("student features have no time steps".into()));
    }
    let mean = g.average(student)?;
    let projected = match adapter.w {
        Some(w) => g.matmul(mean, w)?,
        None => mean,
    };
    let ps = g.value(projected).shape().to_vec();
    if ps != targets.hidden.shape() {
        return Err(Error::Config(format!(
            "student features {ps:?} do not match teacher {:?}; a feature projection is required",
            targets.hidden.shape()
        )));
    }
    let normed = g.layer_norm(projected, FEAT_LN_EPS);
    let scaled = g.mul_row(normed, adapter.gain)?;
    let mapped = g.add_row(scaled, adapter.bias)?;
    let rate = g.constant(targets.rate.clone());
    let hidden = g.constant(targets.hidden.clone());
    let rate_term = g.mse(rate, projected)?;
    let map_term = g.mse(hidden, mapped)?;
    g.weighted_sum(&[(gamma, rate_term), (1.0 - gamma, map_term)])
}

/// `‖E_ANN − mean_t Π(E_SNN(t))‖²` per element.
pub fn embedding_loss_g(g: &mut Graph, e_ann: &Tensor, e_snn: &[Var], proj: Option<Var>) -> Result<Var> {
    if e_snn.is_empty() {
        return Err(Error::Alignment("student embedding has no time steps".into()));
    }
    let mean = g.average(e_snn)?;
    let mapped = match proj {
        Some(p) => g.matmul(mean, p)?,
        None => mean,
    };
    if g.value(mapped).shape() != e_ann.shape() {
        return Err(Error::Alignment(format!(
            "student embedding {:?} vs teacher {:?}",
            g.value(mapped).shape(),
            e_ann.shape()
        )));
    }
    let t = g.constant(e_ann.clone());
    g.mse(t, mapped)
}

fn constants(g: &mut Graph, ts: impl IntoIterator<Item = Tensor>) -> Vec<Var> {
    ts.into_iter().map(|t| g.constant(t)).collect()
}

fn split_time(x: &Tensor, expect_rank: usize, what: &str) -> Result<Vec<Tensor>> {
    if x.rank() != expect_rank || x.shape()[0] == 0 {
        return Err(Error::Alignment(format!("{what} has shape {:?}", x.shape())));
    }
    Ok((0..x.shape()[0]).map(|t| x.index_outer(t)).collect())
}

/// Attention loss for one layer. `a_ann`: `[h_T, L, L]`; `a_snn_spikes`:
/// `[T, h_S, L, L]`; the σ_spike proxy uses `p` and the student's `T`.
pub fn loss_attention(a_ann: &Tensor, a_snn_spikes: &Tensor, cfg: &SpadConfig, p: &LifParams) -> Result<f64> {
    let steps = split_time(a_snn_spikes, 4, "student attention")?;
    let h_s = a_snn_spikes.shape()[1];
    if a_ann.rank() != 3 {
        return Err(Error::Alignment(format!("teacher attention has shape {:?}", a_ann.shape())));
    }
    let targets = AttnTargets::new(a_ann, h_s, steps.len(), p)?;
    let mut g = Graph::new();
    let student: Vec<Vec<Var>> = steps
        .into_iter()
        .map(|s| constants(&mut g, (0..h_s).map(|h| s.index_outer(h))))
        .collect();
    let l = attention_loss_g(&mut g, &targets, &student, cfg.gamma_attn)?;
    Ok(g.value(l).item())
}

/// Feature loss for one layer. `h_ann`: `[L, d_T]`; `h_snn`: `[T, L, d_S]`.
pub fn loss_feature(
    h_ann: &Tensor,
    h_snn: &Tensor,
    cfg: &SpadConfig,
    p: &LifParams,
    adapter: &FeatAdapter,
) -> Result<f64> {
    let steps = split_time(h_snn, 3, "student features")?;
    let targets = FeatTargets::new(h_ann, steps.len(), p);
    let mut g = Graph::new();
    let student = constants(&mut g, steps);
    let vars = FeatAdapterVars {
        w: adapter.w.clone().map(|w| g.constant(w)),
        gain: g.constant(adapter.gain.clone()),
        bias: g.constant(adapter.bias.clone()),
    };
    let l = feature_loss_g(&mut g, &targets, &student, vars, cfg.gamma_feat)?;
    Ok(g.value(l).item())
}

pub fn loss_embedding(e_ann: &Tensor, e_snn_steps: &[Tensor], proj: Option<&Tensor>) -> Result<f64> {
    let mut g = Graph::new();
    let steps = constants(&mut g, e_snn_steps.iter().cloned());
    let p = proj.map(|p| g.constant(p.clone()));
    let l = embedding_loss_g(&mut g, e_ann, &steps, p)?;
    Ok(g.value(l).item())
}

pub fn loss_soft(z_ann: &Tensor, z_snn: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let mut g = Graph::new();
    let z = g.constant(z_snn.clone());
    let l = g.soft_kl(z_ann, z, tau)?;
    Ok(g.value(l).item())
}

pub fn loss_hard(z_snn: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(z_snn.clone());
    let l = g.cross_entropy(z, targets)?;
    Ok(g.value(l).item())
}
