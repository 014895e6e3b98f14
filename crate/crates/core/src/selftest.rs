//! Invariant and gradient checks run by `bispik selftest`.
//!
//! Each check returns a short detail string on success and an error naming
//! the violated property otherwise. `quick` shrinks sample counts and the
//! training smoke run.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::attention::{causal_mask, csa_forward, sfsa_forward, AttnWeights, SfsaState};
use crate::checkpoint::model_to_checkpoint;
use crate::corpus::{periodic_text, Corpus, Window};
use crate::distill::{
    loss_attention, loss_embedding, loss_feature, loss_hard, loss_soft, loss_total, sigma_spike_trial, FeatAdapter,
    SpadConfig,
};
use crate::energy::{count_flops, energy_report, energy_report_from_rates, sops, EnergyConstants};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Bound, Model, ModelConfig, ModelKind};
use crate::neurons::{
    eligibility_trace, empirical_rate, lif_step, surrogate_forward_scalar, surrogate_grad_scalar, LifParams,
    NeuronSpec, NeuronState, SpikingLayer, TernaryParams,
};
use crate::numerics::{count_macs, finite_diff_grad, seeded_normal, Rng, Tensor};
use crate::training::{
    batch_loss, bptt_backward, check_teacher, clip_gradients, eligibility_weight_grad, ensure_adapters,
    moving_average_decreases, train_loop, Supervisor, TrainConfig,
};

type Check = fn(bool) -> Result<String>;

const CHECKS: &[(&str, Check)] = &[
    ("numerics.matmul_associativity", matmul_associativity),
    ("numerics.finite_diff_polynomial", finite_diff_polynomial),
    ("numerics.seeded_determinism", seeded_determinism),
    ("neurons.lif_examples", lif_examples),
    ("neurons.ternary_branches", ternary_branches),
    ("neurons.binary_spikes", binary_spikes),
    ("neurons.rate_monotone", rate_monotone),
    ("neurons.surrogate_bound", surrogate_bound),
    ("neurons.surrogate_finite_diff", surrogate_finite_diff),
    ("neurons.eligibility_bound", eligibility_bound),
    ("neurons.soft_reset_decay", soft_reset_decay),
    ("attention.integer_scores", sfsa_integer_scores),
    ("attention.causality", sfsa_causality),
    ("attention.csa_shape_parity", csa_shape_parity),
    ("model.residual_identity", residual_identity),
    ("model.trace_completeness", trace_completeness),
    ("model.param_count", param_count),
    ("model.teacher_student_shapes", teacher_student_shapes),
    ("distill.fixed_points", loss_fixed_points),
    ("distill.total_weights", total_weights),
    ("distill.concentration", concentration),
    ("distill.consistency", consistency),
    ("training.gradient_check", gradient_check),
    ("training.eligibility_matches_bptt", eligibility_matches_bptt),
    ("training.clip_bound", clip_bound),
    ("training.smoke_moving_average", smoke_moving_average),
    ("training.checkpoint_determinism", checkpoint_determinism),
    ("energy.report_consistency", report_consistency),
    ("energy.monotonicity", energy_monotonicity),
    ("energy.mac_counter", mac_counter),
    ("cli.snapshot_reproduces", snapshot_reproduces),
];

/// Runs every check, one `PASS`/`FAIL` line each. True when all pass.
pub fn run(out: &mut dyn Write, quick: bool) -> bool {
    let mut ok = true;
    for (name, f) in CHECKS {
        let (pass, detail) = match f(quick) {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        ok &= pass;
        let _ = writeln!(out, "{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    let _ = writeln!(out, "{}", if ok { "all checks passed" } else { "some checks FAILED" });
    ok
}

fn fail(msg: impl Into<String>) -> Error {
    Error::Evaluation(msg.into())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(fail(msg()))
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

// numerics

fn matmul_associativity(quick: bool) -> Result<String> {
    let mut rng = Rng::seed(1);
    let trials = if quick { 20 } else { 200 };
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (m, k, n, p) = (1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(5));
        let a = seeded_normal(&mut rng, &[m, k], 1.0)?;
        let b = seeded_normal(&mut rng, &[k, n], 1.0)?;
        let c = seeded_normal(&mut rng, &[n, p], 1.0)?;
        let l = a.matmul(&b)?.matmul(&c)?;
        let r = a.matmul(&b.matmul(&c)?)?;
        let scale = l.max_abs().max(r.max_abs()).max(1.0);
        worst = worst.max(l.sub(&r)?.max_abs() / scale);
    }
    ensure(worst < 1e-10, || format!("relative deviation {worst:.3e}"))?;
    Ok(format!("{trials} triples, max relative deviation {worst:.1e}"))
}

fn finite_diff_polynomial(_: bool) -> Result<String> {
    // f(x) = Σ c_i x_i³ − 2 x_i², f'(x) = 3 c_i x_i² − 4 x_i
    let x = Tensor::new(&[5], vec![-1.5, -0.3, 0.0, 0.7, 2.0])?;
    let c = [1.0, -2.0, 0.5, 3.0, 0.25];
    let f = |t: &Tensor| t.data().iter().zip(&c).map(|(&v, &ci)| ci * v * v * v - 2.0 * v * v).sum::<f64>();
    let mut errs = Vec::new();
    for eps in [1e-2, 5e-3] {
        let g = finite_diff_grad(f, &x, eps)?;
        let e = g
            .data()
            .iter()
            .zip(x.data())
            .zip(&c)
            .map(|((&gi, &v), &ci)| (gi - (3.0 * ci * v * v - 4.0 * v)).abs())
            .fold(0.0, f64::max);
        errs.push(e);
    }
    // Central differences of a cubic err by exactly c·eps², so halving eps quarters it.
    let ratio = errs[0] / errs[1];
    ensure((ratio - 4.0).abs() < 1e-3, || format!("error ratio {ratio} for halved eps"))?;
    Ok(format!("error {:.2e} at eps 1e-2, ratio {ratio:.4}", errs[0]))
}

fn seeded_determinism(_: bool) -> Result<String> {
    let cfg = small_cfg(2);
    let a = Model::init(ModelKind::Snn, cfg, 9)?;
    let b = Model::init(ModelKind::Snn, cfg, 9)?;
    ensure(a == b, || "initialisation differs".into())?;
    let toks = [1, 5, 3, 2];
    let (la, ta) = a.snn_forward(&toks)?;
    let (lb, tb) = b.snn_forward(&toks)?;
    ensure(la == lb && ta.attn_spikes == tb.attn_spikes, || "forward pass differs".into())?;
    Ok("init and forward bit-identical".into())
}

// neurons

fn lif_examples(_: bool) -> Result<String> {
    let run = |beta: f64, drive: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let p = LifParams { beta, ..LifParams::default() };
        let mut st = NeuronState::zeros(&[1]);
        let (mut s, mut u) = (Vec::new(), Vec::new());
        for &x in drive {
            let (spike, next) = lif_step(&st, &Tensor::new(&[1], vec![x])?, &p)?;
            s.push(spike.data()[0]);
            u.push(next.u.data()[0]);
            st = next;
        }
        Ok((s, u))
    };
    let (s, u) = run(0.5, &[0.0; 5])?;
    ensure(s == [0.0; 5] && u == [0.0; 5], || format!("zero drive gave {s:?} {u:?}"))?;
    let (s, u) = run(0.5, &[2.0])?;
    ensure(s == [1.0] && u == [2.0], || format!("single step gave {s:?} {u:?}"))?;
    let (s, u) = run(1.0, &[0.5; 4])?;
    ensure(s == [0.0, 1.0, 0.0, 1.0] && u == [0.5, 1.0, 0.5, 1.0], || format!("integrate-and-fire gave {s:?} {u:?}"))?;
    Ok("three hand traces match".into())
}

fn ternary_branches(_: bool) -> Result<String> {
    use crate::neurons::ternary_level;
    let amp = TernaryParams::default().alpha;
    for i in 0..21 {
        let u = -2.5 + 0.25 * i as f64;
        let want = if u > amp {
            amp
        } else if u < -amp {
            -amp
        } else {
            0.0
        };
        let got = ternary_level(u, amp);
        ensure(got == want, || format!("U={u}: got {got}, want {want}"))?;
    }
    Ok("21 grid values".into())
}

fn binary_spikes(quick: bool) -> Result<String> {
    let mut rng = Rng::seed(2);
    let p = LifParams::default();
    let mut st = NeuronState::zeros(&[16]);
    let steps = if quick { 50 } else { 500 };
    for t in 0..steps {
        let x = seeded_normal(&mut rng, &[16], 1.5)?;
        let (s, next) = lif_step(&st, &x, &p)?;
        ensure(s.data().iter().all(|&v| v == 0.0 || v == 1.0), || format!("non-binary spike at step {t}"))?;
        st = next;
    }
    Ok(format!("{steps} random steps"))
}

fn rate_grid() -> Vec<f64> {
    let mut g = vec![-1.0, -0.5];
    g.extend((0..=12).map(|i| 0.25 * i as f64));
    g
}

fn rate_monotone(_: bool) -> Result<String> {
    let p = LifParams::default();
    let rates: Vec<f64> = rate_grid().iter().map(|&a| empirical_rate(a, 256, &p)).collect();
    ensure(rates.iter().all(|r| (0.0..=1.0).contains(r)), || format!("rate outside [0, 1]: {rates:?}"))?;
    ensure(rates.windows(2).all(|w| w[0] <= w[1]), || format!("rates not monotone: {rates:?}"))?;
    Ok(format!("{} drives, rate {:.3}..{:.3}", rates.len(), rates[0], rates[rates.len() - 1]))
}

fn surrogate_bound(_: bool) -> Result<String> {
    let alpha = LifParams::default().surrogate_alpha;
    let worst = (-4000..=4000).map(|i| surrogate_grad_scalar(i as f64 * 1e-3, alpha)).fold(0.0, f64::max);
    ensure(worst <= alpha / 2.0, || format!("max slope {worst} exceeds {}", alpha / 2.0))?;
    Ok(format!("max slope {worst}"))
}

fn surrogate_finite_diff(_: bool) -> Result<String> {
    let alpha = LifParams::default().surrogate_alpha;
    let mut rng = Rng::seed(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let u = rng.uniform_range(-3.0, 3.0);
        let x = Tensor::new(&[1], vec![u])?;
        let n = finite_diff_grad(|t| surrogate_forward_scalar(t.item(), alpha), &x, 1e-5)?.item();
        worst = worst.max(rel_err(surrogate_grad_scalar(u, alpha), n));
    }
    ensure(worst < 1e-6, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("100 points, max relative error {worst:.1e}"))
}

fn eligibility_bound(quick: bool) -> Result<String> {
    let mut rng = Rng::seed(4);
    let streams = if quick { 100 } else { 1000 };
    for s in 0..streams {
        let beta = rng.uniform_range(0.05, 0.95);
        let m = rng.uniform_range(0.1, 3.0);
        let xs: Vec<Tensor> = (0..32)
            .map(|_| Tensor::new(&[1], vec![rng.uniform_range(-m, m)]))
            .collect::<Result<_>>()?;
        for e in eligibility_trace(&xs, beta)? {
            ensure(e.max_abs() <= m / (1.0 - beta) + 1e-12, || format!("stream {s}: |e| {} > bound", e.max_abs()))?;
        }
    }
    Ok(format!("{streams} streams"))
}

fn soft_reset_decay(_: bool) -> Result<String> {
    let p = LifParams::default();
    for u0 in [0.99, 0.5, -0.7] {
        let mut st = NeuronState { u: Tensor::new(&[1], vec![u0])?, s_prev: Tensor::zeros(&[1]) };
        let mut prev = u0.abs();
        for _ in 0..60 {
            let (s, next) = lif_step(&st, &Tensor::zeros(&[1]), &p)?;
            let u = next.u.data()[0].abs();
            ensure(s.data()[0] == 0.0 && u <= prev, || format!("U_0={u0}: spike or growth"))?;
            prev = u;
            st = next;
        }
        ensure(prev < 1e-15, || format!("U_0={u0}: membrane {prev} after 60 steps"))?;
    }
    Ok("membrane decays without firing".into())
}

// attention

fn binary_input(rng: &mut Rng, l: usize, d: usize, p: f64) -> Tensor {
    let data = (0..l * d).map(|_| if rng.uniform() < p { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[l, d], data).expect("shape")
}

fn sfsa_integer_scores(quick: bool) -> Result<String> {
    let mut rng = Rng::seed(5);
    let (l, d, h) = (6, 8, 2);
    let spec = NeuronSpec::binary(LifParams::default());
    let mask = causal_mask(l, None)?;
    let trials = if quick { 10 } else { 100 };
    for _ in 0..trials {
        let w = AttnWeights::init(&mut rng, d, 0.8)?;
        let mut st = SfsaState::zeros(l, d, h);
        for _ in 0..2 {
            let x = binary_input(&mut rng, l, d, 0.5);
            let o = sfsa_forward(&x, &w, &mask, &st, &spec, 1.0)?;
            for &v in o.attn_scores.data().iter().chain(o.attn_values.data()) {
                ensure((v - v.round()).abs() < 1e-9 && v >= 0.0, || format!("non-integer current {v}"))?;
            }
            ensure(o.attn_scores.data().iter().all(|&v| v <= (d / h) as f64), || "score above d_head".into())?;
            for &v in o.out_spikes.data().iter().chain(o.attn_spikes.data()) {
                ensure(v == 0.0 || v == 1.0, || format!("non-binary spike {v}"))?;
            }
            st = o.states;
        }
    }
    Ok(format!("{trials} random layers, scores in [0, d_head]"))
}

fn sfsa_causality(quick: bool) -> Result<String> {
    let mut rng = Rng::seed(6);
    let (l, d, h) = (7, 8, 2);
    let spec = NeuronSpec::binary(LifParams::default());
    let mask = causal_mask(l, None)?;
    let trials = if quick { 20 } else { 100 };
    for trial in 0..trials {
        let w = AttnWeights::init(&mut rng, d, 0.8)?;
        let x = binary_input(&mut rng, l, d, 0.5);
        let i = rng.below(l - 1);
        let j = i + 1 + rng.below(l - 1 - i);
        let mut y = x.clone();
        for c in 0..d {
            y.set2(j, c, 1.0 - x.get2(j, c));
        }
        let st = SfsaState::zeros(l, d, h);
        let a = sfsa_forward(&x, &w, &mask, &st, &spec, 1.0)?;
        let b = sfsa_forward(&y, &w, &mask, &st, &spec, 1.0)?;
        for r in 0..=i {
            ensure(a.out_spikes.row(r) == b.out_spikes.row(r), || format!("trial {trial}: row {r} changed by token {j}"))?;
        }
    }
    Ok(format!("{trials} suffix perturbations"))
}

fn csa_shape_parity(_: bool) -> Result<String> {
    let mut rng = Rng::seed(7);
    let (l, d, h) = (5, 8, 2);
    let w = AttnWeights::init(&mut rng, d, 0.5)?;
    let mask = causal_mask(l, None)?;
    let x = binary_input(&mut rng, l, d, 0.5);
    let (out, maps) = csa_forward(&x, &w, &mask, h)?;
    let s = sfsa_forward(&x, &w, &mask, &SfsaState::zeros(l, d, h), &NeuronSpec::binary(LifParams::default()), 1.0)?;
    ensure(out.shape() == s.out_spikes.shape() && maps.shape() == s.attn_spikes.shape(), || {
        format!("CSA {:?}/{:?} vs SFSA {:?}/{:?}", out.shape(), maps.shape(), s.out_spikes.shape(), s.attn_spikes.shape())
    })?;
    Ok(format!("output {:?}, maps {:?}", out.shape(), maps.shape()))
}

// model

fn small_cfg(layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: layers,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 6,
        t_steps: 2,
        init_std: 0.5,
        ..ModelConfig::default()
    }
}

fn residual_identity(_: bool) -> Result<String> {
    let cfg = small_cfg(2);
    let mut m = Model::init(ModelKind::Snn, cfg, 7)?;
    let names: Vec<String> = m.params.iter().filter(|(n, _)| n.starts_with("blocks.")).map(|(n, _)| n.to_string()).collect();
    for n in names {
        let id = m.params.id(&n)?;
        let shape = m.params.by_id(id).shape().to_vec();
        *m.params.by_id_mut(id) = Tensor::zeros(&shape);
    }
    let toks = [3, 1, 4, 1, 5];
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &m.params, false);
    let tape = m.snn_tape(&mut g, &bound, &toks)?;
    let mut enc = SpikingLayer::new(cfg.neuron_spec());
    let mut out0 = SpikingLayer::new(cfg.neuron_spec());
    let mut h = Graph::new();
    let emb = h.constant(g.value(tape.emb).clone());
    for t in 0..cfg.t_steps {
        let x = enc.step(&mut h, emb)?;
        let y = out0.step(&mut h, x)?;
        ensure(g.value(tape.hidden[0][t]) == h.value(y), || format!("block 0 output differs at step {t}"))?;
    }
    Ok("zeroed blocks pass the encoder stream".into())
}

fn trace_completeness(_: bool) -> Result<String> {
    let cfg = small_cfg(3);
    let m = Model::init(ModelKind::Snn, cfg, 8)?;
    let (_, tr) = m.snn_forward(&[1, 2, 3, 4])?;
    ensure(tr.attn_spikes.len() == 3 && tr.hidden.len() == 3, || "one trace per layer expected".into())?;
    for (a, hdn) in tr.attn_spikes.iter().zip(&tr.hidden) {
        ensure(a.shape() == [2, 2, 4, 4] && hdn.shape() == [2, 4, 8], || format!("shapes {:?} {:?}", a.shape(), hdn.shape()))?;
    }
    ensure(tr.firing.iter().all(|f| f.sfsa_input.steps == 2 && f.sffn_input.steps == 2), || "counter steps".into())?;
    Ok("3 layers × 2 steps".into())
}

fn param_count(_: bool) -> Result<String> {
    for layers in [0, 1, 2] {
        for kind in [ModelKind::Snn, ModelKind::Ann] {
            let cfg = small_cfg(layers);
            let m = Model::init(kind, cfg, 0)?;
            let (got, want) = (m.allocated_params(), Model::param_count_formula(kind, &cfg));
            ensure(got == want, || format!("{} {layers} layers: allocated {got}, formula {want}", kind.as_str()))?;
        }
    }
    let cfg = ModelConfig::default();
    Ok(format!("default spiking model {} parameters", Model::param_count_formula(ModelKind::Snn, &cfg)))
}

fn teacher_student_shapes(_: bool) -> Result<String> {
    let cfg = small_cfg(2);
    let t = Model::init(ModelKind::Ann, cfg, 9)?.ann_forward(&[1, 2, 3])?;
    let (_, s) = Model::init(ModelKind::Snn, cfg, 9)?.snn_forward(&[1, 2, 3])?;
    for (a, b) in t.attn_maps.iter().zip(&s.attn_spikes) {
        ensure(a.shape() == &b.shape()[1..], || format!("{:?} vs {:?}", a.shape(), b.shape()))?;
    }
    Ok("[h, L, L] per layer".into())
}

// distill

fn loss_fixed_points(_: bool) -> Result<String> {
    // With β = 0.5 and threshold 0.5 a drive of 1 fires every step and 0
    // never does, so σ_spike maps binary tensors onto themselves.
    let p = LifParams { beta: 0.5, u_thr: 0.5, ..LifParams::default() };
    let cfg = SpadConfig::default();
    let a_ann = Tensor::new(&[2, 3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 0., 0., 1., 0., 0., 0., 1., 0.])?;
    let a_snn = Tensor::stack(&[a_ann.clone(), a_ann.clone()])?;
    let attn = loss_attention(&a_ann, &a_snn, &cfg, &p)?;
    // Rows with equal mean and spread make the layer-norm map invertible by
    // a shared gain and bias.
    let h = Tensor::from_rows(&[&[1., 0., 1., 0.], &[0., 1., 1., 0.], &[1., 1., 0., 0.]]);
    let var = 0.25;
    let adapter = FeatAdapter { w: None, gain: Tensor::full(&[4], (var + 1e-5f64).sqrt()), bias: Tensor::full(&[4], 0.5) };
    let feat = loss_feature(&h, &Tensor::stack(&[h.clone(), h.clone()])?, &cfg, &p, &adapter)?;
    let e = Tensor::from_rows(&[&[0.3, -1.2], &[2.0, 0.1]]);
    let emb = loss_embedding(&e, &[e.clone(), e.clone()], None)?;
    let z = Tensor::from_rows(&[&[0.4, -2.0, 1.5], &[3.0, 0.0, -1.0]]);
    let soft = loss_soft(&z, &z, cfg.tau)?;
    let hard = loss_hard(&Tensor::from_rows(&[&[1000.0, 0.0, 0.0], &[0.0, 0.0, 1000.0]]), &[0, 2])?;
    let all = [emb, attn, feat, soft, hard];
    ensure(all.iter().all(|&v| (0.0..=1e-24).contains(&v)), || format!("(emb, attn, feat, soft, hard) = {all:?}"))?;
    Ok(format!("{all:?}"))
}

fn total_weights(_: bool) -> Result<String> {
    let cfg = SpadConfig::default();
    for i in 0..5 {
        let mut probe = [0.0; 5];
        probe[i] = 1.0;
        let (t, _) = loss_total(probe, &cfg)?;
        ensure(t == cfg.lambda[i], || format!("unit probe {i}: {t} vs {}", cfg.lambda[i]))?;
    }
    Ok(format!("λ = {:?}", cfg.lambda))
}

/// Sample variance of the time-mean σ_spike over independent trials.
fn trial_variance(a: f64, t: usize, p: &LifParams, noise: f64, trials: usize, rng: &mut Rng) -> f64 {
    let xs: Vec<f64> = (0..trials).map(|_| sigma_spike_trial(a, t, p, noise, rng)).collect();
    let m = xs.iter().sum::<f64>() / trials as f64;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (trials - 1) as f64
}

fn concentration(quick: bool) -> Result<String> {
    let p = LifParams::default();
    let mut rng = Rng::seed(10);
    let trials = if quick { 100 } else { 400 };
    let (mut v16, mut v64) = (0.0, 0.0);
    for a in rate_grid() {
        v16 += trial_variance(a, 16, &p, 0.3, trials, &mut rng);
        v64 += trial_variance(a, 64, &p, 0.3, trials, &mut rng);
    }
    ensure(v64 < 0.5 * v16, || format!("Var(T=64) {v64:.3e} vs Var(T=16) {v16:.3e}"))?;
    Ok(format!("Var(T=64)/Var(T=16) = {:.3}", v64 / v16))
}

fn consistency(_: bool) -> Result<String> {
    let p = LifParams::default();
    let mut rng = Rng::seed(11);
    let n = 2048;
    let a: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 1.5)).collect();
    let s: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let loss = |t: usize, rng: &mut Rng| -> f64 {
        let mut acc = 0.0;
        for _ in 0..3 {
            acc += a
                .iter()
                .zip(&s)
                .map(|(&ai, &si)| {
                    let r = sigma_spike_trial(ai, t, &p, 0.3, rng);
                    (r - si) * (r - si)
                })
                .sum::<f64>()
                / n as f64;
        }
        acc / 3.0
    };
    let reference = loss(1024, &mut rng);
    let gaps: Vec<f64> = [16, 64, 256].iter().map(|&t| (loss(t, &mut rng) - reference).abs()).collect();
    ensure(gaps.windows(2).all(|w| w[1] < w[0]), || format!("gaps {gaps:?} not decreasing"))?;
    Ok(format!("|L(T) − L(1024)| for T = 16, 64, 256: {:.2e}, {:.2e}, {:.2e}", gaps[0], gaps[1], gaps[2]))
}

// training

fn gradient_check(quick: bool) -> Result<String> {
    let cfg = ModelConfig {
        vocab_size: 7,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 4,
        t_steps: 2,
        relaxed: true,
        init_std: 0.5,
        ..ModelConfig::default()
    };
    let tcfg = ModelConfig { d_model: 12, n_heads: 4, n_layers: 3, d_ff: 12, relaxed: false, ..cfg };
    let teacher = Model::init(ModelKind::Ann, tcfg, 3)?;
    let mut student = Model::init(ModelKind::Snn, cfg, 4)?;
    let adapters = ensure_adapters(&mut student, &teacher, 5)?;
    let layer_map = check_teacher(&student, &teacher, 4)?;
    let sup = Supervisor { teacher: &teacher, spad: SpadConfig::default(), layer_map, adapters };
    let batch = [Window { inputs: vec![3, 1, 4, 1], targets: vec![1, 4, 1, 5] }];
    let loss_of = |m: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &m.params, false);
        let (l, _) = batch_loss(&mut g, m, &bound, Some(&sup), &batch)?;
        Ok(g.value(l).item())
    };
    let shapes: Vec<Vec<usize>> = student.params.iter().map(|(_, t)| t.shape().to_vec()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &student.params, true);
    let (l, _) = batch_loss(&mut g, &student, &bound, Some(&sup), &batch)?;
    let analytic = bptt_backward(&g, l, student.params.len(), &refs)?;
    let stride = if quick { 5 } else { 1 };
    let mut errs = Vec::new();
    let mut probe = student.clone();
    for id in 0..student.params.len() {
        let base = student.params.by_id(id).clone();
        let numeric = finite_diff_grad(
            |x| {
                *probe.params.by_id_mut(id) = x.clone();
                loss_of(&probe).unwrap_or(f64::NAN)
            },
            &base,
            1e-5,
        )?;
        *probe.params.by_id_mut(id) = base;
        for (i, (&a, &n)) in analytic[id].data().iter().zip(numeric.data()).enumerate() {
            if i % stride == 0 {
                errs.push(rel_err(a, n));
            }
        }
    }
    errs.sort_by(f64::total_cmp);
    let p99 = errs[(errs.len() * 99 / 100).min(errs.len() - 1)];
    ensure(p99 < 1e-3, || format!("p99 relative error {p99:.3e} over {} coordinates", errs.len()))?;
    Ok(format!("SpAD total, p99 relative error {p99:.2e} over {} coordinates", errs.len()))
}

fn eligibility_matches_bptt(quick: bool) -> Result<String> {
    let mut rng = Rng::seed(12);
    let cases = if quick { 10 } else { 50 };
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let keep_reset = case % 2 == 1;
        let (n_in, n_out, t_len, b) = if keep_reset { (1, 3, 5, 2) } else { (3, 4, 5, 2) };
        let w = seeded_normal(&mut rng, &[n_in, n_out], 1.0)?;
        let inputs: Vec<Tensor> = (0..t_len).map(|_| seeded_normal(&mut rng, &[b, n_in], 1.0)).collect::<Result<_>>()?;
        let upstream: Vec<Tensor> = (0..t_len).map(|_| seeded_normal(&mut rng, &[b, n_out], 1.0)).collect::<Result<_>>()?;
        let p = LifParams::default();
        let trace = eligibility_weight_grad(&w, &inputs, &upstream, &p, keep_reset)?;
        let mut g = Graph::new();
        let wv = g.param(0, w.clone());
        let spec = NeuronSpec { detach_reset: !keep_reset, ..NeuronSpec::binary(p) };
        let mut layer = SpikingLayer::new(spec);
        let mut terms = Vec::new();
        for (x, c) in inputs.iter().zip(&upstream) {
            let xv = g.constant(x.clone());
            let cur = g.matmul(xv, wv)?;
            let s = layer.step(&mut g, cur)?;
            let cv = g.constant(c.clone());
            let prod = g.mul(s, cv)?;
            let m = g.mean(prod);
            terms.push((c.len() as f64, m));
        }
        let loss = g.weighted_sum(&terms)?;
        let bptt = bptt_backward(&g, loss, 1, &[w.shape()])?;
        worst = worst.max(bptt[0].sub(&trace)?.max_abs());
    }
    ensure(worst < 1e-10, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("{cases} single-layer cases, max deviation {worst:.1e}"))
}

fn clip_bound(quick: bool) -> Result<String> {
    let mut rng = Rng::seed(13);
    let trials = if quick { 50 } else { 500 };
    for _ in 0..trials {
        let scale = 10f64.powf(rng.uniform_range(-3.0, 3.0));
        let mut gs: Vec<Tensor> = (0..3).map(|i| seeded_normal(&mut rng, &[i + 1, 3], scale)).collect::<Result<_>>()?;
        let thr = rng.uniform_range(0.1, 2.0);
        clip_gradients(&mut gs, thr)?;
        let norm = gs.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        ensure(norm <= thr + 1e-9, || format!("clipped norm {norm} above {thr}"))?;
    }
    Ok(format!("{trials} random gradient sets"))
}

fn smoke_setup(steps: usize) -> (ModelConfig, TrainConfig, Corpus) {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        t_steps: 2,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig { total_steps: steps, batch_size: 4, seq_len: 16, lr_peak: 3e-3, seed: 1, ..TrainConfig::default() };
    let corpus = Corpus::from_text(&periodic_text("abcab", 4000), 0.1).expect("corpus");
    (cfg, tcfg, corpus)
}

fn smoke_moving_average(quick: bool) -> Result<String> {
    let (steps, ma, span) = if quick { (150, 25, 100) } else { (600, 100, 500) };
    let (cfg, tcfg, corpus) = smoke_setup(steps);
    let out = train_loop(&tcfg, Model::init(ModelKind::Snn, cfg, 1)?, &corpus, None, None, &mut std::io::sink())?;
    let losses: Vec<f64> = out.history.iter().map(|h| h.total).collect();
    ensure(moving_average_decreases(&losses, ma, span), || format!("{ma}-step average rises within a {span}-step window"))?;
    Ok(format!("{steps} steps, loss {:.3} → {:.3}", losses[0], losses[steps - 1]))
}

fn checkpoint_determinism(_: bool) -> Result<String> {
    let (cfg, tcfg, corpus) = smoke_setup(5);
    let run = || -> Result<(Vec<u8>, Vec<u8>)> {
        let mut metrics = Vec::new();
        let out = train_loop(&tcfg, Model::init(ModelKind::Snn, cfg, 1)?, &corpus, None, None, &mut metrics)?;
        Ok((model_to_checkpoint(&out.model, Some(&out.adam)).to_bytes(), metrics))
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, || "repeated runs differ".into())?;
    Ok(format!("{}-byte checkpoints identical", a.0.len()))
}

// energy

fn report_consistency(_: bool) -> Result<String> {
    let cfg = small_cfg(2);
    let m = Model::init(ModelKind::Snn, cfg, 14)?;
    let (_, tr) = m.snn_forward(&[1, 2, 3, 4, 5])?;
    let r = energy_report(&cfg, &tr, &EnergyConstants::default())?;
    for (i, l) in r.layers.iter().enumerate() {
        ensure(l.sops == sops(l.firing_rate, r.t_steps, l.flops)?, || format!("layer {i} sops inconsistent"))?;
        ensure((0.0..=1.0).contains(&l.firing_rate), || format!("layer {i} rate {}", l.firing_rate))?;
    }
    Ok(format!("{} layers", r.layers.len()))
}

fn energy_monotonicity(_: bool) -> Result<String> {
    let cfg = small_cfg(2);
    let c = EnergyConstants::default();
    let base = [0.2, 0.4];
    let e = |t: usize, r: [f64; 2]| -> Result<f64> {
        Ok(energy_report_from_rates(&cfg, 5, t, &r, &r, &c)?.snn_energy_mj)
    };
    let mut prev = 0.0;
    for t in 1..=8 {
        let v = e(t, base)?;
        ensure(v >= prev, || format!("energy fell when T rose to {t}"))?;
        prev = v;
    }
    let e0 = e(4, base)?;
    for bump in [[0.3, 0.4], [0.2, 0.9]] {
        ensure(e(4, bump)? >= e0, || format!("energy fell when rates rose to {bump:?}"))?;
    }
    Ok("non-decreasing in T and rates".into())
}

fn mac_counter(_: bool) -> Result<String> {
    let cfg = small_cfg(2);
    let m = Model::init(ModelKind::Ann, cfg, 15)?;
    let toks = [1, 2, 3, 4, 5];
    let (_, counted) = count_macs(|| m.ann_forward(&toks));
    let formula = count_flops(&cfg, toks.len())?.total();
    ensure(counted == formula, || format!("counted {counted}, formula {formula}"))?;
    Ok(format!("{counted} MACs"))
}

// cli

struct TempDir(PathBuf);

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn temp_dir() -> Result<TempDir> {
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    let p = std::env::temp_dir().join(format!("bispik-selftest-{}-{nanos}", std::process::id()));
    std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    Ok(TempDir(p))
}

fn read(p: &Path) -> Result<Vec<u8>> {
    std::fs::read(p).map_err(|e| Error::io(p, e))
}

fn snapshot_reproduces(_: bool) -> Result<String> {
    let dir = temp_dir()?;
    let d = &dir.0;
    let corpus = d.join("corpus.txt");
    std::fs::write(&corpus, periodic_text("hello world ", 2000)).map_err(|e| Error::io(&corpus, e))?;
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let run = |args: Vec<String>| -> Result<()> {
        let mut argv = vec!["bispik".to_string()];
        argv.extend(args);
        let (mut o, mut e) = (Vec::new(), Vec::new());
        match crate::cli::run_command(&argv, &mut o, &mut e) {
            0 => Ok(()),
            c => Err(fail(format!("exit {c}: {}", String::from_utf8_lossy(&e).trim()))),
        }
    };
    let first = d.join("a.ckpt");
    run(vec![
        "train".into(),
        "--corpus".into(),
        s(&corpus),
        "--out".into(),
        s(&first),
        "--metrics".into(),
        s(&d.join("a.tsv")),
        "--steps".into(),
        "3".into(),
        "--set".into(),
        "model.d_model=8".into(),
        "--set".into(),
        "model.n_heads=2".into(),
        "--set".into(),
        "model.d_ff=16".into(),
        "--set".into(),
        "model.max_seq_len=16".into(),
        "--set".into(),
        "train.seq_len=16".into(),
    ])?;
    let snap = d.join("a.ckpt.config");
    let second = d.join("b.ckpt");
    run(vec![
        "train".into(),
        "--config".into(),
        s(&snap),
        "--out".into(),
        s(&second),
        "--metrics".into(),
        s(&d.join("b.tsv")),
    ])?;
    ensure(read(&first)? == read(&second)?, || "checkpoints differ".into())?;
    ensure(read(&d.join("a.tsv"))? == read(&d.join("b.tsv"))?, || "metrics differ".into())?;
    Ok("rerun from snapshot is bit-identical".into())
}
