//! Binary LIF and ternary spiking neurons, the arctangent surrogate, the
//! constant-drive firing-rate map and the eligibility-trace recursion.
//!
//! Binary LIF dynamics use a soft reset:
//!
//! ```text
//! U_t = I_t + β·U_{t−1} − S_{t−1}·U_thr
//! S_t = 1[U_t ≥ U_thr]
//! ```
//!
//! with `U_0 = 0`, `S_0 = 0`.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    /// Membrane decay β in (0, 1).
    pub beta: f64,
    /// Firing threshold.
    pub u_thr: f64,
    /// Sharpness of the arctangent surrogate.
    pub surrogate_alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { beta: 0.5, u_thr: 1.0, surrogate_alpha: 2.0 }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        // β = 1 is accepted for pure integrate-and-fire experiments.
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("lif.beta must be in (0, 1], got {}", self.beta)));
        }
        if !(self.u_thr > 0.0) {
            return Err(Error::Config(format!("lif.u_thr must be > 0, got {}", self.u_thr)));
        }
        if !(self.surrogate_alpha > 0.0) {
            return Err(Error::Config(format!(
                "lif.surrogate_alpha must be > 0, got {}",
                self.surrogate_alpha
            )));
        }
        Ok(())
    }
}

/// Ternary neuron emitting `{−α, 0, +α}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TernaryParams {
    /// Spike amplitude α, also the firing threshold magnitude.
    pub alpha: f64,
    pub u_reset: f64,
    /// Membrane decay applied when charging.
    pub beta: f64,
}

impl Default for TernaryParams {
    fn default() -> Self {
        Self { alpha: 1.0, u_reset: 0.0, beta: 0.5 }
    }
}

impl TernaryParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("ternary.alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!(
                "ternary.beta must be in (0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Membrane potential and last spike of a population of neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub u: Tensor,
    pub s_prev: Tensor,
}

impl NeuronState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { u: Tensor::zeros(shape), s_prev: Tensor::zeros(shape) }
    }

    fn check(&self, input: &Tensor) -> Result<()> {
        self.u.check_same_shape(&self.s_prev)?;
        self.u.check_same_shape(input)
    }
}

pub fn lif_step(
    state: &NeuronState,
    input_current: &Tensor,
    p: &LifParams,
) -> Result<(Tensor, NeuronState)> {
    state.check(input_current)?;
    let mut u = input_current.clone();
    for ((u, &prev), &s) in u.data_mut().iter_mut().zip(state.u.data()).zip(state.s_prev.data()) {
        *u += p.beta * prev - s * p.u_thr;
    }
    let spike = u.map(|x| if x >= p.u_thr { 1.0 } else { 0.0 });
    Ok((spike.clone(), NeuronState { u, s_prev: spike }))
}

/// Three-branch ternary level: `−α` below `−α`, `+α` above `+α`, else 0.
pub fn ternary_level(u: f64, amp: f64) -> f64 {
    if u > amp {
        amp
    } else if u < -amp {
        -amp
    } else {
        0.0
    }
}

/// One ternary step. Charges `U = I + β·U_prev`, emits the ternary level and
/// then applies the literal reset `U ← U·(α − S) + U_reset·S`.
pub fn ternary_step(
    state: &NeuronState,
    input_current: &Tensor,
    p: &TernaryParams,
) -> Result<(Tensor, NeuronState)> {
    state.check(input_current)?;
    let charged = input_current.zip_map(&state.u, |i, u| i + p.beta * u)?;
    let spike = charged.map(|u| ternary_level(u, p.alpha));
    let u = charged.zip_map(&spike, |u, s| u * (p.alpha - s) + p.u_reset * s)?;
    Ok((spike.clone(), NeuronState { u, s_prev: spike }))
}

pub fn surrogate_forward_scalar(u: f64, alpha: f64) -> f64 {
    (FRAC_PI_2 * alpha * u).atan() / PI + 0.5
}

pub fn surrogate_grad_scalar(u: f64, alpha: f64) -> f64 {
    let z = FRAC_PI_2 * alpha * u;
    0.5 * alpha / (1.0 + z * z)
}

/// `(1/π)·arctan((π/2)·α·u) + 1/2`, elementwise.
pub fn surrogate_forward(u: &Tensor, alpha: f64) -> Tensor {
    u.map(|x| surrogate_forward_scalar(x, alpha))
}

/// `(α/2) / (1 + ((π/2)·α·u)²)`, elementwise; bounded by `α/2`.
pub fn surrogate_grad(u: &Tensor, alpha: f64) -> Tensor {
    u.map(|x| surrogate_grad_scalar(x, alpha))
}

/// Spike train of a single LIF neuron under constant drive `a`, from rest.
pub fn constant_drive_spikes(a: f64, t_steps: usize, p: &LifParams) -> impl Iterator<Item = f64> {
    let mut u = 0.0;
    let mut s = 0.0;
    let (beta, thr) = (p.beta, p.u_thr);
    (0..t_steps).map(move |_| {
        u = a + beta * u - s * thr;
        s = if u >= thr { 1.0 } else { 0.0 };
        s
    })
}

/// Mean spike count over `t_steps` of a LIF neuron driven by constant `a`.
pub fn empirical_rate(a: f64, t_steps: usize, p: &LifParams) -> f64 {
    if t_steps == 0 {
        return 0.0;
    }
    constant_drive_spikes(a, t_steps, p).sum::<f64>() / t_steps as f64
}

/// `e_t = X_t + β·e_{t−1}`, `e_0 = 0`; returns `e_1..e_T`.
pub fn eligibility_trace(inputs: &[Tensor], beta: f64) -> Result<Vec<Tensor>> {
    let mut out: Vec<Tensor> = Vec::with_capacity(inputs.len());
    for x in inputs {
        let e = match out.last() {
            Some(prev) => x.add(&prev.scale(beta))?,
            None => x.clone(),
        };
        out.push(e);
    }
    Ok(out)
}

/// Eligibility trace of a soft-reset LIF neuron whose reset path stays in the
/// gradient: `e_t = X_t + (β − U_thr·σ'(U_{t−1} − U_thr))·e_{t−1}`, where
/// `slopes[t]` holds the surrogate derivative at step `t`.
pub fn eligibility_trace_with_reset(
    inputs: &[Tensor],
    slopes: &[Tensor],
    p: &LifParams,
) -> Result<Vec<Tensor>> {
    if inputs.len() != slopes.len() {
        return Err(Error::Dimension(format!(
            "{} inputs but {} surrogate slopes",
            inputs.len(),
            slopes.len()
        )));
    }
    let mut out: Vec<Tensor> = Vec::with_capacity(inputs.len());
    for (t, x) in inputs.iter().enumerate() {
        let e = match out.last() {
            Some(prev) => {
                let decay = slopes[t - 1].map(|s| p.beta - p.u_thr * s);
                x.add(&prev.mul(&decay)?)?
            }
            None => x.clone(),
        };
        out.push(e);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronMode {
    Binary,
    Ternary,
}

impl NeuronMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NeuronMode::Binary => "binary",
            NeuronMode::Ternary => "ternary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Self::Binary),
            "ternary" => Ok(Self::Ternary),
            other => Err(Error::Config(format!(
                "neuron_mode must be `binary` or `ternary`, got `{other}`"
            ))),
        }
    }
}

/// Settings shared by every neuron of a network on the tape.
#[derive(Clone, Copy, Debug)]
pub struct NeuronSpec {
    pub mode: NeuronMode,
    pub lif: LifParams,
    pub ternary: TernaryParams,
    /// Replace the hard threshold with the surrogate curve in the forward pass.
    pub relaxed: bool,
    /// Stop gradients through the `−S_{t−1}·U_thr` reset term.
    pub detach_reset: bool,
}

impl NeuronSpec {
    pub fn binary(lif: LifParams) -> Self {
        Self {
            mode: NeuronMode::Binary,
            lif,
            ternary: TernaryParams::default(),
            relaxed: false,
            detach_reset: false,
        }
    }
}

/// A population of neurons recorded on a [`Graph`], carrying its membrane
/// state across successive calls to [`SpikingLayer::step`].
#[derive(Clone, Debug)]
pub struct SpikingLayer {
    spec: NeuronSpec,
    threshold: f64,
    state: Option<(Var, Var)>,
}

impl SpikingLayer {
    pub fn new(spec: NeuronSpec) -> Self {
        let threshold = spec.lif.u_thr;
        Self { spec, threshold, state: None }
    }

    /// Same dynamics with a different binary firing threshold.
    pub fn with_threshold(spec: NeuronSpec, threshold: f64) -> Self {
        Self { spec, threshold, state: None }
    }

    pub fn reset(&mut self) {
        self.state = None;
    }

    /// Seeds the membrane from a plain state.
    pub fn load_state(&mut self, g: &mut Graph, st: &NeuronState) {
        let u = g.constant(st.u.clone());
        let s = g.constant(st.s_prev.clone());
        self.state = Some((u, s));
    }

    /// Current membrane and last spike, if the layer has stepped.
    pub fn export_state(&self, g: &Graph) -> Option<NeuronState> {
        self.state
            .map(|(u, s)| NeuronState { u: g.value(u).clone(), s_prev: g.value(s).clone() })
    }

    /// Advances one time step with input current `input`; returns the spikes.
    pub fn step(&mut self, g: &mut Graph, input: Var) -> Result<Var> {
        let spec = self.spec;
        match spec.mode {
            NeuronMode::Binary => {
                let u = match self.state {
                    None => input,
                    Some((u_prev, s_prev)) => {
                        let decayed = g.scale(u_prev, spec.lif.beta);
                        let s_prev = if spec.detach_reset { g.detach(s_prev) } else { s_prev };
                        let reset = g.scale(s_prev, self.threshold);
                        let charged = g.add(input, decayed)?;
                        g.sub(charged, reset)?
                    }
                };
                let s = g.spike(u, self.threshold, spec.lif.surrogate_alpha, spec.relaxed);
                self.state = Some((u, s));
                Ok(s)
            }
            NeuronMode::Ternary => {
                let tp = spec.ternary;
                let u = match self.state {
                    None => input,
                    Some((u_post, _)) => {
                        let decayed = g.scale(u_post, tp.beta);
                        g.add(input, decayed)?
                    }
                };
                let s = g.ternary_spike(u, tp.alpha, spec.lif.surrogate_alpha, spec.relaxed);
                let s_r = if spec.detach_reset { g.detach(s) } else { s };
                let neg = g.scale(s_r, -1.0);
                let keep = g.add_scalar(neg, tp.alpha);
                let kept = g.mul(u, keep)?;
                let post = if tp.u_reset != 0.0 {
                    let r = g.scale(s_r, tp.u_reset);
                    g.add(kept, r)?
                } else {
                    kept
                };
                self.state = Some((post, s));
                Ok(s)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, Rng};
    use proptest::prelude::*;

    fn scalar_run(inputs: &[f64], p: &LifParams) -> (Vec<f64>, Vec<f64>) {
        let mut state = NeuronState::zeros(&[1]);
        let mut spikes = Vec::new();
        let mut us = Vec::new();
        for &i in inputs {
            let (s, next) = lif_step(&state, &Tensor::new(&[1], vec![i]).unwrap(), p).unwrap();
            spikes.push(s.item());
            us.push(next.u.item());
            state = next;
        }
        (spikes, us)
    }

    #[test]
    fn zero_input_stays_silent() {
        let (s, u) = scalar_run(&[0.0; 8], &LifParams::default());
        assert!(s.iter().all(|&x| x == 0.0));
        assert!(u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_crosses_threshold() {
        let p = LifParams { beta: 0.5, u_thr: 1.0, surrogate_alpha: 2.0 };
        let (s, u) = scalar_run(&[2.0], &p);
        assert_eq!((s[0], u[0]), (1.0, 2.0));
    }

    #[test]
    fn integrate_and_fire_alternates() {
        let p = LifParams { beta: 1.0, u_thr: 1.0, surrogate_alpha: 2.0 };
        let (s, u) = scalar_run(&[0.5; 4], &p);
        assert_eq!(s, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(u, vec![0.5, 1.0, 0.5, 1.0]);
    }

    #[test]
    fn lif_shape_mismatch_is_error() {
        let st = NeuronState::zeros(&[2]);
        assert!(lif_step(&st, &Tensor::zeros(&[3]), &LifParams::default()).is_err());
    }

    #[test]
    fn ternary_branches() {
        let p = TernaryParams::default();
        let st = NeuronState::zeros(&[5]);
        let input = Tensor::new(&[5], vec![-2.0, -1.0, 0.3, 1.0, 2.0]).unwrap();
        let (s, next) = ternary_step(&st, &input, &p).unwrap();
        assert_eq!(s.data(), &[-1.0, 0.0, 0.0, 0.0, 1.0]);
        // U = 2 fires +1 and resets to 2·(1 − 1) + 0·1 = 0.
        assert_eq!(next.u.data()[4], 0.0);
        // Silent neurons keep U·α.
        assert_eq!(next.u.data()[2], 0.3);
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_forward_scalar(0.0, 2.0), 0.5);
        assert!(surrogate_forward_scalar(1e9, 2.0) > 1.0 - 1e-9);
        assert!(surrogate_forward_scalar(-1e9, 2.0) < 1e-9);
        let expect = PI.atan() / PI + 0.5;
        assert!((surrogate_forward_scalar(1.0, 2.0) - expect).abs() < 1e-15);
        assert_eq!(surrogate_grad_scalar(0.0, 2.0), 1.0);
        let expect = 1.0 / (1.0 + PI * PI);
        assert!((surrogate_grad_scalar(1.0, 2.0) - expect).abs() < 1e-15);
    }

    #[test]
    fn surrogate_grad_matches_finite_difference_at_zero() {
        let g = finite_diff_grad(
            |t| surrogate_forward_scalar(t.item(), 2.0),
            &Tensor::scalar(0.0),
            1e-4,
        )
        .unwrap();
        assert!((g.item() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn rate_examples() {
        let p = LifParams::default();
        assert_eq!(empirical_rate(0.0, 16, &p), 0.0);
        assert_eq!(empirical_rate(1.0, 4, &p), 0.5);
        let spikes: Vec<f64> = constant_drive_spikes(1.0, 4, &p).collect();
        assert_eq!(spikes, vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn eligibility_examples() {
        let ones: Vec<Tensor> = (0..3).map(|_| Tensor::scalar(1.0)).collect();
        let e = eligibility_trace(&ones, 0.5).unwrap();
        let v: Vec<f64> = e.iter().map(|t| t.item()).collect();
        assert_eq!(v, vec![1.0, 1.5, 1.75]);
        let zeros: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(&[2])).collect();
        assert!(eligibility_trace(&zeros, 0.5).unwrap().iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn subthreshold_membrane_decays_without_spiking() {
        let p = LifParams::default();
        let mut st = NeuronState { u: Tensor::scalar(0.9), s_prev: Tensor::scalar(0.0) };
        let mut last = 0.9;
        for _ in 0..40 {
            let (s, next) = lif_step(&st, &Tensor::scalar(0.0), &p).unwrap();
            assert_eq!(s.item(), 0.0);
            assert!(next.u.item() < last || next.u.item() == 0.0);
            last = next.u.item();
            st = next;
        }
        assert!(last.abs() < 1e-9);
    }

    #[test]
    fn tape_neuron_matches_plain_dynamics() {
        let mut rng = Rng::seed(17);
        let inputs: Vec<Tensor> = (0..6)
            .map(|_| Tensor::new(&[3], (0..3).map(|_| rng.uniform_range(-0.5, 2.0)).collect()).unwrap())
            .collect();
        let p = LifParams::default();
        let mut g = Graph::new();
        let mut layer = SpikingLayer::new(NeuronSpec::binary(p));
        let mut st = NeuronState::zeros(&[3]);
        for x in &inputs {
            let v = g.constant(x.clone());
            let s = layer.step(&mut g, v).unwrap();
            let (s_ref, next) = lif_step(&st, x, &p).unwrap();
            assert_eq!(g.value(s), &s_ref);
            st = next;
        }

        let tp = TernaryParams::default();
        let spec = NeuronSpec { mode: NeuronMode::Ternary, ..NeuronSpec::binary(p) };
        let mut layer = SpikingLayer::new(spec);
        let mut st = NeuronState::zeros(&[3]);
        for x in &inputs {
            let v = g.constant(x.scale(2.0));
            let s = layer.step(&mut g, v).unwrap();
            let (s_ref, next) = ternary_step(&st, &x.scale(2.0), &tp).unwrap();
            assert_eq!(g.value(s), &s_ref);
            st = next;
        }
    }

    proptest! {
        #[test]
        fn lif_outputs_are_binary(inputs in proptest::collection::vec(-3.0f64..3.0, 1..32)) {
            let (s, _) = scalar_run(&inputs, &LifParams::default());
            prop_assert!(s.iter().all(|&x| x == 0.0 || x == 1.0));
        }

        #[test]
        fn surrogate_grad_bounded(u in -50.0f64..50.0, alpha in 0.1f64..8.0) {
            let g = surrogate_grad_scalar(u, alpha);
            prop_assert!(g > 0.0 && g <= alpha / 2.0);
        }

        #[test]
        fn eligibility_bounded(xs in proptest::collection::vec(-1.0f64..1.0, 1..64), beta in 0.05f64..0.95) {
            let inputs: Vec<Tensor> = xs.iter().map(|&x| Tensor::scalar(x)).collect();
            for e in eligibility_trace(&inputs, beta).unwrap() {
                prop_assert!(e.item().abs() <= 1.0 / (1.0 - beta) + 1e-12);
            }
        }
    }
}
