//! Leaky integrate-and-fire dynamics and the spike nonlinearity.
//!
//! One LIF update on input current `I` and carried state `H`:
//!
//! ```text
//! U = I + H
//! S = Θ(U − u_th)
//! H' = β·U·(1 − S) + u_reset·S
//! ```
//!
//! `Θ` is a hard step in the forward pass. Its backward pass uses the arctan
//! surrogate `g(x) = α / (2·(1 + (π/2·α·x)²))`.

use std::f64::consts::FRAC_PI_2;

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::opcount;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    /// Membrane decay per sub-step.
    pub beta: f32,
    pub u_th: f32,
    pub u_reset: f32,
    /// Surrogate sharpness.
    pub alpha: f32,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            beta: 0.5,
            u_th: 1.0,
            u_reset: 0.0,
            alpha: 2.0,
        }
    }
}

impl LifParams {
    /// `β = 1` is accepted and gives a non-leaky integrator.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::contract(format!("LIF beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.u_th > self.u_reset) {
            return Err(Error::contract(format!(
                "LIF threshold {} must exceed reset {}",
                self.u_th, self.u_reset
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::contract(format!("surrogate alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Derivative used in place of `Θ'(x)`.
pub fn surrogate_grad(x: f64, alpha: f64) -> f64 {
    let z = FRAC_PI_2 * alpha * x;
    alpha / (2.0 * (1.0 + z * z))
}

/// `Θ(x)` with `Θ(0) = 1`, differentiated through [`surrogate_grad`].
pub fn heaviside<T: Real>(x: &Tensor<T>, alpha: f32) -> Tensor<T> {
    let a = alpha as f64;
    x.custom_unary(
        "heaviside",
        |v| if v >= T::zero() { T::one() } else { T::zero() },
        move |input, g| {
            input
                .iter()
                .zip(g)
                .map(|(&v, &gv)| gv * T::lit(surrogate_grad(v.to_f64_lossy(), a)))
                .collect()
        },
    )
}

/// Carried membrane state `H`.
#[derive(Debug, Clone)]
pub struct LifState<T: Real = f32> {
    pub h: Tensor<T>,
}

impl<T: Real> LifState<T> {
    /// All neurons at the reset potential.
    pub fn resting(shape: &[usize], params: &LifParams) -> Self {
        LifState {
            h: Tensor::full(shape, T::lit(params.u_reset as f64)),
        }
    }
}

/// One integrate–fire–reset update. Returns the spikes and the next state.
pub fn lif_step<T: Real>(
    params: &LifParams,
    state: &LifState<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, LifState<T>)> {
    let u = input.add(&state.h)?;
    let spikes = heaviside(&u.add_scalar(T::lit(-(params.u_th as f64))), params.alpha);
    let keep = spikes.scale(-T::one()).add_scalar(T::one());
    let mut h = u.scale(T::lit(params.beta as f64)).mul(&keep)?;
    if params.u_reset != 0.0 {
        h = h.add(&spikes.scale(T::lit(params.u_reset as f64)))?;
    }
    if opcount::is_active() {
        let fired = spikes.data().iter().filter(|&&v| v == T::one()).count();
        opcount::record_neurons(spikes.numel() as u64, fired as u64);
    }
    Ok((spikes, LifState { h }))
}

/// A population of LIF neurons whose state persists across calls.
#[derive(Debug, Clone)]
pub struct LifLayer<T: Real = f32> {
    params: LifParams,
    state: Option<LifState<T>>,
}

impl<T: Real> LifLayer<T> {
    pub fn new(params: LifParams) -> Self {
        LifLayer { params, state: None }
    }

    pub fn fire(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let state = match self.state.take() {
            Some(s) => s,
            None => LifState::resting(input.shape(), &self.params),
        };
        let (spikes, next) = lif_step(&self.params, &state, input)?;
        self.state = Some(next);
        Ok(spikes)
    }

    pub fn state(&self) -> Option<&LifState<T>> {
        self.state.as_ref()
    }
}

/// Binary tensor of shape `(steps, ...)`.
#[derive(Debug, Clone)]
pub struct SpikeTrain<T: Real = f32> {
    values: Tensor<T>,
}

impl<T: Real> SpikeTrain<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() == 0 {
            return Err(Error::contract("spike train needs a leading step axis"));
        }
        if !is_binary(values.data()) {
            return Err(Error::contract("spike train entries must be 0 or 1"));
        }
        Ok(SpikeTrain { values })
    }

    pub fn from_frames(frames: &[Tensor<T>]) -> Result<Self> {
        let refs: Vec<&Tensor<T>> = frames.iter().collect();
        Self::new(Tensor::stack(&refs, 0)?)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frame(&self, step: usize) -> Result<Tensor<T>> {
        self.values.select(0, step)
    }

    pub fn frames(&self) -> Result<Vec<Tensor<T>>> {
        (0..self.steps()).map(|s| self.frame(s)).collect()
    }

    /// Fraction of entries that are spikes.
    pub fn rate(&self) -> f64 {
        let ones = self.values.data().iter().filter(|&&v| v == T::one()).count();
        ones as f64 / self.values.numel().max(1) as f64
    }
}

pub fn is_binary<T: Real>(values: &[T]) -> bool {
    values.iter().all(|&v| v == T::zero() || v == T::one())
}

/// Encodes a continuous value held for one series step as `ts` spike frames:
/// an LIF neuron starting at rest is driven by the constant current `h` for
/// `ts` sub-steps.
pub fn spike_encode_frames<T: Real>(h: &Tensor<T>, ts: usize, params: &LifParams) -> Result<Vec<Tensor<T>>> {
    if ts < 1 {
        return Err(Error::contract("spike_encode needs at least one sub-step"));
    }
    let mut layer = LifLayer::new(*params);
    (0..ts).map(|_| layer.fire(h)).collect()
}

/// [`spike_encode_frames`] stacked into a train of shape `(ts, ..h.shape)`.
pub fn spike_encode<T: Real>(h: &Tensor<T>, ts: usize, params: &LifParams) -> Result<SpikeTrain<T>> {
    SpikeTrain::from_frames(&spike_encode_frames(h, ts, params)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn params(beta: f32) -> LifParams {
        LifParams {
            beta,
            u_th: 1.0,
            u_reset: 0.0,
            alpha: 2.0,
        }
    }

    fn scalar_state(h: f32) -> LifState {
        LifState {
            h: Tensor::from_slice(&[1], &[h]).unwrap(),
        }
    }

    #[test]
    fn suprathreshold_input_fires_and_resets() {
        let input = Tensor::from_slice(&[1], &[1.2]).unwrap();
        let (s, next) = lif_step(&params(0.5), &scalar_state(0.0), &input).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert_eq!(next.h.data(), &[0.0]);
    }

    #[test]
    fn subthreshold_input_leaks() {
        let input = Tensor::from_slice(&[1], &[0.4]).unwrap();
        let (s, next) = lif_step(&params(0.5), &scalar_state(0.0), &input).unwrap();
        assert_eq!(s.data(), &[0.0]);
        assert!((next.h.data()[0] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn zero_input_decays_geometrically() {
        let p = params(0.5);
        let h0 = 0.9f32;
        let mut state = scalar_state(h0);
        let zero = Tensor::zeros(&[1]);
        for t in 1..=20 {
            let (s, next) = lif_step(&p, &state, &zero).unwrap();
            assert_eq!(s.data(), &[0.0]);
            assert!((next.h.data()[0] - 0.5f32.powi(t) * h0).abs() < 1e-6);
            state = next;
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let input = Tensor::zeros(&[2]);
        assert!(matches!(
            lif_step(&params(0.5), &scalar_state(0.0), &input),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn heaviside_forward_is_inclusive_step() {
        let x = Tensor::from_slice(&[3], &[-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(heaviside(&x, 2.0).data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_grad(0.0, 2.0), 1.0);
        let expected = 2.0 / (2.0 * (1.0 + std::f64::consts::PI.powi(2)));
        assert!((surrogate_grad(1.0, 2.0) - expected).abs() < 1e-15);
        assert!((surrogate_grad(1.0, 2.0) - 0.0920).abs() < 1e-4);
    }

    #[test]
    fn heaviside_backward_uses_surrogate() {
        let x = Tensor::param(&[2], vec![0.0f32, 1.0]).unwrap();
        heaviside(&x, 2.0).sum().backward().unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 1.0).abs() < 1e-7);
        assert!((g[1] as f64 - surrogate_grad(1.0, 2.0)).abs() < 1e-7);
    }

    #[test]
    fn surrogate_shape() {
        let alpha = 2.0;
        assert!(surrogate_grad(0.3, alpha) == surrogate_grad(-0.3, alpha));
        let mut prev = surrogate_grad(0.0, alpha);
        for i in 1..200 {
            let v = surrogate_grad(i as f64 * 0.05, alpha);
            assert!(v < prev);
            prev = v;
        }
        // Trapezoid rule over [-50, 50]; the tails beyond carry ~0.4% of the mass.
        let n = 200_000;
        let (a, b) = (-50.0, 50.0);
        let dx = (b - a) / n as f64;
        let integral: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * surrogate_grad(a + i as f64 * dx, alpha)
            })
            .sum::<f64>()
            * dx;
        assert!((integral - 1.0).abs() < 1e-2, "{integral}");
    }

    #[test]
    fn encode_zero_is_silent() {
        let h = Tensor::<f32>::zeros(&[3, 2]);
        let train = spike_encode(&h, 5, &LifParams::default()).unwrap();
        assert_eq!(train.values().shape(), &[5, 3, 2]);
        assert_eq!(train.rate(), 0.0);
    }

    #[test]
    fn encode_strong_input_fires_every_step() {
        let h = Tensor::full(&[2, 2], 10.0f32);
        for beta in [0.1, 0.5, 0.9] {
            let train = spike_encode(&h, 6, &params(beta)).unwrap();
            assert_eq!(train.rate(), 1.0);
        }
    }

    #[test]
    fn encode_rate_pattern_matches_simulation() {
        // Step-by-step oracle: U = 0.6 + H, fire at U >= 1, non-leaky reset to 0.
        let mut h = 0.0f64;
        let mut oracle = Vec::new();
        for _ in 0..4 {
            let u = 0.6 + h;
            let s = if u >= 1.0 { 1.0 } else { 0.0 };
            h = u * (1.0 - s);
            oracle.push(s as f32);
        }
        assert_eq!(oracle, vec![0.0, 1.0, 0.0, 1.0]);
        let x = Tensor::from_slice(&[1], &[0.6f32]).unwrap();
        let train = spike_encode(&x, 4, &params(1.0)).unwrap();
        assert_eq!(train.values().data(), oracle.as_slice());
    }

    #[test]
    fn encode_rejects_zero_steps() {
        assert!(matches!(
            spike_encode(&Tensor::<f32>::zeros(&[1]), 0, &LifParams::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn params_validation() {
        assert!(LifParams::default().validate().is_ok());
        assert!(params(1.0).validate().is_ok());
        assert!(params(0.0).validate().is_err());
        assert!(LifParams { u_th: 0.0, ..LifParams::default() }.validate().is_err());
        assert!(LifParams { alpha: 0.0, ..LifParams::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn outputs_are_binary_and_reset_exact(seed in any::<u64>(), beta in 0.05f32..0.99) {
            let p = LifParams { beta, u_th: 1.0, u_reset: -0.25, alpha: 2.0 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = LifState::resting(&[8], &p);
            for _ in 0..50 {
                let input: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..2.0)).collect();
                let (s, next) = lif_step(&p, &state, &Tensor::new(&[8], input).unwrap()).unwrap();
                prop_assert!(is_binary(s.data()));
                for (sv, hv) in s.data().iter().zip(next.h.data()) {
                    if *sv == 1.0 {
                        prop_assert_eq!(*hv, -0.25);
                    }
                }
                state = next;
            }
        }

        #[test]
        fn more_current_never_removes_a_spike(h in -2.0f32..2.0, i in -2.0f32..3.0, extra in 0.0f32..3.0) {
            let p = LifParams::default();
            let one = |current: f32| {
                let (s, _) = lif_step(&p, &scalar_state(h), &Tensor::from_slice(&[1], &[current]).unwrap()).unwrap();
                s.data()[0]
            };
            prop_assert!(one(i + extra) >= one(i));
        }
    }
}
