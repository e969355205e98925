//! Cell dynamics: the first-order synaptic layer whose decay adapts to the
//! fraction of active channels, and the parametric multi-threshold LIF
//! neuron (PMLIF) with its Gaussian-comb surrogate derivative.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Neuron hyperparameters shared by every PMLIF layer of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronParams {
    /// Firing threshold (mV).
    pub v_th: f64,
    /// Upper limit on spikes emitted per step.
    pub s_max: u32,
    /// Peak height of each surrogate bump.
    pub alpha_h: f64,
    /// Width parameter of each surrogate bump.
    pub alpha_w: f64,
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            v_th: 10.0,
            s_max: 15,
            alpha_h: 1.0,
            alpha_w: 20.0,
        }
    }
}

impl NeuronParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_th > 0.0 && self.v_th.is_finite()) {
            return Err(Error::Config(format!("V_th must be positive, got {}", self.v_th)));
        }
        if self.s_max < 1 {
            return Err(Error::Config("S_max must be >= 1".into()));
        }
        if !(self.alpha_w > 0.0 && self.alpha_w.is_finite()) {
            return Err(Error::Config(format!("alpha_W must be positive, got {}", self.alpha_w)));
        }
        if !self.alpha_h.is_finite() {
            return Err(Error::Config("alpha_H must be finite".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// d/dx sigmoid(x) = sigmoid(x)·(1 − sigmoid(x)).
#[inline]
pub fn sigmoid_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() - s)
}

/// Multi-threshold spike function: 0 below `v_th`, `floor(u / v_th)` in
/// between, and `s_max` once `u >= s_max · v_th`.
#[inline]
pub fn spike_count<F: Real>(u: F, v_th: F, s_max: u32) -> u32 {
    if u < v_th {
        return 0;
    }
    if u >= v_th * F::lit(f64::from(s_max)) {
        return s_max;
    }
    // floor(u/v_th) < s_max here, but guard against rounding at the boundary
    (u / v_th).floor().to_u32().unwrap_or(0).min(s_max)
}

/// Sum of `s_max` Gaussians of height `alpha_h` centred at `i · v_th`.
#[inline]
pub fn surrogate_grad<F: Real>(u: F, p: &NeuronParams) -> F {
    let v_th = F::lit(p.v_th);
    let width = F::lit(p.alpha_w);
    let height = F::lit(p.alpha_h);
    (1..=p.s_max)
        .map(|i| {
            let d = u - F::lit(f64::from(i)) * v_th;
            height * (-(d * d) / width).exp()
        })
        .sum()
}

/// Running synaptic current of one synaptic layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SynapseState<F> {
    pub current: Tensor<F>,
}

impl<F: Real> SynapseState<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            current: Tensor::zeros(shape),
        }
    }
}

/// Fraction of channels (leading axis) holding at least one exact nonzero.
pub fn active_channel_fraction<F: Real>(input: &Tensor<F>) -> Result<F> {
    let channels = *input
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("synaptic input must have a channel axis".into()))?;
    if channels == 0 {
        return Err(Error::Shape("synaptic input has zero channels".into()));
    }
    let per = input.len() / channels;
    let valid = input
        .data()
        .chunks_exact(per.max(1))
        .filter(|ch| ch.iter().any(|v| *v != F::zero()))
        .count();
    Ok(F::lit(valid as f64) / F::lit(channels as f64))
}

/// `I_syn[t] = d · I_syn[t-1] + I_in[t]` with `d = C_valid / C_total`
/// counted on the incoming current. Returns the new current and `d`.
pub fn synaptic_step<F: Real>(
    state: &SynapseState<F>,
    input: &Tensor<F>,
) -> Result<(Tensor<F>, F)> {
    if state.current.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "synaptic state {:?} vs input {:?}",
            state.current.shape(),
            input.shape()
        )));
    }
    let decay = active_channel_fraction(input)?;
    let next = state.current.zip_map(input, |prev, inp| decay * prev + inp)?;
    Ok((next, decay))
}

/// Membrane state and leak weights of one PMLIF layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PmlifState<F> {
    /// Post-reset membrane potential.
    pub u: Tensor<F>,
    /// Leak weights; the per-step leak factor is `sigmoid(w_m)`.
    pub w_m: Tensor<F>,
}

/// Result of one PMLIF update.
#[derive(Debug, Clone, PartialEq)]
pub struct PmlifStep<F> {
    /// Potential before the soft reset; spikes are computed from it.
    pub u_pre: Tensor<F>,
    pub spikes: Vec<u32>,
    pub state: PmlifState<F>,
}

/// `u_pre = sigmoid(w_m)·u + I`, `s = spike_count(u_pre)`,
/// `u_new = u_pre − s·V_th`.
pub fn pmlif_step<F: Real>(
    state: &PmlifState<F>,
    current: &Tensor<F>,
    p: &NeuronParams,
) -> Result<PmlifStep<F>> {
    if state.u.len() != current.len() || state.w_m.len() != current.len() {
        return Err(Error::Shape(format!(
            "PMLIF state has {} neurons ({} leak weights), input has {}",
            state.u.len(),
            state.w_m.len(),
            current.len()
        )));
    }
    let v_th = F::lit(p.v_th);
    let n = current.len();
    let mut u_pre = Vec::with_capacity(n);
    let mut spikes = Vec::with_capacity(n);
    let mut u_new = Vec::with_capacity(n);
    for ((&u, &w), &i) in state.u.data().iter().zip(state.w_m.data()).zip(current.data()) {
        let pre = sigmoid(w) * u + i;
        let s = spike_count(pre, v_th, p.s_max);
        u_pre.push(pre);
        spikes.push(s);
        u_new.push(pre - F::lit(f64::from(s)) * v_th);
    }
    let shape = state.u.shape().to_vec();
    Ok(PmlifStep {
        u_pre: Tensor::from_vec(&shape, u_pre)?,
        spikes,
        state: PmlifState {
            u: Tensor::from_vec(&shape, u_new)?,
            w_m: state.w_m.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(u: f64, w: f64) -> PmlifState<f64> {
        PmlifState {
            u: Tensor::full(&[1], u),
            w_m: Tensor::full(&[1], w),
        }
    }

    #[test]
    fn spike_count_examples() {
        assert_eq!(spike_count(9.99f64, 10.0, 15), 0);
        assert_eq!(spike_count(25.0f64, 10.0, 15), 2);
        assert_eq!(spike_count(150.0f64, 10.0, 15), 15);
        assert_eq!(spike_count(149.999f64, 10.0, 15), 14);
        assert_eq!(spike_count(-3.0f64, 10.0, 15), 0);
        assert_eq!(spike_count(10.0f32, 10.0, 15), 1);
    }

    /// Direct summation of the Gaussian comb, written out independently.
    fn comb(u: f64) -> f64 {
        (1..=15)
            .map(|i| (-((u - 10.0 * i as f64).powi(2)) / 20.0).exp())
            .sum()
    }

    #[test]
    fn surrogate_examples() {
        let p = NeuronParams::default();
        let f10 = surrogate_grad(10.0f64, &p);
        assert!((f10 - 1.006738).abs() < 1e-5, "{f10}");
        assert!((f10 - comb(10.0)).abs() < 1e-14);
        let f15 = surrogate_grad(15.0f64, &p);
        assert!((f15 - 0.57307).abs() < 1e-4, "{f15}");
        assert!((f15 - comb(15.0)).abs() < 1e-14);
        assert_eq!(surrogate_grad(-1e6f64, &p), 0.0);
    }

    #[test]
    fn pmlif_examples() {
        let p = NeuronParams::default();
        let zero = pmlif_step(&state(0.0, 0.0), &Tensor::full(&[1], 0.0), &p).unwrap();
        assert_eq!(zero.spikes, vec![0]);
        assert_eq!(zero.state.u.data(), &[0.0]);

        let r = pmlif_step(&state(20.0, 0.0), &Tensor::full(&[1], 15.0), &p).unwrap();
        assert_eq!(r.u_pre.data(), &[25.0]);
        assert_eq!(r.spikes, vec![2]);
        assert_eq!(r.state.u.data(), &[5.0]);

        let big = pmlif_step(&state(0.0, 0.0), &Tensor::full(&[1], 1e4), &p).unwrap();
        assert_eq!(big.spikes, vec![15]);
        assert_eq!(big.state.u.data(), &[1e4 - 150.0]);
    }

    #[test]
    fn pmlif_shape_mismatch() {
        let p = NeuronParams::default();
        assert!(pmlif_step(&state(0.0, 0.0), &Tensor::zeros(&[2]), &p).is_err());
    }

    #[test]
    fn synaptic_examples() {
        let prev = SynapseState {
            current: Tensor::full(&[2, 1, 2], 2.0f64),
        };
        let all = Tensor::full(&[2, 1, 2], 1.0);
        let (out, d) = synaptic_step(&prev, &all).unwrap();
        assert_eq!(d, 1.0);
        assert!(out.data().iter().all(|v| *v == 3.0));

        let none = Tensor::zeros(&[2, 1, 2]);
        let (out, d) = synaptic_step(&prev, &none).unwrap();
        assert_eq!(d, 0.0);
        assert!(out.data().iter().all(|v| *v == 0.0));

        let half = Tensor::from_vec(&[2, 1, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let (out, d) = synaptic_step(&prev, &half).unwrap();
        assert_eq!(d, 0.5);
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 1.0]);

        assert!(synaptic_step(&prev, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn synaptic_geometric_decay() {
        let mut s = SynapseState {
            current: Tensor::full(&[4, 1, 1], 8.0f64),
        };
        // two of four channels active with negligible input: d stays 0.5
        let tiny = Tensor::from_vec(&[4, 1, 1], vec![1e-300, 1e-300, 0.0, 0.0]).unwrap();
        for step in 1..=5 {
            let (next, d) = synaptic_step(&s, &tiny).unwrap();
            assert_eq!(d, 0.5);
            assert!((next.data()[3] - 8.0 * 0.5f64.powi(step)).abs() < 1e-12);
            s.current = next;
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid_grad(0.0f64), 0.25);
    }

    proptest! {
        #[test]
        fn spike_count_monotone(a in -200.0f64..400.0, b in -200.0f64..400.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(spike_count(lo, 10.0, 15) <= spike_count(hi, 10.0, 15));
            if hi >= 150.0 {
                prop_assert_eq!(spike_count(hi, 10.0, 15), 15);
            }
        }

        #[test]
        fn surrogate_positive_and_bounded(u in -50.0f64..200.0) {
            let p = NeuronParams::default();
            let f = surrogate_grad(u, &p);
            let bound = 1.0 + 2.0 * (1..20).map(|m| (-((10.0 * m as f64).powi(2)) / 20.0).exp()).sum::<f64>();
            prop_assert!(f >= 0.0 && f <= bound);
            if u > -20.0 {
                prop_assert!(f > 0.0);
            }
        }

        #[test]
        fn leak_is_a_contraction(w in -30.0f64..30.0) {
            let s = sigmoid(w);
            prop_assert!(s > 0.0 && s < 1.0);
        }

        #[test]
        fn decay_in_unit_interval(v in prop::collection::vec(prop_oneof![Just(0.0f64), -5.0f64..5.0], 6)) {
            let x = Tensor::from_vec(&[3, 1, 2], v).unwrap();
            let d = active_channel_fraction(&x).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
