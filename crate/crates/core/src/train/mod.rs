//! Learning rule for the hybrid network: per-step squared-error loss,
//! spatial error propagation with the surrogate derivative, and eligibility
//! traces that carry weight and leak sensitivities forward in time.

mod adam;
mod backward;
pub mod gradcheck;
mod init;
pub mod oracle;
mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use backward::{backward_step, sample_gradients, Eligibility, LayerTrace, SampleGradients};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use init::{init_group_map, init_model, init_weights};
pub use trainer::{
    evaluate, mean_loss, prepare_samples, EpochStats, EvalReport, PreparedSample, Sample, TrainOptions,
    Trainer,
};

use crate::error::{Error, Result};
use crate::network::group_members;
use crate::real::Real;

/// `L = ½ Σ (y − s)²` and its gradient `∂L/∂s = s − y`.
pub fn loss_mse<F: Real>(output: &[F], target: &[F]) -> Result<(F, Vec<F>)> {
    if output.len() != target.len() {
        return Err(Error::Shape(format!(
            "output has {} entries, target {}",
            output.len(),
            target.len()
        )));
    }
    let half = F::lit(0.5);
    let mut loss = F::zero();
    let grad = output
        .iter()
        .zip(target)
        .map(|(&s, &y)| {
            let d = s - y;
            loss += half * d * d;
            d
        })
        .collect();
    Ok((loss, grad))
}

/// Desired per-step output: `desired_count` on every neuron of the true
/// class's voting group, zero elsewhere.
pub fn target_encode<F: Real>(
    label: usize,
    group_map: &[usize],
    classes: usize,
    desired_count: u32,
) -> Result<Vec<F>> {
    if classes == 0 || !group_map.len().is_multiple_of(classes) {
        return Err(Error::Config(format!(
            "{} outputs cannot form {classes} voting groups",
            group_map.len()
        )));
    }
    if label >= classes {
        return Err(Error::Value(format!("label {label} >= class count {classes}")));
    }
    let mut y = vec![F::zero(); group_map.len()];
    let level = F::lit(f64::from(desired_count));
    for &i in group_members(group_map, classes, label) {
        y[i] = level;
    }
    Ok(y)
}
