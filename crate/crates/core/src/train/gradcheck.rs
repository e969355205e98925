//! Gradient verification against the reference implementation and against
//! central finite differences.

use super::backward::sample_gradients;
use super::oracle::oracle_gradients;
use super::{init_model, loss_mse, target_encode};
use crate::error::{Error, Result};
use crate::network::{
    parse_arch, Ablation, ForwardOptions, LayerParams, LayerRecord, LayerSpec, Mode, Model,
    ModelSpec, Params,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_PARAMS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub oracle_tolerance: f64,
    pub fd_tolerance: f64,
    /// Seed of the dropout masks.
    pub seed: u64,
    /// Corrupts the production gradient of this block before comparing.
    pub fault_block: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            oracle_tolerance: 1e-10,
            fd_tolerance: 1e-4,
            seed: 0,
            fault_block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    pub oracle_error: f64,
    /// `None` when the block is not on a differentiable sub-path.
    pub fd_error: Option<f64>,
    /// Entries left out of the finite-difference check because a
    /// perturbation crossed a ReLU kink.
    pub fd_skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub max_oracle_error: f64,
    pub max_fd_error: f64,
    /// Names of the blocks exceeding a tolerance.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = inf(a).max(inf(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn relu_pattern(trace: &crate::network::ForwardTrace<f64>) -> Vec<bool> {
    let mut out = Vec::new();
    for step in &trace.steps {
        for rec in &step.layers {
            if let LayerRecord::Conv { pre, .. }
            | LayerRecord::SynapticConv {
                pre, decay: None, ..
            } = rec
            {
                out.extend(pre.data().iter().map(|v| *v > 0.0));
            }
        }
    }
    out
}

/// Input of the lowest PMLIF layer at every step.
fn front_activations(model: &Model<f64>, trace: &crate::network::ForwardTrace<f64>) -> Vec<Tensor<f64>> {
    let first = model
        .spec
        .config
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::DensePmlif { .. }))
        .expect("network has a dense layer");
    trace
        .steps
        .iter()
        .map(|s| match &s.layers[first] {
            LayerRecord::Dense { input, .. } => input.clone(),
            _ => unreachable!("dense layer records a dense entry"),
        })
        .collect()
}

/// Checks the production gradient of one sample against the reference
/// implementation and, for parameters in front of the first PMLIF layer (or
/// all parameters when there is none), against central finite differences.
///
/// Spikes are not differentiable, so with PMLIF layers present the
/// finite-difference target is `Σ_t ⟨g_t, a_t(θ)⟩`, where `a_t` is the input
/// of the lowest PMLIF layer and `g_t` its production gradient. Synaptic
/// decays are held at their unperturbed values.
pub fn grad_check(
    model: &Model<f64>,
    inputs: &[Tensor<f64>],
    label: usize,
    desired_count: u32,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let count = model.params.count();
    if count > MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradient check needs at most {MAX_PARAMS} parameters, model has {count}"
        )));
    }
    let mode = Mode::Train;
    let base = sample_gradients(
        model,
        inputs,
        label,
        desired_count,
        mode,
        opts.seed,
        &ForwardOptions::default(),
    )?;
    let mut prod: Vec<(String, Vec<f64>)> = base
        .grads
        .blocks()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    if let Some(b) = opts.fault_block {
        let (_, g) = prod
            .get_mut(b)
            .ok_or_else(|| Error::Argument(format!("fault block {b} out of range")))?;
        let bump = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0) * 0.1;
        g[0] += bump;
    }

    let oracle = oracle_gradients(model, inputs, label, desired_count, &base.trace.masks, None)?;

    let decays: Vec<f64> = base
        .trace
        .steps
        .iter()
        .map(|s| match s.layers.first() {
            Some(LayerRecord::SynapticConv { decay: Some(d), .. }) => *d,
            _ => 1.0,
        })
        .collect();
    let fd_opts = ForwardOptions {
        frozen_decays: Some(decays),
    };
    let has_pmlif = model.spec.config.has_pmlif();
    let first_dense = model
        .spec
        .config
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::DensePmlif { .. }))
        .unwrap_or(usize::MAX);
    let front_grads: Vec<Tensor<f64>> = base.front.iter().flatten().cloned().collect();
    let target = target_encode::<f64>(label, &model.group_map, model.classes(), desired_count)?;
    let base_pattern = relu_pattern(&base.trace);

    let objective = |m: &Model<f64>| -> Result<(f64, Vec<bool>)> {
        let trace = m.forward_steps(inputs, mode, opts.seed, &fd_opts)?;
        let value = if has_pmlif {
            front_activations(m, &trace)
                .iter()
                .zip(&front_grads)
                .map(|(a, g)| a.data().iter().zip(g.data()).map(|(x, y)| x * y).sum::<f64>())
                .sum()
        } else {
            let mut total = 0.0;
            for s in &trace.steps {
                total += loss_mse(s.output.data(), &target)?.0;
            }
            total
        };
        Ok((value, relu_pattern(&trace)))
    };

    // block index -> (layer, slot within layer)
    let mut owners = Vec::new();
    for (i, l) in model.params.layers.iter().enumerate() {
        let slots = match l {
            LayerParams::Conv { .. } => 2,
            LayerParams::Dense { .. } => 3,
            LayerParams::Stateless => 0,
        };
        owners.extend((0..slots).map(|s| (i, s)));
    }

    let mut blocks = Vec::with_capacity(prod.len());
    let mut failures = Vec::new();
    let mut max_oracle: f64 = 0.0;
    let mut max_fd: f64 = 0.0;
    for (b, (name, g)) in prod.iter().enumerate() {
        let oracle_error = relative_error(g, &oracle.grads[b]);
        max_oracle = max_oracle.max(oracle_error);
        let mut fail = oracle_error >= opts.oracle_tolerance;
        let (layer, slot) = owners[b];
        let mut fd_error = None;
        let mut skipped = 0;
        if layer < first_dense {
            let mut fd = Vec::with_capacity(g.len());
            let mut kept = Vec::with_capacity(g.len());
            for k in 0..g.len() {
                let perturbed = |delta: f64| -> Result<(f64, Vec<bool>)> {
                    let mut m = model.clone();
                    param_slot(&mut m.params, layer, slot).data_mut()[k] += delta;
                    objective(&m)
                };
                let (plus, pat_p) = perturbed(opts.eps)?;
                let (minus, pat_m) = perturbed(-opts.eps)?;
                if pat_p != base_pattern || pat_m != base_pattern {
                    skipped += 1;
                    continue;
                }
                fd.push((plus - minus) / (2.0 * opts.eps));
                kept.push(g[k]);
            }
            let err = relative_error(&kept, &fd);
            max_fd = max_fd.max(err);
            fail |= err >= opts.fd_tolerance;
            fd_error = Some(err);
        }
        if fail {
            failures.push(name.clone());
        }
        blocks.push(BlockReport {
            name: name.clone(),
            len: g.len(),
            oracle_error,
            fd_error,
            fd_skipped: skipped,
        });
    }
    Ok(GradCheckReport {
        blocks,
        max_oracle_error: max_oracle,
        max_fd_error: max_fd,
        failures,
    })
}

fn param_slot(params: &mut Params<f64>, layer: usize, slot: usize) -> &mut Tensor<f64> {
    match (&mut params.layers[layer], slot) {
        (LayerParams::Conv { kernels, .. }, 0) | (LayerParams::Dense { weights: kernels, .. }, 0) => kernels,
        (LayerParams::Conv { bias, .. }, 1) | (LayerParams::Dense { bias, .. }, 1) => bias,
        (LayerParams::Dense { w_m, .. }, 2) => w_m,
        _ => unreachable!("slot out of range"),
    }
}

/// A small random network with randomised parameters and inputs.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub model: Model<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub label: usize,
    pub desired_count: u32,
}

const CASE_ARCHS: &[&str] = &[
    "{a}SC3-AP2-{n}FC-2Voting",
    "{a}SC3-{b}C3-AP2-DP-{n}FC-2Voting",
    "{a}C3-AP2-{n}FC-{m}FC-2Voting",
    "{a}SC1-AP2-DP-{n}FC-{m}FC-2Voting",
    "{n}FC-{m}FC-2Voting",
    "{e}SC3-AP2-2Voting",
    "{a}C3-{e}C3-AP2-2Voting",
];

/// Builds a random case; sizes are small enough to stay under
/// [`MAX_PARAMS`].
pub fn random_case(seed: u64) -> Result<GradCheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = CASE_ARCHS[rng.random_range(0..CASE_ARCHS.len())];
    let arch = template
        .replace("{a}", &rng.random_range(1..=3usize).to_string())
        .replace("{b}", &rng.random_range(1..=3usize).to_string())
        .replace("{n}", &(2 * rng.random_range(1..=3usize)).to_string())
        .replace("{m}", &(2 * rng.random_range(1..=2usize)).to_string())
        .replace("{e}", &(2 * rng.random_range(1..=2usize)).to_string());
    let steps = rng.random_range(1..=3usize);
    let ablation = Ablation {
        use_synaptic_block: rng.random_bool(0.75),
        use_learnable_wm: rng.random_bool(0.75),
    };
    let config = parse_arch(&arch, steps, ablation)?;
    let side = 2 * rng.random_range(1..=2usize);
    let spec = ModelSpec::new(config, side, side);
    let mut model: Model<f64> = init_model(spec, rng.random())?;
    let zero_conv_bias = rng.random_bool(0.5);
    for layer in &mut model.params.layers {
        match layer {
            LayerParams::Conv { bias, .. } if !zero_conv_bias => {
                bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            }
            LayerParams::Dense { bias, w_m, .. } => {
                bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
                w_m.data_mut().iter_mut().for_each(|w| *w = rng.random_range(-2.0..2.0));
            }
            _ => {}
        }
    }
    let scale = rng.random_range(1.0..8.0);
    let inputs = (0..steps)
        .map(|_| {
            let silent = rng.random_bool(0.25);
            let data = (0..2 * side * side)
                .map(|_| {
                    if silent || rng.random_bool(0.4) {
                        0.0
                    } else {
                        rng.random_range(0.0..scale)
                    }
                })
                .collect();
            Tensor::from_vec(&[2, side, side], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckCase {
        model,
        inputs,
        label: rng.random_range(0..2),
        desired_count: rng.random_range(1..=3),
    })
}
