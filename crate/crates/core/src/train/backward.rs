use super::{loss_mse, target_encode};
use crate::error::{Error, Result};
use crate::network::{
    ForwardOptions, ForwardTrace, LayerParams, LayerRecord, LayerSpec, Mode, Model, Params,
    StepTrace,
};
use crate::neuron::{sigmoid, sigmoid_grad, surrogate_grad};
use crate::real::Real;
use crate::tensor::{
    avgpool2d_backward, conv2d_backward_input, conv2d_backward_kernels, dense_backward_input,
    relu_backward, Tensor,
};

/// Recurrent sensitivity traces of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerTrace<F> {
    None,
    /// Synaptic block: the synaptic filter is linear, so the sensitivity of
    /// `I_syn` to the kernels is the kernel gradient taken against the input
    /// run through the same filter (`x̃[t] = d[t]·x̃[t-1] + x[t]`); the bias
    /// sees the filtered constant `b̃[t] = d[t]·b̃[t-1] + 1`.
    Synaptic {
        filtered_input: Tensor<F>,
        filtered_bias: F,
    },
    /// PMLIF layer: `∂u/∂W` (row-major `[N_out, N_in]`), `∂u/∂b` and
    /// `∂u/∂w_m`.
    Dense {
        d_weights: Vec<F>,
        d_bias: Vec<F>,
        d_wm: Vec<F>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eligibility<F> {
    pub layers: Vec<LayerTrace<F>>,
}

impl<F: Real> Eligibility<F> {
    /// All-zero traces, as at the start of a sequence.
    pub fn new(model: &Model<F>) -> Result<Self> {
        let shapes = model.spec.layer_shapes()?;
        let use_synapse = model.spec.config.ablation.use_synaptic_block;
        let layers = model
            .spec
            .config
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, (input, _))| match l {
                LayerSpec::SynapticConv { .. } if use_synapse => LayerTrace::Synaptic {
                    filtered_input: Tensor::zeros(input),
                    filtered_bias: F::zero(),
                },
                LayerSpec::DensePmlif { neurons } => {
                    let n_in: usize = input.iter().product();
                    LayerTrace::Dense {
                        d_weights: vec![F::zero(); neurons * n_in],
                        d_bias: vec![F::zero(); *neurons],
                        d_wm: vec![F::zero(); *neurons],
                    }
                }
                _ => LayerTrace::None,
            })
            .collect();
        Ok(Self { layers })
    }
}

fn internal(layer: usize, what: &str) -> Error {
    Error::Layer {
        layer,
        reason: format!("backward: {what}"),
    }
}

/// One step of the learning rule.
///
/// Walking from the output down, a PMLIF layer turns the incoming `∂L/∂s`
/// into `δ = f1(u) ⊙ ∂L/∂s`, advances its eligibility traces
///
/// ```text
/// e_W  ← (σ(w_m)·e_W + s_in) / (1 + f1(u)·V_th)
/// e_wm ← σ'(w_m)·u[t-1]      / (1 + f1(u)·V_th)
/// ```
///
/// adds `δ·e` to the gradients and passes `Wᵀδ` to the layer below.
/// Convolution, ReLU, pooling and dropout use their exact backward maps.
/// There is no cross-time term in `δ`; credit through time flows only
/// through the traces.
///
/// Returns `∂L/∂x` at the input of the lowest PMLIF layer, if there is one.
pub fn backward_step<F: Real>(
    model: &Model<F>,
    step: &StepTrace<F>,
    masks: &[Option<Tensor<F>>],
    dl_ds: &[F],
    elig: &mut Eligibility<F>,
    grads: &mut Params<F>,
) -> Result<Option<Tensor<F>>> {
    let layers = &model.spec.config.layers;
    let neuron = &model.spec.neuron;
    let v_th = F::lit(neuron.v_th);
    let learn_wm = model.spec.config.ablation.use_learnable_wm;
    let first_dense = layers
        .iter()
        .position(|l| matches!(l, LayerSpec::DensePmlif { .. }));
    let mut front = None;
    let top = layers.len() - 1;
    if step.output.len() != dl_ds.len() {
        return Err(internal(top, "output gradient length mismatch"));
    }
    let mut upstream: Option<Tensor<F>> = Some(Tensor::from_vec(&[dl_ds.len()], dl_ds.to_vec())?);

    for i in (0..top).rev() {
        let record = &step.layers[i];
        let Some(up) = upstream.take() else {
            break;
        };
        let out_shape = record
            .output()
            .ok_or_else(|| internal(i, "record without output"))?
            .shape()
            .to_vec();
        let up = up.reshape(&out_shape)?;
        upstream = match (record, &model.params.layers[i], &mut elig.layers[i], &mut grads.layers[i]) {
            (
                LayerRecord::Dense {
                    input,
                    u_prev,
                    u_pre,
                    ..
                },
                LayerParams::Dense { weights, w_m, .. },
                LayerTrace::Dense {
                    d_weights,
                    d_bias,
                    d_wm,
                },
                LayerParams::Dense {
                    weights: g_w,
                    bias: g_b,
                    w_m: g_wm,
                },
            ) => {
                let x = input.data();
                let n_in = x.len();
                let mut delta = Vec::with_capacity(u_pre.len());
                for k in 0..u_pre.len() {
                    let f1 = surrogate_grad(u_pre.data()[k], neuron);
                    let d = f1 * up.data()[k];
                    delta.push(d);
                    let denom = F::one() + f1 * v_th;
                    let leak = sigmoid(w_m.data()[k]);
                    let row = &mut d_weights[k * n_in..(k + 1) * n_in];
                    let g_row = &mut g_w.data_mut()[k * n_in..(k + 1) * n_in];
                    for ((e, g), &xj) in row.iter_mut().zip(g_row).zip(x) {
                        *e = (leak * *e + xj) / denom;
                        *g += d * *e;
                    }
                    d_bias[k] = (leak * d_bias[k] + F::one()) / denom;
                    g_b.data_mut()[k] += d * d_bias[k];
                    if learn_wm {
                        d_wm[k] = sigmoid_grad(w_m.data()[k]) * u_prev.data()[k] / denom;
                        g_wm.data_mut()[k] += d * d_wm[k];
                    }
                }
                let delta = Tensor::from_vec(&[delta.len()], delta)?;
                let down = dense_backward_input(input.shape(), weights, &delta)?;
                if Some(i) == first_dense {
                    front = Some(down.clone());
                }
                Some(down)
            }
            (LayerRecord::Dropout { .. }, _, _, _) => Some(match &masks[i] {
                Some(m) => up.zip_map(m, |g, k| g * k)?,
                None => up,
            }),
            (LayerRecord::Pool { .. }, _, _, _) => {
                let LayerSpec::AvgPool { size } = layers[i] else {
                    return Err(internal(i, "pool record on non-pool layer"));
                };
                Some(avgpool2d_backward(&up, size)?)
            }
            (
                LayerRecord::Conv { input, pre, .. }
                | LayerRecord::SynapticConv {
                    input,
                    pre,
                    decay: None,
                    ..
                },
                LayerParams::Conv { kernels, .. },
                _,
                LayerParams::Conv {
                    kernels: g_k,
                    bias: g_b,
                },
            ) => {
                let pad = kernels.shape()[2] / 2;
                let g = relu_backward(pre, &up)?;
                let (dk, db) = conv2d_backward_kernels(input, kernels.shape(), &g, 1, pad)?;
                g_k.add_scaled(&dk, F::one())?;
                g_b.add_scaled(&db, F::one())?;
                (i > 0)
                    .then(|| conv2d_backward_input(input.shape(), kernels, &g, 1, pad))
                    .transpose()?
            }
            (
                LayerRecord::SynapticConv {
                    decay: Some(_), ..
                },
                LayerParams::Conv { kernels, .. },
                LayerTrace::Synaptic {
                    filtered_input,
                    filtered_bias,
                },
                LayerParams::Conv {
                    kernels: g_k,
                    bias: g_b,
                },
            ) => {
                // traces already advanced below; only accumulate here
                let pad = kernels.shape()[2] / 2;
                let (dk, db) = conv2d_backward_kernels(filtered_input, kernels.shape(), &up, 1, pad)?;
                g_k.add_scaled(&dk, F::one())?;
                g_b.add_scaled(&db, *filtered_bias)?;
                None
            }
            _ => return Err(internal(i, "record, parameters and traces disagree")),
        };
    }
    Ok(front)
}

/// Advances the synaptic traces for one step. Must run before
/// [`backward_step`] for that step.
fn advance_synaptic_traces<F: Real>(step: &StepTrace<F>, elig: &mut Eligibility<F>) -> Result<()> {
    for (record, trace) in step.layers.iter().zip(&mut elig.layers) {
        if let (
            LayerRecord::SynapticConv {
                input,
                decay: Some(d),
                ..
            },
            LayerTrace::Synaptic {
                filtered_input,
                filtered_bias,
            },
        ) = (record, trace)
        {
            let d = *d;
            *filtered_input = filtered_input.zip_map(input, |f, x| d * f + x)?;
            *filtered_bias = d * *filtered_bias + F::one();
        }
    }
    Ok(())
}

/// Gradient of the summed per-step loss for one sample.
#[derive(Debug, Clone)]
pub struct SampleGradients<F> {
    pub loss: F,
    pub grads: Params<F>,
    pub trace: ForwardTrace<F>,
    /// `∂L/∂x` at the input of the lowest PMLIF layer, per step.
    pub front: Vec<Option<Tensor<F>>>,
}

/// Forward pass plus the learning rule over all steps of one sample.
pub fn sample_gradients<F: Real>(
    model: &Model<F>,
    inputs: &[Tensor<F>],
    label: usize,
    desired_count: u32,
    mode: Mode,
    seed: u64,
    opts: &ForwardOptions<F>,
) -> Result<SampleGradients<F>> {
    let trace = model.forward_steps(inputs, mode, seed, opts)?;
    let target = target_encode::<F>(label, &model.group_map, model.classes(), desired_count)?;
    let mut elig = Eligibility::new(model)?;
    let mut grads = Params::zeros(&model.spec)?;
    let mut loss = F::zero();
    let mut front = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        let (l, dl_ds) = loss_mse(step.output.data(), &target)?;
        loss += l;
        advance_synaptic_traces(step, &mut elig)?;
        front.push(backward_step(model, step, &trace.masks, &dl_ds, &mut elig, &mut grads)?);
    }
    Ok(SampleGradients {
        loss,
        grads,
        trace,
        front,
    })
}
