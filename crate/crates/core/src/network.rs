//! Network assembly: the architecture-string parser, shape inference, the
//! parameter container and the per-time-step forward pass.
//!
//! Architecture strings are `-`-separated tokens:
//!
//! | token      | layer                                              |
//! |------------|----------------------------------------------------|
//! | `<n>SC<k>` | synaptic convolution block, `n` filters of `k`x`k` |
//! | `<n>C<k>`  | convolution + ReLU, `n` filters of `k`x`k`         |
//! | `AP<k>`    | `k`x`k` average pooling                            |
//! | `DP`       | dropout in front of the next dense layer           |
//! | `<n>FC`    | dense layer of `n` PMLIF neurons                   |
//! | `<n>Voting`| voting over `n` classes, always last               |
//!
//! Convolutions use stride 1 and "same" zero padding, so only pooling
//! changes the spatial size.

use crate::compress::FrameTensor;
use crate::error::{Error, Result};
use crate::neuron::{
    pmlif_step, spike_count, synaptic_step, NeuronParams, PmlifState, SynapseState,
};
use crate::real::Real;
use crate::tensor::{avgpool2d, conv2d, dense, dropout_mask, relu, Tensor};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    SynapticConv { channels: usize, kernel: usize },
    Conv { channels: usize, kernel: usize },
    AvgPool { size: usize },
    Dropout,
    DensePmlif { neurons: usize },
    Voting { classes: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::SynapticConv { channels, kernel } => write!(f, "{channels}SC{kernel}"),
            LayerSpec::Conv { channels, kernel } => write!(f, "{channels}C{kernel}"),
            LayerSpec::AvgPool { size } => write!(f, "AP{size}"),
            LayerSpec::Dropout => write!(f, "DP"),
            LayerSpec::DensePmlif { neurons } => write!(f, "{neurons}FC"),
            LayerSpec::Voting { classes } => write!(f, "{classes}Voting"),
        }
    }
}

/// Ablation switches. With both on the network is the full model; turning
/// off the synaptic block replaces the synaptic layer with a ReLU, turning
/// off learnable leaks freezes every `w_m` at its initial value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub use_synaptic_block: bool,
    pub use_learnable_wm: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_synaptic_block: true,
            use_learnable_wm: true,
        }
    }
}

impl Ablation {
    /// Named strategies: S0 both, S1 only PMLIF leaks, S2 only the synaptic
    /// block, S3 neither.
    pub fn strategy(name: &str) -> Result<Self> {
        let (syn, wm) = match name {
            "S0" => (true, true),
            "S1" => (false, true),
            "S2" => (true, false),
            "S3" => (false, false),
            other => return Err(Error::Config(format!("unknown strategy {other:?}"))),
        };
        Ok(Self {
            use_synaptic_block: syn,
            use_learnable_wm: wm,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub layers: Vec<LayerSpec>,
    pub time_steps: usize,
    pub ablation: Ablation,
}

impl NetworkConfig {
    pub fn arch_string(&self) -> String {
        self.layers
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Voting { classes }) => *classes,
            _ => 0,
        }
    }

    pub fn has_pmlif(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::DensePmlif { .. }))
    }
}

fn parse_token(tok: &str, position: usize) -> Result<LayerSpec> {
    let err = |reason: &str| Error::ArchToken {
        position,
        token: tok.to_string(),
        reason: reason.to_string(),
    };
    let upper = tok.to_ascii_uppercase();
    let digits = upper.chars().take_while(char::is_ascii_digit).count();
    let (count, rest) = upper.split_at(digits);
    let count: Option<usize> = if count.is_empty() {
        None
    } else {
        Some(count.parse().map_err(|_| err("count out of range"))?)
    };
    let positive = |v: usize, what: &str| {
        if v == 0 {
            Err(err(&format!("{what} must be positive")))
        } else {
            Ok(v)
        }
    };
    let suffix_num = |s: &str| -> Result<usize> {
        if s.is_empty() || !s.chars().all(|c| c.is_ascii_digit()) {
            return Err(err("expected a kernel size"));
        }
        s.parse().map_err(|_| err("kernel size out of range"))
    };
    match (count, rest) {
        (None, "DP") => Ok(LayerSpec::Dropout),
        (None, r) if r.starts_with("AP") => Ok(LayerSpec::AvgPool {
            size: positive(suffix_num(&r[2..])?, "pool size")?,
        }),
        (Some(n), "FC") => Ok(LayerSpec::DensePmlif {
            neurons: positive(n, "neuron count")?,
        }),
        (Some(n), "VOTING") => Ok(LayerSpec::Voting {
            classes: positive(n, "class count")?,
        }),
        (Some(n), r) if r.starts_with("SC") => Ok(LayerSpec::SynapticConv {
            channels: positive(n, "channel count")?,
            kernel: positive(suffix_num(&r[2..])?, "kernel size")?,
        }),
        (Some(n), r) if r.starts_with('C') => Ok(LayerSpec::Conv {
            channels: positive(n, "channel count")?,
            kernel: positive(suffix_num(&r[1..])?, "kernel size")?,
        }),
        _ => Err(err("unrecognised layer token")),
    }
}

/// Parses an architecture string and checks the structural rules: exactly
/// one voting layer and it comes last, at most one synaptic block and it
/// comes first, convolutions and pooling never follow a dense layer, and
/// dropout is always followed by a dense layer.
pub fn parse_arch(text: &str, time_steps: usize, ablation: Ablation) -> Result<NetworkConfig> {
    if time_steps == 0 {
        return Err(Error::Config("time steps must be >= 1".into()));
    }
    let layers = text
        .trim()
        .split('-')
        .enumerate()
        .map(|(i, tok)| parse_token(tok.trim(), i))
        .collect::<Result<Vec<_>>>()?;
    let voting = layers
        .iter()
        .filter(|l| matches!(l, LayerSpec::Voting { .. }))
        .count();
    if voting != 1 || !matches!(layers.last(), Some(LayerSpec::Voting { .. })) {
        return Err(Error::Config(
            "architecture must end with exactly one Voting layer".into(),
        ));
    }
    if layers.len() < 2 {
        return Err(Error::Config("architecture has no layer before Voting".into()));
    }
    for (i, l) in layers.iter().enumerate() {
        match l {
            LayerSpec::SynapticConv { kernel, .. } | LayerSpec::Conv { kernel, .. } => {
                if matches!(l, LayerSpec::SynapticConv { .. }) && i != 0 {
                    return Err(Error::Config(format!(
                        "synaptic convolution block must be the first layer (found at {i})"
                    )));
                }
                if kernel % 2 == 0 {
                    return Err(Error::Config(format!(
                        "layer {i}: kernel size {kernel} must be odd for same padding"
                    )));
                }
            }
            LayerSpec::Dropout
                if !matches!(layers.get(i + 1), Some(LayerSpec::DensePmlif { .. })) => {
                    return Err(Error::Config(format!(
                        "layer {i}: dropout must be followed by a dense layer"
                    )));
                }
            _ => {}
        }
        let after_dense = layers[..i]
            .iter()
            .any(|p| matches!(p, LayerSpec::DensePmlif { .. }));
        if after_dense
            && matches!(
                l,
                LayerSpec::SynapticConv { .. } | LayerSpec::Conv { .. } | LayerSpec::AvgPool { .. }
            )
        {
            return Err(Error::Config(format!(
                "layer {i}: spatial layer {l} cannot follow a dense layer"
            )));
        }
    }
    Ok(NetworkConfig {
        layers,
        time_steps,
        ablation,
    })
}

/// Everything needed to rebuild a network besides its learned values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub config: NetworkConfig,
    /// Input `[C, H, W]`; frames always have `C = 2`.
    pub input: [usize; 3],
    pub neuron: NeuronParams,
    pub dropout_rate: f64,
    /// Multiplier applied to frame values before the first layer.
    pub input_scale: f64,
}

impl ModelSpec {
    pub fn new(config: NetworkConfig, height: usize, width: usize) -> Self {
        Self {
            config,
            input: [2, height, width],
            neuron: NeuronParams::default(),
            dropout_rate: 0.5,
            input_scale: 1.0,
        }
    }

    /// Input and output shape of every layer, failing on the first layer
    /// whose input it cannot accept.
    pub fn layer_shapes(&self) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        self.neuron.validate()?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::Config(format!(
                "input scale must be positive, got {}",
                self.input_scale
            )));
        }
        let mut shape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.config.layers.len());
        for (i, layer) in self.config.layers.iter().enumerate() {
            let bad = |reason: String| Error::Layer { layer: i, reason };
            let next = match *layer {
                LayerSpec::SynapticConv { channels, .. } | LayerSpec::Conv { channels, .. } => {
                    let [_, h, w] = shape[..] else {
                        return Err(bad(format!("convolution needs [C, H, W], got {shape:?}")));
                    };
                    vec![channels, h, w]
                }
                LayerSpec::AvgPool { size } => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad(format!("pooling needs [C, H, W], got {shape:?}")));
                    };
                    if h % size != 0 || w % size != 0 {
                        return Err(bad(format!("pool size {size} does not divide {h}x{w}")));
                    }
                    vec![c, h / size, w / size]
                }
                LayerSpec::Dropout => shape.clone(),
                LayerSpec::DensePmlif { neurons } => vec![neurons],
                LayerSpec::Voting { classes } => {
                    let n: usize = shape.iter().product();
                    if !n.is_multiple_of(classes) {
                        return Err(Error::Config(format!(
                            "{n} output neurons cannot be split into {classes} equal voting groups"
                        )));
                    }
                    shape.clone()
                }
            };
            out.push((shape.clone(), next.clone()));
            shape = next;
        }
        Ok(out)
    }

    /// Number of output units feeding the voting layer.
    pub fn output_len(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        Ok(shapes.last().map_or(0, |(_, o)| o.iter().product()))
    }
}

/// Learned values of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<F> {
    Conv {
        kernels: Tensor<F>,
        bias: Tensor<F>,
    },
    Dense {
        weights: Tensor<F>,
        bias: Tensor<F>,
        w_m: Tensor<F>,
    },
    Stateless,
}

/// Per-layer parameters, also reused as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub layers: Vec<LayerParams<F>>,
}

impl<F: Real> Params<F> {
    /// Zero-filled parameters with the shapes `spec` implies.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        let shapes = spec.layer_shapes()?;
        let layers = spec
            .config
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, (input, output))| match *l {
                LayerSpec::SynapticConv { channels, kernel }
                | LayerSpec::Conv { channels, kernel } => LayerParams::Conv {
                    kernels: Tensor::zeros(&[channels, input[0], kernel, kernel]),
                    bias: Tensor::zeros(&[channels]),
                },
                LayerSpec::DensePmlif { neurons } => LayerParams::Dense {
                    weights: Tensor::zeros(&[neurons, input.iter().product()]),
                    bias: Tensor::zeros(&[neurons]),
                    w_m: Tensor::zeros(&[output[0]]),
                },
                _ => LayerParams::Stateless,
            })
            .collect();
        Ok(Self { layers })
    }

    /// Named parameter blocks in declaration order.
    pub fn blocks(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerParams::Conv { kernels, bias } => {
                    out.push((format!("layer{i}.kernels"), kernels));
                    out.push((format!("layer{i}.bias"), bias));
                }
                LayerParams::Dense { weights, bias, w_m } => {
                    out.push((format!("layer{i}.weights"), weights));
                    out.push((format!("layer{i}.bias"), bias));
                    out.push((format!("layer{i}.w_m"), w_m));
                }
                LayerParams::Stateless => {}
            }
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::Conv { kernels, bias } => {
                    out.push(kernels);
                    out.push(bias);
                }
                LayerParams::Dense { weights, bias, w_m } => {
                    out.push(weights);
                    out.push(bias);
                    out.push(w_m);
                }
                LayerParams::Stateless => {}
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &Self, scale: F) -> Result<()> {
        let theirs: Vec<&Tensor<F>> = other.blocks().into_iter().map(|(_, t)| t).collect();
        let mine = self.blocks_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Shape("parameter sets have different layouts".into()));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            a.add_scaled(b, scale)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, t)| t.all_finite())
    }
}

/// A network ready to run: spec, parameters and the fixed voting partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub spec: ModelSpec,
    pub params: Params<F>,
    /// Permutation of the output units; class `c` owns entries
    /// `c*g .. (c+1)*g` where `g` is the group size.
    pub group_map: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<F> {
    /// Replaces the measured synaptic decay at each step (gradient checks
    /// use this to hold the channel count fixed under perturbation).
    pub frozen_decays: Option<Vec<F>>,
}

/// Forward values of one layer at one step, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerRecord<F> {
    /// Synaptic block. `decay` is `None` when the block is ablated to a ReLU.
    SynapticConv {
        input: Tensor<F>,
        pre: Tensor<F>,
        decay: Option<F>,
        output: Tensor<F>,
    },
    Conv {
        input: Tensor<F>,
        pre: Tensor<F>,
        output: Tensor<F>,
    },
    Pool {
        output: Tensor<F>,
    },
    Dropout {
        output: Tensor<F>,
    },
    Dense {
        input: Tensor<F>,
        /// Post-reset potential carried in from the previous step.
        u_prev: Tensor<F>,
        /// Potential before the soft reset.
        u_pre: Tensor<F>,
        spikes: Vec<u32>,
        output: Tensor<F>,
    },
    Voting,
}

impl<F: Real> LayerRecord<F> {
    pub fn output(&self) -> Option<&Tensor<F>> {
        match self {
            LayerRecord::SynapticConv { output, .. }
            | LayerRecord::Conv { output, .. }
            | LayerRecord::Pool { output }
            | LayerRecord::Dropout { output }
            | LayerRecord::Dense { output, .. } => Some(output),
            LayerRecord::Voting => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace<F> {
    pub layers: Vec<LayerRecord<F>>,
    /// Values seen by the voting layer (spike counts when the last hidden
    /// layer is a PMLIF layer).
    pub output: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<F> {
    pub steps: Vec<StepTrace<F>>,
    /// Dropout mask per layer index (`None` for non-dropout layers and in
    /// eval mode).
    pub masks: Vec<Option<Tensor<F>>>,
}

impl<F: Real> ForwardTrace<F> {
    /// Output summed over all steps.
    pub fn accumulated_output(&self) -> Vec<F> {
        let n = self.steps.first().map_or(0, |s| s.output.len());
        let mut acc = vec![F::zero(); n];
        for s in &self.steps {
            for (a, &v) in acc.iter_mut().zip(s.output.data()) {
                *a += v;
            }
        }
        acc
    }
}

/// Seed of the dropout mask for layer `layer` of a forward pass seeded `seed`.
pub fn dropout_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<F: Real> Model<F> {
    pub fn new(spec: ModelSpec, params: Params<F>, group_map: Vec<usize>, seed: u64) -> Result<Self> {
        let expected = Params::<F>::zeros(&spec)?;
        let shapes_match = expected
            .blocks()
            .iter()
            .zip(params.blocks())
            .all(|((_, a), (_, b))| a.shape() == b.shape())
            && expected.blocks().len() == params.blocks().len();
        if !shapes_match {
            return Err(Error::Config("parameter shapes do not match the architecture".into()));
        }
        let n = spec.output_len()?;
        let mut sorted = group_map.clone();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "group map must be a permutation of 0..{n}"
            )));
        }
        Ok(Self {
            spec,
            params,
            group_map,
            seed,
        })
    }

    pub fn classes(&self) -> usize {
        self.spec.config.classes()
    }

    /// Converts a frame tensor into scaled per-step `[2, H, W]` inputs.
    pub fn prepare_input(&self, frames: &FrameTensor) -> Result<Vec<Tensor<F>>> {
        let [_, h, w] = self.spec.input;
        if frames.height() != h || frames.width() != w {
            return Err(Error::Shape(format!(
                "frames are {}x{}, network expects {h}x{w}",
                frames.height(),
                frames.width()
            )));
        }
        if frames.steps() != self.spec.config.time_steps {
            return Err(Error::Shape(format!(
                "frames have {} steps, network runs {}",
                frames.steps(),
                self.spec.config.time_steps
            )));
        }
        let scale = self.spec.input_scale;
        (0..frames.steps())
            .map(|j| {
                let data = frames
                    .step(j)
                    .iter()
                    .map(|&v| F::lit(f64::from(v) * scale))
                    .collect();
                Tensor::from_vec(&[2, h, w], data)
            })
            .collect()
    }

    pub fn forward(
        &self,
        frames: &FrameTensor,
        mode: Mode,
        seed: u64,
    ) -> Result<ForwardTrace<F>> {
        let inputs = self.prepare_input(frames)?;
        self.forward_steps(&inputs, mode, seed, &ForwardOptions::default())
    }

    /// Runs every step in order. Conv stages are recomputed from scratch each
    /// step; synaptic currents and membrane potentials carry over.
    pub fn forward_steps(
        &self,
        inputs: &[Tensor<F>],
        mode: Mode,
        seed: u64,
        opts: &ForwardOptions<F>,
    ) -> Result<ForwardTrace<F>> {
        let shapes = self.spec.layer_shapes()?;
        let layers = &self.spec.config.layers;
        let masks: Vec<Option<Tensor<F>>> = layers
            .iter()
            .enumerate()
            .map(|(i, l)| match (l, mode) {
                (LayerSpec::Dropout, Mode::Train) => {
                    dropout_mask(&shapes[i].0, self.spec.dropout_rate, dropout_seed(seed, i))
                        .map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        let mut synapses: Vec<Option<SynapseState<F>>> = shapes
            .iter()
            .zip(layers)
            .map(|((_, out), l)| {
                matches!(l, LayerSpec::SynapticConv { .. }).then(|| SynapseState::zeros(out))
            })
            .collect();
        let mut membranes: Vec<Option<Tensor<F>>> = shapes
            .iter()
            .zip(layers)
            .map(|((_, out), l)| {
                matches!(l, LayerSpec::DensePmlif { .. }).then(|| Tensor::zeros(out))
            })
            .collect();
        let use_synapse = self.spec.config.ablation.use_synaptic_block;
        let mut steps = Vec::with_capacity(inputs.len());
        for (t, input) in inputs.iter().enumerate() {
            if input.shape() != self.spec.input {
                return Err(Error::Layer {
                    layer: 0,
                    reason: format!(
                        "step {t} input {:?}, expected {:?}",
                        input.shape(),
                        self.spec.input
                    ),
                });
            }
            let mut x = input.clone();
            let mut records = Vec::with_capacity(layers.len());
            for (i, layer) in layers.iter().enumerate() {
                let at = |e: Error| Error::Layer {
                    layer: i,
                    reason: e.to_string(),
                };
                if matches!(layer, LayerSpec::Voting { .. }) {
                    records.push(LayerRecord::Voting);
                    break;
                }
                let record = match (layer, &self.params.layers[i]) {
                    (LayerSpec::SynapticConv { kernel, .. }, LayerParams::Conv { kernels, bias }) => {
                        let pre = conv2d(&x, kernels, Some(bias), 1, kernel / 2).map_err(at)?;
                        let (output, decay) = if use_synapse {
                            let state = synapses[i].as_mut().expect("synapse state");
                            let (next, decay) = match &opts.frozen_decays {
                                Some(d) => {
                                    let d = *d.get(t).ok_or_else(|| {
                                        at(Error::Argument(format!("no frozen decay for step {t}")))
                                    })?;
                                    let next = state
                                        .current
                                        .zip_map(&pre, |prev, inp| d * prev + inp)
                                        .map_err(at)?;
                                    (next, d)
                                }
                                None => synaptic_step(state, &pre).map_err(at)?,
                            };
                            state.current = next.clone();
                            (next, Some(decay))
                        } else {
                            (relu(&pre), None)
                        };
                        LayerRecord::SynapticConv {
                            input: x,
                            pre,
                            decay,
                            output,
                        }
                    }
                    (LayerSpec::Conv { kernel, .. }, LayerParams::Conv { kernels, bias }) => {
                        let pre = conv2d(&x, kernels, Some(bias), 1, kernel / 2).map_err(at)?;
                        let output = relu(&pre);
                        LayerRecord::Conv {
                            input: x,
                            pre,
                            output,
                        }
                    }
                    (LayerSpec::AvgPool { size }, _) => LayerRecord::Pool {
                        output: avgpool2d(&x, *size).map_err(at)?,
                    },
                    (LayerSpec::Dropout, _) => LayerRecord::Dropout {
                        output: match &masks[i] {
                            Some(m) => x.zip_map(m, |a, b| a * b).map_err(at)?,
                            None => x,
                        },
                    },
                    (LayerSpec::DensePmlif { .. }, LayerParams::Dense { weights, bias, w_m }) => {
                        let current = dense(&x, weights, Some(bias)).map_err(at)?;
                        let u_prev = membranes[i].take().expect("membrane state");
                        let state = PmlifState {
                            u: u_prev,
                            w_m: w_m.clone(),
                        };
                        let step = pmlif_step(&state, &current, &self.spec.neuron).map_err(at)?;
                        let output = Tensor::from_vec(
                            &[step.spikes.len()],
                            step.spikes.iter().map(|&s| F::lit(f64::from(s))).collect(),
                        )
                        .map_err(at)?;
                        membranes[i] = Some(step.state.u);
                        LayerRecord::Dense {
                            input: x,
                            u_prev: state.u,
                            u_pre: step.u_pre,
                            spikes: step.spikes,
                            output,
                        }
                    }
                    _ => {
                        return Err(Error::Layer {
                            layer: i,
                            reason: "parameters do not match layer kind".into(),
                        })
                    }
                };
                x = record.output().expect("hidden layers have outputs").clone();
                records.push(record);
            }
            let output = x.clone().reshape(&[x.len()])?;
            steps.push(StepTrace {
                layers: records,
                output,
            });
        }
        Ok(ForwardTrace { steps, masks })
    }

    /// Class scores (group means of the accumulated output) for a trace.
    pub fn class_scores(&self, trace: &ForwardTrace<F>) -> Result<Vec<f64>> {
        let acc: Vec<f64> = trace
            .accumulated_output()
            .into_iter()
            .map(Real::as_f64)
            .collect();
        class_scores(&acc, &self.group_map, self.classes())
    }

    pub fn predict(&self, frames: &FrameTensor) -> Result<usize> {
        let trace = self.forward(frames, Mode::Eval, self.seed)?;
        argmax_lowest(&self.class_scores(&trace)?)
    }
}

/// Mean of each class group of `counts`.
pub fn class_scores(counts: &[f64], group_map: &[usize], classes: usize) -> Result<Vec<f64>> {
    if classes == 0 || !counts.len().is_multiple_of(classes) || group_map.len() != counts.len() {
        return Err(Error::Config(format!(
            "{} outputs cannot be split into {classes} groups (group map has {})",
            counts.len(),
            group_map.len()
        )));
    }
    let g = counts.len() / classes;
    Ok(group_map
        .chunks_exact(g)
        .map(|grp| grp.iter().map(|&i| counts[i]).sum::<f64>() / g as f64)
        .collect())
}

/// Index of the largest score, ties resolved to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Argument("no scores to vote over".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Voting layer: group means of the accumulated spike counts, then argmax.
pub fn voting(counts: &[f64], group_map: &[usize], classes: usize) -> Result<usize> {
    argmax_lowest(&class_scores(counts, group_map, classes)?)
}

/// Index of the neurons owned by `class`.
pub fn group_members(group_map: &[usize], classes: usize, class: usize) -> &[usize] {
    let g = group_map.len() / classes;
    &group_map[class * g..(class + 1) * g]
}

/// Spike count of every entry of `u` (used by tests and diagnostics).
pub fn spike_counts<F: Real>(u: &Tensor<F>, p: &NeuronParams) -> Vec<u32> {
    u.data()
        .iter()
        .map(|&v| spike_count(v, F::lit(p.v_th), p.s_max))
        .collect()
}
