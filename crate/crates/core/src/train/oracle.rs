//! Reference learning rule written with plain loops over `f64` slices.
//!
//! Shares nothing with the production path beyond shape inference: the
//! convolutions, pooling, neuron model and surrogate are re-implemented here,
//! and the synaptic-layer sensitivity is carried as the full per-position
//! Jacobian `∂I[o,y,x]/∂K[o,c,ky,kx]` instead of a filtered input.

use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub loss: f64,
    /// Gradient blocks in the order of `Params::blocks`.
    pub grads: Vec<Vec<f64>>,
    /// Per-step values seen by the voting layer.
    pub outputs: Vec<Vec<f64>>,
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn spikes(u: f64, v_th: f64, s_max: u32) -> f64 {
    if u < v_th {
        0.0
    } else {
        (u / v_th).floor().min(f64::from(s_max))
    }
}

fn f1(u: f64, v_th: f64, s_max: u32, a_h: f64, a_w: f64) -> f64 {
    (1..=s_max)
        .map(|i| {
            let d = u - f64::from(i) * v_th;
            a_h * (-(d * d) / a_w).exp()
        })
        .sum()
}

/// Input value at `(c, y, x)` after offsetting by the kernel tap, with zero
/// padding outside the image.
fn tap(x: &[f64], h: usize, w: usize, c: usize, y: isize, xx: isize) -> f64 {
    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
        0.0
    } else {
        x[(c * h + y as usize) * w + xx as usize]
    }
}

struct Geom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geom {
    fn off(&self, pos: usize, kk: usize) -> isize {
        pos as isize + kk as isize - (self.k / 2) as isize
    }
}

fn conv(x: &[f64], kern: &[f64], bias: &[f64], g: &Geom) -> Vec<f64> {
    let mut out = vec![0.0; g.cout * g.h * g.w];
    for o in 0..g.cout {
        for y in 0..g.h {
            for xx in 0..g.w {
                let mut acc = bias[o];
                for c in 0..g.cin {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            acc += kern[((o * g.cin + c) * g.k + ky) * g.k + kx]
                                * tap(x, g.h, g.w, c, g.off(y, ky), g.off(xx, kx));
                        }
                    }
                }
                out[(o * g.h + y) * g.w + xx] = acc;
            }
        }
    }
    out
}

enum State {
    None,
    Synapse {
        current: Vec<f64>,
        /// `[cout, h, w, cin, k, k]`
        jac: Vec<f64>,
        jac_bias: Vec<f64>,
    },
    Dense {
        u: Vec<f64>,
        e_w: Vec<f64>,
        e_b: Vec<f64>,
        e_m: Vec<f64>,
    },
}

enum Rec {
    Conv { input: Vec<f64>, pre: Vec<f64> },
    Synapse,
    Pool,
    Dropout,
    Dense { input: Vec<f64>, u_prev: Vec<f64>, u_pre: Vec<f64> },
}

/// Loss and parameter gradients of one sample under the learning rule,
/// computed step by step. `masks` are the dropout masks of the production
/// pass (`None` in eval mode); `frozen_decays` optionally fixes the synaptic
/// decay per step.
pub fn oracle_gradients(
    model: &Model<f64>,
    inputs: &[Tensor<f64>],
    label: usize,
    desired_count: u32,
    masks: &[Option<Tensor<f64>>],
    frozen_decays: Option<&[f64]>,
) -> Result<OracleOutput> {
    let spec = &model.spec;
    let shapes = spec.layer_shapes()?;
    let layers = &spec.config.layers;
    let np = &spec.neuron;
    let (v_th, s_max, a_h, a_w) = (np.v_th, np.s_max, np.alpha_h, np.alpha_w);
    let use_syn = spec.config.ablation.use_synaptic_block;
    let learn_wm = spec.config.ablation.use_learnable_wm;
    let top = layers.len() - 1;

    // target: desired_count on the label's group
    let n_out: usize = shapes[top].0.iter().product();
    let classes = spec.config.classes();
    if label >= classes || !n_out.is_multiple_of(classes) {
        return Err(Error::Value(format!("label {label} invalid for {classes} classes")));
    }
    let g_size = n_out / classes;
    let mut target = vec![0.0; n_out];
    for &i in &model.group_map[label * g_size..(label + 1) * g_size] {
        target[i] = f64::from(desired_count);
    }

    let mut states: Vec<State> = layers
        .iter()
        .zip(&shapes)
        .map(|(l, (inp, out))| match *l {
            LayerSpec::SynapticConv { kernel, .. } if use_syn => {
                let n: usize = out.iter().product();
                State::Synapse {
                    current: vec![0.0; n],
                    jac: vec![0.0; n * inp[0] * kernel * kernel],
                    jac_bias: vec![0.0; n],
                }
            }
            LayerSpec::DensePmlif { neurons } => {
                let n_in: usize = inp.iter().product();
                State::Dense {
                    u: vec![0.0; neurons],
                    e_w: vec![0.0; neurons * n_in],
                    e_b: vec![0.0; neurons],
                    e_m: vec![0.0; neurons],
                }
            }
            _ => State::None,
        })
        .collect();

    // gradient accumulators per layer: (weights/kernels, bias, w_m)
    let mut acc: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = model
        .params
        .layers
        .iter()
        .map(|p| match p {
            LayerParams::Conv { kernels, bias } => {
                (vec![0.0; kernels.len()], vec![0.0; bias.len()], Vec::new())
            }
            LayerParams::Dense { weights, bias, w_m } => (
                vec![0.0; weights.len()],
                vec![0.0; bias.len()],
                vec![0.0; w_m.len()],
            ),
            LayerParams::Stateless => Default::default(),
        })
        .collect();

    let mut loss = 0.0;
    let mut outputs = Vec::with_capacity(inputs.len());

    for (t, input) in inputs.iter().enumerate() {
        // forward
        let mut x = input.data().to_vec();
        let mut recs = Vec::with_capacity(top);
        for i in 0..top {
            let (inp, out) = &shapes[i];
            match (layers[i], &model.params.layers[i]) {
                (
                    LayerSpec::SynapticConv { kernel, .. } | LayerSpec::Conv { kernel, .. },
                    LayerParams::Conv { kernels, bias },
                ) => {
                    let g = Geom {
                        cin: inp[0],
                        cout: out[0],
                        h: inp[1],
                        w: inp[2],
                        k: kernel,
                    };
                    let pre = conv(&x, kernels.data(), bias.data(), &g);
                    let synaptic = matches!(layers[i], LayerSpec::SynapticConv { .. }) && use_syn;
                    if synaptic {
                        let State::Synapse {
                            current,
                            jac,
                            jac_bias,
                        } = &mut states[i]
                        else {
                            unreachable!()
                        };
                        let plane = g.h * g.w;
                        let d = match frozen_decays {
                            Some(ds) => ds[t],
                            None => {
                                let valid = (0..g.cout)
                                    .filter(|&o| pre[o * plane..(o + 1) * plane].iter().any(|v| *v != 0.0))
                                    .count();
                                valid as f64 / g.cout as f64
                            }
                        };
                        let kk = g.cin * g.k * g.k;
                        for o in 0..g.cout {
                            for y in 0..g.h {
                                for xx in 0..g.w {
                                    let pos = (o * g.h + y) * g.w + xx;
                                    current[pos] = d * current[pos] + pre[pos];
                                    jac_bias[pos] = d * jac_bias[pos] + 1.0;
                                    for c in 0..g.cin {
                                        for ky in 0..g.k {
                                            for kx in 0..g.k {
                                                let j = pos * kk + (c * g.k + ky) * g.k + kx;
                                                jac[j] = d * jac[j]
                                                    + tap(&x, g.h, g.w, c, g.off(y, ky), g.off(xx, kx));
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        x = current.clone();
                        recs.push(Rec::Synapse);
                    } else {
                        let output = pre.iter().map(|v| v.max(0.0)).collect();
                        recs.push(Rec::Conv {
                            input: std::mem::replace(&mut x, output),
                            pre,
                        });
                    }
                }
                (LayerSpec::AvgPool { size }, _) => {
                    let (c, h, w) = (inp[0], inp[1], inp[2]);
                    let (oh, ow) = (h / size, w / size);
                    let mut y = vec![0.0; c * oh * ow];
                    for ch in 0..c {
                        for py in 0..oh {
                            for px in 0..ow {
                                let mut s = 0.0;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        s += x[(ch * h + py * size + dy) * w + px * size + dx];
                                    }
                                }
                                y[(ch * oh + py) * ow + px] = s / (size * size) as f64;
                            }
                        }
                    }
                    x = y;
                    recs.push(Rec::Pool);
                }
                (LayerSpec::Dropout, _) => {
                    if let Some(m) = &masks[i] {
                        for (v, k) in x.iter_mut().zip(m.data()) {
                            *v *= k;
                        }
                    }
                    recs.push(Rec::Dropout);
                }
                (LayerSpec::DensePmlif { neurons }, LayerParams::Dense { weights, bias, w_m }) => {
                    let State::Dense { u, .. } = &mut states[i] else {
                        unreachable!()
                    };
                    let n_in = x.len();
                    let u_prev = u.clone();
                    let mut u_pre = vec![0.0; neurons];
                    let mut s = vec![0.0; neurons];
                    for k in 0..neurons {
                        let mut cur = bias.data()[k];
                        for j in 0..n_in {
                            cur += weights.data()[k * n_in + j] * x[j];
                        }
                        u_pre[k] = sig(w_m.data()[k]) * u_prev[k] + cur;
                        s[k] = spikes(u_pre[k], v_th, s_max);
                        u[k] = u_pre[k] - s[k] * v_th;
                    }
                    recs.push(Rec::Dense {
                        input: std::mem::replace(&mut x, s),
                        u_prev,
                        u_pre,
                    });
                }
                _ => return Err(Error::Layer {
                    layer: i,
                    reason: "oracle: parameters do not match layer".into(),
                }),
            }
        }

        // loss
        let mut g: Vec<f64> = x.iter().zip(&target).map(|(s, y)| s - y).collect();
        loss += g.iter().map(|d| 0.5 * d * d).sum::<f64>();
        outputs.push(x);

        // backward
        for i in (0..top).rev() {
            let (inp, out) = &shapes[i];
            match (&recs[i], &model.params.layers[i]) {
                (Rec::Dense { input, u_prev, u_pre }, LayerParams::Dense { weights, w_m, .. }) => {
                    let State::Dense { e_w, e_b, e_m, .. } = &mut states[i] else {
                        unreachable!()
                    };
                    let n_in = input.len();
                    let n = u_pre.len();
                    let mut down = vec![0.0; n_in];
                    for k in 0..n {
                        let fk = f1(u_pre[k], v_th, s_max, a_h, a_w);
                        let delta = fk * g[k];
                        let denom = 1.0 + fk * v_th;
                        let leak = sig(w_m.data()[k]);
                        for j in 0..n_in {
                            let e = &mut e_w[k * n_in + j];
                            *e = (leak * *e + input[j]) / denom;
                            acc[i].0[k * n_in + j] += delta * *e;
                            down[j] += weights.data()[k * n_in + j] * delta;
                        }
                        e_b[k] = (leak * e_b[k] + 1.0) / denom;
                        acc[i].1[k] += delta * e_b[k];
                        if learn_wm {
                            e_m[k] = leak * (1.0 - leak) * u_prev[k] / denom;
                            acc[i].2[k] += delta * e_m[k];
                        }
                    }
                    g = down;
                }
                (Rec::Dropout, _) => {
                    if let Some(m) = &masks[i] {
                        for (v, k) in g.iter_mut().zip(m.data()) {
                            *v *= k;
                        }
                    }
                }
                (Rec::Pool, _) => {
                    let LayerSpec::AvgPool { size } = layers[i] else {
                        unreachable!()
                    };
                    let (c, h, w) = (inp[0], inp[1], inp[2]);
                    let (oh, ow) = (out[1], out[2]);
                    let mut down = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                down[(ch * h + y) * w + xx] =
                                    g[(ch * oh + y / size) * ow + xx / size] / (size * size) as f64;
                            }
                        }
                    }
                    g = down;
                }
                (Rec::Conv { input, pre }, LayerParams::Conv { kernels, .. }) => {
                    let geo = Geom {
                        cin: inp[0],
                        cout: out[0],
                        h: inp[1],
                        w: inp[2],
                        k: kernels.shape()[2],
                    };
                    let gr: Vec<f64> = g
                        .iter()
                        .zip(pre)
                        .map(|(gv, p)| if *p > 0.0 { *gv } else { 0.0 })
                        .collect();
                    let mut down = vec![0.0; input.len()];
                    for o in 0..geo.cout {
                        for y in 0..geo.h {
                            for xx in 0..geo.w {
                                let gv = gr[(o * geo.h + y) * geo.w + xx];
                                acc[i].1[o] += gv;
                                for c in 0..geo.cin {
                                    for ky in 0..geo.k {
                                        for kx in 0..geo.k {
                                            let ki = ((o * geo.cin + c) * geo.k + ky) * geo.k + kx;
                                            let (iy, ix) = (geo.off(y, ky), geo.off(xx, kx));
                                            acc[i].0[ki] += gv * tap(input, geo.h, geo.w, c, iy, ix);
                                            if iy >= 0 && ix >= 0 && iy < geo.h as isize && ix < geo.w as isize {
                                                down[(c * geo.h + iy as usize) * geo.w + ix as usize] +=
                                                    kernels.data()[ki] * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    g = down;
                }
                (Rec::Synapse, LayerParams::Conv { kernels, .. }) => {
                    let State::Synapse { jac, jac_bias, .. } = &states[i] else {
                        unreachable!()
                    };
                    let kk = kernels.len() / out[0];
                    for (pos, gv) in g.iter().enumerate() {
                        let o = pos / (out[1] * out[2]);
                        acc[i].1[o] += gv * jac_bias[pos];
                        for q in 0..kk {
                            acc[i].0[o * kk + q] += gv * jac[pos * kk + q];
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    let grads = acc
        .into_iter()
        .zip(&model.params.layers)
        .flat_map(|((w, b, m), p)| match p {
            LayerParams::Conv { .. } => vec![w, b],
            LayerParams::Dense { .. } => vec![w, b, m],
            LayerParams::Stateless => vec![],
        })
        .collect();
    Ok(OracleOutput {
        loss,
        grads,
        outputs,
    })
}
