//! Dense tensors and the handful of kernels the networks need, each with an
//! explicit backward function. There is no autodiff tape; callers keep
//! whatever forward values a backward pass needs.

use crate::error::{Error, Result};
use crate::real::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value in tensor of shape {shape:?}"
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        expect_same(&self.shape, &other.shape)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: F) -> Result<()> {
        expect_same(&self.shape, &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

fn expect_same(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("shape {a:?} does not match {b:?}")));
    }
    Ok(())
}

fn dims3(t: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *t {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!("{what} must be rank 3, got {t:?}"))),
    }
}

/// Output spatial size of a convolution, or `None` if the kernel does not fit.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = dims3(input, "conv input")?;
        let [c_out, kc, kh, kw] = *kernels else {
            return Err(Error::Shape(format!("kernels must be rank 4, got {kernels:?}")));
        };
        if kc != c_in {
            return Err(Error::Shape(format!(
                "kernels expect {kc} input channels, input has {c_in}"
            )));
        }
        let (Some(oh), Some(ow)) = (
            conv_out_size(h, kh, stride, pad),
            conv_out_size(w, kw, stride, pad),
        ) else {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}, stride {stride}"
            )));
        };
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` lies in
    /// `[0, w)`, as a half-open range.
    #[inline]
    fn valid_range(&self, k: usize, out: usize, size: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(s)
        };
        // largest o with o*s + k - pad <= size - 1
        let hi = if size + self.pad < k + 1 {
            0
        } else {
            ((size + self.pad - k - 1) / s + 1).min(out)
        };
        (lo, hi.max(lo))
    }
}

/// Cross-correlation (no kernel flip) of `input` `[C_in, H, W]` with
/// `kernels` `[C_out, C_in, kH, kW]`, zero padding, optional per-channel bias.
pub fn conv2d<F: Real>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<F>> {
    let g = ConvGeom::new(input.shape(), kernels.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::Shape(format!(
                "bias shape {:?}, expected [{}]",
                b.shape(),
                g.c_out
            )));
        }
    }
    let mut out = vec![F::zero(); g.c_out * g.oh * g.ow];
    let x = input.data();
    let k = kernels.data();
    for o in 0..g.c_out {
        let plane = &mut out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
        if let Some(b) = bias {
            plane.fill(b.data()[o]);
        }
        for c in 0..g.c_in {
            let xin = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, g.oh, g.h);
                for kx in 0..g.kw {
                    let wv = k[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
                    if wv == F::zero() {
                        continue;
                    }
                    let (x0, x1) = g.valid_range(kx, g.ow, g.w);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                        for ox in x0..x1 {
                            orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.c_out, g.oh, g.ow], out)
}

/// Gradient of the convolution output with respect to the kernels, given the
/// forward input. The bias gradient is the per-channel sum of `grad_out`.
pub fn conv2d_backward_kernels<F: Real>(
    input: &Tensor<F>,
    kernel_shape: &[usize],
    grad_out: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let g = ConvGeom::new(input.shape(), kernel_shape, stride, padding)?;
    if grad_out.shape() != [g.c_out, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "grad_out shape {:?}, expected [{}, {}, {}]",
            grad_out.shape(),
            g.c_out,
            g.oh,
            g.ow
        )));
    }
    let x = input.data();
    let go = grad_out.data();
    let mut gk = vec![F::zero(); g.c_out * g.c_in * g.kh * g.kw];
    let mut gb = vec![F::zero(); g.c_out];
    for o in 0..g.c_out {
        let gplane = &go[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
        gb[o] = gplane.iter().copied().sum();
        for c in 0..g.c_in {
            let xin = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, g.oh, g.h);
                for kx in 0..g.kw {
                    let (x0, x1) = g.valid_range(kx, g.ow, g.w);
                    let mut acc = F::zero();
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        for ox in x0..x1 {
                            acc += grow[ox] * row[ox * g.stride + kx - g.pad];
                        }
                    }
                    gk[((o * g.c_in + c) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(kernel_shape, gk)?,
        Tensor::from_vec(&[g.c_out], gb)?,
    ))
}

/// Gradient of the convolution output with respect to its input.
pub fn conv2d_backward_input<F: Real>(
    input_shape: &[usize],
    kernels: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<F>> {
    let g = ConvGeom::new(input_shape, kernels.shape(), stride, padding)?;
    if grad_out.shape() != [g.c_out, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} does not match conv output",
            grad_out.shape()
        )));
    }
    let k = kernels.data();
    let go = grad_out.data();
    let mut gi = vec![F::zero(); g.c_in * g.h * g.w];
    for o in 0..g.c_out {
        let gplane = &go[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
        for c in 0..g.c_in {
            let gin = &mut gi[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, g.oh, g.h);
                for kx in 0..g.kw {
                    let wv = k[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
                    let (x0, x1) = g.valid_range(kx, g.ow, g.w);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        let irow = &mut gin[iy * g.w..(iy + 1) * g.w];
                        for ox in x0..x1 {
                            irow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(input_shape, gi)
}

pub struct Conv2dGrads<F> {
    pub input: Tensor<F>,
    pub kernels: Tensor<F>,
    pub bias: Tensor<F>,
}

pub fn conv2d_backward<F: Real>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGrads<F>> {
    let (gk, gb) = conv2d_backward_kernels(input, kernels.shape(), grad_out, stride, padding)?;
    let gi = conv2d_backward_input(input.shape(), kernels, grad_out, stride, padding)?;
    Ok(Conv2dGrads {
        input: gi,
        kernels: gk,
        bias: gb,
    })
}

/// Non-overlapping `k`x`k` mean pooling over `[C, H, W]`; `H` and `W` must be
/// multiples of `k`.
pub fn avgpool2d<F: Real>(input: &Tensor<F>, k: usize) -> Result<Tensor<F>> {
    let (c, h, w) = dims3(input.shape(), "pool input")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Shape(format!(
            "pool size {k} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let scale = F::one() / F::lit((k * k) as f64);
    let x = input.data();
    let mut out = vec![F::zero(); c * oh * ow];
    for ch in 0..c {
        for iy in 0..h {
            let row = &x[(ch * h + iy) * w..(ch * h + iy + 1) * w];
            let orow = &mut out[(ch * oh + iy / k) * ow..(ch * oh + iy / k + 1) * ow];
            for (ix, &v) in row.iter().enumerate() {
                orow[ix / k] += v;
            }
        }
    }
    for v in &mut out {
        *v *= scale;
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Spreads each output gradient uniformly (`/ k²`) over its window.
pub fn avgpool2d_backward<F: Real>(grad_out: &Tensor<F>, k: usize) -> Result<Tensor<F>> {
    let (c, oh, ow) = dims3(grad_out.shape(), "pool grad")?;
    if k == 0 {
        return Err(Error::Shape("pool size must be positive".into()));
    }
    let (h, w) = (oh * k, ow * k);
    let scale = F::one() / F::lit((k * k) as f64);
    let go = grad_out.data();
    let mut gi = vec![F::zero(); c * h * w];
    for ch in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                gi[(ch * h + iy) * w + ix] = go[(ch * oh + iy / k) * ow + ix / k] * scale;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], gi)
}

/// `W x + b` for `W` of shape `[N_out, N_in]`. The input may have any shape
/// with `N_in` elements.
pub fn dense<F: Real>(
    input: &Tensor<F>,
    weights: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let [n_out, n_in] = *weights.shape() else {
        return Err(Error::Shape(format!(
            "weights must be rank 2, got {:?}",
            weights.shape()
        )));
    };
    if input.len() != n_in {
        return Err(Error::Shape(format!(
            "dense expects {n_in} inputs, got {}",
            input.len()
        )));
    }
    let x = input.data();
    let mut out: Vec<F> = weights
        .data()
        .chunks_exact(n_in)
        .map(|row| row.iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect();
    if let Some(b) = bias {
        if b.len() != n_out {
            return Err(Error::Shape(format!("bias has {} entries, expected {n_out}", b.len())));
        }
        for (o, &bv) in out.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::from_vec(&[n_out], out)
}

/// `Wᵀ g`, shaped like the forward input.
pub fn dense_backward_input<F: Real>(
    input_shape: &[usize],
    weights: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<Tensor<F>> {
    let [n_out, n_in] = *weights.shape() else {
        return Err(Error::Shape("weights must be rank 2".into()));
    };
    if grad_out.len() != n_out || input_shape.iter().product::<usize>() != n_in {
        return Err(Error::Shape(format!(
            "dense backward: grad {:?}, input {input_shape:?}, weights {:?}",
            grad_out.shape(),
            weights.shape()
        )));
    }
    let mut gi = vec![F::zero(); n_in];
    for (row, &g) in weights.data().chunks_exact(n_in).zip(grad_out.data()) {
        if g == F::zero() {
            continue;
        }
        for (acc, &wv) in gi.iter_mut().zip(row) {
            *acc += wv * g;
        }
    }
    Tensor::from_vec(input_shape, gi)
}

pub struct DenseGrads<F> {
    pub input: Tensor<F>,
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
}

pub fn dense_backward<F: Real>(
    input: &Tensor<F>,
    weights: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<DenseGrads<F>> {
    let gi = dense_backward_input(input.shape(), weights, grad_out)?;
    let n_in = input.len();
    let mut gw = Vec::with_capacity(weights.len());
    for &g in grad_out.data() {
        gw.extend(input.data().iter().map(|&x| g * x));
    }
    Ok(DenseGrads {
        input: gi,
        weights: Tensor::from_vec(&[grad_out.len(), n_in], gw)?,
        bias: grad_out.clone().reshape(&[grad_out.len()])?,
    })
}

pub fn relu<F: Real>(input: &Tensor<F>) -> Tensor<F> {
    input.map(|v| v.max(F::zero()))
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<F: Real>(input: &Tensor<F>, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
    input.zip_map(grad_out, |x, g| if x > F::zero() { g } else { F::zero() })
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`. Deterministic in `seed`.
pub fn dropout_mask<F: Real>(shape: &[usize], rate: f64, seed: u64) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let n: usize = shape.iter().product();
    if rate == 0.0 {
        return Ok(Tensor::full(shape, F::one()));
    }
    let keep = F::lit(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}
