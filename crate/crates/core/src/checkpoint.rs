//! Binary checkpoint: versioned header, model description, seeds, voting
//! partition, parameter arrays in declaration order and, optionally, the
//! optimiser state. All integers and floats are little-endian.

use crate::error::{Error, Result};
use crate::network::{parse_arch, Ablation, Model, ModelSpec, Params};
use crate::neuron::NeuronParams;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 8] = b"SNNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub model: Model<F>,
    /// Completed epochs.
    pub epoch: u64,
    pub optimizer: Option<AdamState<F>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
        self.u32(n);
        Ok(())
    }
    fn blocks<F: Real>(&mut self, blocks: &[&Tensor<F>]) -> Result<()> {
        self.len(blocks.len())?;
        for b in blocks {
            self.len(b.len())?;
            for &v in b.data() {
                v.write_le(&mut self.0);
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    rest: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.rest.len() < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} reading {what}",
                self.offset
            )));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        self.offset += n;
        Ok(head)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn blocks<F: Real>(&mut self, shapes: &[Vec<usize>], what: &str) -> Result<Vec<Tensor<F>>> {
        let n = self.u32(what)? as usize;
        if n != shapes.len() {
            return Err(Error::Checkpoint(format!(
                "{what}: {n} blocks, architecture has {}",
                shapes.len()
            )));
        }
        let width = (F::BITS / 8) as usize;
        shapes
            .iter()
            .enumerate()
            .map(|(k, shape)| {
                let len = self.u32(what)? as usize;
                let expected: usize = shape.iter().product();
                if len != expected {
                    return Err(Error::Checkpoint(format!(
                        "{what} block {k}: {len} values, expected {expected}"
                    )));
                }
                let mut bytes = self.take(len * width, what)?;
                let mut data = Vec::with_capacity(len);
                for _ in 0..len {
                    let (v, rest) = F::read_le(bytes).expect("length checked");
                    if !v.is_finite() {
                        return Err(Error::Checkpoint(format!("{what} block {k}: non-finite value")));
                    }
                    data.push(v);
                    bytes = rest;
                }
                Tensor::from_vec(shape, data)
            })
            .collect()
    }
}

/// Precision (32 or 64) recorded in a checkpoint header.
pub fn peek_precision(bytes: &[u8]) -> Result<u32> {
    let mut r = Reader {
        rest: bytes,
        offset: 0,
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    match r.u32("precision")? {
        p @ (32 | 64) => Ok(p),
        p => Err(Error::Checkpoint(format!("unsupported precision {p}"))),
    }
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let spec = &m.spec;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(F::BITS);
        let arch = spec.config.arch_string();
        w.len(arch.len())?;
        w.0.extend_from_slice(arch.as_bytes());
        w.len(spec.config.time_steps)?;
        let ab = spec.config.ablation;
        w.u8(u8::from(ab.use_synaptic_block) | (u8::from(ab.use_learnable_wm) << 1));
        w.len(spec.input[1])?;
        w.len(spec.input[2])?;
        w.f64(spec.neuron.v_th);
        w.u32(spec.neuron.s_max);
        w.f64(spec.neuron.alpha_h);
        w.f64(spec.neuron.alpha_w);
        w.f64(spec.dropout_rate);
        w.f64(spec.input_scale);
        w.u64(m.seed);
        w.u64(self.epoch);
        w.len(m.group_map.len())?;
        for &g in &m.group_map {
            w.len(g)?;
        }
        let blocks: Vec<&Tensor<F>> = m.params.blocks().into_iter().map(|(_, t)| t).collect();
        w.blocks(&blocks)?;
        match &self.optimizer {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.f64(a.config.lr);
                w.f64(a.config.beta1);
                w.f64(a.config.beta2);
                w.f64(a.config.eps);
                w.u64(a.step);
                w.blocks(&a.m.iter().collect::<Vec<_>>())?;
                w.blocks(&a.v.iter().collect::<Vec<_>>())?;
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let precision = peek_precision(bytes)?;
        if precision != F::BITS {
            return Err(Error::Checkpoint(format!(
                "checkpoint is {precision}-bit, requested {}-bit",
                F::BITS
            )));
        }
        let mut r = Reader {
            rest: &bytes[16..],
            offset: 16,
        };
        let arch_len = r.u32("architecture length")? as usize;
        let arch = std::str::from_utf8(r.take(arch_len, "architecture")?)
            .map_err(|_| Error::Checkpoint("architecture string is not UTF-8".into()))?
            .to_string();
        let steps = r.u32("time steps")? as usize;
        let flags = r.u8("flags")?;
        if flags > 3 {
            return Err(Error::Checkpoint(format!("unknown flag bits {flags:#x}")));
        }
        let ablation = Ablation {
            use_synaptic_block: flags & 1 != 0,
            use_learnable_wm: flags & 2 != 0,
        };
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let neuron = NeuronParams {
            v_th: r.f64("v_th")?,
            s_max: r.u32("s_max")?,
            alpha_h: r.f64("alpha_h")?,
            alpha_w: r.f64("alpha_w")?,
        };
        let dropout_rate = r.f64("dropout rate")?;
        let input_scale = r.f64("input scale")?;
        let seed = r.u64("seed")?;
        let epoch = r.u64("epoch")?;
        let config = parse_arch(&arch, steps, ablation)
            .map_err(|e| Error::Checkpoint(format!("stored architecture: {e}")))?;
        let spec = ModelSpec {
            dropout_rate,
            input_scale,
            neuron,
            ..ModelSpec::new(config, h, w)
        };
        let map_len = r.u32("group map length")? as usize;
        let group_map = (0..map_len)
            .map(|_| r.u32("group map").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut params = Params::<F>::zeros(&spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let shapes: Vec<Vec<usize>> = params.blocks().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let values = r.blocks::<F>(&shapes, "parameters")?;
        for (dst, src) in params.blocks_mut().into_iter().zip(values) {
            *dst = src;
        }
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let config = AdamConfig {
                    lr: r.f64("lr")?,
                    beta1: r.f64("beta1")?,
                    beta2: r.f64("beta2")?,
                    eps: r.f64("eps")?,
                };
                let step = r.u64("step")?;
                let m = r.blocks::<F>(&shapes, "first moments")?;
                let v = r.blocks::<F>(&shapes, "second moments")?;
                Some(AdamState { config, m, v, step })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if !r.rest.is_empty() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after offset {}",
                r.rest.len(),
                r.offset
            )));
        }
        let model = Model::new(spec, params, group_map, seed)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            model,
            epoch,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::init_model;

    fn sample<F: Real>() -> Checkpoint<F> {
        let cfg = parse_arch("2SC3-AP2-4FC-2Voting", 2, Ablation::default()).unwrap();
        let mut spec = ModelSpec::new(cfg, 4, 4);
        spec.input_scale = 0.25;
        let model = init_model::<F>(spec, 9).unwrap();
        let adam = AdamState::new(&model.params, AdamConfig::default());
        Checkpoint {
            model,
            epoch: 3,
            optimizer: Some(adam),
        }
    }

    #[test]
    fn round_trip_both_precisions() {
        let a = sample::<f64>();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(peek_precision(&bytes).unwrap(), 64);
        assert_eq!(Checkpoint::<f64>::from_bytes(&bytes).unwrap(), a);
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
        let b = sample::<f32>();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(Checkpoint::<f32>::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let bytes = sample::<f64>().to_bytes().unwrap();
        for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::<f64>::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f64>::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bad),
            Err(Error::Checkpoint(_))
        ));
    }
}
