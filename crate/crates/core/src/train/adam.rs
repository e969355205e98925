use crate::error::{Error, Result};
use crate::network::Params;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are stored block by block in the
/// order of [`Params::blocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &Params<F>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<F>> = params
            .blocks()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update. Blocks flagged in `frozen` are left untouched.
    pub fn update(&mut self, params: &mut Params<F>, grads: &Params<F>, frozen: &[bool]) -> Result<()> {
        let g_blocks: Vec<&Tensor<F>> = grads.blocks().into_iter().map(|(_, t)| t).collect();
        let p_blocks = params.blocks_mut();
        if p_blocks.len() != g_blocks.len() || p_blocks.len() != self.m.len() {
            return Err(Error::Shape("Adam state does not match parameter layout".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = F::lit(1.0 - c.beta1.powi(t));
        let bc2 = F::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (lr, eps) = (F::lit(c.lr), F::lit(c.eps));
        for (k, (p, g)) in p_blocks.into_iter().zip(g_blocks).enumerate() {
            if frozen.get(k).copied().unwrap_or(false) {
                continue;
            }
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient block {k} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{parse_arch, Ablation, ModelSpec};

    fn params() -> Params<f64> {
        let spec = ModelSpec::new(parse_arch("2FC-2Voting", 1, Ablation::default()).unwrap(), 1, 1);
        let mut p = Params::zeros(&spec).unwrap();
        for b in p.blocks_mut() {
            for v in b.data_mut() {
                *v = 0.25;
            }
        }
        p
    }

    fn filled(value: f64) -> Params<f64> {
        let mut g = params();
        for b in g.blocks_mut() {
            for v in b.data_mut() {
                *v = value;
            }
        }
        g
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = params();
        let before = p.clone();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.update(&mut p, &filled(0.0), &[]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = params();
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&p, cfg);
        adam.update(&mut p, &filled(1.0), &[]).unwrap();
        let expected = 0.25 - 1e-3 / (1.0 + 1e-8);
        for (_, b) in p.blocks() {
            for v in b.data() {
                assert!((v - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn repeated_constant_gradient() {
        let mut p = params();
        let mut adam = AdamState::new(&p, AdamConfig { lr: 1e-3, ..AdamConfig::default() });
        let mut prev = 0.25;
        let mut steps = Vec::new();
        for _ in 0..2 {
            adam.update(&mut p, &filled(1.0), &[]).unwrap();
            let now = p.blocks()[0].1.data()[0];
            steps.push(now - prev);
            prev = now;
        }
        // bias correction makes every step of a constant gradient -lr/(1+eps)
        let exact = -1e-3 / (1.0 + 1e-8);
        for s in steps {
            assert!((s - exact).abs() < 1e-15, "{s}");
        }
    }

    #[test]
    fn frozen_blocks_untouched() {
        let mut p = params();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.update(&mut p, &filled(1.0), &[false, false, true]).unwrap();
        assert_eq!(p.blocks()[2].1.data(), &[0.25, 0.25]);
        assert_ne!(p.blocks()[0].1.data()[0], 0.25);
    }
}
