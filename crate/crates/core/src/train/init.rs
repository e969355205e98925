use crate::error::Result;
use crate::network::{LayerParams, Model, ModelSpec, Params};
use crate::real::Real;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const WEIGHT_STD: f64 = 0.5;
const GROUP_STREAM: u64 = 0x6A09_E667_F3BC_C908;

/// Weights drawn from `Normal(V_th / fan_in, 0.5)` layer by layer (fan-in is
/// `C_in·k·k` for convolutions), biases and leak weights zero.
pub fn init_weights<F: Real>(spec: &ModelSpec, seed: u64) -> Result<Params<F>> {
    let mut params = Params::zeros(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v_th = spec.neuron.v_th;
    for layer in &mut params.layers {
        let weights = match layer {
            LayerParams::Conv { kernels, .. } => kernels,
            LayerParams::Dense { weights, .. } => weights,
            LayerParams::Stateless => continue,
        };
        let shape = weights.shape();
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(v_th / fan_in as f64, WEIGHT_STD).expect("finite normal");
        for w in weights.data_mut() {
            *w = F::lit(normal.sample(&mut rng));
        }
    }
    Ok(params)
}

/// Random partition of `outputs` units into voting groups, fixed per seed.
pub fn init_group_map(outputs: usize, seed: u64) -> Vec<usize> {
    let mut map: Vec<usize> = (0..outputs).collect();
    map.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ GROUP_STREAM));
    map
}

pub fn init_model<F: Real>(spec: ModelSpec, seed: u64) -> Result<Model<F>> {
    let params = init_weights(&spec, seed)?;
    let map = init_group_map(spec.output_len()?, seed);
    Model::new(spec, params, map, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{parse_arch, Ablation};
    use crate::neuron::sigmoid;

    fn spec(arch: &str, h: usize, w: usize) -> ModelSpec {
        ModelSpec::new(parse_arch(arch, 1, Ablation::default()).unwrap(), h, w)
    }

    #[test]
    fn dense_weight_statistics() {
        // 2x16x16 input gives a fan-in of 512
        let p: Params<f64> = init_weights(&spec("64FC-2Voting", 16, 16), 3).unwrap();
        let LayerParams::Dense { weights, bias, w_m } = &p.layers[0] else {
            panic!("dense layer expected")
        };
        let n = weights.len() as f64;
        let mean = weights.data().iter().sum::<f64>() / n;
        let target = 10.0 / 512.0;
        assert!((mean - target).abs() < 3.0 * 0.5 / n.sqrt(), "{mean}");
        let var = weights.data().iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.5).abs() < 0.01);
        assert!(bias.data().iter().all(|b| *b == 0.0));
        assert!(w_m.data().iter().all(|w| sigmoid(*w) == 0.5));
    }

    #[test]
    fn deterministic_per_seed() {
        let s = spec("4SC3-AP2-8FC-2Voting", 4, 4);
        let a: Model<f64> = init_model(s.clone(), 11).unwrap();
        let b: Model<f64> = init_model(s.clone(), 11).unwrap();
        let c: Model<f64> = init_model(s, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        let mut sorted = a.group_map.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }
}
