use super::adam::{AdamConfig, AdamState};
use super::backward::sample_gradients;
use super::{loss_mse, target_encode};
use crate::compress::FrameTensor;
use crate::error::{Error, Result};
use crate::network::{argmax_lowest, ForwardOptions, Mode, Model, Params};
use crate::real::Real;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frames: FrameTensor,
    pub label: usize,
}

/// A sample converted to the model's per-step inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample<F> {
    pub inputs: Vec<Tensor<F>>,
    pub label: usize,
}

pub fn prepare_samples<F: Real>(model: &Model<F>, samples: &[Sample]) -> Result<Vec<PreparedSample<F>>> {
    let classes = model.classes();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.label >= classes {
                return Err(Error::Value(format!(
                    "sample {i}: label {} >= class count {classes}",
                    s.label
                )));
            }
            Ok(PreparedSample {
                inputs: model.prepare_input(&s.frames)?,
                label: s.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub desired_count: u32,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: AdamConfig::default().lr,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            desired_count: 1,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self, s_max: u32) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.desired_count == 0 || self.desired_count > s_max {
            return Err(Error::Config(format!(
                "desired count must be in 1..={s_max}, got {}",
                self.desired_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

impl EpochStats {
    /// Tab-separated log line without a trailing newline.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.3}",
            self.epoch, self.loss, self.train_acc, self.test_acc, self.wall_seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the epoch's shuffle.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    mix(mix(seed) ^ epoch)
}

/// Seed of the dropout masks of one sample in one epoch.
pub fn sample_seed(seed: u64, epoch: u64, sample: usize) -> u64 {
    mix(epoch_seed(seed, epoch) ^ mix(sample as u64 ^ 0xD1B5_4A32_D192_ED03))
}

fn predict_inputs<F: Real>(model: &Model<F>, inputs: &[Tensor<F>]) -> Result<usize> {
    let trace = model.forward_steps(inputs, Mode::Eval, model.seed, &ForwardOptions::default())?;
    argmax_lowest(&model.class_scores(&trace)?)
}

/// Accuracy and confusion counts in eval mode. Runs samples on the current
/// rayon pool; the result does not depend on the thread count.
pub fn evaluate<F: Real>(model: &Model<F>, samples: &[PreparedSample<F>]) -> Result<EvalReport> {
    let classes = model.classes();
    let preds = samples
        .par_iter()
        .map(|s| predict_inputs(model, &s.inputs))
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    let mut correct = 0usize;
    for (s, p) in samples.iter().zip(preds) {
        confusion[s.label][p] += 1;
        correct += usize::from(s.label == p);
    }
    let accuracy = if samples.is_empty() {
        0.0
    } else {
        correct as f64 / samples.len() as f64
    };
    Ok(EvalReport {
        accuracy,
        confusion,
    })
}

/// Summed per-step loss of every sample in eval mode, averaged over samples.
pub fn mean_loss<F: Real>(model: &Model<F>, samples: &[PreparedSample<F>], desired_count: u32) -> Result<f64> {
    let losses = samples
        .par_iter()
        .map(|s| {
            let trace = model.forward_steps(&s.inputs, Mode::Eval, model.seed, &ForwardOptions::default())?;
            let target = target_encode::<F>(s.label, &model.group_map, model.classes(), desired_count)?;
            let mut total = 0.0;
            for step in &trace.steps {
                total += loss_mse(step.output.data(), &target)?.0.as_f64();
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len().max(1) as f64)
}

/// Mini-batch training state: model, optimiser and completed-epoch count.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<F> {
    pub model: Model<F>,
    pub adam: AdamState<F>,
    pub epoch: u64,
    pub opts: TrainOptions,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: Model<F>, opts: TrainOptions) -> Result<Self> {
        opts.validate(model.spec.neuron.s_max)?;
        let adam = AdamState::new(
            &model.params,
            AdamConfig {
                lr: opts.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            model,
            adam,
            epoch: 0,
            opts,
        })
    }

    /// Continues from saved optimiser state after `epoch` completed epochs.
    pub fn resume(model: Model<F>, adam: AdamState<F>, epoch: u64, opts: TrainOptions) -> Result<Self> {
        opts.validate(model.spec.neuron.s_max)?;
        Ok(Self {
            model,
            adam,
            epoch,
            opts,
        })
    }

    fn frozen_blocks(&self) -> Vec<bool> {
        let learn_wm = self.model.spec.config.ablation.use_learnable_wm;
        self.model
            .params
            .blocks()
            .iter()
            .map(|(name, _)| !learn_wm && name.ends_with(".w_m"))
            .collect()
    }

    /// One optimiser step on the samples `batch` (indices into `train`),
    /// with dropout seeded from the current epoch. Returns the summed loss
    /// and the number of correct predictions.
    pub fn train_batch(&mut self, train: &[PreparedSample<F>], batch: &[usize]) -> Result<(f64, usize)> {
        if batch.is_empty() {
            return Ok((0.0, 0));
        }
        let (epoch, seed) = (self.epoch, self.opts.seed);
        let model = &self.model;
        let desired = self.opts.desired_count;
        let results = batch
            .par_iter()
            .map(|&i| {
                let s = train.get(i).ok_or(Error::Index { index: i, len: train.len() })?;
                let g = sample_gradients(
                    model,
                    &s.inputs,
                    s.label,
                    desired,
                    Mode::Train,
                    sample_seed(seed, epoch, i),
                    &ForwardOptions::default(),
                )?;
                let pred = argmax_lowest(&model.class_scores(&g.trace)?)?;
                Ok((g.loss, g.grads, pred == s.label))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sum = Params::zeros(&model.spec)?;
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for (loss, grads, hit) in &results {
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient in epoch {}",
                    epoch + 1
                )));
            }
            total_loss += loss.as_f64();
            correct += usize::from(*hit);
            sum.add_scaled(grads, F::one())?;
        }
        let mut mean = Params::zeros(&model.spec)?;
        mean.add_scaled(&sum, F::lit(1.0 / batch.len() as f64))?;
        let frozen = self.frozen_blocks();
        self.adam.update(&mut self.model.params, &mean, &frozen)?;
        if !self.model.params.all_finite() {
            return Err(Error::Numerical(format!("non-finite parameters in epoch {}", epoch + 1)));
        }
        Ok((total_loss, correct))
    }

    /// One pass over `train` in a shuffled order, then an eval pass over
    /// `test`. Per-sample gradients are computed in parallel and summed in
    /// sample order.
    pub fn run_epoch(
        &mut self,
        train: &[PreparedSample<F>],
        test: &[PreparedSample<F>],
    ) -> Result<EpochStats> {
        let start = Instant::now();
        let epoch = self.epoch;
        let seed = self.opts.seed;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(self.opts.batch_size) {
            let (loss, hits) = self.train_batch(train, batch)?;
            total_loss += loss;
            correct += hits;
        }
        let test_acc = evaluate(&self.model, test)?.accuracy;
        self.epoch += 1;
        let n = train.len().max(1) as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            loss: total_loss / n,
            train_acc: correct as f64 / n,
            test_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct() {
        assert_ne!(epoch_seed(1, 0), epoch_seed(1, 1));
        assert_ne!(sample_seed(1, 0, 0), sample_seed(1, 0, 1));
        assert_ne!(sample_seed(1, 0, 0), sample_seed(2, 0, 0));
        assert_eq!(sample_seed(5, 3, 7), sample_seed(5, 3, 7));
    }

    #[test]
    fn log_line_has_five_columns() {
        let s = EpochStats {
            epoch: 1,
            loss: 0.5,
            train_acc: 0.75,
            test_acc: 1.0,
            wall_seconds: 0.25,
        };
        assert_eq!(s.log_line().split('\t').count(), 5);
    }
}
