//! Adam training loop and accuracy evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::{rate_encode, SpikeTrain, StaticImage};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// One labelled training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Image(StaticImage),
    Spikes(SpikeTrain, usize),
}

impl Sample {
    pub fn label(&self) -> usize {
        match self {
            Self::Image(img) => img.label,
            Self::Spikes(_, y) => *y,
        }
    }
}

/// SplitMix64 finaliser used to derive independent stream seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Flat model input for a sample.
///
/// Static images are rate-encoded for spiking models using `seed`; spike
/// trains are rate-decoded for ANNs.
pub fn model_input(model: &Model, sample: &Sample, seed: u64) -> Result<Vec<f64>> {
    let spec = &model.spec;
    let out = match (sample, model.is_spiking()) {
        (Sample::Image(img), true) => rate_encode(img, spec.steps, seed)?.to_f64(),
        (Sample::Image(img), false) => img.pixels.clone(),
        (Sample::Spikes(s, _), true) => s.to_f64(),
        (Sample::Spikes(s, _), false) => s.rate_decode(),
    };
    if out.len() != spec.input_len() {
        return Err(Error::Dimension(format!(
            "sample provides {} values, model expects {}",
            out.len(),
            spec.input_len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn check_labels(model: &Model, data: &[Sample]) -> Result<()> {
    if let Some(s) = data.iter().find(|s| s.label() >= model.spec.classes) {
        return Err(Error::Index(format!(
            "label {} out of range for {} classes",
            s.label(),
            model.spec.classes
        )));
    }
    Ok(())
}

/// Trains in place and returns per-epoch loss and validation accuracy.
///
/// Spiking models see a fresh rate encoding of every image each epoch.
pub fn train(model: &mut Model, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    check_labels(model, train_set)?;
    check_labels(model, val_set)?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut xs = Vec::with_capacity(batch.len() * model.spec.input_len());
            let mut ys = Vec::with_capacity(batch.len());
            for &i in batch {
                xs.extend(model_input(model, &train_set[i], derive_seed(epoch_seed, i as u64))?);
                ys.push(train_set[i].label());
            }
            let (loss, grads) = model.loss_and_grads(&xs, &ys)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite loss or gradient in epoch {} after {} samples",
                    epoch + 1,
                    total as usize
                )));
            }
            adam.step(&mut model.params, &grads);
            total += loss * batch.len() as f64;
        }
        let val_accuracy = if val_set.is_empty() {
            f64::NAN
        } else {
            accuracy(model, val_set, derive_seed(cfg.seed, u64::MAX))?
        };
        history.push(EpochStats {
            epoch: epoch + 1,
            train_loss: total / train_set.len() as f64,
            val_accuracy,
        });
    }
    Ok(history)
}

/// Posteriors for many samples, processed in fixed-size chunks.
pub fn posteriors(model: &Model, data: &[Sample], seed: u64) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 128;
    let mut out = Vec::with_capacity(data.len());
    for (c, chunk) in data.chunks(CHUNK).enumerate() {
        let mut xs = Vec::with_capacity(chunk.len() * model.spec.input_len());
        for (j, s) in chunk.iter().enumerate() {
            xs.extend(model_input(model, s, derive_seed(seed, (c * CHUNK + j) as u64))?);
        }
        out.extend(model.posteriors(&xs)?);
    }
    Ok(out)
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Fraction of samples classified correctly, in `[0, 1]`.
pub fn accuracy(model: &Model, data: &[Sample], seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("no samples to score".into()));
    }
    let post = posteriors(model, data, seed)?;
    let hits = post.iter().zip(data).filter(|(p, s)| argmax(p) == s.label()).count();
    Ok(hits as f64 / data.len() as f64)
}
