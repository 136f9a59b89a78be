//! Deterministic single-threaded training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::Config;
use crate::error::{CoreError, Result};
use crate::metrics::{compute_metrics_with, MetricOptions, MetricsReport};
use crate::model::{Model, Noise, Sample, Trace};
use crate::optim::{clip_grad_norm, learning_rate, Sgd};
use crate::params::{Ctx, ParamStore};
use crate::partition::sample_gumbel;
use crate::tensor::Tensor;

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
    pub gm: f64,
    pub loss: f64,
}

impl EpochRecord {
    fn new(epoch: usize, split: &str, m: &MetricsReport, loss: f64) -> Self {
        Self {
            epoch,
            split: split.to_string(),
            accuracy: m.accuracy,
            precision: m.precision,
            f1: m.f1,
            gm: m.gm,
            loss,
        }
    }
}

pub const CSV_HEADER: &str = "epoch,split,accuracy,precision,f1,gm,loss";

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        // `{:?}` prints the shortest string that reads back to the same f64.
        let _ = writeln!(
            s,
            "{},{},{:?},{:?},{:?},{:?},{:?}",
            r.epoch, r.split, r.accuracy, r.precision, r.f1, r.gm, r.loss
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

pub struct Trainer {
    pub model: Model,
    pub params: ParamStore,
    pub optim: Sgd,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
}

fn argmax(v: &[f64]) -> usize {
    crate::partition::argmax(v).unwrap_or(0)
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        let model = Model::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed);
        let params = model.init_params(&mut rng);
        Ok(Self {
            optim: Sgd::new(cfg.optimizer.momentum, cfg.optimizer.weight_decay),
            model,
            params,
            rng,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.model.cfg
    }

    fn use_noise(&self) -> bool {
        let cfg = self.config();
        cfg.partition.train_noise && !cfg.ablation.disable_partition && !cfg.ablation.conv_only_backbone
    }

    /// Loss and named gradients for one sample.
    pub fn sample_gradients(&self, sample: &Sample, noise: Noise) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.params);
        self.model.bind_frozen(&mut ctx);
        let logits = self.model.forward(&mut ctx, sample, noise, &mut Trace::default())?;
        let loss = ctx.g.cross_entropy(logits, sample.label)?;
        let value = ctx.g.value(loss).data()[0];
        let grads = ctx.g.backward(loss)?;
        Ok((value, ctx.named_grads(&grads)))
    }

    /// One optimizer step on `batch`. Returns the mean loss.
    pub fn train_batch(&mut self, batch: &[&Sample], lr: f64, batch_index: usize) -> Result<f64> {
        let stages = self.config().model.stages;
        let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = 0.0;
        for sample in batch {
            let noise: Vec<Vec<f64>> = if self.use_noise() {
                (0..stages).map(|_| sample_gumbel(&mut self.rng, sample.energies.len())).collect()
            } else {
                Vec::new()
            };
            let noise = if noise.is_empty() { Noise::Zero } else { Noise::Sampled(&noise) };
            let (l, grads) = self.sample_gradients(sample, noise)?;
            loss += l;
            for (name, g) in grads {
                match total.get_mut(&name) {
                    Some(t) => t.add_assign(&g),
                    None => {
                        total.insert(name, g);
                    }
                }
            }
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() || total.values().any(|t| !t.is_finite()) {
            return Err(CoreError::Diverged {
                epoch: self.epoch,
                batch: batch_index,
            });
        }
        total.values_mut().for_each(|t| t.scale_assign(1.0 / n));
        clip_grad_norm(&mut total, self.config().optimizer.grad_clip);
        self.optim.step(&mut self.params, &total, lr, true)?;
        Ok(loss)
    }

    /// Shuffled mini-batch pass over `data`.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(CoreError::Data("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let lr = learning_rate(&self.config().optimizer, self.epoch);
        let bs = self.config().optimizer.batch_size;
        let (mut loss, mut steps) = (0.0, 0);
        for (b, chunk) in order.chunks(bs).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            loss += self.train_batch(&batch, lr, b)? * batch.len() as f64;
            steps += 1;
        }
        self.epoch += 1;
        Ok(EpochStats {
            loss: loss / data.len() as f64,
            steps,
        })
    }

    /// Noise-free predictions, metrics and mean loss.
    pub fn evaluate(&self, data: &[Sample]) -> Result<Evaluation> {
        let mut predictions = Vec::with_capacity(data.len());
        let mut labels = Vec::with_capacity(data.len());
        let mut loss = 0.0;
        for s in data {
            let logits = self.model.predict(&self.params, s)?;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - logits[s.label];
            predictions.push(argmax(&logits));
            labels.push(s.label);
        }
        let opts = MetricOptions {
            weighted_precision: self.config().data.weighted_precision,
        };
        let metrics = compute_metrics_with(&predictions, &labels, self.config().model.classes, opts)?;
        Ok(Evaluation {
            metrics,
            loss: loss / data.len().max(1) as f64,
            predictions,
        })
    }

    /// Trains for the configured number of epochs (continuing from
    /// [`Trainer::epoch`]), logging train and optional validation metrics.
    /// Stops early once training accuracy reaches
    /// `optimizer.early_stop_accuracy` when that is positive.
    pub fn fit(&mut self, train: &[Sample], val: Option<&[Sample]>, mut on_epoch: impl FnMut(&Trainer)) -> Result<()> {
        let target = self.config().optimizer.early_stop_accuracy;
        while self.epoch < self.config().optimizer.epochs {
            let stats = self.train_epoch(train)?;
            let ev = self.evaluate(train)?;
            log::info!(
                "epoch {} loss {:.5} train acc {:.4}",
                self.epoch,
                stats.loss,
                ev.metrics.accuracy
            );
            let reached = target > 0.0 && ev.metrics.accuracy >= target;
            self.log.push(EpochRecord::new(self.epoch, "train", &ev.metrics, ev.loss));
            if let Some(v) = val.filter(|v| !v.is_empty()) {
                let ev = self.evaluate(v)?;
                self.log.push(EpochRecord::new(self.epoch, "val", &ev.metrics, ev.loss));
            }
            on_epoch(self);
            if reached {
                break;
            }
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.log)
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.metrics_csv())?;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config().clone(),
            epoch: self.epoch as u32,
            params: self.params.clone(),
            velocity: self.optim.velocity.clone(),
            steps: self.optim.steps,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Resumes from `ck`; the metric log starts empty.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = Model::new(&ck.config)?;
        let expected = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        for (name, t) in expected.iter() {
            let got = ck.params.get(name)?;
            if got.shape() != t.shape() {
                return Err(CoreError::Data(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if ck.params.len() != expected.len() {
            return Err(CoreError::Data("checkpoint parameters do not match the model".into()));
        }
        let mut optim = Sgd::new(ck.config.optimizer.momentum, ck.config.optimizer.weight_decay);
        optim.velocity = ck.velocity.clone();
        optim.steps = ck.steps;
        Ok(Self {
            model,
            params: ck.params.clone(),
            optim,
            rng: ck.rng.restore(),
            epoch: ck.epoch as usize,
            log: Vec::new(),
        })
    }
}

/// Samples from labelled images, caption embeddings indexed like the images.
pub fn build_samples(cfg: &Config, images: Vec<(Tensor, usize)>, captions: Vec<Tensor>) -> Result<Vec<Sample>> {
    if images.len() != captions.len() {
        return Err(CoreError::shape(format!(
            "{} images with {} caption embeddings",
            images.len(),
            captions.len()
        )));
    }
    let side = cfg.model.image_size;
    images
        .into_iter()
        .zip(captions)
        .map(|((image, label), caption)| {
            if label >= cfg.model.classes {
                return Err(CoreError::Data(format!("label {label} out of {} classes", cfg.model.classes)));
            }
            let energies =
                crate::model::saliency_energies(&image, side, cfg.model.feature_side(), &cfg.saliency)?;
            Ok(Sample {
                image,
                energies,
                caption,
                label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_embeddings, synthetic_dataset};

    fn tiny() -> (Config, Vec<Sample>) {
        let mut cfg = Config::toy();
        cfg.model.stem_channels = 8;
        cfg.model.embedding_dim = 8;
        cfg.model.stages = 1;
        cfg.model.fusion_blocks = 1;
        cfg.model.classes = 2;
        cfg.optimizer.batch_size = 4;
        cfg.optimizer.epochs = 1;
        let imgs = synthetic_dataset(2, 4, 32, 1);
        let emb = class_embeddings(2, 8, 1);
        let caps = imgs.iter().map(|(_, l)| emb[*l].clone()).collect();
        let samples = build_samples(&cfg, imgs, caps).unwrap();
        (cfg, samples)
    }

    #[test]
    fn one_epoch_of_eight_samples_takes_two_steps() {
        let (cfg, data) = tiny();
        let mut t = Trainer::new(&cfg).unwrap();
        let stats = t.train_epoch(&data).unwrap();
        assert_eq!(stats.steps, 2);
        assert_eq!(t.optim.steps, 2);
        assert!(stats.loss.is_finite());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (mut cfg, data) = tiny();
        cfg.optimizer.epochs = 2;
        let mut a = Trainer::new(&cfg).unwrap();
        a.fit(&data, None, |_| {}).unwrap();

        let mut b = Trainer::new(&cfg).unwrap();
        b.train_epoch(&data).unwrap();
        let bytes = b.to_checkpoint().to_bytes();
        let mut c = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        c.train_epoch(&data).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), c.to_checkpoint().to_bytes());
    }

    #[test]
    fn csv_layout() {
        let rec = EpochRecord {
            epoch: 1,
            split: "train".into(),
            accuracy: 0.5,
            precision: 0.25,
            f1: 1.0,
            gm: 0.0,
            loss: 0.1,
        };
        assert_eq!(metrics_csv(&[rec]), "epoch,split,accuracy,precision,f1,gm,loss\n1,train,0.5,0.25,1.0,0.0,0.1\n");
    }
}
