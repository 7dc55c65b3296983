use ndarray::{Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingMetadata};
use super::network::Network;
use super::CnnSpec;
use crate::error::{Error, Result};

const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// One input tensor (`C×S×S`, row-major, values in [0, 1]) and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub data: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn batch_tensor(spec: &CnnSpec, items: &[&TrainingExample]) -> Result<Array4<f32>> {
    let (c, s) = (spec.input_channels, spec.input_size);
    let per = c * s * s;
    let mut data = Vec::with_capacity(items.len() * per);
    for item in items {
        if item.data.len() != per {
            return Err(Error::DataLength {
                expected: per,
                found: item.data.len(),
            });
        }
        data.extend_from_slice(&item.data);
    }
    Ok(Array4::from_shape_vec((items.len(), c, s, s), data).expect("length checked"))
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn accuracy(net: &Network<f32>, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in examples.chunks(64) {
        let refs: Vec<&TrainingExample> = chunk.iter().collect();
        let logits = net.logits(batch_tensor(net.spec(), &refs)?.view())?;
        for (row, ex) in logits.rows().into_iter().zip(chunk) {
            if argmax_f32(row.as_slice().expect("row-major")) == ex.label {
                correct += 1;
            }
        }
    }
    Ok(f64::from(correct) / examples.len() as f64)
}

fn argmax_f32(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch SGD with momentum on mean cross-entropy.
///
/// Parameters are initialized from `cfg.seed`; each epoch reshuffles with a
/// stream derived from the same seed, so identical inputs give identical
/// checkpoints.
pub fn train(examples: &[TrainingExample], spec: CnnSpec, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    spec.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("dataset", "training set is empty"));
    }
    if let Some(ex) = examples.iter().find(|e| e.label >= spec.classes) {
        return Err(Error::LabelOutOfRange {
            label: ex.label,
            classes: spec.classes,
        });
    }

    let mut net = Network::<f32>::init(spec, cfg.seed)?;
    let mut velocity: Vec<ArrayD<f32>> = net.params().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let lr = cfg.learning_rate as f32;
    let mu = cfg.momentum as f32;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut accuracies = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&TrainingExample> = batch.iter().map(|&i| &examples[i]).collect();
            let labels: Vec<usize> = items.iter().map(|e| e.label).collect();
            let x = batch_tensor(&spec, &items)?;
            let (loss, grads, logits) = net.train_step_parts(x.view(), &labels)?;
            loss_sum += f64::from(loss) * items.len() as f64;
            correct += logits
                .rows()
                .into_iter()
                .zip(&labels)
                .filter(|(row, &l)| argmax_f32(row.as_slice().expect("row-major")) == l)
                .count();
            for ((p, v), g) in net.params_mut().iter_mut().zip(&mut velocity).zip(&grads.0) {
                v.zip_mut_with(g, |v, &g| *v = mu * *v + g);
                p.zip_mut_with(v, |p, &v| *p -= lr * v);
            }
        }
        let epoch_loss = loss_sum / examples.len() as f64;
        let epoch_acc = correct as f64 / examples.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.4} train accuracy {epoch_acc:.4}");
        debug_assert!(net.params().iter().all(|p| p.iter().all(|v| v.is_finite())));
        losses.push(epoch_loss);
        accuracies.push(epoch_acc);
    }

    let meta = TrainingMetadata {
        epochs: cfg.epochs,
        seed: cfg.seed,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        losses,
        train_accuracies: accuracies,
        examples: examples.len(),
        profile: None,
    };
    Ok(Checkpoint::from_network(&net, meta))
}
