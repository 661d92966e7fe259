use ndarray::Array3;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::training_loss;
use super::network::{backward, forward_chw, to_chw, ConvWeights, DetectorArch, DetectorParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenegen::SceneSample;
use crate::seed;

fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::param("batch must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Mini-batch SGD with momentum from a He-uniform start. Per-sample gradients
/// are computed in parallel and summed in sample order, so the result is a
/// pure function of `(dataset, arch, hyper)`.
pub fn train<T: Scalar>(dataset: &[SceneSample<T>], arch: &DetectorArch, hyper: &TrainHyper) -> Result<DetectorParams<T>> {
    train_logged(dataset, arch, hyper, |_, _| {})
}

/// [`train`], reporting `(epoch, mean loss)` after every epoch.
pub fn train_logged<T: Scalar>(
    dataset: &[SceneSample<T>],
    arch: &DetectorArch,
    hyper: &TrainHyper,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<DetectorParams<T>> {
    if dataset.is_empty() {
        return Err(Error::param("training dataset is empty"));
    }
    hyper.validate()?;
    let mut params = DetectorParams::<T>::init(arch, hyper.seed)?;
    let inputs: Vec<Array3<T>> = dataset.iter().map(|s| to_chw(&s.image)).collect();
    for s in dataset {
        if s.image.dim() != (arch.input_size, arch.input_size, arch.input_channels) {
            return Err(Error::InputShape {
                expected: vec![arch.input_size, arch.input_size, arch.input_channels],
                got: vec![s.image.dim().0, s.image.dim().1, s.image.dim().2],
            });
        }
    }
    let mut velocity: Vec<ConvWeights<T>> = params
        .convs
        .iter()
        .map(|c| ConvWeights {
            weight: c.weight.mapv(|_| T::zero()),
            bias: c.bias.mapv(|_| T::zero()),
        })
        .collect();
    let lr = T::lit(hyper.lr);
    let mu = T::lit(hyper.momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..hyper.epochs {
        let mut rng = seed::rng(seed::derive_index(seed::derive(hyper.seed, "shuffle"), epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch) {
            let results: Vec<(T, Vec<ConvWeights<T>>)> = batch
                .par_iter()
                .map(|&i| {
                    let (raw, tape) = forward_chw(&params, inputs[i].clone());
                    let s = &dataset[i];
                    let (loss, d_raw) = training_loss(&raw, &s.gt_box, s.gt_class.id());
                    let grads = backward(&params, &tape, &d_raw, true, false);
                    (loss, grads.params.unwrap())
                })
                .collect();
            let scale = T::one() / T::lit(batch.len() as f64);
            let mut batch_loss = T::zero();
            let mut sum: Option<Vec<ConvWeights<T>>> = None;
            for (loss, g) in results {
                batch_loss += loss;
                match sum.as_mut() {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.weight += &b.weight;
                            a.bias += &b.bias;
                        }
                    }
                }
            }
            let batch_loss = (batch_loss * scale).as_f64();
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss: batch_loss });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            for ((p, v), g) in params.convs.iter_mut().zip(velocity.iter_mut()).zip(sum.unwrap()) {
                v.weight.zip_mut_with(&g.weight, |v, &g| *v = mu * *v + g * scale);
                v.bias.zip_mut_with(&g.bias, |v, &g| *v = mu * *v + g * scale);
                p.weight.zip_mut_with(&v.weight, |p, &v| *p -= lr * v);
                p.bias.zip_mut_with(&v.bias, |p, &v| *p -= lr * v);
            }
        }
        if !params.all_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: f64::NAN });
        }
        on_epoch(epoch, epoch_loss / dataset.len() as f64);
    }
    Ok(params)
}
