//! Fine-tuning with Adam and separate backbone/head learning rates.

use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_batch, DatasetManifest, Split};
use crate::eval::evaluate;
use crate::model::{ModelBundle, ModelError};
use crate::nn::Adam;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the manifest has no validation samples.
    pub val_weighted_f1: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (best validation weighted F1).
    pub best_epoch: usize,
    pub wall_seconds: f64,
}

/// Per-tensor learning rates: backbone tensors at `lr_backbone`, head tensors
/// at `lr_head`.
pub fn learning_rates(bundle: &ModelBundle) -> Vec<f64> {
    let n_backbone = bundle.backbone_param_count();
    let n_total = bundle.params().len();
    (0..n_total)
        .map(|i| if i < n_backbone { bundle.config.lr_backbone } else { bundle.config.lr_head })
        .collect()
}

/// Mean loss and mean gradients over a batch, reduced in batch order.
fn batch_gradients(
    bundle: &ModelBundle,
    images: &ndarray::Array4<f32>,
    labels: &[usize],
) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let views: Vec<_> = images.axis_iter(Axis(0)).collect();
    let per_sample = views
        .into_par_iter()
        .zip(labels.par_iter())
        .map(|(img, &label)| bundle.loss_and_grads(img, label))
        .collect::<Result<Vec<_>, _>>()?;
    let n = per_sample.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    grads.iter_mut().flatten().for_each(|g| *g /= n);
    Ok((loss / n, grads))
}

/// Fine-tunes `bundle` on the train split for `config.epochs` epochs and keeps
/// the weights with the best validation weighted F1. `on_epoch` sees every
/// epoch record as it completes.
pub fn finetune(
    bundle: &mut ModelBundle,
    manifest: &DatasetManifest,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRecord, ModelError> {
    bundle.config.validate()?;
    let config = bundle.config.clone();
    if manifest.classes.len() != config.num_classes {
        return Err(ModelError::ClassCountMismatch {
            expected: config.num_classes,
            found: manifest.classes.len(),
        });
    }
    bundle.class_names = manifest.class_names();

    let started = Instant::now();
    let n_train = manifest.split_len(Split::Train);
    let has_val = manifest.split_len(Split::Val) > 0;
    let lrs = learning_rates(bundle);
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelBundle)> = None;

    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (images, labels) = load_batch(manifest, Split::Train, chunk, config.input_size)?;
            let (loss, grads) = batch_gradients(bundle, &images, &labels)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(ModelError::DivergedLoss { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            adam.step(bundle.params_mut(), &grads, &lrs);
        }
        let train_loss = if n_train > 0 { loss_sum / n_train as f64 } else { 0.0 };

        let val_weighted_f1 = if has_val {
            let eval = evaluate(bundle, manifest, Split::Val, config.batch_size).map_err(|e| match e {
                crate::eval::EvalError::Model(m) => m,
                crate::eval::EvalError::Dataset(d) => ModelError::Dataset(d),
                other => ModelError::Config(other.to_string()),
            })?;
            Some(eval.report.weighted_avg.f1)
        } else {
            None
        };

        // Ties (and runs without a validation split) keep the later epoch.
        let score = val_weighted_f1.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score >= *s) {
            best = Some((score, epoch, bundle.clone()));
        }

        let record = EpochRecord {
            epoch,
            train_loss,
            val_weighted_f1,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        epochs.push(record);
    }

    let (_, best_epoch, best_bundle) = best.expect("at least one epoch");
    *bundle = best_bundle;
    Ok(TrainRecord { epochs, best_epoch, wall_seconds: started.elapsed().as_secs_f64() })
}
