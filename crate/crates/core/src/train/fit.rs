use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EpochRow, Optimizer, RunLog, TrainConfig};
use crate::autodiff::{bce_term, Tape};
use crate::data::{prepare, Example, Sample};
use crate::error::{Error, Result};
use crate::labels::{MetaFeatureConfig, NUM_PATHOLOGIES};
use crate::metrics::{report_from_scores, EvalReport};
use crate::model::{build_model, BackbonePreset, FusionModel};
use crate::rng::{Purpose, Stream};
use crate::tensor::{sigmoid, Tensor};

/// Batch loss and summed parameter gradients.
///
/// The loss is the mean BCE over every unmasked (sample, pathology) entry
/// in the batch. Each sample gets its own tape, all sharing the batch-wide
/// denominator, and gradients are summed in batch order so the result does
/// not depend on thread scheduling.
pub fn batch_gradients(model: &FusionModel, batch: &[&Example]) -> Result<(f64, Vec<Tensor>, usize)> {
    let denom: usize = batch.iter().map(|e| e.targets.unmasked()).sum();
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    if denom == 0 {
        return Ok((0.0, grads, 0));
    }
    let per_sample: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|e| {
            let mut tape = Tape::new();
            let rec = model.record(&mut tape, &e.image, e.meta.as_deref())?;
            let loss = tape.masked_bce_with_denom(rec.logits, &e.targets.target, &e.targets.mask, denom as f64)?;
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).data()[0], model.collect_grads(&rec, &g)))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    for (l, g) in per_sample {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    Ok((loss, grads, denom))
}

fn as_divergence(e: Error) -> Error {
    match e {
        Error::NumericDomain(m) => Error::Divergence(m),
        other => other,
    }
}

/// One optimizer update on `batch`; returns the batch loss before the update.
///
/// A batch with no unmasked entries has zero loss and zero gradient, and
/// the update is skipped so that optimizer momentum cannot move the weights.
pub fn train_step(model: &mut FusionModel, opt: &mut Optimizer, batch: &[&Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let (loss, grads, denom) = batch_gradients(model, batch).map_err(as_divergence)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("batch loss is {loss}")));
    }
    if denom > 0 {
        opt.step(model.params_mut(), &grads).map_err(as_divergence)?;
    }
    Ok(loss)
}

/// Pooled masked BCE and the mask-aware report on `examples`.
pub fn validation_metrics(model: &FusionModel, examples: &[Example]) -> Result<(f64, EvalReport)> {
    let logits: Vec<Vec<f64>> = examples
        .par_iter()
        .map(|e| model.forward(&e.image, e.meta.as_deref()))
        .collect::<Result<_>>()?;
    let (mut total, mut count) = (0.0, 0usize);
    let mut scores = Vec::with_capacity(examples.len());
    for (z, e) in logits.iter().zip(examples) {
        let mut row = [0.0; NUM_PATHOLOGIES];
        for k in 0..NUM_PATHOLOGIES {
            row[k] = sigmoid(z[k]);
            if e.targets.mask[k] == 1.0 {
                total += bce_term(z[k], e.targets.target[k]);
                count += 1;
            }
        }
        scores.push(row);
    }
    let targets: Vec<_> = examples.iter().map(|e| e.targets.clone()).collect();
    let report = report_from_scores(&scores, &targets, true)?;
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    Ok((loss, report))
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters from the epoch with the best validation macro AUROC.
    pub model: FusionModel,
    /// Feature encoding with imputation values taken from the training set.
    pub features: Option<MetaFeatureConfig>,
    pub log: RunLog,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
}

/// What a checkpoint carries besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModelInfo {
    pub train_config: TrainConfig,
    pub meta_features: Option<MetaFeatureConfig>,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: FusionModel,
    pub info: TrainedModelInfo,
}

impl FitOutcome {
    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let info = TrainedModelInfo {
            train_config: cfg.clone(),
            meta_features: self.features.clone(),
            best_epoch: self.best_epoch,
            best_val_auroc: self.best_val_auroc,
        };
        self.model.save(path, serde_json::to_value(info).expect("info serializes"))
    }
}

/// Loads a checkpoint written by [`FitOutcome::save`].
pub fn load_trained(path: &Path) -> Result<TrainedModel> {
    let (model, extra) = FusionModel::load(path)?;
    let info: TrainedModelInfo = serde_json::from_value(extra)
        .map_err(|e| Error::io(path, format!("checkpoint lacks training info: {e}")))?;
    if info.meta_features.is_some() != model.meta_config().is_some() {
        return Err(Error::Mode(format!(
            "{}: feature config and model mode disagree",
            path.display()
        )));
    }
    Ok(TrainedModel { model, info })
}

/// Trains for `cfg.epochs` epochs and keeps the epoch with the highest
/// validation macro AUROC (earliest on ties; an undefined AUROC never wins
/// over a defined one).
pub fn fit(cfg: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    if val.is_empty() {
        return Err(Error::config("validation split is empty"));
    }
    let features = match cfg.feature_config()? {
        Some(mut f) => {
            let records: Vec<_> = train.iter().map(|s| &s.metadata).collect();
            f.impute_medians_from(&records);
            Some(f)
        }
        None => None,
    };
    let train_ex = prepare(train, cfg.policy, features.as_ref())?;
    let val_ex = prepare(val, cfg.policy, features.as_ref())?;

    let mut preset = BackbonePreset::by_name(cfg.preset);
    preset.image_size = train_ex[0].image.shape()[1];
    let meta = features.as_ref().map(|f| cfg.meta_branch(f.width()));
    let mut model = build_model(&preset, meta, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;

    let mut log = RunLog::default();
    let mut best: Option<(usize, Option<f64>, FusionModel)> = None;
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        Stream::keyed(cfg.seed, Purpose::Shuffle, &[epoch as u64]).shuffle(&mut order);
        let (mut weighted, mut entries) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_ex[i]).collect();
            let n: usize = batch.iter().map(|e| e.targets.unmasked()).sum();
            let loss = train_step(&mut model, &mut opt, &batch)
                .map_err(|e| annotate(e, epoch))?;
            weighted += loss * n as f64;
            entries += n;
        }
        let train_loss = if entries == 0 { 0.0 } else { weighted / entries as f64 };
        let (val_loss, report) = validation_metrics(&model, &val_ex).map_err(|e| annotate(as_divergence(e), epoch))?;
        let auc = report.macro_auroc_all;
        let better = match &best {
            None => true,
            Some((_, prev, _)) => match (auc, prev) {
                (Some(a), Some(p)) => a > *p,
                (Some(_), None) => true,
                _ => false,
            },
        };
        if better {
            best = Some((epoch, auc, model.clone()));
        }
        log.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            val_macro_auroc: auc,
            seconds: started.elapsed().as_secs_f64(),
        })?;
    }
    let (best_epoch, best_val_auroc, model) = best.expect("at least one epoch");
    Ok(FitOutcome {
        model,
        features,
        log,
        best_epoch,
        best_val_auroc,
    })
}

fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence(m) => Error::Divergence(format!("epoch {epoch}: {m}")),
        other => other,
    }
}
