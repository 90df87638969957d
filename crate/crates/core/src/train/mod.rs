//! Mini-batch training, model selection and the hyperparameter sweep.

mod fit;
mod optim;
mod sweep;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{MetaFeatureConfig, UncertaintyPolicy};
use crate::model::{MetaBranchConfig, PresetName};

pub use fit::{batch_gradients, fit, load_trained, train_step, validation_metrics, FitOutcome, TrainedModel};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, MOMENTUM};
pub use sweep::{sweep, SweepOutcome, SweepSpec, SweepStrategy, TrialRow, TrialSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: PresetName,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Drives weight init and per-epoch shuffling.
    pub seed: u64,
    pub policy: UncertaintyPolicy,
    /// Metadata features fed to the fusion branch; `None` trains the
    /// image-only baseline.
    pub meta_features: Option<Vec<String>>,
    pub meta_hidden: usize,
    pub meta_out: usize,
    /// Drop lateral views before splitting.
    pub frontal_only: bool,
    /// Patient-level train/val/test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: PresetName::PlainScaled,
            epochs: 50,
            batch_size: 32,
            learning_rate: 3e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            policy: UncertaintyPolicy::UncertainNegative,
            meta_features: Some(vec!["age".into(), "sex".into(), "bmi".into()]),
            meta_hidden: 12,
            meta_out: 8,
            frontal_only: true,
            split: [0.7, 0.15, 0.15],
            split_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.meta_features.is_some() && (self.meta_hidden == 0 || self.meta_out == 0) {
            return Err(Error::config("meta_hidden and meta_out must be >= 1"));
        }
        for (name, f) in ["train", "val", "test"].iter().zip(self.split) {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("split.{name} must be in [0, 1], got {f}")));
            }
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions must sum to 1, got {:?}", self.split)));
        }
        self.feature_config()?;
        Ok(())
    }

    /// Feature config before median imputation.
    pub fn feature_config(&self) -> Result<Option<MetaFeatureConfig>> {
        self.meta_features.as_ref().map(|n| MetaFeatureConfig::from_names(n)).transpose()
    }

    pub fn meta_branch(&self, input_dim: usize) -> MetaBranchConfig {
        MetaBranchConfig {
            input_dim,
            hidden_dim: self.meta_hidden,
            output_dim: self.meta_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_auroc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    rows: Vec<EpochRow>,
}

impl RunLog {
    pub fn rows(&self) -> &[EpochRow] {
        &self.rows
    }

    pub fn push(&mut self, row: EpochRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::config(format!("run log epochs must increase: {} after {}", row.epoch, last.epoch)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// CSV with header `epoch,train_loss,val_loss,val_macro_auroc,seconds`.
    /// An undefined AUROC is an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_macro_auroc,seconds\n");
        for r in &self.rows {
            let auc = r.val_macro_auroc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{:.3}", r.epoch, r.train_loss, r.val_loss, auc, r.seconds);
        }
        out
    }
}
