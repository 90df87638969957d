use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit, RunLog, TrainConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::labels::MetaFeatureConfig;
use crate::rng::{Purpose, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepStrategy {
    Grid,
    /// `n_trials` distinct grid cells drawn without replacement.
    Random { n_trials: usize, seed: u64 },
}

/// Value lists per dimension. `meta_features` entries are feature lists
/// such as `"age,sex,bmi"`; `"none"` selects the image-only baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub strategy: SweepStrategy,
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub meta_features: Vec<String>,
    /// `(hidden, out)` pairs.
    pub meta_dims: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub meta_features: Option<Vec<String>>,
    pub meta_hidden: usize,
    pub meta_out: usize,
}

impl TrialSettings {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            meta_features: self.meta_features.clone(),
            meta_hidden: self.meta_hidden,
            meta_out: self.meta_out,
            ..base.clone()
        }
    }
}

fn parse_features(s: &str) -> Result<Option<Vec<String>>> {
    if s.trim().eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let cfg = MetaFeatureConfig::parse_list(s)?;
    Ok(Some(cfg.names().into_iter().map(String::from).collect()))
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("learning_rate", self.learning_rate.is_empty()),
            ("batch_size", self.batch_size.is_empty()),
            ("meta_features", self.meta_features.is_empty()),
            ("meta_dims", self.meta_dims.is_empty()),
        ] {
            if empty {
                return Err(Error::config(format!("sweep dimension {name} has no values")));
            }
        }
        if let SweepStrategy::Random { n_trials: 0, .. } = self.strategy {
            return Err(Error::config("random sweep needs n_trials >= 1"));
        }
        for f in &self.meta_features {
            parse_features(f)?;
        }
        Ok(())
    }

    /// Every grid cell, learning rate outermost and meta dims innermost.
    pub fn grid(&self) -> Result<Vec<TrialSettings>> {
        self.validate()?;
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rate {
            for &batch_size in &self.batch_size {
                for f in &self.meta_features {
                    let meta_features = parse_features(f)?;
                    for &(meta_hidden, meta_out) in &self.meta_dims {
                        out.push(TrialSettings {
                            learning_rate,
                            batch_size,
                            meta_features: meta_features.clone(),
                            meta_hidden,
                            meta_out,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Trials in run order.
    pub fn trials(&self) -> Result<Vec<TrialSettings>> {
        let grid = self.grid()?;
        match self.strategy {
            SweepStrategy::Grid => Ok(grid),
            SweepStrategy::Random { n_trials, .. } if n_trials >= grid.len() => Ok(grid),
            SweepStrategy::Random { n_trials, seed } => {
                let mut idx: Vec<usize> = (0..grid.len()).collect();
                Stream::keyed(seed, Purpose::Sweep, &[]).shuffle(&mut idx);
                Ok(idx[..n_trials].iter().map(|&i| grid[i].clone()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub trial_id: usize,
    pub settings: TrialSettings,
    pub best_val_auroc: Option<f64>,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<TrialRow>,
    pub logs: Vec<Option<RunLog>>,
    /// Index into `rows` of the best successful trial.
    pub winner: Option<usize>,
    pub winner_config: Option<TrainConfig>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    trial_id: usize,
    learning_rate: f64,
    batch_size: usize,
    meta_features: String,
    meta_hidden: usize,
    meta_out: usize,
    best_val_auroc: String,
    status: &'a str,
}

impl SweepOutcome {
    /// Trial table, one row per trial in trial-id order.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                trial_id: r.trial_id,
                learning_rate: r.settings.learning_rate,
                batch_size: r.settings.batch_size,
                meta_features: r.settings.meta_features.as_ref().map_or("none".into(), |f| f.join("+")),
                meta_hidden: r.settings.meta_hidden,
                meta_out: r.settings.meta_out,
                best_val_auroc: r.best_val_auroc.map(|a| a.to_string()).unwrap_or_default(),
                status: &r.status,
            })
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

/// Runs every trial through [`fit`], at most `jobs` at a time. A trial that
/// fails (divergence included) becomes a `failed` row and the sweep goes on.
pub fn sweep(spec: &SweepSpec, base: &TrainConfig, train: &[Sample], val: &[Sample], jobs: usize) -> Result<SweepOutcome> {
    let trials = spec.trials()?;
    let run = |s: &TrialSettings| match fit(&s.apply(base), train, val) {
        Ok(out) => (out.best_val_auroc, "ok".to_string(), Some(out.log)),
        Err(e) => (None, format!("failed: {e}"), None),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} sweep workers: {e}")))?;
    let results: Vec<_> = pool.install(|| trials.par_iter().map(run).collect());

    let mut rows = Vec::with_capacity(trials.len());
    let mut logs = Vec::with_capacity(trials.len());
    for (trial_id, (settings, (auc, status, log))) in trials.into_iter().zip(results).enumerate() {
        rows.push(TrialRow {
            trial_id,
            settings,
            best_val_auroc: auc,
            status,
        });
        logs.push(log);
    }
    let mut winner: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        let Some(a) = r.best_val_auroc else { continue };
        if winner.is_none_or(|w| a > rows[w].best_val_auroc.expect("winner has a score")) {
            winner = Some(i);
        }
    }
    let winner_config = winner.map(|w| rows[w].settings.apply(base));
    Ok(SweepOutcome {
        rows,
        logs,
        winner,
        winner_config,
    })
}
