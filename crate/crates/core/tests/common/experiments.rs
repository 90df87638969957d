//! Fusion-vs-baseline experiments driven by the shipped configs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cxr_fusion::data::{filter_frontal, generate, prepare, split_by_patient, Splits, SynthConfig};
use cxr_fusion::metrics::{evaluate, subgroup_report, GroupBy};
use cxr_fusion::model::PresetName;
use cxr_fusion::train::{fit, FitOutcome, TrainConfig};
use serde::de::DeserializeOwned;

pub fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

pub fn load<T: DeserializeOwned>(rel: &str) -> T {
    let path = config_dir().join(rel);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn splits(synth: &SynthConfig, train: &TrainConfig) -> Splits {
    let mut samples = generate(synth).expect("shipped synth config is valid");
    if train.frontal_only {
        samples = filter_frontal(samples);
    }
    split_by_patient(samples, train.split, train.split_seed).expect("shipped split is valid")
}

pub fn variant(base: &TrainConfig, preset: PresetName, fusion: bool) -> TrainConfig {
    TrainConfig {
        preset,
        meta_features: if fusion { base.meta_features.clone() } else { None },
        ..base.clone()
    }
}

#[derive(Debug, Clone)]
pub struct GainRow {
    pub preset: PresetName,
    pub baseline: f64,
    pub fusion: f64,
    pub seconds: f64,
}

impl GainRow {
    pub fn gain(&self) -> f64 {
        self.fusion - self.baseline
    }
}

fn fit_variant(cfg: &TrainConfig, s: &Splits) -> FitOutcome {
    fit(cfg, &s.train, &s.val).unwrap_or_else(|e| panic!("{} training failed: {e}", cfg.preset))
}

fn test_macro(cfg: &TrainConfig, out: &FitOutcome, s: &Splits) -> f64 {
    let test = prepare(&s.test, cfg.policy, out.features.as_ref()).unwrap();
    evaluate(&out.model, &test, true).unwrap().macro_auroc_all.expect("test macro AUROC defined")
}

/// Baseline and fusion test macro AUROC for each preset.
pub fn fusion_gain(synth: &SynthConfig, base: &TrainConfig, presets: &[PresetName]) -> Vec<GainRow> {
    let s = splits(synth, base);
    presets
        .iter()
        .map(|&preset| {
            let started = Instant::now();
            let [baseline, fusion] = [false, true].map(|f| {
                let cfg = variant(base, preset, f);
                let out = fit_variant(&cfg, &s);
                test_macro(&cfg, &out, &s)
            });
            GainRow {
                preset,
                baseline,
                fusion,
                seconds: started.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct FairnessResult {
    pub image_only_gap: f64,
    pub fusion_gap: f64,
    pub image_only_by_sex: Vec<(String, f64)>,
    pub fusion_by_sex: Vec<(String, f64)>,
}

impl FairnessResult {
    pub fn reduction(&self) -> f64 {
        1.0 - self.fusion_gap / self.image_only_gap
    }
}

/// Test-split macro AUROC gap between sexes for the image-only and fusion
/// models trained at `base`.
pub fn fairness(synth: &SynthConfig, base: &TrainConfig) -> FairnessResult {
    let s = splits(synth, base);
    let by_sex = GroupBy::new("sex").unwrap();
    let [img, fus] = [false, true].map(|f| {
        let cfg = variant(base, base.preset, f);
        let out = fit_variant(&cfg, &s);
        let test = prepare(&s.test, cfg.policy, out.features.as_ref()).unwrap();
        let sec = subgroup_report(&out.model, &test, &by_sex, true).unwrap();
        let groups: Vec<(String, f64)> = sec
            .groups
            .iter()
            .filter_map(|g| g.macro_auroc_all.map(|a| (g.group.clone(), a)))
            .collect();
        (sec.max_gap.expect("both sexes reported"), groups)
    });
    FairnessResult {
        image_only_gap: img.0,
        fusion_gap: fus.0,
        image_only_by_sex: img.1,
        fusion_by_sex: fus.1,
    }
}
