//! Synthetic radiograph-like data with planted image and metadata signal.
//!
//! Each image is a 4x4 grid of cells. Fourteen of the sixteen cells belong
//! to one pathology each; when that pathology is rendered, its texture
//! appears in its own cell only. The README has the pattern table.
//!
//! Label probability per (image, pathology) is
//! `sigmoid(intercept + b_age * (age - 56.5) / 22.2 + b_sex * s + b_bmi * (bmi - 27) / 5)`
//! with `s = +1` for male and `-1` for female. A positive label is rendered
//! at `strength`, except that with probability `ambiguity` it is rendered at
//! `ambiguous_strength` (practically invisible), which leaves metadata as the
//! only usable evidence for that case.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, View};
use crate::error::{Error, Result};
use crate::labels::{LabelState, MetadataRecord, Pathology, Sex, NUM_PATHOLOGIES};
use crate::rng::{Purpose, Stream};
use crate::tensor::{sigmoid, Tensor};

pub const AGE_CENTER: f64 = 56.5;
pub const AGE_SCALE: f64 = 22.2;
pub const BMI_CENTER: f64 = 27.0;
pub const BMI_SCALE: f64 = 5.0;

/// Which cell of the 4x4 grid each pathology owns (cells 5 and 10 stay empty).
pub const PATTERN_CELLS: [usize; NUM_PATHOLOGIES] = [0, 1, 2, 3, 4, 6, 7, 8, 9, 11, 12, 13, 14, 15];

pub const RACES: [&str; 5] = ["white", "black", "asian", "hispanic", "other"];
const RACE_WEIGHTS: [f64; 5] = [0.6, 0.15, 0.12, 0.1, 0.03];
pub const INSURANCES: [&str; 3] = ["medicare", "medicaid", "private"];
const INSURANCE_WEIGHTS: [f64; 3] = [0.45, 0.2, 0.35];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathologySignal {
    /// Pattern amplitude in [0, 1] for a visible positive.
    pub strength: f64,
    pub beta_age: f64,
    pub beta_sex: f64,
    pub beta_bmi: f64,
    pub intercept: f64,
}

impl Default for PathologySignal {
    fn default() -> Self {
        Self {
            strength: 0.5,
            beta_age: 0.0,
            beta_sex: 0.0,
            beta_bmi: 0.0,
            intercept: -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SexRates {
    pub female: f64,
    pub male: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub seed: u64,
    pub image_size: usize,
    /// One entry per pathology, canonical order.
    pub signals: Vec<PathologySignal>,
    pub ambiguity_fraction: f64,
    /// Overrides `ambiguity_fraction` per sex when set.
    pub ambiguity_by_sex: Option<SexRates>,
    pub ambiguous_strength: f64,
    pub noise_sd: f64,
    pub not_mentioned_rate: f64,
    pub uncertain_rate: f64,
    pub lateral_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 100,
            images_per_patient: 1,
            seed: 0,
            image_size: 32,
            signals: vec![PathologySignal::default(); NUM_PATHOLOGIES],
            ambiguity_fraction: 0.0,
            ambiguity_by_sex: None,
            ambiguous_strength: 0.002,
            noise_sd: 0.05,
            not_mentioned_rate: 0.0,
            uncertain_rate: 0.0,
            lateral_fraction: 0.0,
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(format!("{name} must be in [0, 1], got {v}")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.images_per_patient == 0 {
            return Err(Error::config("n_patients and images_per_patient must be >= 1"));
        }
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return Err(Error::config(format!(
                "image_size must be a multiple of 4 and >= 16, got {}",
                self.image_size
            )));
        }
        if self.signals.len() != NUM_PATHOLOGIES {
            return Err(Error::config(format!(
                "signals must have {NUM_PATHOLOGIES} entries, got {}",
                self.signals.len()
            )));
        }
        for (p, s) in Pathology::ALL.iter().zip(&self.signals) {
            check_unit(&format!("signals[{p}].strength"), s.strength)?;
            for (n, v) in [("beta_age", s.beta_age), ("beta_sex", s.beta_sex), ("beta_bmi", s.beta_bmi), ("intercept", s.intercept)] {
                if !v.is_finite() {
                    return Err(Error::config(format!("signals[{p}].{n} must be finite")));
                }
            }
        }
        check_unit("ambiguity_fraction", self.ambiguity_fraction)?;
        if let Some(r) = self.ambiguity_by_sex {
            check_unit("ambiguity_by_sex.female", r.female)?;
            check_unit("ambiguity_by_sex.male", r.male)?;
        }
        check_unit("ambiguous_strength", self.ambiguous_strength)?;
        check_unit("not_mentioned_rate", self.not_mentioned_rate)?;
        check_unit("uncertain_rate", self.uncertain_rate)?;
        check_unit("lateral_fraction", self.lateral_fraction)?;
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config(format!("noise_sd must be >= 0, got {}", self.noise_sd)));
        }
        Ok(())
    }

    fn ambiguity_for(&self, sex: Sex) -> f64 {
        match (self.ambiguity_by_sex, sex) {
            (Some(r), Sex::Female) => r.female,
            (Some(r), Sex::Male) => r.male,
            (None, _) => self.ambiguity_fraction,
        }
    }
}

/// Ground truth behind one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub labels: [bool; NUM_PATHOLOGIES],
    /// Positive but rendered at near-zero strength.
    pub ambiguous: [bool; NUM_PATHOLOGIES],
    pub rendered_strength: [f64; NUM_PATHOLOGIES],
}

/// Logit of the metadata-driven label probability.
pub fn label_logit(sig: &PathologySignal, age: f64, sex: Sex, bmi: f64) -> f64 {
    let s = match sex {
        Sex::Male => 1.0,
        Sex::Female => -1.0,
    };
    sig.intercept
        + sig.beta_age * (age - AGE_CENTER) / AGE_SCALE
        + sig.beta_sex * s
        + sig.beta_bmi * (bmi - BMI_CENTER) / BMI_SCALE
}

/// Pattern value at normalised cell coordinates `(fy, fx)` in [0, 1).
fn pattern_raw(p: Pathology, u: usize, v: usize, fy: f64, fx: f64) -> f64 {
    let (dy, dx) = (fy - 0.5, fx - 0.5);
    let r = (dy * dy + dx * dx).sqrt();
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    match p {
        Pathology::Atelectasis => on(dy.abs() < 0.15 && dx.abs() < 0.35),
        Pathology::Cardiomegaly => on(r < 0.4),
        Pathology::Consolidation => on(dy.abs() < 0.3 && dx.abs() < 0.3),
        Pathology::Edema => on(v % 2 == 0 && dy.abs() < 0.4),
        Pathology::EnlargedCardiomediastinum => on(dx.abs() < 0.2),
        Pathology::Fracture => on((fx - fy).abs() < 0.1),
        Pathology::LungLesion => (-(r * r) / (2.0 * 0.12 * 0.12)).exp(),
        Pathology::LungOpacity => (-(r * r) / (2.0 * 0.35 * 0.35)).exp(),
        Pathology::PleuralEffusion => on(fy > 0.75 - 0.3 * fx),
        Pathology::PleuralOther => on((r - 0.35).abs() < 0.08),
        Pathology::Pneumonia => on((u + v) % 2 == 0),
        Pathology::Pneumothorax => on((fx + fy - 1.0).abs() < 0.1),
        Pathology::SupportDevices => on(dx.abs() < 0.08 || dy.abs() < 0.08),
        Pathology::NoFinding => on(u % 2 == 0 && dx.abs() < 0.4),
    }
}

/// The 14 pattern masks for a `size`-pixel image, each scaled so its
/// maximum is exactly 1 and zero outside its own cell.
pub fn pattern_masks(size: usize) -> Vec<Vec<f64>> {
    let cell = size / 4;
    Pathology::ALL
        .iter()
        .map(|&p| {
            let c = PATTERN_CELLS[p.index()];
            let (cy, cx) = (c / 4 * cell, c % 4 * cell);
            let mut m = vec![0.0; size * size];
            for u in 0..cell {
                for v in 0..cell {
                    let fy = (u as f64 + 0.5) / cell as f64;
                    let fx = (v as f64 + 0.5) / cell as f64;
                    m[(cy + u) * size + cx + v] = pattern_raw(p, u, v, fy, fx);
                }
            }
            let max = m.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                m.iter_mut().for_each(|x| *x /= max);
            }
            m
        })
        .collect()
}

/// Pixel index where pathology `p`'s mask reaches 1 (first in row-major order).
pub fn pattern_peak(size: usize, p: Pathology) -> usize {
    pattern_masks(size)[p.index()]
        .iter()
        .position(|&v| v == 1.0)
        .expect("mask has a peak")
}

fn weighted_pick<'a>(rng: &mut Stream, items: &[&'a str], weights: &[f64]) -> &'a str {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (item, w) in items.iter().zip(weights) {
        if u < *w {
            return item;
        }
        u -= w;
    }
    items[items.len() - 1]
}

/// Quantises to the 16-bit grid used by the on-disk format, so that
/// generated samples survive a manifest round trip unchanged.
#[inline]
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

struct Patient {
    id: String,
    metadata: MetadataRecord,
    sex: Sex,
}

fn draw_patient(cfg: &SynthConfig, idx: usize) -> Patient {
    let mut rng = Stream::keyed(cfg.seed, Purpose::Demographics, &[idx as u64]);
    let age = rng.uniform_range(18.0, 95.0);
    let sex = if rng.bernoulli(0.5) { Sex::Male } else { Sex::Female };
    let bmi = (27.0 + 5.0 * rng.normal()).clamp(15.0, 50.0);
    let race = weighted_pick(&mut rng, &RACES, &RACE_WEIGHTS).to_string();
    let insurance = weighted_pick(&mut rng, &INSURANCES, &INSURANCE_WEIGHTS).to_string();
    Patient {
        id: format!("p{idx:05}"),
        metadata: MetadataRecord {
            age: Some(age),
            sex: Some(sex),
            race: Some(race),
            bmi: Some(bmi),
            insurance: Some(insurance),
        },
        sex,
    }
}

fn draw_image(cfg: &SynthConfig, masks: &[Vec<f64>], patient: &Patient, pi: usize, ii: usize) -> (Sample, Truth) {
    let keys = [pi as u64, ii as u64];
    let age = patient.metadata.age.expect("generated");
    let bmi = patient.metadata.bmi.expect("generated");
    let size = cfg.image_size;

    let mut truth = Truth {
        labels: [false; NUM_PATHOLOGIES],
        ambiguous: [false; NUM_PATHOLOGIES],
        rendered_strength: [0.0; NUM_PATHOLOGIES],
    };
    let mut states = [LabelState::Negative; NUM_PATHOLOGIES];
    let ambiguity = cfg.ambiguity_for(patient.sex);
    for p in Pathology::ALL {
        let k = p.index() as u64;
        let sig = &cfg.signals[p.index()];
        let mut lrng = Stream::keyed(cfg.seed, Purpose::Label, &[keys[0], keys[1], k]);
        let positive = lrng.bernoulli(sigmoid(label_logit(sig, age, patient.sex, bmi)));
        truth.labels[p.index()] = positive;
        if positive {
            let mut arng = Stream::keyed(cfg.seed, Purpose::Ambiguity, &[keys[0], keys[1], k]);
            let ambiguous = arng.bernoulli(ambiguity);
            truth.ambiguous[p.index()] = ambiguous;
            truth.rendered_strength[p.index()] = if ambiguous {
                cfg.ambiguous_strength
            } else {
                sig.strength
            };
            states[p.index()] = LabelState::Positive;
        }
        let mut nrng = Stream::keyed(cfg.seed, Purpose::Annotation, &[keys[0], keys[1], k]);
        let (u_nm, u_unc) = (nrng.uniform(), nrng.uniform());
        if u_nm < cfg.not_mentioned_rate {
            states[p.index()] = LabelState::NotMentioned;
        } else if u_unc < cfg.uncertain_rate {
            states[p.index()] = LabelState::Uncertain;
        }
    }

    let mut rrng = Stream::keyed(cfg.seed, Purpose::Render, &keys);
    let brightness = 0.15 + 0.1 * rrng.uniform();
    let tilt = 0.05 * rrng.uniform();
    let mut nrng = Stream::keyed(cfg.seed, Purpose::Noise, &keys);
    let mut pixels = vec![0.0; size * size];
    for (i, px) in pixels.iter_mut().enumerate() {
        let y = (i / size) as f64 / size as f64;
        let mut v = brightness + tilt * y;
        for (m, s) in masks.iter().zip(&truth.rendered_strength) {
            if *s > 0.0 {
                v += s * m[i];
            }
        }
        if cfg.noise_sd > 0.0 {
            v += cfg.noise_sd * nrng.normal();
        }
        *px = quantize(v);
    }

    let mut vrng = Stream::keyed(cfg.seed, Purpose::View, &keys);
    let view = if vrng.bernoulli(cfg.lateral_fraction) {
        View::Lateral
    } else {
        View::Frontal
    };
    let sample = Sample {
        sample_id: format!("{}_i{ii:02}", patient.id),
        patient_id: patient.id.clone(),
        image: Tensor::new(vec![1, size, size], pixels).expect("image shape"),
        metadata: patient.metadata.clone(),
        states,
        view,
    };
    (sample, truth)
}

/// Generates the dataset together with its hidden ground truth.
pub fn generate_with_truth(cfg: &SynthConfig) -> Result<(Vec<Sample>, Vec<Truth>)> {
    cfg.validate()?;
    let masks = pattern_masks(cfg.image_size);
    let per_patient: Vec<Vec<(Sample, Truth)>> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|pi| {
            let patient = draw_patient(cfg, pi);
            (0..cfg.images_per_patient)
                .map(|ii| draw_image(cfg, &masks, &patient, pi, ii))
                .collect()
        })
        .collect();
    Ok(per_patient.into_iter().flatten().unzip())
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    Ok(generate_with_truth(cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_are_disjoint_and_peaked() {
        let masks = pattern_masks(32);
        for (i, m) in masks.iter().enumerate() {
            assert_eq!(m.iter().cloned().fold(0.0, f64::max), 1.0, "pattern {i}");
            for (j, other) in masks.iter().enumerate() {
                if i != j {
                    assert!(m.iter().zip(other).all(|(a, b)| *a == 0.0 || *b == 0.0));
                }
            }
        }
        // distinct textures, compared relative to each cell's origin
        let local = |i: usize| -> Vec<f64> {
            let c = PATTERN_CELLS[i];
            let (cy, cx) = (c / 4 * 8, c % 4 * 8);
            (0..64).map(|k| masks[i][(cy + k / 8) * 32 + cx + k % 8]).collect()
        };
        for i in 0..14 {
            for j in i + 1..14 {
                assert_ne!(local(i), local(j), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let cfg = SynthConfig {
            n_patients: 12,
            images_per_patient: 2,
            seed: 5,
            ambiguity_fraction: 0.3,
            not_mentioned_rate: 0.1,
            uncertain_rate: 0.1,
            lateral_fraction: 0.2,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 24);
        for s in &a {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.image.shape(), &[1, 32, 32]);
        }
        let other = generate(&SynthConfig { seed: 6, ..cfg.clone() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn invalid_config() {
        let bad = SynthConfig {
            ambiguity_fraction: 1.5,
            ..Default::default()
        };
        let err = generate(&bad).unwrap_err().to_string();
        assert!(err.contains("ambiguity_fraction"), "{err}");
        assert!(generate(&SynthConfig {
            n_patients: 0,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            signals: vec![],
            ..Default::default()
        })
        .is_err());
    }
}
