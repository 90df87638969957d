//! Label space, uncertainty policies and metadata encoding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_PATHOLOGIES: usize = 14;

/// The 14 report-derived findings, in the canonical order used for every
/// label vector, logit vector and report column in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pathology {
    Atelectasis = 0,
    Cardiomegaly,
    Consolidation,
    Edema,
    EnlargedCardiomediastinum,
    Fracture,
    LungLesion,
    LungOpacity,
    PleuralEffusion,
    PleuralOther,
    Pneumonia,
    Pneumothorax,
    SupportDevices,
    NoFinding,
}

impl Pathology {
    pub const ALL: [Pathology; NUM_PATHOLOGIES] = [
        Pathology::Atelectasis,
        Pathology::Cardiomegaly,
        Pathology::Consolidation,
        Pathology::Edema,
        Pathology::EnlargedCardiomediastinum,
        Pathology::Fracture,
        Pathology::LungLesion,
        Pathology::LungOpacity,
        Pathology::PleuralEffusion,
        Pathology::PleuralOther,
        Pathology::Pneumonia,
        Pathology::Pneumothorax,
        Pathology::SupportDevices,
        Pathology::NoFinding,
    ];

    /// The five headline findings, listed first in text reports and averaged
    /// separately as the 5-finding macro.
    pub const HEADLINE: [Pathology; 5] = [
        Pathology::Atelectasis,
        Pathology::Cardiomegaly,
        Pathology::Consolidation,
        Pathology::Edema,
        Pathology::PleuralEffusion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Pathology::Atelectasis => "Atelectasis",
            Pathology::Cardiomegaly => "Cardiomegaly",
            Pathology::Consolidation => "Consolidation",
            Pathology::Edema => "Edema",
            Pathology::EnlargedCardiomediastinum => "Enlarged Cardiomediastinum",
            Pathology::Fracture => "Fracture",
            Pathology::LungLesion => "Lung Lesion",
            Pathology::LungOpacity => "Lung Opacity",
            Pathology::PleuralEffusion => "Pleural Effusion",
            Pathology::PleuralOther => "Pleural Other",
            Pathology::Pneumonia => "Pneumonia",
            Pathology::Pneumothorax => "Pneumothorax",
            Pathology::SupportDevices => "Support Devices",
            Pathology::NoFinding => "No Finding",
        }
    }
}

impl fmt::Display for Pathology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pathology {
    type Err = Error;

    /// Case-insensitive; spaces, underscores and hyphens are interchangeable.
    fn from_str(s: &str) -> Result<Self> {
        let key = |s: &str| {
            s.chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .to_lowercase()
        };
        let wanted = key(s);
        Pathology::ALL
            .into_iter()
            .find(|p| key(p.name()) == wanted)
            .ok_or_else(|| Error::config(format!("unknown pathology {s:?}")))
    }
}

/// What a report says about one pathology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelState {
    Positive,
    Uncertain,
    Negative,
    NotMentioned,
}

impl LabelState {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelState::Positive => "positive",
            LabelState::Uncertain => "uncertain",
            LabelState::Negative => "negative",
            LabelState::NotMentioned => "not_mentioned",
        }
    }
}

impl FromStr for LabelState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(LabelState::Positive),
            "uncertain" => Ok(LabelState::Uncertain),
            "negative" => Ok(LabelState::Negative),
            "not_mentioned" => Ok(LabelState::NotMentioned),
            other => Err(Error::config(format!("unknown label state {other:?}"))),
        }
    }
}

/// How uncertain findings become training targets. Not-mentioned findings
/// are always masked out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyPolicy {
    #[default]
    UncertainNegative,
    UncertainPositive,
    UncertainMasked,
}

impl FromStr for UncertaintyPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncertain_negative" => Ok(Self::UncertainNegative),
            "uncertain_positive" => Ok(Self::UncertainPositive),
            "uncertain_masked" => Ok(Self::UncertainMasked),
            other => Err(Error::config(format!("unknown uncertainty policy {other:?}"))),
        }
    }
}

/// `(target, mask)` for one state under `policy`.
pub fn apply_policy_with(state: LabelState, policy: UncertaintyPolicy) -> (u8, u8) {
    match (state, policy) {
        (LabelState::Positive, _) => (1, 1),
        (LabelState::Negative, _) => (0, 1),
        (LabelState::NotMentioned, _) => (0, 0),
        (LabelState::Uncertain, UncertaintyPolicy::UncertainNegative) => (0, 1),
        (LabelState::Uncertain, UncertaintyPolicy::UncertainPositive) => (1, 1),
        (LabelState::Uncertain, UncertaintyPolicy::UncertainMasked) => (0, 0),
    }
}

/// Default policy: uncertain counts as negative.
pub fn apply_policy(state: LabelState) -> (u8, u8) {
    apply_policy_with(state, UncertaintyPolicy::UncertainNegative)
}

/// One sample's targets and loss mask, as f64 so they feed the loss directly.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetRow {
    pub target: [f64; NUM_PATHOLOGIES],
    pub mask: [f64; NUM_PATHOLOGIES],
}

impl TargetRow {
    pub fn unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }
}

pub fn build_targets(states: &[LabelState], policy: UncertaintyPolicy) -> Result<TargetRow> {
    if states.len() != NUM_PATHOLOGIES {
        return Err(Error::shape(format!(
            "expected {NUM_PATHOLOGIES} label states, got {}",
            states.len()
        )));
    }
    let mut row = TargetRow {
        target: [0.0; NUM_PATHOLOGIES],
        mask: [0.0; NUM_PATHOLOGIES],
    };
    for (i, &s) in states.iter().enumerate() {
        let (t, m) = apply_policy_with(s, policy);
        row.target[i] = f64::from(t);
        row.mask[i] = f64::from(m);
    }
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Sex::Female),
            "male" | "m" => Ok(Sex::Male),
            other => Err(Error::config(format!("unknown sex {other:?}"))),
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Female => "female",
            Sex::Male => "male",
        })
    }
}

pub const AGE_RANGE: (f64, f64) = (0.0, 120.0);
/// Open interval.
pub const BMI_RANGE: (f64, f64) = (5.0, 100.0);

/// Raw patient context. `None` means missing; out-of-range numbers are
/// treated as missing at encoding time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub age: Option<f64>,
    pub sex: Option<Sex>,
    pub race: Option<String>,
    pub bmi: Option<f64>,
    pub insurance: Option<String>,
}

impl MetadataRecord {
    pub fn valid_age(&self) -> Option<f64> {
        self.age
            .filter(|a| a.is_finite() && (AGE_RANGE.0..=AGE_RANGE.1).contains(a))
    }

    pub fn valid_bmi(&self) -> Option<f64> {
        self.bmi
            .filter(|b| b.is_finite() && *b > BMI_RANGE.0 && *b < BMI_RANGE.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Substitute a raw value (years, kg/m², or 0/1 for sex) before scaling.
    Impute { value: f64 },
    /// Encode 0 and append a companion slot that is 1 when missing.
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "feature", rename_all = "snake_case")]
pub enum FeatureSpec {
    /// age / 100
    Age { missing: MissingPolicy },
    /// female 0, male 1
    Sex { missing: MissingPolicy },
    /// bmi / 50
    Bmi { missing: MissingPolicy },
    Race { categories: Vec<String>, other_slot: bool },
    Insurance { categories: Vec<String>, other_slot: bool },
}

pub const DEFAULT_AGE_IMPUTE: f64 = 56.5;
pub const DEFAULT_BMI_IMPUTE: f64 = 27.0;
pub const DEFAULT_SEX_IMPUTE: f64 = 0.5;

impl FeatureSpec {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureSpec::Age { .. } => "age",
            FeatureSpec::Sex { .. } => "sex",
            FeatureSpec::Bmi { .. } => "bmi",
            FeatureSpec::Race { .. } => "race",
            FeatureSpec::Insurance { .. } => "insurance",
        }
    }

    /// Default spec for a selector name.
    pub fn by_name(name: &str) -> Result<Self> {
        let impute = |value| MissingPolicy::Impute { value };
        Ok(match name.trim().to_ascii_lowercase().as_str() {
            "age" => FeatureSpec::Age {
                missing: impute(DEFAULT_AGE_IMPUTE),
            },
            "sex" => FeatureSpec::Sex {
                missing: impute(DEFAULT_SEX_IMPUTE),
            },
            "bmi" => FeatureSpec::Bmi {
                missing: impute(DEFAULT_BMI_IMPUTE),
            },
            "race" => FeatureSpec::Race {
                categories: ["white", "black", "asian", "hispanic"]
                    .map(String::from)
                    .to_vec(),
                other_slot: true,
            },
            "insurance" => FeatureSpec::Insurance {
                categories: ["medicare", "medicaid", "private"].map(String::from).to_vec(),
                other_slot: true,
            },
            other => return Err(Error::config(format!("unknown metadata feature {other:?}"))),
        })
    }

    pub fn width(&self) -> usize {
        match self {
            FeatureSpec::Age { missing } | FeatureSpec::Sex { missing } | FeatureSpec::Bmi { missing } => {
                match missing {
                    MissingPolicy::Impute { .. } => 1,
                    MissingPolicy::Indicator => 2,
                }
            }
            FeatureSpec::Race {
                categories,
                other_slot,
            }
            | FeatureSpec::Insurance {
                categories,
                other_slot,
            } => categories.len() + usize::from(*other_slot),
        }
    }
}

/// Ordered metadata selectors with their encodings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatureConfig {
    pub features: Vec<FeatureSpec>,
}

impl Default for MetaFeatureConfig {
    /// Age, sex and BMI: three slots.
    fn default() -> Self {
        Self::from_names(&["age", "sex", "bmi"]).expect("default feature names")
    }
}

impl MetaFeatureConfig {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("metadata feature list is empty"));
        }
        let features = names
            .iter()
            .map(|n| FeatureSpec::by_name(n.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let mut seen = std::collections::HashSet::new();
        for f in &features {
            if !seen.insert(f.name()) {
                return Err(Error::config(format!("duplicate metadata feature {}", f.name())));
            }
        }
        Ok(Self { features })
    }

    /// Parses `"age,sex,bmi"` (also `|` or `+` separated).
    pub fn parse_list(s: &str) -> Result<Self> {
        let names: Vec<&str> = s
            .split([',', '|', '+'])
            .map(str::trim)
            .filter(|n| !n.is_empty())
            .collect();
        Self::from_names(&names)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.features.iter().map(FeatureSpec::name).collect()
    }

    pub fn width(&self) -> usize {
        self.features.iter().map(FeatureSpec::width).sum()
    }

    /// Replaces age/BMI impute values with medians of the valid values in `records`.
    pub fn impute_medians_from(&mut self, records: &[&MetadataRecord]) {
        let median = |mut xs: Vec<f64>| -> Option<f64> {
            if xs.is_empty() {
                return None;
            }
            xs.sort_by(f64::total_cmp);
            let n = xs.len();
            Some(if n % 2 == 1 {
                xs[n / 2]
            } else {
                0.5 * (xs[n / 2 - 1] + xs[n / 2])
            })
        };
        let ages = median(records.iter().filter_map(|r| r.valid_age()).collect());
        let bmis = median(records.iter().filter_map(|r| r.valid_bmi()).collect());
        for f in &mut self.features {
            match f {
                FeatureSpec::Age {
                    missing: MissingPolicy::Impute { value },
                } => {
                    if let Some(m) = ages {
                        *value = m;
                    }
                }
                FeatureSpec::Bmi {
                    missing: MissingPolicy::Impute { value },
                } => {
                    if let Some(m) = bmis {
                        *value = m;
                    }
                }
                _ => {}
            }
        }
    }
}

fn push_numeric(out: &mut Vec<f64>, raw: Option<f64>, scale: f64, missing: &MissingPolicy) {
    match (raw, missing) {
        (Some(v), MissingPolicy::Impute { .. }) => out.push(v / scale),
        (None, MissingPolicy::Impute { value }) => out.push(value / scale),
        (Some(v), MissingPolicy::Indicator) => out.extend([v / scale, 0.0]),
        (None, MissingPolicy::Indicator) => out.extend([0.0, 1.0]),
    }
}

fn push_categorical(
    out: &mut Vec<f64>,
    what: &str,
    value: Option<&str>,
    categories: &[String],
    other_slot: bool,
) -> Result<()> {
    let start = out.len();
    out.resize(start + categories.len() + usize::from(other_slot), 0.0);
    let Some(v) = value else { return Ok(()) };
    let v = v.trim().to_ascii_lowercase();
    match categories.iter().position(|c| c.eq_ignore_ascii_case(&v)) {
        Some(i) => out[start + i] = 1.0,
        None if other_slot => out[start + categories.len()] = 1.0,
        None => {
            return Err(Error::Encoding(format!(
                "{what} category {v:?} not in {categories:?} and no other slot"
            )))
        }
    }
    Ok(())
}

/// Encodes a record into the fixed-length vector described by `cfg`.
pub fn encode_metadata(r: &MetadataRecord, cfg: &MetaFeatureConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cfg.width());
    for f in &cfg.features {
        match f {
            FeatureSpec::Age { missing } => push_numeric(&mut out, r.valid_age(), 100.0, missing),
            FeatureSpec::Bmi { missing } => push_numeric(&mut out, r.valid_bmi(), 50.0, missing),
            FeatureSpec::Sex { missing } => {
                let raw = r.sex.map(|s| match s {
                    Sex::Female => 0.0,
                    Sex::Male => 1.0,
                });
                push_numeric(&mut out, raw, 1.0, missing)
            }
            FeatureSpec::Race {
                categories,
                other_slot,
            } => push_categorical(&mut out, "race", r.race.as_deref(), categories, *other_slot)?,
            FeatureSpec::Insurance {
                categories,
                other_slot,
            } => push_categorical(
                &mut out,
                "insurance",
                r.insurance.as_deref(),
                categories,
                *other_slot,
            )?,
        }
    }
    debug_assert_eq!(out.len(), cfg.width());
    Ok(out)
}
