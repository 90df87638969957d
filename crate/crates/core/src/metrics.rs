//! Exact AUROC, per-pathology evaluation reports and subgroup gaps.
//!
//! AUROC is the Mann-Whitney statistic: the fraction of (positive, negative)
//! pairs ranked correctly, with ties credited one half. It is computed by a
//! sort and a single sweep over tie groups, accumulating `2U` as an integer
//! so the result matches brute-force pair counting bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::labels::{MetadataRecord, Pathology, TargetRow, NUM_PATHOLOGIES};
use crate::model::FusionModel;
use crate::tensor::sigmoid;

pub const DEFAULT_MIN_GROUP_SIZE: usize = 20;

/// `2U`, `n_pos` and `n_neg` for the given scores.
pub fn auroc_counts(scores: &[f64], labels: &[u8]) -> Result<(u128, u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "auroc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NumericDomain(format!("auroc: score {i} is NaN")));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::NumericDomain(format!("auroc: label {i} is {}, expected 0 or 1", labels[i])));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let (mut two_u, mut neg_below) = (0u128, 0u64);
    let (mut n_pos, mut n_neg) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut p, mut n) = (0u64, 0u64);
        // -0.0 and 0.0 sort apart under total_cmp but compare equal, so group by ==.
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        two_u += 2 * u128::from(p) * u128::from(neg_below) + u128::from(p) * u128::from(n);
        neg_below += n;
        n_pos += p;
        n_neg += n;
    }
    Ok((two_u, n_pos, n_neg))
}

/// AUROC in [0, 1], or `None` when either class is absent.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    let (two_u, p, n) = auroc_counts(scores, labels)?;
    if p == 0 || n == 0 {
        return Ok(None);
    }
    Ok(Some(two_u as f64 / (2 * u128::from(p) * u128::from(n)) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologyResult {
    pub pathology: String,
    /// `None` when the evaluated samples lack positives or negatives.
    pub auroc: Option<f64>,
    pub n_pos: u64,
    pub n_neg: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub mask_aware: bool,
    pub per_pathology: Vec<PathologyResult>,
    /// Mean over all defined pathologies of the fourteen.
    pub macro_auroc_all: Option<f64>,
    /// Mean over the defined pathologies among the five headline findings.
    pub macro_auroc_headline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subgroups: Option<SubgroupSection>,
}

impl EvalReport {
    pub fn auroc_of(&self, p: Pathology) -> Option<f64> {
        self.per_pathology[p.index()].auroc
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Builds a report from per-sample scores (or logits: AUROC only depends on order).
///
/// With `mask_aware`, a sample contributes to a pathology only where its mask is 1;
/// otherwise every sample contributes with its target as the label.
pub fn report_from_scores(scores: &[[f64; NUM_PATHOLOGIES]], targets: &[TargetRow], mask_aware: bool) -> Result<EvalReport> {
    if scores.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} score rows but {} target rows",
            scores.len(),
            targets.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::config("cannot evaluate zero samples"));
    }
    let per_pathology = Pathology::ALL
        .iter()
        .map(|&p| {
            let k = p.index();
            let (s, l): (Vec<f64>, Vec<u8>) = scores
                .iter()
                .zip(targets)
                .filter(|(_, t)| !mask_aware || t.mask[k] == 1.0)
                .map(|(row, t)| (row[k], u8::from(t.target[k] == 1.0)))
                .unzip();
            let (_, n_pos, n_neg) = auroc_counts(&s, &l)?;
            Ok(PathologyResult {
                pathology: p.name().to_string(),
                auroc: auroc(&s, &l)?,
                n_pos,
                n_neg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        n_samples: scores.len(),
        mask_aware,
        macro_auroc_all: mean_defined(per_pathology.iter().map(|r| r.auroc)),
        macro_auroc_headline: mean_defined(Pathology::HEADLINE.iter().map(|p| per_pathology[p.index()].auroc)),
        per_pathology,
        subgroups: None,
    })
}

/// Sigmoid scores for every example, in input order.
pub fn predict(model: &FusionModel, examples: &[Example]) -> Result<Vec<[f64; NUM_PATHOLOGIES]>> {
    examples
        .par_iter()
        .map(|e| {
            let logits = model.forward(&e.image, e.meta.as_deref())?;
            let mut row = [0.0; NUM_PATHOLOGIES];
            for (r, z) in row.iter_mut().zip(logits) {
                *r = sigmoid(z);
            }
            Ok(row)
        })
        .collect()
}

pub fn evaluate(model: &FusionModel, examples: &[Example], mask_aware: bool) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::config("cannot evaluate zero samples"));
    }
    let scores = predict(model, examples)?;
    let targets: Vec<TargetRow> = examples.iter().map(|e| e.targets.clone()).collect();
    report_from_scores(&scores, &targets, mask_aware)
}

/// How to partition samples: a metadata key plus, for numeric keys, bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBy {
    pub key: String,
    /// Ascending edges `e0 < e1 < ...`; groups are `[e_i, e_{i+1})` and the
    /// last one is open-ended. Ignored for categorical keys.
    #[serde(default)]
    pub bins: Option<Vec<f64>>,
    #[serde(default = "default_min_size")]
    pub min_size: usize,
}

fn default_min_size() -> usize {
    DEFAULT_MIN_GROUP_SIZE
}

impl GroupBy {
    /// Default binning: age `[0,40) [40,65) [65,inf)`, BMI by the usual
    /// categories, categorical keys as-is.
    pub fn new(key: &str) -> Result<Self> {
        let bins = match key {
            "age" => Some(vec![0.0, 40.0, 65.0]),
            "bmi" => Some(vec![0.0, 18.5, 25.0, 30.0]),
            "sex" | "race" | "insurance" => None,
            other => return Err(Error::config(format!("unknown subgroup key {other:?}"))),
        };
        Ok(Self {
            key: key.to_string(),
            bins,
            min_size: DEFAULT_MIN_GROUP_SIZE,
        })
    }

    fn validate(&self) -> Result<()> {
        match self.key.as_str() {
            "age" | "bmi" => {
                let b = self
                    .bins
                    .as_ref()
                    .ok_or_else(|| Error::config(format!("numeric key {} needs bins", self.key)))?;
                if b.is_empty() || b.windows(2).any(|w| !(w[0] < w[1])) || b.iter().any(|x| !x.is_finite()) {
                    return Err(Error::config(format!("bins for {} must be finite and strictly ascending", self.key)));
                }
                Ok(())
            }
            "sex" | "race" | "insurance" => Ok(()),
            other => Err(Error::config(format!("unknown subgroup key {other:?}"))),
        }
    }

    /// Group label for one record. Values below the first edge, and missing
    /// values, land in `"missing"`.
    pub fn label(&self, r: &MetadataRecord) -> String {
        let numeric = |v: Option<f64>, bins: &[f64]| -> String {
            let Some(v) = v else { return "missing".into() };
            match bins.iter().rposition(|&e| v >= e) {
                None => "missing".into(),
                Some(i) if i + 1 == bins.len() => format!("[{},inf)", bins[i]),
                Some(i) => format!("[{},{})", bins[i], bins[i + 1]),
            }
        };
        let bins = self.bins.as_deref().unwrap_or(&[]);
        match self.key.as_str() {
            "age" => numeric(r.valid_age(), bins),
            "bmi" => numeric(r.valid_bmi(), bins),
            "sex" => r.sex.map_or("missing".into(), |s| s.to_string()),
            "race" => r.race.clone().unwrap_or_else(|| "missing".into()),
            "insurance" => r.insurance.clone().unwrap_or_else(|| "missing".into()),
            _ => "missing".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub n_samples: usize,
    /// Below the minimum size: no AUROC is reported.
    pub insufficient: bool,
    pub per_pathology: Vec<Option<f64>>,
    pub macro_auroc_all: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSection {
    pub key: String,
    pub min_size: usize,
    /// Sorted by group label.
    pub groups: Vec<GroupResult>,
    /// Largest pairwise difference in macro AUROC among reported groups.
    /// 0 with a single reported group, `None` with none.
    pub max_gap: Option<f64>,
}

/// Subgroup section from precomputed scores.
pub fn subgroup_from_scores(
    scores: &[[f64; NUM_PATHOLOGIES]],
    targets: &[TargetRow],
    records: &[&MetadataRecord],
    group_by: &GroupBy,
    mask_aware: bool,
) -> Result<SubgroupSection> {
    group_by.validate()?;
    if scores.len() != targets.len() || scores.len() != records.len() {
        return Err(Error::shape("subgroup inputs differ in length"));
    }
    let mut buckets: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        buckets.entry(group_by.label(r)).or_default().push(i);
    }
    let mut groups = Vec::with_capacity(buckets.len());
    for (group, idx) in buckets {
        let insufficient = idx.len() < group_by.min_size;
        let (per_pathology, macro_auroc_all) = if insufficient {
            (vec![None; NUM_PATHOLOGIES], None)
        } else {
            let s: Vec<_> = idx.iter().map(|&i| scores[i]).collect();
            let t: Vec<_> = idx.iter().map(|&i| targets[i].clone()).collect();
            let rep = report_from_scores(&s, &t, mask_aware)?;
            (rep.per_pathology.iter().map(|r| r.auroc).collect(), rep.macro_auroc_all)
        };
        groups.push(GroupResult {
            group,
            n_samples: idx.len(),
            insufficient,
            per_pathology,
            macro_auroc_all,
        });
    }
    let macros: Vec<f64> = groups.iter().filter_map(|g| g.macro_auroc_all).collect();
    let max_gap = if macros.is_empty() {
        None
    } else {
        let hi = macros.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = macros.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(hi - lo)
    };
    Ok(SubgroupSection {
        key: group_by.key.clone(),
        min_size: group_by.min_size,
        groups,
        max_gap,
    })
}

pub fn subgroup_report(model: &FusionModel, examples: &[Example], group_by: &GroupBy, mask_aware: bool) -> Result<SubgroupSection> {
    group_by.validate()?;
    if examples.is_empty() {
        return Err(Error::config("cannot evaluate zero samples"));
    }
    let scores = predict(model, examples)?;
    let targets: Vec<TargetRow> = examples.iter().map(|e| e.targets.clone()).collect();
    let records: Vec<&MetadataRecord> = examples.iter().map(|e| &e.metadata).collect();
    subgroup_from_scores(&scores, &targets, &records, group_by, mask_aware)
}

/// Column order for text tables: the five headline findings, then the rest.
pub fn table_order() -> Vec<Pathology> {
    let mut v = Pathology::HEADLINE.to_vec();
    v.extend(Pathology::ALL.iter().filter(|p| !Pathology::HEADLINE.contains(p)));
    v
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.5}"))
}

/// Aligned text table, one row per model variant.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let order = table_order();
    let mut header = vec!["Model".to_string(), "Average AUROC (14)".into(), "Average AUROC (5)".into()];
    header.extend(order.iter().map(|p| p.name().to_string()));
    let mut body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            let mut line = vec![name.to_string(), cell(r.macro_auroc_all), cell(r.macro_auroc_headline)];
            line.extend(order.iter().map(|&p| cell(r.auroc_of(p))));
            line
        })
        .collect();
    body.insert(0, header);
    align(&body)
}

fn align(rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub name: String,
    pub baseline: Option<f64>,
    pub fusion: Option<f64>,
    pub delta: Option<f64>,
}

/// Baseline-vs-fusion comparison: macro rows first, then pathologies in table order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<DeltaRow>,
}

impl Comparison {
    pub fn new(baseline: &EvalReport, fusion: &EvalReport) -> Self {
        let row = |name: &str, b: Option<f64>, f: Option<f64>| DeltaRow {
            name: name.to_string(),
            baseline: b,
            fusion: f,
            delta: b.zip(f).map(|(b, f)| f - b),
        };
        let mut rows = vec![
            row("Average AUROC (14)", baseline.macro_auroc_all, fusion.macro_auroc_all),
            row("Average AUROC (5)", baseline.macro_auroc_headline, fusion.macro_auroc_headline),
        ];
        rows.extend(table_order().into_iter().map(|p| row(p.name(), baseline.auroc_of(p), fusion.auroc_of(p))));
        Self { rows }
    }

    pub fn macro_delta(&self) -> Option<f64> {
        self.rows[0].delta
    }

    pub fn render(&self) -> String {
        let mut rows = vec![vec!["".to_string(), "Baseline".into(), "Fusion".into(), "Delta".into()]];
        for r in &self.rows {
            rows.push(vec![
                r.name.clone(),
                cell(r.baseline),
                cell(r.fusion),
                r.delta.map_or_else(|| "n/a".into(), |d| format!("{d:+.5}")),
            ]);
        }
        align(&rows)
    }
}
