//! The hand-labelled report corpus.

use cxr_fusion::labels::{LabelState, NUM_PATHOLOGIES};
use serde::Deserialize;

#[derive(Deserialize)]
pub struct Report {
    pub id: String,
    pub text: String,
}

#[derive(Deserialize)]
pub struct Expected {
    pub id: String,
    pub states: [LabelState; NUM_PATHOLOGIES],
}

pub fn corpus() -> Vec<(Report, Expected)> {
    let reports = include_str!("../fixtures/golden_reports.jsonl").lines().map(|l| serde_json::from_str::<Report>(l).unwrap());
    let expected = include_str!("../fixtures/golden_expected.jsonl").lines().map(|l| serde_json::from_str::<Expected>(l).unwrap());
    reports.zip(expected).collect()
}
