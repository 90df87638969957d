//! Samples, synthetic generation, manifests and splitting.

mod manifest;
mod split;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::labels::{
    build_targets, encode_metadata, LabelState, MetaFeatureConfig, MetadataRecord, TargetRow,
    UncertaintyPolicy, NUM_PATHOLOGIES,
};
use crate::tensor::Tensor;

pub use manifest::{read_manifest, read_pgm, write_manifest, write_pgm, ManifestRecord, MANIFEST_FILE};
pub use split::{split_by_patient, Splits};
pub use synth::{generate, generate_with_truth, PathologySignal, SexRates, SynthConfig, Truth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Frontal,
    Lateral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub patient_id: String,
    /// `[1, H, W]`, values in [0, 1].
    pub image: Tensor,
    pub metadata: MetadataRecord,
    pub states: [LabelState; NUM_PATHOLOGIES],
    pub view: View,
}

/// Keeps frontal views, preserving order.
pub fn filter_frontal(samples: Vec<Sample>) -> Vec<Sample> {
    samples.into_iter().filter(|s| s.view == View::Frontal).collect()
}

/// A sample encoded for the model: targets under a policy and, for fusion
/// models, the metadata vector.
#[derive(Debug, Clone)]
pub struct Example {
    pub sample_id: String,
    pub image: Tensor,
    pub meta: Option<Vec<f64>>,
    pub targets: TargetRow,
    pub metadata: MetadataRecord,
}

pub fn prepare(
    samples: &[Sample],
    policy: UncertaintyPolicy,
    meta: Option<&MetaFeatureConfig>,
) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            Ok(Example {
                sample_id: s.sample_id.clone(),
                image: s.image.clone(),
                meta: meta.map(|cfg| encode_metadata(&s.metadata, cfg)).transpose()?,
                targets: build_targets(&s.states, policy)?,
                metadata: s.metadata.clone(),
            })
        })
        .collect()
}
