//! Shared generators and checks for masked-entry invariance.

use cxr_fusion::data::Example;
use cxr_fusion::labels::{MetadataRecord, Sex, TargetRow, NUM_PATHOLOGIES};
use cxr_fusion::metrics::{evaluate, report_from_scores, subgroup_from_scores, GroupBy};
use cxr_fusion::model::{build_model, BackbonePreset, FusionModel, MetaBranchConfig, PresetName};
use cxr_fusion::rng::Stream;
use cxr_fusion::train::batch_gradients;
use cxr_fusion::Tensor;

pub fn random_targets(r: &mut Stream) -> TargetRow {
    let mut row = TargetRow {
        target: [0.0; NUM_PATHOLOGIES],
        mask: [0.0; NUM_PATHOLOGIES],
    };
    for k in 0..NUM_PATHOLOGIES {
        row.mask[k] = f64::from(u8::from(r.bernoulli(0.6)));
        row.target[k] = f64::from(u8::from(r.bernoulli(0.4)));
    }
    row
}

/// Flips or re-draws every masked target.
pub fn perturb_masked_targets(rows: &mut [TargetRow], r: &mut Stream) {
    for row in rows {
        for k in 0..NUM_PATHOLOGIES {
            if row.mask[k] == 0.0 {
                row.target[k] = if r.bernoulli(0.5) { 1.0 - row.target[k] } else { f64::from(u8::from(r.bernoulli(0.5))) };
            }
        }
    }
}

pub fn random_model(r: &mut Stream, seed: u64) -> (FusionModel, bool) {
    let preset = PresetName::ALL[r.below(3) as usize];
    let fusion = r.bernoulli(0.5);
    let model = build_model(&BackbonePreset::tiny(preset), fusion.then(MetaBranchConfig::default), seed).unwrap();
    (model, fusion)
}

pub fn random_examples(r: &mut Stream, model: &FusionModel, fusion: bool, n: usize) -> Vec<Example> {
    let p = model.preset();
    let side = p.image_size;
    (0..n)
        .map(|i| {
            let pixels = (0..p.in_channels * side * side).map(|_| r.uniform()).collect();
            let sex = if r.bernoulli(0.5) { Sex::Male } else { Sex::Female };
            Example {
                sample_id: format!("s{i}"),
                image: Tensor::new(vec![p.in_channels, side, side], pixels).unwrap(),
                meta: fusion.then(|| (0..3).map(|_| r.uniform()).collect()),
                targets: random_targets(r),
                metadata: MetadataRecord {
                    sex: Some(sex),
                    ..Default::default()
                },
            }
        })
        .collect()
}

/// Loss, per-parameter gradients and the evaluation report of a random tiny
/// model are unchanged when masked targets are redrawn.
pub fn loss_case(seed: u64, n: usize) -> Result<(), String> {
    let mut r = Stream::new(seed);
    let (model, fusion) = random_model(&mut r, seed);
    let examples = random_examples(&mut r, &model, fusion, n);
    let refs: Vec<&Example> = examples.iter().collect();
    let (loss, grads, denom) = batch_gradients(&model, &refs).unwrap();

    let mut rows: Vec<TargetRow> = examples.iter().map(|e| e.targets.clone()).collect();
    perturb_masked_targets(&mut rows, &mut r);
    let perturbed: Vec<Example> = examples
        .iter()
        .zip(rows)
        .map(|(e, t)| Example { targets: t, ..e.clone() })
        .collect();
    let refs: Vec<&Example> = perturbed.iter().collect();
    let (loss2, grads2, denom2) = batch_gradients(&model, &refs).unwrap();

    if loss.to_bits() != loss2.to_bits() || denom != denom2 {
        return Err(format!("seed {seed}: loss {loss} -> {loss2}"));
    }
    if grads != grads2 {
        return Err(format!("seed {seed}: gradients changed"));
    }
    if evaluate(&model, &examples, true).unwrap() != evaluate(&model, &perturbed, true).unwrap() {
        return Err(format!("seed {seed}: evaluation report changed"));
    }
    Ok(())
}

/// Overall and subgroup reports are unchanged when masked scores and
/// targets are perturbed.
pub fn report_case(seed: u64, n: usize) -> Result<(), String> {
    let mut r = Stream::new(seed);
    let mut targets: Vec<TargetRow> = (0..n).map(|_| random_targets(&mut r)).collect();
    // coarse scores so ties occur
    let mut scores: Vec<[f64; NUM_PATHOLOGIES]> = (0..n)
        .map(|_| std::array::from_fn(|_| (r.below(8) as f64) / 8.0))
        .collect();
    let records: Vec<MetadataRecord> = (0..n)
        .map(|_| MetadataRecord {
            sex: Some(if r.bernoulli(0.5) { Sex::Male } else { Sex::Female }),
            age: Some(r.uniform_range(18.0, 95.0)),
            ..Default::default()
        })
        .collect();
    let recs: Vec<&MetadataRecord> = records.iter().collect();
    let mut by_sex = GroupBy::new("sex").unwrap();
    by_sex.min_size = 2;
    let by_age = GroupBy::new("age").unwrap();
    let all = |s: &[[f64; NUM_PATHOLOGIES]], t: &[TargetRow]| {
        (
            report_from_scores(s, t, true).unwrap(),
            subgroup_from_scores(s, t, &recs, &by_sex, true).unwrap(),
            subgroup_from_scores(s, t, &recs, &by_age, true).unwrap(),
        )
    };
    let before = all(&scores, &targets);

    for (row, s) in targets.iter().zip(scores.iter_mut()) {
        for k in 0..NUM_PATHOLOGIES {
            if row.mask[k] == 0.0 {
                s[k] = r.normal() * 10.0;
            }
        }
    }
    perturb_masked_targets(&mut targets, &mut r);
    if before != all(&scores, &targets) {
        return Err(format!("seed {seed}: report changed"));
    }
    Ok(())
}
