use std::collections::{BTreeSet, HashMap};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::{fnv1a, mix64};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Patient-level split. Patients are ordered by `mix64(fnv1a(patient_id) ^ mix64(seed))`
/// and cut at the requested fractions (largest-remainder rounding, with every
/// split that asks for a non-zero fraction receiving at least one patient).
/// Sample order within each split follows the input order.
pub fn split_by_patient(samples: Vec<Sample>, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::config(format!("split fractions must be >= 0, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions sum to {total}, expected 1")));
    }
    let patients: BTreeSet<&str> = samples.iter().map(|s| s.patient_id.as_str()).collect();
    let n = patients.len();
    let wanted = fractions.iter().filter(|f| **f > 0.0).count();
    if n < wanted {
        return Err(Error::config(format!(
            "{n} patients cannot fill {wanted} non-empty splits"
        )));
    }

    let seed_key = mix64(seed);
    let mut order: Vec<(u64, &str)> = patients
        .iter()
        .map(|&p| (mix64(fnv1a(p.as_bytes()) ^ seed_key), p))
        .collect();
    order.sort_unstable();

    // largest remainder
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..3).collect();
    rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in rest.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).expect("three splits");
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }

    let mut assign: HashMap<&str, usize> = HashMap::with_capacity(n);
    let mut pos = 0;
    for (split, &c) in counts.iter().enumerate() {
        for &(_, p) in &order[pos..pos + c] {
            assign.insert(p, split);
        }
        pos += c;
    }
    let assign: HashMap<String, usize> = assign.into_iter().map(|(k, v)| (k.to_string(), v)).collect();

    let mut out = Splits::default();
    for s in samples {
        match assign[&s.patient_id] {
            0 => out.train.push(s),
            1 => out.val.push(s),
            _ => out.test.push(s),
        }
    }
    Ok(out)
}
