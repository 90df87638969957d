//! JSONL manifest plus one 16-bit binary PGM (P5) per image.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, View};
use crate::error::{Error, Result};
use crate::labels::{LabelState, MetadataRecord, Sex, NUM_PATHOLOGIES};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const IMAGE_DIR: &str = "images";

/// One manifest line. Field order is the serialisation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub patient_id: String,
    pub image_path: String,
    pub view: View,
    pub age: Option<f64>,
    pub sex: Option<Sex>,
    pub race: Option<String>,
    pub bmi: Option<f64>,
    pub insurance: Option<String>,
    pub states: Vec<LabelState>,
}

/// Writes `[1, H, W]` values in [0, 1] as a maxval-65535 P5 graymap.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape(format!("PGM needs a [1,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn pgm_header(bytes: &[u8]) -> Option<(usize, usize, usize, usize)> {
    // returns (width, height, maxval, offset of pixel data)
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).ok()?.to_string());
    }
    if fields[0] != "P5" {
        return None;
    }
    let w = fields[1].parse().ok()?;
    let h = fields[2].parse().ok()?;
    let maxval = fields[3].parse().ok()?;
    // exactly one whitespace byte separates the header from the raster
    Some((w, h, maxval, i + 1))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, off) =
        pgm_header(&bytes).ok_or_else(|| Error::io(path, "not a binary PGM (P5) file"))?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::io(path, format!("bad PGM header {w}x{h} maxval {maxval}")));
    }
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = w * h * bpp;
    let raster = bytes.get(off..).unwrap_or_default();
    if raster.len() != need {
        return Err(Error::io(
            path,
            format!("PGM raster has {} bytes, expected {need}", raster.len()),
        ));
    }
    let scale = maxval as f64;
    let data = if bpp == 1 {
        raster.iter().map(|&b| f64::from(b) / scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / scale)
            .collect()
    };
    Tensor::new(vec![1, h, w], data)
}

fn sample_err(id: &str, msg: impl std::fmt::Display) -> Error {
    Error::Sample {
        sample_id: id.to_string(),
        message: msg.to_string(),
    }
}

/// Writes `dir/manifest.jsonl` and `dir/images/<sample_id>.pgm`.
pub fn write_manifest(samples: &[Sample], dir: &Path) -> Result<()> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let mut out = Vec::new();
    for s in samples {
        let rel = format!("{IMAGE_DIR}/{}.pgm", s.sample_id);
        write_pgm(&dir.join(&rel), &s.image).map_err(|e| sample_err(&s.sample_id, e))?;
        let rec = ManifestRecord {
            sample_id: s.sample_id.clone(),
            patient_id: s.patient_id.clone(),
            image_path: rel,
            view: s.view,
            age: s.metadata.age,
            sex: s.metadata.sex,
            race: s.metadata.race.clone(),
            bmi: s.metadata.bmi,
            insurance: s.metadata.insurance.clone(),
            states: s.states.to_vec(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| sample_err(&s.sample_id, e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(MANIFEST_FILE);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            // best effort at naming the record even when it does not parse
            let id = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("sample_id").and_then(|s| s.as_str()).map(String::from))
                .unwrap_or_else(|| format!("<line {}>", lineno + 1));
            sample_err(&id, format!("bad manifest record: {e}"))
        })?;
        if rec.states.len() != NUM_PATHOLOGIES {
            return Err(sample_err(
                &rec.sample_id,
                format!("expected {NUM_PATHOLOGIES} states, got {}", rec.states.len()),
            ));
        }
        let image = read_pgm(&dir.join(&rec.image_path)).map_err(|e| sample_err(&rec.sample_id, e))?;
        let mut states = [LabelState::NotMentioned; NUM_PATHOLOGIES];
        states.copy_from_slice(&rec.states);
        samples.push(Sample {
            sample_id: rec.sample_id,
            patient_id: rec.patient_id,
            image,
            metadata: MetadataRecord {
                age: rec.age,
                sex: rec.sex,
                race: rec.race,
                bmi: rec.bmi,
                insurance: rec.insurance,
            },
            states,
            view: rec.view,
        });
    }
    Ok(samples)
}
