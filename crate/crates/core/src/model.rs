//! Image backbone, metadata MLP and the shared classifier head.
//!
//! ```text
//! image [1,S,S] -> conv stages -> global_avg_pool -> feat [F] ─┐
//!                                                              ├─ concat [F+O] -> affine -> logits [14]
//! meta  [I]     -> affine(H×I) -> swish -> affine(O×H) -> swish┘
//! ```
//!
//! The image-only baseline drops the metadata branch and the classifier
//! sees only the `F` image features.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::labels::NUM_PATHOLOGIES;
use crate::rng::{Purpose, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetName {
    PlainScaled,
    Residual,
    PlainDeep,
}

impl PresetName {
    pub const ALL: [PresetName; 3] = [PresetName::PlainScaled, PresetName::Residual, PresetName::PlainDeep];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::PlainScaled => "plain-scaled",
            PresetName::Residual => "residual",
            PresetName::PlainDeep => "plain-deep",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown backbone preset {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Swish,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub kernel: usize,
    /// Stride of the first conv in the stage; later convs use stride 1.
    pub stride: usize,
    pub convs: usize,
}

/// A small conv stack. Every conv uses "same" zero padding (`kernel / 2`)
/// and a per-channel bias.
///
/// With `residual` set, each stage is `shortcut(x) + conv(act(conv(x)))`
/// where the shortcut is a 2x2 mean pool when the stage downsamples, and
/// zero-padded channels when the stage widens. The activation sits inside
/// the residual branch only, so a stage with zero weights is exactly its
/// shortcut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackbonePreset {
    pub name: PresetName,
    pub image_size: usize,
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    pub residual: bool,
    pub activation: Activation,
}

pub const DEFAULT_IMAGE_SIZE: usize = 32;

impl BackbonePreset {
    pub fn by_name(name: PresetName) -> Self {
        match name {
            PresetName::PlainScaled => Self::plain_scaled(1.0, 1.0),
            PresetName::Residual => Self::residual(),
            PresetName::PlainDeep => Self::plain_deep(),
        }
    }

    /// Compound-scaled plain stack: base widths (8, 16, 32) and one conv per
    /// stage, multiplied by `width` and `depth`.
    pub fn plain_scaled(width: f64, depth: f64) -> Self {
        let stages = [8usize, 16, 32]
            .iter()
            .map(|&c| StageSpec {
                channels: ((c as f64 * width).round() as usize).max(1),
                kernel: 3,
                stride: 2,
                convs: (depth.ceil() as usize).max(1),
            })
            .collect();
        Self {
            name: PresetName::PlainScaled,
            image_size: DEFAULT_IMAGE_SIZE,
            in_channels: 1,
            stages,
            residual: false,
            activation: Activation::Swish,
        }
    }

    pub fn residual() -> Self {
        Self {
            name: PresetName::Residual,
            image_size: DEFAULT_IMAGE_SIZE,
            in_channels: 1,
            stages: [8usize, 16, 32]
                .iter()
                .map(|&c| StageSpec {
                    channels: c,
                    kernel: 3,
                    stride: 2,
                    convs: 2,
                })
                .collect(),
            residual: true,
            activation: Activation::Relu,
        }
    }

    /// Four stages of paired 3x3 convs.
    pub fn plain_deep() -> Self {
        Self {
            name: PresetName::PlainDeep,
            image_size: DEFAULT_IMAGE_SIZE,
            in_channels: 1,
            stages: [8usize, 16, 32, 32]
                .iter()
                .map(|&c| StageSpec {
                    channels: c,
                    kernel: 3,
                    stride: 2,
                    convs: 2,
                })
                .collect(),
            residual: false,
            activation: Activation::Relu,
        }
    }

    /// Miniature of a preset (8x8 input, 2-4 channels, Swish everywhere)
    /// for exhaustive gradient checks.
    pub fn tiny(name: PresetName) -> Self {
        let mut p = Self::by_name(name);
        p.image_size = 8;
        p.activation = Activation::Swish;
        let widths = [2usize, 3, 4];
        p.stages.truncate(if name == PresetName::PlainDeep { 3 } else { 2 });
        for (s, &w) in p.stages.iter_mut().zip(&widths) {
            s.channels = w;
        }
        p
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("backbone has no stages"));
        }
        let mut size = self.image_size;
        let mut ch = self.in_channels;
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.kernel == 0 || s.stride == 0 || s.convs == 0 {
                return Err(Error::config(format!("stage {i}: zero-sized spec {s:?}")));
            }
            if self.residual {
                if s.convs != 2 {
                    return Err(Error::config(format!("residual stage {i} must have 2 convs")));
                }
                if s.kernel % 2 == 0 {
                    return Err(Error::config(format!("residual stage {i} needs an odd kernel")));
                }
                if !(s.stride == 1 || (s.stride == 2 && size % 2 == 0)) {
                    return Err(Error::config(format!(
                        "residual stage {i}: stride {} incompatible with size {size}",
                        s.stride
                    )));
                }
                if s.channels < ch {
                    return Err(Error::config(format!(
                        "residual stage {i} narrows {ch} -> {} channels; identity shortcut cannot",
                        s.channels
                    )));
                }
            }
            for c in 0..s.convs {
                let stride = if c == 0 { s.stride } else { 1 };
                let pad = s.kernel / 2;
                if s.kernel > size + 2 * pad {
                    return Err(Error::config(format!(
                        "stage {i}: kernel {} exceeds padded size {}",
                        s.kernel,
                        size + 2 * pad
                    )));
                }
                size = (size + 2 * pad - s.kernel) / stride + 1;
            }
            ch = s.channels;
        }
        Ok(())
    }

    /// Shapes of every backbone parameter, in storage order.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, s) in self.stages.iter().enumerate() {
            for c in 0..s.convs {
                let ci = if c == 0 { cin } else { s.channels };
                out.push((format!("stage{i}.conv{c}.weight"), vec![s.channels, ci, s.kernel, s.kernel]));
                out.push((format!("stage{i}.conv{c}.bias"), vec![s.channels]));
            }
            cin = s.channels;
        }
        out
    }
}

/// Metadata MLP: `input_dim -> hidden_dim -> output_dim`, Swish after each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaBranchConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for MetaBranchConfig {
    fn default() -> Self {
        Self {
            input_dim: 3,
            hidden_dim: 12,
            output_dim: 8,
        }
    }
}

impl MetaBranchConfig {
    pub fn param_count(&self) -> usize {
        self.hidden_dim * self.input_dim + self.hidden_dim + self.output_dim * self.hidden_dim + self.output_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Fusion,
    ImageOnly,
}

/// Parameters of the whole network, stored flat in a fixed order:
/// backbone convs, then (fusion only) the two metadata layers, then the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    preset: BackbonePreset,
    meta: Option<MetaBranchConfig>,
    names: Vec<String>,
    params: Vec<Tensor>,
    n_backbone: usize,
}

/// Vars produced by recording one forward pass.
pub struct Recorded {
    pub params: Vec<Var>,
    pub image_features: Var,
    pub meta_features: Option<Var>,
    pub logits: Var,
}

fn layout(preset: &BackbonePreset, meta: Option<&MetaBranchConfig>) -> Vec<(String, Vec<usize>)> {
    let mut shapes = preset.param_shapes();
    let mut head_in = preset.feature_dim();
    if let Some(m) = meta {
        shapes.push(("meta.fc1.weight".into(), vec![m.hidden_dim, m.input_dim]));
        shapes.push(("meta.fc1.bias".into(), vec![m.hidden_dim]));
        shapes.push(("meta.fc2.weight".into(), vec![m.output_dim, m.hidden_dim]));
        shapes.push(("meta.fc2.bias".into(), vec![m.output_dim]));
        head_in += m.output_dim;
    }
    shapes.push(("classifier.weight".into(), vec![NUM_PATHOLOGIES, head_in]));
    shapes.push(("classifier.bias".into(), vec![NUM_PATHOLOGIES]));
    shapes
}

/// Builds a model with Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
pub fn build_model(preset: &BackbonePreset, meta: Option<MetaBranchConfig>, seed: u64) -> Result<FusionModel> {
    preset.validate()?;
    if let Some(m) = &meta {
        if m.input_dim == 0 || m.hidden_dim == 0 || m.output_dim == 0 {
            return Err(Error::config(format!("metadata branch has a zero dimension: {m:?}")));
        }
    }
    let shapes = layout(preset, meta.as_ref());
    let mut names = Vec::with_capacity(shapes.len());
    let mut params = Vec::with_capacity(shapes.len());
    for (i, (name, shape)) in shapes.into_iter().enumerate() {
        let t = if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = Stream::keyed(seed, Purpose::Init, &[i as u64]);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
            Tensor::new(shape, data)?
        };
        names.push(name);
        params.push(t);
    }
    let n_backbone = preset.param_shapes().len();
    Ok(FusionModel {
        preset: preset.clone(),
        meta,
        names,
        params,
        n_backbone,
    })
}

impl FusionModel {
    pub fn preset(&self) -> &BackbonePreset {
        &self.preset
    }

    pub fn meta_config(&self) -> Option<&MetaBranchConfig> {
        self.meta.as_ref()
    }

    pub fn mode(&self) -> ModelMode {
        if self.meta.is_some() {
            ModelMode::Fusion
        } else {
            ModelMode::ImageOnly
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn meta_param_count(&self) -> usize {
        self.meta.map_or(0, |m| m.param_count())
    }

    pub fn classifier_param_count(&self) -> usize {
        self.params[self.params.len() - 2..].iter().map(Tensor::len).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.params {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.preset.image_size;
        if image.shape() != [self.preset.in_channels, s, s] {
            return Err(Error::shape(format!(
                "image shape {:?}, model expects [{}, {s}, {s}]",
                image.shape(),
                self.preset.in_channels
            )));
        }
        Ok(())
    }

    fn record_backbone<'a>(&'a self, tape: &mut Tape<'a>, pv: &[Var], image: Var) -> Result<Var> {
        let act = |tape: &mut Tape<'a>, v: Var| match self.preset.activation {
            Activation::Relu => tape.relu(v),
            Activation::Swish => tape.swish(v),
        };
        let mut x = image;
        let mut p = 0;
        for s in &self.preset.stages {
            let pad = s.kernel / 2;
            if self.preset.residual {
                let input = x;
                let h = tape.conv2d(input, pv[p], s.stride, pad)?;
                let h = tape.channel_bias(h, pv[p + 1])?;
                let h = act(tape, h)?;
                let h = tape.conv2d(h, pv[p + 2], 1, pad)?;
                let h = tape.channel_bias(h, pv[p + 3])?;
                p += 4;
                let mut short = input;
                if s.stride == 2 {
                    short = tape.avg_pool2(short)?;
                }
                if tape.value(short).shape()[0] < s.channels {
                    short = tape.pad_channels(short, s.channels)?;
                }
                x = tape.add(short, h)?;
            } else {
                for c in 0..s.convs {
                    let stride = if c == 0 { s.stride } else { 1 };
                    let h = tape.conv2d(x, pv[p], stride, pad)?;
                    let h = tape.channel_bias(h, pv[p + 1])?;
                    x = act(tape, h)?;
                    p += 2;
                }
            }
        }
        tape.global_avg_pool(x)
    }

    fn record_meta<'a>(&'a self, tape: &mut Tape<'a>, pv: &[Var], meta: &[f64]) -> Result<Var> {
        let cfg = self
            .meta
            .ok_or_else(|| Error::Mode("image-only model has no metadata branch".into()))?;
        if meta.len() != cfg.input_dim {
            return Err(Error::shape(format!(
                "metadata vector has {} entries, branch expects {}",
                meta.len(),
                cfg.input_dim
            )));
        }
        let base = self.n_backbone;
        let v = tape.input(Tensor::vector(meta.to_vec()))?;
        let h = tape.affine(v, pv[base], pv[base + 1])?;
        let h = tape.swish(h)?;
        let o = tape.affine(h, pv[base + 2], pv[base + 3])?;
        tape.swish(o)
    }

    /// Records the full forward pass on `tape`. `meta` must be present
    /// exactly when the model is in fusion mode.
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, image: &Tensor, meta: Option<&[f64]>) -> Result<Recorded> {
        self.check_image(image)?;
        match (self.mode(), meta.is_some()) {
            (ModelMode::Fusion, false) => {
                return Err(Error::Mode("fusion model needs a metadata vector".into()))
            }
            (ModelMode::ImageOnly, true) => {
                return Err(Error::Mode("image-only model was given a metadata vector".into()))
            }
            _ => {}
        }
        let params = self
            .params
            .iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<Vec<_>>>()?;
        let img = tape.input(image.clone())?;
        let image_features = self.record_backbone(tape, &params, img)?;
        let meta_features = match meta {
            Some(m) => Some(self.record_meta(tape, &params, m)?),
            None => None,
        };
        let head_in = match meta_features {
            Some(mf) => tape.concat(&[image_features, mf])?,
            None => image_features,
        };
        let n = params.len();
        let logits = tape.affine(head_in, params[n - 2], params[n - 1])?;
        Ok(Recorded {
            params,
            image_features,
            meta_features,
            logits,
        })
    }

    pub fn forward_image_branch(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let params = self
            .params
            .iter()
            .take(self.n_backbone)
            .map(|t| tape.leaf(t))
            .collect::<Result<Vec<_>>>()?;
        let img = tape.input(image.clone())?;
        let f = self.record_backbone(&mut tape, &params, img)?;
        Ok(tape.value(f).clone())
    }

    pub fn forward_meta_branch(&self, meta: &[f64]) -> Result<Tensor> {
        if self.meta.is_none() {
            return Err(Error::Mode("image-only model has no metadata branch".into()));
        }
        let mut tape = Tape::new();
        let params = self
            .params
            .iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<Vec<_>>>()?;
        let o = self.record_meta(&mut tape, &params, meta)?;
        Ok(tape.value(o).clone())
    }

    /// Raw logits for the 14 pathologies.
    pub fn forward(&self, image: &Tensor, meta: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let r = self.record(&mut tape, image, meta)?;
        Ok(tape.value(r.logits).data().to_vec())
    }

    /// Per-parameter gradients from a recorded pass, in storage order.
    pub fn collect_grads(&self, rec: &Recorded, grads: &Gradients) -> Vec<Tensor> {
        rec.params.iter().map(|&v| grads.tensor(v)).collect()
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let ck = Checkpoint::from_model(self, extra);
        let mut text = serde_json::to_string(&ck).map_err(|e| Error::io(path, e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(FusionModel, serde_json::Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::io(path, e))?;
        ck.into_model()
    }
}

pub const CHECKPOINT_FORMAT: &str = "cxr-fusion-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// On-disk model: config echo plus flat parameter arrays. `extra` carries
/// whatever the caller needs to reproduce the run (training config, etc.).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub preset: BackbonePreset,
    pub meta: Option<MetaBranchConfig>,
    pub params: Vec<NamedParam>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(m: &FusionModel, extra: serde_json::Value) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            preset: m.preset.clone(),
            meta: m.meta,
            params: m
                .names
                .iter()
                .zip(&m.params)
                .map(|(n, t)| NamedParam {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
            extra,
        }
    }

    pub fn into_model(self) -> Result<(FusionModel, serde_json::Value)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut m = build_model(&self.preset, self.meta, 0)?;
        if self.params.len() != m.params.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, config implies {}",
                self.params.len(),
                m.params.len()
            )));
        }
        for (i, p) in self.params.into_iter().enumerate() {
            if p.name != m.names[i] || p.shape != m.params[i].shape() {
                return Err(Error::config(format!(
                    "checkpoint tensor {i} is {} {:?}, expected {} {:?}",
                    p.name,
                    p.shape,
                    m.names[i],
                    m.params[i].shape()
                )));
            }
            let t = Tensor::new(p.shape, p.values)?;
            t.ensure_finite(&p.name)?;
            m.params[i] = t;
        }
        Ok((m, self.extra))
    }
}
