//! Model manifest (JSON) plus raw little-endian f32 weight files.
//!
//! A model directory holds `model.json` and one `.bin` file per tensor,
//! named `<layer>.<part>.bin`. Every tensor is stored in `(o, i, h, w)`
//! row-major order, 4 bytes per element, no header.

use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::complements::{DecomposedPair, Decomposition};
use crate::convref::ConvSpec;
use crate::decouple::{ConvKernel, DecoupledKernel, Ordering, SeparableBlock};
use crate::error::{Error, ManifestError, Result};
use crate::model::{Layer, Model, ModelLayer, Stage};
use crate::tensor::Tensor4;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";
pub const DTYPE_F32: &str = "f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub model_name: String,
    /// `[C, H, W]`
    pub input_resolution: [usize; 3],
    pub layers: Vec<LayerEntry>,
}

/// Fields shared by every layer kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub name: String,
    pub n_o: usize,
    pub n_i: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub has_bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hw: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerEntry {
    Conv {
        #[serde(flatten)]
        header: LayerHeader,
        dtype: String,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Decoupled {
        #[serde(flatten)]
        header: LayerHeader,
        dtype: String,
        ordering: Ordering,
        t: usize,
        /// One `(n_o, n_i, 1, 1)` tensor per block.
        pointwise: Vec<String>,
        /// One `(n_i or n_o, 1, k_h, k_w)` tensor per block.
        depthwise: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Pair {
        #[serde(flatten)]
        header: LayerHeader,
        decomposition: Decomposition,
        rank: usize,
        first: Box<LayerEntry>,
        second: Box<LayerEntry>,
    },
}

impl LayerEntry {
    pub fn header(&self) -> &LayerHeader {
        match self {
            LayerEntry::Conv { header, .. }
            | LayerEntry::Decoupled { header, .. }
            | LayerEntry::Pair { header, .. } => header,
        }
    }

    pub fn header_mut(&mut self) -> &mut LayerHeader {
        match self {
            LayerEntry::Conv { header, .. }
            | LayerEntry::Decoupled { header, .. }
            | LayerEntry::Pair { header, .. } => header,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerEntry::Conv { .. } => "conv",
            LayerEntry::Decoupled { .. } => "decoupled",
            LayerEntry::Pair { .. } => "pair",
        }
    }
}

impl LayerHeader {
    fn shape(&self) -> [usize; 4] {
        [self.n_o, self.n_i, self.k_h, self.k_w]
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec::new(
            (self.stride[0], self.stride[1]),
            (self.padding[0], self.padding[1]),
        )
    }
}

// ---------------------------------------------------------------------------
// validation

/// Checks every structural invariant of a manifest without touching the
/// weight files.
pub fn validate_manifest(m: &ModelManifest) -> Result<(), ManifestError> {
    if m.format_version != FORMAT_VERSION {
        return Err(ManifestError::UnsupportedVersion {
            found: m.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if m.input_resolution.contains(&0) {
        return Err(ManifestError::InvalidShape {
            layer: "<input>".into(),
            detail: format!(
                "input_resolution {:?} has a zero dimension",
                m.input_resolution
            ),
        });
    }
    let mut names = HashSet::new();
    for entry in &m.layers {
        check_entry(entry, false, &mut names)?;
    }
    let mut available = m.input_resolution[0];
    for entry in &m.layers {
        let h = entry.header();
        let provided = h.input_channels.unwrap_or(available);
        if h.n_i != provided {
            return Err(ManifestError::ChannelMismatch {
                layer: h.name.clone(),
                expected: provided,
                found: h.n_i,
            });
        }
        available = h.n_o;
    }
    Ok(())
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn check_path(layer: &str, path: &str) -> Result<(), ManifestError> {
    let p = Path::new(path);
    let safe = !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    if safe {
        Ok(())
    } else {
        Err(ManifestError::UnsafePath {
            layer: layer.to_string(),
            path: path.to_string(),
        })
    }
}

fn check_common(h: &LayerHeader, dtype: &str, bias: &Option<String>) -> Result<(), ManifestError> {
    if dtype != DTYPE_F32 {
        return Err(ManifestError::UnsupportedDtype {
            layer: h.name.clone(),
            dtype: dtype.to_string(),
        });
    }
    if h.has_bias != bias.is_some() {
        return Err(ManifestError::BiasMismatch {
            layer: h.name.clone(),
            has_bias: h.has_bias,
        });
    }
    if let Some(b) = bias {
        check_path(&h.name, b)?;
    }
    Ok(())
}

fn check_entry(
    entry: &LayerEntry,
    nested: bool,
    names: &mut HashSet<String>,
) -> Result<(), ManifestError> {
    let h = entry.header();
    if !valid_name(&h.name) {
        return Err(ManifestError::InvalidName(h.name.clone()));
    }
    if !names.insert(h.name.clone()) {
        return Err(ManifestError::DuplicateName(h.name.clone()));
    }
    let shape_err = |detail: String| ManifestError::InvalidShape {
        layer: h.name.clone(),
        detail,
    };
    if h.shape().contains(&0) {
        return Err(shape_err(format!("dimension is zero in {:?}", h.shape())));
    }
    if h.stride.contains(&0) {
        return Err(shape_err(format!("stride {:?} must be positive", h.stride)));
    }
    if h.input_hw.is_some_and(|hw| hw.contains(&0)) {
        return Err(shape_err("input_hw has a zero dimension".into()));
    }
    let pair_err = |detail: &str| ManifestError::InvalidPair {
        layer: h.name.clone(),
        detail: detail.to_string(),
    };
    if nested && (h.input_channels.is_some() || h.input_hw.is_some()) {
        return Err(pair_err("pair stages cannot carry input overrides"));
    }

    match entry {
        LayerEntry::Conv {
            dtype,
            weight,
            bias,
            ..
        } => {
            check_common(h, dtype, bias)?;
            check_path(&h.name, weight)?;
        }
        LayerEntry::Decoupled {
            dtype,
            t,
            pointwise,
            depthwise,
            bias,
            ..
        } => {
            check_common(h, dtype, bias)?;
            let area = h.k_h * h.k_w;
            let dec_err = |detail: String| ManifestError::InvalidDecoupling {
                layer: h.name.clone(),
                detail,
            };
            if *t == 0 || *t > area {
                return Err(dec_err(format!("t = {t} outside 1..={area}")));
            }
            if pointwise.len() != *t || depthwise.len() != *t {
                return Err(dec_err(format!(
                    "t = {t} but {} pointwise and {} depthwise files",
                    pointwise.len(),
                    depthwise.len()
                )));
            }
            for p in pointwise.iter().chain(depthwise) {
                check_path(&h.name, p)?;
            }
        }
        LayerEntry::Pair {
            decomposition,
            rank,
            first,
            second,
            ..
        } => {
            if nested {
                return Err(pair_err("pairs cannot be nested"));
            }
            if matches!(**first, LayerEntry::Pair { .. })
                || matches!(**second, LayerEntry::Pair { .. })
            {
                return Err(pair_err("pair stages must be conv or decoupled"));
            }
            check_entry(first, true, names)?;
            check_entry(second, true, names)?;
            let (f, s) = (first.header(), second.header());
            let [s_h, s_w] = h.stride;
            let [p_h, p_w] = h.padding;
            let (want_first, want_second) = match decomposition {
                Decomposition::Channel => (
                    ([*rank, h.n_i, h.k_h, h.k_w], h.stride, h.padding),
                    ([h.n_o, *rank, 1, 1], [1, 1], [0, 0]),
                ),
                Decomposition::Spatial => (
                    ([*rank, h.n_i, h.k_h, 1], [s_h, 1], [p_h, 0]),
                    ([h.n_o, *rank, 1, h.k_w], [1, s_w], [0, p_w]),
                ),
            };
            if *rank == 0 {
                return Err(pair_err("rank must be positive"));
            }
            if (f.shape(), f.stride, f.padding) != want_first {
                return Err(pair_err(&format!(
                    "first stage {:?} stride {:?} padding {:?} does not match {decomposition} rank {rank}",
                    f.shape(),
                    f.stride,
                    f.padding
                )));
            }
            if (s.shape(), s.stride, s.padding) != want_second {
                return Err(pair_err(&format!(
                    "second stage {:?} stride {:?} padding {:?} does not match {decomposition} rank {rank}",
                    s.shape(),
                    s.stride,
                    s.padding
                )));
            }
            if f.has_bias || s.has_bias != h.has_bias {
                return Err(pair_err(
                    "bias must sit on the second stage and match has_bias",
                ));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// loading

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept NaN/Inf weights (with a warning) instead of rejecting them.
    pub allow_non_finite: bool,
}

pub fn parse_manifest(json: &str) -> Result<ModelManifest, ManifestError> {
    serde_json::from_str(json).map_err(|e| ManifestError::Parse(e.to_string()))
}

pub fn read_manifest(path: &Path) -> Result<ModelManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_manifest(&text)?)
}

/// Accepts a manifest file or a directory containing `model.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    load_model_with(path, LoadOptions::default())
}

pub fn load_model_with(path: &Path, opts: LoadOptions) -> Result<Model> {
    let path = manifest_path(path);
    let manifest = read_manifest(&path)?;
    validate_manifest(&manifest)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let loader = Loader { dir, opts };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let h = entry.header();
        layers.push(ModelLayer {
            layer: loader.layer(entry)?,
            input_channels: h.input_channels,
            input_hw: h.input_hw.map(|[a, b]| (a, b)),
        });
    }
    Ok(Model::new(
        manifest.model_name,
        manifest.input_resolution,
        layers,
    ))
}

struct Loader<'a> {
    dir: &'a Path,
    opts: LoadOptions,
}

impl Loader<'_> {
    fn floats(&self, rel: &str, count: usize) -> Result<Vec<f64>> {
        let path = self.dir.join(rel);
        let meta = match fs::metadata(&path) {
            Ok(m) => m,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ManifestError::MissingFile { path }.into())
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let expected = 4 * count as u64;
        if meta.len() != expected {
            return Err(ManifestError::SizeMismatch {
                path,
                expected,
                actual: meta.len(),
            }
            .into());
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::with_capacity(count);
        for (index, chunk) in bytes.chunks_exact(4).enumerate() {
            let value = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            if !value.is_finite() {
                if !self.opts.allow_non_finite {
                    return Err(ManifestError::NonFiniteWeight { path, index, value }.into());
                }
                log::warn!(
                    "{}: non-finite weight {value} at element {index}",
                    path.display()
                );
            }
            out.push(value as f64);
        }
        Ok(out)
    }

    fn tensor(&self, rel: &str, shape: [usize; 4]) -> Result<Tensor4> {
        Tensor4::new(shape, self.floats(rel, shape.iter().product())?)
    }

    fn bias(&self, h: &LayerHeader, rel: &Option<String>) -> Result<Option<Vec<f64>>> {
        rel.as_deref().map(|r| self.floats(r, h.n_o)).transpose()
    }

    fn stage(&self, entry: &LayerEntry) -> Result<Stage> {
        let h = entry.header();
        match entry {
            LayerEntry::Conv { weight, bias, .. } => Ok(Stage::Conv(ConvKernel::new(
                h.name.clone(),
                self.tensor(weight, h.shape())?,
                self.bias(h, bias)?,
                h.spec(),
            )?)),
            LayerEntry::Decoupled {
                ordering,
                pointwise,
                depthwise,
                bias,
                ..
            } => {
                let dw_channels = match ordering {
                    Ordering::DwPw => h.n_i,
                    Ordering::PwDw => h.n_o,
                };
                let blocks = pointwise
                    .iter()
                    .zip(depthwise)
                    .map(|(p, d)| {
                        Ok(SeparableBlock {
                            pointwise: self.tensor(p, [h.n_o, h.n_i, 1, 1])?,
                            depthwise: self.tensor(d, [dw_channels, 1, h.k_h, h.k_w])?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Stage::Decoupled(DecoupledKernel::new(
                    h.name.clone(),
                    *ordering,
                    blocks,
                    self.bias(h, bias)?,
                    h.spec(),
                    h.shape(),
                )?))
            }
            LayerEntry::Pair { .. } => Err(ManifestError::InvalidPair {
                layer: h.name.clone(),
                detail: "pairs cannot be nested".into(),
            }
            .into()),
        }
    }

    fn layer(&self, entry: &LayerEntry) -> Result<Layer> {
        match entry {
            LayerEntry::Pair {
                header,
                decomposition,
                first,
                second,
                ..
            } => Ok(Layer::Pair(DecomposedPair::new(
                header.name.clone(),
                *decomposition,
                self.stage(first)?,
                self.stage(second)?,
            )?)),
            other => Ok(self.stage(other)?.into()),
        }
    }
}

// ---------------------------------------------------------------------------
// saving

struct Writer {
    files: Vec<(String, Vec<u8>)>,
}

impl Writer {
    fn add(&mut self, layer: &str, part: &str, values: &[f64]) -> String {
        let name = format!("{layer}.{part}.bin");
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for &v in values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.files.push((name.clone(), bytes));
        name
    }

    fn header(name: &str, shape: [usize; 4], spec: ConvSpec, has_bias: bool) -> LayerHeader {
        LayerHeader {
            name: name.to_string(),
            n_o: shape[0],
            n_i: shape[1],
            k_h: shape[2],
            k_w: shape[3],
            stride: [spec.stride.0, spec.stride.1],
            padding: [spec.padding.0, spec.padding.1],
            has_bias,
            input_channels: None,
            input_hw: None,
        }
    }

    fn stage(&mut self, name: &str, stage: &Stage) -> LayerEntry {
        match stage {
            Stage::Conv(k) => LayerEntry::Conv {
                header: Self::header(name, k.shape(), k.spec(), k.bias().is_some()),
                dtype: DTYPE_F32.into(),
                weight: self.add(name, "weight", k.weight().data()),
                bias: k.bias().map(|b| self.add(name, "bias", b)),
            },
            Stage::Decoupled(d) => {
                let mut pointwise = Vec::with_capacity(d.rank());
                let mut depthwise = Vec::with_capacity(d.rank());
                for (k, block) in d.blocks().iter().enumerate() {
                    pointwise.push(self.add(name, &format!("pw{k}"), block.pointwise.data()));
                    depthwise.push(self.add(name, &format!("dw{k}"), block.depthwise.data()));
                }
                LayerEntry::Decoupled {
                    header: Self::header(name, d.source_shape(), d.spec(), d.bias().is_some()),
                    dtype: DTYPE_F32.into(),
                    ordering: d.ordering(),
                    t: d.rank(),
                    pointwise,
                    depthwise,
                    bias: d.bias().map(|b| self.add(name, "bias", b)),
                }
            }
        }
    }

    fn layer(&mut self, layer: &Layer) -> LayerEntry {
        match layer {
            Layer::Conv(k) => self.stage(k.name(), &Stage::Conv(k.clone())),
            Layer::Decoupled(d) => self.stage(d.name(), &Stage::Decoupled(d.clone())),
            Layer::Pair(p) => {
                let first = self.stage(&format!("{}.first", p.name()), p.first());
                let second = self.stage(&format!("{}.second", p.name()), p.second());
                LayerEntry::Pair {
                    header: Self::header(p.name(), p.source_shape(), p.spec(), p.bias().is_some()),
                    decomposition: p.kind(),
                    rank: p.rank(),
                    first: Box::new(first),
                    second: Box::new(second),
                }
            }
        }
    }
}

/// Manifest for `model` and the weight file payloads it references.
pub fn encode_model(model: &Model) -> (ModelManifest, Vec<(String, Vec<u8>)>) {
    let mut w = Writer { files: Vec::new() };
    let layers = model
        .layers
        .iter()
        .map(|entry| {
            let mut e = w.layer(&entry.layer);
            let h = e.header_mut();
            h.input_channels = entry.input_channels;
            h.input_hw = entry.input_hw.map(|(a, b)| [a, b]);
            e
        })
        .collect();
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        model_name: model.name.clone(),
        input_resolution: model.input_resolution,
        layers,
    };
    (manifest, w.files)
}

pub fn manifest_json(m: &ModelManifest) -> String {
    serde_json::to_string_pretty(m).expect("manifest serializes") + "\n"
}

/// Writes `model.json` and all weight files into `out_dir` (created if
/// needed) and returns the manifest path.
pub fn save_model(model: &Model, out_dir: &Path) -> Result<PathBuf> {
    let (manifest, files) = encode_model(model);
    validate_manifest(&manifest)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, bytes) in &files {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest_json(&manifest)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
