//! Synthetic registration pairs, volume files, intensity normalization and
//! margin cropping.
//!
//! A volume is stored as two files: a TOML header (`name.vol`) and a raw
//! little-endian payload next to it (`name.raw`). Keys are written in a fixed
//! order:
//!
//! ```toml
//! dims = [64, 64]
//! dtype = "f32"        # or "u8"
//! components = 1       # 2 or 3 for displacement fields, component-major
//! order = "row-major"
//! spacing = [1.0, 1.0] # optional
//! payload = "name.raw"
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{folding_fraction, jacobian_det_map, EvalPair};
use crate::ndtensor::Scalar;
use crate::stn::{self, DisplacementField, LabelMask, ScalarField};
use crate::trainer::TrainPair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: Vec<usize>,
    pub dtype: DType,
    pub components: usize,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<Vec<f64>>,
    /// Payload file name, relative to the header's directory.
    pub payload: String,
}

impl VolumeHeader {
    pub fn payload_len(&self) -> usize {
        self.dims.iter().product::<usize>() * self.components * self.dtype.size()
    }
}

/// Decoded contents of a volume file.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Image(ScalarField<f32>),
    Field(DisplacementField<f32>),
    Mask(LabelMask),
}

impl Volume {
    pub fn dims(&self) -> &[usize] {
        match self {
            Volume::Image(x) => x.dims(),
            Volume::Field(u) => u.dims(),
            Volume::Mask(m) => m.dims(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Volume::Image(_) => "image",
            Volume::Field(_) => "displacement field",
            Volume::Mask(_) => "label mask",
        }
    }
}

fn payload_path(header_path: &Path) -> (PathBuf, String) {
    let payload = header_path.with_extension("raw");
    let name = payload
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume.raw".into());
    (payload, name)
}

fn write_volume(path: &Path, dims: &[usize], dtype: DType, components: usize, payload: &[u8]) -> Result<()> {
    let (payload_file, payload_name) = payload_path(path);
    let header = VolumeHeader {
        dims: dims.to_vec(),
        dtype,
        components,
        order: "row-major".into(),
        spacing: None,
        payload: payload_name,
    };
    let text = toml::to_string(&header).expect("volume header serializes");
    std::fs::write(&payload_file, payload).map_err(|e| Error::io(&payload_file, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn f32_bytes<T: Scalar>(values: &[T]) -> Vec<u8> {
    values.iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect()
}

/// Writes an image as `f32`.
pub fn save_image<T: Scalar>(path: &Path, x: &ScalarField<T>) -> Result<()> {
    write_volume(path, x.dims(), DType::F32, 1, &f32_bytes(x.values()))
}

/// Writes a displacement field as `f32`, component-major.
pub fn save_field<T: Scalar>(path: &Path, u: &DisplacementField<T>) -> Result<()> {
    write_volume(path, u.dims(), DType::F32, u.rank(), &f32_bytes(u.vectors()))
}

pub fn save_mask(path: &Path, m: &LabelMask) -> Result<()> {
    write_volume(path, m.dims(), DType::U8, 1, m.labels())
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let format = |field: &str, reason: String| Error::Format {
        path: path.to_path_buf(),
        field: field.into(),
        reason,
    };
    let header: VolumeHeader = toml::from_str(&text).map_err(|e| {
        let msg = e.message().to_string();
        let field = if msg.contains("dtype") || msg.contains("variant") {
            "dtype"
        } else {
            "header"
        };
        format(field, msg)
    })?;
    if header.order != "row-major" {
        return Err(format(
            "order",
            format!("only row-major is supported, got `{}`", header.order),
        ));
    }
    stn::check_rank("volume", &header.dims).map_err(|e| format("dims", e.to_string()))?;
    let d = header.dims.len();
    let components_ok = match header.dtype {
        DType::F32 => header.components == 1 || header.components == d,
        DType::U8 => header.components == 1,
    };
    if !components_ok {
        return Err(format(
            "components",
            format!(
                "{} components do not fit a {:?} volume of rank {d}",
                header.components, header.dtype
            ),
        ));
    }
    if let Some(s) = &header.spacing {
        if s.len() != d || s.iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(format("spacing", format!("expected {d} positive values, got {s:?}")));
        }
    }
    Ok(header)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path)?;
    let payload_file = path.parent().unwrap_or(Path::new(".")).join(&header.payload);
    let bytes = std::fs::read(&payload_file).map_err(|e| Error::io(&payload_file, e))?;
    if bytes.len() != header.payload_len() {
        return Err(Error::Format {
            path: payload_file,
            field: "payload".into(),
            reason: format!(
                "length mismatch: expected {} bytes, found {}",
                header.payload_len(),
                bytes.len()
            ),
        });
    }
    let dims = header.dims.clone();
    Ok(match header.dtype {
        DType::U8 => Volume::Mask(LabelMask::new(dims, bytes)?),
        DType::F32 => {
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if header.components == 1 {
                Volume::Image(ScalarField::new(dims, values)?)
            } else {
                Volume::Field(DisplacementField::new(dims, values)?)
            }
        }
    })
}

fn wrong_kind(path: &Path, want: &str, got: &Volume) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field: "components".into(),
        reason: format!("expected a {want}, found a {}", got.kind()),
    }
}

pub fn load_image(path: &Path) -> Result<ScalarField<f32>> {
    match load_volume(path)? {
        Volume::Image(x) => Ok(x),
        other => Err(wrong_kind(path, "image", &other)),
    }
}

pub fn load_field(path: &Path) -> Result<DisplacementField<f32>> {
    match load_volume(path)? {
        Volume::Field(u) => Ok(u),
        other => Err(wrong_kind(path, "displacement field", &other)),
    }
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    match load_volume(path)? {
        Volume::Mask(m) => Ok(m),
        other => Err(wrong_kind(path, "label mask", &other)),
    }
}

/// Divides by the maximum intensity. An all-zero image is returned as is.
pub fn normalize_intensity<T: Scalar>(x: &ScalarField<T>) -> Result<ScalarField<T>> {
    let (min, max) = x.min_max();
    if min < T::zero() {
        return Err(Error::invalid(
            "normalize_intensity",
            format!("intensities must be non-negative, found {min}"),
        ));
    }
    if max == T::zero() || max == T::one() {
        return Ok(x.clone());
    }
    let values = x.values().iter().map(|&v| v / max).collect();
    ScalarField::new(x.dims().to_vec(), values)
}

/// `(low, high)` margins removed per axis; the low side gets the floor.
pub fn crop_margins(input: &[usize], target: &[usize]) -> Result<Vec<(usize, usize)>> {
    if input.len() != target.len() || input.iter().zip(target).any(|(&n, &t)| t > n || t == 0) {
        return Err(Error::invalid(
            "center_crop",
            format!("target {target:?} must not exceed input {input:?}"),
        ));
    }
    Ok(input
        .iter()
        .zip(target)
        .map(|(&n, &t)| {
            let lo = (n - t) / 2;
            (lo, n - t - lo)
        })
        .collect())
}

fn crop_block<V: Copy>(data: &[V], dims: &[usize], components: usize, target: &[usize]) -> Result<Vec<V>> {
    let margins = crop_margins(dims, target)?;
    let n: usize = dims.iter().product();
    let strides = stn::strides(dims);
    let mut out = Vec::with_capacity(components * target.iter().product::<usize>());
    for c in 0..components {
        stn::for_each_voxel(target, |_, p| {
            let flat: usize = p
                .iter()
                .zip(&margins)
                .zip(&strides)
                .map(|((&i, &(lo, _)), &s)| (i + lo) * s)
                .sum();
            out.push(data[c * n + flat]);
        });
    }
    Ok(out)
}

/// Extracts the central block of `target` extents.
pub trait CenterCrop: Sized {
    fn center_crop(&self, target: &[usize]) -> Result<Self>;
}

impl<T: Scalar> CenterCrop for ScalarField<T> {
    fn center_crop(&self, target: &[usize]) -> Result<Self> {
        ScalarField::new(target.to_vec(), crop_block(self.values(), self.dims(), 1, target)?)
    }
}

impl<T: Scalar> CenterCrop for DisplacementField<T> {
    fn center_crop(&self, target: &[usize]) -> Result<Self> {
        DisplacementField::new(
            target.to_vec(),
            crop_block(self.vectors(), self.dims(), self.rank(), target)?,
        )
    }
}

impl CenterCrop for LabelMask {
    fn center_crop(&self, target: &[usize]) -> Result<Self> {
        LabelMask::new(target.to_vec(), crop_block(self.labels(), self.dims(), 1, target)?)
    }
}

pub fn center_crop<V: CenterCrop>(x: &V, target: &[usize]) -> Result<V> {
    x.center_crop(target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub dims: Vec<usize>,
    pub seed: u64,
    /// Number of blob structures in the base image.
    pub blobs: usize,
    /// Largest displacement component of the ground-truth field, in voxels.
    pub amplitude: f64,
    /// Smoothing scale of the ground-truth field, in voxels.
    pub smoothness: f64,
    /// Number of distinct foreground labels.
    pub labels: u8,
    /// Peak amplitude of fine-scale intensity texture added to the blobs.
    pub texture: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: vec![64, 64],
            seed: 0,
            blobs: 6,
            amplitude: 6.0,
            smoothness: 8.0,
            labels: 4,
            texture: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        stn::check_rank("synth_config", &self.dims)?;
        if self.dims.iter().any(|&n| n < 8) {
            return Err(Error::invalid("synth_config", "every extent must be at least 8"));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::invalid("synth_config", "amplitude must be finite and >= 0"));
        }
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return Err(Error::invalid("synth_config", "smoothness must be > 0"));
        }
        if !(self.texture >= 0.0 && self.texture.is_finite()) {
            return Err(Error::invalid("synth_config", "texture must be finite and >= 0"));
        }
        if self.blobs == 0 || self.labels == 0 {
            return Err(Error::invalid("synth_config", "blobs and labels must be >= 1"));
        }
        Ok(())
    }
}

/// A generated pair: `source = warp(target, u_true)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub seed: u64,
    pub source: ScalarField<f32>,
    pub target: ScalarField<f32>,
    pub source_labels: LabelMask,
    pub target_labels: LabelMask,
    pub u_true: DisplacementField<f32>,
}

impl SynthPair {
    pub fn train_pair(&self) -> TrainPair<f32> {
        TrainPair {
            source: self.source.clone(),
            target: self.target.clone(),
        }
    }

    pub fn eval_pair(&self) -> EvalPair<f32> {
        EvalPair {
            source: self.source.clone(),
            target: self.target.clone(),
            source_labels: Some(self.source_labels.clone()),
            target_labels: Some(self.target_labels.clone()),
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Blob {
    center: Vec<f64>,
    radii: Vec<f64>,
    outer: (u8, f64),
    inner: (u8, f64),
}

impl Blob {
    /// Normalized elliptical radius of `p`.
    fn radius(&self, p: &[usize]) -> f64 {
        p.iter()
            .zip(&self.center)
            .zip(&self.radii)
            .map(|((&i, c), r)| ((i as f64 - c) / r).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

const INNER_RADIUS: f64 = 0.5;
const TEXTURE_SCALE: f64 = 1.0;
const EDGE: f64 = 0.15;

fn base_image(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (ScalarField<f32>, LabelMask) {
    let dims = &cfg.dims;
    let blobs: Vec<Blob> = (0..cfg.blobs)
        .map(|j| {
            let center = dims.iter().map(|&n| rng.gen_range(0.25..0.75) * n as f64).collect();
            let radii = dims.iter().map(|&n| rng.gen_range(0.1..0.25) * n as f64).collect();
            let outer_label = 1 + ((2 * j) % cfg.labels as usize) as u8;
            let inner_label = 1 + ((2 * j + 1) % cfg.labels as usize) as u8;
            Blob {
                center,
                radii,
                outer: (outer_label, rng.gen_range(0.25..0.5)),
                inner: (inner_label, rng.gen_range(0.2..0.45)),
            }
        })
        .collect();
    let n: usize = dims.iter().product();
    let mut values = vec![0f64; n];
    let mut labels = vec![0u8; n];
    stn::for_each_voxel(dims, |flat, p| {
        let mut v = 0.1;
        for b in &blobs {
            let r = b.radius(p);
            v += b.outer.1 * smoothstep((1.0 - r) / EDGE + 0.5);
            v += b.inner.1 * smoothstep((INNER_RADIUS - r) / EDGE + 0.5);
            // Later blobs are drawn on top of earlier ones.
            if r < INNER_RADIUS {
                labels[flat] = b.inner.0;
            } else if r < 1.0 {
                labels[flat] = b.outer.0;
            }
        }
        values[flat] = v;
    });
    let texture = smooth_noise(dims, TEXTURE_SCALE, rng);
    let peak = texture.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let values = values
        .iter()
        .zip(&texture)
        .map(|(v, t)| (v + cfg.texture * t / peak).max(0.0) as f32)
        .collect();
    let image = ScalarField::new(dims.clone(), values).expect("base image");
    let image = normalize_intensity(&image).expect("non-negative base image");
    (image, LabelMask::new(dims.clone(), labels).expect("base labels"))
}

/// In-place moving average of width `2r + 1` along `axis`, averaging over the
/// in-domain part of the window.
fn box_blur_axis(values: &mut [f64], dims: &[usize], axis: usize, r: usize) {
    let strides = stn::strides(dims);
    let (len, stride) = (dims[axis], strides[axis]);
    let mut line = vec![0.0; len];
    let mut prefix = vec![0.0; len + 1];
    stn::for_each_voxel(dims, |flat, p| {
        if p[axis] != 0 {
            return;
        }
        for (i, v) in line.iter_mut().enumerate() {
            *v = values[flat + i * stride];
        }
        for i in 0..len {
            prefix[i + 1] = prefix[i] + line[i];
        }
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(len);
            values[flat + i * stride] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        }
    });
}

/// Three box passes per axis approximate a Gaussian of standard deviation
/// `sigma`: each pass of width `w` adds variance `(w² - 1) / 12`.
fn smooth_noise(dims: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let width = (4.0 * sigma * sigma + 1.0).sqrt();
    let r = ((width - 1.0) / 2.0).round().max(0.0) as usize;
    for _ in 0..3 {
        for axis in 0..dims.len() {
            box_blur_axis(&mut values, dims, axis, r);
        }
    }
    values
}

const MAX_RESCALES: usize = 20;
const RESCALE: f64 = 0.8;

fn ground_truth_field(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<DisplacementField<f32>> {
    let d = cfg.dims.len();
    let mut vectors = Vec::with_capacity(d * cfg.dims.iter().product::<usize>());
    for _ in 0..d {
        vectors.extend(smooth_noise(&cfg.dims, cfg.smoothness, rng));
    }
    let peak = vectors.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut scale = if peak > 0.0 { cfg.amplitude / peak } else { 0.0 };
    for _ in 0..=MAX_RESCALES {
        let u = DisplacementField::new(cfg.dims.clone(), vectors.iter().map(|v| (v * scale) as f32).collect())?;
        if folding_fraction(&jacobian_det_map(&u)) == 0.0 {
            return Ok(u);
        }
        scale *= RESCALE;
    }
    Err(Error::FoldingGroundTruth { attempts: MAX_RESCALES })
}

/// Builds one pair from `cfg.seed`. The target is the base image; the source
/// is the base warped by a fold-free ground-truth field.
pub fn synth_pair(cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (target, target_labels) = base_image(cfg, &mut rng);
    let u_true = ground_truth_field(cfg, &mut rng)?;
    let source = stn::warp(&target, &u_true)?;
    let source_labels = stn::warp_labels(&target_labels, &u_true)?;
    Ok(SynthPair {
        seed: cfg.seed,
        source,
        target,
        source_labels,
        target_labels,
        u_true,
    })
}

/// `count` pairs with seeds `cfg.seed + i`.
pub fn synth_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<SynthPair>> {
    (0..count)
        .map(|i| {
            synth_pair(&SynthConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            })
        })
        .collect()
}

/// One row of a dataset manifest. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub pair: usize,
    pub seed: u64,
    pub source: String,
    pub target: String,
    pub source_labels: Option<String>,
    pub target_labels: Option<String>,
    pub u_true: Option<String>,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "pair",
            "seed",
            "source",
            "target",
            "source_labels",
            "target_labels",
            "u_true",
        ])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Writes the pair's volumes as `pair_{i:04}_*.vol` in `dir` and returns the
/// manifest row describing them.
pub fn save_pair(dir: &Path, index: usize, pair: &SynthPair) -> Result<ManifestRow> {
    let name = |what: &str| format!("pair_{index:04}_{what}.vol");
    save_image(&dir.join(name("source")), &pair.source)?;
    save_image(&dir.join(name("target")), &pair.target)?;
    save_mask(&dir.join(name("source_labels")), &pair.source_labels)?;
    save_mask(&dir.join(name("target_labels")), &pair.target_labels)?;
    save_field(&dir.join(name("u_true")), &pair.u_true)?;
    Ok(ManifestRow {
        pair: index,
        seed: pair.seed,
        source: name("source"),
        target: name("target"),
        source_labels: Some(name("source_labels")),
        target_labels: Some(name("target_labels")),
        u_true: Some(name("u_true")),
    })
}

/// Loads every pair listed in a manifest.
pub fn load_pairs(manifest: &Path) -> Result<Vec<EvalPair<f32>>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .map(|row| {
            let mask = |p: &Option<String>| p.as_ref().map(|p| load_mask(&base.join(p))).transpose();
            Ok(EvalPair {
                source: load_image(&base.join(&row.source))?,
                target: load_image(&base.join(&row.target))?,
                source_labels: mask(&row.source_labels)?,
                target_labels: mask(&row.target_labels)?,
            })
        })
        .collect()
}
