//! Evaluation of predicted deformations: Jacobian determinants, folding
//! fraction, Dice overlap, summary statistics and raster renderings.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ndtensor::Scalar;
use crate::nets::ModelParams;
use crate::stn::{self, DisplacementField, LabelMask, ScalarField};
use crate::trainer::{predict, TrainMode};

/// `det(I + Du)` at every voxel.
///
/// Derivatives are forward differences; the last index along an axis reuses
/// the difference before it, so every voxel gets a determinant.
pub fn jacobian_det_map<T: Scalar>(u: &DisplacementField<T>) -> ScalarField<T> {
    let dims = u.dims();
    let d = dims.len();
    let n = u.voxel_count();
    let strides = stn::strides(dims);
    let v = u.vectors();
    let mut det = vec![T::zero(); n];
    let mut jac = [[T::zero(); 3]; 3];
    stn::for_each_voxel(dims, |flat, p| {
        for a in 0..d {
            let (lo, hi) = if p[a] + 1 < dims[a] {
                (flat, flat + strides[a])
            } else {
                (flat - strides[a], flat)
            };
            for (c, row) in jac.iter_mut().enumerate().take(d) {
                let delta = v[c * n + hi] - v[c * n + lo];
                row[a] = if a == c { T::one() + delta } else { delta };
            }
        }
        det[flat] = if d == 2 {
            jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]
        } else {
            jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
        };
    });
    ScalarField::new(dims.to_vec(), det).expect("determinant map")
}

/// Fraction of voxels with a strictly negative determinant.
pub fn folding_fraction<T: Scalar>(det_map: &ScalarField<T>) -> f64 {
    let negative = det_map.values().iter().filter(|&&v| v < T::zero()).count();
    negative as f64 / det_map.values().len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianReport<T> {
    pub det_map: ScalarField<T>,
    pub folding_fraction: f64,
    pub min_det: T,
    pub voxel_count: usize,
}

pub fn jacobian_report<T: Scalar>(u: &DisplacementField<T>) -> JacobianReport<T> {
    let det_map = jacobian_det_map(u);
    let folding_fraction = folding_fraction(&det_map);
    let min_det = det_map.min_max().0;
    let voxel_count = det_map.values().len();
    JacobianReport {
        det_map,
        folding_fraction,
        min_det,
        voxel_count,
    }
}

/// `2|A ∩ B| / (|A| + |B|)` for the voxels carrying `label` in each mask.
/// Two empty masks score 1.
pub fn dice(a: &LabelMask, b: &LabelMask, label: u8) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op: "dice",
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    let (mut size_a, mut size_b, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (in_a, in_b) = (x == label, y == label);
        size_a += in_a as usize;
        size_b += in_b as usize;
        both += (in_a && in_b) as usize;
    }
    if size_a + size_b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (size_a + size_b) as f64)
}

/// One test pair with optional label masks.
#[derive(Clone, Debug)]
pub struct EvalPair<T> {
    pub source: ScalarField<T>,
    pub target: ScalarField<T>,
    pub source_labels: Option<LabelMask>,
    pub target_labels: Option<LabelMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairMetrics {
    pub folding_fraction: f64,
    pub min_det: f64,
    /// Dice per label id; empty when no labels were supplied.
    pub dice: Vec<(u8, f64)>,
}

impl PairMetrics {
    pub fn mean_dice(&self) -> Option<f64> {
        (!self.dice.is_empty()).then(|| self.dice.iter().map(|(_, d)| d).sum::<f64>() / self.dice.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub pairs: Vec<PairMetrics>,
    pub mean_p: f64,
    /// Population standard deviation of the per-pair folding fractions.
    pub std_p: f64,
    pub label_dice: Vec<(u8, f64)>,
    pub mean_dice: Option<f64>,
}

impl EvalReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>) -> Self {
        let n = pairs.len().max(1) as f64;
        let mean_p = pairs.iter().map(|p| p.folding_fraction).sum::<f64>() / n;
        let std_p = (pairs.iter().map(|p| (p.folding_fraction - mean_p).powi(2)).sum::<f64>() / n).sqrt();

        let mut labels: Vec<u8> = pairs.iter().flat_map(|p| p.dice.iter().map(|(l, _)| *l)).collect();
        labels.sort_unstable();
        labels.dedup();
        let label_dice = labels
            .into_iter()
            .map(|l| {
                let scores: Vec<f64> = pairs
                    .iter()
                    .flat_map(|p| p.dice.iter().filter(|(k, _)| *k == l).map(|(_, d)| *d))
                    .collect();
                (l, scores.iter().sum::<f64>() / scores.len() as f64)
            })
            .collect();
        let means: Vec<f64> = pairs.iter().filter_map(PairMetrics::mean_dice).collect();
        let mean_dice = (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64);
        Self {
            pairs,
            mean_p,
            std_p,
            label_dice,
            mean_dice,
        }
    }

    /// One row per pair: `pair,P,min_det` followed by one `dice_<label>`
    /// column per label when labels were evaluated.
    pub fn to_csv(&self) -> String {
        let labels: Vec<u8> = self.label_dice.iter().map(|(l, _)| *l).collect();
        let mut out = String::from("pair,P,min_det");
        for l in &labels {
            let _ = write!(out, ",dice_{l}");
        }
        if !labels.is_empty() {
            out.push_str(",mean_dice");
        }
        out.push('\n');
        for (i, p) in self.pairs.iter().enumerate() {
            let _ = write!(out, "{i},{},{}", p.folding_fraction, p.min_det);
            for l in &labels {
                match p.dice.iter().find(|(k, _)| k == l) {
                    Some((_, d)) => {
                        let _ = write!(out, ",{d}");
                    }
                    None => out.push(','),
                }
            }
            if let Some(m) = p.mean_dice() {
                let _ = write!(out, ",{m}");
            }
            out.push('\n');
        }
        out
    }

    /// Structured-text summary (TOML).
    pub fn summary(&self) -> String {
        #[derive(Serialize)]
        struct Summary {
            pairs: usize,
            mean_p: f64,
            std_p: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            mean_dice: Option<f64>,
        }
        toml::to_string(&Summary {
            pairs: self.pairs.len(),
            mean_p: self.mean_p,
            std_p: self.std_p,
            mean_dice: self.mean_dice,
        })
        .expect("summary serializes")
    }
}

/// Metrics for a predicted field, optionally with Dice of the warped source labels.
pub fn pair_metrics<T: Scalar>(
    u: &DisplacementField<T>,
    source_labels: Option<&LabelMask>,
    target_labels: Option<&LabelMask>,
) -> Result<PairMetrics> {
    let report = jacobian_report(u);
    let dice_scores = match (source_labels, target_labels) {
        (Some(src), Some(tgt)) => {
            let warped = stn::warp_labels(src, u)?;
            let mut ids = src.label_set();
            ids.extend(tgt.label_set());
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter()
                .map(|l| dice(&warped, tgt, l).map(|d| (l, d)))
                .collect::<Result<Vec<_>>>()?
        }
        _ => Vec::new(),
    };
    Ok(PairMetrics {
        folding_fraction: report.folding_fraction,
        min_det: report.min_det.as_f64(),
        dice: dice_scores,
    })
}

/// Predicts every pair and aggregates folding and overlap statistics.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, pairs: &[EvalPair<T>], mode: TrainMode) -> Result<EvalReport> {
    let per_pair = pairs
        .iter()
        .map(|pair| {
            let (u, _) = predict(params, &pair.source, &pair.target, mode)?;
            pair_metrics(&u, pair.source_labels.as_ref(), pair.target_labels.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(per_pair))
}

/// Plane through a 3D volume; 2D data takes no slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceSpec {
    pub axis: usize,
    pub index: usize,
}

impl std::str::FromStr for SliceSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid("slice", format!("expected `axis:index`, got `{s}`")))
        };
        let (a, i) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid("slice", format!("expected `axis:index`, got `{s}`")))?;
        Ok(Self {
            axis: parse(a)?,
            index: parse(i)?,
        })
    }
}

/// Resolved plane: the two in-plane axes and a mapping from plane pixels to
/// flat voxel indices.
struct Plane {
    rows_axis: usize,
    cols_axis: usize,
    height: usize,
    width: usize,
    base: usize,
    row_stride: usize,
    col_stride: usize,
}

fn plane(dims: &[usize], slice: Option<SliceSpec>) -> Result<Plane> {
    let strides = stn::strides(dims);
    match (dims.len(), slice) {
        (2, None) => Ok(Plane {
            rows_axis: 0,
            cols_axis: 1,
            height: dims[0],
            width: dims[1],
            base: 0,
            row_stride: strides[0],
            col_stride: strides[1],
        }),
        (3, Some(SliceSpec { axis, index })) if axis < 3 && index < dims[axis] => {
            let rest: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
            Ok(Plane {
                rows_axis: rest[0],
                cols_axis: rest[1],
                height: dims[rest[0]],
                width: dims[rest[1]],
                base: index * strides[axis],
                row_stride: strides[rest[0]],
                col_stride: strides[rest[1]],
            })
        }
        _ => Err(Error::invalid(
            "slice",
            format!("slice {slice:?} is out of range for dims {dims:?}"),
        )),
    }
}

impl Plane {
    fn voxel(&self, r: usize, c: usize) -> usize {
        self.base + r * self.row_stride + c * self.col_stride
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Binary PGM (`P5`).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pgm())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        self.pixels[row * self.width + col]
    }

    /// Binary PPM (`P6`).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_ppm())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub const RED: [u8; 3] = [255, 0, 0];

/// Bresenham segment; pixels outside the raster are skipped.
fn draw_segment(img: &mut GrayImage, (r0, c0): (i64, i64), (r1, c1): (i64, i64)) {
    let (dr, dc) = ((r1 - r0).abs(), -(c1 - c0).abs());
    let (sr, sc) = (if r0 < r1 { 1 } else { -1 }, if c0 < c1 { 1 } else { -1 });
    let (mut r, mut c, mut err) = (r0, c0, dr + dc);
    loop {
        if r >= 0 && c >= 0 && (r as usize) < img.height && (c as usize) < img.width {
            img.pixels[r as usize * img.width + c as usize] = 255;
        }
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
}

/// Deformed position `p + u(p)` of plane pixel `(r, c)`, rounded to a pixel.
fn deformed_pixel<T: Scalar>(u: &DisplacementField<T>, plane: &Plane, r: usize, c: usize) -> (i64, i64) {
    let n = u.voxel_count();
    let flat = plane.voxel(r, c);
    let v = u.vectors();
    let dr = v[plane.rows_axis * n + flat].as_f64();
    let dc = v[plane.cols_axis * n + flat].as_f64();
    ((r as f64 + dr).round() as i64, (c as f64 + dc).round() as i64)
}

/// Grid lines every `spacing` pixels, each drawn through the deformed
/// positions `p + u(p)` of its pixels. Lines are white on black.
pub fn render_grid<T: Scalar>(u: &DisplacementField<T>, slice: Option<SliceSpec>, spacing: usize) -> Result<GrayImage> {
    if spacing < 2 {
        return Err(Error::invalid(
            "render_grid",
            format!("spacing must be >= 2, got {spacing}"),
        ));
    }
    let pl = plane(u.dims(), slice)?;
    let mut img = GrayImage::new(pl.width, pl.height);
    for r in (0..pl.height).step_by(spacing) {
        let mut prev = deformed_pixel(u, &pl, r, 0);
        draw_segment(&mut img, prev, prev);
        for c in 1..pl.width {
            let next = deformed_pixel(u, &pl, r, c);
            draw_segment(&mut img, prev, next);
            prev = next;
        }
    }
    for c in (0..pl.width).step_by(spacing) {
        let mut prev = deformed_pixel(u, &pl, 0, c);
        draw_segment(&mut img, prev, prev);
        for r in 1..pl.height {
            let next = deformed_pixel(u, &pl, r, c);
            draw_segment(&mut img, prev, next);
            prev = next;
        }
    }
    Ok(img)
}

/// Determinant map as gray (`det` clipped to `[0, 2]` mapped to `[0, 255]`),
/// with negative determinants painted pure red.
pub fn render_det<T: Scalar>(det_map: &ScalarField<T>, slice: Option<SliceSpec>) -> Result<RgbImage> {
    let pl = plane(det_map.dims(), slice)?;
    let values = det_map.values();
    let mut pixels = Vec::with_capacity(pl.width * pl.height);
    for r in 0..pl.height {
        for c in 0..pl.width {
            let det = values[pl.voxel(r, c)].as_f64();
            pixels.push(if det < 0.0 {
                RED
            } else {
                let g = (det.clamp(0.0, 2.0) / 2.0 * 255.0).round() as u8;
                [g, g, g]
            });
        }
    }
    Ok(RgbImage {
        width: pl.width,
        height: pl.height,
        pixels,
    })
}
