//! The deformation unit (a small U-net producing a displacement field from a
//! stacked source/target pair) and the refinement block (two convolutions
//! producing a correction to that field).

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{Padding, Param, Scalar, Tape, Tensor, Var};
use crate::stn::{DisplacementField, ScalarField};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLDX";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Spatial extents of the images the network registers.
    pub image_dims: Vec<usize>,
    /// Number of stride-2 encoder levels.
    pub levels: usize,
    /// Channels of the first encoder level; doubled per level.
    pub base_channels: usize,
    pub kernel: usize,
    /// Hidden width of the refinement block.
    pub refine_hidden: usize,
    pub leaky_slope: f64,
    /// Whether the refinement block is part of the model.
    pub refine: bool,
}

impl ArchConfig {
    /// Desk-scale defaults: three levels, 16 base channels in 2D and 8 in 3D.
    pub fn for_dims(image_dims: &[usize]) -> Self {
        Self {
            image_dims: image_dims.to_vec(),
            levels: 3,
            base_channels: if image_dims.len() == 3 { 8 } else { 16 },
            kernel: 3,
            refine_hidden: 16,
            leaky_slope: 0.2,
            refine: false,
        }
    }

    pub fn with_refine(mut self, refine: bool) -> Self {
        self.refine = refine;
        self
    }

    pub fn rank(&self) -> usize {
        self.image_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.rank();
        if !(d == 2 || d == 3) {
            return Err(Error::invalid(
                "arch_config",
                format!("image_dims must have 2 or 3 axes, got {:?}", self.image_dims),
            ));
        }
        if self.levels == 0 || self.base_channels == 0 || self.refine_hidden == 0 {
            return Err(Error::invalid(
                "arch_config",
                "levels and channel counts must be positive",
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(
                "arch_config",
                format!("kernel must be odd, got {}", self.kernel),
            ));
        }
        let factor = 1usize << self.levels;
        if self.image_dims.iter().any(|&n| n % factor != 0 || n / factor == 0) {
            return Err(Error::invalid(
                "arch_config",
                format!(
                    "image_dims {:?} must be divisible by 2^levels = {factor}",
                    self.image_dims
                ),
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("arch_config", "leaky_slope must lie in (0, 1)"));
        }
        Ok(())
    }

    fn kernel_shape(&self, cout: usize, cin: usize) -> Vec<usize> {
        let mut s = vec![cout, cin];
        s.extend(std::iter::repeat_n(self.kernel, self.rank()));
        s
    }

    fn encoder_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(name, shape)` of every deformation-unit parameter in declaration order.
    pub fn deformation_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 2;
        for l in 0..self.levels {
            let cout = self.encoder_channels(l);
            out.push((format!("enc{l}.weight"), self.kernel_shape(cout, cin)));
            out.push((format!("enc{l}.bias"), vec![cout]));
            cin = cout;
        }
        for l in (0..self.levels).rev() {
            let skip = if l == 0 { 2 } else { self.encoder_channels(l - 1) };
            let cout = if l == 0 {
                self.base_channels
            } else {
                self.encoder_channels(l - 1)
            };
            out.push((format!("dec{l}.weight"), self.kernel_shape(cout, cin + skip)));
            out.push((format!("dec{l}.bias"), vec![cout]));
            cin = cout;
        }
        out.push(("head.weight".into(), self.kernel_shape(self.rank(), cin)));
        out.push(("head.bias".into(), vec![self.rank()]));
        out
    }

    pub fn refine_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.rank(), self.refine_hidden);
        vec![
            ("refine0.weight".into(), self.kernel_shape(h, d)),
            ("refine0.bias".into(), vec![h]),
            ("refine1.weight".into(), self.kernel_shape(d, h)),
            ("refine1.bias".into(), vec![d]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationUnitParams<T> {
    pub params: Vec<Param<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineParams<T> {
    pub params: Vec<Param<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    pub deformation: DeformationUnitParams<T>,
    pub refine: Option<RefineParams<T>>,
}

fn init_group<T: Scalar>(layout: Vec<(String, Vec<usize>)>, zero: &[&str], rng: &mut ChaCha8Rng) -> Vec<Param<T>> {
    layout
        .into_iter()
        .map(|(name, shape)| {
            let value = if name.ends_with(".bias") || zero.iter().any(|z| name.starts_with(z)) {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-bound..bound)))
            };
            Param::new(name, value)
        })
        .collect()
}

/// Fan-in scaled uniform hidden kernels; zero biases, zero head of the
/// deformation unit and zero output layer of the refinement block, so a fresh
/// model predicts the identity transform.
pub fn init_params<T: Scalar>(seed: u64, arch: &ArchConfig) -> Result<ModelParams<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deformation = init_group(arch.deformation_layout(), &["head."], &mut rng);
    let refine = arch.refine.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        RefineParams {
            params: init_group(arch.refine_layout(), &["refine1."], &mut rng),
        }
    });
    Ok(ModelParams {
        arch: arch.clone(),
        deformation: DeformationUnitParams { params: deformation },
        refine,
    })
}

/// Puts every parameter on the tape, either tracked or as constants.
pub fn register<T: Scalar>(tape: &mut Tape<T>, params: &[Param<T>], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            if trainable {
                tape.param(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            }
        })
        .collect()
}

fn conv_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    activation: Option<T>,
) -> Result<Var> {
    let y = tape.conv_nd(x, weight, stride, Padding::Same)?;
    let y = tape.add_bias(y, bias)?;
    match activation {
        Some(alpha) => tape.leaky_relu(y, alpha),
        None => Ok(y),
    }
}

/// Source and target stacked as a two-channel tensor, in that order.
pub fn stack_pair<T: Scalar>(tape: &mut Tape<T>, source: Var, target: Var) -> Result<Var> {
    tape.concat_channels(source, target)
}

/// Runs the U-net on a `[2, dims...]` pair and returns a `[d, dims...]` field.
pub fn deformation_forward<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &ArchConfig,
    weights: &[Var],
    pair: Var,
) -> Result<Var> {
    let input = tape.value(pair);
    if input.channels() != 2 || input.spatial() != arch.image_dims.as_slice() {
        let mut expected = vec![2];
        expected.extend_from_slice(&arch.image_dims);
        return Err(Error::ShapeMismatch {
            op: "deformation_forward",
            left: expected,
            right: input.shape().to_vec(),
        });
    }
    if weights.len() != 4 * arch.levels + 2 {
        return Err(Error::invalid(
            "deformation_forward",
            "parameter count does not match architecture",
        ));
    }
    let alpha = Some(T::of(arch.leaky_slope));
    let mut w = weights.chunks(2);
    let mut skips = vec![pair];
    let mut h = pair;
    for _ in 0..arch.levels {
        let p = w.next().expect("encoder params");
        h = conv_block(tape, h, p[0], p[1], 2, alpha)?;
        skips.push(h);
    }
    skips.pop();
    for _ in 0..arch.levels {
        let p = w.next().expect("decoder params");
        let up = tape.upsample_nearest(h, 2)?;
        let skip = skips.pop().expect("skip connection");
        let cat = tape.concat_channels(up, skip)?;
        h = conv_block(tape, cat, p[0], p[1], 1, alpha)?;
    }
    let p = w.next().expect("head params");
    conv_block(tape, h, p[0], p[1], 1, None)
}

/// `conv2(leaky_relu(conv1(u)))`: correction to a `[d, dims...]` field.
pub fn refine_forward<T: Scalar>(tape: &mut Tape<T>, arch: &ArchConfig, weights: &[Var], field: Var) -> Result<Var> {
    let u = tape.value(field);
    if u.channels() != arch.rank() {
        return Err(Error::invalid(
            "refine_forward",
            format!("field must have {} components, got shape {:?}", arch.rank(), u.shape()),
        ));
    }
    if weights.len() != 4 {
        return Err(Error::invalid(
            "refine_forward",
            "refinement block takes four parameters",
        ));
    }
    let hidden = conv_block(tape, field, weights[0], weights[1], 1, Some(T::of(arch.leaky_slope)))?;
    conv_block(tape, hidden, weights[2], weights[3], 1, None)
}

impl<T: Scalar> ModelParams<T> {
    pub fn parameter_count(&self) -> usize {
        self.deformation.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn refine_parameter_count(&self) -> usize {
        self.refine
            .as_ref()
            .map_or(0, |r| r.params.iter().map(|p| p.value.len()).sum())
    }

    fn all_params(&self) -> impl Iterator<Item = &Param<T>> {
        self.deformation
            .params
            .iter()
            .chain(self.refine.iter().flat_map(|r| r.params.iter()))
    }

    /// Deformation-unit field for a source/target pair (no gradients).
    pub fn deformation_field(&self, source: &ScalarField<T>, target: &ScalarField<T>) -> Result<DisplacementField<T>> {
        let mut tape = Tape::new();
        let weights = register(&mut tape, &self.deformation.params, false);
        let s = tape.constant(source.to_tensor());
        let t = tape.constant(target.to_tensor());
        let pair = stack_pair(&mut tape, s, t)?;
        let u = deformation_forward(&mut tape, &self.arch, &weights, pair)?;
        DisplacementField::from_tensor(tape.value(u))
    }

    /// Refinement correction for a field (no gradients).
    pub fn refinement(&self, u: &DisplacementField<T>) -> Result<DisplacementField<T>> {
        let refine = self
            .refine
            .as_ref()
            .ok_or_else(|| Error::invalid("refine_forward", "model has no refinement block"))?;
        let mut tape = Tape::new();
        let weights = register(&mut tape, &refine.params, false);
        let f = tape.constant(u.to_tensor());
        let du = refine_forward(&mut tape, &self.arch, &weights, f)?;
        DisplacementField::from_tensor(tape.value(du))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `FLDX`, version and header length as little-endian `u32`, the
    /// architecture as TOML text, then every parameter as little-endian `f32`
    /// in declaration order.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header = toml::to_string(&self.arch).expect("arch config serializes");
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        for p in self.all_params() {
            for &v in p.value.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |field: &str, reason: String| Error::Format {
            path: path.to_path_buf(),
            field: field.to_string(),
            reason,
        };
        let mut r = bytes;
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| format("magic", "file too short".into()))?;
        if &word != CHECKPOINT_MAGIC {
            return Err(format("magic", format!("expected FLDX, found {word:?}")));
        }
        r.read_exact(&mut word)
            .map_err(|_| format("version", "file too short".into()))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(format("version", format!("unsupported version {version}")));
        }
        r.read_exact(&mut word)
            .map_err(|_| format("header_length", "file too short".into()))?;
        let len = u32::from_le_bytes(word) as usize;
        if r.len() < len {
            return Err(format("header", "truncated".into()));
        }
        let text = std::str::from_utf8(&r[..len]).map_err(|e| format("header", e.to_string()))?;
        let arch: ArchConfig = toml::from_str(text).map_err(|e| format("header", e.to_string()))?;
        arch.validate().map_err(|e| format("header", e.to_string()))?;
        r = &r[len..];

        let mut layout = arch.deformation_layout();
        let split = layout.len();
        if arch.refine {
            layout.extend(arch.refine_layout());
        }
        let expected: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>() * 4;
        if r.len() != expected {
            return Err(format(
                "parameters",
                format!("expected {expected} bytes of parameters, found {}", r.len()),
            ));
        }
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let data = r[..n * 4]
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            r = &r[n * 4..];
            params.push(Param::new(name, Tensor::new(shape, data)?));
        }
        let refine_params = params.split_off(split);
        Ok(ModelParams {
            deformation: DeformationUnitParams { params },
            refine: arch.refine.then_some(RefineParams { params: refine_params }),
            arch,
        })
    }
}
