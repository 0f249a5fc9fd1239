//! Sampling unit of the spatial transformer.
//!
//! A displacement field `u` stores, for every voxel `p`, the offset to the
//! location where the source image is sampled: `warped(p) = x(p + u(p))`.
//! Component `c` of `u` is the displacement along spatial axis `c`, in voxels.
//!
//! Sampling positions outside the grid are clamped to the border (replicate).
//! At exactly integer positions the interpolation cell to the right is used,
//! which fixes the derivative with respect to `u` at those points. The last
//! grid index is the only exception: it has no right-hand neighbour, so the
//! cell to its left is used.

use crate::error::{Error, Result};
use crate::ndtensor::{CustomOp, Scalar, Tape, Tensor, Var};

pub(crate) fn check_rank(op: &'static str, dims: &[usize]) -> Result<()> {
    if !(dims.len() == 2 || dims.len() == 3) {
        return Err(Error::invalid(
            op,
            format!("expected 2 or 3 spatial axes, got {dims:?}"),
        ));
    }
    if dims.iter().any(|&n| n < 2) {
        return Err(Error::invalid(
            op,
            format!("every extent must be at least 2, got {dims:?}"),
        ));
    }
    Ok(())
}

fn dims_match(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * dims[a + 1];
    }
    s
}

/// Calls `f(flat, coords)` for every voxel in row-major order.
pub(crate) fn for_each_voxel(dims: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let n: usize = dims.iter().product();
    let mut idx = vec![0usize; dims.len()];
    for flat in 0..n {
        f(flat, &idx);
        for a in (0..dims.len()).rev() {
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Intensity grid (source, target, warped or reconstructed image).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField<T> {
    dims: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> ScalarField<T> {
    pub fn new(dims: Vec<usize>, values: Vec<T>) -> Result<Self> {
        check_rank("scalar_field", &dims)?;
        let n: usize = dims.iter().product();
        if values.len() != n {
            return Err(Error::invalid(
                "scalar_field",
                format!("dims {dims:?} need {n} values, got {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("scalar_field", "values must be finite"));
        }
        Ok(Self { dims, values })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        check_rank("scalar_field", dims)?;
        let mut values = Vec::with_capacity(dims.iter().product());
        for_each_voxel(dims, |_, p| values.push(f(p)));
        Self::new(dims.to_vec(), values)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn get(&self, p: &[usize]) -> T {
        let s = strides(&self.dims);
        self.values[p.iter().zip(&s).map(|(i, s)| i * s).sum::<usize>()]
    }

    /// Single-channel tensor `[1, dims...]`.
    pub fn to_tensor(&self) -> Tensor<T> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.dims);
        Tensor::new(shape, self.values.clone()).expect("field shape")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::invalid(
                "scalar_field",
                format!("expected one channel, got shape {:?}", t.shape()),
            ));
        }
        Self::new(t.spatial().to_vec(), t.data().to_vec())
    }

    pub fn min_max(&self) -> (T, T) {
        self.values
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Per-voxel displacement, component-major (`[d, dims...]`), in voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    dims: Vec<usize>,
    vectors: Vec<T>,
}

impl<T: Scalar> DisplacementField<T> {
    pub fn new(dims: Vec<usize>, vectors: Vec<T>) -> Result<Self> {
        check_rank("displacement_field", &dims)?;
        let n: usize = dims.iter().product::<usize>() * dims.len();
        if vectors.len() != n {
            return Err(Error::invalid(
                "displacement_field",
                format!("dims {dims:?} need {n} components, got {}", vectors.len()),
            ));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("displacement_field", "components must be finite"));
        }
        Ok(Self { dims, vectors })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_rank("displacement_field", dims)?;
        let n = dims.iter().product::<usize>() * dims.len();
        Self::new(dims.to_vec(), vec![T::zero(); n])
    }

    /// Builds a field from a function returning the displacement at each voxel.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> Vec<T>) -> Result<Self> {
        check_rank("displacement_field", dims)?;
        let voxels: usize = dims.iter().product();
        let d = dims.len();
        let mut vectors = vec![T::zero(); voxels * d];
        let mut failure = None;
        for_each_voxel(dims, |flat, p| {
            let v = f(p);
            if v.len() != d {
                failure = Some(v.len());
                return;
            }
            for (c, x) in v.into_iter().enumerate() {
                vectors[c * voxels + flat] = x;
            }
        });
        if let Some(len) = failure {
            return Err(Error::invalid(
                "displacement_field",
                format!("expected {d} components per voxel, got {len}"),
            ));
        }
        Self::new(dims.to_vec(), vectors)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// All components, component-major.
    pub fn vectors(&self) -> &[T] {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut [T] {
        &mut self.vectors
    }

    pub fn component(&self, c: usize) -> &[T] {
        let n = self.voxel_count();
        &self.vectors[c * n..(c + 1) * n]
    }

    pub fn at(&self, flat: usize) -> Vec<T> {
        let n = self.voxel_count();
        (0..self.rank()).map(|c| self.vectors[c * n + flat]).collect()
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            dims: self.dims.clone(),
            vectors: self.vectors.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.vectors.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn mean_norm(&self) -> T {
        let n = self.voxel_count();
        let total: T = (0..n)
            .map(|p| {
                (0..self.rank())
                    .map(|c| self.vectors[c * n + p].powi(2))
                    .sum::<T>()
                    .sqrt()
            })
            .sum();
        total / T::of(n as f64)
    }

    /// Tensor `[d, dims...]`.
    pub fn to_tensor(&self) -> Tensor<T> {
        let mut shape = vec![self.rank()];
        shape.extend_from_slice(&self.dims);
        Tensor::new(shape, self.vectors.clone()).expect("field shape")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        if t.channels() != t.spatial().len() {
            return Err(Error::invalid(
                "displacement_field",
                format!("component count must equal spatial rank, got shape {:?}", t.shape()),
            ));
        }
        Self::new(t.spatial().to_vec(), t.data().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> DisplacementField<U> {
        DisplacementField {
            dims: self.dims.clone(),
            vectors: self.vectors.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Integer label per voxel; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    dims: Vec<usize>,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Vec<usize>, labels: Vec<u8>) -> Result<Self> {
        check_rank("label_mask", &dims)?;
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(Error::invalid(
                "label_mask",
                format!("dims {dims:?} need {n} labels, got {}", labels.len()),
            ));
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Sorted non-background label ids present in the mask.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }
}

/// Per-voxel coordinates equal to the voxel's own index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentityGrid {
    dims: Vec<usize>,
    coords: Vec<usize>,
}

impl IdentityGrid {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Coordinate vector of the voxel with row-major index `flat`.
    pub fn point(&self, flat: usize) -> &[usize] {
        let d = self.dims.len();
        &self.coords[flat * d..(flat + 1) * d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[usize]> {
        self.coords.chunks(self.dims.len())
    }
}

pub fn identity_grid(dims: &[usize]) -> Result<IdentityGrid> {
    check_rank("identity_grid", dims)?;
    let mut coords = Vec::with_capacity(dims.iter().product::<usize>() * dims.len());
    for_each_voxel(dims, |_, p| coords.extend_from_slice(p));
    Ok(IdentityGrid {
        dims: dims.to_vec(),
        coords,
    })
}

/// Interpolation cell along one axis.
#[derive(Clone, Copy, Debug)]
struct AxisCell<T> {
    lower: usize,
    frac: T,
    /// False when the sample was clamped, i.e. the position does not respond
    /// to small changes of the displacement.
    inside: bool,
}

#[inline]
fn locate<T: Scalar>(s: T, n: usize) -> AxisCell<T> {
    let last = T::of((n - 1) as f64);
    if s <= T::zero() {
        AxisCell {
            lower: 0,
            frac: T::zero(),
            inside: s == T::zero(),
        }
    } else if s >= last {
        AxisCell {
            lower: n - 2,
            frac: T::one(),
            inside: s == last,
        }
    } else {
        let f = s.floor();
        AxisCell {
            lower: f.to_usize().unwrap_or(0).min(n - 2),
            frac: s - f,
            inside: true,
        }
    }
}

/// Multi-linear sampling plan for every voxel: the cell per axis.
struct SamplePlan<T> {
    dims: Vec<usize>,
    strides: Vec<usize>,
    cells: Vec<AxisCell<T>>,
}

impl<T: Scalar> SamplePlan<T> {
    fn new(dims: &[usize], field: &[T]) -> Self {
        let d = dims.len();
        let n: usize = dims.iter().product();
        let mut cells = Vec::with_capacity(n * d);
        for_each_voxel(dims, |flat, p| {
            for a in 0..d {
                let s = T::of(p[a] as f64) + field[a * n + flat];
                cells.push(locate(s, dims[a]));
            }
        });
        Self {
            dims: dims.to_vec(),
            strides: strides(dims),
            cells,
        }
    }

    fn voxel(&self, flat: usize) -> &[AxisCell<T>] {
        let d = self.dims.len();
        &self.cells[flat * d..(flat + 1) * d]
    }

    /// Corner offsets and weights of the `2^d` cell corners.
    #[inline]
    fn corners(&self, flat: usize, mut f: impl FnMut(usize, usize, T)) {
        let cell = self.voxel(flat);
        let d = cell.len();
        let base: usize = cell.iter().zip(&self.strides).map(|(c, s)| c.lower * s).sum();
        for mask in 0..(1usize << d) {
            let mut index = base;
            let mut w = T::one();
            for (a, c) in cell.iter().enumerate() {
                if mask >> a & 1 == 1 {
                    index += self.strides[a];
                    w *= c.frac;
                } else {
                    w *= T::one() - c.frac;
                }
            }
            f(mask, index, w);
        }
    }

    /// `d weight / d position[axis]` of corner `mask`.
    #[inline]
    fn weight_slope(cell: &[AxisCell<T>], mask: usize, axis: usize) -> T {
        let mut w = if mask >> axis & 1 == 1 { T::one() } else { -T::one() };
        for (a, c) in cell.iter().enumerate() {
            if a == axis {
                continue;
            }
            w *= if mask >> a & 1 == 1 { c.frac } else { T::one() - c.frac };
        }
        w
    }
}

fn warp_values<T: Scalar>(dims: &[usize], image: &[T], field: &[T]) -> Vec<T> {
    let n: usize = dims.iter().product();
    let channels = image.len() / n;
    let plan = SamplePlan::new(dims, field);
    let mut out = vec![T::zero(); image.len()];
    for c in 0..channels {
        let src = &image[c * n..(c + 1) * n];
        let dst = &mut out[c * n..(c + 1) * n];
        for (p, o) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            plan.corners(p, |_, idx, w| acc += w * src[idx]);
            *o = acc;
        }
    }
    out
}

/// `warped(p) = image(p + u(p))` with multi-linear interpolation and border clamping.
pub fn warp<T: Scalar>(image: &ScalarField<T>, u: &DisplacementField<T>) -> Result<ScalarField<T>> {
    dims_match("warp", image.dims(), u.dims())?;
    let values = warp_values(image.dims(), image.values(), u.vectors());
    ScalarField::new(image.dims.clone(), values)
}

/// Nearest-neighbour label warping: rounds `p + u(p)` half up per axis, then clamps.
pub fn warp_labels<T: Scalar>(mask: &LabelMask, u: &DisplacementField<T>) -> Result<LabelMask> {
    dims_match("warp_labels", mask.dims(), u.dims())?;
    let dims = mask.dims();
    let n: usize = dims.iter().product();
    let st = strides(dims);
    let field = u.vectors();
    let half = T::of(0.5);
    let mut labels = vec![0u8; n];
    for_each_voxel(dims, |flat, p| {
        let mut index = 0;
        for a in 0..dims.len() {
            let s = (T::of(p[a] as f64) + field[a * n + flat] + half).floor();
            let i = s.max(T::zero()).min(T::of((dims[a] - 1) as f64));
            index += i.to_usize().unwrap_or(0) * st[a];
        }
        labels[flat] = mask.labels[index];
    });
    LabelMask::new(dims.to_vec(), labels)
}

struct WarpOp {
    dims: Vec<usize>,
}

impl<T: Scalar> CustomOp<T> for WarpOp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        needs_grad: &[bool],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (image, field) = (inputs[0], inputs[1]);
        let dims = &self.dims;
        let d = dims.len();
        let n: usize = dims.iter().product();
        let channels = image.channels();
        let plan = SamplePlan::new(dims, field.data());
        let g = grad.data();

        let d_image = needs_grad[0].then(|| {
            let mut di = Tensor::zeros(image.shape());
            let buf = di.data_mut();
            for c in 0..channels {
                for p in 0..n {
                    let gv = g[c * n + p];
                    plan.corners(p, |_, idx, w| buf[c * n + idx] += w * gv);
                }
            }
            di
        });

        let d_field = needs_grad[1].then(|| {
            let mut du = Tensor::zeros(field.shape());
            let buf = du.data_mut();
            let src = image.data();
            for p in 0..n {
                let cell = plan.voxel(p);
                for a in 0..d {
                    if !cell[a].inside {
                        continue;
                    }
                    let mut acc = T::zero();
                    plan.corners(p, |mask, idx, _| {
                        let slope = SamplePlan::weight_slope(cell, mask, a);
                        for c in 0..channels {
                            acc += g[c * n + p] * slope * src[c * n + idx];
                        }
                    });
                    buf[a * n + p] = acc;
                }
            }
            du
        });

        vec![d_image, d_field]
    }
}

/// Differentiable warp of a `[C, dims...]` image by a `[d, dims...]` field.
pub fn warp_on_tape<T: Scalar>(tape: &mut Tape<T>, image: Var, field: Var) -> Result<Var> {
    let (img, u) = (tape.value(image), tape.value(field));
    dims_match("warp", img.spatial(), u.spatial())?;
    let dims = img.spatial().to_vec();
    check_rank("warp", &dims)?;
    if u.channels() != dims.len() {
        return Err(Error::ShapeMismatch {
            op: "warp",
            left: img.shape().to_vec(),
            right: u.shape().to_vec(),
        });
    }
    let values = warp_values(&dims, img.data(), u.data());
    let out = Tensor::new(img.shape().to_vec(), values)?;
    Ok(tape.custom(&[image, field], out, Box::new(WarpOp { dims })))
}
