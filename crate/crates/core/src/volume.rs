//! Voxel grids and the shape operations shared by every stage of the pipeline.
//!
//! Axis order is always `(axial, coronal, sagittal)` with the sagittal index
//! varying fastest in memory.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::Schema;

/// Spatial extent of a grid, `(axial, coronal, sagittal)`.
pub type Shape3 = [usize; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Shape3 },
    #[error("shape {0:?} has a zero dimension")]
    ZeroDimension(Shape3),
    #[error("target shape {target:?} exceeds source shape {source_shape:?}")]
    TargetTooLarge { target: Shape3, source_shape: Shape3 },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Shape3, Shape3),
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("label {label} at voxel {index} is not valid for schema {schema}")]
    InvalidLabel { label: u8, index: usize, schema: Schema },
    #[error("mask selects no voxels")]
    EmptyMask,
    #[error("masked intensities have zero variance")]
    ZeroVariance,
    #[error("upscale factor must be at least 1")]
    ZeroFactor,
}

/// A dense 3D array in row-major `(axial, coronal, sagittal)` order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    shape: Shape3,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Grid<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid").field("shape", &self.shape).field("len", &self.data.len()).finish()
    }
}

/// A binary voxel mask.
pub type Mask = Grid<bool>;

impl<T: Copy> Grid<T> {
    pub fn new(shape: Shape3, data: Vec<T>) -> Result<Self, VolumeError> {
        if shape.contains(&0) {
            return Err(VolumeError::ZeroDimension(shape));
        }
        if voxel_count(shape) != data.len() {
            return Err(VolumeError::LengthMismatch { len: data.len(), shape });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape3, value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized grid {shape:?}");
        Self { shape, data: vec![value; voxel_count(shape)] }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut([usize; 3]) -> T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized grid {shape:?}");
        let mut data = Vec::with_capacity(voxel_count(shape));
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    data.push(f([i, j, k]));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.shape[2];
        let rest = idx / self.shape[2];
        [rest / self.shape[1], rest % self.shape[1], k]
    }

    #[inline]
    pub fn get(&self, at: [usize; 3]) -> T {
        self.data[self.index(at)]
    }

    #[inline]
    pub fn set(&mut self, at: [usize; 3], value: T) {
        let idx = self.index(at);
        self.data[idx] = value;
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid { shape: self.shape, data: self.data.iter().copied().map(f).collect() }
    }

    pub fn zip_map<U: Copy, V: Copy>(
        &self,
        other: &Grid<U>,
        mut f: impl FnMut(T, U) -> V,
    ) -> Result<Grid<V>, VolumeError> {
        ensure_same_shape(self.shape, other.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Grid { shape: self.shape, data })
    }

    /// Extracts the centered `target` sub-block; odd margins round the offset down.
    pub fn center_crop(&self, target: Shape3) -> Result<Self, VolumeError> {
        if target.iter().zip(&self.shape).any(|(t, s)| t > s) {
            return Err(VolumeError::TargetTooLarge { target, source_shape: self.shape });
        }
        if target.contains(&0) {
            return Err(VolumeError::ZeroDimension(target));
        }
        let off = crop_offsets(self.shape, target);
        let mut data = Vec::with_capacity(voxel_count(target));
        for i in 0..target[0] {
            for j in 0..target[1] {
                let start = self.index([i + off[0], j + off[1], off[2]]);
                data.extend_from_slice(&self.data[start..start + target[2]]);
            }
        }
        Ok(Self { shape: target, data })
    }

    /// Inverse placement of [`Grid::center_crop`]: embeds `self` in a grid of
    /// shape `target` filled with `fill`.
    pub fn center_pad(&self, target: Shape3, fill: T) -> Result<Self, VolumeError> {
        if target.iter().zip(&self.shape).any(|(t, s)| t < s) {
            return Err(VolumeError::ShapeMismatch(self.shape, target));
        }
        let off = crop_offsets(target, self.shape);
        let mut out = Self::filled(target, fill);
        for i in 0..self.shape[0] {
            for j in 0..self.shape[1] {
                let src = self.index([i, j, 0]);
                let dst = out.index([i + off[0], j + off[1], off[2]]);
                out.data[dst..dst + self.shape[2]].copy_from_slice(&self.data[src..src + self.shape[2]]);
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour upscaling: every voxel becomes a `factor³` block.
    pub fn upscale_repeat(&self, factor: usize) -> Result<Self, VolumeError> {
        if factor == 0 {
            return Err(VolumeError::ZeroFactor);
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let shape = self.shape.map(|d| d * factor);
        let mut data = Vec::with_capacity(voxel_count(shape));
        let mut row = Vec::with_capacity(shape[2]);
        for i in 0..self.shape[0] {
            let mut plane = Vec::with_capacity(shape[1] * shape[2]);
            for j in 0..self.shape[1] {
                row.clear();
                let start = self.index([i, j, 0]);
                for &v in &self.data[start..start + self.shape[2]] {
                    row.extend(std::iter::repeat_n(v, factor));
                }
                for _ in 0..factor {
                    plane.extend_from_slice(&row);
                }
            }
            for _ in 0..factor {
                data.extend_from_slice(&plane);
            }
        }
        Ok(Self { shape, data })
    }
}

impl Mask {
    pub fn empty(shape: Shape3) -> Self {
        Self::filled(shape, false)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask, VolumeError> {
        self.zip_map(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask, VolumeError> {
        self.zip_map(other, |a, b| a || b)
    }

    /// Voxelwise set difference `self \ other`.
    pub fn minus(&self, other: &Mask) -> Result<Mask, VolumeError> {
        self.zip_map(other, |a, b| a && !b)
    }

    pub fn not(&self) -> Mask {
        self.map(|a| !a)
    }

    pub fn is_subset_of(&self, other: &Mask) -> Result<bool, VolumeError> {
        ensure_same_shape(self.shape, other.shape)?;
        Ok(self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b))
    }

    pub fn set_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// A real-valued intensity volume with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid<f64>,
    spacing_mm: [f64; 3],
}

impl Volume {
    /// Builds a volume, rejecting non-finite intensities.
    pub fn new(shape: Shape3, data: Vec<f64>) -> Result<Self, VolumeError> {
        Self::from_grid(Grid::new(shape, data)?)
    }

    pub fn from_grid(grid: Grid<f64>) -> Result<Self, VolumeError> {
        if let Some(i) = grid.data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { grid, spacing_mm: [1.0; 3] })
    }

    pub fn with_spacing(mut self, spacing_mm: [f64; 3]) -> Self {
        assert!(spacing_mm.iter().all(|&s| s > 0.0 && s.is_finite()), "invalid spacing");
        self.spacing_mm = spacing_mm;
        self
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.grid
    }

    pub fn shape(&self) -> Shape3 {
        self.grid.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f64] {
        &self.grid.data
    }

    pub fn center_crop(&self, target: Shape3) -> Result<Self, VolumeError> {
        Ok(Self { grid: self.grid.center_crop(target)?, spacing_mm: self.spacing_mm })
    }

    pub fn upscale_repeat(&self, factor: usize) -> Result<Self, VolumeError> {
        let f = factor.max(1) as f64;
        Ok(Self { grid: self.grid.upscale_repeat(factor)?, spacing_mm: self.spacing_mm.map(|s| s / f) })
    }

    /// Mask of voxels with any nonzero intensity.
    pub fn nonzero_mask(&self) -> Mask {
        self.grid.map(|v| v != 0.0)
    }
}

/// A volume of small integer labels tagged with the schema that defines them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid<u8>,
    schema: Schema,
    spacing_mm: [f64; 3],
}

impl LabelVolume {
    pub fn new(grid: Grid<u8>, schema: Schema) -> Result<Self, VolumeError> {
        if let Some((index, &label)) = grid.data.iter().enumerate().find(|(_, &l)| !schema.is_valid_label(l)) {
            return Err(VolumeError::InvalidLabel { label, index, schema });
        }
        Ok(Self { grid, schema, spacing_mm: [1.0; 3] })
    }

    pub fn with_spacing(mut self, spacing_mm: [f64; 3]) -> Self {
        self.spacing_mm = spacing_mm;
        self
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.grid
    }

    pub fn into_grid(self) -> Grid<u8> {
        self.grid
    }

    pub fn shape(&self) -> Shape3 {
        self.grid.shape
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[u8] {
        &self.grid.data
    }

    /// Same voxels under a different schema; fails if a label is invalid there.
    pub fn retag(self, schema: Schema) -> Result<Self, VolumeError> {
        let spacing = self.spacing_mm;
        Ok(Self::new(self.grid, schema)?.with_spacing(spacing))
    }

    pub fn mask_of(&self, labels: &[u8]) -> Mask {
        self.grid.map(|l| labels.contains(&l))
    }

    pub fn center_crop(&self, target: Shape3) -> Result<Self, VolumeError> {
        Ok(Self { grid: self.grid.center_crop(target)?, schema: self.schema, spacing_mm: self.spacing_mm })
    }

    pub fn upscale_repeat(&self, factor: usize) -> Result<Self, VolumeError> {
        let f = factor.max(1) as f64;
        Ok(Self {
            grid: self.grid.upscale_repeat(factor)?,
            schema: self.schema,
            spacing_mm: self.spacing_mm.map(|s| s / f),
        })
    }

    /// Voxel count per label; labels absent from the volume map to zero.
    pub fn count_label_voxels(&self) -> BTreeMap<u8, usize> {
        let mut counts = count_label_voxels(&self.grid);
        for l in (0..=u8::MAX).filter(|&l| self.schema.is_valid_label(l)) {
            counts.entry(l).or_insert(0);
        }
        counts
    }
}

/// Four co-registered MRI channels plus optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalRecord {
    pub record_id: String,
    pub t1: Volume,
    pub t2: Volume,
    pub t1c: Volume,
    pub flair: Volume,
    pub labels: Option<LabelVolume>,
}

/// The four MRI contrasts, in network channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T2,
    T1c,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T2, Modality::T1c, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T2 => "t2",
            Modality::T1c => "t1c",
            Modality::Flair => "flair",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl MultiModalRecord {
    pub fn new(
        record_id: impl Into<String>,
        t1: Volume,
        t2: Volume,
        t1c: Volume,
        flair: Volume,
        labels: Option<LabelVolume>,
    ) -> Result<Self, VolumeError> {
        let shape = t1.shape();
        for v in [&t2, &t1c, &flair] {
            ensure_same_shape(shape, v.shape())?;
        }
        if let Some(l) = &labels {
            ensure_same_shape(shape, l.shape())?;
        }
        Ok(Self { record_id: record_id.into(), t1, t2, t1c, flair, labels })
    }

    pub fn shape(&self) -> Shape3 {
        self.t1.shape()
    }

    pub fn channel(&self, m: Modality) -> &Volume {
        match m {
            Modality::T1 => &self.t1,
            Modality::T2 => &self.t2,
            Modality::T1c => &self.t1c,
            Modality::Flair => &self.flair,
        }
    }

    /// Voxels where any channel is nonzero (skull-stripped brain).
    pub fn brain_mask(&self) -> Mask {
        let mut mask = self.t1.nonzero_mask();
        for m in [Modality::T2, Modality::T1c, Modality::Flair] {
            for (dst, &v) in mask.data_mut().iter_mut().zip(self.channel(m).data()) {
                *dst |= v != 0.0;
            }
        }
        mask
    }

    /// Per-channel z-scoring over the brain mask.
    pub fn normalized(&self) -> Result<Self, VolumeError> {
        let brain = self.brain_mask();
        Ok(Self {
            record_id: self.record_id.clone(),
            t1: normalize_intensity(&self.t1, &brain)?,
            t2: normalize_intensity(&self.t2, &brain)?,
            t1c: normalize_intensity(&self.t1c, &brain)?,
            flair: normalize_intensity(&self.flair, &brain)?,
            labels: self.labels.clone(),
        })
    }

    pub fn center_crop(&self, target: Shape3) -> Result<Self, VolumeError> {
        Ok(Self {
            record_id: self.record_id.clone(),
            t1: self.t1.center_crop(target)?,
            t2: self.t2.center_crop(target)?,
            t1c: self.t1c.center_crop(target)?,
            flair: self.flair.center_crop(target)?,
            labels: self.labels.as_ref().map(|l| l.center_crop(target)).transpose()?,
        })
    }
}

pub fn voxel_count(shape: Shape3) -> usize {
    shape.iter().product()
}

/// Offsets used by [`Grid::center_crop`]: `floor((source - target) / 2)` per axis.
pub fn crop_offsets(source: Shape3, target: Shape3) -> [usize; 3] {
    [0, 1, 2].map(|a| (source[a] - target[a]) / 2)
}

pub fn ensure_same_shape(a: Shape3, b: Shape3) -> Result<(), VolumeError> {
    if a == b {
        Ok(())
    } else {
        Err(VolumeError::ShapeMismatch(a, b))
    }
}

pub fn count_label_voxels(labels: &Grid<u8>) -> BTreeMap<u8, usize> {
    let mut counts = [0usize; 256];
    for &l in labels.data() {
        counts[l as usize] += 1;
    }
    counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(l, &c)| (l as u8, c)).collect()
}

/// Z-scores intensities over `brain_mask`; voxels outside the mask become 0.
pub fn normalize_intensity(vol: &Volume, brain_mask: &Mask) -> Result<Volume, VolumeError> {
    ensure_same_shape(vol.shape(), brain_mask.shape())?;
    let n = brain_mask.count();
    if n == 0 {
        return Err(VolumeError::EmptyMask);
    }
    let masked = || vol.data().iter().zip(brain_mask.data()).filter(|(_, &m)| m).map(|(&v, _)| v);
    let mean = neumaier_sum(masked()) / n as f64;
    let var = neumaier_sum(masked().map(|v| (v - mean) * (v - mean))) / n as f64;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(VolumeError::ZeroVariance);
    }
    let grid = vol.grid.zip_map(brain_mask, |v, m| if m { (v - mean) / sd } else { 0.0 })?;
    Ok(Volume { grid, spacing_mm: vol.spacing_mm })
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iota(shape: Shape3) -> Grid<u32> {
        let mut n = 0;
        Grid::from_fn(shape, |_| {
            n += 1;
            n
        })
    }

    #[test]
    fn crop_offsets_brats_full_to_training_sizes() {
        assert_eq!(crop_offsets([155, 240, 240], [80, 160, 128]), [37, 40, 56]);
        assert_eq!(crop_offsets([155, 240, 240], [96, 192, 160]), [29, 24, 40]);
    }

    #[test]
    fn crop_picks_shifted_voxels() {
        let g = iota([7, 6, 5]);
        let c = g.center_crop([4, 3, 2]).unwrap();
        let off = crop_offsets([7, 6, 5], [4, 3, 2]);
        assert_eq!(off, [1, 1, 1]);
        for i in 0..4 {
            for j in 0..3 {
                for k in 0..2 {
                    assert_eq!(c.get([i, j, k]), g.get([i + off[0], j + off[1], k + off[2]]));
                }
            }
        }
    }

    #[test]
    fn crop_identity_and_too_large() {
        let g = iota([3, 4, 5]);
        assert_eq!(g.center_crop([3, 4, 5]).unwrap(), g);
        assert!(matches!(g.center_crop([4, 4, 5]), Err(VolumeError::TargetTooLarge { .. })));
    }

    #[test]
    fn pad_inverts_crop_inside_window() {
        let g = iota([5, 6, 7]);
        let c = g.center_crop([3, 3, 3]).unwrap();
        let p = c.center_pad([5, 6, 7], 0).unwrap();
        assert_eq!(p.center_crop([3, 3, 3]).unwrap(), c);
    }

    #[test]
    fn upscale_single_voxel() {
        let g = Grid::new([1, 1, 1], vec![1u8]).unwrap();
        let u = g.upscale_repeat(2).unwrap();
        assert_eq!(u.shape(), [2, 2, 2]);
        assert!(u.data().iter().all(|&v| v == 1));
        assert_eq!(g.upscale_repeat(1).unwrap(), g);
        assert_eq!(g.upscale_repeat(0), Err(VolumeError::ZeroFactor));
    }

    #[test]
    fn upscale_training_shape() {
        let g = Grid::filled([96, 192, 160], 0u8);
        assert_eq!(g.upscale_repeat(2).unwrap().shape(), [192, 384, 320]);
    }

    #[test]
    fn upscale_places_blocks() {
        let g = iota([2, 3, 2]);
        let u = g.upscale_repeat(3).unwrap();
        for idx in 0..u.len() {
            let [i, j, k] = u.coords(idx);
            assert_eq!(u.data()[idx], g.get([i / 3, j / 3, k / 3]));
        }
    }

    #[test]
    fn label_counts() {
        let g = Grid::filled([2, 2, 2], 0u8);
        assert_eq!(count_label_voxels(&g), BTreeMap::from([(0, 8)]));
        let mut g = g;
        for i in [0, 3, 7] {
            g.data_mut()[i] = 4;
        }
        assert_eq!(count_label_voxels(&g), BTreeMap::from([(0, 5), (4, 3)]));
        let up = count_label_voxels(&g.upscale_repeat(2).unwrap());
        assert_eq!(up, BTreeMap::from([(0, 40), (4, 24)]));
    }

    #[test]
    fn normalize_small_example() {
        let vol = Volume::new([1, 1, 4], vec![1.0, 2.0, 3.0, 99.0]).unwrap();
        let mask = Grid::new([1, 1, 4], vec![true, true, true, false]).unwrap();
        let out = normalize_intensity(&vol, &mask).unwrap();
        // population sd of {1,2,3} is sqrt(2/3)
        let s = (1.5f64).sqrt();
        let expect = [-s, 0.0, s, 0.0];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn normalize_fixed_point_and_errors() {
        let vol = Volume::new([1, 1, 2], vec![-1.0, 1.0]).unwrap();
        let all = Mask::filled([1, 1, 2], true);
        let out = normalize_intensity(&vol, &all).unwrap();
        assert!(out.data().iter().zip(vol.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        let flat = Volume::new([1, 1, 2], vec![3.0, 3.0]).unwrap();
        assert_eq!(normalize_intensity(&flat, &all), Err(VolumeError::ZeroVariance));
        assert_eq!(normalize_intensity(&vol, &Mask::empty([1, 1, 2])), Err(VolumeError::EmptyMask));
    }

    #[test]
    fn volume_rejects_nan() {
        assert_eq!(Volume::new([1, 1, 2], vec![0.0, f64::NAN]), Err(VolumeError::NonFinite(1)));
    }

    fn shape_strategy() -> impl Strategy<Value = Shape3> {
        (1usize..7, 1usize..7, 1usize..7).prop_map(|(a, b, c)| [a, b, c])
    }

    proptest! {
        #[test]
        fn crop_is_idempotent(shape in shape_strategy(), fr in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0)) {
            let target = [
                1 + ((shape[0] - 1) as f64 * fr.0) as usize,
                1 + ((shape[1] - 1) as f64 * fr.1) as usize,
                1 + ((shape[2] - 1) as f64 * fr.2) as usize,
            ];
            let g = iota(shape);
            let once = g.center_crop(target).unwrap();
            prop_assert_eq!(once.center_crop(target).unwrap(), once);
        }

        #[test]
        fn upscale_composes(shape in shape_strategy(), a in 1usize..3, b in 1usize..3) {
            let g = iota(shape);
            let two_step = g.upscale_repeat(a).unwrap().upscale_repeat(b).unwrap();
            prop_assert_eq!(two_step, g.upscale_repeat(a * b).unwrap());
        }

        #[test]
        fn label_counts_total(shape in shape_strategy(), seed in any::<u64>()) {
            let mut s = seed;
            let g = Grid::from_fn(shape, |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) % 5) as u8
            });
            let total: usize = count_label_voxels(&g).values().sum();
            prop_assert_eq!(total, g.len());
        }

        #[test]
        fn normalize_standardizes(values in prop::collection::vec(-1e3f64..1e3, 3..64)) {
            let n = values.len();
            let spread = values.iter().cloned().fold(f64::MIN, f64::max)
                - values.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let vol = Volume::new([1, 1, n], values).unwrap();
            let out = normalize_intensity(&vol, &Mask::filled([1, 1, n], true)).unwrap();
            let mean = out.data().iter().sum::<f64>() / n as f64;
            let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
