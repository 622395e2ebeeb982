//! Binary morphology on voxel masks. Voxels outside the grid count as
//! background for every operator.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::Mask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MorphologyError {
    #[error("connectivity must be 6, 18 or 26, got {0}")]
    BadConnectivity(u8),
    #[error("structuring element kernel must have odd side length, got {0:?}")]
    EvenKernel([usize; 3]),
    #[error("structuring element is not symmetric about its center")]
    Asymmetric,
    #[error("structuring element kernel length {len} does not match its shape {shape:?}")]
    KernelLength { len: usize, shape: [usize; 3] },
    #[error("radius must be at least 1")]
    ZeroRadius,
}

/// Neighbourhood connectivity of a voxel lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Face,
    Edge,
    Vertex,
}

impl Connectivity {
    pub fn neighbours(self) -> u8 {
        match self {
            Connectivity::Face => 6,
            Connectivity::Edge => 18,
            Connectivity::Vertex => 26,
        }
    }

    /// Unit-step neighbour offsets (excluding the origin).
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(self.neighbours() as usize);
        for d in -1isize..=1 {
            for h in -1isize..=1 {
                for w in -1isize..=1 {
                    let l1 = d.abs() + h.abs() + w.abs();
                    let keep = match self {
                        Connectivity::Face => l1 == 1,
                        Connectivity::Edge => l1 == 1 || l1 == 2,
                        Connectivity::Vertex => l1 > 0,
                    };
                    if keep {
                        out.push([d, h, w]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = MorphologyError;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        match n {
            6 => Ok(Connectivity::Face),
            18 => Ok(Connectivity::Edge),
            26 => Ok(Connectivity::Vertex),
            other => Err(MorphologyError::BadConnectivity(other)),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        c.neighbours()
    }
}

/// A symmetric set of voxel offsets, always including the origin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    offsets: Vec<[isize; 3]>,
}

impl StructuringElement {
    /// Ball of the given connectivity: `|d|₁ ≤ r` for 6, `|d|∞ ≤ r ∧ |d|₁ ≤ 2r`
    /// for 18, `|d|∞ ≤ r` for 26.
    pub fn ball(connectivity: Connectivity, radius: usize) -> Result<Self, MorphologyError> {
        if radius == 0 {
            return Err(MorphologyError::ZeroRadius);
        }
        let r = radius as isize;
        let mut offsets = Vec::new();
        for d in -r..=r {
            for h in -r..=r {
                for w in -r..=r {
                    let l1 = d.abs() + h.abs() + w.abs();
                    let keep = match connectivity {
                        Connectivity::Face => l1 <= r,
                        Connectivity::Edge => l1 <= 2 * r,
                        Connectivity::Vertex => true,
                    };
                    if keep {
                        offsets.push([d, h, w]);
                    }
                }
            }
        }
        Ok(Self { offsets })
    }

    /// Explicit odd-sided kernel in row-major order.
    pub fn from_kernel(shape: [usize; 3], kernel: &[bool]) -> Result<Self, MorphologyError> {
        if shape.iter().any(|s| s % 2 == 0) {
            return Err(MorphologyError::EvenKernel(shape));
        }
        if kernel.len() != shape.iter().product::<usize>() {
            return Err(MorphologyError::KernelLength { len: kernel.len(), shape });
        }
        if kernel.iter().zip(kernel.iter().rev()).any(|(a, b)| a != b) {
            return Err(MorphologyError::Asymmetric);
        }
        let half = shape.map(|s| (s / 2) as isize);
        let mut offsets = Vec::new();
        for (idx, &on) in kernel.iter().enumerate() {
            if on {
                let w = idx % shape[2];
                let h = (idx / shape[2]) % shape[1];
                let d = idx / (shape[1] * shape[2]);
                offsets.push([d as isize - half[0], h as isize - half[1], w as isize - half[2]]);
            }
        }
        Ok(Self { offsets })
    }

    pub fn offsets(&self) -> &[[isize; 3]] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Shifts `mask` by `off` and folds it into `acc` along one z-row at a time.
fn fold_shifted(acc: &mut Mask, mask: &Mask, off: [isize; 3], combine: impl Fn(bool, bool) -> bool, outside: bool) {
    let [nd, nh, nw] = mask.shape();
    let src = mask.data();
    let dst = acc.data_mut();
    for d in 0..nd {
        let sd = d as isize + off[0];
        for h in 0..nh {
            let sh = h as isize + off[1];
            let row = (d * nh + h) * nw;
            let row_inside = sd >= 0 && (sd as usize) < nd && sh >= 0 && (sh as usize) < nh;
            if !row_inside {
                for v in &mut dst[row..row + nw] {
                    *v = combine(*v, outside);
                }
                continue;
            }
            let srow = (sd as usize * nh + sh as usize) * nw;
            for w in 0..nw {
                let sw = w as isize + off[2];
                let value = if sw >= 0 && (sw as usize) < nw { src[srow + sw as usize] } else { outside };
                dst[row + w] = combine(dst[row + w], value);
            }
        }
    }
}

/// Voxels where the element, centred there, lies entirely inside `mask`.
pub fn erode(mask: &Mask, se: &StructuringElement) -> Mask {
    let mut out = Mask::filled(mask.shape(), true);
    for &off in se.offsets() {
        fold_shifted(&mut out, mask, off, |a, b| a && b, false);
    }
    out
}

/// Minkowski sum of `mask` with the element.
pub fn dilate(mask: &Mask, se: &StructuringElement) -> Mask {
    let mut out = Mask::empty(mask.shape());
    for &[d, h, w] in se.offsets() {
        fold_shifted(&mut out, mask, [-d, -h, -w], |a, b| a || b, false);
    }
    out
}

pub fn open(mask: &Mask, se: &StructuringElement) -> Mask {
    dilate(&erode(mask, se), se)
}

/// Closing over a margin of the element's reach, so that mass pushed past
/// the grid edge by the dilation is still there for the erosion. Without it
/// closing would not be extensive at the border.
pub fn close(mask: &Mask, se: &StructuringElement) -> Mask {
    let r = se.offsets().iter().flatten().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    if r == 0 {
        return erode(&dilate(mask, se), se);
    }
    let [d, h, w] = mask.shape();
    let padded = Mask::from_fn([d + 2 * r, h + 2 * r, w + 2 * r], |c| {
        (0..3).all(|a| c[a] >= r && c[a] < mask.shape()[a] + r) && mask.get([c[0] - r, c[1] - r, c[2] - r])
    });
    let closed = erode(&dilate(&padded, se), se);
    Mask::from_fn([d, h, w], |c| closed.get([c[0] + r, c[1] + r, c[2] + r]))
}

/// Connected-component labelling; returns per-voxel component ids (0 =
/// background) and the component sizes indexed by `id - 1`.
pub fn label_components(mask: &Mask, connectivity: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let shape = mask.shape();
    let offsets = connectivity.offsets();
    let mut ids = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask.data()[start] || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let c = mask.coords(idx);
            for off in &offsets {
                let n = [0, 1, 2].map(|a| c[a] as isize + off[a]);
                if (0..3).any(|a| n[a] < 0 || n[a] as usize >= shape[a]) {
                    continue;
                }
                let nidx = mask.index(n.map(|v| v as usize));
                if mask.data()[nidx] && ids[nidx] == 0 {
                    ids[nidx] = id;
                    queue.push_back(nidx);
                }
            }
        }
        sizes.push(size);
    }
    (ids, sizes)
}

/// Drops connected components with fewer than `min_voxels` voxels.
pub fn remove_small_components(mask: &Mask, min_voxels: usize, connectivity: Connectivity) -> Mask {
    if min_voxels <= 1 {
        return mask.clone();
    }
    let (ids, sizes) = label_components(mask, connectivity);
    let mut out = mask.clone();
    for (v, &id) in out.data_mut().iter_mut().zip(&ids) {
        if id != 0 && sizes[id as usize - 1] < min_voxels {
            *v = false;
        }
    }
    out
}

/// One step of a configurable filter chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum FilterStep {
    Erode {
        connectivity: Connectivity,
        radius: usize,
    },
    Dilate {
        connectivity: Connectivity,
        radius: usize,
    },
    Open {
        connectivity: Connectivity,
        radius: usize,
    },
    Close {
        connectivity: Connectivity,
        radius: usize,
    },
    RemoveSmall {
        min_voxels: usize,
        #[serde(default = "default_component_connectivity")]
        connectivity: Connectivity,
    },
}

fn default_component_connectivity() -> Connectivity {
    Connectivity::Vertex
}

impl FilterStep {
    pub fn apply(&self, mask: &Mask) -> Result<Mask, MorphologyError> {
        Ok(match *self {
            FilterStep::Erode { connectivity, radius } => erode(mask, &StructuringElement::ball(connectivity, radius)?),
            FilterStep::Dilate { connectivity, radius } => {
                dilate(mask, &StructuringElement::ball(connectivity, radius)?)
            }
            FilterStep::Open { connectivity, radius } => open(mask, &StructuringElement::ball(connectivity, radius)?),
            FilterStep::Close { connectivity, radius } => close(mask, &StructuringElement::ball(connectivity, radius)?),
            FilterStep::RemoveSmall { min_voxels, connectivity } => {
                remove_small_components(mask, min_voxels, connectivity)
            }
        })
    }
}

/// Default NET cleanup: open and close with the radius-1 face cross, then
/// drop 26-connected components below 10 voxels.
pub fn default_net_filters() -> Vec<FilterStep> {
    vec![
        FilterStep::Open { connectivity: Connectivity::Face, radius: 1 },
        FilterStep::Close { connectivity: Connectivity::Face, radius: 1 },
        FilterStep::RemoveSmall { min_voxels: 10, connectivity: Connectivity::Vertex },
    ]
}

pub fn apply_filters(mask: &Mask, steps: &[FilterStep]) -> Result<Mask, MorphologyError> {
    steps.iter().try_fold(mask.clone(), |m, step| step.apply(&m))
}
