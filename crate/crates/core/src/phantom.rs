//! Synthetic four-channel records with known tumor compartments.
//!
//! A tumor is a set of nested shells on one perturbed ellipsoidal radius
//! `ρ`: NCR core, ET shell, NET rim, ED surround. Because every shell uses the
//! same angular perturbation, the nesting holds voxel by voxel.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{Schema, BACKGROUND, ED, ET, NCR, NET};
use crate::nifti::{self, NiftiError};
use crate::volume::{voxel_count, Grid, LabelVolume, Modality, MultiModalRecord, Shape3, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tissue classes with an intensity model. Voxels outside the brain are 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Healthy,
    Ncr,
    Ed,
    Net,
    Et,
}

impl Tissue {
    pub const ALL: [Tissue; 5] = [Tissue::Healthy, Tissue::Ncr, Tissue::Ed, Tissue::Net, Tissue::Et];

    fn of_label(label: u8) -> Tissue {
        match label {
            NCR => Tissue::Ncr,
            ED => Tissue::Ed,
            NET => Tissue::Net,
            ET => Tissue::Et,
            _ => Tissue::Healthy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensity {
    pub mean: f64,
    pub sd: f64,
}

pub type IntensityTable = BTreeMap<Modality, BTreeMap<Tissue, Intensity>>;

/// Synthetic defaults. NET is close to ET in T1 and to ED in T2, and clearly
/// apart from every other compartment in T1C and FLAIR.
pub fn default_intensity_table() -> IntensityTable {
    let rows: [(Modality, [f64; 5]); 4] = [
        (Modality::T1, [100.0, 50.0, 80.0, 70.0, 72.0]),
        (Modality::T2, [100.0, 160.0, 140.0, 142.0, 110.0]),
        (Modality::T1c, [100.0, 40.0, 85.0, 60.0, 170.0]),
        (Modality::Flair, [100.0, 70.0, 170.0, 125.0, 145.0]),
    ];
    rows.into_iter()
        .map(|(m, means)| {
            let row = Tissue::ALL.iter().zip(means).map(|(&t, mean)| (t, Intensity { mean, sd: 8.0 })).collect();
            (m, row)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    /// ED outer semi-axes as fractions of the grid shape.
    pub tumor_axes: [f64; 3],
    /// Outer radius of each inner compartment in units of the ED radius.
    pub ncr_radius: f64,
    pub et_radius: f64,
    pub net_radius: f64,
    /// Relative amplitude of the angular radius perturbation.
    pub jitter: f64,
    /// Maximum displacement of the tumor centre from the grid centre, voxels.
    pub center_jitter: f64,
    /// Brain semi-axes as fractions of the grid shape.
    pub brain_axes: [f64; 3],
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            tumor_axes: [0.42, 0.22, 0.22],
            ncr_radius: 0.3,
            et_radius: 0.5,
            net_radius: 0.7,
            jitter: 0.15,
            center_jitter: 1.0,
            brain_axes: [0.46, 0.46, 0.46],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub seed: u64,
    pub geometry: Geometry,
    pub intensity_table: IntensityTable,
    /// Multiplies the NET rim thickness.
    pub net_volume_scale: f64,
    /// Multiplies every tumor semi-axis.
    pub tumor_scale: f64,
    /// Exact NET voxel count; overrides `net_volume_scale` when set.
    pub net_volume_voxels: Option<usize>,
    pub spacing_mm: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [32, 64, 64],
            seed: 0,
            geometry: Geometry::default(),
            intensity_table: default_intensity_table(),
            net_volume_scale: 1.0,
            tumor_scale: 1.0,
            net_volume_voxels: None,
            spacing_mm: [1.0; 3],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::InvalidSpec(m.to_string()));
        let g = &self.geometry;
        if self.shape.contains(&0) {
            return bad("shape has a zero dimension");
        }
        if !(0.0 < g.ncr_radius && g.ncr_radius < g.et_radius && g.et_radius < g.net_radius && g.net_radius < 1.0) {
            return bad("radii must satisfy 0 < ncr < et < net < 1");
        }
        if !(0.0..0.5).contains(&g.jitter) || !(g.center_jitter >= 0.0) {
            return bad("jitter must lie in [0, 0.5) and centre jitter must be non-negative");
        }
        if g.tumor_axes.iter().chain(&g.brain_axes).any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad("axes must be positive");
        }
        if !(self.net_volume_scale > 0.0 && self.tumor_scale > 0.0) {
            return bad("scales must be positive");
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("spacing must be positive");
        }
        for m in Modality::ALL {
            let Some(row) = self.intensity_table.get(&m) else {
                return bad("intensity table misses a modality");
            };
            for t in Tissue::ALL {
                match row.get(&t) {
                    Some(i) if i.sd > 0.0 && i.mean.is_finite() && i.sd.is_finite() => {}
                    _ => return bad("intensity table needs a finite mean and positive sd for every tissue"),
                }
            }
        }
        Ok(())
    }
}

/// What was planted, for checking recovery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub record_id: String,
    pub seed: u64,
    pub label_voxels: BTreeMap<u8, usize>,
    pub net_voxels: usize,
    pub net_target: Option<usize>,
    pub tumor_scale: f64,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub record: MultiModalRecord,
    pub truth: PhantomTruth,
}

/// Low-order angular perturbation in [-1, 1].
struct Perturbation {
    phases: [f64; 4],
}

impl Perturbation {
    fn eval(&self, dir: [f64; 3]) -> f64 {
        let [z, y, x] = dir;
        let theta = z.clamp(-1.0, 1.0).acos();
        let phi = y.atan2(x);
        let p = &self.phases;
        0.4 * (2.0 * phi + p[0]).sin() * theta.sin()
            + 0.3 * (3.0 * theta + p[1]).cos()
            + 0.2 * (phi + p[2]).cos() * (2.0 * theta + p[3]).sin()
            + 0.1 * (4.0 * phi + p[0] + p[3]).sin()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-record seed derived from a cohort seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index.wrapping_add(1)))
}

/// Builds one record named `phantom`.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    generate_named(spec, "phantom")
}

pub fn generate_named(spec: &PhantomSpec, record_id: &str) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let g = &spec.geometry;
    let shape = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pert = Perturbation { phases: std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI)) };
    let mid = shape.map(|d| (d as f64 - 1.0) / 2.0);
    let centre: [f64; 3] = std::array::from_fn(|a| mid[a] + rng.random_range(-1.0..=1.0) * g.center_jitter);
    let axes: [f64; 3] = std::array::from_fn(|a| (g.tumor_axes[a] * shape[a] as f64 * spec.tumor_scale).max(0.5));
    let brain: [f64; 3] = std::array::from_fn(|a| g.brain_axes[a] * shape[a] as f64);

    let n = voxel_count(shape);
    let mut rho = vec![f64::INFINITY; n];
    let mut in_brain = vec![false; n];
    for (idx, (r, b)) in rho.iter_mut().zip(in_brain.iter_mut()).enumerate() {
        let c = [idx / (shape[1] * shape[2]), (idx / shape[2]) % shape[1], idx % shape[2]];
        let bq: f64 = (0..3).map(|a| ((c[a] as f64 - mid[a]) / brain[a]).powi(2)).sum();
        let q: [f64; 3] = std::array::from_fn(|a| (c[a] as f64 - centre[a]) / axes[a]);
        let len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir = if len > 0.0 { q.map(|v| v / len) } else { [1.0, 0.0, 0.0] };
        *r = len / (1.0 + g.jitter * pert.eval(dir));
        *b = bq <= 1.0 || *r < 1.0;
    }

    let et_r = g.et_radius;
    let net_r = (et_r + (g.net_radius - et_r) * spec.net_volume_scale).min(0.999);
    let mut labels = vec![BACKGROUND; n];
    for i in 0..n {
        let r = rho[i];
        labels[i] = if r < g.ncr_radius {
            NCR
        } else if r < et_r {
            ET
        } else if r < 1.0 {
            if spec.net_volume_voxels.is_none() && r < net_r {
                NET
            } else {
                ED
            }
        } else {
            BACKGROUND
        };
    }
    if let Some(target) = spec.net_volume_voxels {
        // the `target` innermost voxels of the ED region become NET
        let mut cand: Vec<usize> = (0..n).filter(|&i| labels[i] == ED).collect();
        if target > cand.len() {
            log::warn!("{record_id}: NET target {target} exceeds capacity {}; clamped", cand.len());
        }
        cand.sort_by(|&a, &b| rho[a].total_cmp(&rho[b]).then(a.cmp(&b)));
        for &i in cand.iter().take(target) {
            labels[i] = NET;
        }
    }

    let mut channels = Vec::with_capacity(4);
    for m in Modality::ALL {
        let row = &spec.intensity_table[&m];
        let gain = 1.0 + 0.05 * rng.sample::<f64, _>(StandardNormal);
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                if !in_brain[i] {
                    return 0.0;
                }
                let t = row[&Tissue::of_label(labels[i])];
                // f32-representable so that NIfTI float storage is lossless
                let v = (gain * (t.mean + t.sd * z)) as f32 as f64;
                if v == 0.0 {
                    f32::MIN_POSITIVE as f64
                } else {
                    v
                }
            })
            .collect();
        channels.push(Volume::new(shape, data)?.with_spacing(spec.spacing_mm));
    }
    let lv = LabelVolume::new(Grid::new(shape, labels)?, Schema::Unified4Label)?.with_spacing(spec.spacing_mm);
    let label_voxels = lv.count_label_voxels();
    let truth = PhantomTruth {
        record_id: record_id.to_string(),
        seed: spec.seed,
        net_voxels: label_voxels.get(&NET).copied().unwrap_or(0),
        label_voxels,
        net_target: spec.net_volume_voxels,
        tumor_scale: spec.tumor_scale,
    };
    let mut it = channels.into_iter();
    let (t1, t2, t1c, flair) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    let record = MultiModalRecord::new(record_id, t1, t2, t1c, flair, Some(lv))?;
    Ok(Phantom { record, truth })
}

/// Gamma law for planted NET volumes, in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaLaw {
    pub shape_k: f64,
    pub scale_theta: f64,
}

/// Nominal NET voxel count of an unjittered tumor with the given spec.
fn nominal_net_volume(spec: &PhantomSpec) -> f64 {
    let g = &spec.geometry;
    let abc: f64 = (0..3).map(|a| g.tumor_axes[a] * spec.shape[a] as f64).product();
    4.0 / 3.0 * PI * abc * (g.net_radius.powi(3) - g.et_radius.powi(3))
}

/// `n` records named `phantom_000`, `phantom_001`, ... with per-record seeds
/// derived from `seed`. With a volume law, each record draws its NET volume
/// from it and the tumor is scaled to match.
pub fn generate_cohort(
    n: usize,
    base: &PhantomSpec,
    volumes: Option<GammaLaw>,
    seed: u64,
) -> Result<Vec<Phantom>, PhantomError> {
    if n == 0 {
        return Err(PhantomError::InvalidSpec("cohort size must be at least 1".into()));
    }
    base.validate()?;
    let law = match volumes {
        Some(l) => Some(
            Gamma::new(l.shape_k, l.scale_theta).map_err(|e| PhantomError::InvalidSpec(format!("gamma law: {e}")))?,
        ),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed));
    let nominal = nominal_net_volume(base);
    (0..n)
        .map(|i| {
            let mut spec = base.clone();
            spec.seed = derive_seed(seed, i as u64);
            if let Some(law) = &law {
                let v: f64 = law.sample(&mut rng);
                spec.tumor_scale = base.tumor_scale * (v / nominal).cbrt().clamp(0.5, 1.5);
                spec.net_volume_voxels = Some(v.round() as usize);
            }
            generate_named(&spec, &format!("phantom_{i:03}"))
        })
        .collect()
}

/// Cohort manifest written next to the NIfTI files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub base_spec: PhantomSpec,
    pub cohort_seed: u64,
    pub volume_law: Option<GammaLaw>,
    pub records: Vec<PhantomTruth>,
}

/// Writes every record with [`nifti::write_record`] plus `manifest.json`.
pub fn write_cohort(dir: &Path, phantoms: &[Phantom], manifest: &CohortManifest) -> Result<(), PhantomError> {
    fs::create_dir_all(dir)?;
    for p in phantoms {
        nifti::write_record(dir, &p.record)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CohortManifest, PhantomError> {
    Ok(serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?)
}
