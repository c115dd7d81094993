//! Seeded multi-modal phantoms with nested ellipsoidal lesions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelVolume, Study, Volume};
use crate::error::{input_err, Result};

/// Lesion geometry in voxels. Regions are concentric ellipsoids with the
/// per-axis shape factors `axes`: ET (label 4) inside `et_radius`, the rest
/// of the core (label 1) inside `tc_radius`, edema (label 2) inside
/// `wt_radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub center: [f64; 3],
    pub axes: [f64; 3],
    pub wt_radius: f64,
    pub tc_radius: f64,
    pub et_radius: f64,
}

/// Ranges from which per-study lesions are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionRanges {
    /// Whole-tumour radius as a fraction of the smallest extent.
    pub wt_fraction: [f64; 2],
    /// Core radius relative to the whole tumour.
    pub tc_ratio: [f64; 2],
    /// Enhancing radius relative to the core.
    pub et_ratio: [f64; 2],
    pub anisotropy: [f64; 2],
}

impl Default for LesionRanges {
    fn default() -> Self {
        LesionRanges { wt_fraction: [0.25, 0.32], tc_ratio: [0.7, 0.85], et_ratio: [0.6, 0.8], anisotropy: [0.85, 1.15] }
    }
}

/// Synthetic dataset description, as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    #[serde(default)]
    pub lesion: LesionRanges,
}

// (background, edema, core, enhancing) relative intensities per modality
const CONTRAST: [[f64; 4]; 4] = [
    [1.0, 0.8, 0.45, 0.9],
    [1.0, 0.9, 0.4, 2.1],
    [1.0, 1.8, 2.3, 1.4],
    [1.0, 2.1, 1.3, 1.6],
];
const BASE_LEVEL: [f64; 4] = [420.0, 510.0, 640.0, 330.0];

fn study_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl LesionSpec {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        let ok = |r: f64| r.is_finite() && r >= 0.0;
        if !(ok(self.et_radius) && ok(self.tc_radius) && ok(self.wt_radius)) {
            return Err(input_err!("lesion radii must be finite and non-negative"));
        }
        if self.et_radius > self.tc_radius || self.tc_radius > self.wt_radius {
            return Err(input_err!("lesion radii must nest: et {} <= tc {} <= wt {}", self.et_radius, self.tc_radius, self.wt_radius));
        }
        for a in 0..3 {
            let r = self.wt_radius * self.axes[a];
            if !(self.axes[a] > 0.0) || self.center[a] - r < 0.0 || self.center[a] + r > dims[a] as f64 - 1.0 {
                return Err(input_err!(
                    "lesion of radius {:.2} at {:?} does not fit inside volume {:?} (axis {})",
                    r,
                    self.center,
                    dims,
                    a
                ));
            }
        }
        Ok(())
    }

    /// Label at voxel `p`.
    pub fn label_at(&self, p: [usize; 3]) -> u8 {
        let dist = (0..3).map(|a| ((p[a] as f64 - self.center[a]) / self.axes[a]).powi(2)).sum::<f64>().sqrt();
        if self.et_radius > 0.0 && dist <= self.et_radius {
            4
        } else if self.tc_radius > 0.0 && dist <= self.tc_radius {
            1
        } else if self.wt_radius > 0.0 && dist <= self.wt_radius {
            2
        } else {
            0
        }
    }

    fn draw<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 3], ranges: &LesionRanges) -> Result<Self> {
        let mut u = |r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..=r[1]) } else { r[0] };
        let min_extent = *dims.iter().min().expect("3 axes") as f64;
        let wt = u(ranges.wt_fraction) * min_extent;
        let tc = wt * u(ranges.tc_ratio);
        let et = tc * u(ranges.et_ratio);
        let axes = [u(ranges.anisotropy), u(ranges.anisotropy), u(ranges.anisotropy)];
        let mut center = [0.0; 3];
        for a in 0..3 {
            let r = wt * axes[a];
            let (lo, hi) = (r + 1.0, dims[a] as f64 - 2.0 - r);
            if lo > hi {
                return Err(input_err!("lesion ranges produce a lesion larger than volume {:?}", dims));
            }
            center[a] = u([lo, hi]);
        }
        Ok(LesionSpec { center, axes, wt_radius: wt, tc_radius: tc, et_radius: et })
    }
}

/// One phantom: a smooth brain-shaped ellipsoid with per-modality texture
/// and the lesion of `spec` painted with modality-specific contrasts.
pub fn synth_study<R: Rng + ?Sized>(rng: &mut R, id: &str, dims: [usize; 3], spec: &LesionSpec) -> Result<Study> {
    if dims.contains(&0) {
        return Err(input_err!("synthetic volume shape {:?} must be positive", dims));
    }
    spec.validate(dims)?;
    let n: usize = dims.iter().product();
    let centre: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    let brain_r: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * 0.47);
    let mut labels = vec![0u8; n];
    let mut brain = vec![false; n];
    for (i, (lab, inside)) in labels.iter_mut().zip(brain.iter_mut()).enumerate() {
        let p = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        *lab = spec.label_at(p);
        let r2: f64 = (0..3).map(|a| ((p[a] as f64 - centre[a]) / brain_r[a]).powi(2)).sum();
        *inside = r2 <= 1.0 || *lab != 0;
    }
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let modalities: [Volume<f32>; 4] = std::array::from_fn(|m| {
        // three low-frequency cosines give each sequence its own bias field
        let waves: Vec<([f64; 3], f64)> = (0..3)
            .map(|_| {
                let k = [0; 3].map(|_| rng.random_range(0.5..2.0) * std::f64::consts::PI);
                (k, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let data = (0..n)
            .map(|i| {
                if !brain[i] {
                    return 0.0;
                }
                let p = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
                let field: f64 = waves
                    .iter()
                    .map(|(k, ph)| (0..3).map(|a| k[a] * p[a] as f64 / dims[a] as f64).sum::<f64>() + ph)
                    .map(|arg| 0.05 * arg.cos())
                    .sum();
                let tissue = match labels[i] {
                    2 => 1,
                    1 => 2,
                    4 => 3,
                    _ => 0,
                };
                let v = BASE_LEVEL[m] * (CONTRAST[m][tissue] + field + 0.04 * noise.sample(rng));
                v.max(1.0) as f32
            })
            .collect();
        Volume { dims, data }
    });
    let label = LabelVolume::new(Volume::new(dims, labels)?)?;
    Study::new(id, modalities, [1.0; 3], Some(label))
}

/// All studies of a synthetic spec. Study `i` draws from its own stream
/// derived from `(seed, i)`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<Study>> {
    (0..spec.count)
        .map(|i| {
            let mut rng = study_rng(spec.seed, i);
            let lesion = LesionSpec::draw(&mut rng, spec.shape, &spec.lesion)?;
            synth_study(&mut rng, &format!("synth_{i:03}"), spec.shape, &lesion)
        })
        .collect()
}
