use crate::error::{config_err, Result};

/// Sliding-window layout over a crop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    /// Crop extents before padding.
    pub crop: [usize; 3],
    /// Extents actually tiled: the crop, padded up to the patch where smaller.
    pub padded: [usize; 3],
    pub patch: [usize; 3],
    /// Window start coordinates per axis.
    pub starts: [Vec<usize>; 3],
}

/// Starts `0, s, 2s, ...` that fit, plus `extent - patch` if the last
/// window does not already end at the border.
pub fn axis_starts(extent: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || patch == 0 {
        return Err(config_err!("patch ({}) and stride ({}) must be positive", patch, stride));
    }
    if patch > extent {
        return Err(config_err!("patch {} exceeds extent {}", patch, extent));
    }
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|s| s + patch <= extent).collect();
    if v.last().map_or(true, |&s| s + patch < extent) {
        v.push(extent - patch);
    }
    Ok(v)
}

pub fn make_patch_grid(crop: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Result<PatchGrid> {
    let padded: [usize; 3] = std::array::from_fn(|a| crop[a].max(patch[a]));
    let starts = [
        axis_starts(padded[0], patch[0], stride[0])?,
        axis_starts(padded[1], patch[1], stride[1])?,
        axis_starts(padded[2], patch[2], stride[2])?,
    ];
    Ok(PatchGrid { crop, padded, patch, starts })
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.starts.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Window corners in fixed D-major order.
    pub fn corners(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.len());
        for &d in &self.starts[0] {
            for &h in &self.starts[1] {
                for &w in &self.starts[2] {
                    out.push([d, h, w]);
                }
            }
        }
        out
    }

    /// Number of windows covering each padded voxel.
    pub fn coverage(&self) -> Vec<u32> {
        let [_, ph, pw] = self.padded;
        let mut count = vec![0u32; self.padded.iter().product()];
        for c in self.corners() {
            for d in c[0]..c[0] + self.patch[0] {
                for h in c[1]..c[1] + self.patch[1] {
                    let row = (d * ph + h) * pw;
                    count[row + c[2]..row + c[2] + self.patch[2]].iter_mut().for_each(|n| *n += 1);
                }
            }
        }
        count
    }
}
