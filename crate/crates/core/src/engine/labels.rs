use crate::data::{LabelVolume, Volume};
use crate::error::{contract_err, Result};

/// Region channel order of network outputs and training targets.
pub const REGIONS: [&str; 3] = ["wt", "tc", "et"];

/// Binary WT/TC/ET targets (3 x voxels, channel-major) from labels.
pub fn region_targets(labels: &[u8]) -> Vec<f32> {
    let n = labels.len();
    let mut out = vec![0.0f32; 3 * n];
    for (i, &l) in labels.iter().enumerate() {
        out[i] = f32::from(matches!(l, 1 | 2 | 4));
        out[n + i] = f32::from(matches!(l, 1 | 4));
        out[2 * n + i] = f32::from(l == 4);
    }
    out
}

/// Labels from WT/TC/ET probabilities (3 x voxels). Probabilities are made
/// nested first (`p_tc <= p_wt`, `p_et <= p_tc`), then each region is
/// thresholded: ET -> 4, TC -> 1, WT -> 2, else 0.
pub fn regions_to_labels(probs: &[f64], threshold: f64) -> Result<Vec<u8>> {
    if probs.len() % 3 != 0 {
        return Err(contract_err!("region probabilities must hold 3 channels, got {} values", probs.len()));
    }
    let n = probs.len() / 3;
    Ok((0..n)
        .map(|i| {
            let wt = probs[i];
            let tc = probs[n + i].min(wt);
            let et = probs[2 * n + i].min(tc);
            if et > threshold {
                4
            } else if tc > threshold {
                1
            } else if wt > threshold {
                2
            } else {
                0
            }
        })
        .collect())
}

/// Relabels every ET voxel as core when fewer than `et_threshold` exist.
pub fn postprocess(labels: &LabelVolume, et_threshold: usize) -> LabelVolume {
    let et = labels.data().iter().filter(|&&v| v == 4).count();
    if et >= et_threshold || et == 0 {
        return labels.clone();
    }
    let v = labels.volume();
    let data = v.data.iter().map(|&l| if l == 4 { 1 } else { l }).collect();
    LabelVolume::new(Volume { dims: v.dims, data }).expect("relabeling keeps values valid")
}
