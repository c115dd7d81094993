use serde::{Deserialize, Serialize};

use super::{Study, Volume, MODALITIES};
use crate::error::{config_err, input_err, Error, Result};

/// Lower bound on the standard deviation used for z-scoring.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessParams {
    pub clip_low_pct: f64,
    pub clip_high_pct: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams { clip_low_pct: 0.5, clip_high_pct: 99.5 }
    }
}

impl PreprocessParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.clip_low_pct, self.clip_high_pct);
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(config_err!("clip percentiles must satisfy 0 <= low < high <= 100, got {} and {}", lo, hi));
        }
        Ok(())
    }
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Linear interpolation between the closest ranks: the value at fractional
/// rank `p / 100 * (n - 1)` of the sorted input.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(input_err!("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(input_err!("percentile {} outside [0, 100]", p));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(input_err!("percentile input contains NaN"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

/// Per modality: clip brain (nonzero) voxels to the configured percentile
/// window of brain voxels, then z-score them. Background stays zero.
pub fn preprocess(study: &Study, params: &PreprocessParams) -> Result<Study> {
    params.validate()?;
    let mut out = study.clone();
    for (m, vol) in out.modalities.iter_mut().enumerate() {
        *vol = normalize(vol, params).map_err(|detail| Error::Preprocess { modality: MODALITIES[m].to_string(), detail })?;
    }
    Ok(out)
}

fn normalize(vol: &Volume<f32>, params: &PreprocessParams) -> std::result::Result<Volume<f32>, String> {
    if let Some(v) = vol.data.iter().find(|v| !v.is_finite()) {
        return Err(format!("non-finite intensity {v}"));
    }
    let mut brain: Vec<f64> = vol.data.iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
    if brain.is_empty() {
        return Err("no nonzero (brain) voxels".into());
    }
    brain.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&brain, params.clip_low_pct);
    let hi = percentile_sorted(&brain, params.clip_high_pct);
    let n = brain.len() as f64;
    let clipped = |v: f64| v.clamp(lo, hi);
    let mean = brain.iter().map(|&v| clipped(v)).sum::<f64>() / n;
    let var = brain.iter().map(|&v| (clipped(v) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    let data = vol
        .data
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { ((clipped(v as f64) - mean) / std) as f32 })
        .collect();
    Ok(Volume { dims: vol.dims, data })
}
