//! Evaluation: region masks, Dice, HD95 and per-cohort reports.

mod distance;

use std::fmt::Write as _;
use std::path::Path;

pub use distance::{directed_surface_distances, hd95, squared_edt, surface, HD95_ONE_EMPTY};

use crate::data::{read_nifti, LabelVolume, ManifestEntry, LABEL_VALUES};
use crate::error::{input_err, Error, Result};

/// Nested evaluation regions of one label volume.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub dims: [usize; 3],
    /// Labels 1, 2 and 4.
    pub wt: Vec<bool>,
    /// Labels 1 and 4.
    pub tc: Vec<bool>,
    /// Label 4.
    pub et: Vec<bool>,
}

/// Region masks of raw label values; values outside {0, 1, 2, 4} are rejected.
pub fn regions_from_values(dims: [usize; 3], labels: &[u8]) -> Result<RegionMasks> {
    if labels.len() != dims.iter().product::<usize>() {
        return Err(input_err!("{} labels do not fill shape {:?}", labels.len(), dims));
    }
    if let Some((index, &v)) = labels.iter().enumerate().find(|(_, v)| !LABEL_VALUES.contains(v)) {
        return Err(Error::InvalidLabel { value: i64::from(v), index });
    }
    Ok(RegionMasks {
        dims,
        wt: labels.iter().map(|&l| l != 0).collect(),
        tc: labels.iter().map(|&l| l == 1 || l == 4).collect(),
        et: labels.iter().map(|&l| l == 4).collect(),
    })
}

pub fn regions_from_labels(labels: &LabelVolume) -> RegionMasks {
    regions_from_values(labels.dims(), labels.data()).expect("label volumes hold valid values")
}

/// `2 |a & b| / (|a| + |b|)`; 1 when both masks are empty.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(input_err!("dice: masks of {} and {} voxels", a.len(), b.len()));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        total += usize::from(x) + usize::from(y);
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Report column order.
pub const REPORT_COLUMNS: [&str; 6] = ["dice_et", "dice_tc", "dice_wt", "hd95_et", "hd95_tc", "hd95_wt"];

#[derive(Clone, Debug, PartialEq)]
pub struct CaseScores {
    pub id: String,
    /// Values in [`REPORT_COLUMNS`] order.
    pub values: [f64; 6],
}

/// Scores of a prediction against its reference.
pub fn score_case(id: &str, pred: &LabelVolume, gt: &LabelVolume, spacing: [f64; 3]) -> Result<CaseScores> {
    if pred.dims() != gt.dims() {
        return Err(input_err!("case `{}`: prediction {:?} and reference {:?} differ in shape", id, pred.dims(), gt.dims()));
    }
    let (p, g) = (regions_from_labels(pred), regions_from_labels(gt));
    let dims = p.dims;
    let pairs = [(&p.et, &g.et), (&p.tc, &g.tc), (&p.wt, &g.wt)];
    let mut values = [0.0; 6];
    for (r, (a, b)) in pairs.iter().enumerate() {
        values[r] = dice(a, b)?;
        values[3 + r] = hd95(a, b, dims, spacing)?;
    }
    Ok(CaseScores { id: id.to_string(), values })
}

/// Mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(input_err!("median of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<CaseScores>,
    pub mean: [f64; 6],
    pub median: [f64; 6],
}

pub fn aggregate(rows: Vec<CaseScores>) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(input_err!("cannot aggregate an empty cohort"));
    }
    let mut mean = [0.0; 6];
    let mut med = [0.0; 6];
    for c in 0..6 {
        let col: Vec<f64> = rows.iter().map(|r| r.values[c]).collect();
        mean[c] = col.iter().sum::<f64>() / col.len() as f64;
        med[c] = median(&col)?;
    }
    Ok(EvalReport { rows, mean, median: med })
}

impl EvalReport {
    /// CSV with six decimals, followed by `mean` and `median` rows.
    pub fn to_csv(&self) -> String {
        let mut s = format!("id,{}\n", REPORT_COLUMNS.join(","));
        let mut line = |id: &str, v: &[f64; 6]| {
            let _ = write!(s, "{id}");
            for x in v {
                let _ = write!(s, ",{x:.6}");
            }
            s.push('\n');
        };
        for r in &self.rows {
            line(&r.id, &r.values);
        }
        line("mean", &self.mean);
        line("median", &self.median);
        s
    }
}

/// File name of a predicted segmentation.
pub fn prediction_name(id: &str) -> String {
    format!("{id}_seg.nii.gz")
}

/// Scores every manifest entry against `<pred_dir>/<id>_seg.nii.gz`, using
/// the reference's voxel spacing.
pub fn evaluate_predictions(pred_dir: &Path, entries: &[ManifestEntry]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let gt_path = e.label.as_ref().ok_or_else(|| input_err!("manifest entry `{}` has no label", e.id))?;
        let gt = read_nifti(gt_path)?;
        let spacing = gt.spacing.map(f64::from);
        let gt = LabelVolume::from_values(gt.dims, &gt.data)?;
        let pred = read_nifti(pred_dir.join(prediction_name(&e.id)))?;
        let pred = LabelVolume::from_values(pred.dims, &pred.data)?;
        rows.push(score_case(&e.id, &pred, &gt, spacing)?);
    }
    aggregate(rows)
}
