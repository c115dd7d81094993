//! Dataset manifests: a JSON list of studies with one path per sequence.
//!
//! ```json
//! [{"id": "case_001",
//!   "modalities": {"t1": "case_001_t1.nii.gz", "t1ce": "...", "t2": "...", "flair": "..."},
//!   "label": "case_001_label.nii.gz"}]
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_label, read_nifti, synth_dataset, write_nifti, NiftiData, Study, SynthSpec, Volume, MODALITIES};
use crate::error::{config_err, input_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityPaths {
    pub t1: PathBuf,
    pub t1ce: PathBuf,
    pub t2: PathBuf,
    pub flair: PathBuf,
}

impl ModalityPaths {
    fn all(&self) -> [&PathBuf; 4] {
        [&self.t1, &self.t1ce, &self.t2, &self.flair]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub modalities: ModalityPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let entries: Vec<ManifestEntry> = serde_json::from_value(read_json(path)?)?;
    Ok(absolutize(path, entries))
}

fn absolutize(path: &Path, mut entries: Vec<ManifestEntry>) -> Vec<ManifestEntry> {
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut entries {
        let m = &mut e.modalities;
        for p in [&mut m.t1, &mut m.t1ce, &mut m.t2, &mut m.flair] {
            *p = resolve(base, p);
        }
        if let Some(l) = &mut e.label {
            *l = resolve(base, l);
        }
    }
    entries
}

pub fn load_study(entry: &ManifestEntry) -> Result<Study> {
    let mut vols: Vec<Volume<f32>> = Vec::with_capacity(4);
    let mut spacing = [1.0; 3];
    for (i, p) in entry.modalities.all().into_iter().enumerate() {
        let v = read_nifti(p)?;
        match vols.first() {
            None => spacing = v.spacing,
            Some(first) if first.dims != v.dims => {
                return Err(input_err!("study {}: {} has shape {:?}, t1 has {:?}", entry.id, MODALITIES[i], v.dims, first.dims));
            }
            Some(_) => {}
        }
        vols.push(v.to_f32());
    }
    let label = entry.label.as_ref().map(read_label).transpose()?;
    let modalities: [Volume<f32>; 4] = vols.try_into().expect("four modalities");
    Study::new(entry.id.clone(), modalities, spacing, label)
}

/// Writes every sequence (and the label, if any) as `.nii.gz` into `dir`.
pub fn write_study(dir: impl AsRef<Path>, study: &Study) -> Result<ManifestEntry> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = |suffix: &str| dir.join(format!("{}_{suffix}.nii.gz", study.id));
    let paths: Vec<PathBuf> = MODALITIES.iter().map(|m| file(m)).collect();
    for (p, v) in paths.iter().zip(&study.modalities) {
        write_nifti(p, NiftiData::F32(v), study.spacing)?;
    }
    let label = match &study.label {
        Some(l) => {
            let p = file("label");
            write_nifti(&p, NiftiData::U8(l.volume()), study.spacing)?;
            Some(p)
        }
        None => None,
    };
    let [t1, t1ce, t2, flair]: [PathBuf; 4] = paths.try_into().expect("four paths");
    Ok(ManifestEntry { id: study.id.clone(), modalities: ModalityPaths { t1, t1ce, t2, flair }, label })
}

/// Training data: either files listed in a manifest or a synthetic spec.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Manifest(Vec<ManifestEntry>),
    Synthetic(SynthSpec),
}

impl DataSource {
    pub fn studies(&self) -> Result<Vec<Study>> {
        match self {
            DataSource::Manifest(entries) => entries.iter().map(load_study).collect(),
            DataSource::Synthetic(spec) => synth_dataset(spec),
        }
    }
}

/// A JSON array is a manifest; an object with a `count` field is a
/// synthetic dataset spec.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DataSource> {
    let path = path.as_ref();
    let value = read_json(path)?;
    if value.is_array() {
        let entries: Vec<ManifestEntry> = serde_json::from_value(value)?;
        Ok(DataSource::Manifest(absolutize(path, entries)))
    } else if value.get("count").is_some() {
        Ok(DataSource::Synthetic(serde_json::from_value(value)?))
    } else {
        Err(config_err!("{}: neither a manifest (JSON list) nor a synthetic spec (object with `count`)", path.display()))
    }
}
