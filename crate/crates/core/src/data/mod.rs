//! Volumes, studies and everything between files on disk and network patches.

mod augment;
mod manifest;
mod nifti;
mod patch;
mod preprocess;
mod synth;

pub use augment::{augment, flip_axis, rotate, AugmentParams};
pub use manifest::{load_dataset, load_manifest, load_study, write_study, DataSource, ManifestEntry};
pub use nifti::{read_label, read_nifti, write_nifti, NiftiData, NiftiDtype, NiftiVolume};
pub use patch::{crop_patch, sample_patch, Patch};
pub use preprocess::{percentile, preprocess, PreprocessParams, STD_FLOOR};
pub use synth::{synth_dataset, synth_study, LesionRanges, LesionSpec, SynthSpec};

use crate::error::{input_err, Error, Result};

/// Sequence names in channel order.
pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

/// Label values present in annotations.
pub const LABEL_VALUES: [u8; 4] = [0, 1, 2, 4];

/// A dense 3-d array in `[D, H, W]` order, `W` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Copy + Default> Volume<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(input_err!("volume {:?} needs {} values, got {}", dims, dims.iter().product::<usize>(), data.len()));
        }
        Ok(Volume { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Volume { dims, data: vec![value; dims.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> T {
        self.data[self.index(d, h, w)]
    }
}

/// Annotation volume restricted to [`LABEL_VALUES`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume(Volume<u8>);

impl LabelVolume {
    pub fn new(vol: Volume<u8>) -> Result<Self> {
        if let Some((index, &v)) = vol.data.iter().enumerate().find(|(_, v)| !LABEL_VALUES.contains(v)) {
            return Err(Error::InvalidLabel { value: v as i64, index });
        }
        Ok(LabelVolume(vol))
    }

    /// Validates raw values before narrowing to `u8`.
    pub fn from_values(dims: [usize; 3], values: &[f64]) -> Result<Self> {
        let mut out = Vec::with_capacity(values.len());
        for (index, &v) in values.iter().enumerate() {
            if v.fract() != 0.0 || !LABEL_VALUES.iter().any(|&l| l as f64 == v) {
                return Err(Error::InvalidLabel { value: v as i64, index });
            }
            out.push(v as u8);
        }
        LabelVolume::new(Volume::new(dims, out)?)
    }

    pub fn volume(&self) -> &Volume<u8> {
        &self.0
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.0.data
    }

    pub fn into_volume(self) -> Volume<u8> {
        self.0
    }
}

/// One subject: four co-registered sequences and an optional annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub id: String,
    /// T1, T1ce, T2, Flair.
    pub modalities: [Volume<f32>; 4],
    /// Millimetres per axis.
    pub spacing: [f32; 3],
    pub label: Option<LabelVolume>,
}

impl Study {
    pub fn new(id: impl Into<String>, modalities: [Volume<f32>; 4], spacing: [f32; 3], label: Option<LabelVolume>) -> Result<Self> {
        let id = id.into();
        let dims = modalities[0].dims;
        for (m, v) in MODALITIES.iter().zip(&modalities) {
            if v.dims != dims {
                return Err(input_err!("study {}: modality {} has shape {:?}, expected {:?}", id, m, v.dims, dims));
            }
        }
        if let Some(l) = &label {
            if l.dims() != dims {
                return Err(input_err!("study {}: label shape {:?} differs from image shape {:?}", id, l.dims(), dims));
            }
        }
        Ok(Study { id, modalities, spacing, label })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.modalities[0].dims
    }

    /// The four modalities stacked as a 1 x 4 x D x H x W buffer.
    pub fn stacked(&self) -> Vec<f32> {
        self.modalities.iter().flat_map(|m| m.data.iter().copied()).collect()
    }
}
