use rand::Rng;

use super::{Study, Volume};
use crate::error::{input_err, Result};

/// A training crop: four image channels and an optional label volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Vec<Volume<f32>>,
    pub label: Option<Volume<u8>>,
}

impl Patch {
    pub fn dims(&self) -> [usize; 3] {
        self.image[0].dims
    }

    /// Image channels as one C x D x H x W buffer.
    pub fn stacked(&self) -> Vec<f32> {
        self.image.iter().flat_map(|v| v.data.iter().copied()).collect()
    }
}

fn crop<T: Copy + Default>(v: &Volume<T>, corner: [usize; 3], size: [usize; 3]) -> Volume<T> {
    let mut out = Volume::filled(size, T::default());
    for d in 0..size[0] {
        let sd = corner[0] + d;
        if sd >= v.dims[0] {
            break;
        }
        for h in 0..size[1] {
            let sh = corner[1] + h;
            if sh >= v.dims[1] {
                break;
            }
            let w_end = size[2].min(v.dims[2].saturating_sub(corner[2]));
            let src = v.index(sd, sh, corner[2]);
            let dst = out.index(d, h, 0);
            out.data[dst..dst + w_end].copy_from_slice(&v.data[src..src + w_end]);
        }
    }
    out
}

/// Crops `size` voxels starting at `corner`; regions beyond the volume are
/// zero-padded.
pub fn crop_patch(study: &Study, corner: [usize; 3], size: [usize; 3]) -> Result<Patch> {
    if size.contains(&0) {
        return Err(input_err!("patch size {:?} must be positive", size));
    }
    let dims = study.dims();
    if (0..3).any(|a| corner[a] >= dims[a]) {
        return Err(input_err!("patch corner {:?} lies outside volume {:?}", corner, dims));
    }
    Ok(Patch {
        image: study.modalities.iter().map(|m| crop(m, corner, size)).collect(),
        label: study.label.as_ref().map(|l| crop(l.volume(), corner, size)),
    })
}

/// Uniformly placed crop; with probability `fg_prob` (and a labeled study
/// with foreground) the crop is forced to contain a random foreground voxel.
pub fn sample_patch<R: Rng + ?Sized>(study: &Study, size: [usize; 3], fg_prob: f64, rng: &mut R) -> Result<Patch> {
    let dims = study.dims();
    let span = |a: usize| dims[a].saturating_sub(size[a]);
    let forced = rng.random::<f64>() < fg_prob;
    let anchor = if forced {
        study.label.as_ref().and_then(|l| {
            let fg: Vec<usize> = l.data().iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect();
            (!fg.is_empty()).then(|| fg[rng.random_range(0..fg.len())])
        })
    } else {
        None
    };
    let corner: [usize; 3] = match anchor {
        Some(i) => {
            let pos = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
            std::array::from_fn(|a| {
                let lo = (pos[a] + 1).saturating_sub(size[a]);
                let hi = pos[a].min(span(a));
                rng.random_range(lo..=hi)
            })
        }
        None => std::array::from_fn(|a| rng.random_range(0..=span(a))),
    };
    crop_patch(study, corner, size)
}
