use std::path::Path;

use super::{make_patch_grid, postprocess, regions_to_labels, InferConfig, RunConfig};
use crate::data::{LabelVolume, Study, Volume};
use crate::error::{config_err, contract_err, Result};
use crate::network::{Network, NetworkConfig};
use crate::tensor::{load_checkpoint, sigmoid, Checkpoint, ParamStore, Tensor};

/// Anything that maps an `N x C x D x H x W` input to region probabilities
/// `N x 3 x D x H x W`. The network is one implementation; tests plug in
/// analytic stubs.
pub trait Predictor {
    fn in_channels(&self) -> usize;
    fn probabilities(&self, input: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A trained network in inference mode.
pub struct NetPredictor {
    pub network: Network,
    pub params: ParamStore<f32>,
}

impl NetPredictor {
    pub fn new(network: Network, params: ParamStore<f32>) -> Self {
        NetPredictor { network, params }
    }

    /// Loads a checkpoint written by training. Also returns the inference
    /// settings stored with it, if any.
    pub fn load(path: &Path) -> Result<(Self, Option<InferConfig>)> {
        let ckpt = load_checkpoint(path)?;
        let (network, params, infer) = model_from_checkpoint(&ckpt)?;
        Ok((NetPredictor::new(network, params), infer))
    }
}

/// Rebuilds a network from a checkpoint whose config is either a bare
/// network config or a full run config.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Network, ParamStore<f32>, Option<InferConfig>)> {
    let (net_cfg, infer) = match ckpt.config.get("network") {
        Some(_) => {
            let run: RunConfig = serde_json::from_value(ckpt.config.clone())?;
            (run.network, Some(run.infer))
        }
        None => (serde_json::from_value::<NetworkConfig>(ckpt.config.clone())?, None),
    };
    let (network, mut params) = Network::build::<f32>(&net_cfg)?;
    ckpt.apply_to(&mut params)?;
    Ok((network, params, infer))
}

impl Predictor for NetPredictor {
    fn in_channels(&self) -> usize {
        self.network.config.in_channels
    }

    fn probabilities(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let logits = self.network.predict(&self.params, input)?;
        let shape = logits.shape().to_vec();
        Tensor::new(shape, logits.data().iter().map(|&v| sigmoid(v)).collect())
    }
}

/// Mean of the members' probabilities.
pub struct Ensemble {
    pub members: Vec<Box<dyn Predictor>>,
}

impl Predictor for Ensemble {
    fn in_channels(&self) -> usize {
        self.members.first().map_or(0, |m| m.in_channels())
    }

    fn probabilities(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let Some(first) = self.members.first() else {
            return Err(config_err!("an ensemble needs at least one member"));
        };
        let p0 = first.probabilities(input)?;
        let mut acc: Vec<f64> = p0.data().iter().map(|&v| f64::from(v)).collect();
        for m in &self.members[1..] {
            let p = m.probabilities(input)?;
            if p.shape() != p0.shape() {
                return Err(contract_err!("ensemble members disagree on output shape"));
            }
            acc.iter_mut().zip(p.data()).for_each(|(a, &v)| *a += f64::from(v));
        }
        let k = self.members.len() as f64;
        Tensor::new(p0.shape().to_vec(), acc.into_iter().map(|v| (v / k) as f32).collect())
    }
}

/// Reverses the spatial axes selected by the bits of `mask` (bit 0 = D,
/// bit 1 = H, bit 2 = W) of a `C x D x H x W` buffer.
pub fn flip_views<T: Copy>(data: &[T], dims: [usize; 3], mask: u8) -> Vec<T> {
    let [d, h, w] = dims;
    let vol = d * h * w;
    let mut out = Vec::with_capacity(data.len());
    for ch in data.chunks(vol) {
        for i in 0..d {
            let si = if mask & 1 != 0 { d - 1 - i } else { i };
            for j in 0..h {
                let sj = if mask & 2 != 0 { h - 1 - j } else { j };
                let row = (si * h + sj) * w;
                if mask & 4 != 0 {
                    out.extend(ch[row..row + w].iter().rev());
                } else {
                    out.extend_from_slice(&ch[row..row + w]);
                }
            }
        }
    }
    out
}

fn window<T: Copy + Default>(src: &[T], ch: usize, dims: [usize; 3], corner: [usize; 3], size: [usize; 3]) -> Vec<T> {
    let vol = dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(ch * size.iter().product::<usize>());
    for c in 0..ch {
        for d in corner[0]..corner[0] + size[0] {
            for h in corner[1]..corner[1] + size[1] {
                let row = c * vol + (d * dims[1] + h) * dims[2] + corner[2];
                out.extend_from_slice(&src[row..row + size[2]]);
            }
        }
    }
    out
}

/// Probability of each region on one window, averaged over the flip views.
fn window_probabilities(pred: &dyn Predictor, input: Vec<f32>, size: [usize; 3], tta: bool) -> Result<Vec<f64>> {
    let channels = input.len() / size.iter().product::<usize>();
    let views: &[u8] = if tta { &[0, 1, 2, 3, 4, 5, 6, 7] } else { &[0] };
    let mut acc: Option<Vec<f64>> = None;
    for &mask in views {
        let x = if mask == 0 { input.clone() } else { flip_views(&input, size, mask) };
        let x = Tensor::new(vec![1, channels, size[0], size[1], size[2]], x)?;
        let p = pred.probabilities(&x)?;
        let want = [1, 3, size[0], size[1], size[2]];
        if p.shape() != want {
            return Err(contract_err!("predictor returned shape {:?}, expected {:?}", p.shape(), want));
        }
        let p = if mask == 0 { p.into_vec() } else { flip_views(p.data(), size, mask) };
        match acc.as_mut() {
            None => acc = Some(p.into_iter().map(f64::from).collect()),
            Some(a) => a.iter_mut().zip(p).for_each(|(a, v)| *a += f64::from(v)),
        }
    }
    let mut acc = acc.expect("at least one view");
    let k = views.len() as f64;
    acc.iter_mut().for_each(|v| *v /= k);
    Ok(acc)
}

/// Sliding-window region probabilities (`3 x crop`, channel-major) of a
/// `C x crop` input. Overlapping windows are averaged uniformly; the crop
/// is zero-padded where it is smaller than the window.
pub fn sliding_window(pred: &dyn Predictor, input: &[f32], crop: [usize; 3], cfg: &InferConfig) -> Result<Vec<f64>> {
    let grid = make_patch_grid(crop, cfg.patch, cfg.stride)?;
    let vol: usize = crop.iter().product();
    if vol == 0 || input.len() % vol != 0 {
        return Err(contract_err!("input of {} values does not tile a {:?} crop", input.len(), crop));
    }
    let channels = input.len() / vol;
    let padded = grid.padded;
    let pvol: usize = padded.iter().product();
    let src = if padded == crop {
        input.to_vec()
    } else {
        let mut buf = vec![0.0f32; channels * pvol];
        for c in 0..channels {
            for d in 0..crop[0] {
                for h in 0..crop[1] {
                    let s = c * vol + (d * crop[1] + h) * crop[2];
                    let t = c * pvol + (d * padded[1] + h) * padded[2];
                    buf[t..t + crop[2]].copy_from_slice(&input[s..s + crop[2]]);
                }
            }
        }
        buf
    };
    let mut sum = vec![0.0f64; 3 * pvol];
    let mut count = vec![0u32; pvol];
    let p = grid.patch;
    for corner in grid.corners() {
        let x = window(&src, channels, padded, corner, p);
        let probs = window_probabilities(pred, x, p, cfg.tta_enabled)?;
        let mut k = 0;
        for c in 0..3 {
            for d in corner[0]..corner[0] + p[0] {
                for h in corner[1]..corner[1] + p[1] {
                    let row = (d * padded[1] + h) * padded[2] + corner[2];
                    for w in 0..p[2] {
                        sum[c * pvol + row + w] += probs[k];
                        if c == 0 {
                            count[row + w] += 1;
                        }
                        k += 1;
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(3 * vol);
    for c in 0..3 {
        for d in 0..crop[0] {
            for h in 0..crop[1] {
                let row = (d * padded[1] + h) * padded[2];
                for w in 0..crop[2] {
                    out.push(sum[c * pvol + row + w] / f64::from(count[row + w]));
                }
            }
        }
    }
    Ok(out)
}

/// Extents and corner of the centered crop, clamped to the volume.
pub fn center_crop(dims: [usize; 3], crop: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let size: [usize; 3] = std::array::from_fn(|a| crop[a].min(dims[a]));
    let corner = std::array::from_fn(|a| (dims[a] - size[a]) / 2);
    (size, corner)
}

/// Full inference on a preprocessed study: center crop, sliding window
/// with optional flip averaging, label reconstruction, small-ET
/// relabeling, and paste-back into a zero canvas of the study's shape.
pub fn infer_study(pred: &dyn Predictor, study: &Study, cfg: &InferConfig) -> Result<LabelVolume> {
    cfg.validate()?;
    if pred.in_channels() != study.modalities.len() {
        return Err(config_err!(
            "model expects {} input channels but studies provide {}",
            pred.in_channels(),
            study.modalities.len()
        ));
    }
    let dims = study.dims();
    let (size, corner) = center_crop(dims, cfg.center_crop);
    let input: Vec<f32> =
        study.modalities.iter().flat_map(|m| window(&m.data, 1, dims, corner, size)).collect();
    let probs = sliding_window(pred, &input, size, cfg)?;
    let labels = regions_to_labels(&probs, cfg.threshold)?;
    let labels = postprocess(&LabelVolume::new(Volume::new(size, labels)?)?, cfg.et_threshold);
    let mut canvas = vec![0u8; dims.iter().product()];
    let src = labels.data();
    for d in 0..size[0] {
        for h in 0..size[1] {
            let s = (d * size[1] + h) * size[2];
            let t = ((d + corner[0]) * dims[1] + h + corner[1]) * dims[2] + corner[2];
            canvas[t..t + size[2]].copy_from_slice(&src[s..s + size[2]]);
        }
    }
    LabelVolume::new(Volume::new(dims, canvas)?)
}
