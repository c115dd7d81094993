use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Patch, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Probability of flipping along each axis, drawn independently.
    pub flip_prob: f64,
    /// Rotation angles are uniform in `[-rotate_deg, rotate_deg]` for each plane.
    pub rotate_deg: f64,
    /// Per-channel additive shift range `[-shift, shift]`.
    pub shift: f64,
    /// Per-channel multiplicative range.
    pub scale: [f64; 2],
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { flip_prob: 0.5, rotate_deg: 10.0, shift: 0.1, scale: [0.9, 1.1] }
    }
}

impl AugmentParams {
    /// No augmentation at all.
    pub fn none() -> Self {
        AugmentParams { flip_prob: 0.0, rotate_deg: 0.0, shift: 0.0, scale: [1.0, 1.0] }
    }
}

fn flip<T: Copy>(v: &mut Volume<T>, axis: usize) {
    let [d, h, w] = v.dims;
    let src = v.data.clone();
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                let (si, sj, sk) = match axis {
                    0 => (d - 1 - i, j, k),
                    1 => (i, h - 1 - j, k),
                    _ => (i, j, w - 1 - k),
                };
                v.data[(i * h + j) * w + k] = src[(si * h + sj) * w + sk];
            }
        }
    }
}

/// Mirrors images and label along `axis` (0 = D, 1 = H, 2 = W).
pub fn flip_axis(p: &mut Patch, axis: usize) {
    for v in &mut p.image {
        flip(v, axis);
    }
    if let Some(l) = &mut p.label {
        flip(l, axis);
    }
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Rotation in the plane orthogonal to `axis`.
fn plane_rotation(axis: usize, deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = 1.0;
    m[a][a] = c;
    m[a][b] = -s;
    m[b][a] = s;
    m[b][b] = c;
    m
}

fn sample_linear(v: &Volume<f32>, p: [f64; 3]) -> f32 {
    let f = p.map(f64::floor);
    let t: [f64; 3] = std::array::from_fn(|a| p[a] - f[a]);
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let off = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
        let mut wgt = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let c = f[a] as i64 + off[a] as i64;
            wgt *= if off[a] == 1 { t[a] } else { 1.0 - t[a] };
            if c < 0 || c >= v.dims[a] as i64 {
                inside = false;
            } else {
                idx[a] = c as usize;
            }
        }
        if inside && wgt != 0.0 {
            acc += wgt * v.get(idx[0], idx[1], idx[2]) as f64;
        }
    }
    acc as f32
}

fn sample_nearest(v: &Volume<u8>, p: [f64; 3]) -> u8 {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let c = p[a].round();
        if c < 0.0 || c >= v.dims[a] as f64 {
            return 0;
        }
        idx[a] = c as usize;
    }
    v.get(idx[0], idx[1], idx[2])
}

/// Rotates about the patch centre by `deg[a]` degrees in the plane
/// orthogonal to axis `a`, applied as one composed resampling. Images are
/// trilinear, labels nearest-neighbour, outside samples are zero.
pub fn rotate(p: &Patch, deg: [f64; 3]) -> Patch {
    if deg == [0.0; 3] {
        return p.clone();
    }
    let r = matmul(&matmul(&plane_rotation(0, deg[0]), &plane_rotation(1, deg[1])), &plane_rotation(2, deg[2]));
    let dims = p.dims();
    let centre: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    // output voxel q samples the source at c + R^T (q - c)
    let source = |q: [usize; 3]| -> [f64; 3] {
        let d: [f64; 3] = std::array::from_fn(|a| q[a] as f64 - centre[a]);
        std::array::from_fn(|a| centre[a] + (0..3).map(|k| r[k][a] * d[k]).sum::<f64>())
    };
    let n = dims.iter().product::<usize>();
    let coords: Vec<[f64; 3]> = (0..n).map(|i| source([i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]])).collect();
    Patch {
        image: p.image.iter().map(|v| Volume { dims, data: coords.iter().map(|&c| sample_linear(v, c)).collect() }).collect(),
        label: p.label.as_ref().map(|l| Volume { dims, data: coords.iter().map(|&c| sample_nearest(l, c)).collect() }),
    }
}

/// Random rotation, flips and per-channel intensity scale and shift.
pub fn augment<R: Rng + ?Sized>(p: &Patch, params: &AugmentParams, rng: &mut R) -> Patch {
    let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let deg = [0; 3].map(|_| uniform(-params.rotate_deg, params.rotate_deg));
    let mut out = rotate(p, deg);
    for axis in 0..3 {
        if rng.random::<f64>() < params.flip_prob {
            flip_axis(&mut out, axis);
        }
    }
    for v in &mut out.image {
        let scale = if params.scale[1] > params.scale[0] { rng.random_range(params.scale[0]..=params.scale[1]) } else { params.scale[0] };
        let shift = if params.shift > 0.0 { rng.random_range(-params.shift..=params.shift) } else { 0.0 };
        if scale != 1.0 || shift != 0.0 {
            for x in &mut v.data {
                *x = (*x as f64 * scale + shift) as f32;
            }
        }
    }
    out
}
