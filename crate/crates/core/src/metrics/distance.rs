//! Exact Euclidean distance transform and surface distances.

use crate::data::percentile;
use crate::error::{input_err, Result};
use crate::par;

/// HD95 reported when exactly one of the two masks is empty.
pub const HD95_ONE_EMPTY: f64 = 373.1288;

/// Boundary voxels under 6-connectivity: set voxels with an unset face
/// neighbour or lying on the volume border.
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = dims;
    let at = |i: usize, j: usize, k: usize| mask[(i * h + j) * w + k];
    let mut out = Vec::new();
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                if !at(i, j, k) {
                    continue;
                }
                let border = i == 0 || j == 0 || k == 0 || i + 1 == d || j + 1 == h || k + 1 == w;
                if border
                    || !at(i - 1, j, k)
                    || !at(i + 1, j, k)
                    || !at(i, j - 1, k)
                    || !at(i, j + 1, k)
                    || !at(i, j, k - 1)
                    || !at(i, j, k + 1)
                {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Lower envelope of parabolas `f[q] + (step * (p - q))^2` along one line
/// (Felzenszwalb and Huttenlocher). Infinite entries are skipped.
fn envelope_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let s2 = step * step;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        let fq = f[q] + s2 * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + s2 * (p * p) as f64;
                    let s = (fq - fp) / (2.0 * s2 * (q - p) as f64);
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    v.push(q);
                    z.push(s);
                    break;
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let dq = step * (p as f64 - v[k] as f64);
        *o = f[v[k]] + dq * dq;
    }
}

/// Squared Euclidean distance (in physical units) from every voxel to the
/// nearest feature voxel; infinite everywhere when there is no feature.
pub fn squared_edt(feature: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> = feature.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    // along W: contiguous lines
    par::for_each_chunk_mut(&mut g, w.max(1), |_, line| {
        let f = line.to_vec();
        envelope_1d(&f, spacing[2], line);
    });
    // along H: lines inside each D-plane
    par::for_each_chunk_mut(&mut g, (h * w).max(1), |_, plane| {
        let mut f = vec![0.0; h];
        let mut o = vec![0.0; h];
        for k in 0..w {
            for j in 0..h {
                f[j] = plane[j * w + k];
            }
            envelope_1d(&f, spacing[1], &mut o);
            for j in 0..h {
                plane[j * w + k] = o[j];
            }
        }
    });
    // along D: gather per (h, w) line, merged in index order
    let hw = h * w;
    let src = &g;
    let lines = par::map_indexed(hw, |l| {
        let f: Vec<f64> = (0..d).map(|i| src[i * hw + l]).collect();
        let mut o = vec![0.0; d];
        envelope_1d(&f, spacing[0], &mut o);
        o
    });
    let mut out = vec![0.0; g.len()];
    for (l, o) in lines.into_iter().enumerate() {
        for (i, v) in o.into_iter().enumerate() {
            out[i * hw + l] = v;
        }
    }
    out
}

/// Distances from each surface voxel of `from` to the surface of `to`.
pub fn directed_surface_distances(
    from: &[bool],
    to: &[bool],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut target = vec![false; n];
    for p in surface(to, dims) {
        target[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = true;
    }
    let edt = squared_edt(&target, dims, spacing);
    surface(from, dims).into_iter().map(|p| edt[(p[0] * dims[1] + p[1]) * dims[2] + p[2]].sqrt()).collect()
}

/// 95th-percentile Hausdorff distance: the larger of the two directed 95th
/// percentiles of surface-to-surface distances. Both masks empty gives 0,
/// exactly one empty gives [`HD95_ONE_EMPTY`].
pub fn hd95(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(input_err!("hd95: masks of {} and {} voxels for shape {:?}", a.len(), b.len(), dims));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(input_err!("hd95: spacing must be positive, got {:?}", spacing));
    }
    match (a.iter().any(|&v| v), b.iter().any(|&v| v)) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(HD95_ONE_EMPTY),
        _ => {}
    }
    let ab = percentile(&directed_surface_distances(a, b, dims, spacing), 95.0)?;
    let ba = percentile(&directed_surface_distances(b, a, dims, spacing), 95.0)?;
    Ok(ab.max(ba))
}
