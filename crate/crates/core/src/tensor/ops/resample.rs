use crate::error::{config_err, Result};
use crate::tensor::{Backward, Scalar, Tape, Tensor, Var};

/// Align-corners linear interpolation table for one axis: for each output
/// index, the two source indices and the weight of the upper one.
fn axis_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

struct Interp<T> {
    src: [usize; 3],
    dst: [usize; 3],
    tables: [Vec<(usize, usize, T)>; 3],
}

impl<T: Scalar> Interp<T> {
    fn new(src: [usize; 3], dst: [usize; 3]) -> Self {
        let cast = |t: Vec<(usize, usize, f64)>| t.into_iter().map(|(a, b, f)| (a, b, T::of(f))).collect();
        Interp {
            src,
            dst,
            tables: [
                cast(axis_table(src[0], dst[0])),
                cast(axis_table(src[1], dst[1])),
                cast(axis_table(src[2], dst[2])),
            ],
        }
    }

    /// Visits every (output index, source index, weight) triple of one plane.
    fn for_each(&self, mut f: impl FnMut(usize, usize, T)) {
        let [_, sh, sw] = self.src;
        let [_, dh, dw] = self.dst;
        let one = T::one();
        for (oz, &(z0, z1, fz)) in self.tables[0].iter().enumerate() {
            for (oy, &(y0, y1, fy)) in self.tables[1].iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.tables[2].iter().enumerate() {
                    let o = (oz * dh + oy) * dw + ox;
                    for (zi, wz) in [(z0, one - fz), (z1, fz)] {
                        for (yi, wy) in [(y0, one - fy), (y1, fy)] {
                            for (xi, wx) in [(x0, one - fx), (x1, fx)] {
                                f(o, (zi * sh + yi) * sw + xi, wz * wy * wx);
                            }
                        }
                    }
                }
            }
        }
    }
}

struct UpsampleBackward<T> {
    interp: Interp<T>,
}

impl<T: Scalar> Backward<T> for UpsampleBackward<T> {
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        let sv: usize = self.interp.src.iter().product();
        let dv: usize = self.interp.dst.iter().product();
        let mut gx = vec![T::zero(); inputs[0].numel()];
        for (gplane, xplane) in grad.chunks(dv).zip(gx.chunks_mut(sv)) {
            self.interp.for_each(|o, s, w| xplane[s] = xplane[s] + w * gplane[o]);
        }
        vec![Some(gx)]
    }
}

struct GapBackward;

impl<T: Scalar> Backward<T> for GapBackward {
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0];
        let planes = grad.len();
        let vol = x.numel() / planes;
        let inv = T::one() / T::of(vol as f64);
        let mut gx = vec![T::zero(); x.numel()];
        for (plane, &g) in gx.chunks_mut(vol).zip(grad) {
            plane.fill(g * inv);
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Tape<T> {
    /// Trilinear resize of an N x C x D x H x W map to `target` extents using
    /// the align-corners convention.
    pub fn trilinear_upsample(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        if target.iter().any(|&t| t == 0) {
            return Err(config_err!("trilinear target extents must be >= 1, got {:?}", target));
        }
        if [d, h, w] == target {
            // identity resize still goes through the tape so callers get a fresh node
            let v = self.value(x).clone();
            return Ok(self.push_op(v, &[x], IdentityBackward));
        }
        let interp = Interp::<T>::new([d, h, w], target);
        let sv = d * h * w;
        let dv: usize = target.iter().product();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * dv];
        for (oplane, xplane) in out.chunks_mut(dv).zip(xs.chunks(sv)) {
            interp.for_each(|o, s, wgt| oplane[o] = oplane[o] + wgt * xplane[s]);
        }
        let value = Tensor::new(vec![n, c, target[0], target[1], target[2]], out)?;
        Ok(self.push_op(value, &[x], UpsampleBackward { interp }))
    }

    /// Mean over all spatial positions: N x C x D x H x W -> N x C x 1 x 1 x 1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let vol = d * h * w;
        if vol == 0 {
            return Err(config_err!("global average pool over an empty volume"));
        }
        let inv = 1.0 / vol as f64;
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(vol)
            .map(|p| T::of(p.iter().map(|v| v.f64()).sum::<f64>() * inv))
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1, 1], out)?;
        Ok(self.push_op(value, &[x], GapBackward))
    }
}

pub(crate) struct IdentityBackward;

impl<T: Scalar> Backward<T> for IdentityBackward {
    fn backward(&self, grad: &[T], _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_endpoints_are_exact() {
        let t = axis_table(2, 4);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[3], (1, 1, 0.0));
        assert!((t[1].2 - 1.0 / 3.0).abs() < 1e-15);
    }
}
