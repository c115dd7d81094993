use crate::error::{config_err, Result};
use crate::tensor::{Backward, Scalar, Tape, Tensor, Var};

/// Variance floor of instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-plane mean and inverse standard deviation, accumulated in f64.
fn plane_stats<T: Scalar>(plane: &[T]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = plane.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + INSTANCE_NORM_EPS).sqrt())
}

struct InstanceNormBackward {
    channels: usize,
}

impl<T: Scalar> Backward<T> for InstanceNormBackward {
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, gain) = (inputs[0].data(), inputs[1].data());
        let c = self.channels;
        let vol: usize = inputs[0].shape()[2..].iter().product();
        let planes = x.len() / vol;
        let mut gx = wants[0].then(|| vec![T::zero(); x.len()]);
        let mut ggain = vec![0.0f64; c];
        let mut gshift = vec![0.0f64; c];
        for p in 0..planes {
            let ch = p % c;
            let xs = &x[p * vol..(p + 1) * vol];
            let gs = &grad[p * vol..(p + 1) * vol];
            let (mean, inv) = plane_stats(xs);
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (&xv, &gv) in xs.iter().zip(gs) {
                let xhat = (xv.f64() - mean) * inv;
                let g = gv.f64();
                sum_g += g;
                sum_gx += g * xhat;
            }
            ggain[ch] += sum_gx;
            gshift[ch] += sum_g;
            if let Some(gx) = gx.as_mut() {
                let gm = gain[ch].f64();
                let n = vol as f64;
                // d/dx of gain * xhat, with sums of g*gain and g*gain*xhat
                let (sg, sgx) = (sum_g * gm, sum_gx * gm);
                for ((o, &xv), &gv) in gx[p * vol..(p + 1) * vol].iter_mut().zip(xs).zip(gs) {
                    let xhat = (xv.f64() - mean) * inv;
                    *o = T::of(inv / n * (n * gv.f64() * gm - sg - xhat * sgx));
                }
            }
        }
        vec![
            gx,
            wants[1].then(|| ggain.into_iter().map(T::of).collect()),
            wants[2].then(|| gshift.into_iter().map(T::of).collect()),
        ]
    }
}

impl<T: Scalar> Tape<T> {
    /// Normalizes each (sample, channel) plane to zero mean and unit variance
    /// over its spatial positions, then applies per-channel `gain` and `shift`.
    pub fn instance_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(config_err!(
                "instance norm affine shapes {:?}/{:?} do not match {} channels",
                self.shape(gain),
                self.shape(shift),
                c
            ));
        }
        let vol = d * h * w;
        let (xs, gs, ss) = (self.value(x).data(), self.value(gain).data(), self.value(shift).data());
        let mut out = Vec::with_capacity(n * c * vol);
        for (p, plane) in xs.chunks(vol).enumerate() {
            let (mean, inv) = plane_stats(plane);
            let (g, s) = (gs[p % c].f64(), ss[p % c].f64());
            out.extend(plane.iter().map(|v| T::of((v.f64() - mean) * inv * g + s)));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push_op(value, &[x, gain, shift], InstanceNormBackward { channels: c }))
    }
}
