use super::resample::IdentityBackward;
use crate::error::{config_err, Result};
use crate::tensor::{Backward, Scalar, Tape, Tensor, Var};

struct ConcatBackward {
    outer: usize,
    widths: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatBackward {
    fn backward(&self, grad: &[T], _: &[&Tensor<T>], _: &Tensor<T>, wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        self.widths
            .iter()
            .zip(wants)
            .map(|(&w, &want)| {
                let start = offset;
                offset += w;
                want.then(|| {
                    let mut g = Vec::with_capacity(self.outer * w);
                    for o in 0..self.outer {
                        g.extend_from_slice(&grad[o * total + start..o * total + start + w]);
                    }
                    g
                })
            })
            .collect()
    }
}

struct SumBackward {
    scale: f64,
}

impl<T: Scalar> Backward<T> for SumBackward {
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0] * T::of(self.scale); inputs[0].numel()])]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push_op(value, &[x], IdentityBackward))
    }

    /// Concatenates along axis 1 (channels). All other extents must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| config_err!("concat of zero tensors"))?;
        let ref_shape = self.shape(*first).to_vec();
        if ref_shape.len() < 2 {
            return Err(config_err!("concat needs at least 2 axes, got {:?}", ref_shape));
        }
        let outer = ref_shape[0];
        let inner: usize = ref_shape[2..].iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != ref_shape.len() || s[0] != ref_shape[0] || s[2..] != ref_shape[2..] {
                return Err(config_err!("concat shape mismatch: {:?} vs {:?}", s, ref_shape));
            }
            widths.push(s[1] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = ref_shape;
        shape[1] = total / inner.max(1);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_op(value, xs, ConcatBackward { outer, widths }))
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push_op(Tensor::scalar(T::of(s)), &[x], SumBackward { scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push_op(Tensor::scalar(T::of(s / n)), &[x], SumBackward { scale: 1.0 / n })
    }
}
