use crate::error::{config_err, Result};
use crate::tensor::{Backward, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy)]
enum Unary<T> {
    LeakyRelu(T),
    Sigmoid,
    Scale(T),
}

impl<T: Scalar> Backward<T> for Unary<T> {
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], out: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let gx = match *self {
            Unary::LeakyRelu(slope) => {
                grad.iter().zip(x).map(|(&g, &v)| if v > T::zero() { g } else { g * slope }).collect()
            }
            Unary::Sigmoid => grad.iter().zip(out.data()).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
            Unary::Scale(c) => grad.iter().map(|&g| g * c).collect(),
        };
        vec![Some(gx)]
    }
}

enum Binary {
    Add,
    Mul,
}

impl<T: Scalar> Backward<T> for Binary {
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, wants: &[bool]) -> Vec<Option<Vec<T>>> {
        match self {
            Binary::Add => vec![wants[0].then(|| grad.to_vec()), wants[1].then(|| grad.to_vec())],
            Binary::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    wants[0].then(|| grad.iter().zip(b).map(|(&g, &v)| g * v).collect()),
                    wants[1].then(|| grad.iter().zip(a).map(|(&g, &v)| g * v).collect()),
                ]
            }
        }
    }
}

struct MulChannelBackward;

impl<T: Scalar> Backward<T> for MulChannelBackward {
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, s) = (inputs[0].data(), inputs[1].data());
        let vol = x.len() / s.len();
        let gx = wants[0].then(|| {
            let mut gx = grad.to_vec();
            for (plane, &sv) in gx.chunks_mut(vol).zip(s) {
                plane.iter_mut().for_each(|g| *g = *g * sv);
            }
            gx
        });
        let gs = wants[1].then(|| {
            grad.chunks(vol).zip(x.chunks(vol)).map(|(g, xv)| g.iter().zip(xv).map(|(&a, &b)| a * b).sum()).collect()
        });
        vec![gx, gs]
    }
}

impl<T: Scalar> Tape<T> {
    fn unary(&mut self, x: Var, op: Unary<T>) -> Var {
        let f = |v: T| match op {
            Unary::LeakyRelu(slope) => {
                if v > T::zero() {
                    v
                } else {
                    v * slope
                }
            }
            Unary::Sigmoid => sigmoid(v),
            Unary::Scale(c) => v * c,
        };
        let value = self.value(x).map(f);
        self.push_op(value, &[x], op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.note_kinks(x);
        self.unary(x, Unary::LeakyRelu(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.note_kinks(x);
        self.unary(x, Unary::LeakyRelu(T::of(slope)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(T::of(c)))
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err!(
                "elementwise shape mismatch: {:?} vs {:?} (no broadcasting)",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = match op {
            Binary::Add => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            Binary::Mul => av.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
        };
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// Sums a non-empty list of same-shape tensors left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| config_err!("add_all of an empty list"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Channel-wise scaling: `x` is N x C x D x H x W, `s` is N x C x 1 x 1 x 1.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, ..] = self.value(x).dims5()?;
        if self.shape(s) != [n, c, 1, 1, 1] {
            return Err(config_err!(
                "channel scale shape {:?} does not match feature map {:?}",
                self.shape(s),
                self.shape(x)
            ));
        }
        let vol = self.value(x).numel() / (n * c);
        let mut data = self.value(x).data().to_vec();
        for (plane, &sv) in data.chunks_mut(vol.max(1)).zip(self.value(s).data()) {
            plane.iter_mut().for_each(|v| *v = *v * sv);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(value, &[x, s], MulChannelBackward))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
