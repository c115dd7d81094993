use crate::error::{config_err, Result};
use crate::tensor::{Backward, Scalar, Tape, Tensor, Var};

fn dims3(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(shape).map_err(|_| config_err!("{} expects a 3-d tensor, got {:?}", what, shape))
}

struct MatmulBackward {
    n: usize,
    m: usize,
    k: usize,
    p: usize,
}

impl<T: Scalar> Backward<T> for MatmulBackward {
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let MatmulBackward { n, m, k, p } = *self;
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = wants[0].then(|| {
            let mut ga = vec![T::zero(); a.len()];
            for i in 0..n {
                let g = &grad[i * m * p..(i + 1) * m * p];
                T::gemm(m, p, k, T::one(), g, false, &b[i * k * p..(i + 1) * k * p], true, T::zero(), &mut ga[i * m * k..(i + 1) * m * k]);
            }
            ga
        });
        let gb = wants[1].then(|| {
            let mut gb = vec![T::zero(); b.len()];
            for i in 0..n {
                let g = &grad[i * m * p..(i + 1) * m * p];
                T::gemm(k, m, p, T::one(), &a[i * m * k..(i + 1) * m * k], true, g, false, T::zero(), &mut gb[i * k * p..(i + 1) * k * p]);
            }
            gb
        });
        vec![ga, gb]
    }
}

struct TransposeBackward {
    n: usize,
    a: usize,
    b: usize,
}

fn transpose12<T: Copy>(x: &[T], n: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for s in 0..n {
        let base = s * a * b;
        for j in 0..b {
            out.extend((0..a).map(|i| x[base + i * b + j]));
        }
    }
    out
}

impl<T: Scalar> Backward<T> for TransposeBackward {
    fn backward(&self, grad: &[T], _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(transpose12(grad, self.n, self.b, self.a))]
    }
}

struct SoftmaxBackward {
    inner: usize,
    axis_len: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxBackward {
    fn backward(&self, grad: &[T], _: &[&Tensor<T>], out: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, inner) = (self.axis_len, self.inner);
        let y = out.data();
        let mut gx = vec![T::zero(); y.len()];
        for o in 0..y.len() / (a * inner) {
            for i in 0..inner {
                let idx = |j: usize| (o * a + j) * inner + i;
                let dot: T = (0..a).map(|j| grad[idx(j)] * y[idx(j)]).sum();
                for j in 0..a {
                    gx[idx(j)] = y[idx(j)] * (grad[idx(j)] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Tape<T> {
    /// Batched product `[N, M, K] x [N, K, P] -> [N, M, P]`.
    pub fn matmul_batched(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, m, k] = dims3(self.shape(a), "matmul_batched lhs")?;
        let [n2, k2, p] = dims3(self.shape(b), "matmul_batched rhs")?;
        if n != n2 || k != k2 {
            return Err(config_err!(
                "matmul_batched shape mismatch: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * m * p];
        for i in 0..n {
            T::gemm(
                m,
                k,
                p,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * p..(i + 1) * k * p],
                false,
                T::zero(),
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        self.add_macs((n * m * k * p) as u64);
        let value = Tensor::new(vec![n, m, p], out)?;
        Ok(self.push_op(value, &[a, b], MatmulBackward { n, m, k, p }))
    }

    /// Swaps the last two axes of a 3-d tensor.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let [n, a, b] = dims3(self.shape(x), "transpose12")?;
        let value = Tensor::new(vec![n, b, a], transpose12(self.value(x).data(), n, a, b))?;
        Ok(self.push_op(value, &[x], TransposeBackward { n, a, b }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(config_err!("softmax axis {} out of range for shape {:?}", axis, shape));
        }
        let a = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        if a > 0 {
            for o in 0..xs.len() / (a * inner).max(1) {
                for i in 0..inner {
                    let idx = |j: usize| (o * a + j) * inner + i;
                    let mx = (0..a).map(|j| xs[idx(j)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for j in 0..a {
                        let e = (xs[idx(j)] - mx).exp();
                        out[idx(j)] = e;
                        z = z + e;
                    }
                    for j in 0..a {
                        out[idx(j)] = out[idx(j)] / z;
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, &[x], SoftmaxBackward { inner, axis_len: a }))
    }
}
