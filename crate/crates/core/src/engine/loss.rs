//! Generalized Dice loss plus binary cross-entropy over region channels.

use crate::error::{contract_err, Result};
use crate::tensor::{sigmoid, Backward, Scalar, Tape, Tensor, Var};

/// Smoothing added to numerator and denominator of the Dice ratio.
pub const GDL_EPS: f64 = 1e-5;

/// Class weights `1 / (sum of targets)^2`, normalized to sum to one. A class
/// without target voxels takes the largest finite weight; if every class is
/// empty all weights are equal.
pub fn gdl_weights(target_sums: &[f64]) -> Vec<f64> {
    let raw: Vec<Option<f64>> = target_sums.iter().map(|&s| (s > 0.0).then(|| 1.0 / (s * s))).collect();
    let fill = raw.iter().flatten().copied().fold(f64::NAN, f64::max);
    let w: Vec<f64> = raw.iter().map(|r| r.unwrap_or(if fill.is_nan() { 1.0 } else { fill })).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

struct Stats {
    weights: Vec<f64>,
    /// sum_c w_c sum_i p t
    inter: f64,
    /// sum_c w_c sum_i (p + t)
    union: f64,
    count: usize,
}

fn stats<T: Scalar>(logits: &[T], targets: &[T], n: usize, c: usize) -> Stats {
    let vol = logits.len() / (n * c);
    let mut tsum = vec![0.0; c];
    let mut inter = vec![0.0; c];
    let mut union = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * vol;
            for i in off..off + vol {
                let p = sigmoid(logits[i].f64());
                let t = targets[i].f64();
                tsum[ch] += t;
                inter[ch] += p * t;
                union[ch] += p + t;
            }
        }
    }
    let weights = gdl_weights(&tsum);
    Stats {
        inter: weights.iter().zip(&inter).map(|(w, v)| w * v).sum(),
        union: weights.iter().zip(&union).map(|(w, v)| w * v).sum(),
        weights,
        count: logits.len(),
    }
}

struct RegionLossBackward {
    n: usize,
    c: usize,
}

impl<T: Scalar> Backward<T> for RegionLossBackward {
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, wants: &[bool]) -> Vec<Option<Vec<T>>> {
        if !wants[0] {
            return vec![None, None];
        }
        let (x, t) = (inputs[0].data(), inputs[1].data());
        let st = stats(x, t, self.n, self.c);
        let g = grad[0].f64();
        let vol = x.len() / (self.n * self.c);
        let den = st.union + GDL_EPS;
        let num = 2.0 * st.inter + GDL_EPS;
        let m = st.count as f64;
        let mut out = vec![T::zero(); x.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let ch = (i / vol) % self.c;
            let w = st.weights[ch];
            let p = sigmoid(x[i].f64());
            let tv = t[i].f64();
            // d gdl / d p, then through the sigmoid
            let dgdl = -(2.0 * w * tv * den - num * w) / (den * den);
            let dbce = (p - tv) / m;
            *o = T::of(g * (dgdl * p * (1.0 - p) + dbce));
        }
        vec![Some(out), None]
    }
}

/// `GDL + BCE` of region logits against binary region targets, both
/// N x C x D x H x W. Dice sums run over the whole batch per channel; BCE is
/// the mean over every element.
pub fn region_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: Var) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape != tape.shape(targets) {
        return Err(contract_err!("loss shape mismatch: logits {:?}, targets {:?}", shape, tape.shape(targets)));
    }
    if shape.len() < 2 || shape.iter().product::<usize>() == 0 {
        return Err(contract_err!("loss needs non-empty N x C x ... tensors, got {:?}", shape));
    }
    let (x, t) = (tape.value(logits).data(), tape.value(targets).data());
    if let Some((i, v)) = t.iter().enumerate().find(|(_, v)| **v != T::zero() && **v != T::one()) {
        return Err(contract_err!("loss targets must be binary, found {} at element {}", v.f64(), i));
    }
    let (n, c) = (shape[0], shape[1]);
    let st = stats(x, t, n, c);
    let gdl = 1.0 - (2.0 * st.inter + GDL_EPS) / (st.union + GDL_EPS);
    let bce = x
        .iter()
        .zip(t)
        .map(|(&xv, &tv)| {
            let (xv, tv) = (xv.f64(), tv.f64());
            xv.max(0.0) - xv * tv + (-xv.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / st.count as f64;
    let value = Tensor::scalar(T::of(gdl + bce));
    Ok(tape.push_op(value, &[logits, targets], RegionLossBackward { n, c }))
}
