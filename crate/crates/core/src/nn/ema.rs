//! Expectation-maximization attention.
//!
//! Features `X` (positions x channels) are explained by K unit-norm bases `mu`.
//! Each iteration runs an E-step `Z = softmax_K(lambda * X mu^T)` and an
//! M-step `mu_k = normalize(sum_p Z_pk x_p / sum_p Z_pk)`. The features are
//! then reconstructed as `Z mu` and added back to the input through a 1x1x1
//! projection.

use serde::{Deserialize, Serialize};

use super::{Builder, Conv, Ctx, Mode};
use crate::error::{config_err, Result};
use crate::tensor::{Backward, ParamId, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    /// Number of bases K.
    pub bases: usize,
    /// EM iterations T.
    pub iterations: usize,
    /// Softmax temperature lambda.
    pub temperature: f64,
    /// Momentum m of the running-base update.
    pub momentum: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig { bases: 256, iterations: 3, temperature: 1.0, momentum: 0.9 }
    }
}

/// Responsibilities and bases after each iteration, for diagnostics.
#[derive(Clone, Debug, Default)]
pub struct EmaTrace<T> {
    pub responsibilities: Vec<Tensor<T>>,
    pub bases: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct EmaModule {
    pub path: String,
    pub channels: usize,
    pub config: EmaConfig,
    pub in_proj: Conv,
    pub out_proj: Conv,
    /// Running bases, K x C (a buffer, not a trainable parameter).
    pub bases: ParamId,
}

impl EmaModule {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, channels: usize, config: EmaConfig) -> Result<Self> {
        if config.bases == 0 {
            return Err(config_err!("{}: EMA needs at least one base (K = 0)", path));
        }
        if config.iterations == 0 {
            return Err(config_err!("{}: EMA needs at least one iteration", path));
        }
        Ok(EmaModule {
            path: path.to_string(),
            channels,
            config,
            in_proj: Conv::pointwise(b, &format!("{path}.in_proj"), channels, channels)?,
            out_proj: Conv::pointwise(b, &format!("{path}.out_proj"), channels, channels)?,
            bases: b.unit_rows(format!("{path}.bases"), config.bases, channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_traced(cx, x, None)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: Var,
        mut trace: Option<&mut EmaTrace<T>>,
    ) -> Result<Var> {
        let [n, c, d, h, w] = cx.tape.value(x).dims5()?;
        if c != self.channels {
            return Err(config_err!("{}: expected {} channels, got {}", self.path, self.channels, c));
        }
        let (k, p) = (self.config.bases, d * h * w);
        let proj = self.in_proj.forward(cx, x)?;
        let flat = cx.tape.reshape(proj, &[n, c, p])?;
        let feats = cx.tape.transpose12(flat)?; // N x P x C

        let running = cx.params.tensor(self.bases);
        let init: Vec<T> = (0..n).flat_map(|_| running.data().iter().copied()).collect();
        let mut mu = cx.tape.constant(Tensor::new(vec![n, k, c], init)?);
        let mut z = None;
        for _ in 0..self.config.iterations {
            let mu_t = cx.tape.transpose12(mu)?;
            let logits = cx.tape.matmul_batched(feats, mu_t)?;
            let logits = cx.tape.scale(logits, self.config.temperature);
            let resp = cx.tape.softmax(logits, 2)?;
            mu = em_m_step(cx.tape, resp, feats, mu)?;
            if let Some(t) = trace.as_deref_mut() {
                t.responsibilities.push(cx.tape.value(resp).clone());
                t.bases.push(cx.tape.value(mu).clone());
            }
            z = Some(resp);
        }
        let z = z.expect("at least one iteration");
        let recon = cx.tape.matmul_batched(z, mu)?; // N x P x C
        let recon = cx.tape.transpose12(recon)?;
        let recon = cx.tape.reshape(recon, &[n, c, d, h, w])?;
        let out = self.out_proj.forward(cx, recon)?;
        let y = cx.tape.add(x, out)?;

        if cx.mode == Mode::Train {
            let m = T::of(self.config.momentum);
            let batch = cx.tape.value(mu).data();
            let inv_n = T::one() / T::of(n as f64);
            let updated: Vec<T> = running
                .data()
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    let mean = (0..n).map(|s| batch[s * k * c + i]).fold(T::zero(), |a, b| a + b) * inv_n;
                    m * r + (T::one() - m) * mean
                })
                .collect();
            cx.updates.push((self.bases, Tensor::new(vec![k, c], updated)?));
        }
        cx.checked(y, &self.path)
    }

    pub fn param_count(&self) -> usize {
        self.in_proj.param_count() + self.out_proj.param_count()
    }
}

struct MStepBackward<T> {
    n: usize,
    p: usize,
    k: usize,
    c: usize,
    /// Per (sample, base): `None` when the previous base was kept, otherwise
    /// the responsibility mass `s` and the norm of the weighted mean.
    stats: Vec<Option<(T, T)>>,
}

impl<T: Scalar> Backward<T> for MStepBackward<T> {
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], out: &Tensor<T>, wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, p, k, c) = (self.n, self.p, self.k, self.c);
        let (z, x) = (inputs[0].data(), inputs[1].data());
        let mu = out.data();
        let mut gz = vec![T::zero(); z.len()];
        let mut gx = vec![T::zero(); x.len()];
        let mut gprev = vec![T::zero(); grad.len()];
        for s in 0..n {
            // gradient w.r.t. u = Z^T X (K x C) and s_k = column sums of Z
            let mut gu = vec![T::zero(); k * c];
            let mut gs = vec![T::zero(); k];
            for kk in 0..k {
                let row = (s * k + kk) * c;
                let gm = &grad[row..row + c];
                match self.stats[s * k + kk] {
                    None => gprev[row..row + c].copy_from_slice(gm),
                    Some((mass, norm)) => {
                        let m = &mu[row..row + c];
                        let dot: T = m.iter().zip(gm).map(|(&a, &b)| a * b).sum();
                        // v = u / mass, mu = v / norm
                        let gv: Vec<T> = m.iter().zip(gm).map(|(&a, &b)| (b - a * dot) / norm).collect();
                        let gv_dot_v: T = gv.iter().zip(m).map(|(&a, &b)| a * b * norm).sum();
                        for ci in 0..c {
                            gu[kk * c + ci] = gv[ci] / mass;
                        }
                        gs[kk] = -gv_dot_v / mass;
                    }
                }
            }
            let zs = &z[s * p * k..(s + 1) * p * k];
            let xs = &x[s * p * c..(s + 1) * p * c];
            if wants[0] {
                let g = &mut gz[s * p * k..(s + 1) * p * k];
                // gz = X gu^T + gs
                T::gemm(p, c, k, T::one(), xs, false, &gu, true, T::zero(), g);
                for row in g.chunks_mut(k) {
                    row.iter_mut().zip(&gs).for_each(|(a, &b)| *a = *a + b);
                }
            }
            if wants[1] {
                // gx = Z gu
                T::gemm(p, k, c, T::one(), zs, false, &gu, false, T::zero(), &mut gx[s * p * c..(s + 1) * p * c]);
            }
        }
        vec![wants[0].then_some(gz), wants[1].then_some(gx), wants[2].then_some(gprev)]
    }
}

/// M-step of EM attention: `mu_k = normalize(sum_p z_pk x_p / sum_p z_pk)`.
///
/// `z` is N x P x K, `x` is N x P x C and `prev` is N x K x C. A base whose
/// responsibilities sum to zero, or whose weighted mean is the zero vector,
/// keeps its previous value.
pub fn em_m_step<T: Scalar>(tape: &mut Tape<T>, z: Var, x: Var, prev: Var) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    let xs = tape.shape(x).to_vec();
    let ps = tape.shape(prev).to_vec();
    let (&[n, p, k], &[n2, p2, c]) = (zs.as_slice(), xs.as_slice()) else {
        return Err(config_err!("em_m_step expects 3-d z and x, got {:?} and {:?}", zs, xs));
    };
    if n != n2 || p != p2 || ps != [n, k, c] {
        return Err(config_err!("em_m_step shape mismatch: z {:?}, x {:?}, prev {:?}", zs, xs, ps));
    }
    let (zv, xv, pv) = (tape.value(z).data(), tape.value(x).data(), tape.value(prev).data());
    let mut out = vec![T::zero(); n * k * c];
    let mut stats = Vec::with_capacity(n * k);
    for s in 0..n {
        let mut u = vec![T::zero(); k * c];
        T::gemm(k, p, c, T::one(), &zv[s * p * k..(s + 1) * p * k], true, &xv[s * p * c..(s + 1) * p * c], false, T::zero(), &mut u);
        for kk in 0..k {
            let mass: T = (0..p).map(|i| zv[(s * p + i) * k + kk]).sum();
            let row = (s * k + kk) * c;
            let urow = &u[kk * c..(kk + 1) * c];
            let norm = if mass > T::zero() {
                urow.iter().map(|&v| (v / mass) * (v / mass)).sum::<T>().sqrt()
            } else {
                T::zero()
            };
            if mass > T::zero() && norm > T::zero() {
                for ci in 0..c {
                    out[row + ci] = urow[ci] / mass / norm;
                }
                stats.push(Some((mass, norm)));
            } else {
                out[row..row + c].copy_from_slice(&pv[row..row + c]);
                stats.push(None);
            }
        }
    }
    tape.add_macs((n * k * p * c) as u64);
    let value = Tensor::new(vec![n, k, c], out)?;
    Ok(tape.push_op(value, &[z, x, prev], MStepBackward { n, p, k, c, stats }))
}
