//! Central finite-difference gradient checking.
//!
//! A function under test maps tensors (and parameters) to an arbitrary
//! output `y`; the checker differentiates the scalar `sum(r * y)` for a fixed
//! random `r`, comparing tape gradients with central differences at a
//! subset of coordinates plus one random direction over all coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates probed per tensor (all of them when the tensor is smaller).
    pub max_coords: usize,
    pub seed: u64,
    /// How many times a difference straddling a ReLU kink is retried with a
    /// ten times smaller step before the coordinate is skipped.
    pub refinements: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-4, max_coords: 24, seed: 7, refinements: 3 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all probed tensors and the direction probe.
    pub max_rel_error: f64,
    /// Name of the tensor with the largest error.
    pub worst: String,
    pub coords_checked: usize,
    /// Coordinates left out because every step size crossed a kink.
    pub skipped_at_kinks: usize,
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

impl GradCheck {
    /// Checks gradients w.r.t. every input tensor and every trainable
    /// parameter of `store`.
    pub fn run<F>(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let weights = {
            let mut tape = Tape::inference();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = f(&mut tape, store, &vars)?;
            let n = tape.value(y).numel();
            let shape = tape.value(y).shape().to_vec();
            Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())?
        };
        let loss = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<(f64, Option<u64>)> {
            let mut tape = Tape::inference().track_kinks();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = f(&mut tape, store, &vars)?;
            let l = tape.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
            Ok((l, tape.kink_signature()))
        };
        let (_, base_sig) = loss(store, inputs)?;
        // central difference at the largest step whose both ends share the
        // activation pattern of the base point
        let central = |eval: &dyn Fn(f64) -> Result<(f64, Option<u64>)>| -> Result<Option<f64>> {
            let mut h = self.step;
            for _ in 0..=self.refinements {
                let (lp, sp) = eval(h)?;
                let (lm, sm) = eval(-h)?;
                if sp == base_sig && sm == base_sig {
                    return Ok(Some((lp - lm) / (2.0 * h)));
                }
                h /= 10.0;
            }
            Ok(None)
        };

        // analytic gradients
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let y = f(&mut tape, store, &vars)?;
        let r = tape.constant(weights.clone());
        let prod = tape.mul(y, r)?;
        let l = tape.sum(prod);
        let grads = tape.backward(l)?;
        let mut pstore = store.clone();
        pstore.zero_grad();
        grads.accumulate_into(&mut pstore);

        let mut report =
            GradCheckReport { max_rel_error: 0.0, worst: String::new(), coords_checked: 0, skipped_at_kinks: 0 };
        let note = |name: String, fd: &[f64], an: &[f64], rep: &mut GradCheckReport| {
            let e = rel_error(fd, an);
            rep.coords_checked += fd.len();
            if e > rep.max_rel_error || rep.worst.is_empty() {
                rep.max_rel_error = rep.max_rel_error.max(e);
                rep.worst = name;
            }
        };
        // one random direction over all inputs and parameters, unit length overall
        let mut input_dirs: Vec<Vec<f64>> = Vec::new();
        let mut param_dirs: Vec<(ParamId, Vec<f64>)> = Vec::new();
        let mut direction_an = 0.0;

        for (i, t) in inputs.iter().enumerate() {
            let an: Vec<f64> = grads.wrt(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
            let (mut fd, mut sel) = (Vec::new(), Vec::new());
            for c in pick(&mut rng, t.numel(), self.max_coords) {
                let eval = |h: f64| {
                    let mut moved = inputs.to_vec();
                    moved[i] = bump(t, c, h);
                    loss(store, &moved)
                };
                match central(&eval)? {
                    Some(d) => {
                        fd.push(d);
                        sel.push(an[c]);
                    }
                    None => report.skipped_at_kinks += 1,
                }
            }
            note(format!("input{i}"), &fd, &sel, &mut report);
            let dir: Vec<f64> = (0..t.numel()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            direction_an += dir.iter().zip(&an).map(|(a, b)| a * b).sum::<f64>();
            input_dirs.push(dir);
        }
        for (id, p) in store.iter() {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let an: Vec<f64> = pstore.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
            let (mut fd, mut sel) = (Vec::new(), Vec::new());
            for c in pick(&mut rng, p.tensor.numel(), self.max_coords) {
                let eval = |h: f64| {
                    let mut s = store.clone();
                    s.set(id, bump(&p.tensor, c, h))?;
                    loss(&s, inputs)
                };
                match central(&eval)? {
                    Some(d) => {
                        fd.push(d);
                        sel.push(an[c]);
                    }
                    None => report.skipped_at_kinks += 1,
                }
            }
            note(p.name.clone(), &fd, &sel, &mut report);
            let dir: Vec<f64> = (0..p.tensor.numel()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            direction_an += dir.iter().zip(&an).map(|(a, b)| a * b).sum::<f64>();
            param_dirs.push((id, dir));
        }

        let norm = input_dirs
            .iter()
            .chain(param_dirs.iter().map(|(_, d)| d))
            .flatten()
            .map(|d| d * d)
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            let eval = |h: f64| {
                let step = h / norm;
                let ins = inputs
                    .iter()
                    .zip(&input_dirs)
                    .map(|(t, d)| Tensor::new(t.shape().to_vec(), t.data().iter().zip(d).map(|(x, d)| x + step * d).collect()))
                    .collect::<Result<Vec<_>>>()?;
                let mut s = store.clone();
                for (id, d) in &param_dirs {
                    let t = store.tensor(*id);
                    s.set(*id, Tensor::new(t.shape().to_vec(), t.data().iter().zip(d).map(|(x, d)| x + step * d).collect())?)?;
                }
                loss(&s, &ins)
            };
            match central(&eval)? {
                Some(d) => note("direction".into(), &[d], &[direction_an / norm], &mut report),
                None => report.skipped_at_kinks += 1,
            }
        }
        Ok(report)
    }
}

fn pick(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = rand::seq::index::sample(rng, n, max).into_vec();
    v.sort_unstable();
    v
}

fn bump(t: &Tensor<f64>, i: usize, h: f64) -> Tensor<f64> {
    let mut d = t.data().to_vec();
    d[i] += h;
    Tensor::new(t.shape().to_vec(), d).expect("same shape")
}
