use crate::error::{contract_err, Result};
use crate::tensor::{ParamKind, ParamStore, Scalar, Tensor};

/// Moment estimates of one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

/// One bias-corrected Adam update of a flat tensor at step `t` (1-based).
/// The L2 penalty is coupled: `weight_decay * w` joins the gradient before
/// the moments are updated.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamMoments,
    t: u64,
    lr: f64,
    hp: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(contract_err!("adam: {} parameters but {} gradients", params.len(), grads.len()));
    }
    if t == 0 {
        return Err(contract_err!("adam step counter starts at 1"));
    }
    if state.m.is_empty() && state.v.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(contract_err!("adam: state holds {} entries, parameters {}", state.m.len(), params.len()));
    }
    let [b1, b2] = hp.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let w = params[i].f64();
        let g = grads[i].f64() + hp.weight_decay * w;
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        params[i] = T::of(w - lr * (m / c1) / ((v / c2).sqrt() + hp.eps));
    }
    Ok(())
}

/// Adam over every trainable tensor of a parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    moments: Vec<AdamMoments>,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Adam { hyper, step: 0, moments: Vec::new() }
    }

    /// Applies one update using the gradients stored in `store`. Trainable
    /// tensors without a gradient are treated as having a zero gradient.
    pub fn update<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), AdamMoments::default());
        }
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get(id);
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let grads = p.grad.clone().unwrap_or_else(|| vec![T::zero(); p.tensor.numel()]);
            let shape = p.tensor.shape().to_vec();
            let mut data = p.tensor.data().to_vec();
            adam_step(&mut data, &grads, &mut self.moments[k], self.step, lr, &self.hyper)?;
            store.set(id, Tensor::new(shape, data)?)?;
        }
        Ok(())
    }
}
