use super::{extents_of, Builder, Conv, Ctx};
use crate::error::{config_err, Result};
use crate::tensor::{Scalar, Var};

/// Squeeze width of the intra-scale gate: `channels / ratio`, at least 4.
pub fn squeeze_width(channels: usize, ratio: usize) -> usize {
    (channels / ratio.max(1)).max(4)
}

/// Channel gate driven by global context of the same scale:
/// `x * sigmoid(excite(relu(squeeze(gap(x)))))`.
#[derive(Clone, Debug)]
pub struct IntraSde {
    pub path: String,
    pub channels: usize,
    pub squeeze: Conv,
    pub excite: Conv,
}

impl IntraSde {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, channels: usize, ratio: usize) -> Result<Self> {
        let mid = squeeze_width(channels, ratio);
        Ok(IntraSde {
            path: path.to_string(),
            channels,
            squeeze: Conv::pointwise(b, &format!("{path}.squeeze"), channels, mid)?,
            excite: Conv::pointwise(b, &format!("{path}.excite"), mid, channels)?,
        })
    }

    /// The per-channel multiplier in (0, 1), shape N x C x 1 x 1 x 1.
    pub fn gate<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        if cx.tape.shape(x).get(1) != Some(&self.channels) {
            return Err(config_err!("{}: expected {} channels, got {:?}", self.path, self.channels, cx.tape.shape(x)));
        }
        let g = cx.tape.global_avg_pool(x)?;
        let g = self.squeeze.forward(cx, g)?;
        let g = cx.tape.relu(g);
        let g = self.excite.forward(cx, g)?;
        Ok(cx.tape.sigmoid(g))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = self.gate(cx, x)?;
        let y = cx.tape.mul_channel(x, s)?;
        cx.checked(y, &self.path)
    }

    pub fn param_count(&self) -> usize {
        self.squeeze.param_count() + self.excite.param_count()
    }
}

/// Injects global context from the coarsest branch into every branch as one
/// extra channel, then restores each branch's nominal width:
/// `y_j = restore_j(concat(x_j, upsample(reduce_j(gap(x_last)))))`.
#[derive(Clone, Debug)]
pub struct InterSde {
    pub path: String,
    pub widths: Vec<usize>,
    pub reduce: Vec<Conv>,
    pub restore: Vec<Conv>,
}

impl InterSde {
    /// `widths` lists branch channel counts ordered fine to coarse.
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(config_err!("{}: inter-scale SDE needs at least 2 branches, got {}", path, widths.len()));
        }
        let source = *widths.last().expect("non-empty");
        let mut reduce = Vec::new();
        let mut restore = Vec::new();
        for (j, &w) in widths.iter().enumerate() {
            reduce.push(Conv::pointwise(b, &format!("{path}.reduce{j}"), source, 1)?);
            restore.push(Conv::pointwise(b, &format!("{path}.restore{j}"), w + 1, w)?);
        }
        Ok(InterSde { path: path.to_string(), widths: widths.to_vec(), reduce, restore })
    }

    /// The single context channel appended to branch `j` (before restoration).
    pub fn context<T: Scalar>(&self, cx: &mut Ctx<'_, T>, pooled: Var, j: usize, target: [usize; 3]) -> Result<Var> {
        let r = self.reduce[j].forward(cx, pooled)?;
        cx.tape.trilinear_upsample(r, target)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.len() != self.widths.len() {
            return Err(config_err!("{}: expected {} branches, got {}", self.path, self.widths.len(), xs.len()));
        }
        let pooled = cx.tape.global_avg_pool(*xs.last().expect("len >= 2"))?;
        let mut out = Vec::with_capacity(xs.len());
        for (j, &x) in xs.iter().enumerate() {
            let ctxch = self.context(cx, pooled, j, extents_of(cx.tape, x)?)?;
            let cat = cx.tape.concat_channels(&[x, ctxch])?;
            let y = self.restore[j].forward(cx, cat)?;
            out.push(cx.checked(y, &format!("{}.branch{j}", self.path))?);
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.reduce.iter().chain(&self.restore).map(Conv::param_count).sum()
    }
}
