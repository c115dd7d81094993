use super::{extents_of, Builder, Conv, ConvBlock, Ctx, IntraSde};
use crate::error::{config_err, Result};
use crate::tensor::{conv_out_extent, Conv3dSpec, Scalar, Var};

/// Resampling path from a source branch to a target branch.
#[derive(Clone, Debug)]
pub enum FusePath {
    Identity,
    /// Finer source to coarser target: one strided 3x3x3 conv per octave.
    Down(Vec<Conv>),
    /// Coarser source to finer target: 1x1x1 conv then trilinear upsampling.
    Up(Conv),
}

impl FusePath {
    fn param_count(&self) -> usize {
        match self {
            FusePath::Identity => 0,
            FusePath::Down(cs) => cs.iter().map(Conv::param_count).sum(),
            FusePath::Up(c) => c.param_count(),
        }
    }
}

/// Parallel multi-scale fusion module: one convolutional branch per scale,
/// followed by fully connected cross-scale fusion. Branch `i` runs at
/// 1/2^i of the module's finest extent.
#[derive(Clone, Debug)]
pub struct Pmf {
    pub path: String,
    pub widths: Vec<usize>,
    pub branches: Vec<ConvBlock>,
    pub sde: Vec<IntraSde>,
    /// `fuse[target][source]`.
    pub fuse: Vec<Vec<FusePath>>,
}

impl Pmf {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        path: &str,
        widths: &[usize],
        intra_sde: Option<usize>,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(config_err!("{}: a PMF module needs at least one branch", path));
        }
        let mut branches = Vec::new();
        let mut sde = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            branches.push(ConvBlock::new(b, &format!("{path}.branch{i}.block"), w, w)?);
            if let Some(ratio) = intra_sde {
                sde.push(IntraSde::new(b, &format!("{path}.branch{i}.sde"), w, ratio)?);
            }
        }
        let mut fuse = Vec::new();
        for j in 0..widths.len() {
            let mut row = Vec::new();
            for i in 0..widths.len() {
                let p = format!("{path}.fuse.{i}to{j}");
                row.push(if i == j {
                    FusePath::Identity
                } else if i < j {
                    let convs = (i..j)
                        .map(|s| {
                            Conv::new(b, &format!("{p}.down{}", s - i), widths[s], widths[s + 1], 3, Conv3dSpec::down2(), true)
                        })
                        .collect::<Result<_>>()?;
                    FusePath::Down(convs)
                } else {
                    FusePath::Up(Conv::pointwise(b, &format!("{p}.up"), widths[i], widths[j])?)
                });
            }
            fuse.push(row);
        }
        Ok(Pmf { path: path.to_string(), widths: widths.to_vec(), branches, sde, fuse })
    }

    pub fn branch_count(&self) -> usize {
        self.widths.len()
    }

    fn validate<T: Scalar>(&self, cx: &Ctx<'_, T>, xs: &[Var]) -> Result<Vec<[usize; 3]>> {
        if xs.len() != self.widths.len() {
            return Err(config_err!("{}: expected {} branches, got {}", self.path, self.widths.len(), xs.len()));
        }
        let mut ext: Vec<[usize; 3]> = Vec::with_capacity(xs.len());
        for (i, (&x, &w)) in xs.iter().zip(&self.widths).enumerate() {
            let s = cx.tape.shape(x);
            if s.len() != 5 || s[1] != w {
                return Err(config_err!("{}: branch {} expects {} channels, got {:?}", self.path, i, w, s));
            }
            let e = extents_of(cx.tape, x)?;
            if let Some(prev) = ext.last() {
                let want: [usize; 3] = std::array::from_fn(|a| conv_out_extent(prev[a], 3, 2, 1).unwrap_or(0));
                if e != want {
                    return Err(config_err!(
                        "{}: branch {} extents {:?} break the scale ladder (expected {:?})",
                        self.path,
                        i,
                        e,
                        want
                    ));
                }
            }
            ext.push(e);
        }
        Ok(ext)
    }

    /// Per-branch features before fusion (conv block, then the intra-scale
    /// gate when enabled).
    pub fn branch_features<T: Scalar>(&self, cx: &mut Ctx<'_, T>, xs: &[Var]) -> Result<Vec<Var>> {
        self.validate(cx, xs)?;
        let mut hs = Vec::with_capacity(xs.len());
        for (i, &x) in xs.iter().enumerate() {
            let mut h = self.branches[i].forward(cx, x)?;
            if let Some(g) = self.sde.get(i) {
                h = g.forward(cx, h)?;
            }
            hs.push(h);
        }
        Ok(hs)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, xs: &[Var]) -> Result<Vec<Var>> {
        let ext = self.validate(cx, xs)?;
        let hs = self.branch_features(cx, xs)?;
        let mut out = Vec::with_capacity(hs.len());
        for (j, row) in self.fuse.iter().enumerate() {
            let mut terms = Vec::with_capacity(row.len());
            for (i, path) in row.iter().enumerate() {
                terms.push(match path {
                    FusePath::Identity => hs[i],
                    FusePath::Down(convs) => {
                        let mut h = hs[i];
                        for c in convs {
                            h = c.forward(cx, h)?;
                        }
                        h
                    }
                    FusePath::Up(conv) => {
                        let h = conv.forward(cx, hs[i])?;
                        cx.tape.trilinear_upsample(h, ext[j])?
                    }
                });
            }
            let s = cx.tape.add_all(&terms)?;
            let y = cx.tape.relu(s);
            out.push(cx.checked(y, &format!("{}.out{j}", self.path))?);
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(ConvBlock::param_count).sum::<usize>()
            + self.sde.iter().map(IntraSde::param_count).sum::<usize>()
            + self.fuse.iter().flatten().map(FusePath::param_count).sum::<usize>()
    }
}
