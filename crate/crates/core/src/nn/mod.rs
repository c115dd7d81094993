//! Building blocks of the network: convolutional block, parallel multi-scale
//! fusion (PMF), expectation-maximization attention (EMA) and the intra- and
//! inter-scale semantic-discrimination-enhancing (SDE) blocks.

mod ema;
mod pmf;
mod sde;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use ema::{em_m_step, EmaConfig, EmaModule, EmaTrace};
pub use pmf::{FusePath, Pmf};
pub use sde::{InterSde, IntraSde};

use crate::error::{config_err, Result};
use crate::tensor::{Conv3dSpec, ParamId, ParamKind, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Running statistics (EMA bases) are updated.
    Train,
    Infer,
}

/// Registers parameters with deterministic initialization.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    /// He-normal weights for a layer with `fan_in` inputs.
    fn he(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| T::of(normal.sample(self.rng)));
        self.store.register(name, t, ParamKind::Trainable)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, v: f64) -> Result<ParamId> {
        self.store.register(name, Tensor::full(shape, T::of(v)), ParamKind::Trainable)
    }

    /// Random rows of unit L2 norm.
    fn unit_rows(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamId> {
        let mut data: Vec<f64> = (0..rows * cols).map(|_| self.rng.random::<f64>() * 2.0 - 1.0).collect();
        for r in data.chunks_mut(cols) {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            r.iter_mut().for_each(|v| *v /= n);
        }
        let t = Tensor::new(vec![rows, cols], data.into_iter().map(T::of).collect())?;
        self.store.register(name, t, ParamKind::Buffer)
    }
}

/// Forward-pass context shared by all blocks.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
    pub mode: Mode,
    /// Buffer values to write back after a training forward.
    pub updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, mode: Mode) -> Self {
        Ctx { tape, params, mode, updates: Vec::new() }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    /// Fails with a numeric fault naming `layer` when `v` holds NaN or Inf.
    pub fn checked(&self, v: Var, layer: &str) -> Result<Var> {
        self.tape.value(v).check_finite(layer)?;
        Ok(v)
    }
}

/// A convolution layer: weight `Cout x Cin x k x k x k` and optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv3dSpec,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv3dSpec,
        bias: bool,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 {
            return Err(config_err!("conv `{}` needs positive channel counts, got {} -> {}", name, cin, cout));
        }
        let fan_in = cin * kernel.pow(3);
        let weight = b.he(format!("{name}.weight"), vec![cout, cin, kernel, kernel, kernel], fan_in)?;
        let bias = if bias { Some(b.constant(format!("{name}.bias"), vec![cout], 0.0)?) } else { None };
        Ok(Conv { weight, bias, spec, cin, cout, kernel })
    }

    /// 1x1x1, stride 1, with bias.
    pub fn pointwise<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Conv::new(b, name, cin, cout, 1, Conv3dSpec::same(1), true)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let bias = self.bias.map(|b| cx.p(b));
        cx.tape.conv3d(x, w, bias, self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel.pow(3) + if self.bias.is_some() { self.cout } else { 0 }
    }
}

/// Instance normalization affine parameters.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Norm {
            gain: b.constant(format!("{name}.gain"), vec![channels], 1.0)?,
            shift: b.constant(format!("{name}.shift"), vec![channels], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, s) = (cx.p(self.gain), cx.p(self.shift));
        cx.tape.instance_norm(x, g, s)
    }
}

/// Two (3x3x3 conv -> instance norm -> ReLU) stages. Preserves extents.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub path: String,
    pub in_channels: usize,
    pub out_channels: usize,
    convs: [Conv; 2],
    norms: [Norm; 2],
}

impl ConvBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, cin: usize, cout: usize) -> Result<Self> {
        let conv0 = Conv::new(b, &format!("{path}.conv0"), cin, cout, 3, Conv3dSpec::same(3), false)?;
        let norm0 = Norm::new(b, &format!("{path}.norm0"), cout)?;
        let conv1 = Conv::new(b, &format!("{path}.conv1"), cout, cout, 3, Conv3dSpec::same(3), false)?;
        let norm1 = Norm::new(b, &format!("{path}.norm1"), cout)?;
        Ok(ConvBlock {
            path: path.to_string(),
            in_channels: cin,
            out_channels: cout,
            convs: [conv0, conv1],
            norms: [norm0, norm1],
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = cx.tape.shape(x).get(1).copied();
        if c != Some(self.in_channels) {
            return Err(config_err!(
                "{}: expected {} input channels, got shape {:?}",
                self.path,
                self.in_channels,
                cx.tape.shape(x)
            ));
        }
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(cx, h)?;
            h = norm.forward(cx, h)?;
            h = cx.tape.relu(h);
        }
        cx.checked(h, &self.path)
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv::param_count).sum::<usize>() + 4 * self.out_channels
    }
}

/// Strided 3x3x3 convolution -> instance norm -> ReLU; halves each extent.
#[derive(Clone, Debug)]
pub struct DownConv {
    pub path: String,
    conv: Conv,
    norm: Norm,
}

impl DownConv {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(DownConv {
            path: path.to_string(),
            conv: Conv::new(b, &format!("{path}.conv"), cin, cout, 3, Conv3dSpec::down2(), false)?,
            norm: Norm::new(b, &format!("{path}.norm"), cout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(cx, x)?;
        let h = self.norm.forward(cx, h)?;
        let h = cx.tape.relu(h);
        cx.checked(h, &self.path)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + 2 * self.conv.cout
    }
}

/// Spatial extents `[D, H, W]` of a feature map variable.
pub fn extents_of<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<[usize; 3]> {
    let [_, _, d, h, w] = tape.value(v).dims5()?;
    Ok([d, h, w])
}
