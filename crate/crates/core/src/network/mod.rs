//! The assembled network.
//!
//! Full-resolution encoder blocks feed two strided entry convolutions, four
//! cascaded PMF modules with (2, 3, 4, 4) branches, an optional inter-scale
//! SDE block between the third and fourth module, recovery of all branches
//! to r/2, EM attention on the concatenation, recovery to full resolution
//! added to the encoder features, two decoder blocks and a 1x1x1 head
//! producing WT/TC/ET logits.

mod config;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{NetworkConfig, PMF_BRANCHES, SCALES, SPATIAL_MULTIPLE};

use crate::error::{input_err, Result};
use crate::nn::{Builder, Conv, ConvBlock, Ctx, DownConv, EmaModule, InterSde, Mode, Pmf};
use crate::tensor::{Checkpoint, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    encoder: [ConvBlock; 2],
    entry: [DownConv; 2],
    /// `transitions[k]` creates the extra branch entering PMF module `k`.
    transitions: Vec<Option<DownConv>>,
    pmf: Vec<Pmf>,
    inter_sde: Option<InterSde>,
    recover: Vec<Option<Conv>>,
    ema: EmaModule,
    fullres: Conv,
    decoder: [ConvBlock; 2],
    head: Conv,
}

/// Exact parameter count with a per-module breakdown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterReport {
    pub total: usize,
    pub modules: BTreeMap<String, usize>,
}

pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Buffer updates produced in train mode (EMA running bases).
    pub updates: Vec<(ParamId, Tensor<T>)>,
}

impl Network {
    /// Builds the network and registers freshly initialized parameters.
    pub fn build<T: Scalar>(config: &NetworkConfig) -> Result<(Network, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let w = |s| config.width(s);
        let c = config.base_channels;
        let encoder = [
            ConvBlock::new(&mut b, "enc.0", config.in_channels, c)?,
            ConvBlock::new(&mut b, "enc.1", c, c)?,
        ];
        let entry = [DownConv::new(&mut b, "entry.0", w(0), w(1))?, DownConv::new(&mut b, "entry.1", w(1), w(2))?];
        let sde_ratio = config.intra_sde.then_some(config.sde_ratio);
        let mut transitions = Vec::new();
        let mut pmf = Vec::new();
        let mut prev_branches = 0;
        for (k, &nb) in config.pmf_branches.iter().enumerate() {
            transitions.push(if k > 0 && nb > prev_branches {
                Some(DownConv::new(&mut b, &format!("transition{}", k + 1), w(nb - 1), w(nb))?)
            } else {
                None
            });
            let widths: Vec<usize> = (1..=nb).map(w).collect();
            pmf.push(Pmf::new(&mut b, &format!("pmf{}", k + 1), &widths, sde_ratio)?);
            prev_branches = nb;
        }
        let inter_sde = if config.inter_sde {
            Some(InterSde::new(&mut b, "inter_sde", &pmf[2].widths)?)
        } else {
            None
        };
        let last = pmf.last().expect("four modules");
        let recover = (0..last.branch_count())
            .map(|j| if j == 0 { Ok(None) } else { Conv::pointwise(&mut b, &format!("recover{j}"), w(j + 1), w(1)).map(Some) })
            .collect::<Result<_>>()?;
        let ema = EmaModule::new(&mut b, "ema", config.ema_channels(), config.ema)?;
        let fullres = Conv::pointwise(&mut b, "fullres", config.ema_channels(), c)?;
        let decoder = [ConvBlock::new(&mut b, "dec.0", c, c)?, ConvBlock::new(&mut b, "dec.1", c, c)?];
        let head = Conv::pointwise(&mut b, "head", c, config.out_channels)?;
        let net = Network {
            config: config.clone(),
            encoder,
            entry,
            transitions,
            pmf,
            inter_sde,
            recover,
            ema,
            fullres,
            decoder,
            head,
        };
        Ok((net, store))
    }

    /// Rebuilds a network from a checkpoint, verifying the stored config.
    pub fn from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<(Network, ParamStore<T>)> {
        // training stores the whole run config; the network part sits under "network"
        let raw = ckpt.config.get("network").unwrap_or(&ckpt.config);
        let config: NetworkConfig = serde_json::from_value(raw.clone())?;
        let (net, mut store) = Network::build::<T>(&config)?;
        ckpt.apply_to(&mut store)?;
        Ok((net, store))
    }

    pub fn ema(&self) -> &EmaModule {
        &self.ema
    }

    pub fn pmf_modules(&self) -> &[Pmf] {
        &self.pmf
    }

    pub fn inter_sde(&self) -> Option<&InterSde> {
        self.inter_sde.as_ref()
    }

    /// Maps N x 4 x D x H x W inputs to N x 3 x D x H x W region logits.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<ForwardOutput<T>> {
        let [_, c, d, h, w] = tape.value(x).dims5()?;
        if c != self.config.in_channels {
            return Err(input_err!("expected {} input channels, got {}", self.config.in_channels, c));
        }
        for (axis, e) in ["D", "H", "W"].iter().zip([d, h, w]) {
            if e == 0 || e % SPATIAL_MULTIPLE != 0 {
                return Err(input_err!("spatial extent {} = {} is not a positive multiple of {}", axis, e, SPATIAL_MULTIPLE));
            }
        }
        let mut cx = Ctx::new(tape, params, mode);
        let mut hcur = x;
        for blk in &self.encoder {
            hcur = blk.forward(&mut cx, hcur)?;
        }
        let full = hcur;
        let s1 = self.entry[0].forward(&mut cx, full)?;
        let s2 = self.entry[1].forward(&mut cx, s1)?;
        let mut branches = vec![s1, s2];
        for (k, module) in self.pmf.iter().enumerate() {
            if let Some(t) = &self.transitions[k] {
                let coarsest = *branches.last().expect("non-empty");
                branches.push(t.forward(&mut cx, coarsest)?);
            }
            branches = module.forward(&mut cx, &branches)?;
            if k == 2 {
                if let Some(sde) = &self.inter_sde {
                    branches = sde.forward(&mut cx, &branches)?;
                }
            }
        }
        let half = crate::nn::extents_of(cx.tape, branches[0])?;
        let mut mixed = Vec::with_capacity(branches.len());
        for (j, &bv) in branches.iter().enumerate() {
            mixed.push(match &self.recover[j] {
                None => bv,
                Some(conv) => {
                    let r = conv.forward(&mut cx, bv)?;
                    cx.tape.trilinear_upsample(r, half)?
                }
            });
        }
        let mixed = cx.tape.concat_channels(&mixed)?;
        let attended = self.ema.forward(&mut cx, mixed)?;
        let up = self.fullres.forward(&mut cx, attended)?;
        let up = cx.tape.trilinear_upsample(up, [d, h, w])?;
        let mut hcur = cx.tape.add(full, up)?;
        for blk in &self.decoder {
            hcur = blk.forward(&mut cx, hcur)?;
        }
        let logits = self.head.forward(&mut cx, hcur)?;
        let logits = cx.checked(logits, "head")?;
        Ok(ForwardOutput { logits, updates: cx.updates })
    }

    /// Inference-mode logits for a concrete input.
    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, params, x, Mode::Infer)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Writes train-mode buffer updates back into the store.
    pub fn apply_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, t) in updates {
            store.set(id, t)?;
        }
        Ok(())
    }

    pub fn count_parameters<T: Scalar>(&self, params: &ParamStore<T>) -> ParameterReport {
        let mut modules = BTreeMap::new();
        for (_, p) in params.iter() {
            if p.kind == crate::tensor::ParamKind::Trainable {
                let top = p.name.split('.').next().unwrap_or("").to_string();
                *modules.entry(top).or_insert(0) += p.tensor.numel();
            }
        }
        ParameterReport { total: modules.values().sum(), modules }
    }

    /// Parameter total derived from the layer structure, independent of the store.
    pub fn structural_param_count(&self) -> usize {
        self.encoder.iter().chain(&self.decoder).map(ConvBlock::param_count).sum::<usize>()
            + self.entry.iter().map(DownConv::param_count).sum::<usize>()
            + self.transitions.iter().flatten().map(DownConv::param_count).sum::<usize>()
            + self.pmf.iter().map(Pmf::param_count).sum::<usize>()
            + self.inter_sde.as_ref().map_or(0, InterSde::param_count)
            + self.recover.iter().flatten().map(Conv::param_count).sum::<usize>()
            + self.ema.param_count()
            + self.fullres.param_count()
            + self.head.param_count()
    }

    /// Multiply-accumulate count of one forward pass on a single input of
    /// the given extents (convolutions and matrix products only).
    pub fn estimate_macs(&self, params: &ParamStore<f32>, extents: [usize; 3]) -> Result<u64> {
        let mut tape = Tape::inference();
        let input = Tensor::zeros(vec![1, self.config.in_channels, extents[0], extents[1], extents[2]]);
        let x = tape.constant(input);
        self.forward(&mut tape, params, x, Mode::Infer)?;
        Ok(tape.macs())
    }
}
