use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lr_at, region_loss, region_targets, Adam, AdamHyper, RunConfig};
use crate::data::{augment, preprocess, sample_patch, Study};
use crate::error::{input_err, Error, Result};
use crate::network::Network;
use crate::nn::Mode;
use crate::tensor::{save_checkpoint, ParamStore, Tape, Tensor};

/// Header of the per-epoch metrics log.
pub const METRICS_HEADER: &str = "epoch,lr,loss,dice_wt,dice_tc,dice_et";

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the epoch's steps.
    pub loss: f64,
    /// Training Dice of WT, TC, ET, pooled over the epoch's patches.
    pub dice: [f64; 3],
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.lr, self.loss, self.dice[0], self.dice[1], self.dice[2])
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `metrics.csv` and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many epochs without changing the schedule.
    pub stop_after_epochs: Option<usize>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub network: Network,
    pub params: ParamStore<f32>,
    pub log: Vec<EpochLog>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub config: RunConfig,
}

/// File name of the checkpoint written after `epoch` (0-based).
pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{:04}.ckpt", epoch + 1)
}

/// Name of the final checkpoint.
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains a network on labeled studies (raw intensities; preprocessing is
/// applied here). `TrainConfig::seed` drives initialization, crop sampling
/// and augmentation, so a fixed seed reproduces the run bitwise.
pub fn train(studies: &[Study], cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if studies.is_empty() {
        return Err(input_err!("training needs at least one study"));
    }
    let tc = &cfg.train;
    let mut cfg = cfg.clone();
    cfg.network.init_seed = tc.seed;
    let tc = cfg.train.clone();
    let prepared: Vec<Study> = studies
        .iter()
        .map(|s| {
            if s.label.is_none() {
                return Err(input_err!("study `{}` has no label", s.id));
            }
            preprocess(s, &tc.preprocess)
        })
        .collect::<Result<_>>()?;

    let (network, mut params) = Network::build::<f32>(&cfg.network)?;
    let mut adam = Adam::new(AdamHyper { betas: tc.betas, eps: tc.adam_eps, weight_decay: tc.weight_decay });
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let n = prepared.len();
    let steps = tc.steps_per_epoch.unwrap_or_else(|| n.div_ceil(tc.batch_size));
    let epochs = opts.stop_after_epochs.map_or(tc.epochs, |e| e.min(tc.epochs));
    let ckpt_config = serde_json::to_value(&cfg)?;

    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::with_capacity(epochs);
    let mut step_losses = Vec::with_capacity(epochs * steps);
    let [pd, ph, pw] = tc.patch;
    let pvol = pd * ph * pw;

    for epoch in 0..epochs {
        let lr = lr_at(epoch, &tc)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut overlap = [0.0f64; 3];
        let mut sizes = [0.0f64; 3];
        for step in 0..steps {
            let mut xs = Vec::with_capacity(tc.batch_size * 4 * pvol);
            let mut ys = Vec::with_capacity(tc.batch_size * 3 * pvol);
            for b in 0..tc.batch_size {
                let study = &prepared[order[(step * tc.batch_size + b) % n]];
                let patch = sample_patch(study, tc.patch, tc.fg_prob, &mut rng)?;
                let patch = augment(&patch, &tc.augment, &mut rng);
                xs.extend(patch.stacked());
                ys.extend(region_targets(&patch.label.as_ref().expect("labeled").data));
            }
            let shape = |c: usize| vec![tc.batch_size, c, pd, ph, pw];
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(shape(4), xs)?);
            let y = tape.constant(Tensor::new(shape(3), ys.clone())?);
            let out = network.forward(&mut tape, &params, x, Mode::Train)?;
            let loss = region_loss(&mut tape, out.logits, y)?;
            let lv = f64::from(tape.value(loss).data()[0]);
            if !lv.is_finite() {
                return Err(Error::NumericFault { layer: "loss".into(), detail: format!("loss is {lv} at epoch {epoch}, step {step}") });
            }
            // pooled training Dice from the thresholded logits
            for (i, (&z, &t)) in tape.value(out.logits).data().iter().zip(&ys).enumerate() {
                let c = (i / pvol) % 3;
                let p = f64::from(u8::from(z > 0.0));
                overlap[c] += p * f64::from(t);
                sizes[c] += p + f64::from(t);
            }
            let grads = tape.backward(loss)?;
            drop(tape);
            params.zero_grad();
            grads.accumulate_into(&mut params);
            for (_, p) in params.iter() {
                if let Some(g) = &p.grad {
                    if let Some(v) = g.iter().find(|v| !v.is_finite()) {
                        return Err(Error::NumericFault { layer: p.name.clone(), detail: format!("gradient holds {v}") });
                    }
                }
            }
            adam.update(&mut params, lr)?;
            Network::apply_updates(&mut params, out.updates)?;
            loss_sum += lv;
            step_losses.push(lv);
        }
        let dice = std::array::from_fn(|c| if sizes[c] > 0.0 { 2.0 * overlap[c] / sizes[c] } else { 1.0 });
        let row = EpochLog { epoch, lr, loss: loss_sum / steps as f64, dice };
        if opts.verbose {
            eprintln!(
                "epoch {:>4}  lr {:.3e}  loss {:.5}  dice wt {:.4} tc {:.4} et {:.4}",
                epoch, lr, row.loss, dice[0], dice[1], dice[2]
            );
        }
        let _ = writeln!(csv, "{}", row.csv_row());
        log.push(row);
        if let Some(dir) = &opts.out_dir {
            write_file(&dir.join("metrics.csv"), &csv)?;
            if tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0 {
                save_checkpoint(&dir.join(checkpoint_name(epoch)), &params, &ckpt_config)?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &params, &ckpt_config)?;
    }
    Ok(TrainOutcome { network, params, log, step_losses, config: cfg })
}
