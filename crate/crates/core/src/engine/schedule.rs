use super::TrainConfig;
use crate::error::{config_err, Result};

/// Learning rate of `epoch`: linear warmup from `initial_lr / warmup_epochs`
/// up to `initial_lr`, then polynomial decay `(1 - epoch / epochs)^power`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(config_err!("epoch {} outside the schedule of {} epochs", epoch, cfg.epochs));
    }
    Ok(if epoch < cfg.warmup_epochs {
        cfg.initial_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        cfg.initial_lr * (1.0 - epoch as f64 / cfg.epochs as f64).powf(cfg.poly_power)
    })
}
