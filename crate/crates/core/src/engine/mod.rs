//! Training (loss, schedule, optimizer, loop) and sliding-window inference
//! with flip averaging, label reconstruction and postprocessing.

mod adam;
mod config;
mod grid;
mod infer;
mod labels;
mod loss;
mod schedule;
mod train;

pub use adam::{adam_step, Adam, AdamHyper, AdamMoments};
pub use config::{InferConfig, RunConfig, TrainConfig, SEED_ENV};
pub use grid::{axis_starts, make_patch_grid, PatchGrid};
pub use infer::{
    center_crop, flip_views, infer_study, model_from_checkpoint, sliding_window, Ensemble, NetPredictor, Predictor,
};
pub use labels::{postprocess, region_targets, regions_to_labels, REGIONS};
pub use loss::{gdl_weights, region_loss, GDL_EPS};
pub use schedule::lr_at;
pub use train::{checkpoint_name, train, EpochLog, TrainOptions, TrainOutcome, FINAL_CHECKPOINT, METRICS_HEADER};
