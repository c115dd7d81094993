mod conv;
mod linalg;
mod norm;
mod pointwise;
mod resample;
mod shape;

pub use conv::{conv_out_extent, Conv3dSpec};
pub use norm::INSTANCE_NORM_EPS;
pub use pointwise::sigmoid;
