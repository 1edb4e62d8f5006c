mod conv;
mod elementwise;
mod norm;
mod pool;
mod resize;

pub use conv::ConvGeom;
pub use resize::{linear_taps, resize_spatial};
