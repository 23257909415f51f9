//! Synthetic layers and evaluation metrics.

mod eval;
mod synthetic;

pub use eval::{evaluate, ChannelMetrics, EvalReport};
pub use synthetic::{
    gen_synthetic, write_layer, CalibDist, LayerFiles, SyntheticLayer, SyntheticSpec, WeightDist,
};
