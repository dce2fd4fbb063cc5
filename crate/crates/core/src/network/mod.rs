//! x-vector networks: TDNN, extended TDNN, factorized TDNN and the
//! multi-stage-aggregation variant, with exact gradients.

mod model;
pub mod ops;
mod spec;

pub use model::{
    ForwardOptions, ForwardOutput, FrameBatch, Gradients, Mode, Network, Param, ParamRole, Pooling,
    ReluPatterns, Tape,
};
pub use spec::{
    build_architecture, ArchDims, ArchOptions, Architecture, Context, LayerGeometry, LayerKind,
    LayerSpec, Level, NetworkSpec, Skip, SkipMode, INPUT,
};
