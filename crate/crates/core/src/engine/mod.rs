//! Dense tensors, a reverse-mode tape, initializers, optimizers and
//! learning-rate schedules.

mod conv;
mod element;
mod init;
mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use conv::{conv_out_len, ConvGeom};
pub use element::{gemm, Element};
pub use init::{fans, glorot_normal};
pub use optim::{Moments, OptimizerKind, OptimizerState};
pub use params::{ParamKey, ParamStore};
pub use schedule::LrSchedule;
pub use tape::{ChannelStats, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Whether batch norm uses batch statistics (and updates running ones) or
/// the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
