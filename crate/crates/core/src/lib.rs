//! Online recurrent learning: exact and sparse forward-mode gradient
//! propagation for small RNN/LSTM models, the streaming tasks used to
//! probe adaptation, and the metrics computed over training runs.

pub mod engines;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model_lstm;
pub mod model_rnn;
pub mod optim;
pub mod selection;
pub mod tasks;
pub mod tensor;

pub use engines::{EngineSpec, ParamGradient, RnnEngine};
pub use error::{Error, Result};
pub use model_lstm::{LstmEngine, LstmParams};
pub use model_rnn::RnnParams;
pub use optim::{Optimizer, OptimizerSpec};
pub use selection::Strategy;
pub use tasks::{StreamTask, TaskSpec};
pub use tensor::{JacobianState, Matrix, PropagationMask};
