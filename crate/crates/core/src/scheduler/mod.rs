//! Collation, per-dataset FIFO caches, single-source batch training and
//! rotational evaluation.

pub mod adapter;
pub mod cache;
pub mod eval;
pub mod lr;
pub mod trainer;

pub use adapter::{AdaptedSample, CollationAdapter, RawSample};
pub use cache::{Batch, EngineState, FifoCache, Tagged};
pub use eval::{evaluate_split, rotate_eval};
pub use lr::LrSchedule;
pub use trainer::{backward_batch, epoch_rounds, train_step, EpochSummary, StepGrads, StepRecord, TrainOptions, Trainer};
