//! Loss composition, optimization, training loop and evaluation metrics.

mod bench;
mod eval;
mod loss;
mod metrics;
mod optim;
mod train;

pub use bench::{bench, BenchReport, TIMER_NOTE};
pub use eval::{evaluate, EvalReport, EvalSummary, UtteranceRecord};
pub use loss::{total_loss, total_loss_on, LossBreakdown, LossWeights};
pub use metrics::{boundary_alignment, boundary_steps, cer, BoundaryHits, ErrorCounts};
pub use optim::{clip_grad_norm, grad_norm, learning_rate, Adam, AdamConfig};
pub use train::{EpochRecord, StepRecord, TrainConfig, TrainEvent, TrainSummary, Trainer};
