//! On-device RNN-T personalization toolkit.
//!
//! The crate bundles a small reverse-mode autodiff engine with byte-level
//! memory accounting, a down-scalable RNN-T model, the transducer loss, the
//! sliding-window training-cache schedule, split (two-phase) gradient
//! computation, and a session-driven personalization simulator.

pub mod cache;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod memory;
pub mod model;
pub mod split;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use cache::{effective_epoch, generate_schedule, session_window, CacheConfig, Schedule, ScheduleOptions, Session};
pub use error::{Error, Result};
pub use loss::{brute_force_loss, rnnt_loss, Lattice};
pub use memory::{peak_memory, Ledger, MemoryLedger};
pub use model::{GroupName, ModelConfig, ParamGroup, RnntModel};
pub use split::{combined_backward, memory_report, split_backward, MemoryReport, SplitOptions, SplitPlan, StepOutput};
pub use tape::{Gradients, Mode, OpKind, ParamId, Tape, Var};
pub use tensor::{DType, Tensor};
