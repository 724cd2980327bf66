//! The acm control plane: FIFO gang scheduler, backends, autoscaler and the
//! task harness.

pub mod autoscaler;
pub mod backend;
pub mod events;
pub mod harness;
pub mod plane;
pub mod scenario;
pub mod scheduler;
pub mod simulation;
