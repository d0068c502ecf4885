//! Reverse-mode differentiation over dense matrices.
//!
//! Forward values are computed eagerly when a primitive is recorded on the
//! [`Tape`]; [`Tape::gradients`] walks the tape once in reverse. Parameters
//! live in a [`ParamStore`] and are read onto the tape by name, so several
//! tapes can share one read-only store and their [`Gradients`] can be reduced
//! afterwards in a fixed order.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{GradEntry, Gradients, Init, Param, ParamStore};
pub use tape::{NodeId, Tape};
