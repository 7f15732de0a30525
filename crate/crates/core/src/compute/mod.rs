//! Small reverse-mode differentiation engine with the kernels the actor and
//! critic networks need, plus Adam and parameter checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod lstm;
pub mod param;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_difference_check, finite_difference_check_at};
pub use lstm::{lstm_cell, LstmVars};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Activation, Grads, Tape, Var};
pub use tensor::Tensor;
