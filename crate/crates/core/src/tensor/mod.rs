//! Dense matrix arithmetic with reverse-mode gradient accumulation.

pub mod fdcheck;
pub mod matrix;
pub mod param;
pub mod tape;

pub use fdcheck::finite_diff_check;
pub use matrix::DenseMatrix;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{NodeId, Tape};
