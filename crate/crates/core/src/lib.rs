//! Transformer encoder whose attention layers predict, per input, how many
//! heads to run (a budget `s`) and which ones (a gated relevance distribution
//! `p`), together with the training objective, the exploration→exploitation
//! schedules and an analytic FLOPs/memory cost model.

pub mod attention;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod objective;
pub mod run;
pub mod schedules;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
