//! Minimal deterministic reverse-mode automatic differentiation over dense
//! `f64` arrays.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse. Parameters live outside the tape in a
//! [`ParamStore`] and are registered as leaves at the start of each pass, so
//! graphs with data-dependent shapes are simply rebuilt each time.
//!
//! ```
//! use flextsf_tensor::Tape;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(vec![1.0, 2.0], &[2]).unwrap();
//! let sq = tape.square(w);
//! let s = tape.sum(sq);
//! let loss = tape.scale(s, 0.5);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
//! ```

mod broadcast;
mod error;
pub mod optim;
mod params;
pub mod rng;
mod tape;

pub use error::{Result, TensorError};
pub use optim::{Adam, AdamConfig, StepOutcome};
pub use params::{accumulate, Param, ParamId, ParamStore, ParamVars};
pub use rng::RngState;
pub use tape::{BinaryOp, Diagnostics, Tape, UnaryOp, Var};
