//! Minimal reverse-mode differentiation, parameter storage and Adam.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub(crate) use params::ByteReader;
pub use params::{Param, ParamStore, Partition, PartitionSet};
pub use tape::{Gradients, Tape, UnaryFn, Var, EXP, GELU, LOG, TANH};
pub use tensor::Tensor;

use crate::error::Result;

/// Runs `f` on a fresh tape and returns its scalar value together with the
/// gradient of every parameter in a `trainable` partition.
pub fn evaluate_with_gradient<F>(params: &ParamStore, trainable: PartitionSet, f: F) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new(trainable);
    let out = f(&mut tape, params)?;
    let grads = tape.gradients(out)?;
    Ok((tape.scalar(out), grads))
}
