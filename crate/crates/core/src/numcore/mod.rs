//! Dense f64 tensors, a define-by-run reverse-mode tape, a parameter store
//! with trainable/frozen tags, and Adam.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use params::{ParamId, Parameter, ParameterStore};
pub use tape::{Tape, Var};
pub(crate) use tape::sigmoid;
pub use tensor::Tensor;
