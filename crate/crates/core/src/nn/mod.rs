//! Minimal reverse-mode differentiation over dense `f64` matrices, the
//! parameter store that backs every model in the crate, and the Adam
//! optimizer.

mod adam;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use params::{init_normal, init_uniform_fan_in, Grads, ParamId, ParamStore};
pub use tape::{logistic, Tape, Var, LAYER_NORM_EPS};

pub type Mat = ndarray::Array2<f64>;
