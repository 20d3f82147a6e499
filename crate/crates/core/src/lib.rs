//! Rotation-equivariant channel attention, attentional feature fusion and
//! feature pyramids over the cyclic groups C1, C2 and C4.

pub mod autograd;
pub mod error;
pub mod groupequiv;
pub mod harness;
pub mod io;
pub mod oracle;
pub mod params;
pub mod pyramid;
pub mod reaff;
pub mod reca;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use groupequiv::ReFeatureMap;
pub use rng::Rng;
pub use tensor::Tensor;
