//! Dense linear algebra, a tanh MLP with analytic backprop, Adam, seeded
//! random streams and a finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod net;
pub mod rng;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::grad_check;
pub use matrix::Matrix;
pub use net::{Activation, DenseNet, ForwardCache, Layer, LayerGrads, NetGrads};
pub use rng::Rng;
