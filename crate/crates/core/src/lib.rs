//! Exogenous-guided continuous-time forecasting.
//!
//! Two coupled neural ODEs are integrated as one augmented system: an
//! exogenous latent `z_x`, seeded by a self-attention encoder over the
//! driving series, and a target latent `z`, seeded by a GRU over the target
//! history. The target latent evolves as `dz/dt = ln(pos(z_x) ⊙ pos(f(z)))`,
//! so the exogenous trajectory scales its dynamics multiplicatively. Because
//! the state is a continuous trajectory, forecasts can be read out at any
//! positive horizon, including fractional ones never seen in training.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod ode;
pub mod params;
pub mod par;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use par::Execution;
pub use tensor::Tensor;
