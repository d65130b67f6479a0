//! Modeling, analysis, synthesis and simulation of automated driving loops
//! whose feedback passes through an imperfect perception stack.
//!
//! The perception stack is described by the errors it injects: Markov-switched
//! observation modes (e.g. misdetection), Gaussian measurement noise and a
//! bounded bias. Together with a linear error dynamics this yields a Markov
//! jump linear system with noisy, biased static output feedback:
//!
//! ```text
//! x(k+1) = A x(k) + B u(k)
//! y(k)   = C_r x(k) + D_r w(k) + E_r v(k),    r = r(k) ∈ {0, …, N-1}
//! u(k)   = K_r y(k)
//! ```
//!
//! The crate is organised as
//!
//! - [`model`]: plant, controller and closed-loop types;
//! - [`lmi`]: a small affine matrix inequality modeling layer with a dense
//!   interior-point semidefinite backend;
//! - [`analysis`]: mean-square stability certificates, the second-moment
//!   spectral-radius oracle and guaranteed-cost levels;
//! - [`synthesis`]: stabilizing and guaranteed-cost gain synthesis;
//! - [`sim`]: Markov/Gaussian rollouts and Monte Carlo statistics;
//! - [`scenarios`]: the car-following instance and the IDM baseline;
//! - [`cli`]: the batch front end used by the `pemadm` binary.
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod lmi;
pub mod matrix;
pub mod model;
pub mod scenarios;
pub mod sim;
pub mod synthesis;

pub use error::{Error, Result};
pub use model::{ClosedLoopModel, Controller, PemAdmModel, PerceptionMode, TransitionMatrix};
