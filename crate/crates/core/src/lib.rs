//! Regularized W1 distances between densities on a torus, represented by
//! truncated Fourier coefficients, and the barycenters they induce.

pub mod barycenter;
pub mod basis;
pub mod bounds;
pub mod density;
pub mod dual;
pub mod error;
pub mod fisher;
pub mod gaussdiag;
pub mod harness;
pub mod linalg;
pub mod oracles;

pub use basis::{BasisSpec, ConstraintGrid, FourierVec};
pub use error::{Error, Result};
