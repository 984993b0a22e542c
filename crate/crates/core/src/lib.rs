//! GMM estimation under arbitrary weighting, misspecification-robust
//! inference, and audits of how much the choice of weighting matrix can move
//! an estimate or a t-statistic, measured in units of the J-statistic.

pub mod audit;
pub mod dgp;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod limit;
pub mod linalg;
pub mod mc;
pub mod moments;
pub mod rng;
pub mod weights;

pub use error::{GmmError, Result};
