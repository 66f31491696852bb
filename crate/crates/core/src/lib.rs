//! Le–Kendall SVD shape analysis under isotropic elliptical landmark
//! models: shape coordinates, zonal-polynomial shape densities for the
//! Gaussian and Kotz families, maximum-likelihood fitting, modified-BIC
//! model selection and a likelihood-ratio test for equal mean shape.

pub mod densities;
pub mod error;
pub mod numeric;
pub mod generators;
pub mod inference;
pub mod polyalg;
pub mod quad;
pub mod shape;

pub use error::{Error, Result};
