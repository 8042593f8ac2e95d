pub mod calibration;
pub mod closed_form;
pub mod descent;
pub mod error;
pub mod linalg;
pub mod nc_metrics;
pub mod spectral;
pub mod theory_checks;
pub mod ufm;

pub use error::{Result, UfmError};
