//! Competitive ensembling of a segmentation student and a distance-regression
//! student into a mean-teacher network, with the geometry, data, metric and
//! training pieces around it.

pub mod data;
pub mod ensembling;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
