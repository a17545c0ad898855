//! Semantic segmentation of desk-scale indoor point clouds.
//!
//! The pipeline groups points with an exact k-d tree, derives
//! rotation-aware geometric descriptors (covariance eigenvalues, relative
//! angles, local density, color statistics), and feeds them through a
//! five-stage encoder/decoder built on a small reverse-mode autodiff
//! engine.  Boundary-aware supervision (a contrastive loss over mined
//! class boundaries) sharpens predictions where classes meet.

pub mod autodiff;
pub mod boundary;
pub mod error;
pub mod geom;
pub mod geomfeat;
pub mod gradcheck;
pub mod network;
pub mod pointcloud;
pub mod spatial;
pub mod training;

pub use error::{Error, Result};
