//! Per-pixel vehicle velocity fields from stabilized aerial video.
//!
//! The pipeline turns a sequence of registered grayscale frames into a map
//! that stores, for every pixel, a 2D histogram over vehicle velocities:
//!
//! 1. [`classify`] trains a boosted rectangle-sum pixel classifier and
//!    produces a car-likelihood response image per frame.
//! 2. [`detect`] blurs the response, grows regions around its local maxima
//!    and summarizes each region as an oriented detection.
//! 3. [`track`] links detections across three consecutive frames into short
//!    tracklets using kinematic gates and patch appearance scores.
//! 4. [`field`] deposits tracklet velocities into per-pixel histograms and
//!    renders modal speed and direction maps.
//!
//! [`register`] holds the frame-registration toolkit (polyprojective
//! transforms, robust case-deletion fitting, correlation grid matching and
//! residual displacement fields) used to stabilize the input video, and
//! [`sim`] is a synthetic traffic generator that provides frames with exact
//! ground truth for end-to-end validation.

pub mod classify;
pub mod config;
pub mod detect;
pub mod error;
pub mod field;
mod kvfile;
pub mod pipeline;
pub mod raster;
pub mod register;
pub mod sim;
pub mod track;

pub use error::{Error, Result};
