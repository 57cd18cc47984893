//! Camera localization inside a learned radiance field.
//!
//! The crate trains a small neural radiance field on posed images of a
//! procedural scene, then recovers the camera pose of a query image by
//! running a conditioned pose-denoising process over a particle set and
//! polishing the survivors with photometric gradient descent.
//!
//! Modules roughly follow the data flow: [`datasets`] builds scenes and
//! posed image sets, [`autodiff`] and [`nn`] supply the differentiation
//! substrate, [`radiance`] renders and trains the field, [`conditioning`]
//! embeds query images, [`posediff`] owns the pose-denoising model,
//! [`refine`] does photometric alignment, [`localizer`] glues the pipeline
//! together, and [`eval`] measures it.

pub mod autodiff;
pub mod conditioning;
pub mod config;
pub mod datasets;
pub mod eval;
pub mod geometry;
pub mod localizer;
pub mod nn;
pub mod posediff;
pub mod radiance;
pub mod refine;
