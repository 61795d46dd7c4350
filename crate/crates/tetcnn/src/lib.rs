//! Spectral convolutional networks on tetrahedral meshes.
//!
//! The pipeline: parse or synthesize a tetrahedral mesh ([`tetmesh`]), assemble
//! the volumetric Laplace-Beltrami operator from cotangent stiffness and lumped
//! mass ([`lbo`]), build a Graclus coarsening hierarchy with binary-tree pooling
//! layout ([`coarsen`]), run Chebyshev spectral convolutions with exact
//! reverse-mode gradients ([`spectral`]), train a classification/regression
//! model ([`network`]), and extract Grad-CAM heatmaps ([`gradcam`]).
//! Synthetic shell datasets and operator caches live in [`dataset`] and
//! [`cache`].

pub mod cache;
pub mod coarsen;
pub mod dataset;
pub mod gradcam;
pub mod lbo;
pub mod network;
pub mod rng;
pub mod spectral;
pub mod tetmesh;
