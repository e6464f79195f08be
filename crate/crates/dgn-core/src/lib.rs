//! Dual-grid registration of an articulated hand mesh to depth maps.
//!
//! The crate couples two regular 2D lattices: the *image grid* (depth map
//! pixels) and the *mesh grid*, a discretization of a 2D multidimensional
//! scaling embedding of the mesh surface. Features move between the grids
//! through differentiable scatter (*extension*) and gather (*sampling*)
//! operators, and the mesh itself is registered to depth observations by
//! minimizing an ICP-style model-fitting energy with kinematic priors.
//!
//! Pipeline stages:
//!
//! 1. [`mesh`] — rigged triangle mesh with skeleton, skinning weights and
//!    surface geodesics.
//! 2. [`embedding`] — 2D mesh coordinates via classical MDS + SMACOF stress
//!    majorization, and the continuous↔discrete mesh-grid mapping.
//! 3. [`dualgrid`] — extension/sampling operators with analytic gradients.
//! 4. [`kinematics`] — closed-form per-part similarity fits (SVD), linear
//!    blend skinning, forward-kinematics compose/decompose, vertex refinement.
//! 5. [`energy`] — data (ICP, lifting), prior (collision, rigidity, offset)
//!    and multi-view consistency terms with analytic gradients.
//! 6. [`synth`] — pinhole depth rasterization, corruption, multi-view scenes.
//! 7. [`fitter`] — first-order pose optimization with backtracking line search.
//! 8. [`evalkit`] — joint-error metrics, success curves, reports.

pub mod assets;
pub mod dualgrid;
pub mod embedding;
pub mod energy;
mod error;
pub mod evalkit;
pub mod fitter;
pub mod gradcheck;
pub mod kinematics;
pub mod mesh;
pub mod synth;

pub use dualgrid::{GridFeatureMap, ScatterPoint};
pub use embedding::MeshEmbedding;
pub use energy::{EnergyReport, EnergyWeights};
pub use error::{Error, Result};
pub use fitter::{FitConfig, FitResult};
pub use kinematics::{PoseParams, SimilarityTransform};
pub use mesh::{Joint, RiggedMesh, SurfaceGraph};
pub use synth::{Camera, DepthFrame, Scene};
