//! Marker-based hand and object motion capture.
//!
//! The crate is organized around a synthetic-first pipeline:
//!
//! - [`geometry`]: camera models, triangulation, rigid registration and
//!   rotation parameterizations. Generic over the scalar type.
//! - [`marker`]: the two-character tag codebook, patch templates and the
//!   marker layout placed on the hand.
//! - [`hand`]: the procedural articulated hand (skeleton, capsule mesh,
//!   skinning, shape parameters).
//! - [`synth`]: camera rig synthesis and the detection simulator that turns
//!   scripted motion into per-camera corner/edge/block observations.
//! - [`assembly`]: edge-first block assembly, tag voting and corner
//!   identification.
//! - [`reconstruct`]: per-marker triangulation plus temporal cleanup.
//! - [`solver`]: marker-to-surface calibration and per-frame pose solving.
//! - [`object`]: rigid object pose from labeled markers.
//! - [`rubik`]: 2x2x2 cube state tracking and move reconstruction.
//! - [`filter`]: zero-phase low-pass filtering of solved tracks.
//! - [`metrics`]: reconstruction quality metrics and reports.
//! - [`pipeline`]: stage orchestration over an output directory with a
//!   content-hash manifest.
//!
//! Core math is generic over the scalar via [`scalar::Real`]; concrete
//! `f64`/`f32` aliases for the common geometry types live at the crate root.

pub mod assembly;
pub mod filter;
pub mod geometry;
pub mod hand;
pub mod io;
pub mod marker;
pub mod metrics;
pub mod object;
pub mod pipeline;
pub mod reconstruct;
pub mod rubik;
pub mod scalar;
pub mod solver;
pub mod synth;

/// Camera model in double precision, the pipeline's working type.
pub type CameraModel64 = geometry::CameraModel<f64>;
/// Camera model in single precision.
pub type CameraModel32 = geometry::CameraModel<f32>;
/// Rigid transform in double precision.
pub type RigidTransform64 = geometry::RigidTransform<f64>;
/// Rigid transform in single precision.
pub type RigidTransform32 = geometry::RigidTransform<f32>;
/// Six-number rotation parameterization in double precision.
pub type Rotation6D64 = geometry::Rotation6D<f64>;
/// Six-number rotation parameterization in single precision.
pub type Rotation6D32 = geometry::Rotation6D<f32>;
