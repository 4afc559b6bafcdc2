//! Rigid-object pose from identified markers.
//!
//! Objects carry coded marker patches just like the hand, so by the time a
//! frame reaches this module every 3D point already knows which canonical
//! marker it is. Pose recovery is plain rigid registration (Kabsch) between
//! the canonical positions and the observed ones, matched by id, solved
//! independently per frame. The residual left after alignment measures
//! reconstruction noise and surface deformation, not fit quality of a
//! temporal model: there is none here, smoothing happens downstream.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{kabsch_align, GeometryError, RigidTransform, TriMesh};
use crate::marker::MarkerId;

#[derive(Debug, Error)]
pub enum ObjectError {
    #[error("degenerate observation: {detail}")]
    DegenerateObservation { detail: String },
    #[error("object `{name}` needs >= 3 non-collinear canonical markers")]
    BadCanonicalMarkers { name: String },
    #[error("object `{name}` mesh is not watertight")]
    OpenMesh { name: String },
}

/// Physical footprint of the object, in the vocabulary the capture session
/// records for each prop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ShapeDescriptor {
    Cuboid { x: f64, y: f64, z: f64 },
    Cylinder { diameter: f64, height: f64 },
    Sphere { diameter: f64 },
}

/// A rigid prop: canonical marker seats in the object frame plus the surface
/// mesh used by contact metrics.
#[derive(Debug, Clone)]
pub struct RigidObjectModel {
    pub name: String,
    pub markers: BTreeMap<MarkerId, Vector3<f64>>,
    pub mesh: TriMesh,
    pub shape: ShapeDescriptor,
}

impl RigidObjectModel {
    pub fn validate(&self) -> Result<(), ObjectError> {
        let pts: Vec<Vector3<f64>> = self.markers.values().copied().collect();
        if !spans_a_plane(&pts) {
            return Err(ObjectError::BadCanonicalMarkers { name: self.name.clone() });
        }
        if !self.mesh.is_watertight() {
            return Err(ObjectError::OpenMesh { name: self.name.clone() });
        }
        Ok(())
    }
}

/// True when the points are not all within numerical noise of one line.
fn spans_a_plane(pts: &[Vector3<f64>]) -> bool {
    if pts.len() < 3 {
        return false;
    }
    let n = pts.len() as f64;
    let c: Vector3<f64> = pts.iter().sum::<Vector3<f64>>() / n;
    let mut best = Vector3::zeros();
    let mut best_norm = 0.0;
    for p in pts {
        let d = p - c;
        if d.norm() > best_norm {
            best_norm = d.norm();
            best = d;
        }
    }
    if best_norm < 1e-12 {
        return false;
    }
    let axis = best / best_norm;
    pts.iter().any(|p| {
        let d = p - c;
        (d - axis * d.dot(&axis)).norm() > 1e-9 * best_norm.max(1.0)
    })
}

/// Cuboid prop with a centered `grid x grid` marker patch on each of the six
/// faces, markers `spacing` apart, ids `{name}_{face}` with row-major
/// indices. Mesh is the cuboid itself.
pub fn cuboid_object(name: &str, dims: [f64; 3], grid: usize, spacing: f64) -> RigidObjectModel {
    let [x, y, z] = dims;
    let (hx, hy, hz) = (x / 2.0, y / 2.0, z / 2.0);
    let mut markers = BTreeMap::new();
    // (face tag, outward normal, in-face u axis, in-face v axis, center)
    let faces: [(&str, Vector3<f64>, Vector3<f64>, Vector3<f64>); 6] = [
        ("px", Vector3::x(), Vector3::y(), Vector3::z()),
        ("nx", -Vector3::x(), Vector3::z(), Vector3::y()),
        ("py", Vector3::y(), Vector3::z(), Vector3::x()),
        ("ny", -Vector3::y(), Vector3::x(), Vector3::z()),
        ("pz", Vector3::z(), Vector3::x(), Vector3::y()),
        ("nz", -Vector3::z(), Vector3::y(), Vector3::x()),
    ];
    let half = Vector3::new(hx, hy, hz);
    for (tag, normal, u, v) in faces {
        let center = normal.component_mul(&half);
        let off = (grid as f64 - 1.0) / 2.0;
        for i in 0..grid {
            for j in 0..grid {
                let p = center
                    + u * ((i as f64 - off) * spacing)
                    + v * ((j as f64 - off) * spacing);
                markers.insert(
                    MarkerId::new(format!("{name}_{tag}"), (i * grid + j) as u32),
                    p,
                );
            }
        }
    }

    let vertices = vec![
        Vector3::new(-hx, -hy, -hz),
        Vector3::new(hx, -hy, -hz),
        Vector3::new(hx, hy, -hz),
        Vector3::new(-hx, hy, -hz),
        Vector3::new(-hx, -hy, hz),
        Vector3::new(hx, -hy, hz),
        Vector3::new(hx, hy, hz),
        Vector3::new(-hx, hy, hz),
    ];
    let triangles = vec![
        // -z
        [0, 2, 1],
        [0, 3, 2],
        // +z
        [4, 5, 6],
        [4, 6, 7],
        // -y
        [0, 1, 5],
        [0, 5, 4],
        // +y
        [2, 3, 7],
        [2, 7, 6],
        // -x
        [0, 4, 7],
        [0, 7, 3],
        // +x
        [1, 2, 6],
        [1, 6, 5],
    ];
    RigidObjectModel {
        name: name.to_string(),
        markers,
        mesh: TriMesh { vertices, triangles },
        shape: ShapeDescriptor::Cuboid { x, y, z },
    }
}

/// One solved frame.
#[derive(Debug, Clone)]
pub struct ObjectPose {
    /// Object frame to world.
    pub transform: RigidTransform<f64>,
    /// Mean per-marker distance after alignment.
    pub residual: f64,
    /// Markers that participated in the fit.
    pub n_markers: usize,
    /// Observed ids the model does not know; skipped.
    pub ignored: usize,
}

/// Rigid pose of `model` explaining `observed`, matched by marker id.
pub fn solve_rigid_pose(
    observed: &BTreeMap<MarkerId, Vector3<f64>>,
    model: &RigidObjectModel,
) -> Result<ObjectPose, ObjectError> {
    let mut source = Vec::new();
    let mut target = Vec::new();
    let mut ignored = 0;
    for (id, pos) in observed {
        match model.markers.get(id) {
            Some(canon) => {
                source.push(*canon);
                target.push(*pos);
            }
            None => ignored += 1,
        }
    }
    let fit = kabsch_align(&source, &target).map_err(|e| match e {
        GeometryError::InsufficientPoints { got } => ObjectError::DegenerateObservation {
            detail: format!("{got} matched markers, need 3"),
        },
        GeometryError::DegeneratePointSet => ObjectError::DegenerateObservation {
            detail: "matched markers are collinear".to_string(),
        },
        other => ObjectError::DegenerateObservation { detail: other.to_string() },
    })?;
    Ok(ObjectPose {
        transform: fit.transform,
        residual: fit.mean_residual,
        n_markers: source.len(),
        ignored,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStats {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

/// Per-frame poses for a whole take. Degenerate frames (too few or collinear
/// markers) are recorded as `None` rather than aborting the take.
#[derive(Debug, Clone)]
pub struct ObjectTrack {
    pub frames: Vec<Option<ObjectPose>>,
    /// Residual statistics over the solvable frames; `None` if there were
    /// none.
    pub stats: Option<ResidualStats>,
}

pub fn marker_fit_residuals(
    frames: &[BTreeMap<MarkerId, Vector3<f64>>],
    model: &RigidObjectModel,
) -> ObjectTrack {
    let solved: Vec<Option<ObjectPose>> = frames
        .par_iter()
        .map(|obs| solve_rigid_pose(obs, model).ok())
        .collect();
    let residuals: Vec<f64> = solved
        .iter()
        .flatten()
        .map(|p| p.residual)
        .collect();
    let stats = if residuals.is_empty() {
        None
    } else {
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        let var = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let max = residuals.iter().fold(0.0f64, |a, &b| a.max(b));
        Some(ResidualStats { mean, std: var.sqrt(), max })
    };
    ObjectTrack { frames: solved, stats }
}

/// Row shape of the object track file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPoseRow {
    pub frame: usize,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub residual: f64,
    pub n_markers: usize,
}

impl ObjectPoseRow {
    pub fn from_pose(frame: usize, pose: &ObjectPose) -> Self {
        let m = &pose.transform.rotation;
        let mut r = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[row * 3 + col] = m[(row, col)];
            }
        }
        ObjectPoseRow {
            frame,
            r,
            t: pose.transform.translation.into(),
            residual: pose.residual,
            n_markers: pose.n_markers,
        }
    }
}
