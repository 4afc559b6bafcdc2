//! Articulated hand model: skeleton, shape space, and skinned surface.
//!
//! The hand is procedural. A small config of rest measurements defines a
//! 16-joint skeleton (wrist root plus three joints per digit); a 10-number
//! shape vector `beta` warps those measurements; 27 pose angles `phi` drive
//! the joints. The surface is a set of capsule shells around the phalanges
//! plus a superellipsoid slab for the palm body, concatenated rather than
//! fused. Mesh vertices are closed-form in the skeleton, so the same
//! formulas evaluate under plain `f64` or dual numbers, which is what the
//! shape and pose fits differentiate through.
//!
//! Canonical frame: wrist at the origin, fingers along +x, thumb side +y,
//! back of the hand +z. Everything is in meters and radians.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{rot_x, rot_y, rot_z, RigidTransform};
use crate::marker::{MarkerId, MarkerLayout};
use crate::scalar::{Adam, Dual, Real};

pub const PHI_DOFS: usize = 27;
pub const BETA_DOFS: usize = 10;
pub const NUM_SEGMENTS: usize = 17;

/// Dorsum and palm are both rigid to the wrist; they exist as separate
/// segments only so surface regions can be addressed independently.
pub const DORSUM: usize = 0;
pub const PALM: usize = 1;

pub const SEGMENT_NAMES: [&str; NUM_SEGMENTS] = [
    "dorsum",
    "palm",
    "thumb_proximal",
    "thumb_middle",
    "thumb_distal",
    "index_proximal",
    "index_middle",
    "index_distal",
    "middle_proximal",
    "middle_middle",
    "middle_distal",
    "ring_proximal",
    "ring_middle",
    "ring_distal",
    "pinky_proximal",
    "pinky_middle",
    "pinky_distal",
];

pub const FINGER_NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];

/// Segment indices of one digit's proximal/middle/distal phalanges.
pub fn finger_segments(finger: usize) -> [usize; 3] {
    let base = 2 + 3 * finger;
    [base, base + 1, base + 2]
}

/// Rest-pose measurements of the default hand, in meters.
///
/// Positions are knuckle (MCP) centers in the canonical frame; lengths are
/// joint-to-joint per phalanx, distal length running to the fingertip.
#[derive(Debug, Clone)]
pub struct HandConfig {
    /// Index, middle, ring, pinky MCP centers.
    pub mcp_positions: [[f64; 3]; 4],
    /// Per finger: proximal, middle, distal phalanx lengths.
    pub finger_lengths: [[f64; 3]; 4],
    pub thumb_base: [f64; 3],
    /// Rest direction of the thumb chain (normalized at build time).
    pub thumb_direction: [f64; 3],
    pub thumb_lengths: [f64; 3],
    /// Capsule radii per phalanx kind for the four fingers.
    pub finger_radii: [f64; 3],
    pub thumb_radii: [f64; 3],
    /// Palm slab half extents (length, width, thickness).
    pub palm_half_extents: [f64; 3],
    pub palm_center: [f64; 3],
    /// Superellipsoid exponent; 2 is an ellipsoid, higher is boxier.
    pub palm_exponent: f64,
    // Tessellation.
    pub capsule_sectors: usize,
    pub capsule_shaft_bands: usize,
    pub capsule_cap_bands: usize,
    pub slab_lat_bands: usize,
    pub slab_lon_sectors: usize,
}

impl Default for HandConfig {
    fn default() -> Self {
        HandConfig {
            mcp_positions: [
                [0.088, 0.022, 0.0],
                [0.092, 0.0, 0.0],
                [0.086, -0.021, 0.0],
                [0.076, -0.040, 0.0],
            ],
            finger_lengths: [
                [0.042, 0.025, 0.020],
                [0.046, 0.028, 0.022],
                [0.042, 0.026, 0.021],
                [0.033, 0.020, 0.018],
            ],
            thumb_base: [0.027, 0.040, 0.0],
            thumb_direction: [0.5, 0.85, 0.0],
            thumb_lengths: [0.045, 0.030, 0.025],
            // Uniform radius along each digit: a thicker parent's joint cap
            // would bulge past the joint and swallow the first marker row of
            // the next phalanx, leaving those markers permanently occluded.
            finger_radii: [0.008, 0.008, 0.008],
            thumb_radii: [0.0095, 0.0095, 0.0095],
            // Slab ends short of the knuckle line and the thumb base so
            // phalanx markers never sit inside the palm volume.
            palm_half_extents: [0.038, 0.045, 0.012],
            palm_center: [0.034, -0.003, 0.0],
            palm_exponent: 4.0,
            capsule_sectors: 10,
            capsule_shaft_bands: 5,
            capsule_cap_bands: 3,
            slab_lat_bands: 12,
            slab_lon_sectors: 24,
        }
    }
}

/// Lower/upper bounds per pose angle, radians.
pub fn phi_limits() -> [(f64, f64); PHI_DOFS] {
    let mut lim = [(0.0, 0.0); PHI_DOFS];
    // Thumb base and middle joints get full flex/abduction/twist ranges.
    lim[0] = (-0.8, 1.6);
    lim[1] = (-0.8, 0.8);
    lim[2] = (-0.8, 0.8);
    lim[3] = (-0.8, 1.6);
    lim[4] = (-0.8, 0.8);
    lim[5] = (-0.8, 0.8);
    lim[6] = (-0.1, 1.4);
    for f in 0..4 {
        let b = 7 + 5 * f;
        lim[b] = (-0.5, 1.7); // MCP flex
        lim[b + 1] = (-0.35, 0.35); // MCP abduction
        lim[b + 2] = (-0.2, 0.2); // MCP twist
        lim[b + 3] = (-0.1, 1.9); // PIP flex
        lim[b + 4] = (-0.1, 1.6); // DIP flex
    }
    lim
}

pub fn phi_name(i: usize) -> String {
    let (finger, local) = if i < 7 { (0, i) } else { (1 + (i - 7) / 5, (i - 7) % 5) };
    let joint = if finger == 0 {
        ["mcp_flex", "mcp_abd", "mcp_twist", "pip_flex", "pip_abd", "pip_twist", "dip_flex"][local]
    } else {
        ["mcp_flex", "mcp_abd", "mcp_twist", "pip_flex", "dip_flex"][local]
    };
    format!("{}_{}", FINGER_NAMES[finger], joint)
}

/// One segment's rest placement and articulation slots.
#[derive(Debug, Clone)]
pub struct SegRest<T> {
    /// Parent segment; `None` means rigid to the wrist root.
    pub parent: Option<usize>,
    /// Translation from the parent joint frame, rest pose.
    pub offset: Vector3<T>,
    /// Fixed rest rotation (thumb chain tilt); identity elsewhere.
    pub rest_rot: Matrix3<T>,
    /// Bone length along local +x; zero for dorsum/palm.
    pub len: T,
    pub radius: T,
    /// Rest placement in the canonical frame.
    pub origin: Vector3<T>,
    pub rot: Matrix3<T>,
    pub dof_flex: Option<usize>,
    pub dof_abd: Option<usize>,
    pub dof_twist: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Skeleton<T> {
    pub segs: Vec<SegRest<T>>,
}

/// Palm slab dimensions after shape warping.
#[derive(Debug, Clone)]
pub struct ShapeDims<T> {
    pub slab_half: Vector3<T>,
    pub slab_center: Vector3<T>,
}

fn lift_vec<T: Real>(v: [f64; 3]) -> Vector3<T> {
    Vector3::new(T::c(v[0]), T::c(v[1]), T::c(v[2]))
}

/// Build the rest skeleton for a shape vector.
///
/// `beta` slots: 0 global scale, 1..=5 per-digit length (thumb first),
/// 6 palm width, 7 palm length, 8 digit radius, 9 palm thickness. Each unit
/// is a 5% change, so coefficients behave like z-scores.
pub fn skeleton_from_beta<T: Real>(
    config: &HandConfig,
    beta: &[T; BETA_DOFS],
) -> (Skeleton<T>, ShapeDims<T>) {
    let pct = T::c(0.05);
    let scale = |b: T| T::one() + pct * b;
    let g = scale(beta[0]);
    let width = scale(beta[6]) * g;
    let length = scale(beta[7]) * g;
    let rad = scale(beta[8]) * g;
    let thick = scale(beta[9]) * g;

    let mut segs: Vec<SegRest<T>> = Vec::with_capacity(NUM_SEGMENTS);
    for _ in 0..2 {
        segs.push(SegRest {
            parent: None,
            offset: Vector3::zeros(),
            rest_rot: Matrix3::identity(),
            len: T::zero(),
            radius: T::zero(),
            origin: Vector3::zeros(),
            rot: Matrix3::identity(),
            dof_flex: None,
            dof_abd: None,
            dof_twist: None,
        });
    }

    let scale_pos = |p: [f64; 3]| Vector3::new(T::c(p[0]) * length, T::c(p[1]) * width, T::c(p[2]));

    for finger in 0..5 {
        let digit_len = scale(beta[1 + finger]) * g;
        let (base, rest_rot, lengths, radii): (Vector3<T>, Matrix3<T>, [f64; 3], [f64; 3]) =
            if finger == 0 {
                let d = config.thumb_direction;
                let tilt = d[1].atan2(d[0]);
                (
                    scale_pos(config.thumb_base),
                    rot_z(T::c(tilt)),
                    config.thumb_lengths,
                    config.thumb_radii,
                )
            } else {
                (
                    scale_pos(config.mcp_positions[finger - 1]),
                    Matrix3::identity(),
                    config.finger_lengths[finger - 1],
                    config.finger_radii,
                )
            };

        let dofs: [[Option<usize>; 3]; 3] = if finger == 0 {
            // (flex, abd, twist) per joint
            [[Some(0), Some(1), Some(2)], [Some(3), Some(4), Some(5)], [Some(6), None, None]]
        } else {
            let b = 7 + 5 * (finger - 1);
            [[Some(b), Some(b + 1), Some(b + 2)], [Some(b + 3), None, None], [Some(b + 4), None, None]]
        };

        for part in 0..3 {
            let parent = if part == 0 { DORSUM } else { segs.len() - 1 };
            let offset = if part == 0 {
                base
            } else {
                Vector3::new(segs[segs.len() - 1].len, T::zero(), T::zero())
            };
            let rest_rot = if part == 0 { rest_rot } else { Matrix3::identity() };
            let p = &segs[parent];
            let origin = p.origin + p.rot * offset;
            let rot = p.rot * rest_rot;
            segs.push(SegRest {
                parent: Some(parent),
                offset,
                rest_rot,
                len: T::c(lengths[part]) * digit_len,
                radius: T::c(radii[part]) * rad,
                origin,
                rot,
                dof_flex: dofs[part][0],
                dof_abd: dofs[part][1],
                dof_twist: dofs[part][2],
            });
        }
    }

    let half = config.palm_half_extents;
    let dims = ShapeDims {
        slab_half: Vector3::new(T::c(half[0]) * length, T::c(half[1]) * width, T::c(half[2]) * thick),
        slab_center: scale_pos(config.palm_center),
    };
    (Skeleton { segs }, dims)
}

/// Pose every segment: `root` carries the wrist into the world, `phi` bends
/// the joints. Output index matches [`SEGMENT_NAMES`].
pub fn segment_transforms<T: Real>(
    skel: &Skeleton<T>,
    root: &RigidTransform<T>,
    phi: &[T],
) -> Vec<RigidTransform<T>> {
    assert_eq!(phi.len(), PHI_DOFS);
    let mut out: Vec<RigidTransform<T>> = Vec::with_capacity(skel.segs.len());
    for seg in &skel.segs {
        let mut rot = seg.rest_rot;
        // Twist about the bone, abduct sideways, then flex toward the palm.
        if let Some(i) = seg.dof_twist {
            rot = rot * rot_x(phi[i]);
        }
        if let Some(i) = seg.dof_abd {
            rot = rot * rot_z(phi[i]);
        }
        if let Some(i) = seg.dof_flex {
            rot = rot * rot_y(phi[i]);
        }
        let local = RigidTransform::new(rot, seg.offset);
        let posed = match seg.parent {
            Some(p) => out[p].compose(&local),
            None => root.compose(&local),
        };
        out.push(posed);
    }
    out
}

/// Per-vertex skinning weights; at most two segments blend.
#[derive(Debug, Clone, Copy)]
pub struct VertexWeights {
    pub segments: [u16; 2],
    pub weights: [f64; 2],
}

impl VertexWeights {
    fn rigid(segment: usize) -> Self {
        VertexWeights { segments: [segment as u16, 0], weights: [1.0, 0.0] }
    }

    fn blend(a: usize, wa: f64, b: usize) -> Self {
        VertexWeights { segments: [a as u16, b as u16], weights: [wa, 1.0 - wa] }
    }

    pub fn is_rigid_to(&self, segment: usize) -> bool {
        self.weights[1] == 0.0 && self.segments[0] as usize == segment
    }
}

/// Closed-form recipe for one vertex position given a skeleton and dims.
///
/// All trig of fixed tessellation angles is frozen in as `f64`, so the
/// position is linear in segment origin, length, and radius: cheap and safe
/// to differentiate.
#[derive(Debug, Clone, Copy)]
pub enum VertexSpec {
    Capsule {
        segment: u16,
        /// Shaft fraction of the axial coordinate.
        ax_frac: f64,
        /// Radius multiple added axially (caps bulge past the joints).
        ax_r: f64,
        /// Radius multiple of the radial offset.
        radial: f64,
        cos_psi: f64,
        sin_psi: f64,
    },
    Slab { fx: f64, fy: f64, fz: f64 },
}

pub fn vertex_position<T: Real>(
    spec: &VertexSpec,
    skel: &Skeleton<T>,
    dims: &ShapeDims<T>,
) -> Vector3<T> {
    match *spec {
        VertexSpec::Capsule { segment, ax_frac, ax_r, radial, cos_psi, sin_psi } => {
            let s = &skel.segs[segment as usize];
            let x = T::c(ax_frac) * s.len + T::c(ax_r) * s.radius;
            let r = T::c(radial) * s.radius;
            let local = Vector3::new(x, r * T::c(sin_psi), r * T::c(cos_psi));
            s.origin + s.rot * local
        }
        VertexSpec::Slab { fx, fy, fz } => {
            dims.slab_center
                + Vector3::new(
                    dims.slab_half.x * T::c(fx),
                    dims.slab_half.y * T::c(fy),
                    dims.slab_half.z * T::c(fz),
                )
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SkinnedMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    /// Segment label per triangle (surface region, drives marker placement).
    pub tri_segment: Vec<u16>,
    pub weights: Vec<VertexWeights>,
}

impl SkinnedMesh {
    pub fn triangle_vertices(&self, tri: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[tri];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn triangle_normal(&self, tri: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle_vertices(tri);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vector3::zeros()
        }
    }
}

struct MeshBuilder<'a> {
    mesh: SkinnedMesh,
    specs: Vec<VertexSpec>,
    skel: &'a Skeleton<f64>,
    dims: &'a ShapeDims<f64>,
}

impl MeshBuilder<'_> {
    fn add_vertex(&mut self, spec: VertexSpec, weights: VertexWeights) -> u32 {
        let idx = self.mesh.vertices.len() as u32;
        self.mesh.vertices.push(vertex_position(&spec, self.skel, self.dims));
        self.mesh.weights.push(weights);
        self.specs.push(spec);
        idx
    }

    fn add_tri(&mut self, a: u32, b: u32, c: u32, segment: usize) {
        self.mesh.triangles.push([a, b, c]);
        self.mesh.tri_segment.push(segment as u16);
    }
}

fn build_mesh(
    config: &HandConfig,
    skel: &Skeleton<f64>,
    dims: &ShapeDims<f64>,
) -> (SkinnedMesh, Vec<VertexSpec>) {
    let mut b = MeshBuilder { mesh: SkinnedMesh::default(), specs: Vec::new(), skel, dims };

    build_slab(config, &mut b);
    for seg in 2..NUM_SEGMENTS {
        build_capsule(config, seg, &mut b);
    }

    (b.mesh, b.specs)
}

fn build_slab(config: &HandConfig, b: &mut MeshBuilder<'_>) {
    let nlat = config.slab_lat_bands;
    let nlon = config.slab_lon_sectors;
    let n = config.palm_exponent;
    // Power-warped sphere parameterization of |x/a|^n + |y/b|^n + |z/c|^n = 1.
    let f = |t: f64| t.signum() * t.abs().powf(2.0 / n);
    let w = VertexWeights::rigid(DORSUM);

    let bottom = b.add_vertex(VertexSpec::Slab { fx: 0.0, fy: 0.0, fz: -1.0 }, w);
    let mut rings: Vec<Vec<u32>> = Vec::new();
    for k in 1..nlat {
        let phi = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * k as f64 / nlat as f64;
        let mut ring = Vec::with_capacity(nlon);
        for m in 0..nlon {
            let theta = std::f64::consts::TAU * m as f64 / nlon as f64;
            let spec = VertexSpec::Slab {
                fx: f(phi.cos() * theta.cos()),
                fy: f(phi.cos() * theta.sin()),
                fz: f(phi.sin()),
            };
            ring.push(b.add_vertex(spec, w));
        }
        rings.push(ring);
    }
    let top = b.add_vertex(VertexSpec::Slab { fx: 0.0, fy: 0.0, fz: 1.0 }, w);

    let label = |b: &MeshBuilder<'_>, tri: [u32; 3]| {
        let c = (b.mesh.vertices[tri[0] as usize]
            + b.mesh.vertices[tri[1] as usize]
            + b.mesh.vertices[tri[2] as usize])
            / 3.0;
        if c.z >= b.dims.slab_center.z {
            DORSUM
        } else {
            PALM
        }
    };

    for m in 0..nlon {
        let m1 = (m + 1) % nlon;
        let tri = [bottom, rings[0][m1], rings[0][m]];
        let seg = label(b, tri);
        b.add_tri(tri[0], tri[1], tri[2], seg);
    }
    for k in 0..rings.len() - 1 {
        for m in 0..nlon {
            let m1 = (m + 1) % nlon;
            let (l0, l1) = (rings[k][m], rings[k][m1]);
            let (u0, u1) = (rings[k + 1][m], rings[k + 1][m1]);
            for tri in [[l0, u1, u0], [l0, l1, u1]] {
                let seg = label(b, tri);
                b.add_tri(tri[0], tri[1], tri[2], seg);
            }
        }
    }
    let last = rings.len() - 1;
    for m in 0..nlon {
        let m1 = (m + 1) % nlon;
        let tri = [top, rings[last][m], rings[last][m1]];
        let seg = label(b, tri);
        b.add_tri(tri[0], tri[1], tri[2], seg);
    }
}

/// Blend fraction at a capsule cap tip; caps fade toward the neighboring
/// segment so the shells articulate without tearing. Shaft vertices stay
/// rigid, which keeps every marker patch on a rigidly skinned region.
const CAP_BLEND: f64 = 0.6;

fn build_capsule(config: &HandConfig, seg: usize, b: &mut MeshBuilder<'_>) {
    let sectors = config.capsule_sectors;
    let shaft = config.capsule_shaft_bands;
    let caps = config.capsule_cap_bands;
    let parent = b.skel.segs[seg].parent.expect("capsule segments have parents");
    let is_distal = (seg - 2) % 3 == 2;
    let child = if is_distal { None } else { Some(seg + 1) };

    // Axial profile from proximal tip to distal tip: (ax_frac, ax_r, radial).
    let mut profile: Vec<(f64, f64, f64)> = Vec::new();
    profile.push((0.0, -1.0, 0.0));
    for k in 1..caps {
        let a = std::f64::consts::FRAC_PI_2 * k as f64 / caps as f64;
        profile.push((0.0, -a.cos(), a.sin()));
    }
    for j in 0..=shaft {
        profile.push((j as f64 / shaft as f64, 0.0, 1.0));
    }
    for k in (1..caps).rev() {
        let a = std::f64::consts::FRAC_PI_2 * k as f64 / caps as f64;
        profile.push((1.0, a.cos(), a.sin()));
    }
    profile.push((1.0, 1.0, 0.0));

    let weights_for = |ax_r: f64| -> VertexWeights {
        if ax_r < 0.0 {
            VertexWeights::blend(seg, 1.0 - CAP_BLEND * (-ax_r), parent)
        } else if ax_r > 0.0 {
            match child {
                Some(c) => VertexWeights::blend(seg, 1.0 - CAP_BLEND * ax_r, c),
                None => VertexWeights::rigid(seg),
            }
        } else {
            VertexWeights::rigid(seg)
        }
    };

    let mut rings: Vec<Vec<u32>> = Vec::with_capacity(profile.len());
    for &(ax_frac, ax_r, radial) in &profile {
        let w = weights_for(ax_r);
        if radial == 0.0 {
            let spec = VertexSpec::Capsule {
                segment: seg as u16,
                ax_frac,
                ax_r,
                radial,
                cos_psi: 1.0,
                sin_psi: 0.0,
            };
            rings.push(vec![b.add_vertex(spec, w)]);
        } else {
            let mut ring = Vec::with_capacity(sectors);
            for m in 0..sectors {
                let psi = std::f64::consts::TAU * m as f64 / sectors as f64;
                let spec = VertexSpec::Capsule {
                    segment: seg as u16,
                    ax_frac,
                    ax_r,
                    radial,
                    cos_psi: psi.cos(),
                    sin_psi: psi.sin(),
                };
                ring.push(b.add_vertex(spec, w));
            }
            rings.push(ring);
        }
    }

    for pair in 0..rings.len() - 1 {
        let (lo, hi) = (rings[pair].clone(), rings[pair + 1].clone());
        match (lo.len(), hi.len()) {
            (1, _) => {
                for m in 0..sectors {
                    let m1 = (m + 1) % sectors;
                    b.add_tri(lo[0], hi[m], hi[m1], seg);
                }
            }
            (_, 1) => {
                for m in 0..sectors {
                    let m1 = (m + 1) % sectors;
                    b.add_tri(hi[0], lo[m1], lo[m], seg);
                }
            }
            _ => {
                for m in 0..sectors {
                    let m1 = (m + 1) % sectors;
                    b.add_tri(lo[m], hi[m], hi[m1], seg);
                    b.add_tri(lo[m], hi[m1], lo[m1], seg);
                }
            }
        }
    }
}

/// Closest point on triangle `abc` to `p`, with barycentric coordinates.
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> (Vector3<f64>, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Closest surface point on one segment's triangles.
#[derive(Debug, Clone)]
pub struct SurfaceHit {
    pub point: Vector3<f64>,
    pub triangle: u32,
    pub bary: [f64; 3],
    pub distance: f64,
}

/// Where a marker sits on the surface: triangle plus barycentric weights.
/// The triangle's label tells which segment the marker rides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub segment: u16,
    pub triangle: u32,
    pub bary: [f64; 3],
}

/// One marker's contribution per segment, precomputed for posing:
/// `world = sum_s R_s * offset_s + w_s * t_s` over the entries.
#[derive(Debug, Clone)]
pub struct BindingAggregate {
    pub terms: Vec<(usize, Vector3<f64>, f64)>,
}

impl BindingAggregate {
    pub fn position<T: Real>(&self, transforms: &[RigidTransform<T>]) -> Vector3<T> {
        let mut p = Vector3::zeros();
        for &(seg, offset, w) in &self.terms {
            let t = &transforms[seg];
            p += t.rotation * lift_vec::<T>([offset.x, offset.y, offset.z])
                + t.translation * T::c(w);
        }
        p
    }
}

/// A full hand pose: root placement plus the joint angle vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HandPose {
    pub root: RigidTransform<f64>,
    pub phi: [f64; PHI_DOFS],
}

#[derive(Debug, Clone)]
pub struct KinematicHand {
    pub config: HandConfig,
    pub beta: [f64; BETA_DOFS],
    pub skeleton: Skeleton<f64>,
    pub dims: ShapeDims<f64>,
    pub mesh: SkinnedMesh,
    pub vertex_specs: Vec<VertexSpec>,
    rest_inv: Vec<RigidTransform<f64>>,
    seg_triangles: Vec<Vec<u32>>,
}

impl KinematicHand {
    pub fn new(config: HandConfig, beta: [f64; BETA_DOFS]) -> Self {
        let beta_t = beta;
        let (skeleton, dims) = skeleton_from_beta(&config, &beta_t);
        let (mesh, vertex_specs) = build_mesh(&config, &skeleton, &dims);
        let rest_inv = skeleton
            .segs
            .iter()
            .map(|s| RigidTransform::new(s.rot, s.origin).inverse())
            .collect();
        let mut seg_triangles = vec![Vec::new(); NUM_SEGMENTS];
        for (t, &seg) in mesh.tri_segment.iter().enumerate() {
            seg_triangles[seg as usize].push(t as u32);
        }
        KinematicHand { config, beta, skeleton, dims, mesh, vertex_specs, rest_inv, seg_triangles }
    }

    pub fn default_rest() -> Self {
        KinematicHand::new(HandConfig::default(), [0.0; BETA_DOFS])
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        SEGMENT_NAMES.iter().position(|&s| s == name)
    }

    /// Rest transform of a segment (canonical frame).
    pub fn rest_transform(&self, segment: usize) -> RigidTransform<f64> {
        let s = &self.skeleton.segs[segment];
        RigidTransform::new(s.rot, s.origin)
    }

    pub fn rest_inverse(&self, segment: usize) -> &RigidTransform<f64> {
        &self.rest_inv[segment]
    }

    /// Pose all segments with this hand's shape.
    pub fn pose(&self, root: &RigidTransform<f64>, phi: &[f64]) -> Vec<RigidTransform<f64>> {
        segment_transforms(&self.skeleton, root, phi)
    }

    /// Closest point on a segment's surface, canonical frame.
    /// Ties go to the lowest triangle index.
    pub fn closest_on_segment(&self, segment: usize, p: &Vector3<f64>) -> SurfaceHit {
        let mut best = SurfaceHit {
            point: Vector3::zeros(),
            triangle: 0,
            bary: [0.0; 3],
            distance: f64::INFINITY,
        };
        for &t in &self.seg_triangles[segment] {
            let [a, b, c] = self.mesh.triangle_vertices(t as usize);
            let (q, bary) = closest_point_on_triangle(p, &a, &b, &c);
            let d = (p - q).norm();
            if d < best.distance {
                best = SurfaceHit { point: q, triangle: t, bary, distance: d };
            }
        }
        best
    }

    /// Closest point on a segment's surface given and returned in that
    /// segment's local frame.
    pub fn closest_on_segment_local(&self, segment: usize, p_local: &Vector3<f64>) -> SurfaceHit {
        let p = self.rest_transform(segment).apply(p_local);
        let mut hit = self.closest_on_segment(segment, &p);
        hit.point = self.rest_inv[segment].apply(&hit.point);
        hit
    }

    /// Lattice of `rows x cols` surface points wrapped onto a segment,
    /// `spacing` meters apart, returned in the segment's local frame in
    /// row-major order.
    ///
    /// Phalanges wrap by arc length around the dorsal side of the capsule;
    /// the dorsum/palm lay a planar grid over the slab, offset sideways by
    /// `lateral_center` meters. Every point is snapped onto the segment's
    /// triangles so downstream bindings reproduce it exactly.
    pub fn surface_lattice(
        &self,
        segment: usize,
        rows: usize,
        cols: usize,
        spacing: f64,
        lateral_center: f64,
    ) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(rows * cols);
        if segment == DORSUM || segment == PALM {
            let n = self.config.palm_exponent;
            let half = &self.dims.slab_half;
            let center = &self.dims.slab_center;
            let sign = if segment == DORSUM { 1.0 } else { -1.0 };
            for i in 0..rows {
                for j in 0..cols {
                    // Columns run along -x on the palm side so the printed
                    // corner winding looks the same from outside both faces.
                    let x = center.x + sign * (j as f64 - (cols as f64 - 1.0) / 2.0) * spacing;
                    let y = center.y
                        + lateral_center
                        + (i as f64 - (rows as f64 - 1.0) / 2.0) * spacing;
                    let rem = 1.0
                        - ((x - center.x) / half.x).abs().powf(n)
                        - ((y - center.y) / half.y).abs().powf(n);
                    let z = center.z + sign * half.z * rem.max(1e-6).powf(1.0 / n);
                    let hit = self.closest_on_segment(segment, &Vector3::new(x, y, z));
                    out.push(self.rest_inv[segment].apply(&hit.point));
                }
            }
        } else {
            let s = &self.skeleton.segs[segment];
            let rest = self.rest_transform(segment);
            // Keep the lattice off the cap triangles at both joint lines.
            let margin = 0.06 * s.len;
            for i in 0..rows {
                for j in 0..cols {
                    let x = (s.len / 2.0 + (j as f64 - (cols as f64 - 1.0) / 2.0) * spacing)
                        .clamp(margin, s.len - margin);
                    let arc =
                        lateral_center + (i as f64 - (rows as f64 - 1.0) / 2.0) * spacing;
                    let psi = arc / s.radius;
                    let local = Vector3::new(x, s.radius * psi.sin(), s.radius * psi.cos());
                    let hit = self.closest_on_segment(segment, &rest.apply(&local));
                    out.push(self.rest_inv[segment].apply(&hit.point));
                }
            }
        }
        out
    }

    /// Bind a marker position (given in `segment`'s local frame) to the
    /// nearest surface triangle of that segment.
    pub fn bind_local(&self, segment: usize, p_local: &Vector3<f64>) -> Binding {
        let hit = self.closest_on_segment_local(segment, p_local);
        Binding {
            segment: self.mesh.tri_segment[hit.triangle as usize],
            triangle: hit.triangle,
            bary: hit.bary,
        }
    }

    /// Precompute a binding's per-segment skinning terms.
    pub fn binding_aggregate(&self, binding: &Binding) -> BindingAggregate {
        let tri = self.mesh.triangles[binding.triangle as usize];
        let mut terms: Vec<(usize, Vector3<f64>, f64)> = Vec::new();
        for k in 0..3 {
            let vi = tri[k] as usize;
            let v = self.mesh.vertices[vi];
            let w = &self.mesh.weights[vi];
            for slot in 0..2 {
                let weight = binding.bary[k] * w.weights[slot];
                if weight == 0.0 {
                    continue;
                }
                let seg = w.segments[slot] as usize;
                let local = self.rest_inv[seg].apply(&v);
                match terms.iter_mut().find(|(s, _, _)| *s == seg) {
                    Some(term) => {
                        term.1 += local * weight;
                        term.2 += weight;
                    }
                    None => terms.push((seg, local * weight, weight)),
                }
            }
        }
        BindingAggregate { terms }
    }

    /// Rest-pose position a binding reproduces (canonical frame).
    pub fn binding_rest_position(&self, binding: &Binding) -> Vector3<f64> {
        let tri = self.mesh.triangles[binding.triangle as usize];
        let mut p = Vector3::zeros();
        for k in 0..3 {
            p += self.mesh.vertices[tri[k] as usize] * binding.bary[k];
        }
        p
    }

    /// Skin every mesh vertex with the given pose transforms.
    pub fn skinned_vertices(&self, transforms: &[RigidTransform<f64>]) -> Vec<Vector3<f64>> {
        self.mesh
            .vertices
            .iter()
            .zip(&self.mesh.weights)
            .map(|(v, w)| {
                let mut p = Vector3::zeros();
                for slot in 0..2 {
                    let weight = w.weights[slot];
                    if weight == 0.0 {
                        continue;
                    }
                    let seg = w.segments[slot] as usize;
                    p += transforms[seg].apply(&self.rest_inv[seg].apply(v)) * weight;
                }
                p
            })
            .collect()
    }
}

/// Bind every layout marker to the surface it was wrapped onto.
pub fn bind_markers(
    hand: &KinematicHand,
    layout: &MarkerLayout,
) -> BTreeMap<MarkerId, Binding> {
    let mut out = BTreeMap::new();
    for (id, entry) in &layout.entries {
        let seg = hand
            .segment_index(&entry.attachment)
            .unwrap_or_else(|| panic!("layout references unknown segment {}", entry.attachment));
        out.insert(id.clone(), hand.bind_local(seg, &entry.local_pos));
    }
    out
}

/// Mean surface-to-surface distance between two meshes (symmetric chamfer:
/// average of both directed vertex-to-surface means).
pub fn chamfer_distance(a: &SkinnedMesh, b: &SkinnedMesh) -> f64 {
    let directed = |from: &SkinnedMesh, to: &SkinnedMesh| -> f64 {
        let mut total = 0.0;
        for v in &from.vertices {
            let mut best = f64::INFINITY;
            for t in 0..to.triangles.len() {
                let [p, q, r] = to.triangle_vertices(t);
                let (c, _) = closest_point_on_triangle(v, &p, &q, &r);
                best = best.min((v - c).norm());
            }
            total += best;
        }
        total / from.vertices.len() as f64
    };
    0.5 * (directed(a, b) + directed(b, a))
}

#[derive(Debug, Clone)]
pub struct ShapeFitOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Shape coefficients are clamped into `[-clamp, clamp]`.
    pub beta_clamp: f64,
    /// Ridge weight on `beta`. Global scale is redundant with the other
    /// coefficients (only their products reach the geometry), so a small
    /// pull toward zero picks the minimum-norm representative. Kept out of
    /// the reported costs.
    pub l2_regularization: f64,
}

impl Default for ShapeFitOptions {
    fn default() -> Self {
        ShapeFitOptions {
            iterations: 300,
            learning_rate: 0.05,
            beta_clamp: 3.0,
            l2_regularization: 1e-8,
        }
    }
}

/// One calibration frame: a known pose and the world positions each binding
/// should land on.
#[derive(Debug, Clone)]
pub struct ShapeFitFrame {
    pub root: RigidTransform<f64>,
    pub phi: Vec<f64>,
    pub targets: Vec<(Binding, Vector3<f64>)>,
}

#[derive(Debug, Clone)]
pub struct ShapeFitResult {
    pub beta: [f64; BETA_DOFS],
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations_run: usize,
}

/// Fit the shape vector so bound surface points match their observed world
/// positions across the given frames. Poses and bindings stay fixed; only
/// `beta` moves. Cost is the mean squared marker error in meters squared.
pub fn fit_shape(
    hand: &KinematicHand,
    frames: &[ShapeFitFrame],
    beta0: [f64; BETA_DOFS],
    opts: &ShapeFitOptions,
) -> ShapeFitResult {
    type D = Dual<BETA_DOFS>;

    let total_targets: usize = frames.iter().map(|f| f.targets.len()).sum();
    assert!(total_targets > 0, "shape fit needs at least one target");

    let eval = |beta: &[f64; BETA_DOFS]| -> (f64, [f64; BETA_DOFS]) {
        let mut beta_d = [D::constant(0.0); BETA_DOFS];
        for i in 0..BETA_DOFS {
            beta_d[i] = D::variable(beta[i], i);
        }
        let (skel, dims) = skeleton_from_beta::<D>(&hand.config, &beta_d);
        let rest_inv: Vec<RigidTransform<D>> = skel
            .segs
            .iter()
            .map(|s| RigidTransform::new(s.rot, s.origin).inverse())
            .collect();

        let mut cost = D::constant(0.0);
        for frame in frames {
            let root = RigidTransform::new(
                frame.root.rotation.map(D::constant),
                frame.root.translation.map(D::constant),
            );
            let phi: Vec<D> = frame.phi.iter().map(|&p| D::constant(p)).collect();
            let posed = segment_transforms(&skel, &root, &phi);
            let skin: Vec<RigidTransform<D>> =
                posed.iter().zip(&rest_inv).map(|(a, inv)| a.compose(inv)).collect();

            for (binding, observed) in &frame.targets {
                let tri = hand.mesh.triangles[binding.triangle as usize];
                let mut p: Vector3<D> = Vector3::zeros();
                for k in 0..3 {
                    let vi = tri[k] as usize;
                    let v = vertex_position(&hand.vertex_specs[vi], &skel, &dims);
                    let w = &hand.mesh.weights[vi];
                    let mut skinned: Vector3<D> = Vector3::zeros();
                    for slot in 0..2 {
                        if w.weights[slot] == 0.0 {
                            continue;
                        }
                        skinned += skin[w.segments[slot] as usize].apply(&v)
                            * D::constant(w.weights[slot]);
                    }
                    p += skinned * D::constant(binding.bary[k]);
                }
                let r = p - observed.map(D::constant);
                cost += r.x * r.x + r.y * r.y + r.z * r.z;
            }
        }
        cost /= D::constant(total_targets as f64);
        (cost.re, cost.eps)
    };

    let mut beta = beta0;
    let (initial_cost, _) = eval(&beta);
    let mut opt = Adam::new(BETA_DOFS, opts.learning_rate);
    let mut best = (initial_cost, beta);
    let mut iterations_run = 0;
    for _ in 0..opts.iterations {
        let (cost, mut grad) = eval(&beta);
        if cost < best.0 {
            best = (cost, beta);
        }
        for i in 0..BETA_DOFS {
            grad[i] += 2.0 * opts.l2_regularization * beta[i];
        }
        let gnorm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-12 {
            break;
        }
        opt.step(&mut beta, &grad);
        for b in beta.iter_mut() {
            *b = b.clamp(-opts.beta_clamp, opts.beta_clamp);
        }
        iterations_run += 1;
    }
    let (final_cost, _) = eval(&beta);
    if final_cost < best.0 {
        best = (final_cost, beta);
    }

    ShapeFitResult { beta: best.1, initial_cost, final_cost: best.0, iterations_run }
}
