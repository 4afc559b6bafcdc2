//! Multi-view geometry kernels.
//!
//! Everything here is generic over the scalar type. Functions that only use
//! elementary arithmetic (projection, 6D rotations, small helpers) accept any
//! [`Real`], including dual numbers, so the solvers can differentiate through
//! them. Functions built on SVD (triangulation, registration, coplanarity)
//! additionally require `nalgebra::RealField`, which holds for `f32`/`f64`.
//!
//! Conventions: world-to-camera maps `x_cam = R x_world + t`, pixel
//! coordinates are `u = fx x/z + cx`, `v = fy y/z + cy`, and rotations are
//! proper (determinant +1); reflections are never produced.

use nalgebra::{DMatrix, Matrix3, RealField, Vector2, Vector3};
use num_traits::Float;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;

/// Errors produced by the geometry kernels.
#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth:.6})")]
    BehindCamera { depth: f64 },
    #[error("triangulation needs at least 3 observations, got {got}")]
    InsufficientViews { got: usize },
    #[error("degenerate triangulation geometry (condition number {cond:.3e})")]
    DegenerateGeometry { cond: f64 },
    #[error("no consensus set of size >= 3 among {observations} observations")]
    NoConsensus { observations: usize },
    #[error("rigid registration needs at least 3 point pairs, got {got}")]
    InsufficientPoints { got: usize },
    #[error("point count mismatch in registration: {source_len} vs {target_len}")]
    PointCountMismatch { source_len: usize, target_len: usize },
    #[error("degenerate (collinear or coincident) point set for rigid registration")]
    DegeneratePointSet,
    #[error("degenerate 6D rotation parameters")]
    DegenerateRotation6D,
    #[error("coplanarity score needs at least 4 points, got {got}")]
    TooFewPointsForPlane { got: usize },
    #[error("invalid camera model `{id}`: {reason}")]
    InvalidCamera { id: String, reason: String },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

// Small generic helpers. They avoid trait-method ambiguity between
// `num_traits::Float` and `nalgebra::RealField` in functions that need both.

#[inline]
pub fn dot3<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    a.x * b.x + a.y * b.y + a.z * b.z
}

#[inline]
pub fn cross3<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> Vector3<T> {
    Vector3::new(
        a.y * b.z - a.z * b.y,
        a.z * b.x - a.x * b.z,
        a.x * b.y - a.y * b.x,
    )
}

#[inline]
pub fn norm3<T: Real>(a: &Vector3<T>) -> T {
    Float::sqrt(dot3(a, a))
}

#[inline]
pub fn det3<T: Real>(m: &Matrix3<T>) -> T {
    m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
        - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
        + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
}

/// Rotation about +x by `a` radians.
pub fn rot_x<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = (Float::sin(a), Float::cos(a));
    let (o, z) = (T::one(), T::zero());
    Matrix3::new(o, z, z, z, c, -s, z, s, c)
}

/// Rotation about +y by `a` radians.
pub fn rot_y<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = (Float::sin(a), Float::cos(a));
    let (o, z) = (T::one(), T::zero());
    Matrix3::new(c, z, s, z, o, z, -s, z, c)
}

/// Rotation about +z by `a` radians.
pub fn rot_z<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = (Float::sin(a), Float::cos(a));
    let (o, z) = (T::one(), T::zero());
    Matrix3::new(c, -s, z, s, c, z, z, z, o)
}

/// Rotation about an arbitrary unit axis by `a` radians (Rodrigues).
pub fn rot_axis<T: Real>(axis: &Vector3<T>, a: T) -> Matrix3<T> {
    let n = norm3(axis);
    let u = Vector3::new(axis.x / n, axis.y / n, axis.z / n);
    let (s, c) = (Float::sin(a), Float::cos(a));
    let ic = T::one() - c;
    Matrix3::new(
        c + u.x * u.x * ic,
        u.x * u.y * ic - u.z * s,
        u.x * u.z * ic + u.y * s,
        u.y * u.x * ic + u.z * s,
        c + u.y * u.y * ic,
        u.y * u.z * ic - u.x * s,
        u.z * u.x * ic - u.y * s,
        u.z * u.y * ic + u.x * s,
        c + u.z * u.z * ic,
    )
}

/// Geodesic angle between two rotation matrices, in radians.
pub fn rotation_angle_between<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> T {
    let rel = a.transpose() * *b;
    let tr = rel[(0, 0)] + rel[(1, 1)] + rel[(2, 2)];
    let half = T::c(0.5);
    let cos = (tr - T::one()) * half;
    Float::acos(Float::min(Float::max(cos, -T::one()), T::one()))
}

/// Rigid transform `x -> R x + t` with a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        RigidTransform { rotation, translation }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * *p + self.translation
    }

    /// `self` after `other`: `(self ∘ other)(x) = self(other(x))`.
    pub fn compose(&self, other: &Self) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Max deviation of `R^T R` from identity plus determinant error.
    pub fn orthonormality_error(&self) -> T {
        let g = self.rotation.transpose() * self.rotation;
        let mut worst = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { T::one() } else { T::zero() };
                worst = Float::max(worst, Float::abs(g[(i, j)] - want));
            }
        }
        Float::max(worst, Float::abs(det3(&self.rotation) - T::one()))
    }
}

/// Continuous six-number rotation parameterization: the first two columns of
/// the rotation matrix, orthonormalized on decode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D<T>(pub [T; 6]);

impl<T: Real> Rotation6D<T> {
    /// Embedding of the identity rotation.
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Rotation6D([o, z, z, z, o, z])
    }

    /// First two columns of `m`.
    pub fn from_matrix(m: &Matrix3<T>) -> Self {
        Rotation6D([
            m[(0, 0)],
            m[(1, 0)],
            m[(2, 0)],
            m[(0, 1)],
            m[(1, 1)],
            m[(2, 1)],
        ])
    }
}

/// Gram-Schmidt decode of the 6D parameterization into a proper rotation.
///
/// `b1 = a1/|a1|`, `b2 = normalize(a2 - (b1.a2) b1)`, `b3 = b1 x b2`.
/// Fails when `a1` is near zero or `a2` is near parallel to `a1`.
pub fn rot6d_to_matrix<T: Real>(r: &Rotation6D<T>) -> Result<Matrix3<T>> {
    let a1 = Vector3::new(r.0[0], r.0[1], r.0[2]);
    let a2 = Vector3::new(r.0[3], r.0[4], r.0[5]);
    let eps = T::c(1e-8);
    let n1 = norm3(&a1);
    if n1 < eps {
        return Err(GeometryError::DegenerateRotation6D);
    }
    let b1 = Vector3::new(a1.x / n1, a1.y / n1, a1.z / n1);
    let proj = dot3(&b1, &a2);
    let w = a2 - b1 * proj;
    let n2 = norm3(&w);
    if n2 < eps {
        return Err(GeometryError::DegenerateRotation6D);
    }
    let b2 = Vector3::new(w.x / n2, w.y / n2, w.z / n2);
    let b3 = cross3(&b1, &b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Pinhole camera with a rigid world-to-camera extrinsic.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel<T> {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// World-to-camera rotation.
    pub rotation: Matrix3<T>,
    /// World-to-camera translation.
    pub translation: Vector3<T>,
}

impl<T: Real> CameraModel<T> {
    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Depth of a world point along the optical axis.
    pub fn depth(&self, world: &Vector3<T>) -> T {
        (self.rotation * *world + self.translation).z
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| GeometryError::InvalidCamera {
            id: self.id.clone(),
            reason,
        };
        if self.width == 0 || self.height == 0 {
            return Err(fail("zero image dimensions".into()));
        }
        if self.fx <= T::zero() || self.fy <= T::zero() {
            return Err(fail("focal lengths must be positive".into()));
        }
        let w = T::from_u32(self.width).unwrap();
        let h = T::from_u32(self.height).unwrap();
        if self.cx < T::zero() || self.cx > w || self.cy < T::zero() || self.cy > h {
            return Err(fail("principal point outside image bounds".into()));
        }
        let rt = RigidTransform::new(self.rotation, self.translation);
        let err = rt.orthonormality_error();
        if err > T::c(1e-9) {
            return Err(fail(format!(
                "rotation not orthonormal within 1e-9 (error {:?})",
                err
            )));
        }
        Ok(())
    }
}

/// Project a world point to pixel coordinates.
///
/// Non-positive depth is an error: such a point is behind the camera.
pub fn project_point<T: Real>(cam: &CameraModel<T>, world: &Vector3<T>) -> Result<Vector2<T>> {
    let p = cam.rotation * *world + cam.translation;
    if p.z <= T::zero() {
        return Err(GeometryError::BehindCamera {
            depth: p.z.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(Vector2::new(
        cam.fx * p.x / p.z + cam.cx,
        cam.fy * p.y / p.z + cam.cy,
    ))
}

/// Pixel distance between the projection of `world` and an observation.
pub fn reprojection_error<T: Real>(
    cam: &CameraModel<T>,
    world: &Vector3<T>,
    observed: &Vector2<T>,
) -> Result<T> {
    let uv = project_point(cam, world)?;
    let d = uv - *observed;
    Ok(Float::sqrt(d.x * d.x + d.y * d.y))
}

/// One pixel observation of a 3D point in a given camera.
#[derive(Debug, Clone)]
pub struct Observation<'a, T> {
    pub camera: &'a CameraModel<T>,
    pub pixel: Vector2<T>,
}

/// Output of [`triangulate`].
#[derive(Debug, Clone)]
pub struct Triangulated<T> {
    pub point: Vector3<T>,
    /// Per-observation reprojection error; infinite when the solution falls
    /// behind that camera.
    pub reprojection_errors: Vec<T>,
    pub mean_reprojection_error: T,
}

/// Direct linear triangulation over three or more views.
///
/// Stacks, per observation, the two cross-product constraints
/// `x_n (r3.X + t3) = r1.X + t1` (and the `y` analogue) in normalized camera
/// coordinates into a homogeneous `2N x 4` system and takes the right
/// singular vector of the smallest singular value. Geometry whose constraint
/// matrix has a condition number above 1e12 (for example all rays collinear)
/// is rejected as degenerate.
pub fn triangulate<T>(observations: &[Observation<'_, T>]) -> Result<Triangulated<T>>
where
    T: Real + RealField,
{
    if observations.len() < 3 {
        return Err(GeometryError::InsufficientViews {
            got: observations.len(),
        });
    }
    let n = observations.len();
    let mut a = DMatrix::<T>::zeros(2 * n, 4);
    for (k, obs) in observations.iter().enumerate() {
        let cam = obs.camera;
        let xn = (obs.pixel.x - cam.cx) / cam.fx;
        let yn = (obs.pixel.y - cam.cy) / cam.fy;
        let r = &cam.rotation;
        let t = &cam.translation;
        for j in 0..3 {
            a[(2 * k, j)] = xn * r[(2, j)] - r[(0, j)];
            a[(2 * k + 1, j)] = yn * r[(2, j)] - r[(1, j)];
        }
        a[(2 * k, 3)] = xn * t.z - t.x;
        a[(2 * k + 1, 3)] = yn * t.z - t.y;
    }

    let svd = a.svd(false, true);
    let s = &svd.singular_values;
    let smax = s[0];
    let s2 = s[2];
    let cond_limit = T::from_f64(1e12).unwrap();
    let degenerate = s2 <= T::zero() || smax / s2 > cond_limit;
    if degenerate {
        let cond = if s2 <= T::zero() {
            f64::INFINITY
        } else {
            num_traits::ToPrimitive::to_f64(&(smax / s2)).unwrap_or(f64::INFINITY)
        };
        return Err(GeometryError::DegenerateGeometry { cond });
    }
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let h = vt.row(3);
    let w = h[3];
    if Float::abs(w) <= Float::abs(smax) * T::from_f64(1e-14).unwrap() {
        return Err(GeometryError::DegenerateGeometry { cond: f64::INFINITY });
    }
    let point = Vector3::new(h[0] / w, h[1] / w, h[2] / w);

    let mut errors = Vec::with_capacity(n);
    let mut sum = T::zero();
    for obs in observations {
        let e = match reprojection_error(obs.camera, &point, &obs.pixel) {
            Ok(e) => e,
            Err(GeometryError::BehindCamera { .. }) => Float::infinity(),
            Err(other) => return Err(other),
        };
        sum = sum + e;
        errors.push(e);
    }
    Ok(Triangulated {
        point,
        mean_reprojection_error: sum / T::from_usize(n).unwrap(),
        reprojection_errors: errors,
    })
}

/// Configuration for [`triangulate_ransac`].
#[derive(Debug, Clone, Copy)]
pub struct RansacConfig {
    /// Inlier reprojection threshold in pixels.
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            inlier_threshold: 2.0,
            max_iterations: 100,
            seed: 0,
        }
    }
}

/// Output of [`triangulate_ransac`].
#[derive(Debug, Clone)]
pub struct RansacTriangulated<T> {
    pub point: Vector3<T>,
    /// Indices of inlying observations, ascending.
    pub inliers: Vec<usize>,
    pub mean_reprojection_error: T,
}

/// RANSAC triangulation over minimal samples of three views.
///
/// Sampling is deterministic for a given seed. When the number of possible
/// triples is within the iteration budget every triple is tried instead of
/// sampling. A consensus set needs at least 3 inliers; the returned point is
/// refit on the full consensus set.
pub fn triangulate_ransac<T>(
    observations: &[Observation<'_, T>],
    config: &RansacConfig,
) -> Result<RansacTriangulated<T>>
where
    T: Real + RealField,
{
    let n = observations.len();
    if n < 3 {
        return Err(GeometryError::InsufficientViews { got: n });
    }
    let threshold = T::from_f64(config.inlier_threshold).unwrap();

    let inliers_of = |point: &Vector3<T>| -> Vec<usize> {
        let mut inl = Vec::new();
        for (i, obs) in observations.iter().enumerate() {
            if let Ok(e) = reprojection_error(obs.camera, point, &obs.pixel) {
                if e <= threshold {
                    inl.push(i);
                }
            }
        }
        inl
    };

    // All-view fast path: with a clean track the full set is already the
    // maximal consensus and matches what any sampled round would refit to.
    if let Ok(full) = triangulate(observations) {
        let inl = inliers_of(&full.point);
        if inl.len() == n {
            return Ok(RansacTriangulated {
                point: full.point,
                inliers: inl,
                mean_reprojection_error: full.mean_reprojection_error,
            });
        }
    }

    let mut best: Option<(Vec<usize>, Vector3<T>)> = None;
    let mut consider = |triple: [usize; 3]| {
        let sample: Vec<_> = triple
            .iter()
            .map(|&i| Observation {
                camera: observations[i].camera,
                pixel: observations[i].pixel,
            })
            .collect();
        if let Ok(tri) = triangulate(&sample) {
            let inl = inliers_of(&tri.point);
            let better = match &best {
                None => inl.len() >= 3,
                Some((cur, _)) => inl.len() > cur.len(),
            };
            if better {
                best = Some((inl, tri.point));
            }
        }
    };

    let total_triples = n * (n - 1) * (n - 2) / 6;
    if total_triples <= config.max_iterations {
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    consider([i, j, k]);
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for _ in 0..config.max_iterations {
            let idx = sample_indices(&mut rng, n, 3);
            consider([idx.index(0), idx.index(1), idx.index(2)]);
        }
    }

    let (inliers, _) = best.ok_or(GeometryError::NoConsensus { observations: n })?;
    let subset: Vec<_> = inliers
        .iter()
        .map(|&i| Observation {
            camera: observations[i].camera,
            pixel: observations[i].pixel,
        })
        .collect();
    let refit = triangulate(&subset)?;
    Ok(RansacTriangulated {
        point: refit.point,
        inliers,
        mean_reprojection_error: refit.mean_reprojection_error,
    })
}

/// Output of [`kabsch_align`].
#[derive(Debug, Clone)]
pub struct KabschResult<T> {
    /// Transform mapping source points onto target points.
    pub transform: RigidTransform<T>,
    /// Per-pair distances after alignment.
    pub residuals: Vec<T>,
    pub mean_residual: T,
    pub rmsd: T,
}

/// Least-squares rigid registration (Kabsch).
///
/// Finds the proper rotation and translation minimizing
/// `sum_i |target_i - (R source_i + t)|^2` via the SVD of the cross
/// covariance, with the usual determinant sign correction so reflections are
/// never returned. Collinear or coincident point sets are rejected: the
/// rotation about the common line would be unobservable.
pub fn kabsch_align<T>(source: &[Vector3<T>], target: &[Vector3<T>]) -> Result<KabschResult<T>>
where
    T: Real + RealField,
{
    if source.len() != target.len() {
        return Err(GeometryError::PointCountMismatch {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    let n = source.len();
    if n < 3 {
        return Err(GeometryError::InsufficientPoints { got: n });
    }
    let nf = T::from_usize(n).unwrap();
    let mut sc = Vector3::zeros();
    let mut tc = Vector3::zeros();
    for i in 0..n {
        sc += source[i];
        tc += target[i];
    }
    sc /= nf;
    tc /= nf;

    let mut h = Matrix3::<T>::zeros();
    for i in 0..n {
        let s = source[i] - sc;
        let t = target[i] - tc;
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] = h[(r, c)] + s[r] * t[c];
            }
        }
    }

    let svd = h.svd(true, true);
    let s = &svd.singular_values;
    // Rank <= 1 means both clouds are (numerically) collinear.
    let scale = Float::max(s[0], T::from_f64(1e-30).unwrap());
    if s[1] / scale < T::from_f64(1e-9).unwrap() {
        return Err(GeometryError::DegeneratePointSet);
    }
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let v = vt.transpose();
    let d = det3(&(v * u.transpose()));
    let mut flip = Matrix3::identity();
    flip[(2, 2)] = d;
    let rotation = v * flip * u.transpose();
    let translation = tc - rotation * sc;
    let transform = RigidTransform::new(rotation, translation);

    let mut residuals = Vec::with_capacity(n);
    let mut sum = T::zero();
    let mut sum_sq = T::zero();
    for i in 0..n {
        let d = target[i] - transform.apply(&source[i]);
        let e = norm3(&d);
        sum = sum + e;
        sum_sq = sum_sq + e * e;
        residuals.push(e);
    }
    Ok(KabschResult {
        transform,
        residuals,
        mean_residual: sum / nf,
        rmsd: Float::sqrt(sum_sq / nf),
    })
}

/// Smallest singular value of the centered `3 x N` coordinate matrix.
///
/// Zero for exactly coplanar points, and growing with out-of-plane spread.
pub fn coplanarity_sigma_min<T>(points: &[Vector3<T>]) -> Result<T>
where
    T: Real + RealField,
{
    let n = points.len();
    if n < 4 {
        return Err(GeometryError::TooFewPointsForPlane { got: n });
    }
    let nf = T::from_usize(n).unwrap();
    let mut c = Vector3::zeros();
    for p in points {
        c += *p;
    }
    c /= nf;
    let mut m = DMatrix::<T>::zeros(3, n);
    for (j, p) in points.iter().enumerate() {
        let d = *p - c;
        m[(0, j)] = d.x;
        m[(1, j)] = d.y;
        m[(2, j)] = d.z;
    }
    let svd = m.svd(false, false);
    Ok(svd.singular_values[2])
}

/// Coplanarity score: sigma_min of the centered coordinates, normalized by
/// sqrt(N) so the score approximates RMS out-of-plane distance and is stable
/// under marker dropouts.
pub fn coplanarity_score<T>(points: &[Vector3<T>]) -> Result<T>
where
    T: Real + RealField,
{
    let sigma = coplanarity_sigma_min(points)?;
    Ok(sigma / Float::sqrt(T::from_usize(points.len()).unwrap()))
}

/// Plain triangle soup. Shared container for occluder geometry, object
/// surfaces, and penetration queries.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn triangle_vertices(&self, tri: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[tri];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn transformed(&self, pose: &RigidTransform<f64>) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| pose.apply(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Every directed edge must appear exactly once and be matched by its
    /// reverse, which is what consistent outward windings on a closed
    /// surface look like.
    pub fn is_watertight(&self) -> bool {
        let mut count: std::collections::BTreeMap<(u32, u32), i32> = Default::default();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *count.entry((a, b)).or_insert(0) += 1;
            }
        }
        count
            .iter()
            .all(|(&(a, b), &n)| n == 1 && count.get(&(b, a)) == Some(&1))
    }

    /// Signed volume via the divergence theorem; positive for outward
    /// windings.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle_vertices(i);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn look_at_camera(id: &str, center: Vector3<f64>, target: Vector3<f64>) -> CameraModel<f64> {
        let fwd = (target - center).normalize();
        let mut up = Vector3::new(0.0, 0.0, 1.0);
        if fwd.dot(&up).abs() > 0.95 {
            up = Vector3::new(1.0, 0.0, 0.0);
        }
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right).normalize();
        // Camera axes as rows: x right, y down, z forward.
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        CameraModel {
            id: id.into(),
            width: 2048,
            height: 2448,
            fx: 3000.0,
            fy: 3000.0,
            cx: 1024.0,
            cy: 1224.0,
            rotation,
            translation: -(rotation * center),
        }
    }

    fn ring_rig(n: usize) -> Vec<CameraModel<f64>> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                let z = 1.0 + 0.3 * (i as f64 * 1.7).sin();
                look_at_camera(
                    &format!("cam{i:02}"),
                    Vector3::new(1.2 * a.cos(), 1.2 * a.sin(), z),
                    Vector3::new(0.0, 0.0, 1.0),
                )
            })
            .collect()
    }

    #[test]
    fn projection_center_maps_to_principal_point() {
        let cam = look_at_camera("c", Vector3::new(0.0, -1.0, 1.0), Vector3::new(0.0, 0.0, 1.0));
        cam.validate().unwrap();
        let uv = project_point(&cam, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(uv.x, 1024.0, epsilon = 1e-9);
        assert_relative_eq!(uv.y, 1224.0, epsilon = 1e-9);
    }

    #[test]
    fn projection_behind_camera_fails() {
        let cam = look_at_camera("c", Vector3::new(0.0, -1.0, 1.0), Vector3::new(0.0, 0.0, 1.0));
        let err = project_point(&cam, &Vector3::new(0.0, -2.0, 1.0)).unwrap_err();
        assert!(matches!(err, GeometryError::BehindCamera { .. }));
    }

    #[test]
    fn triangulation_needs_three_views() {
        let rig = ring_rig(2);
        let p = Vector3::new(0.02, -0.03, 1.05);
        let obs: Vec<_> = rig
            .iter()
            .map(|c| Observation {
                camera: c,
                pixel: project_point(c, &p).unwrap(),
            })
            .collect();
        let err = triangulate(&obs).unwrap_err();
        assert!(matches!(err, GeometryError::InsufficientViews { got: 2 }));
    }

    #[test]
    fn triangulation_roundtrip_exact() {
        let rig = ring_rig(13);
        let p = Vector3::new(0.05, 0.02, 1.1);
        let obs: Vec<_> = rig
            .iter()
            .map(|c| Observation {
                camera: c,
                pixel: project_point(c, &p).unwrap(),
            })
            .collect();
        let tri = triangulate(&obs).unwrap();
        assert_relative_eq!(tri.point.x, p.x, epsilon = 1e-9);
        assert_relative_eq!(tri.point.y, p.y, epsilon = 1e-9);
        assert_relative_eq!(tri.point.z, p.z, epsilon = 1e-9);
        assert!(tri.mean_reprojection_error < 1e-7);
    }

    #[test]
    fn triangulation_collinear_centers_degenerate() {
        // Three cameras stacked along one axis, point on that same axis:
        // every ray is identical, the point is unobservable along the line.
        let cams: Vec<_> = (0..3)
            .map(|i| {
                look_at_camera(
                    &format!("c{i}"),
                    Vector3::new(0.0, -1.0 - 0.3 * i as f64, 1.0),
                    Vector3::new(0.0, 0.0, 1.0),
                )
            })
            .collect();
        let obs: Vec<_> = cams
            .iter()
            .map(|c| Observation {
                camera: c,
                pixel: Vector2::new(1024.0, 1224.0),
            })
            .collect();
        let err = triangulate(&obs).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateGeometry { .. }));
    }

    #[test]
    fn ransac_all_consistent_keeps_every_view() {
        let rig = ring_rig(6);
        let p = Vector3::new(-0.04, 0.01, 0.95);
        let obs: Vec<_> = rig
            .iter()
            .map(|c| Observation {
                camera: c,
                pixel: project_point(c, &p).unwrap(),
            })
            .collect();
        let out = triangulate_ransac(&obs, &RansacConfig::default()).unwrap();
        assert_eq!(out.inliers, vec![0, 1, 2, 3, 4, 5]);
        assert_relative_eq!(out.point.x, p.x, epsilon = 1e-9);
    }

    #[test]
    fn ransac_rejects_outlier_view() {
        let rig = ring_rig(6);
        let p = Vector3::new(0.0, 0.03, 1.02);
        let mut obs: Vec<_> = rig
            .iter()
            .map(|c| Observation {
                camera: c,
                pixel: project_point(c, &p).unwrap(),
            })
            .collect();
        obs[2].pixel.x += 57.0; // gross outlier
        let out = triangulate_ransac(&obs, &RansacConfig::default()).unwrap();
        assert_eq!(out.inliers, vec![0, 1, 3, 4, 5]);
        assert_relative_eq!(out.point.y, p.y, epsilon = 1e-8);
    }

    #[test]
    fn ransac_no_consensus_on_mutually_inconsistent_views() {
        // Two views agree on one point; the other two are displaced in ways
        // consistent with nothing. No sample reaches 3 inliers.
        let rig = ring_rig(4);
        let p = Vector3::new(0.0, 0.0, 1.0);
        let mut obs: Vec<_> = rig
            .iter()
            .map(|c| Observation {
                camera: c,
                pixel: project_point(c, &p).unwrap(),
            })
            .collect();
        obs[2].pixel += Vector2::new(300.0, -150.0);
        obs[3].pixel += Vector2::new(-250.0, 220.0);
        let err = triangulate_ransac(&obs, &RansacConfig::default()).unwrap_err();
        assert!(matches!(err, GeometryError::NoConsensus { .. }));
    }

    #[test]
    fn kabsch_recovers_known_transform() {
        let r = rot_z(0.7) * rot_x(-0.3);
        let t = Vector3::new(0.2, -0.1, 0.5);
        let source = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(0.0, 0.2, 0.0),
            Vector3::new(0.0, 0.0, 0.3),
            Vector3::new(0.1, 0.1, 0.1),
        ];
        let target: Vec<_> = source.iter().map(|p| r * p + t).collect();
        let out = kabsch_align(&source, &target).unwrap();
        assert!(out.rmsd < 1e-12);
        assert!((out.transform.rotation - r).abs().max() < 1e-12);
        assert!((out.transform.translation - t).norm() < 1e-12);
    }

    #[test]
    fn kabsch_collinear_source_degenerate() {
        let source: Vec<_> = (0..5)
            .map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0))
            .collect();
        let target: Vec<_> = (0..5)
            .map(|i| Vector3::new(0.0, i as f64 * 0.1, 0.2))
            .collect();
        let err = kabsch_align(&source, &target).unwrap_err();
        assert!(matches!(err, GeometryError::DegeneratePointSet));
    }

    #[test]
    fn kabsch_never_returns_reflection() {
        // Mirrored tetrahedron: best proper rotation must still have det +1.
        let source = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let target: Vec<_> = source
            .iter()
            .map(|p| Vector3::new(p.x, p.y, -p.z))
            .collect();
        let out = kabsch_align(&source, &target).unwrap();
        assert_relative_eq!(det3(&out.transform.rotation), 1.0, epsilon = 1e-12);
        assert!(out.rmsd > 0.1); // reflection is not reachable
    }

    #[test]
    fn rot6d_identity_and_columns_roundtrip() {
        let m = rot6d_to_matrix(&Rotation6D::<f64>::identity()).unwrap();
        assert!((m - Matrix3::identity()).abs().max() < 1e-15);
        let r = rot_x(0.4) * rot_y(-1.1) * rot_z(2.2);
        let back = rot6d_to_matrix(&Rotation6D::from_matrix(&r)).unwrap();
        assert!((back - r).abs().max() < 1e-12);
    }

    #[test]
    fn rot6d_degenerate_inputs_fail() {
        let zero = Rotation6D([0.0; 6]);
        assert!(matches!(
            rot6d_to_matrix(&zero).unwrap_err(),
            GeometryError::DegenerateRotation6D
        ));
        let parallel = Rotation6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(matches!(
            rot6d_to_matrix(&parallel).unwrap_err(),
            GeometryError::DegenerateRotation6D
        ));
    }

    #[test]
    fn rot6d_decodes_unnormalized_columns() {
        // Scaling and shearing the two columns must not change the decoded
        // rotation as long as the span is preserved.
        let r = rot_z(1.234) * rot_y(0.456);
        let c0 = r.column(0) * 3.0;
        let c1 = r.column(1) * 0.5 + r.column(0) * 0.9;
        let six = Rotation6D([c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]]);
        let back = rot6d_to_matrix(&six).unwrap();
        assert!((back - r).abs().max() < 1e-12);
    }

    #[test]
    fn coplanarity_flat_square_is_zero() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        assert!(coplanarity_score(&pts).unwrap() < 1e-12);
    }

    #[test]
    fn coplanarity_unit_cube_matches_closed_form() {
        // Centered cube corners have covariance 2 I, so every singular value
        // of the 3x8 matrix is sqrt(2) and the normalized score is exactly
        // sqrt(2)/sqrt(8) = 0.5.
        let mut pts = Vec::new();
        for dx in [-0.5, 0.5] {
            for dy in [-0.5, 0.5] {
                for dz in [-0.5, 0.5] {
                    pts.push(Vector3::new(dx, dy, dz));
                }
            }
        }
        let score = coplanarity_score(&pts).unwrap();
        assert_relative_eq!(score, 0.5, epsilon = 1e-12);
        let raw = coplanarity_sigma_min(&pts).unwrap();
        assert_relative_eq!(raw, 2.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn coplanarity_needs_four_points() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        assert!(matches!(
            coplanarity_score(&pts).unwrap_err(),
            GeometryError::TooFewPointsForPlane { got: 3 }
        ));
    }

    #[test]
    fn coplanarity_rigid_invariance_and_scale_linearity() {
        let pts: Vec<_> = (0..10)
            .map(|i| {
                let a = i as f64 * 0.7;
                Vector3::new(a.cos(), a.sin() * 0.6, 0.05 * (3.0 * a).sin())
            })
            .collect();
        let base = coplanarity_score(&pts).unwrap();
        let r = rot_x(0.9) * rot_z(-0.4);
        let t = Vector3::new(4.0, -2.0, 7.0);
        let moved: Vec<_> = pts.iter().map(|p| r * p + t).collect();
        assert_relative_eq!(coplanarity_score(&moved).unwrap(), base, epsilon = 1e-12);
        let scaled: Vec<_> = pts.iter().map(|p| p * 3.5).collect();
        assert_relative_eq!(coplanarity_score(&scaled).unwrap(), base * 3.5, epsilon = 1e-12);
    }
}
