//! Motion-quality and reconstruction metrics.
//!
//! Numbers reported here feed the final run report: smoothness (MSNR,
//! jerk), grasp statistics (diversity/coherence via k-means), surface
//! consistency (marker reconstruction error), and hand-object penetration.
//! The diversity/coherence formulas are project-defined; reports flag them
//! so they are not compared against externally published tables.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::hand::closest_point_on_triangle;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("series of {got} samples is too short, need at least {min}")]
    TooShort { got: usize, min: usize },
    #[error("no data points")]
    NoData,
    #[error("feature rows have inconsistent dimensions")]
    RaggedFeatures,
    #[error("need at least {k} frames for {k}-means, got {got}")]
    TooFewFrames { got: usize, k: usize },
    #[error("mesh is not watertight: {reason}")]
    NotWatertight { reason: String },
}

/// Kernel-3 moving average with reflect padding (`x[-1] = x[1]`, `x[n] = x[n-2]`).
pub fn moving_average_3(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n <= 1 {
        return x.to_vec();
    }
    let at = |i: isize| -> f64 {
        let m = if i < 0 {
            (-i) as usize
        } else if (i as usize) < n {
            i as usize
        } else {
            2 * (n - 1) - i as usize
        };
        x[m]
    };
    (0..n as isize).map(|i| (at(i - 1) + at(i) + at(i + 1)) / 3.0).collect()
}

/// Central-difference velocity, one-sided at the ends.
pub fn central_velocity(x: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| {
                if i == 0 {
                    (x[1] - x[0]) / dt
                } else if i == n - 1 {
                    (x[n - 1] - x[n - 2]) / dt
                } else {
                    (x[i + 1] - x[i - 1]) / (2.0 * dt)
                }
            })
            .collect(),
    }
}

pub const MSNR_POWER_FLOOR: f64 = 1e-12;

/// dB ratio of smoothed-signal power to residual power. The residual power
/// is floored at [`MSNR_POWER_FLOOR`]; the flag reports when that happened.
pub fn msnr_db(signal_power: f64, residual_power: f64) -> (f64, bool) {
    let capped = residual_power < MSNR_POWER_FLOOR;
    let denom = residual_power.max(MSNR_POWER_FLOOR);
    (10.0 * (signal_power / denom).log10(), capped)
}

#[derive(Debug, Clone)]
pub struct Msnr {
    pub db: f64,
    pub signal_power: f64,
    pub residual_power: f64,
    pub capped: bool,
}

/// Motion signal-to-noise of a velocity series: smooth with the kernel-3
/// moving average, compare smoothed power against residual power.
pub fn msnr(v: &[f64]) -> Result<Msnr, MetricsError> {
    let channel = [v.to_vec()];
    msnr_multi(&channel)
}

/// Multi-channel MSNR: powers are accumulated across channels so the ratio
/// treats the channels as one vector-valued series.
pub fn msnr_multi(channels: &[Vec<f64>]) -> Result<Msnr, MetricsError> {
    let n = channels.first().map_or(0, |c| c.len());
    if channels.is_empty() || n < 3 {
        return Err(MetricsError::TooShort { got: n, min: 3 });
    }
    let mut signal_power = 0.0;
    let mut residual_power = 0.0;
    let mut count = 0usize;
    for ch in channels {
        if ch.len() != n {
            return Err(MetricsError::RaggedFeatures);
        }
        let smooth = moving_average_3(ch);
        for (v, s) in ch.iter().zip(&smooth) {
            signal_power += s * s;
            residual_power += (v - s) * (v - s);
            count += 1;
        }
    }
    signal_power /= count as f64;
    residual_power /= count as f64;
    let (db, capped) = msnr_db(signal_power, residual_power);
    Ok(Msnr { db, signal_power, residual_power, capped })
}

/// Third time derivative by finite differences, one value per interior
/// sample. Uses the symmetric five-point stencil; a series of exactly four
/// samples falls back to the one-sided third difference.
pub fn third_derivative(x: &[f64], dt: f64) -> Result<Vec<f64>, MetricsError> {
    let n = x.len();
    if n < 4 {
        return Err(MetricsError::TooShort { got: n, min: 4 });
    }
    let h3 = dt * dt * dt;
    if n == 4 {
        return Ok(vec![(x[3] - 3.0 * x[2] + 3.0 * x[1] - x[0]) / h3]);
    }
    Ok((2..n - 2)
        .map(|i| (x[i + 2] - 2.0 * x[i + 1] + 2.0 * x[i - 1] - x[i - 2]) / (2.0 * h3))
        .collect())
}

/// Mean |jerk| across time and channels, m/s^3.
pub fn mean_abs_jerk(channels: &[Vec<f64>], dt: f64) -> Result<f64, MetricsError> {
    if channels.is_empty() {
        return Err(MetricsError::NoData);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in channels {
        for j in third_derivative(ch, dt)? {
            total += j.abs();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone)]
pub struct DiversityCoherence {
    pub diversity: f64,
    pub coherence: f64,
    /// Best k-means inertia over the restarts, for diagnostics.
    pub inertia: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

struct KmeansRun {
    centroids: Vec<Vec<f64>>,
    assignment: Vec<usize>,
    inertia: f64,
}

fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KmeansRun {
    let n = points.len();
    let d = points[0].len();
    let init = rand::seq::index::sample(rng, n, k);
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|i| points[i].clone()).collect();
    let mut assignment = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (c, cen) in centroids.iter().enumerate() {
                let dist = euclid(p, cen);
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            if assignment[i] != best.0 {
                assignment[i] = best.0;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster with the point farthest from its
                // current centroid; deterministic and keeps k clusters alive.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = euclid(&points[a], &centroids[assignment[a]]);
                        let db = euclid(&points[b], &centroids[assignment[b]]);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                assignment[far] = c;
                changed = true;
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| {
            let d = euclid(p, &centroids[a]);
            d * d
        })
        .sum();
    KmeansRun { centroids, assignment, inertia }
}

/// Cluster pose features into `k` groups and summarize the trajectory:
/// diversity is the mean pairwise centroid distance normalized by the RMS
/// feature norm; coherence is one minus the within-cluster spread relative
/// to the global spread, clamped to [0, 1].
///
/// Frames are canonicalized by sorting before clustering, so the result is
/// invariant to frame order.
pub fn diversity_coherence(
    features: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<DiversityCoherence, MetricsError> {
    let n = features.len();
    if n < k {
        return Err(MetricsError::TooFewFrames { got: n, k });
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(MetricsError::RaggedFeatures);
    }
    if d == 0 {
        return Err(MetricsError::NoData);
    }

    let mut points = features.to_vec();
    points.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    if points.windows(2).all(|w| w[0] == w[1]) {
        return Ok(DiversityCoherence { diversity: 0.0, coherence: 1.0, inertia: 0.0 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KmeansRun> = None;
    for _ in 0..20 {
        let run = kmeans(&points, k, &mut rng);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let run = best.unwrap();

    let rms_norm = (points
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n as f64)
        .sqrt();

    let mut pairwise = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            pairwise += euclid(&run.centroids[i], &run.centroids[j]);
            pairs += 1;
        }
    }
    let diversity = if rms_norm > 1e-15 { pairwise / pairs as f64 / rms_norm } else { 0.0 };

    let mut global_mean = vec![0.0; d];
    for p in &points {
        for (g, v) in global_mean.iter_mut().zip(p) {
            *g += v / n as f64;
        }
    }
    let within: f64 =
        points.iter().zip(&run.assignment).map(|(p, &a)| euclid(p, &run.centroids[a])).sum::<f64>()
            / n as f64;
    let overall: f64 = points.iter().map(|p| euclid(p, &global_mean)).sum::<f64>() / n as f64;
    let coherence =
        if overall > 1e-15 { (1.0 - within / overall).clamp(0.0, 1.0) } else { 1.0 };

    Ok(DiversityCoherence { diversity, coherence, inertia: run.inertia })
}

/// Signed distance to a closed surface; negative inside.
pub trait SignedDistance {
    fn signed_distance(&self, p: &Vector3<f64>) -> f64;
}

#[derive(Debug, Clone)]
pub struct AnalyticSphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl SignedDistance for AnalyticSphere {
    fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.center).norm() - self.radius
    }
}

/// Signed distance from a watertight triangle mesh: unsigned closest-point
/// distance, sign from the generalized winding number.
#[derive(Debug, Clone)]
pub struct MeshSdf {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
}

impl MeshSdf {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Result<Self, MetricsError> {
        if triangles.is_empty() {
            return Err(MetricsError::NotWatertight { reason: "no triangles".into() });
        }
        // Watertight and consistently oriented: every directed edge must
        // appear exactly once, and its reverse exactly once.
        let mut directed = std::collections::HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for e in 0..3 {
                let edge = (tri[e], tri[(e + 1) % 3]);
                if directed.insert(edge, t).is_some() {
                    return Err(MetricsError::NotWatertight {
                        reason: format!("edge {:?} shared by same-winding triangles", edge),
                    });
                }
            }
        }
        for (&(a, b), _) in &directed {
            if !directed.contains_key(&(b, a)) {
                return Err(MetricsError::NotWatertight {
                    reason: format!("boundary edge ({a}, {b})"),
                });
            }
        }
        Ok(MeshSdf { vertices, triangles })
    }

    /// Generalized winding number of `p`; ~1 inside, ~0 outside.
    pub fn winding_number(&self, p: &Vector3<f64>) -> f64 {
        let mut total = 0.0;
        for tri in &self.triangles {
            let a = self.vertices[tri[0] as usize] - p;
            let b = self.vertices[tri[1] as usize] - p;
            let c = self.vertices[tri[2] as usize] - p;
            let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
            let det = a.dot(&b.cross(&c));
            let denom = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
            total += 2.0 * det.atan2(denom);
        }
        total / (4.0 * std::f64::consts::PI)
    }
}

impl SignedDistance for MeshSdf {
    fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        let mut dist = f64::INFINITY;
        for tri in &self.triangles {
            let (q, _) = closest_point_on_triangle(
                p,
                &self.vertices[tri[0] as usize],
                &self.vertices[tri[1] as usize],
                &self.vertices[tri[2] as usize],
            );
            dist = dist.min((p - q).norm());
        }
        if self.winding_number(p) > 0.5 {
            -dist
        } else {
            dist
        }
    }
}

/// Deepest penetration of a point set into a surface, meters; zero when
/// everything is outside.
pub fn penetration_depth(points: &[Vector3<f64>], surface: &dyn SignedDistance) -> f64 {
    let mut worst = 0.0f64;
    for p in points {
        worst = worst.max(-surface.signed_distance(p));
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<MeanStd, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::NoData);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MeanStd { mean, std: var.sqrt(), count: values.len() })
}

/// Marker reconstruction error: distance statistics between predicted
/// surface points and the observed markers, skipping unobserved entries.
pub fn mre(
    predicted: &[Vector3<f64>],
    observed: &[Option<Vector3<f64>>],
) -> Result<MeanStd, MetricsError> {
    assert_eq!(predicted.len(), observed.len());
    let dists: Vec<f64> = predicted
        .iter()
        .zip(observed)
        .filter_map(|(p, o)| o.as_ref().map(|o| (p - o).norm()))
        .collect();
    mean_std(&dists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::seq::SliceRandom;
    use rand::Rng;

    #[test]
    fn msnr_arithmetic_example_is_exact() {
        let (db, capped) = msnr_db(1.0, 0.1);
        assert_eq!(db, 10.0);
        assert!(!capped);
    }

    #[test]
    fn msnr_caps_smooth_series() {
        // A constant series is an exact fixed point of the reflect-padded
        // average, so the residual power hits the floor.
        let v = vec![0.3; 50];
        let m = msnr(&v).unwrap();
        assert!(m.capped, "residual {}", m.residual_power);
        assert!(m.db > 100.0);
    }

    #[test]
    fn moving_average_reflects_edges() {
        let out = moving_average_3(&[1.0, 2.0, 4.0]);
        assert_relative_eq!(out[0], (2.0 + 1.0 + 2.0) / 3.0);
        assert_relative_eq!(out[1], (1.0 + 2.0 + 4.0) / 3.0);
        assert_relative_eq!(out[2], (2.0 + 4.0 + 2.0) / 3.0);
    }

    #[test]
    fn msnr_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..200)
            .map(|i| (i as f64 * 0.1).sin() + 0.1 * rng.gen::<f64>())
            .collect();
        let base = msnr(&v).unwrap().db;
        for c in [0.5, 2.0, 17.0] {
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            assert_relative_eq!(msnr(&scaled).unwrap().db, base, epsilon = 1e-9);
        }
    }

    #[test]
    fn msnr_strictly_decreases_with_noise() {
        let clean: Vec<f64> = (0..400).map(|i| (i as f64 * 0.05).sin()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<f64> = (0..400).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut last = f64::INFINITY;
        for level in 1..=10 {
            let sigma = 0.02 * level as f64;
            let noisy: Vec<f64> =
                clean.iter().zip(&noise).map(|(c, n)| c + sigma * n).collect();
            let db = msnr(&noisy).unwrap().db;
            assert!(db < last, "level {level}: {db} !< {last}");
            last = db;
        }
    }

    #[test]
    fn jerk_of_cubic_is_six() {
        for &dt in &[0.05, 0.02, 1.0] {
            let x: Vec<f64> = (0..40).map(|i| (i as f64 * dt).powi(3)).collect();
            let j = mean_abs_jerk(&[x], dt).unwrap();
            assert!((j - 6.0).abs() < 1e-9, "dt {dt}: {j}");
        }
        // Four samples exercise the one-sided fallback.
        let x: Vec<f64> = (0..4).map(|i| (i as f64 * 0.1).powi(3)).collect();
        let j = mean_abs_jerk(&[x], 0.1).unwrap();
        assert!((j - 6.0).abs() < 1e-9, "{j}");
    }

    #[test]
    fn jerk_of_constant_velocity_is_zero() {
        // Analytically zero; rounding in the stencil divided by 2 dt^3
        // leaves ~1e-11 of noise.
        let x: Vec<f64> = (0..30).map(|i| 2.0 + 0.3 * i as f64).collect();
        assert!(mean_abs_jerk(&[x], 0.05).unwrap() < 1e-9);
    }

    #[test]
    fn jerk_scaling_properties() {
        let x: Vec<f64> = (0..50).map(|i| ((i as f64) * 0.3).sin()).collect();
        let base = mean_abs_jerk(&[x.clone()], 0.05).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        assert_relative_eq!(mean_abs_jerk(&[scaled], 0.05).unwrap(), 3.0 * base, epsilon = 1e-9);
        assert_relative_eq!(mean_abs_jerk(&[x], 0.1).unwrap(), base / 8.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_frames_are_degenerate() {
        let frames = vec![vec![1.0, 2.0, 3.0]; 12];
        let dc = diversity_coherence(&frames, 5, 0).unwrap();
        assert_eq!(dc.diversity, 0.0);
        assert_eq!(dc.coherence, 1.0);
    }

    #[test]
    fn separated_masses_cluster_cleanly() {
        let mut frames = Vec::new();
        for c in 0..5 {
            for _ in 0..8 {
                frames.push(vec![c as f64 * 10.0, -(c as f64) * 7.0]);
            }
        }
        let dc = diversity_coherence(&frames, 5, 42).unwrap();
        assert!(dc.diversity > 0.1, "diversity {}", dc.diversity);
        assert!(dc.coherence > 0.999, "coherence {}", dc.coherence);
        assert!(dc.inertia < 1e-18);
    }

    #[test]
    fn clustering_is_frame_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut frames: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..4).map(|_| rng.gen::<f64>() * 3.0).collect())
            .collect();
        let a = diversity_coherence(&frames, 5, 9).unwrap();
        frames.shuffle(&mut rng);
        let b = diversity_coherence(&frames, 5, 9).unwrap();
        assert_eq!(a.diversity, b.diversity);
        assert_eq!(a.coherence, b.coherence);
        assert_eq!(a.inertia, b.inertia);
    }

    fn unit_cube() -> (Vec<Vector3<f64>>, Vec<[u32; 3]>) {
        // Axis-aligned cube [-1, 1]^3 with outward winding.
        let v: Vec<Vector3<f64>> = [
            [-1.0, -1.0, -1.0],
            [1.0, -1.0, -1.0],
            [1.0, 1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
            [1.0, -1.0, 1.0],
            [1.0, 1.0, 1.0],
            [-1.0, 1.0, 1.0],
        ]
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .collect();
        let t = vec![
            [0, 2, 1],
            [0, 3, 2], // bottom (z = -1)
            [4, 5, 6],
            [4, 6, 7], // top
            [0, 1, 5],
            [0, 5, 4], // front (y = -1)
            [2, 3, 7],
            [2, 7, 6], // back
            [1, 2, 6],
            [1, 6, 5], // right (x = 1)
            [3, 0, 4],
            [3, 4, 7], // left
        ];
        (v, t)
    }

    fn analytic_box_sdf(p: &Vector3<f64>, half: f64) -> f64 {
        let q = Vector3::new(p.x.abs() - half, p.y.abs() - half, p.z.abs() - half);
        let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        outside + inside
    }

    #[test]
    fn mesh_sdf_matches_analytic_box() {
        let (v, t) = unit_cube();
        let sdf = MeshSdf::new(v, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let p = Vector3::new(
                4.0 * rng.gen::<f64>() - 2.0,
                4.0 * rng.gen::<f64>() - 2.0,
                4.0 * rng.gen::<f64>() - 2.0,
            );
            let got = sdf.signed_distance(&p);
            let want = analytic_box_sdf(&p, 1.0);
            assert!((got - want).abs() < 1e-12, "{p:?}: {got} vs {want}");
        }
    }

    #[test]
    fn open_mesh_is_rejected() {
        let (v, mut t) = unit_cube();
        t.pop();
        assert!(matches!(MeshSdf::new(v, t), Err(MetricsError::NotWatertight { .. })));
    }

    #[test]
    fn penetration_examples() {
        let (v, t) = unit_cube();
        let sdf = MeshSdf::new(v, t).unwrap();
        // Entirely outside.
        let outside = vec![Vector3::new(2.0, 0.0, 0.0), Vector3::new(0.0, 3.0, 1.5)];
        assert_eq!(penetration_depth(&outside, &sdf), 0.0);
        // One vertex 2 mm inside a face.
        let pts = vec![Vector3::new(0.998, 0.0, 0.0), Vector3::new(5.0, 0.0, 0.0)];
        assert_relative_eq!(penetration_depth(&pts, &sdf), 0.002, epsilon = 1e-12);
    }

    #[test]
    fn penetration_matches_analytic_sphere_brute_force() {
        let sphere = AnalyticSphere { center: Vector3::new(0.2, -0.1, 0.4), radius: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vector3<f64>> = (0..200)
            .map(|_| {
                Vector3::new(rng.gen::<f64>() - 0.3, rng.gen::<f64>() - 0.6, rng.gen::<f64>())
            })
            .collect();
        let brute = pts
            .iter()
            .map(|p| (sphere.radius - (p - sphere.center).norm()).max(0.0))
            .fold(0.0f64, f64::max);
        assert!((penetration_depth(&pts, &sphere) - brute).abs() <= 1e-9);
    }

    #[test]
    fn penetration_is_rigid_invariant() {
        let (v, t) = unit_cube();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<Vector3<f64>> = (0..50)
            .map(|_| {
                Vector3::new(
                    3.0 * rng.gen::<f64>() - 1.5,
                    3.0 * rng.gen::<f64>() - 1.5,
                    3.0 * rng.gen::<f64>() - 1.5,
                )
            })
            .collect();
        let sdf = MeshSdf::new(v.clone(), t.clone()).unwrap();
        let before = penetration_depth(&pts, &sdf);

        let rot = crate::geometry::rot_z(0.9) * crate::geometry::rot_x(-0.4);
        let shift = Vector3::new(0.3, -1.1, 0.7);
        let moved_v: Vec<Vector3<f64>> = v.iter().map(|p| rot * p + shift).collect();
        let moved_pts: Vec<Vector3<f64>> = pts.iter().map(|p| rot * p + shift).collect();
        let moved_sdf = MeshSdf::new(moved_v, t).unwrap();
        let after = penetration_depth(&moved_pts, &moved_sdf);
        assert!((before - after).abs() < 1e-9, "{before} vs {after}");
    }

    #[test]
    fn mre_examples() {
        let pred = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.0, 0.0, 0.0)];
        let obs = vec![Some(Vector3::new(1.0, 2.0, 3.0)), Some(Vector3::new(0.0, 0.0, 0.0))];
        let m = mre(&pred, &obs).unwrap();
        assert_eq!((m.mean, m.std), (0.0, 0.0));

        let obs: Vec<Option<Vector3<f64>>> =
            pred.iter().map(|p| Some(p + Vector3::new(0.001, 0.0, 0.0))).collect();
        let m = mre(&pred, &obs).unwrap();
        assert_relative_eq!(m.mean, 0.001, epsilon = 1e-15);
        assert_relative_eq!(m.std, 0.0, epsilon = 1e-15);

        // Invisible markers are skipped.
        let obs = vec![None, Some(Vector3::new(0.002, 0.0, 0.0))];
        let m = mre(&pred, &obs).unwrap();
        assert_eq!(m.count, 1);
        assert_relative_eq!(m.mean, 0.002, epsilon = 1e-15);
    }
}
