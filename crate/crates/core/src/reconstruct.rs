//! Per-frame triangulation of identified corners and temporal track cleanup.
//!
//! Stages run in the order cluster filter, z-score outlier removal, gap
//! fill. The first works on one frame across markers of a patch, the other
//! two on one marker's track across frames.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector2, Vector3};

use crate::geometry::{triangulate_ransac, CameraModel, Observation, RansacConfig};
use crate::marker::MarkerId;

pub const ZSCORE_WINDOW: usize = 11;
pub const ZSCORE_THRESHOLD: f64 = 3.0;

/// One reconstructed marker sample. `view_count` is at least 3 on
/// triangulated samples and 0 on interpolated ones.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerSample {
    pub position: Vector3<f64>,
    pub view_count: usize,
    /// Mean reprojection error over the supporting views, pixels.
    pub reproj_error: f64,
    pub interpolated: bool,
}

/// Per-marker time series; None where the marker is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerTrack {
    pub id: MarkerId,
    pub samples: Vec<Option<MarkerSample>>,
}

/// Triangulate one frame of identified corners. `observations[c]` lists the
/// corners camera `rig[c]` identified. Markers seen by fewer than three
/// cameras are omitted, as are markers RANSAC finds no consensus for.
pub fn triangulate_frame(
    observations: &[Vec<(MarkerId, Vector2<f64>)>],
    rig: &[CameraModel<f64>],
    config: &RansacConfig,
) -> BTreeMap<MarkerId, MarkerSample> {
    assert_eq!(observations.len(), rig.len(), "one corner list per camera");
    let mut grouped: BTreeMap<&MarkerId, Vec<Observation<'_, f64>>> = BTreeMap::new();
    for (cam, corners) in rig.iter().zip(observations) {
        for (id, pixel) in corners {
            grouped.entry(id).or_default().push(Observation { camera: cam, pixel: *pixel });
        }
    }
    let mut out = BTreeMap::new();
    for (id, obs) in grouped {
        if obs.len() < 3 {
            continue;
        }
        let Ok(t) = triangulate_ransac(&obs, config) else { continue };
        out.insert(
            id.clone(),
            MarkerSample {
                position: t.point,
                view_count: t.inliers.len(),
                reproj_error: t.mean_reprojection_error,
                interpolated: false,
            },
        );
    }
    out
}

/// Drop triangulation ghosts patch by patch.
///
/// Markers of one patch are clustered by single linkage with cutoff twice
/// the patch diagonal; only the largest cluster survives. Size ties go to
/// the cluster with the smaller mean reprojection error, then to the one
/// containing the smallest marker ID so the result is deterministic.
/// Patches without a known diagonal are left untouched.
pub fn patch_cluster_filter(
    frame: &BTreeMap<MarkerId, MarkerSample>,
    patch_diagonals: &BTreeMap<String, f64>,
) -> BTreeMap<MarkerId, MarkerSample> {
    let mut by_patch: BTreeMap<&str, Vec<(&MarkerId, &MarkerSample)>> = BTreeMap::new();
    for (id, s) in frame {
        by_patch.entry(id.patch.as_str()).or_default().push((id, s));
    }

    let mut out = BTreeMap::new();
    for (patch, points) in by_patch {
        let Some(&diag) = patch_diagonals.get(patch) else {
            for (id, s) in points {
                out.insert(id.clone(), s.clone());
            }
            continue;
        };
        let cutoff = 2.0 * diag;
        let n = points.len();
        // Single linkage: connected components of the "within cutoff" graph.
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let r = find(parent, parent[i]);
                parent[i] = r;
            }
            parent[i]
        }
        for i in 0..n {
            for j in i + 1..n {
                if (points[i].1.position - points[j].1.position).norm() <= cutoff {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri] = rj;
                    }
                }
            }
        }
        let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            clusters.entry(r).or_default().push(i);
        }
        let best = clusters
            .values()
            .max_by(|a, b| {
                let mean_err = |c: &Vec<usize>| {
                    c.iter().map(|&i| points[i].1.reproj_error).sum::<f64>() / c.len() as f64
                };
                let min_id = |c: &Vec<usize>| points[*c.iter().min().unwrap()].0;
                (a.len(), std::cmp::Reverse(mean_err(a)), std::cmp::Reverse(min_id(a)))
                    .partial_cmp(&(b.len(), std::cmp::Reverse(mean_err(b)), std::cmp::Reverse(min_id(b))))
                    .unwrap()
            })
            .into_iter()
            .flatten();
        for &i in best {
            out.insert(points[i].0.clone(), points[i].1.clone());
        }
    }
    out
}

/// Assemble per-frame triangulations into per-marker tracks. Track order and
/// sample indexing are deterministic: markers sorted by ID, one sample slot
/// per input frame.
pub fn build_tracks(frames: &[BTreeMap<MarkerId, MarkerSample>]) -> Vec<MarkerTrack> {
    let ids: BTreeSet<&MarkerId> = frames.iter().flat_map(|f| f.keys()).collect();
    ids.into_iter()
        .map(|id| MarkerTrack {
            id: id.clone(),
            samples: frames.iter().map(|f| f.get(id).cloned()).collect(),
        })
        .collect()
}

/// Remove samples that stick out of their temporal neighbourhood.
///
/// For each present sample, the mean and deviation of every coordinate are
/// taken over the other present samples inside the centered window; any
/// coordinate beyond `threshold` deviations marks the sample missing.
/// Windows with fewer than 3 other present samples skip the test. Removal
/// repeats until nothing changes, which makes the filter idempotent even
/// when neighbouring spikes mask each other on the first pass.
pub fn zscore_filter(track: &MarkerTrack, window: usize, threshold: f64) -> MarkerTrack {
    assert!(window % 2 == 1 && window >= 5, "window must be odd and at least 5");
    let half = window / 2;
    let mut samples = track.samples.clone();
    loop {
        let mut removed = Vec::new();
        for i in 0..samples.len() {
            let Some(s) = &samples[i] else { continue };
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(samples.len() - 1);
            let others: Vec<&Vector3<f64>> = (lo..=hi)
                .filter(|&j| j != i)
                .filter_map(|j| samples[j].as_ref().map(|o| &o.position))
                .collect();
            if others.len() < 3 {
                continue;
            }
            let n = others.len() as f64;
            for axis in 0..3 {
                let mean = others.iter().map(|p| p[axis]).sum::<f64>() / n;
                let var = others.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                let dx = (s.position[axis] - mean).abs();
                let out_of_band = if std > 0.0 { dx / std > threshold } else { dx > 0.0 };
                if out_of_band {
                    removed.push(i);
                    break;
                }
            }
        }
        if removed.is_empty() {
            break;
        }
        for i in removed {
            samples[i] = None;
        }
    }
    MarkerTrack { id: track.id.clone(), samples }
}

/// Fill missing samples that have an observed anchor on both sides.
///
/// A missing frame i is interpolated linearly between the nearest observed
/// frame in {i-1, i-2} and the nearest in {i+1, i+2}; anchors are taken
/// from the input occupancy, so filled samples never chain off each other.
/// Present samples pass through untouched.
pub fn fill_gaps(track: &MarkerTrack) -> MarkerTrack {
    let samples = &track.samples;
    let n = samples.len();
    let mut out = samples.clone();
    for i in 0..n {
        if samples[i].is_some() {
            continue;
        }
        let prev = [1usize, 2]
            .iter()
            .filter_map(|&d| i.checked_sub(d))
            .find(|&j| samples[j].is_some());
        let next = [1usize, 2].iter().map(|&d| i + d).find(|&j| j < n && samples[j].is_some());
        let (Some(ip), Some(inx)) = (prev, next) else { continue };
        let a = samples[ip].as_ref().unwrap();
        let b = samples[inx].as_ref().unwrap();
        let t = (i - ip) as f64 / (inx - ip) as f64;
        out[i] = Some(MarkerSample {
            position: a.position + (b.position - a.position) * t,
            view_count: 0,
            reproj_error: 0.0,
            interpolated: true,
        });
    }
    MarkerTrack { id: track.id.clone(), samples: out }
}

/// The standard cleanup chain for one track.
pub fn clean_track(track: &MarkerTrack) -> MarkerTrack {
    fill_gaps(&zscore_filter(track, ZSCORE_WINDOW, ZSCORE_THRESHOLD))
}
