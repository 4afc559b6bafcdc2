//! Edge-first assembly of detected corners into identified markers.
//!
//! Scoring every 4-subset of corners is hopeless at realistic corner counts,
//! so the pipeline goes edge-first: filter corner pairs by distance, ask a
//! pairwise classifier for edge probabilities, search the surviving edge
//! graph for convex quadrilaterals, and only then run the tag classifier
//! once per block. Tags are cross-checked by voting inside each patch and
//! finally expanded into per-corner marker IDs.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::Vector2;
use thiserror::Error;

use crate::marker::{MarkerId, Orientation, PatchTemplate, TagPair, TemplateSet};

/// Corners below this confidence never enter assembly.
pub const CORNER_CONFIDENCE_THRESHOLD: f64 = 0.6;
/// Proposed edges below this probability are discarded.
pub const EDGE_PROBABILITY_THRESHOLD: f64 = 0.75;

const MIN_EDGE_SAMPLES: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("need at least {min} edge length samples, got {got}")]
    TooFewEdgeSamples { got: usize, min: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CornerCandidate {
    /// Pixel position in the source image.
    pub position: Vector2<f64>,
    pub confidence: f64,
}

impl CornerCandidate {
    pub fn new(u: f64, v: f64, confidence: f64) -> Self {
        CornerCandidate { position: Vector2::new(u, v), confidence }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCandidate {
    pub a: u32,
    pub b: u32,
    pub probability: f64,
}

/// A tagged block. `corners[k]` is the image corner sitting on local lattice
/// corner `k` of the block's cell, so IDs can be read straight off the
/// template.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCandidate {
    pub corners: [u32; 4],
    pub tag: TagPair,
    pub tag_confidence: f64,
}

/// Classifier verdict for one queried quadrilateral. `orientation` rotates
/// the queried corner ordering onto the block's local corner order:
/// local corner `k` is queried corner `(k + steps) % 4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockLabel {
    pub tag: TagPair,
    pub orientation: Orientation,
    pub confidence: f64,
}

/// Geometric acceptance tests shared by block assembly and the exhaustive
/// baseline count.
#[derive(Debug, Clone, Copy)]
pub struct QuadFilters {
    /// Longest over shortest side.
    pub max_aspect: f64,
    /// Smallest interior angle, radians.
    pub min_interior_angle: f64,
}

impl Default for QuadFilters {
    fn default() -> Self {
        // Defaults pass every ground-truth block up to roughly 60 degrees of
        // surface tilt.
        QuadFilters { max_aspect: 3.0, min_interior_angle: 20f64.to_radians() }
    }
}

impl QuadFilters {
    pub fn accept(&self, quad: &[Vector2<f64>; 4]) -> bool {
        convex_quad_metrics(quad)
            .is_some_and(|(aspect, angle)| aspect <= self.max_aspect && angle >= self.min_interior_angle)
    }
}

/// Side ratio and minimum interior angle of the polygon, or None when the
/// given cyclic order is not strictly convex (this also rejects bowties,
/// repeated points and collinear corners).
fn convex_quad_metrics(p: &[Vector2<f64>; 4]) -> Option<(f64, f64)> {
    let mut turn_sign = 0.0f64;
    let mut min_side = f64::INFINITY;
    let mut max_side = 0.0f64;
    let mut min_angle = f64::INFINITY;
    for i in 0..4 {
        let prev = p[(i + 3) % 4];
        let v = p[i];
        let next = p[(i + 1) % 4];
        let inc = v - prev;
        let out = next - v;
        let cross = inc.x * out.y - inc.y * out.x;
        if cross == 0.0 {
            return None;
        }
        if turn_sign == 0.0 {
            turn_sign = cross.signum();
        } else if cross.signum() != turn_sign {
            return None;
        }
        let side = out.norm();
        if side == 0.0 {
            return None;
        }
        min_side = min_side.min(side);
        max_side = max_side.max(side);
        let a = (prev - v) / inc.norm();
        let b = out / side;
        min_angle = min_angle.min(a.dot(&b).clamp(-1.0, 1.0).acos());
    }
    Some((max_side / min_side, min_angle))
}

fn shoelace(p: &[Vector2<f64>; 4]) -> f64 {
    (0..4)
        .map(|i| {
            let q = p[(i + 1) % 4];
            p[i].x * q.y - q.x * p[i].y
        })
        .sum()
}

/// 95th percentile of sampled true edge lengths, linearly interpolated.
/// Chosen so the pair-distance gate keeps ~95% of true edges while pruning
/// the vast majority of corner pairs.
pub fn compute_distance_threshold(edge_length_samples: &[f64]) -> Result<f64, AssemblyError> {
    let n = edge_length_samples.len();
    if n < MIN_EDGE_SAMPLES {
        return Err(AssemblyError::TooFewEdgeSamples { got: n, min: MIN_EDGE_SAMPLES });
    }
    let mut s = edge_length_samples.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = 0.95 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    Ok(if lo + 1 < n { s[lo] + (s[lo + 1] - s[lo]) * frac } else { s[lo] })
}

/// Query the pairwise classifier for every unordered corner pair within
/// `threshold` pixels; keep pairs at probability 0.75 or better.
pub fn propose_edges(
    corners: &[CornerCandidate],
    threshold: f64,
    mut classifier: impl FnMut(usize, usize) -> f64,
) -> Vec<EdgeCandidate> {
    let mut edges = Vec::new();
    for i in 0..corners.len() {
        for j in i + 1..corners.len() {
            if (corners[i].position - corners[j].position).norm() > threshold {
                continue;
            }
            let p = classifier(i, j);
            if p >= EDGE_PROBABILITY_THRESHOLD {
                edges.push(EdgeCandidate { a: i as u32, b: j as u32, probability: p });
            }
        }
    }
    edges
}

/// Enumerate 4-cycles of the edge graph and keep the ones whose polygon
/// passes the geometric filters. Each block comes back once, in canonical
/// order: the lowest corner index first, winding counterclockwise on screen
/// (v grows downward, so the shoelace sum is negative).
pub fn assemble_blocks(
    corners: &[CornerCandidate],
    edges: &[EdgeCandidate],
    filters: &QuadFilters,
) -> Vec<[u32; 4]> {
    let n = corners.len();
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
    for e in edges {
        adj[e.a as usize].push(e.b);
        adj[e.b as usize].push(e.a);
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }

    let mut out = Vec::new();
    // A 4-cycle a-b-c-d is found through its diagonal (a, c): b and d are
    // common neighbours of a and c. Requiring a to be the smallest index in
    // the cycle reports each cycle exactly once.
    for a in 0..n {
        let mut middles: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &b in &adj[a] {
            if (b as usize) < a {
                continue;
            }
            for &c in &adj[b as usize] {
                if (c as usize) > a {
                    middles.entry(c).or_default().push(b);
                }
            }
        }
        for (&c, bs) in &middles {
            for i in 0..bs.len() {
                for j in i + 1..bs.len() {
                    let (b, d) = (bs[i], bs[j]);
                    let quad = [
                        corners[a].position,
                        corners[b as usize].position,
                        corners[c as usize].position,
                        corners[d as usize].position,
                    ];
                    if !filters.accept(&quad) {
                        continue;
                    }
                    if shoelace(&quad) < 0.0 {
                        out.push([a as u32, b, c, d]);
                    } else {
                        out.push([a as u32, d, c, b]);
                    }
                }
            }
        }
    }
    out
}

/// Run the block classifier over assembled quadrilaterals. Blocks whose tag
/// is unknown to the session's templates are dropped; any corner only they
/// referenced simply never receives an ID. Recognized blocks get their
/// corner order rotated into the template's local order.
pub fn identify_blocks(
    quads: &[[u32; 4]],
    templates: &TemplateSet,
    mut classifier: impl FnMut(&[u32; 4]) -> Option<BlockLabel>,
) -> Vec<BlockCandidate> {
    let mut out = Vec::new();
    for q in quads {
        let Some(label) = classifier(q) else { continue };
        if templates.lookup_tag(label.tag).is_none() {
            continue;
        }
        let s = label.orientation.steps();
        let corners = std::array::from_fn(|k| q[(k + s) % 4]);
        out.push(BlockCandidate { corners, tag: label.tag, tag_confidence: label.confidence });
    }
    out
}

/// Lattice offset (cell_j - cell_i) implied by block i's local corner ki
/// coinciding with block j's local corner kj.
fn corner_offset(ki: usize, kj: usize) -> (isize, isize) {
    let a = PatchTemplate::corner_lattice((0, 0), ki);
    let b = PatchTemplate::corner_lattice((0, 0), kj);
    (a.0 as isize - b.0 as isize, a.1 as isize - b.1 as isize)
}

/// Cross-check block tags inside each physical patch.
///
/// Blocks sharing corners are lattice neighbours; walking those relations
/// places every block of a connected component in one lattice frame. Each
/// block then votes on every other component member's tag by projecting its
/// own tag hypothesis across the lattice offset. Plurality wins, a block's
/// own classifier output counts as one vote, and ties keep the classifier
/// tag so voting only overrides with positive evidence.
pub fn vote_correct(blocks: &[BlockCandidate], templates: &TemplateSet) -> Vec<BlockCandidate> {
    let n = blocks.len();
    let mut users: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for (bi, b) in blocks.iter().enumerate() {
        for (k, &c) in b.corners.iter().enumerate() {
            users.entry(c).or_default().push((bi, k));
        }
    }

    // Pairwise offsets from shared corners; a pair whose shared corners
    // imply contradictory offsets is corrupt and ignored.
    let mut offsets: BTreeMap<(usize, usize), Option<(isize, isize)>> = BTreeMap::new();
    for list in users.values() {
        for x in 0..list.len() {
            for y in x + 1..list.len() {
                let (bi, ki) = list[x];
                let (bj, kj) = list[y];
                if bi == bj {
                    continue;
                }
                let (lo, hi, d) = if bi < bj {
                    (bi, bj, corner_offset(ki, kj))
                } else {
                    let (dr, dc) = corner_offset(kj, ki);
                    (bj, bi, (dr, dc))
                };
                offsets
                    .entry((lo, hi))
                    .and_modify(|e| {
                        if *e != Some(d) {
                            *e = None;
                        }
                    })
                    .or_insert(Some(d));
            }
        }
    }

    let mut adj: Vec<Vec<(usize, (isize, isize))>> = vec![Vec::new(); n];
    for (&(i, j), &d) in &offsets {
        if let Some((dr, dc)) = d {
            adj[i].push((j, (dr, dc)));
            adj[j].push((i, (-dr, -dc)));
        }
    }

    // BFS components; first placement wins if a cycle closes inconsistently.
    let mut comp = vec![usize::MAX; n];
    let mut pos = vec![(0isize, 0isize); n];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let cid = components.len();
        comp[start] = cid;
        pos[start] = (0, 0);
        let mut members = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &(v, (dr, dc)) in &adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = cid;
                    pos[v] = (pos[u].0 + dr, pos[u].1 + dc);
                    members.push(v);
                    queue.push_back(v);
                }
            }
        }
        components.push(members);
    }

    let mut out = blocks.to_vec();
    for members in &components {
        if members.len() < 2 {
            continue;
        }
        for &b in members {
            let mut votes: BTreeMap<TagPair, usize> = BTreeMap::new();
            *votes.entry(blocks[b].tag).or_insert(0) += 1;
            for &v in members {
                if v == b {
                    continue;
                }
                let Some((tpl, cell)) = templates.lookup_tag(blocks[v].tag) else { continue };
                let r = cell.0 as isize + (pos[b].0 - pos[v].0);
                let c = cell.1 as isize + (pos[b].1 - pos[v].1);
                if r < 0 || c < 0 {
                    continue;
                }
                if let Some(t) = tpl.tag_at((r as usize, c as usize)) {
                    *votes.entry(t).or_insert(0) += 1;
                }
            }
            let best = votes.values().copied().max().unwrap_or(0);
            let mut winners = votes.iter().filter(|&(_, &c)| c == best);
            let first = winners.next().map(|(&t, _)| t);
            if let (Some(t), None) = (first, winners.next()) {
                out[b].tag = t;
            }
            // several tags tied: keep the classifier output
        }
    }
    out
}

/// Expand voted blocks into per-corner marker IDs.
///
/// Corners claimed by several blocks must agree; a disagreement voids every
/// claim on that corner. A marker ID claimed by two distinct image corners
/// is dropped entirely so the output is unique per frame and camera.
pub fn assign_corner_ids(
    blocks: &[BlockCandidate],
    templates: &TemplateSet,
    corners: &[CornerCandidate],
) -> Vec<(MarkerId, Vector2<f64>)> {
    let mut claims: BTreeMap<u32, Option<MarkerId>> = BTreeMap::new();
    for b in blocks {
        let Some((tpl, cell)) = templates.lookup_tag(b.tag) else { continue };
        for k in 0..4 {
            let id = tpl.corner_id(cell, k);
            claims
                .entry(b.corners[k])
                .and_modify(|e| {
                    if e.as_ref() != Some(&id) {
                        *e = None;
                    }
                })
                .or_insert(Some(id));
        }
    }
    let mut by_id: HashMap<MarkerId, Vec<u32>> = HashMap::new();
    for (&corner, claim) in &claims {
        if let Some(id) = claim {
            by_id.entry(id.clone()).or_default().push(corner);
        }
    }
    let mut out: Vec<(MarkerId, Vector2<f64>)> = by_id
        .into_iter()
        .filter(|(_, cs)| cs.len() == 1)
        .map(|(id, cs)| (id, corners[cs[0] as usize].position))
        .collect();
    out.sort_by(|a, b| (&a.0.patch, a.0.index).cmp(&(&b.0.patch, b.0.index)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateReduction {
    /// 4-subsets of the frame's corners passing the pure-geometry quad test,
    /// i.e. what a detector without the edge stage would have to classify.
    pub exhaustive_quads: usize,
    pub edges: usize,
    pub blocks: usize,
}

/// Diamond angle: monotone in true angle, no trig. Range [0, 4).
fn pseudo_angle(d: Vector2<f64>) -> f64 {
    if d.x == 0.0 && d.y == 0.0 {
        return 0.0;
    }
    let p = d.x / (d.x.abs() + d.y.abs());
    if d.y >= 0.0 { 1.0 - p } else { 3.0 + p }
}

/// Order four points counterclockwise around their centroid. For points in
/// convex position this is the hull cycle; otherwise the polygon is
/// non-convex in every order and the filters reject it.
fn angular_order(pts: [Vector2<f64>; 4]) -> [Vector2<f64>; 4] {
    let centroid = (pts[0] + pts[1] + pts[2] + pts[3]) / 4.0;
    let mut keyed = pts.map(|p| (pseudo_angle(p - centroid), p));
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.map(|(_, p)| p)
}

/// Compare the edge-first path against the exhaustive baseline that tests
/// every 4-subset of corners with the same geometric filters.
pub fn candidate_reduction_report(
    corners: &[CornerCandidate],
    edges: &[EdgeCandidate],
    blocks: &[[u32; 4]],
    filters: &QuadFilters,
) -> CandidateReduction {
    let pts: Vec<Vector2<f64>> = corners.iter().map(|c| c.position).collect();
    let n = pts.len();
    let mut exhaustive = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    let quad = angular_order([pts[i], pts[j], pts[k], pts[l]]);
                    if filters.accept(&quad) {
                        exhaustive += 1;
                    }
                }
            }
        }
    }
    CandidateReduction { exhaustive_quads: exhaustive, edges: edges.len(), blocks: blocks.len() }
}

/// Pixel lengths of all four sides of each block; feeds the distance
/// threshold for later frames.
pub fn block_side_lengths(blocks: &[BlockCandidate], corners: &[CornerCandidate]) -> Vec<f64> {
    let mut out = Vec::with_capacity(blocks.len() * 4);
    for b in blocks {
        for k in 0..4 {
            let p = corners[b.corners[k] as usize].position;
            let q = corners[b.corners[(k + 1) % 4] as usize].position;
            out.push((p - q).norm());
        }
    }
    out
}
