//! Marker-to-surface calibration and per-frame hand pose solving.
//!
//! The pose is packed into 36 numbers: world translation (3), a six-number
//! rotation parameterization (6), and the 27 joint angles. The objective is
//! the sum of squared distances between posed binding points and observed
//! markers plus a soft joint-limit penalty, differentiated exactly with
//! forward-mode duals over the whole kinematic chain and minimized by
//! adaptive-moment descent with warm starts between frames.
//!
//! Calibration alternates pose optimization with re-association: once a
//! frame's pose has settled, each visible marker's binding is reset to the
//! closest surface point on its own attachment segment. The bindings left
//! by the last calibration frame are frozen for tracking.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rot6d_to_matrix, RigidTransform, Rotation6D};
use crate::hand::{
    phi_limits, segment_transforms, skeleton_from_beta, Binding, BindingAggregate, HandPose,
    KinematicHand, Skeleton, DORSUM, NUM_SEGMENTS, PALM, PHI_DOFS, SEGMENT_NAMES,
};
use crate::marker::{MarkerId, MarkerLayout};
use crate::scalar::{Adam, Dual};

/// Translation (3) + rotation (6) + joint angles (27).
pub const POSE_PARAMS: usize = 9 + PHI_DOFS;

/// Frozen-DoF indexing into the packed pose vector: 0..3 translation,
/// 3..9 orientation, `9 + k` for joint angle `k`.
pub const ROOT_PARAMS: std::ops::Range<usize> = 0..9;

type D = Dual<POSE_PARAMS>;

/// Second-moment decay for the pose optimizer. The default 0.999 tracks the
/// gradient variance too slowly for this few-parameter deterministic
/// problem: steps keep oscillating at learning-rate scale near the optimum
/// instead of damping out. A ten-step memory both settles the tail and
/// keeps full step size during the long first-frame travel.
const SECOND_MOMENT_DECAY: f64 = 0.9;

fn pose_optimizer(learning_rate: f64) -> Adam {
    let mut adam = Adam::new(POSE_PARAMS, learning_rate);
    adam.beta2 = SECOND_MOMENT_DECAY;
    adam
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("no visible bound markers: unconstrained frame")]
    UnconstrainedFrame,
    #[error("calibration frame {frame} has {visible} visible markers, need at least 4")]
    TooFewVisible { frame: usize, visible: usize },
    #[error("calibration needs at least one frame")]
    NoFrames,
    #[error("unknown segment {0:?}")]
    UnknownSegment(String),
    #[error("orientation parameters became degenerate")]
    DegenerateOrientation,
    #[error("binding for {patch}#{index} rejected: {reason}")]
    BadBinding { patch: String, index: u32, reason: &'static str },
    #[error("solver config field {0} must be positive")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub learning_rate: f64,
    /// Step size during calibration. Larger than `learning_rate`: the first
    /// calibration frame must travel from the zero pose to wherever the
    /// subject holds the hand, and the distal flexes only snap in once that
    /// journey is done. 0.002 leaves them a few degrees short within the
    /// first-frame step budget; 0.003 lands with room to spare.
    pub calib_learning_rate: f64,
    pub epochs: usize,
    /// Per-frame step budget for calibration frames after the first. Warm
    /// starts keep the strongly observed parameters close, but the weakly
    /// observed twists converge slowly and need the extra room for the
    /// output bindings to be reproducible run over run.
    pub calib_epochs: usize,
    /// Budget for the first calibration frame, which starts from zero.
    pub calib_first_frame_iters: usize,
    /// Weight of the joint-limit penalty (point term in m², penalty in rad²).
    pub lambda_reg: f64,
    /// Early-stop threshold on the free-parameter gradient norm.
    pub grad_tolerance: f64,
    /// Disable to always spend the full epoch budget.
    pub early_stop: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            learning_rate: 0.002,
            calib_learning_rate: 0.003,
            epochs: 400,
            calib_epochs: 600,
            calib_first_frame_iters: 1000,
            lambda_reg: 1.0,
            grad_tolerance: 1e-7,
            early_stop: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.learning_rate > 0.0) {
            return Err(SolveError::BadConfig("learning_rate"));
        }
        if !(self.calib_learning_rate > 0.0) {
            return Err(SolveError::BadConfig("calib_learning_rate"));
        }
        if self.epochs == 0 {
            return Err(SolveError::BadConfig("epochs"));
        }
        if self.calib_epochs == 0 {
            return Err(SolveError::BadConfig("calib_epochs"));
        }
        if self.calib_first_frame_iters == 0 {
            return Err(SolveError::BadConfig("calib_first_frame_iters"));
        }
        if !(self.lambda_reg > 0.0) {
            return Err(SolveError::BadConfig("lambda_reg"));
        }
        if !(self.grad_tolerance > 0.0) {
            return Err(SolveError::BadConfig("grad_tolerance"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pose packing

pub fn pack_pose(pose: &HandPose) -> [f64; POSE_PARAMS] {
    let mut p = [0.0; POSE_PARAMS];
    p[0] = pose.root.translation.x;
    p[1] = pose.root.translation.y;
    p[2] = pose.root.translation.z;
    p[3..9].copy_from_slice(&Rotation6D::from_matrix(&pose.root.rotation).0);
    p[9..].copy_from_slice(&pose.phi);
    p
}

pub fn unpack_pose(params: &[f64; POSE_PARAMS]) -> Result<HandPose, SolveError> {
    let six = Rotation6D([params[3], params[4], params[5], params[6], params[7], params[8]]);
    let rotation = rot6d_to_matrix(&six).map_err(|_| SolveError::DegenerateOrientation)?;
    let translation = Vector3::new(params[0], params[1], params[2]);
    let mut phi = [0.0; PHI_DOFS];
    phi.copy_from_slice(&params[9..]);
    Ok(HandPose { root: RigidTransform::new(rotation, translation), phi })
}

/// Calibration start: origin, identity orientation, flat hand.
pub fn zero_pose_params() -> [f64; POSE_PARAMS] {
    let mut p = [0.0; POSE_PARAMS];
    p[3..9].copy_from_slice(&Rotation6D::<f64>::identity().0);
    p
}

// ---------------------------------------------------------------------------
// Objective terms

/// Sum of squared distances between posed bindings and observed markers,
/// over the markers that are both observed and bound.
pub fn e_point(
    hand: &KinematicHand,
    pose: &HandPose,
    bindings: &BTreeMap<MarkerId, Binding>,
    observed: &BTreeMap<MarkerId, Vector3<f64>>,
) -> Result<f64, SolveError> {
    let transforms = hand.pose(&pose.root, &pose.phi);
    let mut e = 0.0;
    let mut any = false;
    for (id, m) in observed {
        let Some(b) = bindings.get(id) else { continue };
        let x: Vector3<f64> = hand.binding_aggregate(b).position(&transforms);
        e += (x - m).norm_squared();
        any = true;
    }
    if !any {
        return Err(SolveError::UnconstrainedFrame);
    }
    Ok(e)
}

/// Squared distance of each joint angle to its limit interval; zero inside
/// the interval, boundary included.
pub fn e_reg(phi: &[f64; PHI_DOFS], limits: &[(f64, f64); PHI_DOFS]) -> f64 {
    let mut e = 0.0;
    for (k, &(lo, hi)) in limits.iter().enumerate() {
        let d = if phi[k] > hi {
            phi[k] - hi
        } else if phi[k] < lo {
            lo - phi[k]
        } else {
            0.0
        };
        e += d * d;
    }
    e
}

fn e_reg_dual(phi: &[D], limits: &[(f64, f64); PHI_DOFS]) -> D {
    let mut e = D::constant(0.0);
    for (k, &(lo, hi)) in limits.iter().enumerate() {
        let x = phi[k];
        // Branch on the value; the clipped bound is a constant, so the
        // penalty gradient is exactly zero inside the limits.
        let d = if x.re > hi {
            x - D::constant(hi)
        } else if x.re < lo {
            D::constant(lo) - x
        } else {
            continue;
        };
        e = e + d * d;
    }
    e
}

/// One marker's contribution: precomputed skinning terms plus where it was
/// seen this frame.
struct Term {
    aggregate: BindingAggregate,
    observed: Vector3<f64>,
}

fn build_terms(
    hand: &KinematicHand,
    bindings: &BTreeMap<MarkerId, Binding>,
    observed: &BTreeMap<MarkerId, Vector3<f64>>,
) -> Vec<Term> {
    observed
        .iter()
        .filter_map(|(id, m)| {
            let b = bindings.get(id)?;
            Some(Term { aggregate: hand.binding_aggregate(b), observed: *m })
        })
        .collect()
}

struct Eval {
    e: f64,
    grad: [f64; POSE_PARAMS],
}

/// The dual-number kinematic chain, shape fixed.
struct DualChain {
    skel: Skeleton<D>,
    limits: [(f64, f64); PHI_DOFS],
    lambda: f64,
}

impl DualChain {
    fn new(hand: &KinematicHand, lambda: f64) -> Self {
        let beta = hand.beta.map(D::constant);
        let (skel, _) = skeleton_from_beta::<D>(&hand.config, &beta);
        DualChain { skel, limits: phi_limits(), lambda }
    }

    fn eval(
        &self,
        params: &[f64; POSE_PARAMS],
        terms: &[Term],
        frozen: &BTreeSet<usize>,
    ) -> Result<Eval, SolveError> {
        let vars: [D; POSE_PARAMS] = std::array::from_fn(|i| {
            if frozen.contains(&i) {
                D::constant(params[i])
            } else {
                D::variable(params[i], i)
            }
        });
        let six = Rotation6D([vars[3], vars[4], vars[5], vars[6], vars[7], vars[8]]);
        let rotation = rot6d_to_matrix(&six).map_err(|_| SolveError::DegenerateOrientation)?;
        let root = RigidTransform::new(rotation, Vector3::new(vars[0], vars[1], vars[2]));
        let transforms = segment_transforms(&self.skel, &root, &vars[9..]);
        let mut ep = D::constant(0.0);
        for term in terms {
            let x = term.aggregate.position::<D>(&transforms);
            let dx = x.x - D::constant(term.observed.x);
            let dy = x.y - D::constant(term.observed.y);
            let dz = x.z - D::constant(term.observed.z);
            ep = ep + dx * dx + dy * dy + dz * dz;
        }
        let er = e_reg_dual(&vars[9..], &self.limits);
        let e = ep + er * D::constant(self.lambda);
        Ok(Eval { e: e.re, grad: e.eps })
    }
}

fn grad_norm(g: &[f64; POSE_PARAMS]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean distance between posed bindings and their observed markers.
fn mean_residual(hand: &KinematicHand, pose: &HandPose, terms: &[Term]) -> f64 {
    if terms.is_empty() {
        return f64::NAN;
    }
    let transforms = hand.pose(&pose.root, &pose.phi);
    let sum: f64 = terms
        .iter()
        .map(|t| (t.aggregate.position::<f64>(&transforms) - t.observed).norm())
        .sum();
    sum / terms.len() as f64
}

// ---------------------------------------------------------------------------
// Occlusion-aware freezing

/// DoFs to hold at their previous-frame values, as packed-pose indices.
///
/// A joint freezes when no marker bound to its segment or to any segment
/// further along the kinematic chain is visible. The root translation and
/// orientation freeze when the dorsum and palm markers are all hidden.
pub fn freeze_occluded_dofs(
    visible: &BTreeSet<MarkerId>,
    hand: &KinematicHand,
    bindings: &BTreeMap<MarkerId, Binding>,
) -> BTreeSet<usize> {
    let mut seg_visible = [false; NUM_SEGMENTS];
    for id in visible {
        if let Some(b) = bindings.get(id) {
            seg_visible[b.segment as usize] = true;
        }
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); NUM_SEGMENTS];
    for (s, seg) in hand.skeleton.segs.iter().enumerate() {
        if let Some(p) = seg.parent {
            children[p].push(s);
        }
    }
    let mut frozen = BTreeSet::new();
    for (s, seg) in hand.skeleton.segs.iter().enumerate() {
        let dofs = [seg.dof_flex, seg.dof_abd, seg.dof_twist];
        if dofs.iter().all(Option::is_none) {
            continue;
        }
        let mut stack = vec![s];
        let mut any = false;
        while let Some(u) = stack.pop() {
            if seg_visible[u] {
                any = true;
                break;
            }
            stack.extend(children[u].iter().copied());
        }
        if !any {
            for d in dofs.into_iter().flatten() {
                frozen.insert(9 + d);
            }
        }
    }
    if !seg_visible[DORSUM] && !seg_visible[PALM] {
        frozen.extend(ROOT_PARAMS);
    }
    frozen
}

// ---------------------------------------------------------------------------
// Per-frame solve

#[derive(Debug, Clone)]
pub struct FrameSolve {
    pub pose: HandPose,
    pub e_point: f64,
    pub e_reg: f64,
    pub e_total: f64,
    /// Mean reconstruction error over visible bound markers, meters.
    pub mre: f64,
    pub epochs_run: usize,
    pub grad_norm: f64,
    pub frozen: BTreeSet<usize>,
}

/// Minimize the point and limit terms over the pose, warm-started from the
/// previous frame. Occluded chains keep their previous values bit for bit.
pub fn solve_frame(
    hand: &KinematicHand,
    observed: &BTreeMap<MarkerId, Vector3<f64>>,
    previous: &HandPose,
    bindings: &BTreeMap<MarkerId, Binding>,
    config: &SolverConfig,
) -> Result<FrameSolve, SolveError> {
    config.validate()?;
    let visible: BTreeSet<MarkerId> =
        observed.keys().filter(|id| bindings.contains_key(*id)).cloned().collect();
    if visible.is_empty() {
        return Err(SolveError::UnconstrainedFrame);
    }
    let frozen = freeze_occluded_dofs(&visible, hand, bindings);
    let terms = build_terms(hand, bindings, observed);
    let chain = DualChain::new(hand, config.lambda_reg);

    let start = pack_pose(previous);
    let mut params = start;
    let mut adam = pose_optimizer(config.learning_rate);
    let mut best_params = params;
    let mut best_e = f64::INFINITY;
    let mut epochs_run = 0;
    let mut last_grad = f64::INFINITY;
    for epoch in 0..config.epochs {
        let ev = chain.eval(&params, &terms, &frozen)?;
        if ev.e < best_e {
            best_e = ev.e;
            best_params = params;
        }
        last_grad = grad_norm(&ev.grad);
        if config.early_stop && last_grad < config.grad_tolerance {
            epochs_run = epoch;
            break;
        }
        adam.step(&mut params, &ev.grad);
        // Frozen slots stay bit-identical no matter what the update did.
        for i in frozen.iter() {
            params[*i] = start[*i];
        }
        epochs_run = epoch + 1;
    }
    let ev = chain.eval(&params, &terms, &frozen)?;
    if ev.e < best_e {
        best_params = params;
        last_grad = grad_norm(&ev.grad);
    }

    let mut pose = unpack_pose(&best_params)?;
    if frozen.contains(&0) {
        // The 6D decode is not a bit-exact round trip; restore the root
        // verbatim when it was frozen.
        pose.root = previous.root.clone();
    }
    let transforms = hand.pose(&pose.root, &pose.phi);
    let (mut ep, mut res) = (0.0, 0.0);
    for t in &terms {
        let d = (t.aggregate.position::<f64>(&transforms) - t.observed).norm();
        ep += d * d;
        res += d;
    }
    let er = e_reg(&pose.phi, &chain.limits);
    Ok(FrameSolve {
        pose,
        e_point: ep,
        e_reg: er,
        e_total: ep + config.lambda_reg * er,
        mre: res / terms.len() as f64,
        epochs_run,
        grad_norm: last_grad,
        frozen,
    })
}

// ---------------------------------------------------------------------------
// Calibration

/// Reset every observed marker's binding to the closest surface point on
/// its attachment segment, with the hand held at `pose`.
///
/// The observed position is carried into the segment's rest frame through
/// the segment's rigid motion, so the search runs on the rest mesh.
pub fn reassociate(
    hand: &KinematicHand,
    pose: &HandPose,
    observed: &BTreeMap<MarkerId, Vector3<f64>>,
    attachment: &BTreeMap<MarkerId, usize>,
    bindings: &mut BTreeMap<MarkerId, Binding>,
) {
    let transforms = hand.pose(&pose.root, &pose.phi);
    for (id, m) in observed {
        let Some(&seg) = attachment.get(id) else { continue };
        let canonical = hand.rest_transform(seg).apply(&transforms[seg].inverse().apply(m));
        let hit = hand.closest_on_segment(seg, &canonical);
        bindings.insert(
            id.clone(),
            Binding {
                segment: hand.mesh.tri_segment[hit.triangle as usize],
                triangle: hit.triangle,
                bary: hit.bary,
            },
        );
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    /// Bindings left by the last calibration frame; frozen for tracking.
    pub bindings: BTreeMap<MarkerId, Binding>,
    pub poses: Vec<HandPose>,
    pub per_frame_mre: Vec<f64>,
    /// Mean reconstruction error of the final frame at the final bindings.
    pub mre: f64,
}

/// Alternate pose optimization and marker re-association over a calibration
/// sequence. The pose starts from zero with a larger budget on the first
/// frame; later frames warm start. Bindings start from the layout's designed
/// positions (or from `init`) and are re-associated as the pose settles, but
/// only ever onto their layout attachment segment.
pub fn calibrate(
    frames: &[BTreeMap<MarkerId, Vector3<f64>>],
    hand: &KinematicHand,
    layout: &MarkerLayout,
    config: &SolverConfig,
    init: Option<&BTreeMap<MarkerId, Binding>>,
) -> Result<Calibration, SolveError> {
    config.validate()?;
    if frames.is_empty() {
        return Err(SolveError::NoFrames);
    }
    let mut attachment = BTreeMap::new();
    for (id, entry) in &layout.entries {
        let seg = hand
            .segment_index(&entry.attachment)
            .ok_or_else(|| SolveError::UnknownSegment(entry.attachment.clone()))?;
        attachment.insert(id.clone(), seg);
    }
    let mut bindings: BTreeMap<MarkerId, Binding> = match init {
        Some(b) => b.clone(),
        None => layout
            .entries
            .iter()
            .map(|(id, e)| (id.clone(), hand.bind_local(attachment[id], &e.local_pos)))
            .collect(),
    };
    let chain = DualChain::new(hand, config.lambda_reg);
    let frozen = BTreeSet::new();

    let mut params = zero_pose_params();
    let mut poses = Vec::with_capacity(frames.len());
    let mut per_frame_mre = Vec::with_capacity(frames.len());
    for (f, observed) in frames.iter().enumerate() {
        let n_visible = observed.keys().filter(|id| attachment.contains_key(*id)).count();
        if n_visible < 4 {
            return Err(SolveError::TooFewVisible { frame: f, visible: n_visible });
        }
        // The first frame is pure pose settling: the hand travels from the
        // zero pose toward the marker cloud, and projecting markers onto a
        // surface that is still centimeters off would scatter the bindings.
        // The layout prior also pins the one direction the point term is
        // nearly blind to, a patch sliding around its segment's girth while
        // a twist DoF compensates, so it must not be discarded before the
        // pose has converged against it. Alternation starts on frame 1.
        let (iters, reassoc) = if f == 0 {
            (config.calib_first_frame_iters, false)
        } else {
            (config.calib_epochs, true)
        };
        // The tail of the budget reruns from the best sample at a tenth of
        // the step size. Adam orbits the optimum at an amplitude set by the
        // learning rate, so a short low-rate leg buys most of a decade of
        // residual. On alternation frames it runs after the closing
        // re-association, leaving the frame with a pose optimized against
        // its final bindings.
        let polish = iters / 10;
        let mut adam = pose_optimizer(config.calib_learning_rate);
        let mut terms = build_terms(hand, &bindings, observed);
        // Track the best sample so the frame does not end on whatever point
        // of the optimizer's limit cycle the budget happens to hit.
        let mut best_e = chain.eval(&params, &terms, &frozen)?.e;
        let mut best_params = params;
        for _ in 0..iters - polish {
            let ev = chain.eval(&params, &terms, &frozen)?;
            if ev.e < best_e {
                best_e = ev.e;
                best_params = params;
            }
            if config.early_stop && grad_norm(&ev.grad) < config.grad_tolerance {
                break;
            }
            adam.step(&mut params, &ev.grad);
        }
        params = best_params;
        if reassoc {
            // One projection per frame, at the settled pose. Re-associating
            // mid-descent is poison: markers sit on the surface, so the
            // moment a projection runs, whatever twist error the pose
            // carries is written into the bindings at zero residual, the
            // restoring gradient vanishes, and the twist coordinate is free
            // to wander until the next projection harvests that too. Done
            // once per frame at the best pose, the wander has no way in,
            // and each frame's projection contracts the bindings toward the
            // marker patches' true seats instead. At a fixed pose the
            // projection only lowers E, so the polish below still starts at
            // or under the best value seen so far.
            let pose = unpack_pose(&params)?;
            reassociate(hand, &pose, observed, &attachment, &mut bindings);
            terms = build_terms(hand, &bindings, observed);
            best_e = chain.eval(&params, &terms, &frozen)?.e;
        }
        let mut adam = pose_optimizer(0.1 * config.calib_learning_rate);
        for _ in 0..polish {
            let ev = chain.eval(&params, &terms, &frozen)?;
            if ev.e < best_e {
                best_e = ev.e;
                best_params = params;
            }
            adam.step(&mut params, &ev.grad);
        }
        let ev = chain.eval(&params, &terms, &frozen)?;
        if ev.e < best_e {
            best_params = params;
        }
        params = best_params;
        let pose = unpack_pose(&params)?;
        per_frame_mre.push(mean_residual(hand, &pose, &terms));
        poses.push(pose);
    }
    let mre = *per_frame_mre.last().unwrap();
    Ok(Calibration { bindings, poses, per_frame_mre, mre })
}

// ---------------------------------------------------------------------------
// Binding serialization

/// One row of the bindings file: segment by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerBinding {
    pub marker_id: MarkerId,
    pub segment: String,
    pub tri: u32,
    pub bary: [f64; 3],
}

pub fn export_bindings(
    bindings: &BTreeMap<MarkerId, Binding>,
) -> Vec<MarkerBinding> {
    bindings
        .iter()
        .map(|(id, b)| MarkerBinding {
            marker_id: id.clone(),
            segment: SEGMENT_NAMES[b.segment as usize].to_string(),
            tri: b.triangle,
            bary: b.bary,
        })
        .collect()
}

pub fn import_bindings(
    hand: &KinematicHand,
    rows: &[MarkerBinding],
) -> Result<BTreeMap<MarkerId, Binding>, SolveError> {
    let bad = |row: &MarkerBinding, reason: &'static str| SolveError::BadBinding {
        patch: row.marker_id.patch.clone(),
        index: row.marker_id.index,
        reason,
    };
    let mut out = BTreeMap::new();
    for row in rows {
        let seg = hand
            .segment_index(&row.segment)
            .ok_or_else(|| SolveError::UnknownSegment(row.segment.clone()))?;
        let Some(&tri_seg) = hand.mesh.tri_segment.get(row.tri as usize) else {
            return Err(bad(row, "triangle index out of range"));
        };
        if tri_seg as usize != seg {
            return Err(bad(row, "triangle is not in the segment submesh"));
        }
        let sum: f64 = row.bary.iter().sum();
        if row.bary.iter().any(|&b| b < -1e-9) || (sum - 1.0).abs() > 1e-9 {
            return Err(bad(row, "barycentric weights out of range"));
        }
        out.insert(
            row.marker_id.clone(),
            Binding { segment: seg as u16, triangle: row.tri, bary: row.bary },
        );
    }
    Ok(out)
}
