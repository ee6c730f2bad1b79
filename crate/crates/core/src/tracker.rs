//! 6-DoF registration of semi-dense map points against time-surface
//! potential fields.
//!
//! Per frame the tracker predicts the pose with a constant-velocity model,
//! reprojects the reference points, optionally predicts each point's event
//! polarity and culls points competing for the same nearest edge pixel, and
//! finally refines the pose with robust forward-compositional Gauss-Newton.
//! The solver is generic in the frame the points are expressed in: points
//! warp into the current view as `T⁻¹ · p` and an increment `Δ` composes as
//! `T ← T(Δ) · T`. The tracker keeps reference points in world coordinates,
//! so `T` is the world ← camera pose; the keyframe pose only decides when a
//! depth-based source rebuilds its local map.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use nalgebra::{Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_rep::{
    negate, Event, EventRepError, PotentialField, SurfaceSetBuilder, TimeSurfaceMap,
};
use crate::fields::{build_annf, FieldError};
use crate::geometry::{se3_exp, se3_log, se3_twist_exp, se3_twist_log, CameraIntrinsics, GeometryError, MotionParams, PoseSE3};
use crate::mapping::{build_local_map, DepthAssignParams, DepthFrame, GlobalMap, MapError, SemiDensePoint};
use crate::strategy::{
    FieldChoice, FieldPolicy, OcclusionFilter, PolarityClass, Reprojection, RobustLoss,
    StrategyRegistry, UnknownStrategy,
};

/// Points closer than this to the camera plane are not reprojected.
const MIN_VIEW_DEPTH: f64 = 0.05;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("only {found} usable points, at least {required} required")]
    TooFewPoints { found: usize, required: usize },
    #[error("no map point reprojects into the image")]
    AllPointsOutOfView,
    #[error("robust cost did not decrease after exhausting damping retries")]
    NonDecreasingCost,
    #[error("no edge pixels in the current time surface")]
    EmptyMask,
    #[error("mean robust cost {mean_cost:.4} exceeds the acceptance limit {limit:.4}")]
    PoorAlignment { mean_cost: f64, limit: f64 },
    #[error("invalid tracker configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Strategy(#[from] UnknownStrategy),
    #[error(transparent)]
    Events(#[from] EventRepError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl From<FieldError> for TrackError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::EmptyMask => TrackError::EmptyMask,
            other => TrackError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Time-surface decay constant (s).
    pub tau: f64,
    /// Time-surface threshold for edge pixels.
    pub delta: f64,
    /// Threshold for the pixels lifted into depth-based local maps. Higher
    /// than `delta` so only the newest part of each edge trail is kept.
    pub local_map_delta: f64,
    /// Half-width of the neutral band around 90° (rad).
    pub buffer_half_angle: f64,
    pub huber_scale: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    /// Distance (m) from the keyframe camera that triggers a new local map.
    pub keyframe_baseline: f64,
    pub tsm_rate: f64,
    pub use_stsm: bool,
    pub use_occlusion_culling: bool,
    /// Registered name of the robust kernel.
    pub robust_loss: String,
    pub min_points: usize,
    /// Points predicted to move less than this many pixels per frame register
    /// against the combined surface.
    pub min_flow_px: f64,
    /// Weight of the newest finite-difference velocity in the moving average.
    pub velocity_smoothing: f64,
    pub lm_initial_lambda: f64,
    pub lm_max_retries: usize,
    /// Sample `1 - T` only above `delta` (pixels below read as 1).
    pub threshold_potential: bool,
    /// Frames whose mean robust cost per point exceeds this are rejected.
    pub max_mean_cost: f64,
    pub depth_assign: DepthAssignParams,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tau: 0.03,
            delta: 0.3,
            local_map_delta: 0.85,
            buffer_half_angle: 15f64.to_radians(),
            huber_scale: 0.1,
            max_iterations: 20,
            step_tolerance: 1e-6,
            keyframe_baseline: 0.15,
            tsm_rate: 150.0,
            use_stsm: true,
            use_occlusion_culling: true,
            robust_loss: "huber".to_string(),
            min_points: 10,
            min_flow_px: 0.5,
            velocity_smoothing: 0.5,
            lm_initial_lambda: 1e-4,
            lm_max_retries: 10,
            threshold_potential: false,
            max_mean_cost: 0.06,
            depth_assign: DepthAssignParams::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        let positive = [
            ("tau", self.tau),
            ("huber_scale", self.huber_scale),
            ("step_tolerance", self.step_tolerance),
            ("keyframe_baseline", self.keyframe_baseline),
            ("tsm_rate", self.tsm_rate),
            ("buffer_half_angle", self.buffer_half_angle),
            ("lm_initial_lambda", self.lm_initial_lambda),
            ("max_mean_cost", self.max_mean_cost),
            ("depth_assign.radius", self.depth_assign.radius),
            ("depth_assign.cluster_gap", self.depth_assign.cluster_gap),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(TrackError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.buffer_half_angle >= FRAC_PI_2 {
            return Err(TrackError::Config("buffer_half_angle must be below 90°".into()));
        }
        for (name, v) in [("delta", self.delta), ("local_map_delta", self.local_map_delta)] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrackError::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.max_iterations == 0 || self.min_points == 0 {
            return Err(TrackError::Config("max_iterations and min_points must be positive".into()));
        }
        if !(self.velocity_smoothing > 0.0 && self.velocity_smoothing <= 1.0) {
            return Err(TrackError::Config("velocity_smoothing must lie in (0, 1]".into()));
        }
        if !(self.min_flow_px >= 0.0) {
            return Err(TrackError::Config("min_flow_px must be non-negative".into()));
        }
        Ok(())
    }

    pub fn field_policy_name(&self) -> &'static str {
        if self.use_stsm {
            "stsm"
        } else {
            "tsm"
        }
    }

    pub fn occlusion_filter_name(&self) -> &'static str {
        if self.use_occlusion_culling {
            "annf"
        } else {
            "none"
        }
    }

    pub fn solver_params(&self) -> SolverParams {
        SolverParams {
            max_iterations: self.max_iterations,
            step_tolerance: self.step_tolerance,
            lm_initial_lambda: self.lm_initial_lambda,
            lm_max_retries: self.lm_max_retries,
            min_points: self.min_points,
        }
    }
}

/// How reference points reach the current camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WarpMode {
    /// Points are already in the reference camera frame.
    Local,
    /// World points; `reference` is the world ← reference pose.
    Global { reference: MotionParams },
}

pub fn warp_point(p: &SemiDensePoint, theta_rel: &MotionParams, mode: &WarpMode) -> Vector3<f64> {
    let in_ref = match mode {
        WarpMode::Local => p.position,
        WarpMode::Global { reference } => se3_exp(reference).inverse().transform_point(&p.position),
    };
    se3_exp(theta_rel).inverse().transform_point(&in_ref)
}

/// Image motion (px/s) of a static point `p_cam` seen by a camera moving with
/// body-frame velocities `lin_vel` and `ang_vel`.
pub fn predict_optical_flow(
    p_cam: &Vector3<f64>,
    lin_vel: &Vector3<f64>,
    ang_vel: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, GeometryError> {
    if !(p_cam.z > crate::geometry::MIN_DEPTH) {
        return Err(GeometryError::NonPositiveDepth(p_cam.z));
    }
    let point_velocity = -lin_vel - ang_vel.cross(p_cam);
    Ok(k.projection_jacobian(p_cam) * point_velocity)
}

/// Positive when the projected gradient and the flow are within
/// `90° - buffer` of each other, negative beyond `90° + buffer`.
pub fn predict_polarity(
    gradient_cam: &Vector3<f64>,
    p_cam: &Vector3<f64>,
    flow: &Vector2<f64>,
    k: &CameraIntrinsics,
    buffer_half_angle: f64,
) -> PolarityClass {
    if !(p_cam.z > crate::geometry::MIN_DEPTH) {
        return PolarityClass::Neutral;
    }
    let g = k.projection_jacobian(p_cam) * gradient_cam;
    classify_angle(&g, flow, buffer_half_angle)
}

/// Quantises the angle between an image-plane gradient and a flow vector.
pub fn classify_angle(g: &Vector2<f64>, flow: &Vector2<f64>, buffer_half_angle: f64) -> PolarityClass {
    let (gn, fnorm) = (g.norm(), flow.norm());
    if !(gn > 0.0 && fnorm > 0.0) {
        return PolarityClass::Neutral;
    }
    let alpha = (g.dot(flow) / (gn * fnorm)).clamp(-1.0, 1.0).acos();
    if alpha < FRAC_PI_2 - buffer_half_angle {
        PolarityClass::Positive
    } else if alpha > FRAC_PI_2 + buffer_half_angle {
        PolarityClass::Negative
    } else {
        PolarityClass::Neutral
    }
}

/// Potential fields available for one frame.
#[derive(Debug, Clone)]
pub struct RegistrationFields {
    pub combined: PotentialField,
    pub positive: Option<PotentialField>,
    pub negative: Option<PotentialField>,
}

impl RegistrationFields {
    pub fn combined_only(combined: PotentialField) -> Self {
        Self {
            combined,
            positive: None,
            negative: None,
        }
    }

    /// Falls back to the combined field when a signed one is missing.
    pub fn field(&self, choice: FieldChoice) -> &PotentialField {
        match choice {
            FieldChoice::Combined => &self.combined,
            FieldChoice::Positive => self.positive.as_ref().unwrap_or(&self.combined),
            FieldChoice::Negative => self.negative.as_ref().unwrap_or(&self.combined),
        }
    }
}

/// Residuals and 1×6 Jacobian rows of the in-view points.
#[derive(Debug, Clone, Default)]
pub struct Linearization {
    /// Index into the input point list for each residual.
    pub indices: Vec<usize>,
    pub residuals: Vec<f64>,
    pub jacobian: Vec<[f64; 6]>,
    /// Points that left the image (or the camera's front half-space).
    pub dropped: usize,
}

fn reproject(
    p_ref: &Vector3<f64>,
    inv_rel: &PoseSE3,
    k: &CameraIntrinsics,
) -> Option<(Vector3<f64>, Vector2<f64>)> {
    let p = inv_rel.transform_point(p_ref);
    if p.z < MIN_VIEW_DEPTH {
        return None;
    }
    let uv = k.project(&p).ok()?;
    k.contains(&uv).then_some((p, uv))
}

/// Residuals `r_k = field_k(π(T_rel⁻¹ p_k))` and their derivatives with
/// respect to a compositional increment at zero.
pub fn residuals_and_jacobian(
    points: &[Vector3<f64>],
    choices: &[FieldChoice],
    t_rel: &PoseSE3,
    fields: &RegistrationFields,
    k: &CameraIntrinsics,
) -> Result<Linearization, TrackError> {
    assert_eq!(points.len(), choices.len());
    let inv = t_rel.inverse();
    let mut lin = Linearization::default();
    for (i, (p, choice)) in points.iter().zip(choices).enumerate() {
        let Some((p_cur, uv)) = reproject(p, &inv, k) else {
            lin.dropped += 1;
            continue;
        };
        let Ok((value, grad)) = fields.field(*choice).sample(&uv) else {
            lin.dropped += 1;
            continue;
        };
        // ∂r/∂p_cur, then through p_cur = R_relᵀ (T(Δ)⁻¹ p − t_rel).
        let a = k.projection_jacobian(&p_cur).transpose() * grad;
        let b = t_rel.rotation * a;
        let rot = b.cross(p);
        lin.indices.push(i);
        lin.residuals.push(value);
        lin.jacobian.push([-b.x, -b.y, -b.z, rot.x, rot.y, rot.z]);
    }
    if lin.indices.is_empty() {
        return Err(TrackError::AllPointsOutOfView);
    }
    Ok(lin)
}

/// Sum of robust costs; points out of view count as a full-potential residual.
pub fn robust_cost(
    points: &[Vector3<f64>],
    choices: &[FieldChoice],
    t_rel: &PoseSE3,
    fields: &RegistrationFields,
    k: &CameraIntrinsics,
    loss: &dyn RobustLoss,
) -> f64 {
    let inv = t_rel.inverse();
    let outside = loss.cost(1.0);
    points
        .iter()
        .zip(choices)
        .map(|(p, c)| {
            reproject(p, &inv, k)
                .and_then(|(_, uv)| fields.field(*c).sample(&uv).ok())
                .map_or(outside, |(v, _)| loss.cost(v))
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub lm_initial_lambda: f64,
    pub lm_max_retries: usize,
    pub min_points: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        TrackerConfig::default().solver_params()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Norm of the last increment that was computed.
    pub last_step: f64,
}

/// One damped IRLS Gauss-Newton increment for the given linearisation.
pub fn gauss_newton_step(lin: &Linearization, loss: &dyn RobustLoss, lambda: f64) -> MotionParams {
    let mut h = Matrix6::<f64>::zeros();
    let mut g = Vector6::<f64>::zeros();
    for (row, &r) in lin.jacobian.iter().zip(&lin.residuals) {
        let j = Vector6::from_row_slice(row);
        let w = loss.weight(r);
        h += j * j.transpose() * w;
        g += j * (w * r);
    }
    let scale = h.diagonal().max().max(1e-12);
    for i in 0..6 {
        h[(i, i)] += lambda * h[(i, i)] + 1e-9 * scale;
    }
    let step = match h.cholesky() {
        Some(ch) => ch.solve(&(-g)),
        None => h.lu().solve(&(-g)).unwrap_or_else(Vector6::zeros),
    };
    MotionParams::from_slice(step.as_slice())
}

/// Iteratively reweighted, Levenberg-damped Gauss-Newton over the pose `T`
/// that maps the points' frame to the current camera as `T⁻¹ · p`.
pub fn solve_pose(
    initial: &PoseSE3,
    points: &[Vector3<f64>],
    choices: &[FieldChoice],
    fields: &RegistrationFields,
    k: &CameraIntrinsics,
    params: &SolverParams,
    loss: &dyn RobustLoss,
) -> Result<(PoseSE3, SolveReport), TrackError> {
    if points.len() < params.min_points {
        return Err(TrackError::TooFewPoints {
            found: points.len(),
            required: params.min_points,
        });
    }
    let mut t_rel = *initial;
    let mut cost = robust_cost(points, choices, &t_rel, fields, k, loss);
    let mut report = SolveReport {
        initial_cost: cost,
        final_cost: cost,
        ..Default::default()
    };
    let mut lambda = params.lm_initial_lambda;
    let mut accepted_any = false;
    'outer: for _ in 0..params.max_iterations {
        let lin = residuals_and_jacobian(points, choices, &t_rel, fields, k)?;
        if lin.indices.len() < params.min_points {
            return Err(TrackError::TooFewPoints {
                found: lin.indices.len(),
                required: params.min_points,
            });
        }
        report.iterations += 1;
        let mut retries = 0;
        loop {
            let delta = gauss_newton_step(&lin, loss, lambda);
            report.last_step = delta.norm();
            if report.last_step < params.step_tolerance {
                report.converged = true;
                break 'outer;
            }
            let candidate = se3_exp(&delta).compose(&t_rel);
            let new_cost = robust_cost(points, choices, &candidate, fields, k, loss);
            if new_cost <= cost {
                t_rel = candidate;
                cost = new_cost;
                accepted_any = true;
                lambda = (lambda * 0.1).max(1e-8);
                break;
            }
            retries += 1;
            if retries > params.lm_max_retries {
                if accepted_any {
                    break 'outer;
                }
                return Err(TrackError::NonDecreasingCost);
            }
            lambda *= 10.0;
        }
    }
    report.final_cost = cost;
    Ok((t_rel, report))
}

/// Reference snapshot. Points and gradients are stored in world coordinates
/// so the pose is always solved in the same fixed frame; `pose` is the
/// keyframe camera and only drives keyframe decisions.
#[derive(Debug, Clone)]
pub struct Reference {
    /// world ← keyframe camera
    pub pose: PoseSE3,
    pub points: Arc<Vec<SemiDensePoint>>,
    pub timestamp: f64,
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    /// world ← current camera
    pub pose_world_from_cam: PoseSE3,
    /// Body-frame linear velocity (m/s).
    pub linear_velocity: Vector3<f64>,
    /// Body-frame angular velocity (rad/s).
    pub angular_velocity: Vector3<f64>,
    pub last_update_time: f64,
    pub reference: Reference,
}

/// Constant-velocity extrapolation `T_last · exp(dt·[v; ω])`.
pub fn predict_pose(state: &TrackerState, t: f64) -> PoseSE3 {
    let dt = t - state.last_update_time;
    let step = se3_twist_exp(&(state.linear_velocity * dt), &(state.angular_velocity * dt));
    state.pose_world_from_cam.compose(&step)
}

/// Recent `(time, world ← camera)` estimates for interpolation.
#[derive(Debug, Clone, Default)]
pub struct PoseHistory {
    samples: VecDeque<(f64, PoseSE3)>,
    capacity: usize,
}

impl PoseHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            samples: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, t: f64, pose: PoseSE3) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back((t, pose));
    }

    /// Geodesic interpolation between bracketing samples, clamped at the ends.
    pub fn pose_at(&self, t: f64) -> Option<PoseSE3> {
        let first = self.samples.front()?;
        if t <= first.0 {
            return Some(first.1);
        }
        let last = self.samples.back()?;
        if t >= last.0 {
            return Some(last.1);
        }
        let i = self.samples.partition_point(|s| s.0 <= t);
        let (t0, p0) = self.samples[i - 1];
        let (t1, p1) = self.samples[i];
        let s = (t - t0) / (t1 - t0);
        let rel = se3_log(&p0.inverse().compose(&p1));
        Some(p0.compose(&se3_exp(&rel.scaled(s))))
    }
}

/// What a reference source sees when asked for a new keyframe.
pub struct ReferenceRequest<'a> {
    pub time: f64,
    pub pose_world_from_cam: PoseSE3,
    pub tsm: &'a TimeSurfaceMap,
    pub intrinsics: &'a CameraIntrinsics,
    pub delta: f64,
    pub history: &'a PoseHistory,
}

/// Supplies reference point sets: from a prior global map or from depth.
pub trait ReferenceSource: Send {
    fn name(&self) -> &str;
    fn build(&mut self, request: &ReferenceRequest<'_>) -> Result<Reference, TrackError>;
    /// Whether the source produces new point sets on keyframe switches.
    fn refreshes(&self) -> bool {
        true
    }
}

/// Tracks against a fixed world-frame map. Visibility is decided per frame.
#[derive(Debug, Clone)]
pub struct GlobalMapSource {
    map: Arc<GlobalMap>,
}

impl GlobalMapSource {
    pub fn new(map: Arc<GlobalMap>) -> Self {
        Self { map }
    }
}

impl ReferenceSource for GlobalMapSource {
    fn name(&self) -> &str {
        "evt"
    }

    fn build(&mut self, req: &ReferenceRequest<'_>) -> Result<Reference, TrackError> {
        if self.map.points.is_empty() {
            return Err(TrackError::AllPointsOutOfView);
        }
        Ok(Reference {
            pose: req.pose_world_from_cam,
            points: Arc::new(self.map.points.clone()),
            timestamp: req.time,
        })
    }

    fn refreshes(&self) -> bool {
        false
    }
}

/// Builds local maps from the current time surface and the latest depth frame.
#[derive(Debug, Clone)]
pub struct DepthMapSource {
    frames: Vec<DepthFrame>,
    params: DepthAssignParams,
}

impl DepthMapSource {
    pub fn new(mut frames: Vec<DepthFrame>, params: DepthAssignParams) -> Self {
        frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Self { frames, params }
    }
}

impl ReferenceSource for DepthMapSource {
    fn name(&self) -> &str {
        "devo"
    }

    fn build(&mut self, req: &ReferenceRequest<'_>) -> Result<Reference, TrackError> {
        let n = self.frames.partition_point(|f| f.timestamp <= req.time + 1e-9);
        let frame = match n {
            0 => self.frames.first(),
            n => self.frames.get(n - 1),
        }
        .ok_or(MapError::NoValidDepth)?;
        // Compensate the motion between the depth capture and now.
        let pose_at_depth = req
            .history
            .pose_at(frame.timestamp)
            .unwrap_or(req.pose_world_from_cam);
        let cam_from_depth_cam = req.pose_world_from_cam.inverse().compose(&pose_at_depth);
        let mut compensated = frame.clone();
        compensated.t_ed = cam_from_depth_cam.compose(&frame.t_ed);
        let local = build_local_map(
            req.tsm,
            req.delta,
            &compensated,
            req.intrinsics,
            &self.params,
            req.pose_world_from_cam,
        )?;
        if local.points.is_empty() {
            return Err(TrackError::AllPointsOutOfView);
        }
        let to_world = local.reference_pose;
        let points = local
            .points
            .into_iter()
            .map(|p| SemiDensePoint {
                position: to_world.transform_point(&p.position),
                gradient3d: p.gradient3d.map(|g| to_world.rotate(&g)),
                source_pixel: p.source_pixel,
            })
            .collect();
        Ok(Reference {
            pose: to_world,
            points: Arc::new(points),
            timestamp: local.timestamp,
        })
    }
}

#[derive(Debug)]
pub enum FrameStatus {
    Accepted,
    Rejected(TrackError),
}

#[derive(Debug)]
pub struct FrameReport {
    pub time: f64,
    pub status: FrameStatus,
    pub events: usize,
    pub points_in_view: usize,
    pub kept: usize,
    pub culled: usize,
    pub polarity_counts: [usize; 3],
    pub solve: SolveReport,
    /// Mean robust cost per registered point after the solve.
    pub mean_cost: f64,
    pub keyframe_switched: bool,
    pub pose: PoseSE3,
}

impl FrameReport {
    pub fn accepted(&self) -> bool {
        matches!(self.status, FrameStatus::Accepted)
    }
}

/// Everything the per-frame pipeline derives from the event history.
struct FrameInputs {
    tsm: TimeSurfaceMap,
    fields: RegistrationFields,
}

pub struct Tracker {
    config: TrackerConfig,
    intrinsics: CameraIntrinsics,
    loss: Arc<dyn RobustLoss>,
    field_policy: Arc<dyn FieldPolicy>,
    occlusion: Arc<dyn OcclusionFilter>,
    source: Box<dyn ReferenceSource>,
    surfaces: SurfaceSetBuilder,
    state: TrackerState,
    history: PoseHistory,
    keyframes: usize,
}

impl std::fmt::Debug for Tracker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tracker")
            .field("source", &self.source.name())
            .field("loss", &self.loss.name())
            .field("field_policy", &self.field_policy.name())
            .field("occlusion", &self.occlusion.name())
            .field("keyframes", &self.keyframes)
            .finish()
    }
}

impl Tracker {
    /// Initialises at `start_time` with a known pose, feeding the events up to
    /// that time and building the first reference.
    pub fn start(
        config: TrackerConfig,
        intrinsics: CameraIntrinsics,
        mut source: Box<dyn ReferenceSource>,
        registry: &StrategyRegistry,
        initial_pose: PoseSE3,
        start_time: f64,
        warmup_events: &[Event],
    ) -> Result<Self, TrackError> {
        config.validate()?;
        intrinsics.validate()?;
        let loss = registry.loss(&config.robust_loss, config.huber_scale)?;
        let field_policy = registry.field_policy(config.field_policy_name())?;
        let occlusion = registry.occlusion_filter(config.occlusion_filter_name())?;
        Self::initial_reference(&config, &intrinsics, source.as_mut(), initial_pose, start_time, warmup_events)
            .map(|(surfaces, history, reference)| Self {
                state: TrackerState {
                    pose_world_from_cam: initial_pose,
                    linear_velocity: Vector3::zeros(),
                    angular_velocity: Vector3::zeros(),
                    last_update_time: start_time,
                    reference,
                },
                config,
                intrinsics,
                loss,
                field_policy,
                occlusion,
                source,
                surfaces,
                history,
                keyframes: 1,
            })
    }

    fn initial_reference(
        config: &TrackerConfig,
        intrinsics: &CameraIntrinsics,
        source: &mut dyn ReferenceSource,
        initial_pose: PoseSE3,
        start_time: f64,
        warmup_events: &[Event],
    ) -> Result<(SurfaceSetBuilder, PoseHistory, Reference), TrackError> {
        let mut surfaces = SurfaceSetBuilder::new(intrinsics.width, intrinsics.height);
        surfaces.extend(warmup_events)?;
        let tsm = surfaces.combined.snapshot(start_time, config.tau)?;
        let mut history = PoseHistory::new(64);
        history.push(start_time, initial_pose);
        let reference = source.build(&ReferenceRequest {
            time: start_time,
            pose_world_from_cam: initial_pose,
            tsm: &tsm,
            intrinsics,
            delta: config.local_map_delta,
            history: &history,
        })?;
        Ok((surfaces, history, reference))
    }

    /// Replaces the strategy objects resolved from the configuration.
    pub fn set_strategies(
        &mut self,
        loss: Arc<dyn RobustLoss>,
        field_policy: Arc<dyn FieldPolicy>,
        occlusion: Arc<dyn OcclusionFilter>,
    ) {
        self.loss = loss;
        self.field_policy = field_policy;
        self.occlusion = occlusion;
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn keyframes(&self) -> usize {
        self.keyframes
    }

    /// Override the motion model, e.g. to seed velocities.
    pub fn set_velocity(&mut self, linear: Vector3<f64>, angular: Vector3<f64>) {
        self.state.linear_velocity = linear;
        self.state.angular_velocity = angular;
    }

    /// Overrides the current pose estimate, e.g. after relocalisation.
    pub fn set_pose(&mut self, pose: PoseSE3, t: f64) {
        self.state.pose_world_from_cam = pose;
        self.state.last_update_time = t;
        self.history.push(t, pose);
    }

    fn frame_inputs(&self, t_cur: f64) -> Result<FrameInputs, TrackError> {
        let (tsm, signed) = self.surfaces.snapshot(t_cur, self.config.tau)?;
        let make = |s: &TimeSurfaceMap| {
            if self.config.threshold_potential {
                PotentialField::from_thresholded(s, self.config.delta)
            } else {
                negate(s)
            }
        };
        let fields = if self.field_policy.uses_polarity() {
            RegistrationFields {
                combined: make(&tsm),
                positive: Some(make(&signed.positive)),
                negative: Some(make(&signed.negative)),
            }
        } else {
            RegistrationFields::combined_only(make(&tsm))
        };
        Ok(FrameInputs { tsm, fields })
    }

    /// Processes the events since the previous frame and estimates the pose
    /// at `t_cur`. Rejected frames keep the motion-model prediction; only
    /// malformed input is returned as an error.
    pub fn track_frame(&mut self, events: &[Event], t_cur: f64) -> Result<FrameReport, TrackError> {
        self.surfaces.extend(events)?;
        let predicted = predict_pose(&self.state, t_cur);
        let mut report = FrameReport {
            time: t_cur,
            status: FrameStatus::Accepted,
            events: events.len(),
            points_in_view: 0,
            kept: 0,
            culled: 0,
            polarity_counts: [0; 3],
            solve: SolveReport::default(),
            mean_cost: 0.0,
            keyframe_switched: false,
            pose: predicted,
        };
        let inputs = self.frame_inputs(t_cur)?;
        match self.register(&inputs, &predicted, &mut report) {
            Ok(pose) => {
                self.accept(pose, t_cur);
                report.pose = pose;
                if self.source.refreshes() && self.needs_keyframe(&pose) {
                    report.keyframe_switched = self.switch_reference(&inputs.tsm, t_cur);
                }
            }
            Err(e) => {
                self.state.pose_world_from_cam = predicted;
                self.state.last_update_time = t_cur;
                self.history.push(t_cur, predicted);
                report.status = FrameStatus::Rejected(e);
            }
        }
        Ok(report)
    }

    fn register(
        &self,
        inputs: &FrameInputs,
        predicted: &PoseSE3,
        report: &mut FrameReport,
    ) -> Result<PoseSE3, TrackError> {
        if report.events == 0 {
            return Err(TrackError::EmptyMask);
        }
        let k = &self.intrinsics;
        let reference = &self.state.reference;
        let inv = predicted.inverse();

        let mut reprojections = Vec::new();
        let mut cam_points = Vec::new();
        for (i, p) in reference.points.iter().enumerate() {
            if let Some((p_cur, uv)) = reproject(&p.position, &inv, k) {
                reprojections.push(Reprojection {
                    index: i,
                    uv,
                    depth: p_cur.z,
                });
                cam_points.push(p_cur);
            }
        }
        report.points_in_view = reprojections.len();
        if reprojections.is_empty() {
            return Err(TrackError::AllPointsOutOfView);
        }

        let annf = if self.occlusion.needs_annf() {
            let mask = inputs.tsm.edge_mask(self.config.delta);
            Some(build_annf(&mask, k.width, k.height)?)
        } else {
            None
        };
        let kept = self.occlusion.filter(&reprojections, annf.as_ref());
        report.kept = kept.len();
        report.culled = reprojections.len() - kept.len();

        let uses_polarity = self.field_policy.uses_polarity();
        let frame_period = 1.0 / self.config.tsm_rate;
        let mut points = Vec::with_capacity(kept.len());
        let mut choices = Vec::with_capacity(kept.len());
        let mut j = 0;
        for &idx in &kept {
            while reprojections[j].index != idx {
                j += 1;
            }
            let p = &reference.points[idx];
            let class = match (uses_polarity, p.gradient3d) {
                (true, Some(g_ref)) => {
                    let p_cur = cam_points[j];
                    let flow = predict_optical_flow(
                        &p_cur,
                        &self.state.linear_velocity,
                        &self.state.angular_velocity,
                        k,
                    )?;
                    if flow.norm() * frame_period < self.config.min_flow_px {
                        PolarityClass::Neutral
                    } else {
                        let g_cur = inv.rotate(&g_ref);
                        predict_polarity(&g_cur, &p_cur, &flow, k, self.config.buffer_half_angle)
                    }
                }
                _ => PolarityClass::Neutral,
            };
            report.polarity_counts[match class {
                PolarityClass::Positive => 0,
                PolarityClass::Negative => 1,
                PolarityClass::Neutral => 2,
            }] += 1;
            points.push(p.position);
            choices.push(self.field_policy.select(class));
        }

        let (pose, solve) = solve_pose(
            predicted,
            &points,
            &choices,
            &inputs.fields,
            k,
            &self.config.solver_params(),
            self.loss.as_ref(),
        )?;
        report.solve = solve;
        report.mean_cost = solve.final_cost / points.len() as f64;
        if report.mean_cost > self.config.max_mean_cost {
            return Err(TrackError::PoorAlignment {
                mean_cost: report.mean_cost,
                limit: self.config.max_mean_cost,
            });
        }
        Ok(pose)
    }

    fn accept(&mut self, pose: PoseSE3, t_cur: f64) {
        let dt = t_cur - self.state.last_update_time;
        if dt > 0.0 {
            let (v, w) = se3_twist_log(&self.state.pose_world_from_cam.inverse().compose(&pose));
            let a = self.config.velocity_smoothing;
            self.state.linear_velocity = v / dt * a + self.state.linear_velocity * (1.0 - a);
            self.state.angular_velocity = w / dt * a + self.state.angular_velocity * (1.0 - a);
        }
        self.state.pose_world_from_cam = pose;
        self.state.last_update_time = t_cur;
        self.history.push(t_cur, pose);
    }

    fn needs_keyframe(&self, pose: &PoseSE3) -> bool {
        let t_rel = self.state.reference.pose.inverse().compose(pose);
        t_rel.translation.norm() > self.config.keyframe_baseline
    }

    fn switch_reference(&mut self, tsm: &TimeSurfaceMap, t_cur: f64) -> bool {
        let request = ReferenceRequest {
            time: t_cur,
            pose_world_from_cam: self.state.pose_world_from_cam,
            tsm,
            intrinsics: &self.intrinsics,
            delta: self.config.local_map_delta,
            history: &self.history,
        };
        match self.source.build(&request) {
            Ok(reference) if reference.points.len() >= self.config.min_points => {
                self.state.reference = reference;
                self.keyframes += 1;
                true
            }
            _ => false,
        }
    }
}

/// Output of [`run_tracking`].
#[derive(Debug)]
pub struct TrackingRun {
    /// `(time, world ← camera)` including the initial pose.
    pub trajectory: Vec<(f64, PoseSE3)>,
    pub reports: Vec<FrameReport>,
    pub keyframes: usize,
}

impl TrackingRun {
    pub fn rejected(&self) -> usize {
        self.reports.iter().filter(|r| !r.accepted()).count()
    }

    pub fn rejected_fraction(&self) -> f64 {
        if self.reports.is_empty() {
            return 0.0;
        }
        self.rejected() as f64 / self.reports.len() as f64
    }
}

/// Runs frames at `start + k / rate` up to `end` over a time-sorted event stream.
pub fn run_tracking(
    tracker: &mut Tracker,
    events: &[Event],
    start: f64,
    end: f64,
) -> Result<TrackingRun, TrackError> {
    let rate = tracker.config.tsm_rate;
    let mut trajectory = vec![(start, tracker.state.pose_world_from_cam)];
    let mut reports = Vec::new();
    let mut cursor = events.partition_point(|e| e.t <= start);
    let mut k = 1u64;
    loop {
        let t = start + k as f64 / rate;
        if t > end + 1e-12 {
            break;
        }
        let next = cursor + events[cursor..].partition_point(|e| e.t <= t);
        let report = tracker.track_frame(&events[cursor..next], t)?;
        trajectory.push((t, report.pose));
        reports.push(report);
        cursor = next;
        k += 1;
    }
    Ok(TrackingRun {
        trajectory,
        reports,
        keyframes: tracker.keyframes,
    })
}
