//! Synthetic wireframe scenes, smooth trajectories, and the event streams
//! and depth frames they produce.
//!
//! At every time sample each edge is sampled densely enough to cover its
//! image trace without gaps, and every visible sample emits an event at its
//! projected pixel (plus optional jitter). The polarity is the sign of the
//! projected appearance gradient against the true image motion, and samples
//! whose gradient is within 5° of perpendicular to the motion stay silent.
//! Image motion is measured by differencing projections along the analytic
//! trajectory.

use std::f64::consts::{PI, TAU};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_rep::{Event, Polarity};
use crate::geometry::{so3_exp, so3_right_jacobian, CameraIntrinsics, GeometryError, PoseSE3};
use crate::cli_io::{save_events, save_trajectory, CliError, InputPaths, Trajectory};
use crate::mapping::{save_map, write_depth_frame, DepthFrame, GlobalMap, SemiDensePoint};

/// Emission is suppressed within this angle of 90° between gradient and flow.
const SILENT_BAND: f64 = 5.0 * PI / 180.0;
/// Step for differencing projections along the trajectory (s).
const FLOW_STEP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no scene point is visible from the initial pose")]
    SceneNotVisible,
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A straight edge with the in-surface direction in which the image gets brighter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub gradient: Vector3<f64>,
    /// Map points per metre.
    pub density: f64,
}

impl Segment {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    /// `n` points at the centres of `n` equal sub-intervals.
    fn sample(&self, density: f64) -> impl Iterator<Item = Vector3<f64>> + '_ {
        let n = (self.length() * density).ceil().max(1.0) as usize;
        (0..n).map(move |i| self.start + (self.end - self.start) * ((i as f64 + 0.5) / n as f64))
    }
}

/// Planar rectangle used for depth rendering and visibility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad {
    pub origin: Vector3<f64>,
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
    pub u_range: (f64, f64),
    pub v_range: (f64, f64),
}

impl Quad {
    pub fn point(&self, u: f64, v: f64) -> Vector3<f64> {
        self.origin + self.u_axis * u + self.v_axis * v
    }

    /// Ray parameter `s` of the hit of `origin + s·dir`, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.u_axis.cross(&self.v_axis);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = n.dot(&(self.origin - origin)) / denom;
        let local = origin + dir * s - self.origin;
        let (u, v) = (local.dot(&self.u_axis), local.dot(&self.v_axis));
        // Edge points sit exactly on the border; keep them on the surface despite round-off.
        const EPS: f64 = 1e-9;
        let inside = u >= self.u_range.0 - EPS
            && u <= self.u_range.1 + EPS
            && v >= self.v_range.0 - EPS
            && v <= self.v_range.1 + EPS;
        inside.then_some(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WireScene {
    pub segments: Vec<Segment>,
    pub surfaces: Vec<Quad>,
}

/// One event-emitting point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    pub position: Vector3<f64>,
    pub gradient: Vector3<f64>,
}

impl WireScene {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.length() > 1e-9) {
                return Err(SynthError::InvalidConfig(format!("segment {i} is degenerate")));
            }
            if (s.gradient.norm() - 1.0).abs() > 1e-9 {
                return Err(SynthError::InvalidConfig(format!("segment {i} gradient is not unit")));
            }
            if !(s.density > 0.0) {
                return Err(SynthError::InvalidConfig(format!("segment {i} density must be positive")));
            }
        }
        Ok(())
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    /// Points at `scale` times each segment's density.
    pub fn points(&self, scale: f64) -> Vec<ScenePoint> {
        self.sample(scale)
    }

    pub fn map(&self) -> GlobalMap {
        GlobalMap::new(
            self.sample(1.0)
                .into_iter()
                .map(|p| SemiDensePoint::with_gradient(p.position, p.gradient))
                .collect(),
        )
    }

    fn sample(&self, scale: f64) -> Vec<ScenePoint> {
        self.segments
            .iter()
            .flat_map(|s| {
                s.sample(s.density * scale).map(move |position| ScenePoint {
                    position,
                    gradient: s.gradient,
                })
            })
            .collect()
    }

    /// Whether a surface blocks the line of sight from `eye` to `p`.
    pub fn occluded(&self, eye: &Vector3<f64>, p: &Vector3<f64>) -> bool {
        let dir = p - eye;
        self.surfaces
            .iter()
            .filter_map(|q| q.intersect(eye, &dir))
            .any(|s| s > 1e-6 && s < 1.0 - 1e-3)
    }

    /// Distance along the ray `eye + s·dir` to the first surface.
    pub fn first_hit(&self, eye: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        self.surfaces
            .iter()
            .filter_map(|q| q.intersect(eye, dir))
            .filter(|&s| s > 1e-9)
            .min_by(f64::total_cmp)
    }
}

fn back_wall() -> Quad {
    Quad {
        origin: Vector3::new(0.0, 0.0, 5.0),
        u_axis: Vector3::x(),
        v_axis: Vector3::y(),
        u_range: (-4.0, 4.0),
        v_range: (-3.0, 1.0),
    }
}

fn left_wall() -> Quad {
    Quad {
        origin: Vector3::new(-1.2, 0.0, 0.0),
        u_axis: Vector3::z(),
        v_axis: Vector3::y(),
        u_range: (0.0, 5.0),
        v_range: (-3.0, 1.0),
    }
}

fn floor() -> Quad {
    Quad {
        origin: Vector3::new(0.0, 1.0, 0.0),
        u_axis: Vector3::x(),
        v_axis: Vector3::z(),
        u_range: (-1.2, 4.0),
        v_range: (0.0, 5.0),
    }
}

/// Rectangle outline on `plane`; gradients point inwards for a bright poster.
fn poster(plane: &Quad, centre: (f64, f64), half: (f64, f64), bright: bool, density: f64) -> [Segment; 4] {
    let s = if bright { 1.0 } else { -1.0 };
    let (cu, cv) = centre;
    let (hu, hv) = half;
    let p = |u, v| plane.point(u, v);
    let (a, b) = (plane.u_axis, plane.v_axis);
    [
        Segment { start: p(cu - hu, cv - hv), end: p(cu + hu, cv - hv), gradient: b * s, density },
        Segment { start: p(cu - hu, cv + hv), end: p(cu + hu, cv + hv), gradient: -b * s, density },
        Segment { start: p(cu - hu, cv - hv), end: p(cu - hu, cv + hv), gradient: a * s, density },
        Segment { start: p(cu + hu, cv - hv), end: p(cu + hu, cv + hv), gradient: -a * s, density },
    ]
}

/// Two parallel lines `width` apart bounding a thin stripe, along `v` if
/// `vertical`, otherwise along `u`.
fn stripe(
    plane: &Quad,
    centre: (f64, f64),
    length: f64,
    width: f64,
    vertical: bool,
    bright: bool,
    density: f64,
) -> [Segment; 2] {
    let s = if bright { 1.0 } else { -1.0 };
    let (cu, cv) = centre;
    let (h, w) = (length / 2.0, width / 2.0);
    let p = |u, v| plane.point(u, v);
    let (a, b) = (plane.u_axis, plane.v_axis);
    if vertical {
        [
            Segment { start: p(cu - w, cv - h), end: p(cu - w, cv + h), gradient: a * s, density },
            Segment { start: p(cu + w, cv - h), end: p(cu + w, cv + h), gradient: -a * s, density },
        ]
    } else {
        [
            Segment { start: p(cu - h, cv - w), end: p(cu + h, cv - w), gradient: b * s, density },
            Segment { start: p(cu - h, cv + w), end: p(cu + h, cv + w), gradient: -b * s, density },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenePreset {
    /// Posters on the walls and floor of a room corner plus two free-standing
    /// panels, spanning 2 to 5 m depth.
    Room,
    /// The room with a textured board hanging 2.5 m in front of the camera.
    Occluder,
    /// Thin bright and dark stripes whose two borders have opposite polarity.
    Stripes,
}

impl ScenePreset {
    pub const NAMES: [&'static str; 3] = ["room", "occluder", "stripes"];

    pub fn from_name(name: &str) -> Result<Self, SynthError> {
        match name {
            "room" => Ok(Self::Room),
            "occluder" => Ok(Self::Occluder),
            "stripes" => Ok(Self::Stripes),
            other => Err(SynthError::InvalidConfig(format!(
                "unknown scene `{other}` (available: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn build(self, seed: u64, density: f64) -> WireScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (back, left, floor) = (back_wall(), left_wall(), floor());
        let mut scene = WireScene {
            segments: Vec::new(),
            surfaces: vec![back, left, floor],
        };
        let mut jitter = |c: (f64, f64), r: f64| (c.0 + rng.random_range(-r..r), c.1 + rng.random_range(-r..r));
        match self {
            ScenePreset::Room | ScenePreset::Occluder => {
                let layout: [(&Quad, (f64, f64)); 8] = [
                    (&back, (-1.7, -1.0)),
                    (&back, (-0.3, -1.4)),
                    (&back, (1.2, -1.0)),
                    (&back, (-1.0, 0.2)),
                    (&back, (0.9, 0.3)),
                    (&left, (2.8, -0.5)),
                    (&left, (3.8, 0.1)),
                    (&floor, (0.2, 3.4)),
                ];
                for (plane, centre) in layout {
                    let c = jitter(centre, 0.1);
                    let half = jitter((0.28, 0.24), 0.06);
                    let bright = jitter((0.0, 0.0), 1.0).0 > 0.0;
                    scene.segments.extend(poster(plane, c, half, bright, density));
                }
                // Free-standing panels nearer the camera.
                for (centre, half) in [((0.6, -0.1, 2.0), (0.22, 0.18)), ((-0.5, -0.6, 2.6), (0.22, 0.18))] {
                    let panel = Quad {
                        origin: Vector3::new(centre.0, centre.1, centre.2),
                        u_axis: Vector3::x(),
                        v_axis: Vector3::y(),
                        u_range: (-half.0, half.0),
                        v_range: (-half.1, half.1),
                    };
                    let bright = jitter((0.0, 0.0), 1.0).0 > 0.0;
                    scene.segments.extend(poster(&panel, (0.0, 0.0), half, bright, density));
                    scene.surfaces.push(panel);
                }
                if self == ScenePreset::Occluder {
                    scene.segments.extend(poster(&back, (0.0, -0.3), (0.45, 0.35), true, density));
                    let board = Quad {
                        origin: Vector3::new(0.0, 0.0, 2.5),
                        u_axis: Vector3::x(),
                        v_axis: Vector3::y(),
                        u_range: (-0.5, 0.5),
                        v_range: (-0.7, 0.1),
                    };
                    let dense = density * 3.0;
                    scene.segments.extend(poster(&board, (0.0, -0.3), (0.5, 0.4), false, dense));
                    for (i, u) in [-0.3, -0.1, 0.1, 0.3].into_iter().enumerate() {
                        scene
                            .segments
                            .extend(stripe(&board, (u, -0.3), 0.7, 0.04, true, i % 2 == 0, dense));
                    }
                    for v in [-0.5, -0.1] {
                        scene.segments.extend(stripe(&board, (0.0, v), 0.9, 0.04, false, true, dense));
                    }
                    scene.surfaces.push(board);
                }
            }
            ScenePreset::Stripes => {
                let width = 0.08;
                for (i, u) in [-1.8, -1.0, -0.2, 0.6, 1.4].into_iter().enumerate() {
                    let c = jitter((u, -0.5), 0.1);
                    scene
                        .segments
                        .extend(stripe(&back, c, 1.4, width, true, i % 2 == 0, density));
                }
                for (i, v) in [-1.5, -0.4, 0.5].into_iter().enumerate() {
                    let c = jitter((0.0, v), 0.1);
                    scene
                        .segments
                        .extend(stripe(&back, c, 2.8, width, false, i % 2 == 1, density));
                }
                for (i, u) in [2.8, 3.9].into_iter().enumerate() {
                    let c = jitter((u, -0.4), 0.1);
                    scene
                        .segments
                        .extend(stripe(&left, c, 1.0, width * 0.7, true, i == 0, density));
                }
                for (i, v) in [3.0, 4.1].into_iter().enumerate() {
                    let c = jitter((0.4, v), 0.1);
                    scene
                        .segments
                        .extend(stripe(&floor, c, 1.6, width * 0.7, false, i == 1, density));
                }
            }
        }
        scene
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    /// Hz
    pub frequency: f64,
    /// rad
    pub phase: f64,
}

impl Sinusoid {
    pub fn new(amplitude: f64, frequency: f64, phase: f64) -> Self {
        Self { amplitude, frequency, phase }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.amplitude * (TAU * self.frequency * t + self.phase).sin()
    }

    pub fn rate(&self, t: f64) -> f64 {
        self.amplitude * TAU * self.frequency * (TAU * self.frequency * t + self.phase).cos()
    }
}

/// World ← camera pose `R_base·Exp(φ(t))`, `t_base + x(t)` with each
/// component of `x` and `φ` a sinusoid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub duration: f64,
    pub base: PoseSE3,
    pub translation: [Sinusoid; 3],
    pub rotation: [Sinusoid; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryPreset {
    Default,
    HighDynamics,
    Static,
}

impl TrajectoryPreset {
    pub const NAMES: [&'static str; 3] = ["default", "high_dynamics", "static"];

    pub fn from_name(name: &str) -> Result<Self, SynthError> {
        match name {
            "default" => Ok(Self::Default),
            "high_dynamics" => Ok(Self::HighDynamics),
            "static" => Ok(Self::Static),
            other => Err(SynthError::InvalidConfig(format!(
                "unknown trajectory `{other}` (available: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

impl TrajectorySpec {
    pub fn preset(preset: TrajectoryPreset, duration: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6a65);
        let mut phase = || rng.random_range(0.0..TAU);
        let deg = PI / 180.0;
        let (translation, rotation) = match preset {
            TrajectoryPreset::Default => (
                [
                    Sinusoid::new(0.4, 0.2, phase()),
                    Sinusoid::new(0.2, 0.3, phase()),
                    Sinusoid::new(0.3, 0.25, phase()),
                ],
                [
                    Sinusoid::new(8.0 * deg, 0.35, phase()),
                    Sinusoid::new(12.0 * deg, 0.2, phase()),
                    Sinusoid::new(6.0 * deg, 0.45, phase()),
                ],
            ),
            TrajectoryPreset::HighDynamics => (
                [
                    Sinusoid::new(0.3, 0.5, phase()),
                    Sinusoid::new(0.15, 0.7, phase()),
                    Sinusoid::new(0.2, 0.6, phase()),
                ],
                [
                    Sinusoid::new(10.0 * deg, 0.8, phase()),
                    Sinusoid::new(15.0 * deg, 0.6, phase()),
                    Sinusoid::new(8.0 * deg, 0.9, phase()),
                ],
            ),
            TrajectoryPreset::Static => Default::default(),
        };
        Self {
            duration,
            base: PoseSE3::identity(),
            translation,
            rotation,
            seed,
        }
    }

    fn phi(&self, t: f64) -> Vector3<f64> {
        Vector3::from_fn(|i, _| self.rotation[i].value(t))
    }

    /// World ← camera at time `t`.
    pub fn pose(&self, t: f64) -> PoseSE3 {
        let x = Vector3::from_fn(|i, _| self.translation[i].value(t));
        PoseSE3::new(
            self.base.rotation * so3_exp(&self.phi(t)),
            self.base.translation + x,
        )
    }

    /// Body-frame `(linear, angular)` velocity at `t`.
    pub fn velocity(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let pose = self.pose(t);
        let x_dot = Vector3::from_fn(|i, _| self.translation[i].rate(t));
        let phi_dot = Vector3::from_fn(|i, _| self.rotation[i].rate(t));
        (
            pose.rotation.transpose() * x_dot,
            so3_right_jacobian(&self.phi(t)) * phi_dot,
        )
    }

    /// Sum of translation increments at 1 ms resolution.
    pub fn path_length(&self) -> f64 {
        let n = (self.duration * 1000.0).ceil() as usize;
        (1..=n)
            .map(|i| {
                let (a, b) = ((i - 1) as f64 / 1000.0, (i as f64 / 1000.0).min(self.duration));
                (self.pose(b).translation - self.pose(a).translation).norm()
            })
            .sum()
    }

    pub fn sample(&self, rate: f64) -> Vec<(f64, PoseSE3)> {
        let n = (self.duration * rate).floor() as usize;
        (0..=n).map(|i| i as f64 / rate).map(|t| (t, self.pose(t))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    /// Standard deviation of the per-event pixel offset.
    pub jitter_sigma: f64,
    /// Spurious events as a fraction of true events.
    pub spurious_fraction: f64,
}

/// Why a visible point did or did not emit at one time sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Emission {
    Fire { uv: Vector2<f64>, polarity: Polarity },
    /// Zero image motion or gradient within the silent band.
    Silent,
    /// Behind the camera, off the sensor, or occluded.
    Hidden,
}

/// Oracle emission rule for one point at time `t`.
pub fn emission(
    scene: &WireScene,
    trajectory: &TrajectorySpec,
    k: &CameraIntrinsics,
    point: &ScenePoint,
    t: f64,
) -> Emission {
    let pose = trajectory.pose(t);
    let to_cam = pose.inverse();
    let p = to_cam.transform_point(&point.position);
    if p.z < 0.05 {
        return Emission::Hidden;
    }
    let Ok(uv) = k.project(&p) else {
        return Emission::Hidden;
    };
    if !k.contains(&uv) || scene.occluded(&pose.translation, &point.position) {
        return Emission::Hidden;
    }
    let project_at = |s: f64| {
        let q = trajectory.pose(s).inverse().transform_point(&point.position);
        Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy)
    };
    let flow = (project_at(t + FLOW_STEP) - project_at(t - FLOW_STEP)) / (2.0 * FLOW_STEP);
    let g = k.projection_jacobian(&p) * to_cam.rotate(&point.gradient);
    let (fnorm, gnorm) = (flow.norm(), g.norm());
    if !(fnorm > 1e-6 && gnorm > 0.0) {
        return Emission::Silent;
    }
    let alpha = (g.dot(&flow) / (fnorm * gnorm)).clamp(-1.0, 1.0).acos();
    if (alpha - PI / 2.0).abs() < SILENT_BAND {
        return Emission::Silent;
    }
    Emission::Fire {
        uv,
        polarity: Polarity::from_sign(g.dot(&flow)),
    }
}

/// Points along `segment` no more than about `step_px` apart in the image of
/// a camera at `pose`, restricted to the part in front of the camera.
pub fn image_samples(segment: &Segment, pose: &PoseSE3, k: &CameraIntrinsics, step_px: f64) -> Vec<ScenePoint> {
    const NEAR: f64 = 0.05;
    let to_cam = pose.inverse();
    let (a, b) = (to_cam.transform_point(&segment.start), to_cam.transform_point(&segment.end));
    if a.z < NEAR && b.z < NEAR {
        return Vec::new();
    }
    let cut = (NEAR - a.z) / (b.z - a.z);
    let (s0, s1) = (if a.z < NEAR { cut } else { 0.0 }, if b.z < NEAR { cut } else { 1.0 });
    let (pa, pb) = (a + (b - a) * s0, a + (b - a) * s1);
    let len = Vector2::new(k.fx * (pa.x / pa.z - pb.x / pb.z), k.fy * (pa.y / pa.z - pb.y / pb.z)).norm();
    let stretch = pa.z.max(pb.z) / pa.z.min(pb.z);
    let n = (len * stretch / step_px).ceil() as usize + 1;
    (0..n)
        .map(|i| {
            let s = s0 + (s1 - s0) * (i as f64 + 0.5) / n as f64;
            ScenePoint {
                position: segment.start + (segment.end - segment.start) * s,
                gradient: segment.gradient,
            }
        })
        .collect()
}

/// Image-space spacing of the edge samples that emit events.
pub const SAMPLE_STEP_PX: f64 = 0.5;

/// Events from every scene edge at `rate` Hz plus spurious noise, sorted by
/// time, and ground truth sampled at the same rate. Within one time sample
/// an edge fires at most once per pixel.
pub fn generate_events(
    scene: &WireScene,
    trajectory: &TrajectorySpec,
    k: &CameraIntrinsics,
    rate: f64,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<(Vec<Event>, Vec<(f64, PoseSE3)>), SynthError> {
    scene.validate()?;
    k.validate()?;
    if !(rate > 0.0 && trajectory.duration > 0.0) {
        return Err(SynthError::InvalidConfig("rate and duration must be positive".into()));
    }
    if !(noise.jitter_sigma >= 0.0 && noise.spurious_fraction >= 0.0) {
        return Err(SynthError::InvalidConfig("noise parameters must be non-negative".into()));
    }
    let start = trajectory.pose(0.0);
    let visible_at_start = scene.segments.iter().any(|seg| {
        image_samples(seg, &start, k, SAMPLE_STEP_PX)
            .iter()
            .any(|p| !matches!(emission(scene, trajectory, k, p, 0.0), Emission::Hidden))
    });
    if !visible_at_start {
        return Err(SynthError::SceneNotVisible);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.jitter_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let groundtruth = trajectory.sample(rate);
    let mut events = Vec::new();
    let mut fired: Vec<(u32, u32, bool)> = Vec::new();
    for &(t, pose) in &groundtruth {
        for seg in &scene.segments {
            fired.clear();
            for p in image_samples(seg, &pose, k, SAMPLE_STEP_PX) {
                let Emission::Fire { uv, polarity } = emission(scene, trajectory, k, &p, t) else {
                    continue;
                };
                let uv = if noise.jitter_sigma > 0.0 {
                    uv + Vector2::new(jitter.sample(&mut rng), jitter.sample(&mut rng))
                } else {
                    uv
                };
                if let Some((x, y)) = k.pixel_of(&uv) {
                    fired.push((x as u32, y as u32, polarity == Polarity::Positive));
                }
            }
            fired.sort_unstable();
            fired.dedup();
            events.extend(fired.iter().map(|&(x, y, positive)| {
                let polarity = if positive { Polarity::Positive } else { Polarity::Negative };
                Event::new(x, y, t, polarity)
            }));
        }
    }
    let spurious = (events.len() as f64 * noise.spurious_fraction).round() as usize;
    for _ in 0..spurious {
        let x = rng.random_range(0..k.width as u32);
        let y = rng.random_range(0..k.height as u32);
        let t = rng.random_range(0.0..=trajectory.duration);
        let polarity = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
        events.push(Event::new(x, y, t, polarity));
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok((events, groundtruth))
}

/// Depth of the first surface seen through image location `uv`.
pub fn ray_depth(scene: &WireScene, pose: &PoseSE3, k: &CameraIntrinsics, uv: &Vector2<f64>) -> Option<f64> {
    let ray = Vector3::new((uv.x - k.cx) / k.fx, (uv.y - k.cy) / k.fy, 1.0);
    scene.first_hit(&pose.translation, &pose.rotate(&ray))
}

/// Nearest-surface depth per pixel for a camera at `pose` (world ← camera);
/// 0 where no surface is hit.
pub fn render_depth(scene: &WireScene, pose: &PoseSE3, k: &CameraIntrinsics) -> Vec<f32> {
    let mut depth = vec![0.0f32; k.width * k.height];
    for y in 0..k.height {
        for x in 0..k.width {
            if let Some(s) = ray_depth(scene, pose, k, &Vector2::new(x as f64, y as f64)) {
                depth[y * k.width + x] = s as f32;
            }
        }
    }
    depth
}

/// Everything needed to run, and score, a synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scene: String,
    pub trajectory: String,
    pub seed: u64,
    /// s
    pub duration: f64,
    /// Time samples per second at which every point may emit.
    pub event_rate: f64,
    pub jitter_sigma: f64,
    pub spurious_fraction: f64,
    /// Map points per metre of edge.
    pub map_density: f64,
    pub depth_rate: f64,
    pub event_camera: CameraIntrinsics,
    pub depth_camera: CameraIntrinsics,
    /// Position of the depth camera in the event camera frame (m).
    pub depth_offset: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: "room".into(),
            trajectory: "default".into(),
            seed: 7,
            duration: 10.0,
            event_rate: 1000.0,
            jitter_sigma: 0.3,
            spurious_fraction: 0.05,
            map_density: 20.0,
            depth_rate: 30.0,
            event_camera: CameraIntrinsics {
                fx: 200.0,
                fy: 200.0,
                cx: 119.5,
                cy: 89.5,
                width: 240,
                height: 180,
            },
            depth_camera: CameraIntrinsics {
                fx: 130.0,
                fy: 130.0,
                cx: 79.5,
                cy: 59.5,
                width: 160,
                height: 120,
            },
            depth_offset: [0.05, 0.0, 0.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        ScenePreset::from_name(&self.scene)?;
        TrajectoryPreset::from_name(&self.trajectory)?;
        let positive = [
            ("duration", self.duration),
            ("event_rate", self.event_rate),
            ("map_density", self.map_density),
            ("depth_rate", self.depth_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(SynthError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.jitter_sigma >= 0.0 && self.spurious_fraction >= 0.0) {
            return Err(SynthError::InvalidConfig(
                "jitter_sigma and spurious_fraction must be non-negative".into(),
            ));
        }
        self.event_camera
            .validate()
            .map_err(|e| SynthError::InvalidConfig(format!("event_camera: {e}")))?;
        self.depth_camera
            .validate()
            .map_err(|e| SynthError::InvalidConfig(format!("depth_camera: {e}")))?;
        Ok(())
    }

    pub fn scene(&self) -> Result<WireScene, SynthError> {
        Ok(ScenePreset::from_name(&self.scene)?.build(self.seed, self.map_density))
    }

    pub fn trajectory_spec(&self) -> Result<TrajectorySpec, SynthError> {
        let preset = TrajectoryPreset::from_name(&self.trajectory)?;
        Ok(TrajectorySpec::preset(preset, self.duration, self.seed))
    }

    /// event ← depth
    pub fn t_ed(&self) -> PoseSE3 {
        PoseSE3::from_translation(Vector3::from(self.depth_offset))
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            jitter_sigma: self.jitter_sigma,
            spurious_fraction: self.spurious_fraction,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub events: Vec<Event>,
    /// World ← event camera.
    pub groundtruth: Vec<(f64, PoseSE3)>,
    pub depth_frames: Vec<DepthFrame>,
    pub map: GlobalMap,
    pub scene: WireScene,
    pub trajectory: TrajectorySpec,
    pub config: SynthConfig,
}

pub fn generate_sequence(config: &SynthConfig) -> Result<SyntheticSequence, SynthError> {
    config.validate()?;
    let scene = config.scene()?;
    let trajectory = config.trajectory_spec()?;
    let k = config.event_camera;
    let (events, groundtruth) =
        generate_events(&scene, &trajectory, &k, config.event_rate, &config.noise(), config.seed)?;
    let t_ed = config.t_ed();
    let depth_frames = trajectory
        .sample(config.depth_rate)
        .into_iter()
        .map(|(t, pose)| DepthFrame {
            width: config.depth_camera.width,
            height: config.depth_camera.height,
            depth: render_depth(&scene, &pose.compose(&t_ed), &config.depth_camera),
            timestamp: t,
            intrinsics: config.depth_camera,
            t_ed,
        })
        .collect();
    Ok(SyntheticSequence {
        events,
        groundtruth,
        depth_frames,
        map: scene.map(),
        scene,
        trajectory,
        config: config.clone(),
    })
}

/// Writes events, depth frames (`NNNNNN.depth`), map and ground truth under
/// `dir` at the locations named by `paths`.
pub fn export_sequence(seq: &SyntheticSequence, dir: &std::path::Path, paths: &InputPaths) -> Result<(), CliError> {
    let depth_dir = dir.join(&paths.depth_dir);
    std::fs::create_dir_all(&depth_dir).map_err(|source| CliError::Io {
        path: depth_dir.clone(),
        source,
    })?;
    save_events(&seq.events, &dir.join(&paths.events))?;
    for (i, frame) in seq.depth_frames.iter().enumerate() {
        write_depth_frame(frame, &depth_dir.join(format!("{i:06}.depth")))?;
    }
    save_map(&seq.map, &dir.join(&paths.map))?;
    save_trajectory(&Trajectory::new(seq.groundtruth.clone())?, &dir.join(&paths.groundtruth))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MotionParams;

    fn small_k() -> CameraIntrinsics {
        CameraIntrinsics::new(200.0, 200.0, 79.5, 59.5, 160, 120).unwrap()
    }

    #[test]
    fn static_trajectory_emits_nothing() {
        let scene = ScenePreset::Room.build(1, 10.0);
        let traj = TrajectorySpec::preset(TrajectoryPreset::Static, 0.05, 1);
        let (events, gt) = generate_events(&scene, &traj, &small_k(), 1000.0, &NoiseSpec::default(), 3).unwrap();
        assert!(events.is_empty());
        assert_eq!(gt.len(), 51);
    }

    #[test]
    fn single_edge_under_vertical_motion_has_one_polarity() {
        let scene = WireScene {
            segments: vec![Segment {
                start: Vector3::new(-0.5, 0.0, 3.0),
                end: Vector3::new(0.5, 0.0, 3.0),
                gradient: Vector3::y(),
                density: 40.0,
            }],
            surfaces: vec![],
        };
        let mut traj = TrajectorySpec::preset(TrajectoryPreset::Static, 0.2, 0);
        // Camera moves down (+y) at a steady rate over the window.
        traj.translation[1] = Sinusoid::new(0.1, 0.5, 0.0);
        let (events, _) = generate_events(&scene, &traj, &small_k(), 1000.0, &NoiseSpec::default(), 0).unwrap();
        assert!(!events.is_empty());
        let first = events[0].polarity;
        assert!(events.iter().all(|e| e.polarity == first));
    }

    #[test]
    fn event_locations_match_projections() {
        let scene = ScenePreset::Room.build(4, 10.0);
        let traj = TrajectorySpec::preset(TrajectoryPreset::Default, 0.05, 4);
        let k = small_k();
        let noise = NoiseSpec { jitter_sigma: 0.3, spurious_fraction: 0.0 };
        let (events, _) = generate_events(&scene, &traj, &k, 1000.0, &noise, 9).unwrap();
        assert!(events.len() > 100);
        // Every event lies within rounding plus 5σ of some edge's projection.
        for e in events.iter().step_by(37) {
            let pose = traj.pose(e.t);
            let px = Vector2::new(e.x as f64, e.y as f64);
            let best = scene
                .segments
                .iter()
                .flat_map(|s| image_samples(s, &pose, &k, 0.05))
                .filter_map(|p| k.project(&pose.inverse().transform_point(&p.position)).ok())
                .map(|uv| (uv - px).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.5f64.hypot(0.5) + 5.0 * 0.3 + 0.05, "event {e:?} is {best} px away");
        }
    }

    #[test]
    fn events_are_sorted_and_deterministic() {
        let config = SynthConfig {
            duration: 0.05,
            ..Default::default()
        };
        let a = generate_sequence(&config).unwrap();
        let b = generate_sequence(&config).unwrap();
        assert_eq!(a.events, b.events);
        assert!(a.events.windows(2).all(|w| w[0].t <= w[1].t));
        assert_eq!(a.depth_frames.len(), 2);
        let c = generate_sequence(&SynthConfig { seed: 8, ..config }).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn spurious_rate_matches_fraction() {
        let scene = ScenePreset::Room.build(2, 10.0);
        let traj = TrajectorySpec::preset(TrajectoryPreset::Default, 0.03, 2);
        let k = small_k();
        let clean = generate_events(&scene, &traj, &k, 1000.0, &NoiseSpec::default(), 5).unwrap().0;
        let noise = NoiseSpec { jitter_sigma: 0.0, spurious_fraction: 0.05 };
        let noisy = generate_events(&scene, &traj, &k, 1000.0, &noise, 5).unwrap().0;
        let expected = (clean.len() as f64 * 0.05).round() as usize;
        assert_eq!(noisy.len(), clean.len() + expected);
    }

    #[test]
    fn invisible_scene_is_an_error() {
        let scene = WireScene {
            segments: vec![Segment {
                start: Vector3::new(0.0, 0.0, -3.0),
                end: Vector3::new(1.0, 0.0, -3.0),
                gradient: Vector3::y(),
                density: 10.0,
            }],
            surfaces: vec![],
        };
        let traj = TrajectorySpec::preset(TrajectoryPreset::Default, 0.01, 0);
        assert!(matches!(
            generate_events(&scene, &traj, &small_k(), 1000.0, &NoiseSpec::default(), 0),
            Err(SynthError::SceneNotVisible)
        ));
    }

    #[test]
    fn velocities_match_finite_differences() {
        let traj = TrajectorySpec::preset(TrajectoryPreset::HighDynamics, 5.0, 11);
        for &t in &[0.3, 1.7, 4.2] {
            let h = 1e-6;
            let rel = traj.pose(t).inverse().compose(&traj.pose(t + h));
            let fd = MotionParams::from_pose(&rel);
            let (v, w) = traj.velocity(t);
            assert!((fd.translation / h - v).norm() < 1e-4);
            assert!((fd.rotation_rodrigues / h - w).norm() < 1e-4);
        }
    }

    #[test]
    fn depth_of_fronto_parallel_plane_is_constant() {
        let scene = WireScene {
            segments: vec![],
            surfaces: vec![Quad {
                origin: Vector3::new(0.0, 0.0, 2.0),
                u_axis: Vector3::x(),
                v_axis: Vector3::y(),
                u_range: (-10.0, 10.0),
                v_range: (-10.0, 10.0),
            }],
        };
        let k = small_k();
        let depth = render_depth(&scene, &PoseSE3::identity(), &k);
        assert!(depth.iter().all(|&z| (z - 2.0).abs() < 1e-6));
    }

    #[test]
    fn nearer_surface_wins() {
        let scene = ScenePreset::Occluder.build(0, 10.0);
        let k = small_k();
        let depth = render_depth(&scene, &PoseSE3::identity(), &k);
        // The board covers the image centre.
        let z = depth[60 * k.width + 80];
        assert!((z - 2.5).abs() < 1e-6, "{z}");
    }

    #[test]
    fn rendered_depth_matches_point_depth() {
        let scene = ScenePreset::Room.build(3, 10.0);
        let traj = TrajectorySpec::preset(TrajectoryPreset::Default, 1.0, 3);
        let k = small_k();
        let pose = traj.pose(0.4);
        let to_cam = pose.inverse();
        let mut checked = 0;
        for p in scene.points(1.0) {
            let q = to_cam.transform_point(&p.position);
            let Ok(uv) = k.project(&q) else { continue };
            if q.z <= 0.0 || !k.contains(&uv) || scene.occluded(&pose.translation, &p.position) {
                continue;
            }
            let z = ray_depth(&scene, &pose, &k, &uv).unwrap();
            assert!((z - q.z).abs() < 1e-6, "{z} vs {}", q.z);
            checked += 1;
        }
        assert!(checked > 50);
        let depth = render_depth(&scene, &pose, &k);
        let centre = ray_depth(&scene, &pose, &k, &Vector2::new(40.0, 30.0)).unwrap();
        assert!((depth[30 * k.width + 40] as f64 - centre).abs() < 1e-5);
    }

    #[test]
    fn presets_validate() {
        for name in ScenePreset::NAMES {
            let scene = ScenePreset::from_name(name).unwrap().build(5, 20.0);
            scene.validate().unwrap();
            assert!(!scene.map().is_empty());
        }
        assert!(ScenePreset::from_name("attic").is_err());
        assert!(SynthConfig::default().validate().is_ok());
        let bad = SynthConfig { duration: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
