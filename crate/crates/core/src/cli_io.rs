//! File formats, run configuration, trajectory metrics and the command
//! bodies behind the `evtrack` binary.
//!
//! A sequence directory holds `events.csv`, `depth/NNNNNN.depth`, `map.txt`,
//! `groundtruth.txt` and a `config.toml` snapshot. Trajectories use the TUM
//! layout `t tx ty tz qx qy qz qw`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_rep::{Event, Polarity};
use crate::geometry::{se3_exp, se3_log, CameraIntrinsics, PoseSE3};
use crate::mapping::{load_map, read_depth_frame, MapError};
use crate::strategy::StrategyRegistry;
use crate::synth::{export_sequence, generate_sequence, SynthConfig, SynthError};
use crate::tracker::{
    run_tracking, DepthMapSource, FrameStatus, GlobalMapSource, ReferenceSource, TrackError,
    Tracker, TrackerConfig,
};

/// Largest timestamp gap (s) at which two poses are still associated.
pub const ASSOCIATION_GAP: f64 = 0.01;
/// Interval (s) of the relative-pose error.
pub const RPE_INTERVAL: f64 = 1.0;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: no events", .0.display())]
    EmptyEvents(PathBuf),
    #[error("trajectories share fewer than two associated poses")]
    NoOverlap,
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Map(#[from] MapError),
}

impl CliError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Prior global map.
    Evt,
    /// Local maps from depth frames.
    Devo,
}

/// Sequence-relative input locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub events: PathBuf,
    pub map: PathBuf,
    pub depth_dir: PathBuf,
    pub groundtruth: PathBuf,
}

impl Default for InputPaths {
    fn default() -> Self {
        Self {
            events: "events.csv".into(),
            map: "map.txt".into(),
            depth_dir: "depth".into(),
            groundtruth: "groundtruth.txt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Seconds of events fed before the first tracked frame.
    pub warmup: f64,
    /// Last tracked time; defaults to the last event.
    pub end_time: Option<f64>,
    pub event_camera: CameraIntrinsics,
    pub inputs: InputPaths,
    pub tracker: TrackerConfig,
    /// Used by `simulate` only.
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            mode: Mode::Evt,
            warmup: 0.1,
            end_time: None,
            event_camera: synth.event_camera,
            inputs: InputPaths::default(),
            tracker: TrackerConfig::default(),
            synth,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.warmup >= 0.0) {
            return Err(CliError::config("warmup", "must be non-negative"));
        }
        if let Some(end) = self.end_time {
            if !end.is_finite() {
                return Err(CliError::config("end_time", "must be finite"));
            }
        }
        self.event_camera
            .validate()
            .map_err(|e| CliError::config("event_camera", e.to_string()))?;
        self.tracker.validate().map_err(|e| match e {
            TrackError::Config(m) => field_message("tracker", &m),
            other => CliError::config("tracker", other.to_string()),
        })?;
        self.synth.validate().map_err(|e| match e {
            SynthError::InvalidConfig(m) => field_message("synth", &m),
            other => CliError::config("synth", other.to_string()),
        })?;
        Ok(())
    }
}

/// Validation messages start with the offending field name.
fn field_message(section: &str, message: &str) -> CliError {
    let (head, rest) = message.split_once(' ').unwrap_or((message, ""));
    let head = head.trim_end_matches(':');
    if head.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') && !head.is_empty() {
        CliError::config(format!("{section}.{head}"), rest.trim())
    } else {
        CliError::config(section, message)
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::parse(text).map_err(|e| CliError::config("<root>", e.to_string()))?;
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<root>".to_string() } else { path };
        CliError::config(field, e.inner().message().trim().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    parse_config(&fs::read_to_string(path).map_err(CliError::io(path))?)
}

pub fn format_config(config: &RunConfig) -> String {
    toml::to_string(config).expect("run configuration serialises")
}

pub fn save_config(config: &RunConfig, path: &Path) -> Result<(), CliError> {
    fs::write(path, format_config(config)).map_err(CliError::io(path))
}

/// `t,x,y,p` with `p ∈ {0, 1}` and nine decimals on `t`.
pub fn save_events(events: &[Event], path: &Path) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(CliError::io(path))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(w, "t,x,y,p")?;
        for e in events {
            let p = u8::from(e.polarity == Polarity::Positive);
            writeln!(w, "{:.9},{},{},{}", e.t, e.x, e.y, p)?;
        }
        w.flush()
    };
    write(&mut w).map_err(CliError::io(path))
}

pub fn load_events(path: &Path) -> Result<Vec<Event>, CliError> {
    let file = fs::File::open(path).map_err(CliError::io(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(BufReader::new(file));
    let parse_err = |line: usize, message: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut events: Vec<Event> = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line() as usize);
        if events.is_empty() && record.get(0) == Some("t") {
            continue;
        }
        if record.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", record.len())));
        }
        let t: f64 = record[0]
            .parse()
            .map_err(|e| parse_err(line, format!("timestamp: {e}")))?;
        if !t.is_finite() {
            return Err(parse_err(line, "non-finite timestamp".into()));
        }
        let x: u32 = record[1].parse().map_err(|e| parse_err(line, format!("x: {e}")))?;
        let y: u32 = record[2].parse().map_err(|e| parse_err(line, format!("y: {e}")))?;
        let polarity = match &record[3] {
            "1" => Polarity::Positive,
            "0" => Polarity::Negative,
            other => return Err(parse_err(line, format!("polarity must be 0 or 1, found `{other}`"))),
        };
        if let Some(prev) = events.last() {
            if t < prev.t {
                return Err(parse_err(line, format!("timestamp {t} precedes {}", prev.t)));
            }
        }
        events.push(Event::new(x, y, t, polarity));
    }
    Ok(events)
}

/// Timestamped poses with strictly increasing times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    samples: Vec<(f64, PoseSE3)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, PoseSE3)>) -> Result<Self, CliError> {
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(CliError::InvalidTrajectory(format!(
                    "timestamp {} does not follow {}",
                    w[1].0, w[0].0
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, PoseSE3)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Geodesic interpolation, clamped at both ends.
    pub fn pose_at(&self, t: f64) -> Option<PoseSE3> {
        let first = self.samples.first()?;
        let last = self.samples.last()?;
        if t <= first.0 {
            return Some(first.1);
        }
        if t >= last.0 {
            return Some(last.1);
        }
        let i = self.samples.partition_point(|s| s.0 <= t);
        let (t0, p0) = self.samples[i - 1];
        let (t1, p1) = self.samples[i];
        let rel = se3_log(&p0.inverse().compose(&p1));
        Some(p0.compose(&se3_exp(&rel.scaled((t - t0) / (t1 - t0)))))
    }

    /// Index of the sample nearest in time to `t`.
    fn nearest(&self, t: f64) -> Option<usize> {
        if self.samples.is_empty() {
            return None;
        }
        let i = self.samples.partition_point(|s| s.0 < t);
        let candidates = [i.checked_sub(1), (i < self.samples.len()).then_some(i)];
        candidates
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (self.samples[a].0 - t).abs().total_cmp(&(self.samples[b].0 - t).abs()))
    }
}

pub fn format_trajectory(trajectory: &Trajectory) -> String {
    let mut s = String::from("# t tx ty tz qx qy qz qw\n");
    for (t, pose) in &trajectory.samples {
        let p = pose.translation;
        let q = pose.quaternion();
        let _ = writeln!(s, "{t:.9} {} {} {} {} {} {} {}", p.x, p.y, p.z, q[0], q[1], q[2], q[3]);
    }
    s
}

pub fn save_trajectory(trajectory: &Trajectory, path: &Path) -> Result<(), CliError> {
    fs::write(path, format_trajectory(trajectory)).map_err(CliError::io(path))
}

pub fn parse_trajectory<R: BufRead>(reader: R, path: &Path) -> Result<Trajectory, CliError> {
    let mut samples: Vec<(f64, PoseSE3)> = Vec::new();
    let parse_err = |line: usize, message: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        let lineno = i + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals = body
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        if vals.len() != 8 {
            return Err(parse_err(lineno, format!("expected 8 values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, "non-finite value".into()));
        }
        let q = [vals[4], vals[5], vals[6], vals[7]];
        if q.iter().map(|v| v * v).sum::<f64>() < 1e-12 {
            return Err(parse_err(lineno, "zero quaternion".into()));
        }
        if let Some(prev) = samples.last() {
            if !(vals[0] > prev.0) {
                return Err(parse_err(lineno, format!("timestamp {} does not follow {}", vals[0], prev.0)));
            }
        }
        let pose = PoseSE3::from_quaternion(q, Vector3::new(vals[1], vals[2], vals[3]));
        samples.push((vals[0], pose));
    }
    Ok(Trajectory { samples })
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    let file = fs::File::open(path).map_err(CliError::io(path))?;
    parse_trajectory(BufReader::new(file), path)
}

/// Trajectory errors in cm, degrees and per-second rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// Associated pose pairs.
    pub pairs: usize,
    pub t_ate_cm: f64,
    pub r_ate_deg: f64,
    /// `None` when no pair of poses spans the RPE interval.
    pub t_rpe_cm_s: Option<f64>,
    pub r_rpe_deg_s: Option<f64>,
    pub rpe_pairs: usize,
}

/// Pairs each estimated pose with the nearest ground-truth pose within `max_gap`.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_gap: f64) -> Vec<(f64, PoseSE3, PoseSE3)> {
    est.samples
        .iter()
        .filter_map(|&(t, pe)| {
            let j = gt.nearest(t)?;
            let (tg, pg) = gt.samples[j];
            ((tg - t).abs() <= max_gap).then_some((t, pe, pg))
        })
        .collect()
}

/// Least-squares rigid transform `T` minimising `Σ |dst_i - T src_i|²`.
pub fn align_se3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> PoseSE3 {
    assert_eq!(src.len(), dst.len(), "point sets differ in size");
    if src.is_empty() {
        return PoseSE3::identity();
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - mu_s) * (d - mu_d).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = v * fix * u.transpose();
    PoseSE3::new(r, mu_d - r * mu_s)
}

fn rms(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (n > 0).then(|| (sum / n as f64).sqrt())
}

pub fn evaluate(est: &Trajectory, gt: &Trajectory) -> Result<Metrics, CliError> {
    let pairs = associate(est, gt, ASSOCIATION_GAP);
    if pairs.len() < 2 {
        return Err(CliError::NoOverlap);
    }
    let src: Vec<_> = pairs.iter().map(|p| p.1.translation).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.2.translation).collect();
    let align = align_se3(&src, &dst);
    let aligned: Vec<PoseSE3> = pairs.iter().map(|p| align.compose(&p.1)).collect();
    let t_ate = rms(aligned.iter().zip(&pairs).map(|(a, p)| (a.translation - p.2.translation).norm()))
        .unwrap_or(0.0);
    let r_ate = rms(aligned.iter().zip(&pairs).map(|(a, p)| p.2.inverse().compose(a).rotation_angle()))
        .unwrap_or(0.0);

    let mut trans = Vec::new();
    let mut rot = Vec::new();
    for (i, a) in pairs.iter().enumerate() {
        let target = a.0 + RPE_INTERVAL;
        let j = i + pairs[i..].partition_point(|p| p.0 < target - 1e-9);
        let Some(b) = pairs.get(j) else { break };
        let dt = b.0 - a.0;
        if dt > RPE_INTERVAL + ASSOCIATION_GAP {
            continue;
        }
        let rel_gt = a.2.inverse().compose(&b.2);
        let rel_est = a.1.inverse().compose(&b.1);
        let err = rel_gt.inverse().compose(&rel_est);
        trans.push(err.translation.norm() / dt);
        rot.push(err.rotation_angle() / dt);
    }
    Ok(Metrics {
        pairs: pairs.len(),
        t_ate_cm: t_ate * 100.0,
        r_ate_deg: r_ate.to_degrees(),
        t_rpe_cm_s: rms(trans.iter().copied()).map(|v| v * 100.0),
        r_rpe_deg_s: rms(rot.iter().copied()).map(f64::to_degrees),
        rpe_pairs: trans.len(),
    })
}

pub fn cmd_evaluate(est: &Path, gt: &Path) -> Result<Metrics, CliError> {
    evaluate(&load_trajectory(est)?, &load_trajectory(gt)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulateSummary {
    pub events: usize,
    pub depth_frames: usize,
    pub map_points: usize,
    pub groundtruth: usize,
}

/// Generates a synthetic sequence and writes it with a config snapshot that
/// `track` can consume directly.
pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<SimulateSummary, CliError> {
    config.validate()?;
    let seq = generate_sequence(&config.synth)?;
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    export_sequence(&seq, out, &config.inputs)?;
    let mut snapshot = config.clone();
    snapshot.event_camera = config.synth.event_camera;
    save_config(&snapshot, &out.join("config.toml"))?;
    Ok(SimulateSummary {
        events: seq.events.len(),
        depth_frames: seq.depth_frames.len(),
        map_points: seq.map.len(),
        groundtruth: seq.groundtruth.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSummary {
    pub frames: usize,
    pub rejected: usize,
    pub keyframes: usize,
    pub runtime_s: f64,
    pub report_path: PathBuf,
}

impl TrackSummary {
    pub fn rejected_fraction(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.rejected as f64 / self.frames as f64
        }
    }
}

fn load_depth_dir(dir: &Path) -> Result<Vec<crate::mapping::DepthFrame>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "depth"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(read_depth_frame(p)?)).collect()
}

/// Tracks a sequence directory and writes the trajectory plus a per-frame
/// CSV report next to it (`<out>.frames.csv`).
pub fn cmd_track(config: &RunConfig, seq_dir: &Path, out: &Path) -> Result<TrackSummary, CliError> {
    config.validate()?;
    let inputs = &config.inputs;
    let events_path = seq_dir.join(&inputs.events);
    let events = load_events(&events_path)?;
    let (Some(first), Some(last)) = (events.first(), events.last()) else {
        return Err(CliError::EmptyEvents(events_path));
    };
    let source: Box<dyn ReferenceSource> = match config.mode {
        Mode::Evt => {
            let path = seq_dir.join(&inputs.map);
            if !path.is_file() {
                return Err(CliError::config(
                    "inputs.map",
                    format!("evt mode needs a map file, {} not found", path.display()),
                ));
            }
            Box::new(GlobalMapSource::new(Arc::new(load_map(&path)?)))
        }
        Mode::Devo => {
            let dir = seq_dir.join(&inputs.depth_dir);
            let frames = if dir.is_dir() { load_depth_dir(&dir)? } else { Vec::new() };
            if frames.is_empty() {
                return Err(CliError::config(
                    "inputs.depth_dir",
                    format!("devo mode needs depth frames in {}", dir.display()),
                ));
            }
            Box::new(DepthMapSource::new(frames, config.tracker.depth_assign))
        }
    };
    let start = first.t + config.warmup;
    let end = config.end_time.unwrap_or(last.t);
    let gt_path = seq_dir.join(&inputs.groundtruth);
    let initial_pose = if gt_path.is_file() {
        load_trajectory(&gt_path)?.pose_at(start).unwrap_or_else(PoseSE3::identity)
    } else {
        PoseSE3::identity()
    };
    let warm = events.partition_point(|e| e.t <= start);
    let clock = Instant::now();
    let mut tracker = Tracker::start(
        config.tracker.clone(),
        config.event_camera,
        source,
        &StrategyRegistry::default(),
        initial_pose,
        start,
        &events[..warm],
    )?;
    let run = run_tracking(&mut tracker, &events, start, end)?;
    let runtime_s = clock.elapsed().as_secs_f64();

    save_trajectory(&Trajectory::new(run.trajectory.clone())?, out)?;
    let report_path = out.with_extension("frames.csv");
    let mut report = String::from("t,status,iterations,points_in_view,kept,culled,mean_cost,keyframe\n");
    for r in &run.reports {
        let status = match &r.status {
            FrameStatus::Accepted => "ok".to_string(),
            FrameStatus::Rejected(e) => format!("\"rejected: {}\"", e.to_string().replace('"', "'")),
        };
        let _ = writeln!(
            report,
            "{:.9},{status},{},{},{},{},{},{}",
            r.time,
            r.solve.iterations,
            r.points_in_view,
            r.kept,
            r.culled,
            r.mean_cost,
            u8::from(r.keyframe_switched)
        );
    }
    fs::write(&report_path, report).map_err(CliError::io(&report_path))?;
    Ok(TrackSummary {
        frames: run.reports.len(),
        rejected: run.rejected(),
        keyframes: run.keyframes,
        runtime_s,
        report_path,
    })
}
