//! Semi-dense 3D maps.
//!
//! Local maps come from a time surface plus a registered depth frame: the
//! recently active pixels get a foreground depth from nearby warped depth
//! samples. Global maps are loaded from point files; their points may carry a
//! 3D gradient obtained by lifting an image gradient onto a support plane.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_rep::{semi_dense_pixels, TimeSurfaceMap};
use crate::geometry::{CameraIntrinsics, GeometryError, PoseSE3};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("depth frame has no valid depth pixel")]
    NoValidDepth,
    #[error("time surface has no pixel above the threshold")]
    EmptyMask,
    #[error("gradient ray is parallel to the support plane")]
    DegenerateRay,
    #[error("image gradient must be non-zero")]
    ZeroGradient,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiDensePoint {
    pub position: Vector3<f64>,
    pub gradient3d: Option<Vector3<f64>>,
    pub source_pixel: Option<Vector2<f64>>,
}

impl SemiDensePoint {
    pub fn new(position: Vector3<f64>) -> Self {
        Self {
            position,
            gradient3d: None,
            source_pixel: None,
        }
    }

    pub fn with_gradient(position: Vector3<f64>, gradient: Vector3<f64>) -> Self {
        Self {
            position,
            gradient3d: Some(gradient),
            source_pixel: None,
        }
    }
}

/// Points expressed in a single reference camera frame.
#[derive(Debug, Clone)]
pub struct LocalMap {
    pub points: Vec<SemiDensePoint>,
    /// world ← reference
    pub reference_pose: PoseSE3,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalMap {
    pub points: Vec<SemiDensePoint>,
}

impl GlobalMap {
    pub fn new(points: Vec<SemiDensePoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Depth image of a camera rigidly mounted next to the event camera.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major metres; 0 or NaN marks an invalid pixel.
    pub depth: Vec<f32>,
    pub timestamp: f64,
    pub intrinsics: CameraIntrinsics,
    /// event ← depth
    pub t_ed: PoseSE3,
}

impl DepthFrame {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.depth[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&z| is_valid_depth(z)).count()
    }
}

pub fn is_valid_depth(z: f32) -> bool {
    z.is_finite() && z > 0.0
}

/// A depth sample after warping into the event camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpedDepth {
    pub uv: Vector2<f64>,
    pub depth: f64,
}

/// Backprojects every valid depth pixel, moves it into the event frame and
/// projects it there. Samples behind the event camera or off its sensor are
/// dropped.
pub fn warp_depth_to_event(
    frame: &DepthFrame,
    k_event: &CameraIntrinsics,
) -> Result<Vec<WarpedDepth>, MapError> {
    let mut out = Vec::new();
    let mut any_valid = false;
    for y in 0..frame.height {
        for x in 0..frame.width {
            let z = frame.get(x, y);
            if !is_valid_depth(z) {
                continue;
            }
            any_valid = true;
            let p_d = frame
                .intrinsics
                .backproject(&Vector2::new(x as f64, y as f64), z as f64)?;
            let p_e = frame.t_ed.transform_point(&p_d);
            let Ok(uv) = k_event.project(&p_e) else {
                continue;
            };
            if k_event.contains(&uv) {
                out.push(WarpedDepth { uv, depth: p_e.z });
            }
        }
    }
    if !any_valid {
        return Err(MapError::NoValidDepth);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthAssignParams {
    /// Search radius around each pixel centre, in pixels.
    pub radius: f64,
    /// Largest depth step (metres) still considered part of the same surface.
    pub cluster_gap: f64,
}

impl Default for DepthAssignParams {
    fn default() -> Self {
        Self {
            radius: 2.0,
            cluster_gap: 0.3,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssignedDepths {
    pub points: Vec<SemiDensePoint>,
    /// Pixels with no warped sample inside the radius.
    pub skipped: usize,
}

/// Foreground depth from a set of `(distance to pixel centre, depth)` samples.
///
/// Sorted by depth, the foreground cluster is the longest prefix whose
/// consecutive gaps stay below `cluster_gap`; its inverse-distance weighted
/// mean is returned.
pub fn foreground_depth(samples: &mut [(f64, f64)], cluster_gap: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    samples.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut end = 1;
    while end < samples.len() && samples[end].1 - samples[end - 1].1 < cluster_gap {
        end += 1;
    }
    let (mut wsum, mut zsum) = (0.0, 0.0);
    for &(d, z) in &samples[..end] {
        let w = 1.0 / (d + 1e-6);
        wsum += w;
        zsum += w * z;
    }
    Some(zsum / wsum)
}

pub fn assign_depths(
    semi_dense: &[(usize, usize)],
    warped: &[WarpedDepth],
    k_event: &CameraIntrinsics,
    params: &DepthAssignParams,
) -> Result<AssignedDepths, MapError> {
    let (w, h) = (k_event.width, k_event.height);
    // Bucket samples by the pixel they round to.
    let mut head = vec![usize::MAX; w * h];
    let mut next = vec![usize::MAX; warped.len()];
    for (i, s) in warped.iter().enumerate() {
        if let Some((x, y)) = k_event.pixel_of(&s.uv) {
            next[i] = head[y * w + x];
            head[y * w + x] = i;
        }
    }
    let reach = params.radius.ceil() as isize + 1;
    let mut out = AssignedDepths::default();
    let mut samples = Vec::new();
    for &(px, py) in semi_dense {
        samples.clear();
        let centre = Vector2::new(px as f64, py as f64);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (cx, cy) = (px as isize + dx, py as isize + dy);
                if cx < 0 || cy < 0 || cx >= w as isize || cy >= h as isize {
                    continue;
                }
                let mut i = head[cy as usize * w + cx as usize];
                while i != usize::MAX {
                    let d = (warped[i].uv - centre).norm();
                    if d <= params.radius {
                        samples.push((d, warped[i].depth));
                    }
                    i = next[i];
                }
            }
        }
        match foreground_depth(&mut samples, params.cluster_gap) {
            Some(z) => {
                let mut p = SemiDensePoint::new(k_event.backproject(&centre, z)?);
                p.source_pixel = Some(centre);
                out.points.push(p);
            }
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Builds the reference-frame point cloud for one keyframe.
pub fn build_local_map(
    tsm: &TimeSurfaceMap,
    delta: f64,
    frame: &DepthFrame,
    k_event: &CameraIntrinsics,
    params: &DepthAssignParams,
    reference_pose: PoseSE3,
) -> Result<LocalMap, MapError> {
    let pixels = semi_dense_pixels(tsm, delta);
    if pixels.is_empty() {
        return Err(MapError::EmptyMask);
    }
    let warped = warp_depth_to_event(frame, k_event)?;
    let assigned = assign_depths(&pixels, &warped, k_event, params)?;
    Ok(LocalMap {
        points: assigned.points,
        reference_pose,
        timestamp: tsm.eval_time(),
    })
}

/// Lifts an image gradient at `pixel` onto the plane through `point` whose
/// normal is the viewing ray, returning a unit 3D gradient direction.
pub fn lift_gradient(
    pixel: &Vector2<f64>,
    grad2d: &Vector2<f64>,
    point: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<Vector3<f64>, MapError> {
    if !(point.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(point.z).into());
    }
    let gnorm = grad2d.norm();
    if !(gnorm > 0.0) {
        return Err(MapError::ZeroGradient);
    }
    const STEP_PX: f64 = 1.0;
    let second = pixel + grad2d * (STEP_PX / gnorm);
    let ray = k.backproject(&second, 1.0)?;
    let normal = point / point.norm();
    let denom = normal.dot(&ray);
    if denom.abs() < 1e-12 {
        return Err(MapError::DegenerateRay);
    }
    let lambda = normal.dot(point) / denom;
    if !(lambda > 0.0) {
        return Err(MapError::DegenerateRay);
    }
    let g = ray * lambda - point;
    let n = g.norm();
    if !(n > 0.0) {
        return Err(MapError::DegenerateRay);
    }
    Ok(g / n)
}

pub fn save_map(map: &GlobalMap, path: &Path) -> Result<(), MapError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(format_map(map).as_bytes())?;
    f.flush()?;
    Ok(())
}

/// One point per line: `x y z [gx gy gz]`.
pub fn format_map(map: &GlobalMap) -> String {
    let mut s = String::from("# x y z [gx gy gz]\n");
    for p in &map.points {
        let v = p.position;
        let _ = write!(s, "{} {} {}", v.x, v.y, v.z);
        if let Some(g) = p.gradient3d {
            let _ = write!(s, " {} {} {}", g.x, g.y, g.z);
        }
        s.push('\n');
    }
    s
}

pub fn load_map(path: &Path) -> Result<GlobalMap, MapError> {
    parse_map(BufReader::new(fs::File::open(path)?))
}

pub fn parse_map<R: BufRead>(reader: R) -> Result<GlobalMap, MapError> {
    let mut points = Vec::new();
    let mut last_line = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        last_line = lineno;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals = body
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| MapError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(MapError::Parse {
                line: lineno,
                message: "non-finite value".into(),
            });
        }
        let p = match vals.len() {
            3 => SemiDensePoint::new(Vector3::new(vals[0], vals[1], vals[2])),
            6 => {
                let g = Vector3::new(vals[3], vals[4], vals[5]);
                if g.norm() == 0.0 {
                    return Err(MapError::Parse {
                        line: lineno,
                        message: "gradient vector must be non-zero".into(),
                    });
                }
                SemiDensePoint::with_gradient(Vector3::new(vals[0], vals[1], vals[2]), g)
            }
            n => {
                return Err(MapError::Parse {
                    line: lineno,
                    message: format!("expected 3 or 6 values, found {n}"),
                });
            }
        };
        points.push(p);
    }
    if points.is_empty() {
        return Err(MapError::Parse {
            line: last_line,
            message: "map contains no points".into(),
        });
    }
    Ok(GlobalMap { points })
}

/// Writes a depth frame: text header terminated by `end_header`, then
/// little-endian `f32` depths in row-major order.
pub fn write_depth_frame(frame: &DepthFrame, path: &Path) -> Result<(), MapError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let k = &frame.intrinsics;
    let r = &frame.t_ed.rotation;
    let t = &frame.t_ed.translation;
    writeln!(f, "depth {} {}", frame.width, frame.height)?;
    writeln!(f, "timestamp {}", frame.timestamp)?;
    writeln!(f, "intrinsics {} {} {} {}", k.fx, k.fy, k.cx, k.cy)?;
    write!(f, "t_ed")?;
    for row in 0..3 {
        write!(f, " {} {} {} {}", r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row])?;
    }
    writeln!(f)?;
    writeln!(f, "end_header")?;
    for z in &frame.depth {
        f.write_all(&z.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_depth_frame(path: &Path) -> Result<DepthFrame, MapError> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut header = Vec::new();
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        lineno += 1;
        if reader.read_line(&mut line)? == 0 {
            return Err(MapError::Parse {
                line: lineno,
                message: "missing end_header".into(),
            });
        }
        let l = line.trim();
        if l == "end_header" {
            break;
        }
        header.push((lineno, l.to_string()));
    }
    let mut fields = std::collections::HashMap::new();
    for (n, l) in &header {
        let mut it = l.split_whitespace();
        let key = it.next().unwrap_or("").to_string();
        let vals = it
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| MapError::Parse {
                line: *n,
                message: e.to_string(),
            })?;
        fields.insert(key, (*n, vals));
    }
    let get = |key: &str, count: usize| -> Result<Vec<f64>, MapError> {
        match fields.get(key) {
            Some((_, v)) if v.len() == count => Ok(v.clone()),
            Some((n, v)) => Err(MapError::Parse {
                line: *n,
                message: format!("{key}: expected {count} values, found {}", v.len()),
            }),
            None => Err(MapError::Parse {
                line: lineno,
                message: format!("header is missing `{key}`"),
            }),
        }
    };
    let size = get("depth", 2)?;
    let (width, height) = (size[0] as usize, size[1] as usize);
    let timestamp = get("timestamp", 1)?[0];
    let kv = get("intrinsics", 4)?;
    let intrinsics = CameraIntrinsics::new(kv[0], kv[1], kv[2], kv[3], width, height)?;
    let e = get("t_ed", 12)?;
    let t_ed = PoseSE3::new(
        nalgebra::Matrix3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]),
        Vector3::new(e[3], e[7], e[11]),
    );
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != width * height * 4 {
        return Err(MapError::Parse {
            line: lineno,
            message: format!(
                "payload has {} bytes, expected {}",
                bytes.len(),
                width * height * 4
            ),
        });
    }
    let depth = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(DepthFrame {
        width,
        height,
        depth,
        timestamp,
        intrinsics,
        t_ed,
    })
}
