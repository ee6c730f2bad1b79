//! Events and the time-surface representations built from them.
//!
//! A time surface stores, per pixel, the timestamp of the most recent event.
//! Its value at evaluation time `t` is `exp(-(t - t_last) / τ)`, or 0 where no
//! event was ever seen. Exponentials are only evaluated when a snapshot is
//! materialised or sampled, so inserting events is a plain overwrite.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventRepError {
    #[error("event at t={event_time} is after the evaluation time {eval_time}")]
    EventAfterEvalTime { event_time: f64, eval_time: f64 },
    #[error("decay constant tau must be positive, got {0}")]
    TauNonPositive(f64),
    #[error("event at ({x}, {y}) lies outside the {width}x{height} sensor")]
    EventOutOfBounds {
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },
    #[error("sample location ({0}, {1}) is outside the field")]
    OutOfBounds(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_sign(s: f64) -> Self {
        if s >= 0.0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    pub t: f64,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(x: u32, y: u32, t: f64, polarity: Polarity) -> Self {
        Self { x, y, t, polarity }
    }
}

/// Latest-event timestamps per pixel. This is the mutable side of a time
/// surface: feed events in, then take [`TimeSurfaceMap`] snapshots.
#[derive(Debug, Clone)]
pub struct TimeSurfaceBuilder {
    width: usize,
    height: usize,
    last: Vec<f64>,
    latest: f64,
}

impl TimeSurfaceBuilder {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            last: vec![f64::NEG_INFINITY; width * height],
            latest: f64::NEG_INFINITY,
        }
    }

    pub fn insert(&mut self, event: &Event) -> Result<(), EventRepError> {
        let (x, y) = (event.x as usize, event.y as usize);
        if x >= self.width || y >= self.height {
            return Err(EventRepError::EventOutOfBounds {
                x: event.x,
                y: event.y,
                width: self.width,
                height: self.height,
            });
        }
        let slot = &mut self.last[y * self.width + x];
        // Streams are time ordered; max() keeps us correct if a batch is not.
        *slot = slot.max(event.t);
        self.latest = self.latest.max(event.t);
        Ok(())
    }

    pub fn extend<'a, I: IntoIterator<Item = &'a Event>>(
        &mut self,
        events: I,
    ) -> Result<(), EventRepError> {
        events.into_iter().try_for_each(|e| self.insert(e))
    }

    pub fn latest_event_time(&self) -> f64 {
        self.latest
    }

    pub fn snapshot(&self, eval_time: f64, tau: f64) -> Result<TimeSurfaceMap, EventRepError> {
        if !(tau > 0.0) {
            return Err(EventRepError::TauNonPositive(tau));
        }
        if self.latest > eval_time {
            return Err(EventRepError::EventAfterEvalTime {
                event_time: self.latest,
                eval_time,
            });
        }
        Ok(TimeSurfaceMap {
            width: self.width,
            height: self.height,
            eval_time,
            decay_tau: tau,
            last_event_time: self.last.clone(),
        })
    }
}

/// Immutable time-surface snapshot at `eval_time`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSurfaceMap {
    width: usize,
    height: usize,
    eval_time: f64,
    decay_tau: f64,
    last_event_time: Vec<f64>,
}

impl TimeSurfaceMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn eval_time(&self) -> f64 {
        self.eval_time
    }

    pub fn decay_tau(&self) -> f64 {
        self.decay_tau
    }

    pub fn last_event_time(&self, x: usize, y: usize) -> f64 {
        self.last_event_time[y * self.width + x]
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.value_at(self.eval_time, x, y)
    }

    /// Value the same event history would have at another time `t >= t_last`.
    pub fn value_at(&self, t: f64, x: usize, y: usize) -> f64 {
        decay(t, self.last_event_time(x, y), self.decay_tau)
    }

    /// Row-major materialisation of all pixel values.
    pub fn values(&self) -> Vec<f64> {
        self.last_event_time
            .iter()
            .map(|&tl| decay(self.eval_time, tl, self.decay_tau))
            .collect()
    }

    /// Re-evaluates the same history at a later time.
    pub fn at_time(&self, eval_time: f64) -> Result<TimeSurfaceMap, EventRepError> {
        if eval_time < self.eval_time {
            return Err(EventRepError::EventAfterEvalTime {
                event_time: self.eval_time,
                eval_time,
            });
        }
        Ok(TimeSurfaceMap {
            eval_time,
            ..self.clone()
        })
    }

    /// Boolean mask of pixels whose value exceeds `delta`.
    pub fn edge_mask(&self, delta: f64) -> Vec<bool> {
        self.last_event_time
            .iter()
            .map(|&tl| decay(self.eval_time, tl, self.decay_tau) > delta)
            .collect()
    }
}

fn decay(t: f64, t_last: f64, tau: f64) -> f64 {
    if t_last == f64::NEG_INFINITY {
        0.0
    } else {
        (-(t - t_last) / tau).exp().min(1.0)
    }
}

pub fn build_tsm(
    events: &[Event],
    width: usize,
    height: usize,
    eval_time: f64,
    tau: f64,
) -> Result<TimeSurfaceMap, EventRepError> {
    let mut b = TimeSurfaceBuilder::new(width, height);
    b.extend(events)?;
    b.snapshot(eval_time, tau)
}

/// Polarity-split pair of time surfaces.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedTimeSurfaceMaps {
    pub positive: TimeSurfaceMap,
    pub negative: TimeSurfaceMap,
}

/// Incremental builder maintaining the combined surface and both signed ones.
#[derive(Debug, Clone)]
pub struct SurfaceSetBuilder {
    pub combined: TimeSurfaceBuilder,
    pub positive: TimeSurfaceBuilder,
    pub negative: TimeSurfaceBuilder,
}

impl SurfaceSetBuilder {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            combined: TimeSurfaceBuilder::new(width, height),
            positive: TimeSurfaceBuilder::new(width, height),
            negative: TimeSurfaceBuilder::new(width, height),
        }
    }

    pub fn insert(&mut self, e: &Event) -> Result<(), EventRepError> {
        self.combined.insert(e)?;
        match e.polarity {
            Polarity::Positive => self.positive.insert(e),
            Polarity::Negative => self.negative.insert(e),
        }
    }

    pub fn extend<'a, I: IntoIterator<Item = &'a Event>>(
        &mut self,
        events: I,
    ) -> Result<(), EventRepError> {
        events.into_iter().try_for_each(|e| self.insert(e))
    }

    pub fn snapshot(
        &self,
        eval_time: f64,
        tau: f64,
    ) -> Result<(TimeSurfaceMap, SignedTimeSurfaceMaps), EventRepError> {
        Ok((
            self.combined.snapshot(eval_time, tau)?,
            SignedTimeSurfaceMaps {
                positive: self.positive.snapshot(eval_time, tau)?,
                negative: self.negative.snapshot(eval_time, tau)?,
            },
        ))
    }
}

pub fn build_stsm(
    events: &[Event],
    width: usize,
    height: usize,
    eval_time: f64,
    tau: f64,
) -> Result<SignedTimeSurfaceMaps, EventRepError> {
    if !(tau > 0.0) {
        return Err(EventRepError::TauNonPositive(tau));
    }
    let mut pos = TimeSurfaceBuilder::new(width, height);
    let mut neg = TimeSurfaceBuilder::new(width, height);
    for e in events {
        match e.polarity {
            Polarity::Positive => pos.insert(e)?,
            Polarity::Negative => neg.insert(e)?,
        }
    }
    // The combined stream bounds both halves.
    let latest = pos.latest_event_time().max(neg.latest_event_time());
    if latest > eval_time {
        return Err(EventRepError::EventAfterEvalTime {
            event_time: latest,
            eval_time,
        });
    }
    Ok(SignedTimeSurfaceMaps {
        positive: pos.snapshot(eval_time, tau)?,
        negative: neg.snapshot(eval_time, tau)?,
    })
}

/// Pixels `(x, y)` whose value exceeds `delta`, in row-major order.
pub fn semi_dense_pixels(tsm: &TimeSurfaceMap, delta: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..tsm.height {
        for x in 0..tsm.width {
            if tsm.value(x, y) > delta {
                out.push((x, y));
            }
        }
    }
    out
}

/// Dense scalar image sampled by the registration, typically `1 - TSM`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl PotentialField {
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "field size mismatch");
        Self {
            width,
            height,
            values,
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::from_values(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Pointwise `1 - v`.
    pub fn negated(&self) -> PotentialField {
        Self::from_values(
            self.width,
            self.height,
            self.values.iter().map(|v| 1.0 - v).collect(),
        )
    }

    /// Like [`negate`], but pixels at or below `delta` are treated as eventless.
    pub fn from_thresholded(tsm: &TimeSurfaceMap, delta: f64) -> Self {
        let values = tsm
            .values()
            .into_iter()
            .map(|v| if v > delta { 1.0 - v } else { 1.0 })
            .collect();
        Self::from_values(tsm.width(), tsm.height(), values)
    }

    pub fn sample(&self, uv: &Vector2<f64>) -> Result<(f64, Vector2<f64>), EventRepError> {
        sample_bilinear(self, uv)
    }

    /// Writes a binary PGM with values clamped to `[0,1]` and scaled to `[0,255]`.
    pub fn write_pgm(&self, path: &Path) -> std::io::Result<()> {
        write_pgm(path, self.width, self.height, &self.values)
    }
}

/// Potential `1 - T(x)`: zero on the freshest edges, one where nothing happened.
pub fn negate(tsm: &TimeSurfaceMap) -> PotentialField {
    PotentialField::from_values(
        tsm.width(),
        tsm.height(),
        tsm.values().into_iter().map(|v| 1.0 - v).collect(),
    )
}

/// Bilinear interpolation and the analytic gradient of the interpolant.
///
/// At exact integer coordinates the surface has a crease; there the gradient
/// along that axis is the mean of the two adjacent patch slopes, i.e. a central
/// difference of the grid values.
pub fn sample_bilinear(
    field: &PotentialField,
    uv: &Vector2<f64>,
) -> Result<(f64, Vector2<f64>), EventRepError> {
    let (w, h) = (field.width, field.height);
    let (u, v) = (uv.x, uv.y);
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return Err(EventRepError::OutOfBounds(u, v));
    }
    let (x0, ax) = cell(u, w);
    let (y0, ay) = cell(v, h);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let f = |x: usize, y: usize| field.values[y * w + x];
    let (f00, f10, f01, f11) = (f(x0, y0), f(x1, y0), f(x0, y1), f(x1, y1));
    let top = f00 + ax * (f10 - f00);
    let bottom = f01 + ax * (f11 - f01);
    let value = top + ay * (bottom - top);

    let slope_x = |xa: usize, xb: usize| {
        (1.0 - ay) * (f(xb, y0) - f(xa, y0)) + ay * (f(xb, y1) - f(xa, y1))
    };
    let slope_y = |ya: usize, yb: usize| {
        (1.0 - ax) * (f(x0, yb) - f(x0, ya)) + ax * (f(x1, yb) - f(x1, ya))
    };
    let gx = if w == 1 {
        0.0
    } else if ax == 0.0 && x0 > 0 && x0 + 1 < w {
        0.5 * (slope_x(x0 - 1, x0) + slope_x(x0, x0 + 1))
    } else {
        slope_x(x0, x1)
    };
    let gy = if h == 1 {
        0.0
    } else if ay == 0.0 && y0 > 0 && y0 + 1 < h {
        0.5 * (slope_y(y0 - 1, y0) + slope_y(y0, y0 + 1))
    } else {
        slope_y(y0, y1)
    };
    Ok((value, Vector2::new(gx, gy)))
}

/// Lower cell index and fractional offset; the last row/column belongs to the
/// cell before it so that `x0 + 1` stays in range.
fn cell(c: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let i = (c.floor() as usize).min(n - 2);
    (i, c - i as f64)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()
}
