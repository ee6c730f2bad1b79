//! Exact Euclidean nearest-neighbour and distance fields over edge masks.
//!
//! Two separable passes: per column the nearest edge row, then per row the
//! lower envelope of parabolas `(x - q)² + g(q)²`. Everything runs on integer
//! squared distances so ties can be resolved exactly: among equidistant edge
//! pixels the one with the smallest row, then smallest column, wins.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("edge mask contains no edge pixels")]
    EmptyMask,
    #[error("mask has {got} cells, expected {width}x{height}")]
    SizeMismatch {
        got: usize,
        width: usize,
        height: usize,
    },
    #[error("grid must be at least 1x1")]
    Degenerate,
}

/// Per-cell coordinates `(x, y)` of the nearest edge pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NearestNeighborField {
    width: usize,
    height: usize,
    nearest: Vec<(u32, u32)>,
    valid: bool,
}

impl NearestNeighborField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn nearest(&self, x: usize, y: usize) -> (usize, usize) {
        let (nx, ny) = self.nearest[y * self.width + x];
        (nx as usize, ny as usize)
    }

    pub fn squared_distance(&self, x: usize, y: usize) -> u64 {
        let (nx, ny) = self.nearest(x, y);
        let dx = nx as i64 - x as i64;
        let dy = ny as i64 - y as i64;
        (dx * dx + dy * dy) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    width: usize,
    height: usize,
    dist: Vec<f64>,
}

impl DistanceField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.dist[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.dist
    }
}

/// Row-major `mask[y * width + x]`, `true` marking an edge pixel.
pub fn build_annf(
    mask: &[bool],
    width: usize,
    height: usize,
) -> Result<NearestNeighborField, FieldError> {
    if width == 0 || height == 0 {
        return Err(FieldError::Degenerate);
    }
    if mask.len() != width * height {
        return Err(FieldError::SizeMismatch {
            got: mask.len(),
            width,
            height,
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(FieldError::EmptyMask);
    }

    // Column pass: nearest edge row per cell, preferring the upper one on ties.
    let mut row_of: Vec<Option<u32>> = vec![None; width * height];
    for x in 0..width {
        let mut above: Option<usize> = None;
        for y in 0..height {
            if mask[y * width + x] {
                above = Some(y);
            }
            row_of[y * width + x] = above.map(|r| r as u32);
        }
        let mut below: Option<usize> = None;
        for y in (0..height).rev() {
            if mask[y * width + x] {
                below = Some(y);
            }
            let Some(b) = below else { continue };
            let slot = &mut row_of[y * width + x];
            match *slot {
                Some(a) if y - a as usize <= b - y => {}
                _ => *slot = Some(b as u32),
            }
        }
    }

    let mut nearest = vec![(0u32, 0u32); width * height];
    let mut env = Envelope::with_capacity(width);
    for y in 0..height {
        env.clear();
        for q in 0..width {
            if let Some(r) = row_of[y * width + q] {
                let dy = r as i64 - y as i64;
                env.push(q as i64, dy * dy, r);
            }
        }
        env.sweep(width, |x, col, row| nearest[y * width + x] = (col as u32, row));
    }

    Ok(NearestNeighborField {
        width,
        height,
        nearest,
        valid: true,
    })
}

pub fn distance_field(annf: &NearestNeighborField) -> DistanceField {
    let dist = (0..annf.height)
        .flat_map(|y| (0..annf.width).map(move |x| (x, y)))
        .map(|(x, y)| (annf.squared_distance(x, y) as f64).sqrt())
        .collect();
    DistanceField {
        width: annf.width,
        height: annf.height,
        dist,
    }
}

/// Exact rational `num / den`, `den > 0`; `den == 0` encodes -∞.
#[derive(Clone, Copy, Debug)]
struct Ratio {
    num: i64,
    den: i64,
}

impl Ratio {
    const NEG_INF: Ratio = Ratio { num: -1, den: 0 };

    fn lt(self, other: Ratio) -> bool {
        match (self.den, other.den) {
            (0, 0) => false,
            (0, _) => true,
            (_, 0) => false,
            _ => (self.num as i128) * (other.den as i128) < (other.num as i128) * (self.den as i128),
        }
    }

    fn le_int(self, x: i64) -> bool {
        self.den == 0 || self.num <= x * self.den
    }

    fn eq_int(self, x: i64) -> bool {
        self.den != 0 && self.num == x * self.den
    }
}

/// Lower envelope of parabolas `(x - q)² + g` with tie-aware bookkeeping.
struct Envelope {
    cols: Vec<i64>,
    offs: Vec<i64>,
    rows: Vec<u32>,
    starts: Vec<Ratio>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            cols: Vec::with_capacity(n),
            offs: Vec::with_capacity(n),
            rows: Vec::with_capacity(n),
            starts: Vec::with_capacity(n),
        }
    }

    fn clear(&mut self) {
        self.cols.clear();
        self.offs.clear();
        self.rows.clear();
        self.starts.clear();
    }

    fn push(&mut self, q: i64, g: i64, row: u32) {
        loop {
            let Some(&p) = self.cols.last() else {
                self.cols.push(q);
                self.offs.push(g);
                self.rows.push(row);
                self.starts.push(Ratio::NEG_INF);
                return;
            };
            let gp = *self.offs.last().unwrap();
            let s = Ratio {
                num: (g + q * q) - (gp + p * p),
                den: 2 * (q - p),
            };
            // Strict comparison keeps parabolas that touch the envelope at a
            // single point, so every tied candidate survives for the sweep.
            if s.lt(*self.starts.last().unwrap()) {
                self.cols.pop();
                self.offs.pop();
                self.rows.pop();
                self.starts.pop();
                continue;
            }
            self.cols.push(q);
            self.offs.push(g);
            self.rows.push(row);
            self.starts.push(s);
            return;
        }
    }

    fn sweep(&self, width: usize, mut emit: impl FnMut(usize, i64, u32)) {
        let n = self.cols.len();
        let mut k = 0;
        for x in 0..width as i64 {
            while k + 1 < n && self.starts[k + 1].le_int(x) {
                k += 1;
            }
            let cost = |j: usize| {
                let d = x - self.cols[j];
                d * d + self.offs[j]
            };
            let mut best = k;
            let mut j = k;
            while j > 0 && self.starts[j].eq_int(x) {
                j -= 1;
                let better = (cost(j), self.rows[j], self.cols[j])
                    < (cost(best), self.rows[best], self.cols[best]);
                if better {
                    best = j;
                }
            }
            emit(x as usize, self.cols[best], self.rows[best]);
        }
    }
}
