//! The quadratic pixel-wise adjustment curve, its quantized action space and
//! the reachable-range computation used to compare action spaces.

use std::io::{Read, Write};

use thiserror::Error;

use crate::image::ImageTensor;

/// Coefficients outside this interval can push a pixel out of `[0, 1]` or
/// make the curve non-monotone.
pub const COEFF_MIN: f64 = -0.5;
pub const COEFF_MAX: f64 = 1.0;

const GRID_TOLERANCE: f64 = 1e-9;
const MAP_MAGIC: &[u8; 4] = b"PXAM";

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("invalid action space: {0}")]
    InvalidSpace(String),
    #[error("action map is {map_h}x{map_w} but image is {img_h}x{img_w}")]
    DimensionMismatch {
        map_h: usize,
        map_w: usize,
        img_h: usize,
        img_w: usize,
    },
    #[error("coefficient {0} outside [-0.5, 1]")]
    CoefficientOutOfRange(f64),
    #[error("action index {index} out of range for {len} actions")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("expected {expected} action maps, got {got}")]
    StepCount { expected: usize, got: usize },
    #[error("malformed action map: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An evenly spaced grid of curve coefficients `lo, lo + graduation, ..., hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    lo: f64,
    hi: f64,
    graduation: f64,
    values: Vec<f64>,
}

impl ActionSpace {
    pub fn new(lo: f64, hi: f64, graduation: f64) -> Result<Self, CurveError> {
        if !(lo.is_finite() && hi.is_finite() && graduation.is_finite()) {
            return Err(CurveError::InvalidSpace("non-finite bounds".into()));
        }
        if lo >= hi {
            return Err(CurveError::InvalidSpace(format!("lo {lo} must be below hi {hi}")));
        }
        if graduation <= 0.0 {
            return Err(CurveError::InvalidSpace(format!(
                "graduation {graduation} must be positive"
            )));
        }
        if lo < COEFF_MIN - GRID_TOLERANCE || hi > COEFF_MAX + GRID_TOLERANCE {
            return Err(CurveError::InvalidSpace(format!(
                "[{lo}, {hi}] exceeds the admissible range [-0.5, 1]"
            )));
        }
        let steps = (hi - lo) / graduation;
        let rounded = steps.round();
        if (steps - rounded).abs() > GRID_TOLERANCE {
            return Err(CurveError::InvalidSpace(format!(
                "(hi - lo) / graduation = {steps} is not an integer"
            )));
        }
        let steps = rounded as usize;
        if steps + 1 > 255 {
            return Err(CurveError::InvalidSpace(format!(
                "{} actions exceed the 255 limit",
                steps + 1
            )));
        }
        let mut values: Vec<f64> = (0..=steps).map(|i| lo + (hi - lo) * i as f64 / steps as f64).collect();
        values[0] = lo;
        values[steps] = hi;
        Ok(Self {
            lo,
            hi,
            graduation,
            values,
        })
    }

    /// `[-0.5, 1]` in steps of 1/18: 28 actions.
    pub fn ours() -> Self {
        Self::new(-0.5, 1.0, 1.0 / 18.0).expect("valid default space")
    }

    /// `[-0.3, 1]` in steps of 0.05: 27 actions.
    pub fn baseline() -> Self {
        Self::new(-0.3, 1.0, 0.05).expect("valid baseline space")
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn graduation(&self) -> f64 {
        self.graduation
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the grid value nearest to `raw`; ties go to the lower index.
    pub fn quantize(&self, raw: f64) -> usize {
        if raw.is_nan() || raw <= self.lo {
            return 0;
        }
        if raw >= self.hi {
            return self.len() - 1;
        }
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, v) in self.values.iter().enumerate() {
            let d = (raw - v).abs();
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        best
    }
}

/// Per-pixel action indices for one enhancement step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMap {
    height: usize,
    width: usize,
    indices: Vec<u8>,
    coefficients: Vec<f64>,
}

impl ActionMap {
    pub fn new(space: &ActionSpace, height: usize, width: usize, indices: Vec<u8>) -> Result<Self, CurveError> {
        if indices.len() != height * width {
            return Err(CurveError::Malformed(format!(
                "{} indices for a {height}x{width} map",
                indices.len()
            )));
        }
        let coefficients = indices
            .iter()
            .map(|&i| {
                space
                    .values()
                    .get(i as usize)
                    .copied()
                    .ok_or(CurveError::IndexOutOfRange {
                        index: i as usize,
                        len: space.len(),
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            height,
            width,
            indices,
            coefficients,
        })
    }

    pub fn constant(space: &ActionSpace, height: usize, width: usize, index: u8) -> Result<Self, CurveError> {
        Self::new(space, height, width, vec![index; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Writes a `PXAM` container: magic, little-endian u32 height and width,
    /// then one byte per pixel in row-major order.
    pub fn write_to(&self, mut out: impl Write) -> Result<(), CurveError> {
        out.write_all(MAP_MAGIC)?;
        out.write_all(&(self.height as u32).to_le_bytes())?;
        out.write_all(&(self.width as u32).to_le_bytes())?;
        out.write_all(&self.indices)?;
        Ok(())
    }

    pub fn read_from(space: &ActionSpace, mut input: impl Read) -> Result<Self, CurveError> {
        let mut header = [0u8; 12];
        input.read_exact(&mut header)?;
        if &header[..4] != MAP_MAGIC {
            return Err(CurveError::Malformed("bad magic".into()));
        }
        let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut indices = vec![0u8; height * width];
        input.read_exact(&mut indices)?;
        Self::new(space, height, width, indices)
    }
}

/// One curve step `s + a * s * (1 - s)` for a single value.
#[inline]
pub fn pac(s: f64, a: f64) -> f64 {
    (s + a * s * (1.0 - s)).clamp(0.0, 1.0)
}

/// Applies one action map to an image; each pixel's coefficient is shared by
/// its three channels.
pub fn apply_pac(s: &ImageTensor, a: &ActionMap) -> Result<ImageTensor, CurveError> {
    if s.height() != a.height || s.width() != a.width {
        return Err(CurveError::DimensionMismatch {
            map_h: a.height,
            map_w: a.width,
            img_h: s.height(),
            img_w: s.width(),
        });
    }
    if let Some(&c) = a.coefficients.iter().find(|c| !(COEFF_MIN..=COEFF_MAX).contains(*c)) {
        return Err(CurveError::CoefficientOutOfRange(c));
    }
    let w = s.width();
    let out = ImageTensor::from_fn(s.height(), w, |y, x| {
        let c = a.coefficients[y * w + x];
        s.pixel(y, x).map(|v| pac(v, c))
    });
    Ok(out)
}

/// Applies `maps` in order and returns every intermediate state `s1..sn`.
pub fn rollout_curves(s0: &ImageTensor, maps: &[ActionMap], n: usize) -> Result<Vec<ImageTensor>, CurveError> {
    if maps.len() != n {
        return Err(CurveError::StepCount {
            expected: n,
            got: maps.len(),
        });
    }
    let mut states = Vec::with_capacity(n);
    let mut current = s0.clone();
    for map in maps {
        current = apply_pac(&current, map)?;
        states.push(current.clone());
    }
    Ok(states)
}

/// Mean width over `s in [0, 1]` of the band between the `n`-fold composed
/// maximal and minimal curves. The curve is monotone in `s`, so the
/// constant-`hi` and constant-`lo` rollouts bound every reachable value.
/// Samples are taken at the `grid` cell midpoints.
pub fn coverage_range(space: &ActionSpace, n: usize, grid: usize) -> f64 {
    assert!(n >= 1, "step count must be at least 1");
    assert!(grid >= 1000, "grid must have at least 1000 samples");
    let total: f64 = (0..grid)
        .map(|i| {
            let s = (i as f64 + 0.5) / grid as f64;
            let (mut up, mut down) = (s, s);
            for _ in 0..n {
                up = pac(up, space.hi());
                down = pac(down, space.lo());
            }
            up - down
        })
        .sum();
    total / grid as f64
}

pub const DEFAULT_COVERAGE_GRID: usize = 100_000;
