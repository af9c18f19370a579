//! Black-box test functions with noisy evaluation.

use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{cholesky, tri_solve, CholFactor, Matrix, Side};
use crate::space::{DesignBox, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("raster parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("point ({x}, {y}) is outside the raster extent")]
    OutOfExtent { x: f64, y: f64 },
    #[error("invalid function parameters: {0}")]
    InvalidParams(String),
    #[error("cannot read raster file {path}: {message}")]
    Io { path: String, message: String },
}

/// `Σ |xᵢ sin(xᵢ) + 0.1 xᵢ|`.
pub fn alpine(x: &[f64]) -> f64 {
    x.iter().map(|v| (v * v.sin() + 0.1 * v).abs()).sum()
}

/// One Gaussian component of a mixture.
#[derive(Debug, Clone)]
pub struct Hill {
    pub weight: f64,
    pub mean: Vec<f64>,
    cov_chol: CholFactor,
    norm: f64,
}

impl Hill {
    pub fn new(weight: f64, mean: Vec<f64>, covariance: &Matrix) -> Result<Self, BenchError> {
        if covariance.rows() != mean.len() || !covariance.is_square() {
            return Err(BenchError::InvalidParams("covariance shape must match the mean".into()));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(BenchError::InvalidParams("weights must be non-negative".into()));
        }
        let cov_chol = cholesky(covariance, 0.0)
            .map_err(|e| BenchError::InvalidParams(format!("covariance: {e}")))?;
        let d = mean.len() as f64;
        let norm = ((2.0 * std::f64::consts::PI).powf(d) * cov_chol.log_det().exp()).sqrt();
        Ok(Hill {
            weight,
            mean,
            cov_chol,
            norm,
        })
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let z = tri_solve(&self.cov_chol, &diff, Side::Lower).expect("dimension checked");
        let q: f64 = z.iter().map(|v| v * v).sum();
        (-0.5 * q).exp() / self.norm
    }
}

/// Mixture of Gaussian densities.
#[derive(Debug, Clone)]
pub struct Multihills {
    pub hills: Vec<Hill>,
}

impl Multihills {
    /// Three components on `[0, 1]²` with covariance `0.01 I`.
    pub fn default_2d() -> Self {
        let cov = Matrix::from_rows(&[[0.01, 0.0], [0.0, 0.01]]);
        let spec = [(0.4, [0.25, 0.25]), (0.3, [0.75, 0.4]), (0.3, [0.4, 0.75])];
        Multihills {
            hills: spec
                .iter()
                .map(|(w, m)| Hill::new(*w, m.to_vec(), &cov).expect("valid default"))
                .collect(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.hills.iter().map(|h| h.weight * h.density(x)).sum()
    }
}

/// Mixture density at `x`.
pub fn multihills(x: &[f64], mixture: &Multihills) -> f64 {
    mixture.eval(x)
}

/// A gridded surface with bilinear interpolation.
///
/// `values` is row-major with `height` rows of `width` values; row 0 lies on
/// the `y_lo` edge and column 0 on the `x_lo` edge.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    width: usize,
    height: usize,
    x_extent: (f64, f64),
    y_extent: (f64, f64),
    values: Vec<f64>,
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> BenchError {
    BenchError::Parse {
        line,
        column,
        message: message.into(),
    }
}

impl RasterGrid {
    /// Builds a grid from raw values (no normalization).
    pub fn new(
        width: usize,
        height: usize,
        x_extent: (f64, f64),
        y_extent: (f64, f64),
        values: Vec<f64>,
    ) -> Result<Self, BenchError> {
        if width < 2 || height < 2 {
            return Err(BenchError::InvalidRaster("width and height must be at least 2".into()));
        }
        if values.len() != width * height {
            return Err(BenchError::InvalidRaster(format!(
                "expected {} values, found {}",
                width * height,
                values.len()
            )));
        }
        for (lo, hi) in [x_extent, y_extent] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(BenchError::InvalidRaster("extents must be finite with lo < hi".into()));
            }
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(BenchError::InvalidRaster("values must be finite".into()));
        }
        Ok(RasterGrid {
            width,
            height,
            x_extent,
            y_extent,
            values,
        })
    }

    /// Parses the CSV raster format and min-max normalizes the values to
    /// `[0, 1]`. A constant raster normalizes to all zeros.
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

        let (_, header) = lines.next().ok_or_else(|| parse_err(1, 1, "missing header"))?;
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err(
                1,
                1,
                format!("header needs 6 fields (width,height,x_lo,x_hi,y_lo,y_hi), found {}", fields.len()),
            ));
        }
        let count = |i: usize| -> Result<usize, BenchError> {
            fields[i]
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(1, i + 1, format!("`{}` is not a count", fields[i].trim())))
        };
        let real = |i: usize| -> Result<f64, BenchError> {
            let v = fields[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(1, i + 1, format!("`{}` is not a number", fields[i].trim())))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(1, i + 1, "extent must be finite"))
            }
        };
        let width = count(0)?;
        let height = count(1)?;
        let x_extent = (real(2)?, real(3)?);
        let y_extent = (real(4)?, real(5)?);
        if width < 2 || height < 2 {
            return Err(parse_err(1, 1, "width and height must be at least 2"));
        }
        if x_extent.0 >= x_extent.1 {
            return Err(parse_err(1, 3, "x_lo must be below x_hi"));
        }
        if y_extent.0 >= y_extent.1 {
            return Err(parse_err(1, 5, "y_lo must be below y_hi"));
        }
        if width.checked_mul(height).is_none_or(|n| n > 100_000_000) {
            return Err(parse_err(1, 1, "raster is too large"));
        }

        let mut values = Vec::with_capacity((width * height).min(1 << 16));
        let mut rows = 0;
        for (line_no, line) in lines {
            if rows == height {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(parse_err(line_no, 1, format!("expected {height} data rows, found more")));
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(parse_err(
                    line_no,
                    fields.len().min(width) + 1,
                    format!("expected {width} values, found {}", fields.len()),
                ));
            }
            for (c, f) in fields.iter().enumerate() {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line_no, c + 1, format!("`{}` is not a number", f.trim())))?;
                if !v.is_finite() {
                    return Err(parse_err(line_no, c + 1, "value must be finite"));
                }
                values.push(v);
            }
            rows += 1;
        }
        if rows < height {
            return Err(parse_err(rows + 2, 1, format!("expected {height} data rows, found {rows}")));
        }

        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        let span = hi - lo;
        let values = values
            .into_iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        RasterGrid::new(width, height, x_extent, y_extent, values)
    }

    /// Reads and parses a raster file.
    pub fn load(path: &std::path::Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        RasterGrid::parse(&text)
    }

    /// Serializes in the CSV raster format with six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "{},{},{},{},{},{}\n",
            self.width, self.height, self.x_extent.0, self.x_extent.1, self.y_extent.0, self.y_extent.1
        );
        for r in 0..self.height {
            for c in 0..self.width {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{:.6}", self.values[r * self.width + c]);
            }
            out.push('\n');
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn x_extent(&self) -> (f64, f64) {
        self.x_extent
    }

    pub fn y_extent(&self) -> (f64, f64) {
        self.y_extent
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn bounds(&self) -> DesignBox {
        DesignBox::new(
            vec![self.x_extent.0, self.y_extent.0],
            vec![self.x_extent.1, self.y_extent.1],
        )
    }

    /// Bilinear interpolation of the four surrounding nodes.
    pub fn eval(&self, x: &[f64]) -> Result<f64, BenchError> {
        let (px, py) = (x[0], x[1]);
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if x.len() != 2 || !inside(px, self.x_extent) || !inside(py, self.y_extent) {
            return Err(BenchError::OutOfExtent { x: px, y: py });
        }
        let u = (px - self.x_extent.0) / (self.x_extent.1 - self.x_extent.0) * (self.width - 1) as f64;
        let v = (py - self.y_extent.0) / (self.y_extent.1 - self.y_extent.0) * (self.height - 1) as f64;
        let c0 = (u.floor() as usize).min(self.width - 2);
        let r0 = (v.floor() as usize).min(self.height - 2);
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        let v00 = self.value(c0, r0);
        let v10 = self.value(c0 + 1, r0);
        let v01 = self.value(c0, r0 + 1);
        let v11 = self.value(c0 + 1, r0 + 1);
        Ok((1.0 - fu) * (1.0 - fv) * v00 + fu * (1.0 - fv) * v10 + (1.0 - fu) * fv * v01 + fu * fv * v11)
    }
}

/// Bilinear raster value at `x`.
pub fn raster_eval(grid: &RasterGrid, x: &[f64]) -> Result<f64, BenchError> {
    grid.eval(x)
}

fn normalized(width: usize, height: usize, f: impl Fn(f64, f64) -> f64) -> RasterGrid {
    let mut values = Vec::with_capacity((width * height).min(1 << 16));
    for r in 0..height {
        for c in 0..width {
            values.push(f(c as f64 / (width - 1) as f64, r as f64 / (height - 1) as f64));
        }
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let values = values.into_iter().map(|v| (v - lo) / (hi - lo)).collect();
    let grid = RasterGrid::new(width, height, (0.0, 1.0), (0.0, 1.0), values).expect("valid synthetic raster");
    // Round-trip through the text format so in-memory and shipped rasters agree.
    RasterGrid::parse(&grid.to_csv()).expect("synthetic raster parses")
}

/// Smooth surface with two crossing ridges on `[0, 1]²` (64 x 64).
pub fn two_ridge_raster() -> RasterGrid {
    normalized(64, 64, |x, y| {
        let wave = y - 0.3 - 0.15 * (2.0 * std::f64::consts::PI * x).sin();
        let diag = x + y - 1.25;
        (-wave * wave / (2.0 * 0.06 * 0.06)).exp() + 0.7 * (-diag * diag / (2.0 * 0.09 * 0.09)).exp()
    })
}

/// Several peaks of different heights plus fine speckle on `[0, 1]²` (80 x 80).
pub fn speckled_peaks_raster() -> RasterGrid {
    let peaks = [
        (0.2, 0.3, 0.05, 1.0),
        (0.7, 0.2, 0.04, 0.8),
        (0.5, 0.6, 0.08, 0.6),
        (0.85, 0.8, 0.03, 0.9),
        (0.15, 0.85, 0.06, 0.5),
        (0.4, 0.1, 0.03, 0.4),
    ];
    let mut rng = RngStream::new(0x5eed_0001);
    let speckle: Vec<f64> = (0..80 * 80).map(|_| rng.uniform()).collect();
    normalized(80, 80, move |x, y| {
        let base: f64 = peaks
            .iter()
            .map(|(px, py, s, h)| h * (-((x - px).powi(2) + (y - py).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        let c = (x * 79.0).round() as usize;
        let r = (y * 79.0).round() as usize;
        base + 0.05 * speckle[r * 80 + c]
    })
}

/// The true function of a benchmark.
#[derive(Debug, Clone)]
pub enum TestFunction {
    Alpine { dim: usize },
    Multihills(Multihills),
    Raster(Arc<RasterGrid>),
}

/// A test function with its design box and Gaussian observation noise.
#[derive(Debug, Clone)]
pub struct BlackBox {
    function: TestFunction,
    bounds: DesignBox,
    noise_std: f64,
}

impl BlackBox {
    /// `noise_std = None` uses 1% of the function's output range.
    pub fn new(function: TestFunction, bounds: DesignBox, noise_std: Option<f64>) -> Result<Self, BenchError> {
        let mut bb = BlackBox {
            function,
            bounds,
            noise_std: 0.0,
        };
        bb.noise_std = match noise_std {
            Some(s) if s.is_finite() && s >= 0.0 => s,
            Some(_) => return Err(BenchError::InvalidParams("noise must be finite and >= 0".into())),
            None => 0.01 * bb.output_range(),
        };
        Ok(bb)
    }

    /// Alpine-d on `[0, 10]^d`.
    pub fn alpine(dim: usize, noise_std: Option<f64>) -> Result<Self, BenchError> {
        BlackBox::new(TestFunction::Alpine { dim }, DesignBox::cube(dim, 0.0, 10.0), noise_std)
    }

    /// The default mixture on `[0, 1]²`.
    pub fn multihills(noise_std: Option<f64>) -> Result<Self, BenchError> {
        BlackBox::new(
            TestFunction::Multihills(Multihills::default_2d()),
            DesignBox::cube(2, 0.0, 1.0),
            noise_std,
        )
    }

    pub fn raster(grid: RasterGrid, noise_std: Option<f64>) -> Result<Self, BenchError> {
        let bounds = grid.bounds();
        BlackBox::new(TestFunction::Raster(Arc::new(grid)), bounds, noise_std)
    }

    pub fn bounds(&self) -> &DesignBox {
        &self.bounds
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    /// Noise-free value. Points are clamped into the box first.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut p = x.to_vec();
        self.bounds.clamp(&mut p);
        match &self.function {
            TestFunction::Alpine { .. } => alpine(&p),
            TestFunction::Multihills(m) => m.eval(&p),
            TestFunction::Raster(g) => g.eval(&p).expect("clamped into the extent"),
        }
    }

    /// `f(x) + η ξ` with `ξ` standard normal from `rng`.
    pub fn observe(&self, x: &[f64], rng: &mut RngStream) -> f64 {
        self.eval(x) + self.noise_std * rng.normal()
    }

    /// `max − min` over a dense quasi-uniform set and the box corners.
    pub fn output_range(&self) -> f64 {
        let pts = self.bounds.quasi_uniform(20_000);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let corners = self.bounds.grid(2);
        for m in [&pts, &corners] {
            for r in 0..m.rows() {
                let v = self.eval(m.row(r));
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        hi - lo
    }
}
