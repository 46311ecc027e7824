//! Repression diagnostics: first canonical correlation between two feature
//! sets and occlusion saliency maps.

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::{cross_covariance, matmul, pearson, solve_spd, top_eigenpair, Matrix};
use crate::network::{FeatureName, RepNet};
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq)]
pub struct CcaReport {
    pub correlation: f64,
    /// Two-sided Pearson t-test; `NaN` when `n < 3`.
    pub p_value: f64,
    pub n: usize,
    pub ridge: f64,
    /// Canonical direction for `x` (unit norm) and the matching `y` direction.
    pub x_weights: Vec<f64>,
    pub y_weights: Vec<f64>,
}

impl CcaReport {
    pub fn to_key_value(&self) -> String {
        format!(
            "correlation={}\np_value={}\nn={}\nridge={}\n",
            self.correlation, self.p_value, self.n, self.ridge
        )
    }
}

/// Two-sided p-value of a sample correlation `r` over `n` pairs.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    if n < 3 {
        return f64::NAN;
    }
    let r2 = r * r;
    if r2 >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r2)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// First canonical correlation of `x` (n×dx) and `y` (n×dy).
///
/// The `x` direction is the dominant eigenvector of
/// `Σxx⁻¹ Σxy Σyy⁻¹ Σyx` with `ridge·I` added to both auto-covariances; the
/// `y` direction is `Σyy⁻¹ Σyx w_x`, which is the dominant eigenvector of the
/// mirrored operator for the same eigenvalue. The reported correlation is
/// the Pearson coefficient of the two projections.
pub fn cca_first_correlation(x: &Matrix, y: &Matrix, ridge: f64) -> Result<CcaReport> {
    if x.rows() != y.rows() {
        return Err(Error::shape(format!(
            "cca inputs differ in sample count: {}x{} vs {}x{}",
            x.rows(),
            x.cols(),
            y.rows(),
            y.cols()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Param(format!("ridge must be non-negative, got {ridge}")));
    }
    let n = x.rows();
    let d = x.cols().max(y.cols());
    if n <= d {
        return Err(Error::InsufficientSamples(format!("cca needs n > d, got n={n}, d={d}")));
    }
    let mut sxx = cross_covariance(x, x)?;
    let mut syy = cross_covariance(y, y)?;
    let sxy = cross_covariance(x, y)?;
    sxx.add_diagonal(ridge);
    syy.add_diagonal(ridge);
    let singular = |e: Error| match e {
        Error::Numerical(msg) => Error::Numerical(format!("covariance singular after ridge {ridge}: {msg}")),
        other => other,
    };
    let a = solve_spd(&sxx, &sxy).map_err(singular)?; // Σxx⁻¹ Σxy
    let b = solve_spd(&syy, &sxy.transpose()).map_err(singular)?; // Σyy⁻¹ Σyx
    let op = matmul(&a, &b)?;
    let (_, x_weights) = top_eigenpair(&op)?;
    let y_weights = b.mul_vec(&x_weights)?;
    let px = x.mul_vec(&x_weights)?;
    let py = y.mul_vec(&y_weights)?;
    let correlation = pearson(&px, &py)?;
    Ok(CcaReport {
        correlation,
        p_value: correlation_p_value(correlation, n),
        n,
        ridge,
        x_weights,
        y_weights,
    })
}

/// Network features gathered for CCA between `F_SLS-1` and `F_SLS-2`.
pub fn repression_cca(net: &RepNet, dataset: &crate::data::Dataset, ridge: f64, exec: Exec) -> Result<CcaReport> {
    let x = net.collect_features(dataset, FeatureName::Sls1, exec)?;
    let y = net.collect_features(dataset, FeatureName::Sls2, exec)?;
    cca_first_correlation(&x, &y, ridge)
}

/// Something that maps an input vector to named features.
pub trait FeatureExtractor: Sync {
    fn extract(&self, input: &[f64], feature: FeatureName) -> Result<Vec<f64>>;
}

impl FeatureExtractor for RepNet {
    fn extract(&self, input: &[f64], feature: FeatureName) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.feature(feature).to_vec())
    }
}

/// Layout of the input being occluded. Vectors are 1-D strips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputExtent {
    Linear(usize),
    Grid { height: usize, width: usize },
}

impl InputExtent {
    pub fn len(self) -> usize {
        match self {
            InputExtent::Linear(n) => n,
            InputExtent::Grid { height, width } => height * width,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    fn short_side(self) -> usize {
        match self {
            InputExtent::Linear(n) => n,
            InputExtent::Grid { height, width } => height.min(width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub size: usize,
    pub stride: usize,
    pub fill: f64,
}

impl Occluder {
    /// `size = max(1, side/16)`, `stride = max(1, size/2)`, zero fill.
    pub fn default_for(extent: InputExtent) -> Self {
        let size = (extent.short_side() / 16).max(1);
        Self {
            size,
            stride: (size / 2).max(1),
            fill: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, one value per occluder position.
    pub values: Vec<f64>,
    pub occluder: Occluder,
    pub feature: FeatureName,
}

impl SaliencyMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|c| self.get(r, c).to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Plain (P2) PGM scaled so the maximum maps to 255.
    pub fn to_pgm(&self) -> String {
        let max = self.values.iter().copied().fold(0.0_f64, f64::max);
        let mut s = format!("P2\n{} {}\n255\n", self.cols, self.rows);
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|c| {
                    let v = if max > 0.0 {
                        (self.get(r, c) / max * 255.0).round()
                    } else {
                        0.0
                    };
                    (v as u8).to_string()
                })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

fn positions(extent: usize, size: usize, stride: usize) -> usize {
    (extent - size) / stride + 1
}

/// Slides a fill-valued occluder over `input` and records
/// `‖feature(occluded) − feature(input)‖₂` at each position.
pub fn occlusion_saliency<M: FeatureExtractor + ?Sized>(
    model: &M,
    input: &[f64],
    extent: InputExtent,
    feature: FeatureName,
    occluder: Occluder,
    exec: Exec,
) -> Result<SaliencyMap> {
    if input.len() != extent.len() {
        return Err(Error::shape(format!(
            "input has {} values, extent {:?} needs {}",
            input.len(),
            extent,
            extent.len()
        )));
    }
    if occluder.size == 0 || occluder.stride == 0 {
        return Err(Error::Param("occluder size and stride must be at least 1".into()));
    }
    let (height, width, box_h) = match extent {
        InputExtent::Linear(n) => (1, n, 1),
        InputExtent::Grid { height, width } => (height, width, occluder.size),
    };
    if occluder.size > width || box_h > height {
        return Err(Error::Param(format!(
            "occluder of size {} does not fit input extent {:?}",
            occluder.size, extent
        )));
    }
    let rows = if box_h == 1 && height == 1 {
        1
    } else {
        positions(height, box_h, occluder.stride)
    };
    let cols = positions(width, occluder.size, occluder.stride);
    let reference = model.extract(input, feature)?;
    let values: Vec<f64> = exec
        .map_range(rows * cols, |k| {
            let (r, c) = (k / cols, k % cols);
            let (top, left) = (r * occluder.stride, c * occluder.stride);
            let mut occluded = input.to_vec();
            for y in top..top + box_h {
                for x in left..left + occluder.size {
                    occluded[y * width + x] = occluder.fill;
                }
            }
            let f = model.extract(&occluded, feature)?;
            Ok(crate::linalg::squared_distance(&f, &reference).sqrt())
        })
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(SaliencyMap {
        rows,
        cols,
        values,
        occluder,
        feature,
    })
}
