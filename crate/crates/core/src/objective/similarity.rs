use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMetric {
    Mse,
    #[default]
    Ncc,
}

impl std::str::FromStr for SimMetric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(SimMetric::Mse),
            "ncc" => Ok(SimMetric::Ncc),
            other => Err(format!("unknown metric `{other}` (expected mse or ncc)")),
        }
    }
}

/// Variance below which NCC is defined as zero.
pub const NCC_MIN_VARIANCE: f64 = 1e-12;

pub fn mse(a: &Volume3, b: &Volume3) -> Result<f64> {
    a.grid().check_same_dims(b.grid(), "mse")?;
    Ok(mse_slices(a.data(), b.data()))
}

pub fn ncc(a: &Volume3, b: &Volume3) -> Result<f64> {
    a.grid().check_same_dims(b.grid(), "ncc")?;
    Ok(NccStats::new(a.data(), b.data()).value())
}

pub(crate) fn mse_slices(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

pub(crate) struct NccStats {
    mean_a: f64,
    mean_b: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
    n: usize,
}

impl NccStats {
    pub(crate) fn new(a: &[f64], b: &[f64]) -> Self {
        let n = a.len();
        let mean_a = a.iter().sum::<f64>() / n as f64;
        let mean_b = b.iter().sum::<f64>() / n as f64;
        let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let da = x - mean_a;
            let db = y - mean_b;
            saa += da * da;
            sbb += db * db;
            sab += da * db;
        }
        Self {
            mean_a,
            mean_b,
            saa,
            sbb,
            sab,
            n,
        }
    }

    fn degenerate(&self) -> bool {
        let n = self.n as f64;
        self.saa / n < NCC_MIN_VARIANCE || self.sbb / n < NCC_MIN_VARIANCE
    }

    pub(crate) fn value(&self) -> f64 {
        if self.degenerate() {
            return 0.0;
        }
        (self.sab / (self.saa * self.sbb).sqrt()).clamp(-1.0, 1.0)
    }

    /// Gradient of `1 − ncc` with respect to each entry of `a`.
    pub(crate) fn loss_gradient(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        if self.degenerate() {
            return vec![0.0; a.len()];
        }
        let norm = (self.saa * self.sbb).sqrt();
        let r = self.sab / norm;
        a.iter()
            .zip(b)
            .map(|(x, y)| -((y - self.mean_b) / norm - r * (x - self.mean_a) / self.saa))
            .collect()
    }
}

/// Similarity loss (MSE or `1 − NCC`) of `warped` against `fixed`, and its
/// gradient with respect to `warped`.
pub(crate) fn similarity_with_gradient(metric: SimMetric, warped: &[f64], fixed: &[f64]) -> (f64, Vec<f64>) {
    match metric {
        SimMetric::Mse => {
            let n = warped.len() as f64;
            let grad = warped.iter().zip(fixed).map(|(w, f)| 2.0 * (w - f) / n).collect();
            (mse_slices(warped, fixed), grad)
        }
        SimMetric::Ncc => {
            let stats = NccStats::new(warped, fixed);
            (1.0 - stats.value(), stats.loss_gradient(warped, fixed))
        }
    }
}

pub(crate) fn similarity(metric: SimMetric, warped: &[f64], fixed: &[f64]) -> f64 {
    match metric {
        SimMetric::Mse => mse_slices(warped, fixed),
        SimMetric::Ncc => 1.0 - NccStats::new(warped, fixed).value(),
    }
}

pub(crate) fn check_grids(a: &Volume3, b: &Volume3) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::GridMismatch(format!(
            "moving {:?} vs fixed {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}
