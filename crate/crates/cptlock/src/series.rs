//! Uniformly sampled records.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A uniformly sampled record with a unit tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries<T = f64> {
    pub samples: Vec<T>,
    pub fs: f64,
    pub unit: String,
    pub t0: f64,
}

pub type ComplexSeries = TimeSeries<Complex64>;

impl<T: Copy> TimeSeries<T> {
    pub fn new(samples: Vec<T>, fs: f64, unit: impl Into<String>) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::Domain(format!("sample rate must be positive, got {fs}")));
        }
        if samples.is_empty() {
            return Err(Error::Domain("empty time series".into()));
        }
        Ok(TimeSeries {
            samples,
            fs,
            unit: unit.into(),
            t0: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fs
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.fs
    }

    /// Same sampling and unit, new samples.
    pub fn with_samples<U: Copy>(&self, samples: Vec<U>) -> TimeSeries<U> {
        TimeSeries {
            samples,
            fs: self.fs,
            unit: self.unit.clone(),
            t0: self.t0,
        }
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(&T) -> U) -> TimeSeries<U> {
        self.with_samples(self.samples.iter().map(f).collect())
    }

    pub fn slice(&self, start: usize, end: usize) -> TimeSeries<T> {
        TimeSeries {
            samples: self.samples[start..end].to_vec(),
            fs: self.fs,
            unit: self.unit.clone(),
            t0: self.time(start),
        }
    }
}

impl TimeSeries<f64> {
    pub fn zeros(n: usize, fs: f64, unit: impl Into<String>) -> Result<Self> {
        Self::new(vec![0.0; n], fs, unit)
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Block means over `factor` samples; the tail block may be shorter.
    pub fn decimate_mean(&self, factor: usize) -> TimeSeries<f64> {
        let factor = factor.max(1);
        if factor == 1 {
            return self.clone();
        }
        let samples = self
            .samples
            .chunks(factor)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        TimeSeries {
            samples,
            fs: self.fs / factor as f64,
            unit: self.unit.clone(),
            t0: self.t0 + 0.5 * (factor as f64 - 1.0) / self.fs,
        }
    }
}
