//! Detector gain, sensor noise, reference rotation and the lock-in low-pass.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{substream, STREAM_SENSOR};
use crate::series::{ComplexSeries, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Detector and amplifier gain (V/W).
    pub g_amp: f64,
    /// White sensor noise per quadrature at the lock-in input (V^2/Hz).
    #[serde(default)]
    pub noise_floor_psd: f64,
    /// Lock-in time constant (s).
    pub tau_la: f64,
    /// Effective sensor pole (rad/s); defaults to 1/tau_la.
    #[serde(default)]
    pub omega_lpf: Option<f64>,
    #[serde(default)]
    pub ref_phase: f64,
    /// Output and controller rate (Hz).
    pub fs_out: f64,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_la > 0.0) {
            return Err(Error::Config(format!("lock-in time constant must be positive, got {}", self.tau_la)));
        }
        if !(self.noise_floor_psd >= 0.0) {
            return Err(Error::Config("noise floor PSD must be >= 0".into()));
        }
        if !(self.fs_out > 0.0) || !self.g_amp.is_finite() {
            return Err(Error::Config("output rate must be positive and gain finite".into()));
        }
        if let Some(w) = self.omega_lpf {
            if !(w > 0.0) {
                return Err(Error::Config(format!("sensor pole must be positive, got {w}")));
            }
        }
        Ok(())
    }

    pub fn sensor_pole(&self) -> f64 {
        self.omega_lpf.unwrap_or(1.0 / self.tau_la)
    }
}

pub fn lockin_filter_response(omega: f64, tau: f64) -> Complex64 {
    Complex64::new(1.0, 0.0) / Complex64::new(1.0, omega * tau)
}

/// Zero-order-hold one-pole: y[i+1] = a y[i] + (1 - a) u[i], a = exp(-w dt).
#[derive(Debug, Clone, Copy)]
pub struct OnePole {
    a: f64,
    pub state: f64,
}

impl OnePole {
    pub fn new(omega: f64, dt: f64) -> Self {
        OnePole {
            a: (-omega * dt).exp(),
            state: 0.0,
        }
    }

    pub fn update(&mut self, input: f64) {
        self.state = self.a * self.state + (1.0 - self.a) * input;
    }

    /// Discrete response at angular frequency `omega` for step `dt`.
    pub fn response(&self, omega: f64, dt: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, -omega * dt);
        (1.0 - self.a) * z / (1.0 - self.a * z)
    }
}

/// Streaming lock-in: outputs the filtered quadratures available at the
/// current sample, then consumes the current input.
#[derive(Debug, Clone)]
pub struct LockIn<R: Rng> {
    gain: f64,
    rotation: Complex64,
    sigma: f64,
    x: OnePole,
    y: OnePole,
    rng: R,
}

impl<R: Rng> LockIn<R> {
    pub fn new(chain: &ChainConfig, rng: R) -> Self {
        let dt = 1.0 / chain.fs_out;
        LockIn {
            gain: chain.g_amp,
            rotation: Complex64::from_polar(1.0, chain.ref_phase),
            sigma: (chain.noise_floor_psd * chain.fs_out * 0.5).sqrt(),
            x: OnePole::new(chain.sensor_pole(), dt),
            y: OnePole::new(chain.sensor_pole(), dt),
            rng,
        }
    }

    pub fn output(&self) -> (f64, f64) {
        (self.x.state, self.y.state)
    }

    /// Consume one pair of omega_m power components (W).
    pub fn push(&mut self, x_w: f64, y_w: f64) {
        let mut z = Complex64::new(x_w, y_w) * self.gain;
        if self.sigma > 0.0 {
            let nx: f64 = self.rng.sample(StandardNormal);
            let ny: f64 = self.rng.sample(StandardNormal);
            z += Complex64::new(nx, ny) * self.sigma;
        }
        z *= self.rotation;
        self.x.update(z.re);
        self.y.update(z.im);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRecord {
    pub x: TimeSeries,
    pub y: TimeSeries,
}

/// Lock-in outputs for a record of omega_m components X + iY (W).
pub fn demodulate(env: &ComplexSeries, chain: &ChainConfig, seed: u64) -> Result<QuadratureRecord> {
    chain.validate()?;
    if (env.fs - chain.fs_out).abs() > 1e-9 * chain.fs_out {
        return Err(Error::Config(format!(
            "envelope rate {} Hz differs from the chain rate {} Hz",
            env.fs, chain.fs_out
        )));
    }
    let mut li = LockIn::new(chain, substream(seed, STREAM_SENSOR));
    let mut xs = Vec::with_capacity(env.len());
    let mut ys = Vec::with_capacity(env.len());
    for z in &env.samples {
        let (x, y) = li.output();
        xs.push(x);
        ys.push(y);
        li.push(z.re, z.im);
    }
    Ok(QuadratureRecord {
        x: TimeSeries::new(xs, env.fs, "V")?,
        y: TimeSeries::new(ys, env.fs, "V")?,
    })
}

/// Rotation that puts the resonance response on the Y axis, with Y falling
/// as the carrier frequency rises. Apply as (X + iY) e^{i theta}.
pub fn calibrate_phase(sweep: &[(f64, f64, f64)]) -> Result<f64> {
    if sweep.len() < 3 {
        return Err(Error::Calibration("phase sweep needs at least three points".into()));
    }
    let n = sweep.len() as f64;
    let (mx, my) = sweep.iter().fold((0.0, 0.0), |a, p| (a.0 + p.1 / n, a.1 + p.2 / n));
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for p in sweep {
        let (dx, dy) = (p.1 - mx, p.2 - my);
        cxx += dx * dx;
        cyy += dy * dy;
        cxy += dx * dy;
    }
    if cxx + cyy == 0.0 {
        return Err(Error::Calibration("sweep shows no response".into()));
    }
    let major = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
    let mut theta = std::f64::consts::FRAC_PI_2 - major;
    let rotated = |t: f64| -> Vec<f64> {
        let r = Complex64::from_polar(1.0, t);
        sweep.iter().map(|p| (Complex64::new(p.1, p.2) * r).im).collect()
    };
    let mw = sweep.iter().map(|p| p.0).sum::<f64>() / n;
    let corr = |ys: &[f64]| -> f64 {
        let m = ys.iter().sum::<f64>() / n;
        sweep.iter().zip(ys).map(|(p, y)| (p.0 - mw) * (y - m)).sum()
    };
    if corr(&rotated(theta)) > 0.0 {
        theta -= std::f64::consts::PI;
    }
    theta = (theta + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    let ys = rotated(theta);
    let crosses = ys.iter().any(|&y| y > 0.0) && ys.iter().any(|&y| y < 0.0);
    if !crosses {
        return Err(Error::Calibration("rotated error signal never changes sign; the sweep misses the resonance".into()));
    }
    Ok(theta)
}
