//! Seeded bias-noise records: power-law charge and flux noise, parity
//! telegraph noise and scheduled gate jumps.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

pub const STREAM_CHARGE: u64 = 1;
pub const STREAM_FLUX: u64 = 2;
pub const STREAM_PARITY: u64 = 3;
pub const STREAM_SENSOR: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for (seed, stream): ChaCha12 keyed by the seed,
/// stream selected by a hash of the index.
pub fn substream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(stream));
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelegraphConfig {
    pub enabled: bool,
    pub rate_even_to_odd: f64,
    pub rate_odd_to_even: f64,
}

impl Default for TelegraphConfig {
    fn default() -> Self {
        TelegraphConfig {
            enabled: false,
            rate_even_to_odd: 1e3,
            rate_odd_to_even: 1e4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateJump {
    pub time: f64,
    pub delta_ng: f64,
}

fn default_max_samples() -> usize {
    1 << 24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Charge noise PSD at 1 Hz (e^2/Hz).
    #[serde(default)]
    pub charge_amp: f64,
    #[serde(default = "default_exponent")]
    pub charge_exponent: f64,
    /// Flux noise PSD at 1 Hz (flux quanta^2/Hz).
    #[serde(default)]
    pub flux_amp: f64,
    #[serde(default = "default_flux_exponent")]
    pub flux_exponent: f64,
    #[serde(default)]
    pub rtn: TelegraphConfig,
    #[serde(default)]
    pub jumps: Vec<GateJump>,
    #[serde(default)]
    pub seed: u64,
    /// Spectral support of the power-law records stops here when set (Hz).
    #[serde(default)]
    pub bandwidth_hz: Option<f64>,
    #[serde(default = "default_max_samples")]
    pub max_samples: usize,
}

fn default_exponent() -> f64 {
    1.0
}

fn default_flux_exponent() -> f64 {
    0.5
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            charge_amp: 0.0,
            charge_exponent: 1.0,
            flux_amp: 0.0,
            flux_exponent: 0.5,
            rtn: TelegraphConfig::default(),
            jumps: Vec::new(),
            seed: 0,
            bandwidth_hz: None,
            max_samples: default_max_samples(),
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, amp, exp) in [
            ("charge", self.charge_amp, self.charge_exponent),
            ("flux", self.flux_amp, self.flux_exponent),
        ] {
            if !(amp >= 0.0 && amp.is_finite()) {
                return Err(Error::Config(format!("{name} amplitude must be >= 0, got {amp}")));
            }
            if amp > 0.0 && !(exp > 0.0 && exp < 2.0) {
                return Err(Error::Config(format!("{name} exponent must lie in (0, 2), got {exp}")));
            }
        }
        if self.rtn.enabled && !(self.rtn.rate_even_to_odd > 0.0 && self.rtn.rate_odd_to_even > 0.0) {
            return Err(Error::Config("telegraph rates must be positive when enabled".into()));
        }
        if let Some(b) = self.bandwidth_hz {
            if !(b > 0.0) {
                return Err(Error::Config(format!("noise bandwidth must be positive, got {b}")));
            }
        }
        for j in &self.jumps {
            if !(j.time.is_finite() && j.delta_ng.is_finite()) {
                return Err(Error::Config("jump entries must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Shape of a power-law record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLaw {
    pub amp_at_1hz: f64,
    pub exponent: f64,
    pub cutoff_hz: Option<f64>,
}

impl PowerLaw {
    pub fn psd(&self, f: f64) -> f64 {
        match self.cutoff_hz {
            Some(c) if f > c => 0.0,
            _ => self.amp_at_1hz * f.powf(-self.exponent),
        }
    }
}

fn check_power_of_two(n: usize) -> Result<()> {
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::Config(format!("record length must be a power of two >= 2, got {n}")));
    }
    Ok(())
}

/// Zero-mean real record with one-sided PSD `shape`, by Hermitian spectral
/// shaping of complex white noise. The DC bin is zero.
pub fn power_law_record<R: Rng>(shape: PowerLaw, fs: f64, n: usize, rng: &mut R, unit: &str) -> Result<TimeSeries> {
    check_power_of_two(n)?;
    if !(fs > 0.0) {
        return Err(Error::Config(format!("sample rate must be positive, got {fs}")));
    }
    if !(shape.exponent > 0.0 && shape.exponent < 2.0) {
        return Err(Error::Config(format!("exponent must lie in (0, 2), got {}", shape.exponent)));
    }
    let df = fs / n as f64;
    let half = n / 2;
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for k in 1..half {
        let s = (shape.psd(k as f64 * df) * df * 0.25).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        spec[k] = Complex64::new(s * re, s * im);
        spec[n - k] = spec[k].conj();
    }
    let g: f64 = rng.sample(StandardNormal);
    spec[half] = Complex64::new((shape.psd(half as f64 * df) * df * 0.5).sqrt() * g, 0.0);
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    TimeSeries::new(spec.into_iter().map(|z| z.re).collect(), fs, unit)
}

/// Power-law record from a bare seed (stream 0).
pub fn power_law_noise(amp_at_1hz: f64, exponent: f64, fs: f64, n_samples: usize, seed: u64) -> Result<TimeSeries> {
    let mut rng = substream(seed, 0);
    power_law_record(
        PowerLaw {
            amp_at_1hz,
            exponent,
            cutoff_hz: None,
        },
        fs,
        n_samples,
        &mut rng,
        "1",
    )
}

pub fn telegraph_record<R: Rng>(rate_01: f64, rate_10: f64, fs: f64, n: usize, rng: &mut R) -> Result<TimeSeries> {
    if !(rate_01 >= 0.0 && rate_10 >= 0.0) {
        return Err(Error::Config("telegraph rates must be >= 0".into()));
    }
    if rate_01 >= 0.5 * fs || rate_10 >= 0.5 * fs {
        return Err(Error::Config(format!(
            "telegraph rates ({rate_01}, {rate_10}) Hz are not resolvable at fs = {fs} Hz"
        )));
    }
    let total = rate_01 + rate_10;
    let (p01, p10, occupancy) = if total > 0.0 {
        let decay = -(-total / fs).exp_m1();
        (rate_01 / total * decay, rate_10 / total * decay, rate_01 / total)
    } else {
        (0.0, 0.0, 0.0)
    };
    let mut state = rng.random::<f64>() < occupancy;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(if state { 1.0 } else { 0.0 });
        let u: f64 = rng.random();
        if state {
            if u < p10 {
                state = false;
            }
        } else if u < p01 {
            state = true;
        }
    }
    TimeSeries::new(out, fs, "parity")
}

/// Two-state Markov record with values in {0, 1}.
pub fn telegraph_noise(rate_01: f64, rate_10: f64, fs: f64, n_samples: usize, seed: u64) -> Result<TimeSeries> {
    telegraph_record(rate_01, rate_10, fs, n_samples, &mut substream(seed, 0))
}

/// One-sided PSD of a {0,1} telegraph with the given rates.
pub fn telegraph_psd(rate_01: f64, rate_10: f64, f: f64) -> f64 {
    let r = rate_01 + rate_10;
    let p = rate_01 / r;
    let w = 2.0 * std::f64::consts::PI * f;
    4.0 * p * (1.0 - p) * r / (r * r + w * w)
}

#[derive(Debug, Clone)]
pub struct BiasNoise {
    pub delta_ng: TimeSeries,
    pub parity: TimeSeries,
    pub delta_flux: TimeSeries,
    pub warnings: Vec<String>,
}

fn synth_length(n: usize) -> usize {
    n.next_power_of_two().max(2)
}

/// Intrinsic bias records for a run of `duration` seconds at `fs`.
pub fn compose_bias_noise(cfg: &NoiseConfig, fs: f64, duration: f64) -> Result<BiasNoise> {
    cfg.validate()?;
    if !(fs > 0.0 && duration > 0.0) {
        return Err(Error::Config("sample rate and duration must be positive".into()));
    }
    let n = (duration * fs).round() as usize;
    if n == 0 {
        return Err(Error::Config("run shorter than one sample".into()));
    }
    if n > cfg.max_samples {
        return Err(Error::Config(format!(
            "{n} samples exceed the configured cap of {}",
            cfg.max_samples
        )));
    }
    let m = synth_length(n);
    let mut warnings = Vec::new();

    let power_law = |amp: f64, exponent: f64, stream: u64, unit: &str| -> Result<Vec<f64>> {
        if amp == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let shape = PowerLaw {
            amp_at_1hz: amp,
            exponent,
            cutoff_hz: cfg.bandwidth_hz,
        };
        let mut rng = substream(cfg.seed, stream);
        let mut s = power_law_record(shape, fs, m, &mut rng, unit)?.samples;
        s.truncate(n);
        Ok(s)
    };

    let mut ng = power_law(cfg.charge_amp, cfg.charge_exponent, STREAM_CHARGE, "e")?;
    let flux = power_law(cfg.flux_amp, cfg.flux_exponent, STREAM_FLUX, "flux_quanta")?;

    let mut steps: Vec<(usize, f64)> = Vec::new();
    for j in &cfg.jumps {
        let idx = (j.time * fs).round().max(0.0) as usize;
        if let Some(prev) = steps.iter_mut().find(|(i, _)| *i == idx) {
            let msg = format!(
                "jumps at t = {} s overlap on sample {idx}; keeping the later entry ({} over {})",
                j.time, j.delta_ng, prev.1
            );
            log::warn!("{msg}");
            warnings.push(msg);
            prev.1 = j.delta_ng;
        } else {
            steps.push((idx, j.delta_ng));
        }
    }
    for (idx, d) in steps {
        for v in ng.iter_mut().skip(idx) {
            *v += d;
        }
    }

    let parity = if cfg.rtn.enabled {
        let mut rng = substream(cfg.seed, STREAM_PARITY);
        telegraph_record(cfg.rtn.rate_even_to_odd, cfg.rtn.rate_odd_to_even, fs, n, &mut rng)?.samples
    } else {
        vec![0.0; n]
    };

    Ok(BiasNoise {
        delta_ng: TimeSeries::new(ng, fs, "e")?,
        parity: TimeSeries::new(parity, fs, "parity")?,
        delta_flux: TimeSeries::new(flux, fs, "flux_quanta")?,
        warnings,
    })
}

const MAGIC: &[u8; 4] = b"PLNS";

/// Compact record: "PLNS", fs (f64 LE), N (u32 LE), then N f64 LE samples.
pub fn write_binary(path: &Path, series: &TimeSeries) -> Result<()> {
    let n = u32::try_from(series.len()).map_err(|_| Error::Domain("record too long for the binary format".into()))?;
    let mut buf = Vec::with_capacity(16 + 8 * series.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&series.fs.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    for v in &series.samples {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_binary(path: &Path) -> Result<TimeSeries> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Config(format!("{} is not a PLNS record", path.display())));
    }
    let fs = f64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * n {
        return Err(Error::Config(format!(
            "{}: header announces {n} samples but payload holds {}",
            path.display(),
            (bytes.len() - 16) / 8
        )));
    }
    let samples = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    TimeSeries::new(samples, fs, "1")
}
