//! Declarative scenario files.
//!
//! A scenario is one TOML document. A top-level `include = "<file>"` pulls in
//! another document (typically the shared device block) whose tables are
//! merged underneath the including file, so local keys win.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::chain::ChainConfig;
use crate::device::{BiasPoint, CavityParams, CptParams};
use crate::error::{Error, Result};
use crate::noise::NoiseConfig;
use crate::rf::DrivePower;

const TAU: f64 = std::f64::consts::TAU;

fn default_kerr() -> f64 {
    0.0
}
fn default_ec() -> f64 {
    10e9
}
fn default_ej0() -> f64 {
    5e9
}
fn default_trunc() -> usize {
    10
}
fn default_span() -> f64 {
    140e6
}

/// Device parameters in Hz (angular rates are derived as 2 pi f).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub f_bare_hz: f64,
    pub kappa_int_hz: f64,
    pub kappa_ext_hz: f64,
    /// Resonance shift per photon (Hz).
    #[serde(default = "default_kerr")]
    pub kerr_hz: f64,
    #[serde(default = "default_ec")]
    pub ec_hz: f64,
    #[serde(default = "default_ej0")]
    pub ej0_hz: f64,
    #[serde(default = "default_trunc")]
    pub n_trunc: usize,
    /// Resonance span over the gate line at zero flux (Hz).
    #[serde(default = "default_span")]
    pub tunability_hz: f64,
}

impl DeviceSection {
    pub fn cavity(&self) -> Result<CavityParams> {
        let cpt = CptParams {
            ec_hz: self.ec_hz,
            ej0_hz: self.ej0_hz,
            n_trunc: self.n_trunc,
        };
        CavityParams::new(
            TAU * self.f_bare_hz,
            TAU * self.kappa_int_hz,
            TAU * self.kappa_ext_hz,
            TAU * self.kerr_hz,
            cpt,
        )?
        .calibrated(TAU * self.tunability_hz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSection {
    pub ng: f64,
    #[serde(default)]
    pub phi: f64,
}

impl BiasSection {
    pub fn point(&self) -> BiasPoint {
        BiasPoint::new(self.ng, self.phi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockPolicy {
    /// Carrier on the Kerr-shifted resonance, setpoint zero.
    KerrShifted,
    /// Carrier on the linear resonance; the setpoint is the static error
    /// signal there.
    Linear,
}

fn default_lock() -> LockPolicy {
    LockPolicy::KerrShifted
}
fn default_k_max() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSection {
    pub beta: f64,
    pub f_mod_hz: f64,
    /// Mean photon number at the lock point.
    #[serde(default)]
    pub photons: Option<f64>,
    /// Input power at the sample (W), instead of `photons`.
    #[serde(default)]
    pub input_watts: Option<f64>,
    #[serde(default = "default_lock")]
    pub lock: LockPolicy,
    /// Carrier offset from the lock point (Hz).
    #[serde(default)]
    pub detuning_hz: f64,
    /// Gate value whose resonance defines the lock point; defaults to the
    /// scenario bias.
    #[serde(default)]
    pub lock_ng: Option<f64>,
    #[serde(default = "default_k_max")]
    pub k_max: u32,
    #[serde(default)]
    pub second_order_terms: bool,
}

impl DriveSection {
    pub fn power(&self) -> Result<DrivePower> {
        match (self.photons, self.input_watts) {
            (Some(n), None) => Ok(DrivePower::Photons(n)),
            (None, Some(p)) => Ok(DrivePower::InputWatts(p)),
            _ => Err(Error::Config("drive needs exactly one of `photons` or `input_watts`".into())),
        }
    }
}

fn default_fs_out() -> f64 {
    100e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    /// Detector and amplifier gain (V/W).
    pub g_amp: f64,
    /// White sensor noise per quadrature (V^2/Hz).
    #[serde(default)]
    pub noise_floor_psd: f64,
    pub tau_la: f64,
    /// Sensor pole (Hz); defaults to 1/(2 pi tau_la).
    #[serde(default)]
    pub f_lpf_hz: Option<f64>,
    /// Phase picked up between the cavity and the lock-in (rad).
    #[serde(default)]
    pub delay_phase: f64,
    /// Reference phase (rad); ignored when `calibrate_phase` is set.
    #[serde(default)]
    pub ref_phase: f64,
    /// Pick the reference phase from a carrier sweep.
    #[serde(default)]
    pub calibrate_phase: bool,
    #[serde(default = "default_fs_out")]
    pub fs_out: f64,
}

impl ChainSection {
    /// Chain with the given total rotation.
    pub fn chain(&self, rotation: f64) -> ChainConfig {
        ChainConfig {
            g_amp: self.g_amp,
            noise_floor_psd: self.noise_floor_psd,
            tau_la: self.tau_la,
            omega_lpf: self.f_lpf_hz.map(|f| TAU * f),
            ref_phase: rotation,
            fs_out: self.fs_out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum GainRule {
    /// Analytic small-signal slope at the bias point.
    SmallSignal,
    /// Mean local slope over the intrinsic noise record.
    Effective,
    /// Least-squares slope of the static error signal over |dng| <= half_width.
    Window { half_width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum BandwidthRule {
    Fixed { f_prime_hz: f64 },
    /// Bandwidth where the bias-noise signal equals the sensor floor.
    SnrUnity,
}

fn default_gain_rule() -> GainRule {
    GainRule::Effective
}
fn default_actuator() -> f64 {
    1e6
}
fn default_clamp() -> f64 {
    0.3
}
fn default_lost() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSection {
    pub bandwidth: BandwidthRule,
    #[serde(default = "default_gain_rule")]
    pub gain: GainRule,
    #[serde(default = "default_actuator")]
    pub actuator_bw_hz: f64,
    #[serde(default = "default_clamp")]
    pub output_clamp: f64,
    #[serde(default = "default_lost")]
    pub lost_lock_fraction: f64,
    #[serde(default)]
    pub kd: f64,
}

fn default_segment() -> usize {
    1 << 14
}
fn default_overlap() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_segment")]
    pub segment_len: usize,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    /// Band for the suppression-crossover fits (Hz).
    #[serde(default)]
    pub rolloff_band_hz: Option<[f64; 2]>,
    /// Band for the charge-noise model fit (Hz).
    #[serde(default)]
    pub charge_fit_band_hz: Option<[f64; 2]>,
    /// Band for rms figures (Hz).
    #[serde(default)]
    pub rms_band_hz: Option<[f64; 2]>,
    /// Also run with the carrier far off resonance to measure the floor.
    #[serde(default)]
    pub floor_run: bool,
    /// Carrier offset of the floor run, in units of kappa_tot.
    #[serde(default = "default_floor_offset")]
    pub floor_offset_kappa: f64,
}

fn default_floor_offset() -> f64 {
    200.0
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            segment_len: default_segment(),
            overlap: default_overlap(),
            rolloff_band_hz: None,
            charge_fit_band_hz: None,
            rms_band_hz: None,
            floor_run: false,
            floor_offset_kappa: default_floor_offset(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub ng_start: f64,
    pub ng_stop: f64,
    pub points: usize,
    /// Tolerance on |n_g^app - lock_ng| for a point to count as captured.
    #[serde(default = "default_capture_tol")]
    pub capture_tol: f64,
}

fn default_capture_tol() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseSection {
    pub photons: Vec<f64>,
    /// Half-span of the carrier sweep in units of kappa_tot.
    pub span_kappa: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Static error signal against carrier detuning.
    Response,
    /// Open-loop record and its spectra.
    Open,
    /// Closed-loop record.
    Closed,
    /// Open and closed runs on the same noise.
    Paired,
    /// Slow gate ramp, open and closed.
    GateSweep,
}

fn default_decimate() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    /// Record length (s).
    #[serde(default)]
    pub duration: f64,
    pub device: DeviceSection,
    pub bias: BiasSection,
    pub drive: DriveSection,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub chain: ChainSection,
    #[serde(default, rename = "loop")]
    pub control: Option<LoopSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub response: Option<ResponseSection>,
    /// Artifact names to write; empty means all.
    #[serde(default)]
    pub outputs: Vec<String>,
    /// Block-mean factor applied to written trajectories.
    #[serde(default = "default_decimate")]
    pub decimate: usize,
    /// Lifts the quasi-static bandwidth check.
    #[serde(default)]
    pub oracle_mode: bool,
}

/// Source of included documents.
pub trait IncludeResolver {
    fn load(&self, name: &str) -> Result<String>;
}

/// Includes relative to a directory on disk.
pub struct DirResolver<'a>(pub &'a Path);

impl IncludeResolver for DirResolver<'_> {
    fn load(&self, name: &str) -> Result<String> {
        let path = self.0.join(name);
        std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))
    }
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve(text: &str, resolver: &dyn IncludeResolver, depth: usize) -> Result<Table> {
    if depth > 8 {
        return Err(Error::Config("include chain deeper than 8 levels".into()));
    }
    let mut doc: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("TOML: {e}")))?;
    match doc.remove("include") {
        None => Ok(doc),
        Some(Value::String(name)) => {
            let mut base = resolve(&resolver.load(&name)?, resolver, depth + 1)?;
            merge(&mut base, doc);
            Ok(base)
        }
        Some(other) => Err(Error::Config(format!("include must be a file name, got {other}"))),
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str, resolver: &dyn IncludeResolver) -> Result<Self> {
        let table = resolve(text, resolver, 0)?;
        let cfg: ScenarioConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, &DirResolver(dir))
    }

    /// Resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.chain.fs_out).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::Config(format!("scenario name {:?} must be [A-Za-z0-9_-]+", self.name)));
        }
        let cav = self.device.cavity()?;
        self.drive.power()?;
        self.chain.chain(0.0).validate()?;
        self.noise.validate()?;
        if self.decimate == 0 {
            return Err(Error::Config("decimate must be >= 1".into()));
        }
        let a = &self.analysis;
        if !a.segment_len.is_power_of_two() || a.segment_len < 16 {
            return Err(Error::Config("analysis.segment_len must be a power of two >= 16".into()));
        }
        if !(0.0..1.0).contains(&a.overlap) {
            return Err(Error::Config("analysis.overlap must lie in [0, 1)".into()));
        }
        for band in [a.rolloff_band_hz, a.charge_fit_band_hz, a.rms_band_hz].into_iter().flatten() {
            if !(band[0] > 0.0 && band[1] > band[0]) {
                return Err(Error::Config(format!("band {band:?} must satisfy 0 < lo < hi")));
            }
        }
        let needs_record = !matches!(self.mode, Mode::Response);
        if needs_record {
            if !(self.duration > 0.0) {
                return Err(Error::Config("duration must be positive".into()));
            }
            if self.samples() > self.noise.max_samples {
                return Err(Error::Config(format!(
                    "{} samples exceed noise.max_samples = {}",
                    self.samples(),
                    self.noise.max_samples
                )));
            }
            if !self.oracle_mode {
                let nyquist = 0.5 * self.chain.fs_out;
                let bw = self.noise.bandwidth_hz.map_or(nyquist, |b| b.min(nyquist));
                if TAU * bw > cav.kappa_tot() / 100.0 {
                    return Err(Error::Config(format!(
                        "noise bandwidth {bw:.1} Hz is above kappa_tot/100 = {:.1} Hz; \
                         set noise.bandwidth_hz lower or enable oracle_mode",
                        cav.kappa_tot() / 100.0 / TAU
                    )));
                }
            }
        }
        let needs_loop = matches!(self.mode, Mode::Closed | Mode::Paired | Mode::GateSweep);
        match (&self.control, needs_loop) {
            (None, true) => return Err(Error::Config(format!("mode {:?} needs a [loop] table", self.mode))),
            (Some(l), _) => {
                if let BandwidthRule::Fixed { f_prime_hz } = l.bandwidth {
                    if !(f_prime_hz > 0.0) {
                        return Err(Error::Config("loop bandwidth must be positive".into()));
                    }
                }
                if let GainRule::Window { half_width } = l.gain {
                    if !(half_width > 0.0) {
                        return Err(Error::Config("gain window half-width must be positive".into()));
                    }
                }
                if !(l.output_clamp > 0.0 && l.actuator_bw_hz > 0.0) {
                    return Err(Error::Config("output_clamp and actuator_bw_hz must be positive".into()));
                }
            }
            _ => {}
        }
        if self.mode == Mode::GateSweep {
            let s = self
                .sweep
                .as_ref()
                .ok_or_else(|| Error::Config("gate_sweep mode needs a [sweep] table".into()))?;
            if s.points < 2 || s.ng_stop == s.ng_start {
                return Err(Error::Config("sweep needs >= 2 points over a nonzero range".into()));
            }
            if self.samples() < 16 * s.points {
                return Err(Error::Config("sweep dwell is shorter than 16 samples per point".into()));
            }
        }
        if self.mode == Mode::Response {
            let r = self
                .response
                .as_ref()
                .ok_or_else(|| Error::Config("response mode needs a [response] table".into()))?;
            if r.photons.is_empty() || r.points < 3 || !(r.span_kappa > 0.0) {
                return Err(Error::Config("response needs photons, >= 3 points and a positive span".into()));
            }
        }
        Ok(())
    }
}
