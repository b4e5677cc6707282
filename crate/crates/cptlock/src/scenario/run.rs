use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{BandwidthRule, GainRule, LockPolicy, Mode, ScenarioConfig};
use crate::chain::{calibrate_phase, ChainConfig};
use crate::control::{run_closed_loop, LoopConfig, LoopInputs, LoopRun};
use crate::device::{resonant_frequency, BiasPoint, CavityParams, Parity, ResonanceTable};
use crate::error::{Error, Result};
use crate::noise::{compose_bias_noise, BiasNoise};
use crate::rf::{kerr_photon_number, open_loop_gain, reflection_coefficient, BeatKernel, DriveConfig, KerrTracker};
use crate::series::TimeSeries;
use crate::spectral::{
    extract_charge_psd, fit_pole_crossover, fit_powerlaw_plus_lorentzian, fit_one_pole, raw_crossing, rms_over_band,
    welch_psd, Corner, NoiseFit, PoleShape, PsdEstimate, Window,
};

const TAU: f64 = std::f64::consts::TAU;

/// Numeric table with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    pub config_hash: String,
    pub trajectories: BTreeMap<String, TimeSeries>,
    pub psds: BTreeMap<String, PsdEstimate>,
    pub tables: BTreeMap<String, Table>,
    pub summary: BTreeMap<String, Value>,
    pub lost_lock: bool,
    pub warnings: Vec<String>,
}

impl ScenarioResult {
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.summary.get(key).and_then(Value::as_f64)
    }
}

/// Everything derived from the configuration before any record is stepped.
pub struct Setup {
    pub cav: CavityParams,
    pub table: ResonanceTable,
    pub drive: DriveConfig,
    pub chain: ChainConfig,
    pub bias0: BiasPoint,
    pub lock_ng: f64,
    pub omega0_lock: f64,
    pub y_ref: f64,
    pub phase_table: Option<Table>,
}

impl Setup {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let cav = cfg.device.cavity()?;
        let bias0 = cfg.bias.point();
        let lock_ng = cfg.drive.lock_ng.unwrap_or(bias0.ng);
        let omega0_lock = resonant_frequency(BiasPoint::new(lock_ng, bias0.phi), &cav, Parity::Even)?;
        let mut drive = DriveConfig::new(omega0_lock, cfg.drive.beta, TAU * cfg.drive.f_mod_hz, cfg.drive.power()?);
        drive.k_max = cfg.drive.k_max;
        drive.second_order_terms = cfg.drive.second_order_terms;
        let photons = drive.photon_number(&cav);
        let shift = match cfg.drive.lock {
            LockPolicy::KerrShifted => cav.kerr_k * photons,
            LockPolicy::Linear => 0.0,
        };
        drive.omega_c = omega0_lock + shift + TAU * cfg.drive.detuning_hz;
        drive.validate(&cav)?;

        let with_flux = cfg.noise.flux_amp > 0.0;
        let table = ResonanceTable::build(&cav, bias0.phi, 1024, with_flux)?;

        let (rotation, phase_table) = if cfg.chain.calibrate_phase {
            let (theta, t) = phase_calibration(&cav, &drive, cfg.chain.g_amp, cfg.chain.delay_phase, omega0_lock)?;
            (cfg.chain.delay_phase + theta, Some(t))
        } else {
            (cfg.chain.delay_phase + cfg.chain.ref_phase, None)
        };
        let chain = cfg.chain.chain(rotation);
        chain.validate()?;

        let mut s = Setup {
            cav,
            table,
            drive,
            chain,
            bias0,
            lock_ng,
            omega0_lock,
            y_ref: 0.0,
            phase_table,
        };
        if cfg.drive.lock == LockPolicy::Linear {
            s.y_ref = s.static_y(lock_ng)?;
        }
        Ok(s)
    }

    /// Lock-in (X, Y) in V for a static resonance offset, on the low Kerr branch.
    pub fn static_quadratures(&self, delta: f64) -> Result<(f64, f64)> {
        lockin_quadratures(&self.cav, &self.drive, &self.chain, delta)
    }

    /// Static lock-in Y (V) at total gate `ng`.
    pub fn static_y(&self, ng: f64) -> Result<f64> {
        let w0 = self.table.omega(ng, self.bias0.phi - self.table.phi0(), Parity::Even);
        Ok(self.static_quadratures(w0 - self.drive.omega_c)?.1)
    }

    fn slope(&self, ng: f64) -> Result<f64> {
        let h = 1e-5;
        Ok((self.static_y(ng + h)? - self.static_y(ng - h)?) / (2.0 * h))
    }

    /// Open-loop gain (V per unit gate) by the configured rule.
    pub fn gain(&self, rule: GainRule, noise: &BiasNoise) -> Result<f64> {
        let b0 = self.bias0.ng;
        match rule {
            GainRule::SmallSignal => self.slope(b0),
            GainRule::Effective => {
                let x = &noise.delta_ng.samples;
                let stride = (x.len() / 65_536).max(1);
                let mut sum = 0.0;
                let mut count = 0usize;
                for v in x.iter().step_by(stride) {
                    sum += self.slope(b0 + v)?;
                    count += 1;
                }
                Ok(sum / count as f64)
            }
            GainRule::Window { half_width } => {
                let n = 201;
                let mut sxy = 0.0;
                let mut sxx = 0.0;
                let pts: Vec<(f64, f64)> = (0..n)
                    .map(|i| {
                        let d = half_width * (2.0 * i as f64 / (n - 1) as f64 - 1.0);
                        self.static_y(b0 + d).map(|y| (d, y))
                    })
                    .collect::<Result<_>>()?;
                let ym = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
                for (d, y) in pts {
                    sxy += d * (y - ym);
                    sxx += d * d;
                }
                Ok(sxy / sxx)
            }
        }
    }

    pub fn inputs<'a>(&'a self, noise: &'a BiasNoise, sweep: Option<&'a TimeSeries>, seed: u64) -> LoopInputs<'a> {
        LoopInputs {
            cav: &self.cav,
            table: &self.table,
            drive: &self.drive,
            chain: &self.chain,
            bias0: self.bias0,
            noise,
            sweep,
            seed,
        }
    }
}

fn lockin_quadratures(cav: &CavityParams, drive: &DriveConfig, chain: &ChainConfig, delta: f64) -> Result<(f64, f64)> {
    let eff = if cav.kerr_k != 0.0 {
        delta + cav.kerr_k * kerr_photon_number(delta, cav, drive)?.n
    } else {
        delta
    };
    let (x, y) = BeatKernel::new(cav, drive).eval(eff, cav);
    let z = Complex64::new(x, y) * chain.g_amp * Complex64::from_polar(1.0, chain.ref_phase);
    Ok((z.re, z.im))
}

/// Carrier sweep through the resonance with the cable delay applied; the
/// returned angle rotates the measured quadratures onto Y.
fn phase_calibration(
    cav: &CavityParams,
    drive: &DriveConfig,
    g_amp: f64,
    delay: f64,
    omega0: f64,
) -> Result<(f64, Table)> {
    let kt = cav.kappa_tot();
    let mut d = *drive;
    let mut sweep = Vec::new();
    let mut tracker = KerrTracker::new(cav, drive);
    for i in 0..=200 {
        let wc = drive.omega_c + kt * (-3.0 + 6.0 * i as f64 / 200.0);
        d.omega_c = wc;
        let delta = omega0 - wc;
        let eff = delta + cav.kerr_k * if cav.kerr_k != 0.0 { tracker.solve(delta, cav)?.n } else { 0.0 };
        let (x, y) = BeatKernel::new(cav, &d).eval(eff, cav);
        let z = Complex64::new(x, y) * g_amp * Complex64::from_polar(1.0, delay);
        sweep.push((wc, z.re, z.im));
    }
    let theta = calibrate_phase(&sweep)?;
    let mut t = Table::new(&["detuning_hz", "x_raw", "y_raw", "x_cal", "y_cal"]);
    let rot = Complex64::from_polar(1.0, theta);
    for (wc, x, y) in &sweep {
        let z = Complex64::new(*x, *y) * rot;
        t.push(vec![(wc - drive.omega_c) / TAU, *x, *y, z.re, z.im]);
    }
    Ok((theta, t))
}

fn loop_config(cfg: &ScenarioConfig, setup: &Setup, g0: f64) -> Result<(LoopConfig, f64)> {
    let l = cfg
        .control
        .as_ref()
        .ok_or_else(|| Error::Config("closed-loop mode needs a [loop] table".into()))?;
    let omega_prime = match l.bandwidth {
        BandwidthRule::Fixed { f_prime_hz } => TAU * f_prime_hz,
        BandwidthRule::SnrUnity => {
            let floor = setup.chain.noise_floor_psd;
            let (a, alpha) = (cfg.noise.charge_amp, cfg.noise.charge_exponent);
            if !(floor > 0.0 && a > 0.0 && alpha > 0.0) {
                return Err(Error::Config(
                    "the snr_unity bandwidth rule needs a sensor floor and a power-law charge noise".into(),
                ));
            }
            TAU * (g0 * g0 * a / floor).powf(1.0 / alpha)
        }
    };
    let mut lc = LoopConfig::new(omega_prime, setup.chain.sensor_pole(), g0, 1.0 / setup.chain.fs_out);
    lc.y_ref = setup.y_ref;
    lc.actuator_bw = TAU * l.actuator_bw_hz;
    lc.output_clamp = l.output_clamp;
    lc.lost_lock_fraction = l.lost_lock_fraction;
    lc.kd = l.kd;
    lc.validate()?;
    Ok((lc, omega_prime / TAU))
}

struct Builder {
    trajectories: BTreeMap<String, TimeSeries>,
    psds: BTreeMap<String, PsdEstimate>,
    tables: BTreeMap<String, Table>,
    summary: BTreeMap<String, Value>,
    warnings: Vec<String>,
    decimate: usize,
}

impl Builder {
    fn trajectory(&mut self, name: &str, s: &TimeSeries) {
        let s = if self.decimate > 1 { s.decimate_mean(self.decimate) } else { s.clone() };
        self.trajectories.insert(name.to_string(), s);
    }

    fn set(&mut self, key: &str, v: Value) {
        self.summary.insert(key.to_string(), v);
    }

    fn num(&mut self, key: &str, v: f64) {
        // JSON has no NaN; missing values are reported as null
        self.set(key, if v.is_finite() { json!(v) } else { Value::Null });
    }
}

fn psd(cfg: &ScenarioConfig, s: &TimeSeries) -> Result<PsdEstimate> {
    let seg = cfg.analysis.segment_len.min(s.len().next_power_of_two() / 2).max(16);
    welch_psd(s, seg, cfg.analysis.overlap, Window::Hann)
}

fn ratio_db(num: &PsdEstimate, den: &PsdEstimate) -> Vec<f64> {
    num.values
        .iter()
        .zip(&den.values)
        .map(|(a, b)| if *a > 0.0 && *b > 0.0 { 10.0 * (a / b).log10() } else { f64::NAN })
        .collect()
}

fn add(a: &TimeSeries, b: &TimeSeries) -> TimeSeries {
    a.with_samples(a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn record_fit(b: &mut Builder, prefix: &str, fit: &NoiseFit) {
    b.num(&format!("{prefix}_amp_at_1hz"), fit.amp_at_1hz);
    b.num(&format!("{prefix}_exponent"), fit.exponent);
    b.num(&format!("{prefix}_plateau"), fit.plateau);
    b.num(&format!("{prefix}_residual_db"), fit.residual_db);
    match fit.corner {
        Corner::Resolved(f) => b.num(&format!("{prefix}_corner_hz"), f),
        Corner::Unresolved => b.set(&format!("{prefix}_corner_hz"), json!("unresolved")),
    }
}

/// Runs the pipeline the configuration's mode calls for.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    let setup = Setup::new(cfg)?;
    let mut b = Builder {
        trajectories: BTreeMap::new(),
        psds: BTreeMap::new(),
        tables: BTreeMap::new(),
        summary: BTreeMap::new(),
        warnings: Vec::new(),
        decimate: cfg.decimate,
    };
    b.set("scenario", json!(cfg.name));
    b.set("seed", json!(cfg.seed));
    b.set("mode", serde_json::to_value(cfg.mode).unwrap_or(Value::Null));
    b.num("photons", setup.drive.photon_number(&setup.cav));
    b.num("omega_c_hz", setup.drive.omega_c / TAU);
    b.num("omega0_lock_hz", setup.omega0_lock / TAU);
    b.num("kappa_tot_hz", setup.cav.kappa_tot() / TAU);
    b.num("f_lpf_hz", setup.chain.sensor_pole() / TAU);
    b.num("ref_rotation_rad", setup.chain.ref_phase);
    if let Some(t) = &setup.phase_table {
        b.tables.insert("phase_sweep".into(), t.clone());
    }

    let lost_lock = match cfg.mode {
        Mode::Response => {
            response(cfg, &setup, &mut b)?;
            false
        }
        Mode::Open => {
            let noise = noise(cfg)?;
            open(cfg, &setup, &noise, &mut b)?;
            false
        }
        Mode::Closed => {
            let noise = noise(cfg)?;
            closed(cfg, &setup, &noise, &mut b)?
        }
        Mode::Paired => {
            let noise = noise(cfg)?;
            paired(cfg, &setup, &noise, &mut b)?
        }
        Mode::GateSweep => {
            let noise = noise(cfg)?;
            gate_sweep(cfg, &setup, &noise, &mut b)?
        }
    };
    b.set("lost_lock", json!(lost_lock));
    let mut warnings = b.warnings;
    warnings.sort();
    warnings.dedup();
    b.summary.insert("warnings".into(), json!(warnings));
    Ok(ScenarioResult {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        trajectories: b.trajectories,
        psds: b.psds,
        tables: b.tables,
        summary: b.summary,
        lost_lock,
        warnings,
    })
}

fn noise(cfg: &ScenarioConfig) -> Result<BiasNoise> {
    let mut n = cfg.noise.clone();
    n.seed = cfg.seed;
    compose_bias_noise(&n, cfg.chain.fs_out, cfg.duration)
}

fn response(cfg: &ScenarioConfig, setup: &Setup, b: &mut Builder) -> Result<()> {
    let r = cfg.response.as_ref().expect("validated");
    let cav = &setup.cav;
    let kt = cav.kappa_tot();
    let mut names = vec!["detuning_hz".to_string()];
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let offsets: Vec<f64> = (0..r.points)
        .map(|i| kt * r.span_kappa * (2.0 * i as f64 / (r.points - 1) as f64 - 1.0))
        .collect();
    for &n in &r.photons {
        let mut drive = setup.drive;
        drive.power = crate::rf::DrivePower::Photons(n);
        // the carrier moves, so the photon flux is recomputed per point
        let centre = setup.omega0_lock + cav.kerr_k * n;
        let mut tracker = None::<KerrTracker>;
        let mut ys = Vec::with_capacity(r.points);
        let mut xs = Vec::with_capacity(r.points);
        for &o in &offsets {
            drive.omega_c = centre + o;
            let delta = setup.omega0_lock - drive.omega_c;
            let t = tracker.get_or_insert_with(|| KerrTracker::new(cav, &drive));
            let eff = if cav.kerr_k != 0.0 { delta + cav.kerr_k * t.solve(delta, cav)?.n } else { delta };
            let (x, y) = BeatKernel::new(cav, &drive).eval(eff, cav);
            let z = Complex64::new(x, y) * setup.chain.g_amp * Complex64::from_polar(1.0, setup.chain.ref_phase);
            xs.push(z.re);
            ys.push(z.im);
        }
        let det: Vec<f64> = offsets.iter().map(|o| (cav.kerr_k * n + o) / TAU).collect();
        let label = format!("n{}", fmt_num(n));
        if let Some(z) = zero_crossing(&det, &ys) {
            b.num(&format!("{label}_zero_crossing_hz"), z);
        }
        b.num(&format!("{label}_expected_zero_hz"), cav.kerr_k * n / TAU);
        let (imax, imin) = extrema(&ys);
        let fmax = parabolic_peak(&det, &ys, imax);
        let fmin = parabolic_peak(&det, &ys, imin);
        b.num(&format!("{label}_extrema_separation_hz"), (fmax - fmin).abs());
        b.num(&format!("{label}_peak_to_peak_v"), ys[imax] - ys[imin]);
        names.push(format!("y_{label}"));
        cols.push(ys);
        names.push(format!("x_{label}"));
        cols.push(xs);
    }
    let mut t = Table {
        columns: names,
        rows: Vec::with_capacity(r.points),
    };
    for (i, o) in offsets.iter().enumerate() {
        let mut row = vec![o / TAU];
        row.extend(cols.iter().map(|c| c[i]));
        t.push(row);
    }
    b.tables.insert("response".into(), t);
    b.num("kappa_tot_hz", kt / TAU);
    Ok(())
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}").replace('.', "p")
    }
}

fn zero_crossing(x: &[f64], y: &[f64]) -> Option<f64> {
    // crossing nearest the middle of the sweep
    let mid = x.len() / 2;
    (0..x.len() - 1)
        .filter(|&i| y[i] == 0.0 || y[i].signum() != y[i + 1].signum())
        .min_by_key(|&i| (i as i64 - mid as i64).abs())
        .map(|i| x[i] - y[i] * (x[i + 1] - x[i]) / (y[i + 1] - y[i]))
}

fn extrema(y: &[f64]) -> (usize, usize) {
    let imax = (0..y.len()).max_by(|&a, &b| y[a].partial_cmp(&y[b]).unwrap()).unwrap();
    let imin = (0..y.len()).min_by(|&a, &b| y[a].partial_cmp(&y[b]).unwrap()).unwrap();
    (imax, imin)
}

fn parabolic_peak(x: &[f64], y: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= y.len() {
        return x[i];
    }
    let (a, b, c) = (y[i - 1], y[i], y[i + 1]);
    let den = a - 2.0 * b + c;
    if den == 0.0 {
        return x[i];
    }
    x[i] + 0.5 * (a - c) / den * (x[i + 1] - x[i])
}

fn open_run(setup: &Setup, noise: &BiasNoise, seed: u64) -> Result<LoopRun> {
    run_closed_loop(&setup.inputs(noise, None, seed), None)
}

/// Open-loop spectra: error signal, optional floor, extracted charge noise.
fn open_spectra(cfg: &ScenarioConfig, setup: &Setup, noise: &BiasNoise, run: &LoopRun, g0: f64, b: &mut Builder) -> Result<Option<NoiseFit>> {
    let y_open = psd(cfg, &run.y)?;
    let floor = if cfg.analysis.floor_run {
        let mut off = Setup {
            drive: setup.drive,
            ..clone_setup(setup)
        };
        off.drive.omega_c += cfg.analysis.floor_offset_kappa * setup.cav.kappa_tot();
        let fr = open_run(&off, noise, cfg.seed)?;
        let fp = psd(cfg, &fr.y)?;
        let top = 0.8 * 0.5 * cfg.chain.fs_out;
        if let Ok((s0, fc)) = fit_one_pole(&fp, (2.0 * fp.resolution(), top)) {
            b.num("floor_level", s0);
            b.num("floor_corner_hz", fc);
        }
        b.trajectory("y_floor", &fr.y);
        b.psds.insert("y_floor".into(), fp.clone());
        Some(fp)
    } else {
        None
    };
    let charge = extract_charge_psd(&y_open, floor.as_ref(), g0, setup.chain.sensor_pole(), "e^2/Hz")?;
    let mut fit = None;
    if let Some([lo, hi]) = cfg.analysis.charge_fit_band_hz {
        match fit_powerlaw_plus_lorentzian(&charge, (lo, hi)) {
            Ok(f) => {
                record_fit(b, "charge", &f);
                fit = Some(f);
            }
            Err(Error::FitNonConvergent { best, residual, .. }) => {
                b.warnings.push(format!("charge fit did not converge (residual {residual:.3} dB)"));
                record_fit(b, "charge", &best);
                fit = Some(*best);
            }
            Err(e) => return Err(e),
        }
    }
    if let Some([lo, hi]) = cfg.analysis.rms_band_hz {
        if let Ok(v) = rms_over_band(&charge, lo, hi) {
            b.num("charge_rms_meas", v);
        }
        if let Some(f) = &fit {
            let model = PsdEstimate::from_values(
                charge.freqs.clone(),
                charge.freqs.iter().map(|&x| if x > 0.0 { f.model(x) } else { 0.0 }).collect(),
                "e^2/Hz",
            )?;
            if let Ok(v) = rms_over_band(&model, lo, hi) {
                b.num("charge_rms_fit", v);
            }
        }
        let intrinsic = psd(cfg, &noise.delta_ng)?;
        if let Ok(v) = rms_over_band(&intrinsic, lo, hi) {
            b.num("charge_rms_intrinsic", v);
        }
    }
    b.psds.insert("y_open".into(), y_open);
    b.psds.insert("charge_meas".into(), charge);
    Ok(fit)
}

fn clone_setup(s: &Setup) -> Setup {
    Setup {
        cav: s.cav.clone(),
        table: s.table.clone(),
        drive: s.drive,
        chain: s.chain,
        bias0: s.bias0,
        lock_ng: s.lock_ng,
        omega0_lock: s.omega0_lock,
        y_ref: s.y_ref,
        phase_table: None,
    }
}

fn gain_for(cfg: &ScenarioConfig, setup: &Setup, noise: &BiasNoise, b: &mut Builder) -> Result<f64> {
    let rule = cfg.control.as_ref().map_or(GainRule::Effective, |l| l.gain);
    // the loop re-centres after a gate jump, so the slope is taken without them
    let g0 = if cfg.noise.jumps.is_empty() {
        setup.gain(rule, noise)?
    } else {
        let mut n = cfg.noise.clone();
        n.seed = cfg.seed;
        n.jumps.clear();
        setup.gain(rule, &compose_bias_noise(&n, cfg.chain.fs_out, cfg.duration)?)?
    };
    b.num("g0", g0);
    b.num("g0_small_signal", setup.gain(GainRule::SmallSignal, noise)?);
    if let Ok(a) = open_loop_gain(&setup.cav, &setup.drive, setup.bias0, setup.chain.g_amp) {
        b.num("g0_analytic", a);
    }
    if g0 == 0.0 {
        return Err(Error::Config(format!(
            "open-loop gain vanishes at n_g = {}; this bias point cannot be locked",
            setup.bias0.ng
        )));
    }
    Ok(g0)
}

fn open(cfg: &ScenarioConfig, setup: &Setup, noise: &BiasNoise, b: &mut Builder) -> Result<()> {
    let g0 = gain_for(cfg, setup, noise, b)?;
    let run = open_run(setup, noise, cfg.seed)?;
    b.warnings.extend(run.warnings.iter().cloned());
    open_spectra(cfg, setup, noise, &run, g0, b)?;
    b.trajectory("y_open", &run.y);
    b.trajectory("x_open", &run.x);
    b.trajectory("delta_ng", &noise.delta_ng);
    b.psds.insert("intrinsic".into(), psd(cfg, &noise.delta_ng)?);
    b.num("y_open_rms", run.y.rms());
    Ok(())
}

fn closed(cfg: &ScenarioConfig, setup: &Setup, noise: &BiasNoise, b: &mut Builder) -> Result<bool> {
    let g0 = gain_for(cfg, setup, noise, b)?;
    let (lc, f_prime) = loop_config(cfg, setup, g0)?;
    b.num("f_prime_hz", f_prime);
    let run = run_closed_loop(&setup.inputs(noise, None, cfg.seed), Some(&lc))?;
    b.warnings.extend(run.warnings.iter().cloned());
    b.num("clamp_fraction", run.clamp_fraction);
    b.trajectory("y_closed", &run.y);
    b.trajectory("applied", &run.applied);
    b.trajectory("ng_applied", &run.ng_applied);
    b.trajectory("omega0", &run.omega0);
    b.trajectory("delta_ng", &noise.delta_ng);
    b.psds.insert("y_closed".into(), psd(cfg, &run.y)?);
    b.psds.insert("applied".into(), psd(cfg, &run.applied)?);

    if let Some(first) = cfg.noise.jumps.iter().map(|j| j.time).min_by(|a, c| a.partial_cmp(c).unwrap()) {
        let fs = cfg.chain.fs_out;
        let n = run.applied.len();
        let j = ((first * fs).round() as usize).min(n);
        let pre = &run.applied.samples[j / 2..j];
        let tail = n - (n - j) / 4;
        let post = &run.applied.samples[tail..];
        let injected: f64 = cfg.noise.jumps.iter().map(|j| j.delta_ng).sum();
        let eps = mean(post) - mean(pre);
        b.num("jump_injected", injected);
        b.num("jump_applied_mean", eps);
        b.num("jump_applied_std", std_dev(post));
        let ng0 = setup.bias0.ng;
        let w_a = resonant_frequency(BiasPoint::new(ng0, setup.bias0.phi), &setup.cav, Parity::Even)?;
        let w_b = resonant_frequency(BiasPoint::new(ng0 + eps, setup.bias0.phi), &setup.cav, Parity::Even)?;
        b.num("tracked_shift_hz", (w_b - w_a).abs() / TAU);
        let mut t = Table::new(&["detuning_hz", "s11_bias0", "s11_corrected"]);
        let span = 2.5 * (w_b - w_a).abs().max(setup.cav.kappa_tot());
        for i in 0..=400 {
            let w = w_a + span * (2.0 * i as f64 / 400.0 - 1.0);
            let r0 = reflection_coefficient(0, w_a - w, &setup.cav, setup.drive.omega_m).norm();
            let r1 = reflection_coefficient(0, w_b - w, &setup.cav, setup.drive.omega_m).norm();
            t.push(vec![(w - w_a) / TAU, r0, r1]);
        }
        b.tables.insert("reflection".into(), t);
    }
    Ok(run.lost_lock)
}

fn paired(cfg: &ScenarioConfig, setup: &Setup, noise: &BiasNoise, b: &mut Builder) -> Result<bool> {
    let g0 = gain_for(cfg, setup, noise, b)?;
    let (lc, f_prime) = loop_config(cfg, setup, g0)?;
    b.num("f_prime_hz", f_prime);
    let open = open_run(setup, noise, cfg.seed)?;
    let fit = open_spectra(cfg, setup, noise, &open, g0, b)?;
    let closed = run_closed_loop(&setup.inputs(noise, None, cfg.seed), Some(&lc))?;
    b.warnings.extend(closed.warnings.iter().cloned());
    b.num("clamp_fraction", closed.clamp_fraction);

    let residual_closed = add(&noise.delta_ng, &closed.applied);
    let y_open = b.psds["y_open"].clone();
    let y_closed = psd(cfg, &closed.y)?;
    let intrinsic = psd(cfg, &noise.delta_ng)?;
    let resid = psd(cfg, &residual_closed)?;
    let app = psd(cfg, &closed.applied)?;
    let meas = b.psds["charge_meas"].clone();

    let freqs = y_open.freqs.clone();
    let r_y = ratio_db(&y_closed, &y_open);
    let r_res = ratio_db(&resid, &intrinsic);
    let r_app = ratio_db(&app, &meas);
    let r_app_fit: Vec<f64> = match &fit {
        Some(f) => app
            .values
            .iter()
            .zip(&freqs)
            .map(|(a, &x)| if x > 0.0 && *a > 0.0 { 10.0 * (a / f.model(x)).log10() } else { f64::NAN })
            .collect(),
        None => vec![f64::NAN; freqs.len()],
    };
    let mut t = Table::new(&[
        "freq_hz",
        "y_ratio_db",
        "residual_ratio_db",
        "app_over_meas_raw_db",
        "app_over_meas_fit_db",
        "loop_shape_db",
    ]);
    for i in 0..freqs.len() {
        let f = freqs[i];
        let shape = PoleShape::HighPass.db(f, f_prime);
        t.push(vec![f, r_y[i], r_res[i], r_app[i], r_app_fit[i], shape]);
    }
    b.tables.insert("suppression".into(), t);

    let band = cfg.analysis.rolloff_band_hz.map_or((f_prime / 30.0, 3.0 * f_prime), |[lo, hi]| (lo, hi));
    let fits = [
        ("suppression_3db_hz", &r_y, PoleShape::HighPass),
        ("residual_3db_hz", &r_res, PoleShape::HighPass),
        ("app_rolloff_raw_hz", &r_app, PoleShape::LowPass),
        ("app_rolloff_fit_hz", &r_app_fit, PoleShape::LowPass),
    ];
    for (key, r, shape) in fits {
        match fit_pole_crossover(&freqs, r, band, shape) {
            Ok(fc) => b.num(key, fc),
            Err(_) => b.set(key, Value::Null),
        }
    }
    if let Some(fc) = raw_crossing(&freqs, &r_y, -3.0) {
        b.num("suppression_3db_raw_crossing_hz", fc);
    }
    let (lo, hi) = cfg.analysis.rms_band_hz.map_or((1.0, f_prime), |[lo, hi]| (lo, hi));
    if let (Ok(a), Ok(c)) = (rms_over_band(&intrinsic, lo, hi), rms_over_band(&resid, lo, hi)) {
        b.num("residual_rms_open", a);
        b.num("residual_rms_closed", c);
        b.num("residual_rms_ratio", c / a);
    }
    b.num("y_open_rms", open.y.rms());
    b.num("y_closed_rms", closed.y.rms());

    b.trajectory("y_open", &open.y);
    b.trajectory("y_closed", &closed.y);
    b.trajectory("applied", &closed.applied);
    b.trajectory("delta_ng", &noise.delta_ng);
    b.psds.insert("y_closed".into(), y_closed);
    b.psds.insert("intrinsic".into(), intrinsic);
    b.psds.insert("residual_closed".into(), resid);
    b.psds.insert("applied".into(), app);
    Ok(closed.lost_lock)
}

fn gate_sweep(cfg: &ScenarioConfig, setup: &Setup, noise: &BiasNoise, b: &mut Builder) -> Result<bool> {
    let s = cfg.sweep.as_ref().expect("validated");
    let n = noise.delta_ng.len();
    let base = setup.bias0.ng;
    let ramp: Vec<f64> = (0..n)
        .map(|i| s.ng_start + (s.ng_stop - s.ng_start) * i as f64 / (n - 1) as f64 - base)
        .collect();
    let ramp = noise.delta_ng.with_samples(ramp);
    // gain and bandwidth at the lock point
    let at_lock = Setup {
        bias0: BiasPoint::new(setup.lock_ng, setup.bias0.phi),
        ..clone_setup(setup)
    };
    let g0 = gain_for(cfg, &at_lock, noise, b)?;
    let (lc, f_prime) = loop_config(cfg, &at_lock, g0)?;
    b.num("f_prime_hz", f_prime);
    let open = run_closed_loop(&setup.inputs(noise, Some(&ramp), cfg.seed), None)?;
    let closed = run_closed_loop(&setup.inputs(noise, Some(&ramp), cfg.seed), Some(&lc))?;
    b.warnings.extend(closed.warnings.iter().filter(|w| !w.starts_with("lost lock")).cloned());

    let per = n / s.points;
    let mut t = Table::new(&[
        "ng0",
        "y_open_mean",
        "y_open_std",
        "y_closed_mean",
        "y_closed_std",
        "ng_applied_mean",
        "ng_applied_std",
    ]);
    for p in 0..s.points {
        // statistics over the second half of each dwell
        let (lo, hi) = (p * per + per / 2, (p + 1) * per);
        let ng0 = base + mean(&ramp.samples[lo..hi]);
        let yo = &open.y.samples[lo..hi];
        let yc = &closed.y.samples[lo..hi];
        let na = &closed.ng_applied.samples[lo..hi];
        t.push(vec![ng0, mean(yo), std_dev(yo), mean(yc), std_dev(yc), mean(na), std_dev(na)]);
    }
    let x = t.column("ng0").unwrap();
    let app = t.column("ng_applied_mean").unwrap();
    let captured: Vec<bool> = app.iter().map(|a| (a - setup.lock_ng).abs() <= s.capture_tol).collect();
    let centre = (0..x.len())
        .min_by(|&a, &c| (x[a] - setup.lock_ng).abs().partial_cmp(&(x[c] - setup.lock_ng).abs()).unwrap())
        .unwrap();
    let lost = !captured[centre];
    if !lost {
        let mut lo = centre;
        while lo > 0 && captured[lo - 1] {
            lo -= 1;
        }
        let mut hi = centre;
        while hi + 1 < x.len() && captured[hi + 1] {
            hi += 1;
        }
        let spacing = (s.ng_stop - s.ng_start).abs() / s.points as f64;
        b.num("capture_lo", x[lo].min(x[hi]) - 0.5 * spacing);
        b.num("capture_hi", x[lo].max(x[hi]) + 0.5 * spacing);
        b.num("capture_half_width", 0.5 * ((x[hi] - x[lo]).abs() + spacing));
    } else {
        b.warnings.push(format!("lock point n_g = {} was not captured", setup.lock_ng));
    }
    b.tables.insert("sweep".into(), t);
    b.trajectory("y_open", &open.y);
    b.trajectory("y_closed", &closed.y);
    b.trajectory("ng_applied", &closed.ng_applied);
    Ok(lost)
}
