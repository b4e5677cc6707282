//! Time-domain integration of the driven Kerr cavity, used to check the
//! quasi-static reflection model.
//!
//! In the frame rotating at the carrier the field obeys
//!
//!   da/dt = -i (delta(t) + K |a|^2) a - (kappa/2) a - i sqrt(kappa_ext) a_in(t)
//!
//! with a_in = sqrt(P / hbar wc) exp(-i beta sin(wm t)) and the output
//! a_out = a_in - i sqrt(kappa_ext) a. This convention pair gives
//! |a_out| = |a_in| in steady state when kappa_int = 0 and reproduces the
//! sideband reflection r_k used by `rf`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::device::CavityParams;
use crate::error::{Error, Result};
use crate::rf::{DriveConfig, HBAR};
use crate::series::{ComplexSeries, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    /// Integration steps per modulation period.
    pub steps_per_period: usize,
    /// Transient discarded before demodulation, in units of 1/kappa_tot.
    /// The amplitude error left over is exp(-settle/2).
    pub settle_kappa_t: f64,
    /// Modulation periods averaged by the steady-state demodulator.
    pub average_periods: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            steps_per_period: 512,
            settle_kappa_t: 30.0,
            average_periods: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FieldTrajectory {
    /// Intracavity amplitude (sqrt photons).
    pub a: ComplexSeries,
    /// Output amplitude (sqrt photons/s).
    pub a_out: ComplexSeries,
    pub omega_c: f64,
}

/// Fixed-step midpoint integrator with the drive phasor tabulated on
/// half-steps of one modulation period.
struct Integrator {
    a: Complex64,
    dt: f64,
    kerr: f64,
    half_kappa: f64,
    coupling: f64,
    drive: Vec<Complex64>,
    steps_per_period: usize,
    step: usize,
    scale: f64,
}

impl Integrator {
    fn new(cav: &CavityParams, drive: &DriveConfig, dt: f64, steps_per_period: usize) -> Self {
        let amp = (drive.input_power(cav) / (HBAR * drive.omega_c)).sqrt();
        let phasors = (0..2 * steps_per_period)
            .map(|j| {
                let t = 0.5 * j as f64 * dt;
                Complex64::from_polar(amp, -drive.beta * (drive.omega_m * t).sin())
            })
            .collect();
        let kt = cav.kappa_tot();
        Integrator {
            a: Complex64::new(0.0, 0.0),
            dt,
            kerr: cav.kerr_k,
            half_kappa: 0.5 * kt,
            coupling: cav.kappa_ext.sqrt(),
            drive: phasors,
            steps_per_period,
            step: 0,
            // 4 ke |a_in|^2 / kappa^2 bounds the linear occupation
            scale: 4.0 * cav.kappa_ext * amp * amp / (kt * kt),
        }
    }

    fn input(&self, half_steps: usize) -> Complex64 {
        self.drive[half_steps % self.drive.len()]
    }

    fn rhs(&self, a: Complex64, delta: f64, a_in: Complex64) -> Complex64 {
        let w = delta + self.kerr * a.norm_sqr();
        Complex64::new(-self.half_kappa, -w) * a - Complex64::new(0.0, self.coupling) * a_in
    }

    fn output(&self) -> Complex64 {
        self.input(2 * (self.step % self.steps_per_period)) - Complex64::new(0.0, self.coupling) * self.a
    }

    /// Advance one step with the detuning at the start and the midpoint.
    fn advance(&mut self, delta_start: f64, delta_mid: f64) -> Result<()> {
        let h = 2 * (self.step % self.steps_per_period);
        let k1 = self.rhs(self.a, delta_start, self.input(h));
        let mid = self.a + k1 * (0.5 * self.dt);
        let k2 = self.rhs(mid, delta_mid, self.input(h + 1));
        self.a += k2 * self.dt;
        self.step += 1;
        let n = self.a.norm_sqr();
        if !n.is_finite() || n > 1e6 * (self.scale + 1.0) {
            return Err(Error::LoopAbort {
                step: self.step,
                reason: format!("cavity energy blew up (|a|^2 = {n:.3e}); reduce the step"),
            });
        }
        Ok(())
    }
}

fn check_step(cav: &CavityParams, drive: &DriveConfig, dt: f64) -> Result<()> {
    let fastest = cav.kappa_tot().max(drive.omega_m);
    if !(dt > 0.0) || dt * fastest > 0.02 * (1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "step {dt:.3e} s exceeds 0.02 / max(kappa_tot, omega_m) = {:.3e} s",
            0.02 / fastest
        )));
    }
    Ok(())
}

fn steps_per_period(drive: &DriveConfig, dt: f64) -> Result<usize> {
    if drive.omega_m <= 0.0 {
        return Err(Error::Config("modulation frequency must be positive".into()));
    }
    let period = std::f64::consts::TAU / drive.omega_m;
    let m = (period / dt).round();
    if m < 1.0 || ((m * dt) / period - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "step {dt:.6e} s must divide the modulation period {period:.6e} s"
        )));
    }
    Ok(m as usize)
}

/// Step that fits `steps` times into one modulation period.
pub fn period_step(drive: &DriveConfig, steps: usize) -> f64 {
    std::f64::consts::TAU / drive.omega_m / steps as f64
}

/// Integrate from an empty cavity over the duration of `delta_omega0`,
/// which is linearly interpolated between its samples and held at the ends.
pub fn integrate_cavity(
    delta_omega0: &TimeSeries,
    cav: &CavityParams,
    drive: &DriveConfig,
    dt: f64,
) -> Result<FieldTrajectory> {
    check_step(cav, drive, dt)?;
    let spp = steps_per_period(drive, dt)?;
    let steps = (delta_omega0.duration() / dt).round() as usize;
    if steps == 0 {
        return Err(Error::Config("detuning record shorter than one step".into()));
    }
    let at = |t: f64| -> f64 {
        let s = &delta_omega0.samples;
        let x = (t - delta_omega0.t0) * delta_omega0.fs;
        if x <= 0.0 {
            return s[0];
        }
        let i = x.floor() as usize;
        if i + 1 >= s.len() {
            return s[s.len() - 1];
        }
        let f = x - i as f64;
        s[i] * (1.0 - f) + s[i + 1] * f
    };
    let mut integ = Integrator::new(cav, drive, dt, spp);
    let mut a = Vec::with_capacity(steps + 1);
    let mut out = Vec::with_capacity(steps + 1);
    a.push(integ.a);
    out.push(integ.output());
    for i in 0..steps {
        let t = i as f64 * dt;
        integ.advance(at(t), at(t + 0.5 * dt))?;
        a.push(integ.a);
        out.push(integ.output());
    }
    let fs = 1.0 / dt;
    Ok(FieldTrajectory {
        a: TimeSeries::new(a, fs, "sqrt(photons)")?,
        a_out: TimeSeries::new(out, fs, "sqrt(photons/s)")?,
        omega_c: drive.omega_c,
    })
}

/// X and Y of the reflected power, one value per whole modulation period
/// after the transient, time-stamped at the period centre.
pub fn demodulate_oracle(traj: &FieldTrajectory, cav: &CavityParams, drive: &DriveConfig) -> Result<(TimeSeries, TimeSeries)> {
    let dt = traj.a_out.dt();
    let spp = steps_per_period(drive, dt)?;
    let settle = (10.0 / cav.kappa_tot() / dt).ceil() as usize;
    let first = settle.div_ceil(spp) * spp;
    let periods = traj.a_out.len().saturating_sub(first) / spp;
    if periods == 0 {
        return Err(Error::Domain(format!(
            "record of {} steps is shorter than the {first}-step transient plus one period",
            traj.a_out.len()
        )));
    }
    let (cos, sin) = period_trig(spp);
    let mut xs = Vec::with_capacity(periods);
    let mut ys = Vec::with_capacity(periods);
    for p in 0..periods {
        let start = first + p * spp;
        let (mut x, mut y) = (0.0, 0.0);
        for j in 0..spp {
            let power = HBAR * traj.omega_c * traj.a_out.samples[start + j].norm_sqr();
            x += power * cos[j];
            y += power * sin[j];
        }
        xs.push(2.0 * x / spp as f64);
        ys.push(-2.0 * y / spp as f64);
    }
    let rate = drive.omega_m / std::f64::consts::TAU;
    let t0 = traj.a_out.t0 + (first as f64 + 0.5 * spp as f64) * dt;
    let mut x = TimeSeries::new(xs, rate, "W")?;
    let mut y = TimeSeries::new(ys, rate, "W")?;
    x.t0 = t0;
    y.t0 = t0;
    Ok((x, y))
}

fn period_trig(spp: usize) -> (Vec<f64>, Vec<f64>) {
    (0..spp)
        .map(|j| {
            let ph = std::f64::consts::TAU * j as f64 / spp as f64;
            (ph.cos(), ph.sin())
        })
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub x: f64,
    pub y: f64,
    pub mean_photons: f64,
    pub input_power: f64,
    pub reflected_power: f64,
}

/// Constant-detuning steady state without storing the trajectory.
pub fn steady_state(delta_omega0: f64, cav: &CavityParams, drive: &DriveConfig, settings: &OracleSettings) -> Result<SteadyState> {
    let spp = settings.steps_per_period;
    let dt = period_step(drive, spp);
    check_step(cav, drive, dt)?;
    let mut integ = Integrator::new(cav, drive, dt, spp);
    let settle_steps = (settings.settle_kappa_t / cav.kappa_tot() / dt).ceil() as usize;
    for _ in 0..settle_steps.div_ceil(spp) * spp {
        integ.advance(delta_omega0, delta_omega0)?;
    }
    let (cos, sin) = period_trig(spp);
    let (mut x, mut y, mut n, mut p_in, mut p_out) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..settings.average_periods {
        for j in 0..spp {
            let quantum = HBAR * drive.omega_c;
            let power = quantum * integ.output().norm_sqr();
            x += power * cos[j];
            y += power * sin[j];
            p_out += power;
            p_in += quantum * integ.input(2 * j).norm_sqr();
            n += integ.a.norm_sqr();
            integ.advance(delta_omega0, delta_omega0)?;
        }
    }
    let m = (settings.average_periods * spp) as f64;
    Ok(SteadyState {
        x: 2.0 * x / m,
        y: -2.0 * y / m,
        mean_photons: n / m,
        input_power: p_in / m,
        reflected_power: p_out / m,
    })
}

/// One point of the oracle comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub delta_omega0: f64,
    pub beta: f64,
    pub kerr_k: f64,
    pub analytic_y: f64,
    pub oracle_y: f64,
    /// |analytic - oracle| over the largest |oracle Y| of the same sweep.
    pub rel_error: f64,
}

/// Grid of resonance offsets in [-span, span] kappa_tot for every (beta, K)
/// pair, comparing the quasi-static Y with the integrated one.
pub fn validate_grid(
    cav: &CavityParams,
    drive: &DriveConfig,
    betas: &[f64],
    kerrs: &[f64],
    points: usize,
    span_kappa: f64,
    settings: &OracleSettings,
) -> Result<Vec<OracleRow>> {
    if points < 2 {
        return Err(Error::Domain("oracle grid needs at least two offsets".into()));
    }
    let mut rows = Vec::with_capacity(points * betas.len() * kerrs.len());
    for &kerr_k in kerrs {
        let mut c = cav.clone();
        c.kerr_k = kerr_k;
        for &beta in betas {
            let mut d = *drive;
            d.beta = beta;
            let mut sweep = Vec::with_capacity(points);
            for i in 0..points {
                let delta = span_kappa * c.kappa_tot() * (2.0 * i as f64 / (points - 1) as f64 - 1.0);
                let analytic = crate::rf::error_quadratures(delta, &c, &d, kerr_k != 0.0)?.y;
                let oracle = steady_state(delta, &c, &d, settings)?.y;
                sweep.push((delta, analytic, oracle));
            }
            let scale = sweep.iter().map(|r| r.2.abs()).fold(0.0, f64::max);
            rows.extend(sweep.into_iter().map(|(delta_omega0, analytic_y, oracle_y)| OracleRow {
                delta_omega0,
                beta,
                kerr_k,
                analytic_y,
                oracle_y,
                rel_error: if scale > 0.0 { (analytic_y - oracle_y).abs() / scale } else { 0.0 },
            }));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::CptParams;
    use crate::rf::{error_quadratures, DrivePower};
    use std::f64::consts::PI;

    fn cav(ki: f64, kerr: f64) -> CavityParams {
        CavityParams::new(2.0 * PI * 5.757e9, 2.0 * PI * ki, 2.0 * PI * 0.97e6, kerr, CptParams::default()).unwrap()
    }

    fn drive(beta: f64) -> DriveConfig {
        DriveConfig::new(2.0 * PI * 5.757e9, beta, 2.0 * PI * 30e6, DrivePower::Photons(10.0))
    }

    #[test]
    fn lorentzian_steady_state() {
        let c = cav(0.3e6, 0.0);
        let d = drive(0.0);
        let delta = 2.0 * PI * 0.4e6;
        let s = steady_state(delta, &c, &d, &OracleSettings::default()).unwrap();
        let flux = d.input_power(&c) / (HBAR * d.omega_c);
        let expect = c.kappa_ext * flux / (delta * delta + 0.25 * c.kappa_tot().powi(2));
        assert!((s.mean_photons / expect - 1.0).abs() < 1e-4, "{} vs {expect}", s.mean_photons);
        assert!(s.y.abs() < 1e-6 * s.reflected_power);
    }

    #[test]
    fn lossless_reflection_conserves_power() {
        let c = cav(0.0, -2.0 * PI * 80e3);
        let s = steady_state(2.0 * PI * 0.3e6, &c, &drive(1.84), &OracleSettings::default()).unwrap();
        assert!((s.reflected_power / s.input_power - 1.0).abs() < 5e-3);
    }

    #[test]
    fn matches_quasi_static_quadratures() {
        let c = cav(0.3e6, 0.0);
        let mut d = drive(1.08);
        d.second_order_terms = true;
        let settings = OracleSettings::default();
        let scale = error_quadratures(0.5 * c.kappa_tot(), &c, &d, false).unwrap().y.abs();
        for delta in [-1.5, -0.4, 0.0, 0.7, 2.0] {
            let w = delta * c.kappa_tot();
            let o = steady_state(w, &c, &d, &settings).unwrap();
            let a = error_quadratures(w, &c, &d, false).unwrap();
            assert!((o.y - a.y).abs() < 1e-2 * scale, "{delta}: {} vs {}", o.y, a.y);
            assert!((o.x - a.x).abs() < 1e-2 * scale, "{delta}: {} vs {}", o.x, a.x);
        }
    }

    #[test]
    fn second_order_convergence() {
        let c = cav(0.3e6, 0.0);
        let d = drive(1.84);
        let run = |spp: usize| {
            steady_state(0.3 * c.kappa_tot(), &c, &d, &OracleSettings {
                steps_per_period: spp,
                settle_kappa_t: 40.0,
                average_periods: 16,
            })
            .unwrap()
            .y
        };
        let reference = run(4096);
        let e1 = (run(512) - reference).abs();
        let e2 = (run(1024) - reference).abs();
        let ratio = e1 / e2;
        assert!(ratio > 3.0 && ratio < 5.5, "{ratio}");
    }

    #[test]
    fn trajectory_demodulation_agrees_with_steady_state() {
        let c = cav(0.3e6, 0.0);
        let d = drive(1.84);
        let dt = period_step(&d, 512);
        let delta = 0.25 * c.kappa_tot();
        let series = TimeSeries::new(vec![delta], 1.0 / 6e-6, "rad/s").unwrap();
        let traj = integrate_cavity(&series, &c, &d, dt).unwrap();
        let (_, y) = demodulate_oracle(&traj, &c, &d).unwrap();
        let s = steady_state(delta, &c, &d, &OracleSettings::default()).unwrap();
        let last = *y.samples.last().unwrap();
        assert!((last - s.y).abs() < 1e-4 * s.y.abs(), "{last} vs {}", s.y);
        assert_eq!(traj.a.len(), traj.a_out.len());
    }

    #[test]
    fn zero_beta_has_no_error_signal() {
        let c = cav(0.3e6, 0.0);
        let s = steady_state(0.3 * c.kappa_tot(), &c, &drive(0.0), &OracleSettings::default()).unwrap();
        assert!(s.y.abs() < 1e-6 * s.reflected_power && s.x.abs() < 1e-6 * s.reflected_power);
    }

    #[test]
    fn step_limits() {
        let c = cav(0.3e6, 0.0);
        let d = drive(1.0);
        let series = TimeSeries::new(vec![0.0], 1e6, "rad/s").unwrap();
        assert!(matches!(integrate_cavity(&series, &c, &d, period_step(&d, 64)), Err(Error::Config(_))));
        assert!(matches!(integrate_cavity(&series, &c, &d, 1.1e-10), Err(Error::Config(_))));
        let short = TimeSeries::new(vec![0.0], 1e8, "rad/s").unwrap();
        let traj = integrate_cavity(&short, &c, &d, period_step(&d, 512)).unwrap();
        assert!(demodulate_oracle(&traj, &c, &d).is_err());
    }
}
