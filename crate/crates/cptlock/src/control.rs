//! PI controller with the loop-shaping law, actuator filter and the
//! closed-loop stepping engine.
//!
//! The controller K(s) = kp + ki/s with kp = w'/(g0 wLPF) and ki = w'/g0
//! cancels the sensor pole of G(s) = g0/(1 + s/wLPF), so the loop transfer is
//! w'/s and the closed-loop suppression of bias noise is s/(s + w').

use serde::{Deserialize, Serialize};

use crate::chain::{ChainConfig, LockIn, OnePole};
use crate::device::{BiasPoint, CavityParams, Parity, ResonanceTable};
use crate::error::{Error, Result};
use crate::noise::{substream, BiasNoise, STREAM_SENSOR};
use crate::rf::{BeatKernel, DriveConfig, KerrTracker};
use crate::series::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Target closed-loop bandwidth (rad/s).
    pub omega_prime: f64,
    /// Sensor pole (rad/s).
    pub omega_lpf: f64,
    /// Open-loop DC gain (V per unit gate bias).
    pub g0: f64,
    /// Setpoint (V).
    pub y_ref: f64,
    /// Summing-amplifier pole (rad/s).
    pub actuator_bw: f64,
    /// Largest applied bias correction.
    pub output_clamp: f64,
    /// Controller step (s).
    pub dt: f64,
    /// Fraction of steps at the clamp above which the run counts as unlocked.
    pub lost_lock_fraction: f64,
    /// Derivative gain (bias s/V); zero for the pure PI law.
    pub kd: f64,
}

impl LoopConfig {
    pub fn new(omega_prime: f64, omega_lpf: f64, g0: f64, dt: f64) -> Self {
        LoopConfig {
            omega_prime,
            omega_lpf,
            g0,
            y_ref: 0.0,
            actuator_bw: 2.0 * std::f64::consts::PI * 1e6,
            output_clamp: 0.3,
            dt,
            lost_lock_fraction: 0.5,
            kd: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.g0 == 0.0 || !self.g0.is_finite() {
            return Err(Error::Config(format!(
                "open-loop gain is {}; the bias point has no usable slope",
                self.g0
            )));
        }
        for (name, v) in [
            ("omega_prime", self.omega_prime),
            ("omega_lpf", self.omega_lpf),
            ("actuator_bw", self.actuator_bw),
            ("output_clamp", self.output_clamp),
            ("dt", self.dt),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.dt * self.omega_lpf >= 0.1 {
            return Err(Error::Config(format!(
                "dt * omega_lpf = {:.3} must stay below 0.1",
                self.dt * self.omega_lpf
            )));
        }
        if !(self.lost_lock_fraction > 0.0 && self.lost_lock_fraction <= 1.0) {
            return Err(Error::Config("lost_lock_fraction must lie in (0, 1]".into()));
        }
        if !self.y_ref.is_finite() || !self.kd.is_finite() {
            return Err(Error::Config("setpoint and derivative gain must be finite".into()));
        }
        Ok(())
    }

    /// Non-fatal departures from the shaping assumptions.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.omega_prime >= self.omega_lpf {
            w.push(format!(
                "omega_prime ({:.1} Hz) is not below the sensor pole ({:.1} Hz); the one-pole closed-loop form is approximate",
                self.omega_prime / std::f64::consts::TAU,
                self.omega_lpf / std::f64::consts::TAU
            ));
        }
        if self.actuator_bw < 100.0 * self.omega_prime {
            w.push("actuator pole is within two decades of omega_prime".into());
        }
        w
    }
}

/// (kp, ki) of the loop-shaping law.
pub fn pi_gains(cfg: &LoopConfig) -> Result<(f64, f64)> {
    if cfg.g0 == 0.0 || !cfg.g0.is_finite() {
        return Err(Error::Config(format!("open-loop gain is {}; cannot lock here", cfg.g0)));
    }
    let ki = cfg.omega_prime / cfg.g0;
    Ok((ki / cfg.omega_lpf, ki))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub integrator: f64,
    pub last_output: f64,
    pub windup_flag: bool,
    pub prev_error: f64,
}

/// One controller update for `error` = measurement - setpoint (V).
///
/// Trapezoidal integration; the integrator holds while the output is
/// clamped and the update would push further into the clamp.
pub fn pid_step(state: LoopState, error: f64, cfg: &LoopConfig) -> Result<(LoopState, f64)> {
    if !error.is_finite() {
        return Err(Error::LoopAbort {
            step: 0,
            reason: format!("non-finite error signal {error}"),
        });
    }
    let (kp, ki) = pi_gains(cfg)?;
    let increment = 0.5 * ki * cfg.dt * (error + state.prev_error);
    let derivative = if cfg.kd != 0.0 {
        cfg.kd * (error - state.prev_error) / cfg.dt
    } else {
        0.0
    };
    let trial = state.integrator + increment;
    let raw = -(kp * error + trial + derivative);
    let mut next = LoopState {
        integrator: trial,
        last_output: raw,
        windup_flag: false,
        prev_error: error,
    };
    if raw.abs() > cfg.output_clamp {
        next.last_output = cfg.output_clamp.copysign(raw);
        next.windup_flag = true;
        // -increment moves the output; hold when it moves toward the clamp
        if (-increment) * raw > 0.0 {
            next.integrator = state.integrator;
        }
    }
    Ok((next, next.last_output))
}

/// Summing-amplifier pole between the controller and the gate.
#[derive(Debug, Clone, Copy)]
pub struct Actuator(OnePole);

impl Actuator {
    pub fn new(bandwidth: f64, dt: f64) -> Self {
        Actuator(OnePole::new(bandwidth, dt))
    }

    pub fn output(&self) -> f64 {
        self.0.state
    }

    pub fn push(&mut self, command: f64) {
        self.0.update(command);
    }
}

/// Everything the stepping engine reads.
#[derive(Debug, Clone, Copy)]
pub struct LoopInputs<'a> {
    pub cav: &'a CavityParams,
    pub table: &'a ResonanceTable,
    pub drive: &'a DriveConfig,
    pub chain: &'a ChainConfig,
    pub bias0: BiasPoint,
    pub noise: &'a BiasNoise,
    /// Programmed gate ramp added to `bias0.ng`.
    pub sweep: Option<&'a TimeSeries>,
    /// Seed for the sensor-noise substream.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LoopRun {
    pub y: TimeSeries,
    pub x: TimeSeries,
    /// Correction at the gate.
    pub applied: TimeSeries,
    /// Programmed gate plus correction.
    pub ng_applied: TimeSeries,
    /// Instantaneous resonance (rad/s).
    pub omega0: TimeSeries,
    pub clamp_fraction: f64,
    pub bistable_steps: usize,
    pub lost_lock: bool,
    pub warnings: Vec<String>,
}

/// Steps the device, rf response, lock-in and, when `control` is set, the
/// controller. Without `control` the same pipeline runs open loop.
///
/// Per step: the current bias sets the resonance; the lock-in output held
/// from the previous step is recorded; the new quadratures enter the
/// lock-in; the controller acts on the updated output and the actuated
/// correction applies from the next step.
pub fn run_closed_loop(inp: &LoopInputs, control: Option<&LoopConfig>) -> Result<LoopRun> {
    inp.chain.validate()?;
    inp.drive.validate(inp.cav)?;
    let fs = inp.chain.fs_out;
    let n = inp.noise.delta_ng.len();
    for s in [&inp.noise.delta_ng, &inp.noise.parity, &inp.noise.delta_flux]
        .into_iter()
        .chain(inp.sweep)
    {
        if s.len() != n || (s.fs - fs).abs() > 1e-9 * fs {
            return Err(Error::Config(format!(
                "record of {} samples at {} Hz does not match {n} samples at the chain rate {fs} Hz",
                s.len(),
                s.fs
            )));
        }
    }
    let mut warnings = inp.noise.warnings.clone();
    if let Some(c) = control {
        c.validate()?;
        if (c.dt * fs - 1.0).abs() > 1e-9 {
            return Err(Error::Config("controller step must equal the chain output period".into()));
        }
        for w in c.warnings() {
            log::warn!("{w}");
            warnings.push(w);
        }
    }

    let dphi0 = inp.bias0.phi - inp.table.phi0();
    let kernel = BeatKernel::new(inp.cav, inp.drive);
    let mut tracker = KerrTracker::new(inp.cav, inp.drive);
    let mut lockin = LockIn::new(inp.chain, substream(inp.seed, STREAM_SENSOR));
    let dt = 1.0 / fs;
    let mut actuator = Actuator::new(control.map_or(1.0, |c| c.actuator_bw), dt);
    let mut state = LoopState::default();

    let mut ys = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut apps = Vec::with_capacity(n);
    let mut ngs = Vec::with_capacity(n);
    let mut w0s = Vec::with_capacity(n);
    let mut clamped = 0usize;
    let mut bistable_steps = 0usize;

    for i in 0..n {
        let app = actuator.output();
        let programmed = inp.bias0.ng + inp.sweep.map_or(0.0, |s| s.samples[i]);
        let ng = programmed + inp.noise.delta_ng.samples[i] + app;
        let parity = if inp.noise.parity.samples[i] != 0.0 { Parity::Odd } else { Parity::Even };
        let omega0 = inp.table.omega(ng, dphi0 + inp.noise.delta_flux.samples[i], parity);
        let delta = omega0 - inp.drive.omega_c;
        let delta_eff = if inp.cav.kerr_k != 0.0 {
            let sol = tracker.solve(delta, inp.cav)?;
            if sol.bistable {
                bistable_steps += 1;
            }
            delta + inp.cav.kerr_k * sol.n
        } else {
            delta
        };
        let (x_w, y_w) = kernel.eval(delta_eff, inp.cav);

        let (x_v, y_v) = lockin.output();
        xs.push(x_v);
        ys.push(y_v);
        apps.push(app);
        ngs.push(programmed + app);
        w0s.push(omega0);
        lockin.push(x_w, y_w);

        if let Some(c) = control {
            let (_, y_now) = lockin.output();
            let (next, out) = pid_step(state, y_now - c.y_ref, c).map_err(|e| match e {
                Error::LoopAbort { reason, .. } => Error::LoopAbort { step: i, reason },
                other => other,
            })?;
            state = next;
            if state.windup_flag {
                clamped += 1;
            }
            actuator.push(out);
            if !actuator.output().is_finite() {
                return Err(Error::LoopAbort {
                    step: i,
                    reason: "actuator output diverged".into(),
                });
            }
        }
    }

    let clamp_fraction = clamped as f64 / n as f64;
    let lost_lock = control.is_some_and(|c| clamp_fraction > c.lost_lock_fraction);
    if lost_lock {
        let msg = format!("lost lock: output clamped on {:.1} % of steps", 100.0 * clamp_fraction);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if bistable_steps > 0 {
        warnings.push(format!("{bistable_steps} steps on the bistable interval"));
    }
    Ok(LoopRun {
        y: TimeSeries::new(ys, fs, "V")?,
        x: TimeSeries::new(xs, fs, "V")?,
        applied: TimeSeries::new(apps, fs, "e")?,
        ng_applied: TimeSeries::new(ngs, fs, "e")?,
        omega0: TimeSeries::new(w0s, fs, "rad/s")?,
        clamp_fraction,
        bistable_steps,
        lost_lock,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use std::f64::consts::PI;

    fn cfg() -> LoopConfig {
        LoopConfig::new(2.0 * PI * 100.0, 2.0 * PI * 1000.0, -3.0, 1e-5)
    }

    #[test]
    fn loop_transfer_is_integrator() {
        let c = cfg();
        let (kp, ki) = pi_gains(&c).unwrap();
        for i in 0..50 {
            let w = 10f64.powf(-1.0 + 6.0 * i as f64 / 49.0);
            let s = Complex64::new(0.0, w);
            let l = (kp + ki / s) * c.g0 / (1.0 + s / c.omega_lpf);
            let target = c.omega_prime / s;
            assert!((l - target).norm() < 1e-12 * target.norm(), "{w}");
        }
    }

    #[test]
    fn gain_identities() {
        let c = cfg();
        let (kp, ki) = pi_gains(&c).unwrap();
        assert!((kp * c.omega_lpf / ki - 1.0).abs() < 1e-15);
        let (kp2, ki2) = pi_gains(&LoopConfig { g0: 2.0 * c.g0, ..c }).unwrap();
        assert!((kp2 / kp - 0.5).abs() < 1e-15 && (ki2 / ki - 0.5).abs() < 1e-15);
        assert!(matches!(pi_gains(&LoopConfig { g0: 0.0, ..c }), Err(Error::Config(_))));
    }

    #[test]
    fn zero_error_holds_zero() {
        let c = cfg();
        let mut s = LoopState::default();
        for _ in 0..1000 {
            let (n, out) = pid_step(s, 0.0, &c).unwrap();
            assert_eq!(out, 0.0);
            s = n;
        }
    }

    #[test]
    fn constant_error_ramps_at_ki() {
        let c = LoopConfig {
            output_clamp: 1e9,
            ..cfg()
        };
        let (kp, ki) = pi_gains(&c).unwrap();
        let e = 0.01;
        let mut s = LoopState::default();
        let mut outs = Vec::new();
        for _ in 0..10_001 {
            let (n, out) = pid_step(s, e, &c).unwrap();
            s = n;
            outs.push(out);
        }
        let slope = (outs[10_000] - outs[0]) / (10_000.0 * c.dt);
        assert!((slope + ki * e).abs() < 1e-9 * (ki * e).abs());
        // first step: proportional plus half a trapezoid
        assert!((outs[0] + kp * e + 0.5 * ki * c.dt * e).abs() < 1e-12);
    }

    #[test]
    fn clamp_recovers_without_windup() {
        let c = LoopConfig {
            output_clamp: 0.05,
            ..cfg()
        };
        let (kp, _) = pi_gains(&c).unwrap();
        let e = 0.1;
        let mut s = LoopState::default();
        for _ in 0..1000 {
            s = pid_step(s, e, &c).unwrap().0;
        }
        assert!(s.windup_flag);
        let edge = s.last_output;
        assert!(edge.abs() <= c.output_clamp);
        // windup-free reference sitting exactly at the clamp edge
        let mut r = LoopState {
            integrator: -edge - kp * e,
            last_output: edge,
            windup_flag: false,
            prev_error: e,
        };
        let mut left = None;
        for k in 0..200 {
            let (n, out) = pid_step(s, -e, &c).unwrap();
            let (rn, reference) = pid_step(r, -e, &c).unwrap();
            s = n;
            r = rn;
            if left.is_none() && out.abs() < c.output_clamp {
                left = Some(k);
            }
            assert!((out - edge).abs() <= 2.0 * (reference - edge).abs() + 1e-12, "{k}: {out} vs {reference}");
        }
        assert!(left.unwrap() < 10, "{left:?}");
    }

    #[test]
    fn non_finite_error_aborts() {
        assert!(matches!(
            pid_step(LoopState::default(), f64::NAN, &cfg()),
            Err(Error::LoopAbort { .. })
        ));
    }

    #[test]
    fn output_never_exceeds_clamp() {
        let c = LoopConfig {
            output_clamp: 0.02,
            ..cfg()
        };
        let mut s = LoopState::default();
        for i in 0..5000 {
            let e = ((i as f64) * 0.013).sin() * 0.5;
            let (n, out) = pid_step(s, e, &c).unwrap();
            assert!(out.abs() <= c.output_clamp);
            s = n;
        }
    }

    #[test]
    fn validation() {
        assert!(cfg().validate().is_ok());
        assert!(LoopConfig { dt: 1e-3, ..cfg() }.validate().is_err());
        let slow = LoopConfig {
            omega_prime: 2.0 * PI * 2000.0,
            ..cfg()
        };
        assert!(slow.validate().is_ok());
        assert_eq!(slow.warnings().len(), 1);
    }
}
