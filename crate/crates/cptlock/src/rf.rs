//! Quasi-static reflection of a phase-modulated drive.
//!
//! Sideband k sits at omega_c + k omega_m. With the cavity resonance offset
//! delta = omega0 - omega_c, each sideband reflects with
//! r_k = (k wm - delta + i(ki - ke)/2) / (k wm - delta + i(ki + ke)/2).
//! The reflected power is written P(t) = dc + X cos(wm t) - Y sin(wm t) + ...

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::device::{coupling_coefficient, resonant_frequency, BiasAxis, BiasPoint, CavityParams, Parity};
use crate::error::{Error, Result};
use crate::special::{bessel_j, J0_FIRST_ZERO};

pub const HBAR: f64 = 1.054_571_817e-34;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrivePower {
    /// Input power at the sample (W), before modulation.
    InputWatts(f64),
    /// Mean intracavity photon number at the lock point.
    Photons(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveConfig {
    pub omega_c: f64,
    pub beta: f64,
    pub omega_m: f64,
    pub power: DrivePower,
    pub k_max: u32,
    /// Include the (2,1) and (-1,-2) sideband beats in the omega_m component.
    pub second_order_terms: bool,
}

impl DriveConfig {
    pub fn new(omega_c: f64, beta: f64, omega_m: f64, power: DrivePower) -> Self {
        DriveConfig {
            omega_c,
            beta,
            omega_m,
            power,
            k_max: 8,
            second_order_terms: false,
        }
    }

    pub fn validate(&self, cav: &CavityParams) -> Result<()> {
        if !(self.omega_c > 0.0) || !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config("carrier frequency must be positive and beta >= 0".into()));
        }
        if !(self.omega_m > 5.0 * cav.kappa_tot()) {
            return Err(Error::Config(format!(
                "modulation frequency {:.4e} rad/s must exceed 5 kappa_tot = {:.4e} rad/s",
                self.omega_m,
                5.0 * cav.kappa_tot()
            )));
        }
        let kept: f64 = (-(self.k_max as i32)..=self.k_max as i32)
            .map(|k| bessel_j(k, self.beta).powi(2))
            .sum();
        if kept < 1.0 - 1e-6 {
            return Err(Error::Config(format!(
                "k_max = {} keeps only {:.8} of the drive power at beta = {}",
                self.k_max, kept, self.beta
            )));
        }
        match self.power {
            DrivePower::InputWatts(p) | DrivePower::Photons(p) if !(p >= 0.0 && p.is_finite()) => {
                Err(Error::Config(format!("drive power must be finite and >= 0, got {p}")))
            }
            _ => Ok(()),
        }
    }

    pub fn carrier_weight(&self) -> f64 {
        bessel_j(0, self.beta)
    }

    /// Input power (W). A photon-number target converts through the
    /// zero-detuning carrier occupation n = 4 ke J0^2 P / (hbar wc k^2).
    pub fn input_power(&self, cav: &CavityParams) -> f64 {
        match self.power {
            DrivePower::InputWatts(p) => p,
            DrivePower::Photons(n) => {
                let k = cav.kappa_tot();
                let j0 = self.carrier_weight();
                n * HBAR * self.omega_c * k * k / (4.0 * cav.kappa_ext * j0 * j0)
            }
        }
    }

    /// Mean intracavity photons at zero effective detuning.
    pub fn photon_number(&self, cav: &CavityParams) -> f64 {
        match self.power {
            DrivePower::Photons(n) => n,
            DrivePower::InputWatts(p) => {
                let k = cav.kappa_tot();
                let j0 = self.carrier_weight();
                4.0 * cav.kappa_ext * j0 * j0 * p / (HBAR * self.omega_c * k * k)
            }
        }
    }
}

pub fn reflection_coefficient(k: i32, delta_omega0: f64, cav: &CavityParams, omega_m: f64) -> Complex64 {
    let re = k as f64 * omega_m - delta_omega0;
    let num = Complex64::new(re, 0.5 * (cav.kappa_int - cav.kappa_ext));
    let den = Complex64::new(re, 0.5 * cav.kappa_tot());
    num / den
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KerrSolution {
    pub n: f64,
    /// All nonnegative real roots, ascending.
    pub roots: Vec<f64>,
    pub bistable: bool,
}

/// Real roots of x^3 + b2 x^2 + b1 x + b0, ascending, Newton-polished.
fn real_cubic_roots(b2: f64, b1: f64, b0: f64) -> Vec<f64> {
    let p = b1 - b2 * b2 / 3.0;
    let q = 2.0 * b2 * b2 * b2 / 27.0 - b2 * b1 / 3.0 + b0;
    let shift = -b2 / 3.0;
    let disc = q * q / 4.0 + p * p * p / 27.0;
    let mut roots = if disc > 0.0 {
        let s = disc.sqrt();
        let u = (-q / 2.0 + s).cbrt();
        let v = (-q / 2.0 - s).cbrt();
        vec![u + v + shift]
    } else if p == 0.0 {
        vec![shift]
    } else {
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + shift)
            .collect()
    };
    for r in roots.iter_mut() {
        for _ in 0..4 {
            let f = ((*r + b2) * *r + b1) * *r + b0;
            let df = (3.0 * *r + 2.0 * b2) * *r + b1;
            if df == 0.0 {
                break;
            }
            let step = f / df;
            if !step.is_finite() {
                break;
            }
            *r -= step;
        }
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots
}

/// Residual of the photon-number cubic relative to its largest term.
pub fn kerr_residual(n: f64, delta: f64, cav: &CavityParams, drive_rate: f64) -> f64 {
    let k = cav.kerr_k;
    let kt = cav.kappa_tot();
    let terms = [
        n * n * n * k * k,
        2.0 * delta * k * n * n,
        (delta * delta + 0.25 * kt * kt) * n,
        -cav.kappa_ext * drive_rate,
    ];
    let scale = terms.iter().map(|t| t.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        terms.iter().sum::<f64>().abs() / scale
    }
}

/// Carrier photon flux into the cavity (1/s): J0^2 P / (hbar wc).
pub fn carrier_photon_flux(cav: &CavityParams, drive: &DriveConfig) -> f64 {
    let j0 = drive.carrier_weight();
    j0 * j0 * drive.input_power(cav) / (HBAR * drive.omega_c)
}

fn kerr_roots(delta: f64, cav: &CavityParams, flux: f64) -> Vec<f64> {
    let kt = cav.kappa_tot();
    let k = cav.kerr_k;
    let drive = cav.kappa_ext * flux;
    if k == 0.0 {
        return vec![drive / (delta * delta + 0.25 * kt * kt)];
    }
    // x = K n turns the cubic into x((x + delta)^2 + kappa^2/4) = K * drive,
    // so every real x shares the sign of K and every n is positive.
    let mut n: Vec<f64> = real_cubic_roots(2.0 * delta, delta * delta + 0.25 * kt * kt, -k * drive)
        .into_iter()
        .map(|x| x / k)
        .filter(|n| *n >= 0.0)
        .collect();
    n.sort_by(|a, b| a.partial_cmp(b).unwrap());
    n.dedup();
    n
}

fn kerr_solution(roots: Vec<f64>, prefer: Option<f64>) -> Result<KerrSolution> {
    if roots.is_empty() {
        return Err(Error::Invariant("photon-number cubic has no nonnegative root".into()));
    }
    let n = match prefer {
        Some(prev) => *roots
            .iter()
            .min_by(|a, b| (*a - prev).abs().partial_cmp(&(*b - prev).abs()).unwrap())
            .unwrap(),
        None => roots[0],
    };
    Ok(KerrSolution {
        n,
        bistable: roots.len() == 3,
        roots,
    })
}

/// Intracavity photon number with the carrier offset by `delta_omega0`;
/// on the bistable interval the low branch is returned.
pub fn kerr_photon_number(delta_omega0: f64, cav: &CavityParams, drive: &DriveConfig) -> Result<KerrSolution> {
    kerr_solution(kerr_roots(delta_omega0, cav, carrier_photon_flux(cav, drive)), None)
}

/// Follows one branch through a sweep, switching only at folds.
#[derive(Debug, Clone)]
pub struct KerrTracker {
    flux: f64,
    prev: Option<f64>,
}

impl KerrTracker {
    pub fn new(cav: &CavityParams, drive: &DriveConfig) -> Self {
        KerrTracker {
            flux: carrier_photon_flux(cav, drive),
            prev: None,
        }
    }

    pub fn solve(&mut self, delta_omega0: f64, cav: &CavityParams) -> Result<KerrSolution> {
        let sol = kerr_solution(kerr_roots(delta_omega0, cav, self.flux), self.prev)?;
        self.prev = Some(sol.n);
        Ok(sol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadratures {
    pub x: f64,
    pub y: f64,
    pub dc: f64,
    /// Photon number when the Kerr shift was applied.
    pub photons: Option<f64>,
    pub bistable: bool,
}

/// Bessel weights of the omega_m beat, precomputed for repeated evaluation.
#[derive(Debug, Clone)]
pub struct BeatKernel {
    terms: Vec<(i32, f64)>,
    p_in: f64,
    omega_m: f64,
}

impl BeatKernel {
    pub fn new(cav: &CavityParams, drive: &DriveConfig) -> Self {
        let ks: &[i32] = if drive.second_order_terms { &[-1, 0, 1, 2] } else { &[0, 1] };
        BeatKernel {
            terms: ks
                .iter()
                .map(|&k| (k, bessel_j(k, drive.beta) * bessel_j(k - 1, drive.beta)))
                .collect(),
            p_in: drive.input_power(cav),
            omega_m: drive.omega_m,
        }
    }

    /// (X, Y) in W at effective detuning `delta_eff`.
    pub fn eval(&self, delta_eff: f64, cav: &CavityParams) -> (f64, f64) {
        let b: Complex64 = self
            .terms
            .iter()
            .map(|&(k, w)| {
                w * reflection_coefficient(k, delta_eff, cav, self.omega_m)
                    * reflection_coefficient(k - 1, delta_eff, cav, self.omega_m).conj()
            })
            .sum::<Complex64>()
            * self.p_in;
        (2.0 * b.re, -2.0 * b.im)
    }
}

fn quadratures_at(delta_eff: f64, cav: &CavityParams, drive: &DriveConfig) -> (f64, f64, f64) {
    let p = drive.input_power(cav);
    let (x, y) = BeatKernel::new(cav, drive).eval(delta_eff, cav);
    let km = drive.k_max as i32;
    let dc = (-km..=km)
        .map(|k| bessel_j(k, drive.beta).powi(2) * reflection_coefficient(k, delta_eff, cav, drive.omega_m).norm_sqr())
        .sum::<f64>()
        * p;
    (x, y, dc)
}

/// Lock-in quadratures of the omega_m component (W) and the mean reflected power.
pub fn error_quadratures(delta_omega0: f64, cav: &CavityParams, drive: &DriveConfig, kerr: bool) -> Result<Quadratures> {
    let (delta_eff, photons, bistable) = if kerr && cav.kerr_k != 0.0 {
        let sol = kerr_photon_number(delta_omega0, cav, drive)?;
        (delta_omega0 + cav.kerr_k * sol.n, Some(sol.n), sol.bistable)
    } else {
        (delta_omega0, None, false)
    };
    let (x, y, dc) = quadratures_at(delta_eff, cav, drive);
    Ok(Quadratures {
        x,
        y,
        dc,
        photons,
        bistable,
    })
}

/// Quadratures with the Kerr branch taken from a tracker.
pub fn error_quadratures_tracked(
    delta_omega0: f64,
    cav: &CavityParams,
    drive: &DriveConfig,
    tracker: &mut KerrTracker,
) -> Result<Quadratures> {
    if cav.kerr_k == 0.0 {
        return error_quadratures(delta_omega0, cav, drive, false);
    }
    let sol = tracker.solve(delta_omega0, cav)?;
    let (x, y, dc) = quadratures_at(delta_omega0 + cav.kerr_k * sol.n, cav, drive);
    Ok(Quadratures {
        x,
        y,
        dc,
        photons: Some(sol.n),
        bistable: sol.bistable,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidebandResponse {
    pub r: BTreeMap<i32, Complex64>,
    pub dc_power: f64,
    pub p_m_cos: f64,
    pub p_m_sin: f64,
    pub p_2m_cos: f64,
    pub p_2m_sin: f64,
}

impl SidebandResponse {
    /// Harmonic amplitudes (cos, sin) of the reflected power up to 2 k_max.
    pub fn harmonics(&self, drive: &DriveConfig, p_in: f64) -> Vec<(f64, f64)> {
        let km = drive.k_max as i32;
        (1..=2 * km)
            .map(|j| {
                let b: Complex64 = ((j - km)..=km)
                    .map(|k| {
                        bessel_j(k, drive.beta) * bessel_j(k - j, drive.beta) * self.r[&k] * self.r[&(k - j)].conj()
                    })
                    .sum::<Complex64>()
                    * p_in;
                (2.0 * b.re, 2.0 * b.im)
            })
            .collect()
    }
}

/// Full sideband picture: every r_k within k_max and the exact omega_m and
/// 2 omega_m power components summed over all retained sidebands.
pub fn sideband_response(
    delta_omega0: f64,
    cav: &CavityParams,
    drive: &DriveConfig,
    kerr: bool,
) -> Result<SidebandResponse> {
    let delta = if kerr && cav.kerr_k != 0.0 {
        delta_omega0 + cav.kerr_k * kerr_photon_number(delta_omega0, cav, drive)?.n
    } else {
        delta_omega0
    };
    let km = drive.k_max as i32;
    let r: BTreeMap<i32, Complex64> = (-km..=km)
        .map(|k| (k, reflection_coefficient(k, delta, cav, drive.omega_m)))
        .collect();
    let p = drive.input_power(cav);
    let dc_power = (-km..=km).map(|k| bessel_j(k, drive.beta).powi(2) * r[&k].norm_sqr()).sum::<f64>() * p;
    let mut out = SidebandResponse {
        r,
        dc_power,
        p_m_cos: 0.0,
        p_m_sin: 0.0,
        p_2m_cos: 0.0,
        p_2m_sin: 0.0,
    };
    let h = out.harmonics(drive, p);
    out.p_m_cos = h[0].0;
    out.p_m_sin = h[0].1;
    out.p_2m_cos = h[1].0;
    out.p_2m_sin = h[1].1;
    Ok(out)
}

/// Small-signal error signal for a bias offset: 16 ke J0 J1 P g db / (k^2 + 4 g^2 db^2).
pub fn small_signal_y(delta_b: f64, g_b: f64, cav: &CavityParams, drive: &DriveConfig) -> f64 {
    let kt = cav.kappa_tot();
    let d = g_b * delta_b;
    16.0 * cav.kappa_ext * drive.carrier_weight() * bessel_j(1, drive.beta) * drive.input_power(cav) * d
        / (kt * kt + 4.0 * d * d)
}

/// DC open-loop gain (V per unit gate bias): (4 J1/J0) n hbar w0 g_b G_amp.
pub fn open_loop_gain(cav: &CavityParams, drive: &DriveConfig, bias: BiasPoint, g_amp: f64) -> Result<f64> {
    if !(drive.beta > 0.0 && drive.beta < J0_FIRST_ZERO - 1e-3) {
        return Err(Error::Config(format!(
            "beta = {} leaves no usable carrier (needs 0 < beta < {:.4})",
            drive.beta, J0_FIRST_ZERO
        )));
    }
    let g_b = coupling_coefficient(bias, cav, BiasAxis::Gate)?;
    let omega0 = resonant_frequency(bias, cav, Parity::Even)?;
    let ratio = bessel_j(1, drive.beta) / bessel_j(0, drive.beta);
    Ok(4.0 * ratio * drive.photon_number(cav) * HBAR * omega0 * g_b * g_amp)
}

/// Carrier placed on the Kerr-shifted resonance: omega_c = omega0 + K n.
pub fn kerr_shifted_carrier(omega0: f64, cav: &CavityParams, photons: f64) -> f64 {
    omega0 + cav.kerr_k * photons
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::CptParams;
    use std::f64::consts::PI;

    fn cav(kerr: f64) -> CavityParams {
        CavityParams::new(2.0 * PI * 5.757e9, 2.0 * PI * 0.3e6, 2.0 * PI * 0.97e6, kerr, CptParams::default()).unwrap()
    }

    fn drive(beta: f64, n: f64) -> DriveConfig {
        DriveConfig::new(2.0 * PI * 5.757e9, beta, 2.0 * PI * 30e6, DrivePower::Photons(n))
    }

    #[test]
    fn reflection_trivial_points() {
        let c = CavityParams::new(1e10, 1e6, 1e6, 0.0, CptParams::default()).unwrap();
        assert!(reflection_coefficient(0, 0.0, &c, 1e8).norm() < 1e-15);
        let lossless = CavityParams::new(1e10, 0.0, 1e6, 0.0, CptParams::default()).unwrap();
        let r = reflection_coefficient(0, 0.0, &lossless, 1e8);
        assert!((r + 1.0).norm() < 1e-15);
    }

    #[test]
    fn first_sideband_phase() {
        let c = cav(0.0);
        let r = reflection_coefficient(1, 0.0, &c, 2.0 * PI * 30e6);
        let direct = {
            let re = 2.0 * PI * 30e6;
            let num = Complex64::new(re, PI * (0.3e6 - 0.97e6));
            let den = Complex64::new(re, PI * 1.27e6);
            num / den
        };
        assert!((r - direct).norm() < 1e-15);
        assert!((1.0 - r.norm()).abs() < 1e-3);
        assert!((r.arg() + c.kappa_ext / (2.0 * PI * 30e6)).abs() < 5e-4, "{}", r.arg());
    }

    #[test]
    fn kerr_reduces_to_lorentzian() {
        let c = cav(0.0);
        let d = drive(1.84, 10.0);
        let delta = 2.0 * PI * 0.2e6;
        let n = kerr_photon_number(delta, &c, &d).unwrap().n;
        let flux = carrier_photon_flux(&c, &d);
        let want = c.kappa_ext * flux / (delta * delta + 0.25 * c.kappa_tot().powi(2));
        assert!((n - want).abs() < 1e-12 * want);
        let at_zero = kerr_photon_number(0.0, &c, &d).unwrap().n;
        assert!((at_zero - 10.0).abs() < 1e-9);
    }

    #[test]
    fn cubic_roots_against_companion_matrix() {
        let c = cav(-2.0 * PI * 5e6);
        let d = drive(1.84, 10.0);
        let flux = carrier_photon_flux(&c, &d);
        let mut seen_bistable = false;
        for i in 0..400 {
            let delta = 2.0 * PI * (-2e6 + 8e6 * i as f64 / 399.0);
            let k = c.kerr_k;
            let a = [
                -(-c.kappa_ext * flux) / (k * k),
                -(delta * delta + 0.25 * c.kappa_tot().powi(2)) / (k * k),
                -(2.0 * delta * k) / (k * k),
            ];
            let m = nalgebra::Matrix3::new(0.0, 0.0, a[0], 1.0, 0.0, a[1], 0.0, 1.0, a[2]);
            let ev = m.complex_eigenvalues();
            let mut real: Vec<f64> = ev.iter().filter(|z| z.im.abs() < 1e-6 * z.norm()).map(|z| z.re).collect();
            real.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let sol = kerr_photon_number(delta, &c, &d).unwrap();
            assert_eq!(sol.roots.len(), real.len(), "delta {delta}: {:?} vs {:?}", sol.roots, real);
            for (x, y) in sol.roots.iter().zip(&real) {
                assert!((x - y).abs() < 1e-6 * y.abs().max(1.0));
                assert!(kerr_residual(*x, delta, &c, flux) < 1e-10);
            }
            seen_bistable |= sol.bistable;
        }
        assert!(seen_bistable);
    }

    #[test]
    fn tracker_follows_branch_with_hysteresis() {
        let c = cav(-2.0 * PI * 0.5e6);
        let d = drive(1.84, 10.0);
        let grid: Vec<f64> = (0..2001).map(|i| 2.0 * PI * (-3e6 + 13e6 * i as f64 / 2000.0)).collect();
        let mut up = KerrTracker::new(&c, &d);
        let fwd: Vec<KerrSolution> = grid.iter().map(|&x| up.solve(x, &c).unwrap()).collect();
        let mut down = KerrTracker::new(&c, &d);
        let back: Vec<KerrSolution> = grid.iter().rev().map(|&x| down.solve(x, &c).unwrap()).collect();
        let jumps = |s: &[KerrSolution]| {
            s.windows(2)
                .filter(|w| (w[1].n - w[0].n).abs() > 0.2 * w[0].n.max(w[1].n))
                .count()
        };
        assert_eq!(jumps(&fwd), 1);
        assert_eq!(jumps(&back), 1);
        let differ = fwd
            .iter()
            .zip(back.iter().rev())
            .filter(|(a, b)| (a.n - b.n).abs() > 1e-6 * a.n)
            .count();
        assert!(differ > 0);
    }

    #[test]
    fn quadrature_basics() {
        let c = cav(0.0);
        let d = drive(1.84, 10.0);
        let q = error_quadratures(0.0, &c, &d, false).unwrap();
        assert!(q.y.abs() < 1e-12 * q.dc);
        for &x in &[0.1e6, 0.4e6, 1.0e6, 3.0e6] {
            let a = error_quadratures(2.0 * PI * x, &c, &d, false).unwrap();
            let b = error_quadratures(-2.0 * PI * x, &c, &d, false).unwrap();
            assert!((a.y + b.y).abs() < 1e-12 * a.y.abs());
            assert!((a.x + b.x).abs() < 1e-12 * a.dc);
        }
    }

    #[test]
    fn kerr_zero_crossing() {
        let c = cav(-2.0 * PI * 80e3);
        let d = drive(1.84, 10.0);
        let n = kerr_photon_number(-c.kerr_k * 10.0, &c, &d).unwrap().n;
        assert!((n - 10.0).abs() < 1e-9);
        let q = error_quadratures(-c.kerr_k * 10.0, &c, &d, true).unwrap();
        assert!(q.y.abs() < 1e-12 * q.dc);
    }

    #[test]
    fn power_conserved_without_loss() {
        let c = CavityParams::new(2.0 * PI * 5.757e9, 0.0, 2.0 * PI * 1.27e6, 0.0, CptParams::default()).unwrap();
        let d = drive(1.84, 10.0);
        let p = d.input_power(&c);
        let s = sideband_response(2.0 * PI * 0.3e6, &c, &d, false).unwrap();
        let kept: f64 = (-8..=8).map(|k| bessel_j(k, 1.84).powi(2)).sum();
        assert!((s.dc_power - p * kept).abs() < 1e-6 * p);
        for r in s.r.values() {
            assert!((r.norm() - 1.0).abs() < 1e-14);
        }
        // Time-average of the reconstructed waveform equals the dc term.
        let h = s.harmonics(&d, p);
        let m = 4096;
        let mean: f64 = (0..m)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / m as f64;
                s.dc_power
                    + h.iter()
                        .enumerate()
                        .map(|(j, (a, b))| a * ((j + 1) as f64 * t).cos() + b * ((j + 1) as f64 * t).sin())
                        .sum::<f64>()
            })
            .sum::<f64>()
            / m as f64;
        assert!((mean - p * kept).abs() < 1e-6 * p);
    }

    #[test]
    fn second_order_terms_are_small() {
        let c = cav(0.0);
        let mut d = drive(1.84, 10.0);
        let a = error_quadratures(2.0 * PI * 0.5e6, &c, &d, false).unwrap();
        d.second_order_terms = true;
        let b = error_quadratures(2.0 * PI * 0.5e6, &c, &d, false).unwrap();
        assert!(a.y != b.y);
        assert!((a.y - b.y).abs() < 0.05 * a.y.abs());
    }

    #[test]
    fn small_signal_limit() {
        let c = cav(0.0);
        let d = drive(1.84, 10.0);
        let g = -2.0 * PI * 180e6;
        let kt = c.kappa_tot();
        let peak = small_signal_y(0.5 * kt / g, g, &c, &d);
        let want = 4.0 * bessel_j(0, 1.84) * bessel_j(1, 1.84) * d.input_power(&c) * c.kappa_ext / kt;
        assert!((peak - want).abs() < 1e-12 * want);
        let mut worst: f64 = 0.0;
        for i in -50..=50 {
            let db = kt / g.abs() * i as f64 / 50.0;
            let a = small_signal_y(db, g, &c, &d);
            let b = error_quadratures(g * db, &c, &d, false).unwrap().y;
            worst = worst.max((a - b).abs() / want);
        }
        assert!(worst < 0.01, "{worst}");
    }

    #[test]
    fn truncation_check() {
        let c = cav(0.0);
        let mut d = drive(1.84, 1.0);
        d.k_max = 3;
        assert!(matches!(d.validate(&c), Err(Error::Config(_))));
        d.k_max = 8;
        d.validate(&c).unwrap();
        d.omega_m = 2.0 * c.kappa_tot();
        assert!(d.validate(&c).is_err());
    }
}
