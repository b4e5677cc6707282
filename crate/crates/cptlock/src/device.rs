//! Cooper pair transistor ground band and the tunable cavity resonance.
//!
//! Energies are expressed as frequencies (E/h, Hz). The inverse inductance is
//! the curvature of the ground energy in external flux, in Hz per flux quantum
//! squared; the conversion factor to a cavity shift is absorbed by the
//! tunability calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GATE_STEP: f64 = 1e-4;
pub const FLUX_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-6;
/// Bias step for slopes of the resonance. Larger than the curvature step so
/// that rounding in the resonance is divided by a larger step.
pub const SLOPE_STEP: f64 = 1e-3;
/// Tolerance for slopes of the resonance. The resonance is itself a
/// second difference, so its rounding noise is amplified by 1/step.
pub const COUPLING_REL_TOL: f64 = 1e-3;

/// Gate polarization and external flux (flux quanta).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub ng: f64,
    pub phi: f64,
}

fn wrap(x: f64, period: f64) -> f64 {
    let r = x - period * ((x + 0.5 * period) / period).floor();
    if r >= 0.5 * period {
        r - period
    } else {
        r
    }
}

impl BiasPoint {
    pub fn new(ng: f64, phi: f64) -> Self {
        BiasPoint { ng, phi }
    }

    /// n_g into [-1, 1), phi into [-0.5, 0.5).
    pub fn reduced(&self) -> BiasPoint {
        BiasPoint {
            ng: wrap(self.ng, 2.0),
            phi: wrap(self.phi, 1.0),
        }
    }

    fn check(&self) -> Result<()> {
        if self.ng.is_finite() && self.phi.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("non-finite bias ({}, {})", self.ng, self.phi)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasAxis {
    Gate,
    Flux,
}

/// Transistor energies, as E/h in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CptParams {
    pub ec_hz: f64,
    pub ej0_hz: f64,
    pub n_trunc: usize,
}

impl Default for CptParams {
    fn default() -> Self {
        CptParams {
            ec_hz: 10e9,
            ej0_hz: 5e9,
            n_trunc: 10,
        }
    }
}

impl CptParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ec_hz > 0.0 && self.ec_hz.is_finite()) || !(self.ej0_hz > 0.0 && self.ej0_hz.is_finite()) {
            return Err(Error::Config(format!(
                "E_c and E_J0 must be positive, got {} and {}",
                self.ec_hz, self.ej0_hz
            )));
        }
        if self.n_trunc < 2 {
            return Err(Error::Config(format!("n_trunc must be at least 2, got {}", self.n_trunc)));
        }
        Ok(())
    }

    /// E_J(phi) = E_J0 |cos(pi phi)|.
    pub fn josephson_energy(&self, phi: f64) -> f64 {
        self.ej0_hz * (std::f64::consts::PI * phi).cos().abs()
    }
}

/// Maps the inverse inductance onto the cavity resonance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum TunabilityModel {
    Uncalibrated,
    /// omega0 = omega_bare - coupling * (1/L) + offset
    Participation { coupling: f64, offset: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityParams {
    pub omega_bare: f64,
    pub kappa_int: f64,
    pub kappa_ext: f64,
    pub kerr_k: f64,
    pub cpt: CptParams,
    pub tunability: TunabilityModel,
}

impl CavityParams {
    pub fn new(omega_bare: f64, kappa_int: f64, kappa_ext: f64, kerr_k: f64, cpt: CptParams) -> Result<Self> {
        let c = CavityParams {
            omega_bare,
            kappa_int,
            kappa_ext,
            kerr_k,
            cpt,
            tunability: TunabilityModel::Uncalibrated,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.cpt.validate()?;
        if !(self.kappa_int >= 0.0) || !(self.kappa_ext > 0.0) {
            return Err(Error::Config(format!(
                "damping rates must satisfy kappa_int >= 0, kappa_ext > 0 (got {}, {})",
                self.kappa_int, self.kappa_ext
            )));
        }
        if !(self.omega_bare > 0.0) || !self.kerr_k.is_finite() {
            return Err(Error::Config("omega_bare must be positive and K finite".into()));
        }
        Ok(())
    }

    pub fn kappa_tot(&self) -> f64 {
        self.kappa_int + self.kappa_ext
    }

    /// Fit the participation map so the resonance spans `span` (rad/s) over
    /// the calibration grid, centered on omega_bare.
    pub fn calibrate(&mut self, span: f64, grid: &CalibrationGrid) -> Result<()> {
        if !(span > 0.0) {
            return Err(Error::Config(format!("tunability span must be positive, got {span}")));
        }
        let (lo, hi) = grid.inverse_inductance_range(&self.cpt)?;
        if !(hi > lo) {
            return Err(Error::Calibration("inverse inductance is flat over the calibration grid".into()));
        }
        let coupling = span / (hi - lo);
        self.tunability = TunabilityModel::Participation {
            coupling,
            offset: coupling * 0.5 * (hi + lo),
        };
        Ok(())
    }

    pub fn calibrated(mut self, span: f64) -> Result<Self> {
        self.calibrate(span, &CalibrationGrid::default())?;
        Ok(self)
    }
}

/// Bias grid over which the tunability span is measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationGrid {
    pub phi: f64,
    pub ng_lo: f64,
    pub ng_hi: f64,
    pub points: usize,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        CalibrationGrid {
            phi: 0.0,
            ng_lo: -1.0,
            ng_hi: 1.0,
            points: 201,
        }
    }
}

impl CalibrationGrid {
    fn inverse_inductance_range(&self, cpt: &CptParams) -> Result<(f64, f64)> {
        let n = self.points.max(2);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let ng = self.ng_lo + (self.ng_hi - self.ng_lo) * i as f64 / (n - 1) as f64;
            let v = josephson_inductance_inv(BiasPoint::new(ng, self.phi), cpt, FLUX_STEP)?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok((lo, hi))
    }
}

/// Lowest eigenvalue of a symmetric tridiagonal matrix with constant
/// off-diagonal, by Sturm-sequence bisection to the last representable bit.
fn lowest_eigenvalue(diag: &[f64], off: f64) -> f64 {
    let e2 = off * off;
    let count_below = |x: f64| -> usize {
        let mut count = 0;
        let mut q = diag[0] - x;
        if q < 0.0 {
            count += 1;
        }
        for &d in &diag[1..] {
            let prev = if q == 0.0 { f64::MIN_POSITIVE } else { q };
            q = (d - x) - e2 / prev;
            if q < 0.0 {
                count += 1;
            }
        }
        count
    };
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut lo = dmin - 2.0 * off.abs();
    let mut hi = dmin;
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count_below(mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn ground_energy_reduced(ng_abs: f64, phi_abs: f64, cpt: &CptParams) -> f64 {
    let nt = cpt.n_trunc as i64;
    let diag: Vec<f64> = (-nt..=nt)
        .map(|n| {
            let x = n as f64 - 0.5 * ng_abs;
            4.0 * cpt.ec_hz * x * x
        })
        .collect();
    lowest_eigenvalue(&diag, cpt.josephson_energy(phi_abs))
}

/// Ground energy of the transistor Hamiltonian (Hz).
pub fn cpt_ground_energy(bias: BiasPoint, cpt: &CptParams) -> Result<f64> {
    bias.check()?;
    cpt.validate()?;
    let b = bias.reduced();
    Ok(ground_energy_reduced(b.ng.abs(), b.phi.abs(), cpt))
}

fn flux_curvature(ng_abs: f64, phi: f64, cpt: &CptParams, h: f64) -> f64 {
    let e = |p: f64| ground_energy_reduced(ng_abs, wrap(p, 1.0).abs(), cpt);
    ((e(phi + h) + e(phi - h)) - 2.0 * e(phi)) / (h * h)
}

/// Inverse Josephson inductance as d²E0/dphi² (Hz per flux quantum squared).
pub fn josephson_inductance_inv(bias: BiasPoint, cpt: &CptParams, step: f64) -> Result<f64> {
    bias.check()?;
    cpt.validate()?;
    if !(step > 0.0) {
        return Err(Error::Domain(format!("flux step must be positive, got {step}")));
    }
    let b = bias.reduced();
    let ng = b.ng.abs();
    let coarse = flux_curvature(ng, b.phi, cpt, step);
    let fine = flux_curvature(ng, b.phi, cpt, 0.5 * step);
    if (coarse - fine).abs() > REL_TOL * (fine.abs() + cpt.ej0_hz) {
        return Err(Error::Accuracy {
            what: "inverse inductance",
            first: coarse,
            second: fine,
        });
    }
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Cavity resonance (rad/s). Odd parity shifts the island charge by one electron.
pub fn resonant_frequency(bias: BiasPoint, cav: &CavityParams, parity: Parity) -> Result<f64> {
    let (coupling, offset) = match cav.tunability {
        TunabilityModel::Participation { coupling, offset } => (coupling, offset),
        TunabilityModel::Uncalibrated => {
            return Err(Error::Config("tunability model is not calibrated".into()));
        }
    };
    let b = match parity {
        Parity::Even => bias,
        Parity::Odd => BiasPoint::new(bias.ng - 1.0, bias.phi),
    };
    let inv_l = josephson_inductance_inv(b, &cav.cpt, FLUX_STEP)?;
    Ok(cav.omega_bare - coupling * inv_l + offset)
}

fn central_slope(bias: BiasPoint, cav: &CavityParams, axis: BiasAxis, parity: Parity, h: f64) -> Result<f64> {
    let shifted = |d: f64| match axis {
        BiasAxis::Gate => BiasPoint::new(bias.ng + d, bias.phi),
        BiasAxis::Flux => BiasPoint::new(bias.ng, bias.phi + d),
    };
    let up = resonant_frequency(shifted(h), cav, parity)?;
    let down = resonant_frequency(shifted(-h), cav, parity)?;
    Ok((up - down) / (2.0 * h))
}

/// d omega0 / d bias (rad/s per unit bias) for even parity.
pub fn coupling_coefficient(bias: BiasPoint, cav: &CavityParams, axis: BiasAxis) -> Result<f64> {
    coupling_coefficient_with_parity(bias, cav, axis, Parity::Even)
}

pub fn coupling_coefficient_with_parity(
    bias: BiasPoint,
    cav: &CavityParams,
    axis: BiasAxis,
    parity: Parity,
) -> Result<f64> {
    // The surface is even about these lines, so the slope across them is
    // exactly zero; differencing there only measures rounding.
    let r = bias.reduced();
    let on_mirror = match axis {
        BiasAxis::Gate => r.ng.abs() == 0.0 || r.ng.abs() == 1.0,
        BiasAxis::Flux => r.phi.abs() == 0.0 || r.phi.abs() == 0.5,
    };
    if on_mirror {
        return Ok(0.0);
    }
    let h = SLOPE_STEP;
    let coarse = central_slope(bias, cav, axis, parity, h)?;
    let fine = central_slope(bias, cav, axis, parity, 0.5 * h)?;
    let scale = match cav.tunability {
        TunabilityModel::Participation { coupling, .. } => coupling * cav.cpt.ej0_hz,
        TunabilityModel::Uncalibrated => 0.0,
    };
    if (coarse - fine).abs() > COUPLING_REL_TOL * (fine.abs() + scale) {
        return Err(Error::Accuracy {
            what: "coupling coefficient",
            first: coarse,
            second: fine,
        });
    }
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Tabulated resonance along the gate axis at fixed flux, for the stepping
/// engine. Cubic Hermite in n_g over [0, 1] using the even symmetry about
/// n_g = 0 and n_g = 1; optional second-order flux expansion.
#[derive(Debug, Clone)]
pub struct ResonanceTable {
    phi0: f64,
    h: f64,
    omega: Vec<f64>,
    slope: Vec<f64>,
    flux: Option<(Vec<f64>, Vec<f64>)>,
}

impl ResonanceTable {
    pub fn build(cav: &CavityParams, phi0: f64, intervals: usize, with_flux: bool) -> Result<Self> {
        let m = intervals.max(16);
        let h = 1.0 / m as f64;
        let pad = 2;
        let node = |i: i64| -> Result<f64> {
            let ng = i as f64 * h;
            resonant_frequency(BiasPoint::new(ng, phi0), cav, Parity::Even)
        };
        let raw: Vec<f64> = (-pad..=(m as i64 + pad)).map(node).collect::<Result<_>>()?;
        let at = |i: usize| raw[i + pad as usize];
        let omega: Vec<f64> = (0..=m).map(at).collect();
        let slope: Vec<f64> = (0..=m)
            .map(|i| {
                let j = i + pad as usize;
                (8.0 * (raw[j + 1] - raw[j - 1]) - (raw[j + 2] - raw[j - 2])) / (12.0 * h)
            })
            .collect();
        let flux = if with_flux {
            let dphi = 1e-2;
            let mut d1 = Vec::with_capacity(m + 1);
            let mut d2 = Vec::with_capacity(m + 1);
            for i in 0..=m {
                let ng = i as f64 * h;
                let f = |p: f64| resonant_frequency(BiasPoint::new(ng, phi0 + p), cav, Parity::Even);
                let (up, mid, down) = (f(dphi)?, omega[i], f(-dphi)?);
                d1.push((up - down) / (2.0 * dphi));
                d2.push((up + down - 2.0 * mid) / (dphi * dphi));
            }
            Some((d1, d2))
        } else {
            None
        };
        Ok(ResonanceTable {
            phi0,
            h,
            omega,
            slope,
            flux,
        })
    }

    pub fn phi0(&self) -> f64 {
        self.phi0
    }

    fn reduce(ng: f64, parity: Parity) -> (f64, f64) {
        let g = match parity {
            Parity::Even => ng,
            Parity::Odd => ng - 1.0,
        };
        let r = wrap(g, 2.0);
        if r < 0.0 {
            (-r, -1.0)
        } else {
            (r, 1.0)
        }
    }

    fn hermite(&self, values: &[f64], slopes: Option<&[f64]>, u: f64) -> (f64, f64) {
        let m = values.len() - 1;
        let x = (u / self.h).min(m as f64);
        let i = (x.floor() as usize).min(m - 1);
        let t = x - i as f64;
        let (y0, y1) = (values[i], values[i + 1]);
        let (s0, s1) = match slopes {
            Some(s) => (s[i] * self.h, s[i + 1] * self.h),
            None => (y1 - y0, y1 - y0),
        };
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * s0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * s1;
        let dv = ((6.0 * t2 - 6.0 * t) * y0 + (3.0 * t2 - 4.0 * t + 1.0) * s0 + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * s1)
            / self.h;
        (v, dv)
    }

    /// Resonance (rad/s) at gate `ng` and flux offset `dphi` from the table flux.
    pub fn omega(&self, ng: f64, dphi: f64, parity: Parity) -> f64 {
        self.eval(ng, dphi, parity).0
    }

    /// Resonance and its gate slope.
    pub fn eval(&self, ng: f64, dphi: f64, parity: Parity) -> (f64, f64) {
        let (u, sign) = Self::reduce(ng, parity);
        let (mut w, dw) = self.hermite(&self.omega, Some(&self.slope), u);
        if let (Some((d1, d2)), true) = (&self.flux, dphi != 0.0) {
            let (a, _) = self.hermite(d1, None, u);
            let (b, _) = self.hermite(d2, None, u);
            w += a * dphi + 0.5 * b * dphi * dphi;
        }
        (w, sign * dw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cavity() -> CavityParams {
        CavityParams::new(
            2.0 * std::f64::consts::PI * 5.757e9,
            2.0 * std::f64::consts::PI * 0.3e6,
            2.0 * std::f64::consts::PI * 0.97e6,
            0.0,
            CptParams::default(),
        )
        .unwrap()
        .calibrated(2.0 * std::f64::consts::PI * 140e6)
        .unwrap()
    }

    #[test]
    fn reduction_ranges() {
        let b = BiasPoint::new(3.25, -0.75).reduced();
        assert_eq!(b.ng, -0.75);
        assert_eq!(b.phi, 0.25);
        assert_eq!(BiasPoint::new(1.0, 0.5).reduced(), BiasPoint::new(-1.0, -0.5));
    }

    #[test]
    fn trivial_energies() {
        let cpt = CptParams::default();
        let e = cpt_ground_energy(BiasPoint::new(0.0, 0.5), &cpt).unwrap();
        assert!(e.abs() < 1e-6 * cpt.ec_hz);
        let e = cpt_ground_energy(BiasPoint::new(1.0, 0.5), &cpt).unwrap();
        assert!((e - cpt.ec_hz).abs() < 1e-6 * cpt.ec_hz);
    }

    #[test]
    fn degenerate_pair_reduction() {
        let cpt = CptParams {
            ec_hz: 1.0,
            ej0_hz: 0.1,
            n_trunc: 10,
        };
        let full = cpt_ground_energy(BiasPoint::new(1.0, 0.0), &cpt).unwrap();
        let two_level = cpt.ec_hz - cpt.ej0_hz;
        assert!((full - two_level).abs() < 0.1f64.powi(2));
    }

    #[test]
    fn bisection_matches_dense_solver() {
        let cpt = CptParams::default();
        for &(ng, phi) in &[(0.0, 0.0), (0.37, 0.1), (0.9, -0.3), (-0.6, 0.45)] {
            let b = BiasPoint::new(ng, phi);
            let nt = cpt.n_trunc as i64;
            let dim = (2 * nt + 1) as usize;
            let mut m = nalgebra::DMatrix::<f64>::zeros(dim, dim);
            for (i, n) in (-nt..=nt).enumerate() {
                m[(i, i)] = 4.0 * cpt.ec_hz * (n as f64 - ng / 2.0).powi(2);
                if i + 1 < dim {
                    let ej = cpt.josephson_energy(phi);
                    m[(i, i + 1)] = ej;
                    m[(i + 1, i)] = ej;
                }
            }
            let dense = m.symmetric_eigenvalues().min();
            let ours = cpt_ground_energy(b, &cpt).unwrap();
            assert!((dense - ours).abs() < 1e-12 * cpt.ec_hz, "{dense} vs {ours}");
        }
    }

    #[test]
    fn invalid_inputs() {
        let cpt = CptParams {
            n_trunc: 1,
            ..CptParams::default()
        };
        assert!(matches!(
            cpt_ground_energy(BiasPoint::new(0.0, 0.0), &cpt),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cpt_ground_energy(BiasPoint::new(f64::NAN, 0.0), &CptParams::default()),
            Err(Error::Domain(_))
        ));
        let raw = CavityParams::new(1e10, 1e6, 1e6, 0.0, CptParams::default()).unwrap();
        assert!(matches!(
            resonant_frequency(BiasPoint::new(0.0, 0.0), &raw, Parity::Even),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn flux_curvature_drops_toward_half_quantum() {
        let cpt = CptParams::default();
        let a = josephson_inductance_inv(BiasPoint::new(0.0, 0.0), &cpt, FLUX_STEP).unwrap();
        let b = josephson_inductance_inv(BiasPoint::new(0.0, 0.4), &cpt, FLUX_STEP).unwrap();
        assert!(a > b);
        let c = josephson_inductance_inv(BiasPoint::new(0.0, -1e-3), &cpt, FLUX_STEP).unwrap();
        let d = josephson_inductance_inv(BiasPoint::new(0.0, 1e-3), &cpt, FLUX_STEP).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn odd_parity_is_shifted_even() {
        let cav = cavity();
        let odd = resonant_frequency(BiasPoint::new(0.6, 0.0), &cav, Parity::Odd).unwrap();
        let even = resonant_frequency(BiasPoint::new(-0.4, 0.0), &cav, Parity::Even).unwrap();
        assert_eq!(odd, even);
    }

    #[test]
    fn gate_slope_signs() {
        let cav = cavity();
        let g0 = coupling_coefficient(BiasPoint::new(0.0, 0.0), &cav, BiasAxis::Gate).unwrap();
        assert_eq!(g0, 0.0);
        let gf = coupling_coefficient(BiasPoint::new(0.3, 0.0), &cav, BiasAxis::Flux).unwrap();
        assert_eq!(gf, 0.0);
        let g = coupling_coefficient(BiasPoint::new(0.6, 0.0), &cav, BiasAxis::Gate).unwrap();
        assert!(g < 0.0);
        let mhz = g.abs() / (2.0 * std::f64::consts::PI);
        assert!(mhz > 1e7 && mhz < 1e9, "{mhz}");
        let a = coupling_coefficient(BiasPoint::new(0.4, 0.0), &cav, BiasAxis::Gate).unwrap();
        let b = coupling_coefficient(BiasPoint::new(-0.4, 0.0), &cav, BiasAxis::Gate).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn table_matches_direct_evaluation() {
        let cav = cavity();
        let table = ResonanceTable::build(&cav, 0.0, 1024, true).unwrap();
        let span = 2.0 * std::f64::consts::PI * 140e6;
        for &ng in &[0.0, 0.123, 0.4, 0.6, 0.622, 0.97, -0.55, 1.3] {
            for parity in [Parity::Even, Parity::Odd] {
                let direct = resonant_frequency(BiasPoint::new(ng, 0.0), &cav, parity).unwrap();
                let (w, dw) = table.eval(ng, 0.0, parity);
                assert!((w - direct).abs() < 1e-6 * span, "{ng} {parity:?}");
                if parity == Parity::Even && ng.abs() < 0.9 {
                    let g = coupling_coefficient(BiasPoint::new(ng, 0.0), &cav, BiasAxis::Gate).unwrap();
                    assert!((dw - g).abs() < 1e-3 * span, "{ng}: {dw} vs {g}");
                }
            }
        }
        let direct = resonant_frequency(BiasPoint::new(0.6, 0.02), &cav, Parity::Even).unwrap();
        let w = table.omega(0.6, 0.02, Parity::Even);
        assert!((w - direct).abs() < 1e-4 * span);
    }
}
