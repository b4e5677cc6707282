//! Welch spectra, charge-noise extraction and spectral model fits.

use nalgebra::{Matrix4, Vector4};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    fn coefficients(&self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinFlag {
    Ok,
    /// Signal above the floor by less than the floor itself.
    LowSnr,
    /// Floor exceeded the signal; value clipped to zero.
    Clipped,
}

impl BinFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            BinFlag::Ok => "ok",
            BinFlag::LowSnr => "low_snr",
            BinFlag::Clipped => "clipped",
        }
    }
}

/// One-sided spectral density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
    pub unit: String,
    pub n_segments: usize,
    pub segment_len: usize,
    pub window: Window,
    pub overlap: f64,
    pub low_confidence: bool,
    pub flags: Vec<BinFlag>,
    /// Signal-to-floor ratio per bin when a floor was subtracted.
    pub snr: Option<Vec<f64>>,
}

impl PsdEstimate {
    /// Wrap analytic or externally computed values.
    pub fn from_values(freqs: Vec<f64>, values: Vec<f64>, unit: impl Into<String>) -> Result<Self> {
        if freqs.len() != values.len() || freqs.is_empty() {
            return Err(Error::Domain("frequency and value arrays must match and be non-empty".into()));
        }
        let n = freqs.len();
        Ok(PsdEstimate {
            freqs,
            values,
            unit: unit.into(),
            n_segments: 1,
            segment_len: 0,
            window: Window::Rectangular,
            overlap: 0.0,
            low_confidence: false,
            flags: vec![BinFlag::Ok; n],
            snr: None,
        })
    }

    pub fn resolution(&self) -> f64 {
        if self.freqs.len() > 1 {
            self.freqs[1] - self.freqs[0]
        } else {
            0.0
        }
    }

    /// Linear interpolation onto another frequency axis.
    pub fn interpolate(&self, f: f64) -> f64 {
        let fr = &self.freqs;
        if f <= fr[0] {
            return self.values[0];
        }
        if f >= fr[fr.len() - 1] {
            return self.values[fr.len() - 1];
        }
        let i = fr.partition_point(|&x| x <= f) - 1;
        let t = (f - fr[i]) / (fr[i + 1] - fr[i]);
        self.values[i] * (1.0 - t) + self.values[i + 1] * t
    }

    pub fn band_indices(&self, f_lo: f64, f_hi: f64) -> Vec<usize> {
        (0..self.freqs.len())
            .filter(|&i| self.freqs[i] >= f_lo && self.freqs[i] <= f_hi && self.freqs[i] > 0.0)
            .collect()
    }
}

/// Averaged modified periodograms, one-sided, normalized so white noise of
/// variance s^2 at rate fs reads 2 s^2 / fs. Each segment is mean-removed.
pub fn welch_psd(x: &TimeSeries, segment_len: usize, overlap: f64, window: Window) -> Result<PsdEstimate> {
    if segment_len < 2 || !segment_len.is_power_of_two() {
        return Err(Error::Config(format!("segment length must be a power of two, got {segment_len}")));
    }
    if segment_len > x.len() {
        return Err(Error::Config(format!(
            "segment length {segment_len} exceeds the record length {}",
            x.len()
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    let step = ((segment_len as f64 * (1.0 - overlap)).round() as usize).max(1);
    let count = (x.len() - segment_len) / step + 1;
    let w = window.coefficients(segment_len);
    let wss: f64 = w.iter().map(|v| v * v).sum();
    let fft = FftPlanner::new().plan_fft_forward(segment_len);
    let half = segment_len / 2;
    let mut acc = vec![0.0; half + 1];
    let mut buf = vec![Complex64::new(0.0, 0.0); segment_len];
    for s in 0..count {
        let seg = &x.samples[s * step..s * step + segment_len];
        let mean = seg.iter().sum::<f64>() / segment_len as f64;
        for (b, (v, wi)) in buf.iter_mut().zip(seg.iter().zip(&w)) {
            *b = Complex64::new((v - mean) * wi, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
    }
    let scale = 1.0 / (x.fs * wss * count as f64);
    let values: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let one_sided = if k == 0 || k == half { 1.0 } else { 2.0 };
            a * scale * one_sided
        })
        .collect();
    let df = x.fs / segment_len as f64;
    Ok(PsdEstimate {
        freqs: (0..=half).map(|k| k as f64 * df).collect(),
        values,
        unit: format!("{}^2/Hz", x.unit),
        n_segments: count,
        segment_len,
        window,
        overlap,
        low_confidence: count < 2,
        flags: vec![BinFlag::Ok; half + 1],
        snr: None,
    })
}

/// sqrt of the trapezoidal integral of the PSD over [f_lo, f_hi], with the
/// band edges interpolated.
pub fn rms_over_band(psd: &PsdEstimate, f_lo: f64, f_hi: f64) -> Result<f64> {
    let fr = &psd.freqs;
    if !(f_hi > f_lo) {
        return Err(Error::Domain(format!("empty band [{f_lo}, {f_hi}]")));
    }
    if f_lo < fr[0] || f_hi > fr[fr.len() - 1] {
        return Err(Error::Domain(format!(
            "band [{f_lo}, {f_hi}] Hz outside the estimate support [{}, {}]",
            fr[0],
            fr[fr.len() - 1]
        )));
    }
    let mut pts = vec![(f_lo, psd.interpolate(f_lo))];
    pts.extend(fr.iter().zip(&psd.values).filter(|(f, _)| **f > f_lo && **f < f_hi).map(|(f, v)| (*f, *v)));
    pts.push((f_hi, psd.interpolate(f_hi)));
    let integral: f64 = pts.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
    Ok(integral.max(0.0).sqrt())
}

/// Bias-noise spectrum from the error-signal spectrum: subtract the floor,
/// then divide by g0^2 / (1 + (w / w_lpf)^2).
pub fn extract_charge_psd(
    s_yy: &PsdEstimate,
    floor: Option<&PsdEstimate>,
    g0: f64,
    omega_lpf: f64,
    unit: &str,
) -> Result<PsdEstimate> {
    if g0 == 0.0 || !g0.is_finite() {
        return Err(Error::Config("open-loop gain must be finite and nonzero".into()));
    }
    if !(omega_lpf > 0.0) {
        return Err(Error::Config("sensor pole must be positive".into()));
    }
    let n = s_yy.freqs.len();
    let mut values = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    let mut snr = Vec::with_capacity(n);
    for i in 0..n {
        let f = s_yy.freqs[i];
        let fl = floor.map(|p| p.interpolate(f)).unwrap_or(0.0);
        let sig = s_yy.values[i] - fl;
        let ratio = if fl > 0.0 { sig / fl } else { f64::INFINITY };
        let w = 2.0 * std::f64::consts::PI * f / omega_lpf;
        let gain2 = g0 * g0 / (1.0 + w * w);
        if sig <= 0.0 {
            values.push(0.0);
            flags.push(BinFlag::Clipped);
        } else {
            values.push(sig / gain2);
            flags.push(if ratio < 1.0 { BinFlag::LowSnr } else { BinFlag::Ok });
        }
        snr.push(ratio);
    }
    Ok(PsdEstimate {
        freqs: s_yy.freqs.clone(),
        values,
        unit: unit.to_string(),
        n_segments: s_yy.n_segments,
        segment_len: s_yy.segment_len,
        window: s_yy.window,
        overlap: s_yy.overlap,
        low_confidence: s_yy.low_confidence,
        flags,
        snr: Some(snr),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "hz", rename_all = "snake_case")]
pub enum Corner {
    Resolved(f64),
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFit {
    pub amp_at_1hz: f64,
    pub exponent: f64,
    pub plateau: f64,
    pub corner: Corner,
    /// Best-fit corner even when it lies above the band.
    pub corner_fit_hz: f64,
    /// rms log residual (dB) over the fitted bins.
    pub residual_db: f64,
    pub n_bins: usize,
}

impl NoiseFit {
    pub fn model(&self, f: f64) -> f64 {
        self.amp_at_1hz * f.powf(-self.exponent) + self.plateau / (1.0 + (f / self.corner_fit_hz).powi(2))
    }
}

const DB: f64 = 10.0 / std::f64::consts::LN_10;

struct FitData {
    lf: Vec<f64>,
    f2: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl FitData {
    fn model(&self, i: usize, p: &Vector4<f64>) -> (f64, f64, f64) {
        let pl = (p[0] - p[1] * self.lf[i]).exp();
        let x = self.f2[i] * (-2.0 * p[3]).exp();
        let lo = p[2].exp() / (1.0 + x);
        (pl, lo, x)
    }

    fn cost(&self, p: &Vector4<f64>) -> f64 {
        (0..self.y.len())
            .map(|i| {
                let (pl, lo, _) = self.model(i, p);
                let r = self.y[i] - DB * (pl + lo).ln();
                self.w[i] * r * r
            })
            .sum()
    }
}

fn clamp_params(p: &mut Vector4<f64>, lo: &Vector4<f64>, hi: &Vector4<f64>) {
    for k in 0..4 {
        p[k] = p[k].clamp(lo[k], hi[k]);
    }
}

/// Projected Levenberg-Marquardt in log space; returns (params, cost, converged).
fn levenberg_marquardt(
    d: &FitData,
    start: Vector4<f64>,
    lo: &Vector4<f64>,
    hi: &Vector4<f64>,
    max_iter: usize,
) -> (Vector4<f64>, f64, bool) {
    let mut p = start;
    clamp_params(&mut p, lo, hi);
    let mut cost = d.cost(&p);
    let mut lambda = 1e-3;
    for _ in 0..max_iter {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for i in 0..d.y.len() {
            let (pl, lo_v, x) = d.model(i, &p);
            let m = pl + lo_v;
            let r = d.y[i] - DB * m.ln();
            let dm = Vector4::new(pl, -d.lf[i] * pl, lo_v, lo_v * 2.0 * x / (1.0 + x));
            let j = -DB * dm / m;
            jtj += d.w[i] * j * j.transpose();
            jtr += d.w[i] * j * r;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for k in 0..4 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p + step;
            clamp_params(&mut trial, lo, hi);
            let c = d.cost(&trial);
            if c.is_finite() && c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                p = trial;
                cost = c;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-9 {
                    return (p, cost, true);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            return (p, cost, true);
        }
    }
    (p, cost, false)
}

fn power_law_regression(lf: &[f64], ly: &[f64]) -> (f64, f64) {
    let n = lf.len() as f64;
    let mx = lf.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lf.iter().zip(ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lf.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, -slope)
}

/// Log-space least squares of A f^-a + P / (1 + (f/fc)^2) over the good bins
/// of `band`. A corner above the band top is reported unresolved.
pub fn fit_powerlaw_plus_lorentzian(psd: &PsdEstimate, band: (f64, f64)) -> Result<NoiseFit> {
    let (f_lo, f_hi) = band;
    let fmax = *psd.freqs.last().unwrap();
    if !(f_hi > f_lo) || f_hi > fmax * (1.0 + 1e-12) || f_lo < 0.0 {
        return Err(Error::Domain(format!("fit band [{f_lo}, {f_hi}] outside the estimate support")));
    }
    let idx: Vec<usize> = psd
        .band_indices(f_lo, f_hi)
        .into_iter()
        .filter(|&i| psd.flags[i] != BinFlag::Clipped && psd.flags[i] != BinFlag::LowSnr && psd.values[i] > 0.0)
        .collect();
    if idx.len() < 6 {
        return Err(Error::Domain(format!("only {} usable bins in the fit band", idx.len())));
    }
    let weight = (psd.n_segments.max(1) as f64).sqrt();
    let d = FitData {
        lf: idx.iter().map(|&i| psd.freqs[i].ln()).collect(),
        f2: idx.iter().map(|&i| psd.freqs[i] * psd.freqs[i]).collect(),
        y: idx.iter().map(|&i| DB * psd.values[i].ln()).collect(),
        w: vec![weight; idx.len()],
    };
    let ly: Vec<f64> = idx.iter().map(|&i| psd.values[i].ln()).collect();
    let (la0, a0) = power_law_regression(&d.lf, &ly);
    let lmin = ly.iter().cloned().fold(f64::INFINITY, f64::min);
    let lmax = ly.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lflo, lfhi) = (f_lo.max(psd.resolution()).ln(), f_hi.ln());
    let lo = Vector4::new(lmin - 40.0, 1e-3, lmin - 40.0, lflo - 3.0);
    let hi = Vector4::new(lmax + 20.0 + 2.0 * lfhi, 1.999, lmax + 5.0, lfhi + 5.0);

    let mut best: Option<(Vector4<f64>, f64, bool)> = None;
    let mut consider = |cand: (Vector4<f64>, f64, bool)| {
        if best.as_ref().is_none_or(|b| cand.1 < b.1) {
            best = Some(cand);
        }
    };
    let a_start = a0.clamp(0.05, 1.95);
    for &pl_scale in &[0.0, -3.0] {
        for &p_off in &[-6.0, -2.0, 0.0, 1.0] {
            for &t in &[0.1, 0.4, 0.7, 1.0, 1.3] {
                let start = Vector4::new(la0 + pl_scale, a_start, lmin + p_off, lflo + t * (lfhi - lflo));
                consider(levenberg_marquardt(&d, start, &lo, &hi, 300));
            }
        }
    }
    let start = Vector4::new(lmin - 30.0, 1.0, ly.iter().sum::<f64>() / ly.len() as f64, 0.5 * (lflo + lfhi));
    consider(levenberg_marquardt(&d, start, &lo, &hi, 300));

    let (p, cost, converged) = best.unwrap();
    let corner_fit = p[3].exp();
    let fit = NoiseFit {
        amp_at_1hz: p[0].exp(),
        exponent: p[1],
        plateau: p[2].exp(),
        corner: if corner_fit > f_hi {
            Corner::Unresolved
        } else {
            Corner::Resolved(corner_fit)
        },
        corner_fit_hz: corner_fit,
        residual_db: (cost / (weight * idx.len() as f64)).sqrt(),
        n_bins: idx.len(),
    };
    if !converged || !cost.is_finite() {
        let residual = fit.residual_db;
        return Err(Error::FitNonConvergent {
            best: Box::new(fit),
            residual,
            iterations: 300,
        });
    }
    Ok(fit)
}

/// Golden-section minimum of `f` on [a, b].
pub fn golden_min(mut a: f64, mut b: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoleShape {
    /// 10 log10(f^2 / (f^2 + fc^2))
    HighPass,
    /// 10 log10(fc^2 / (f^2 + fc^2))
    LowPass,
}

impl PoleShape {
    pub fn db(&self, f: f64, fc: f64) -> f64 {
        let r = match self {
            PoleShape::HighPass => f * f / (f * f + fc * fc),
            PoleShape::LowPass => fc * fc / (f * f + fc * fc),
        };
        10.0 * r.log10()
    }
}

/// Least-squares corner of a single-pole shape fitted to a dB ratio curve.
pub fn fit_pole_crossover(freqs: &[f64], ratio_db: &[f64], band: (f64, f64), shape: PoleShape) -> Result<f64> {
    let pts: Vec<(f64, f64)> = freqs
        .iter()
        .zip(ratio_db)
        .filter(|(f, r)| **f >= band.0 && **f <= band.1 && **f > 0.0 && r.is_finite())
        .map(|(f, r)| (*f, *r))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Domain(format!("only {} bins in the crossover fit band", pts.len())));
    }
    let cost = |lfc: f64| {
        let fc = lfc.exp();
        pts.iter().map(|(f, r)| (r - shape.db(*f, fc)).powi(2)).sum::<f64>()
    };
    let lo = (band.0.max(pts[0].0) / 1e3).ln();
    let hi = (band.1 * 1e3).ln();
    // Coarse scan first so the golden search starts in the right basin.
    let n = 200;
    let grid: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    let k = (0..=n).min_by(|&a, &b| cost(grid[a]).partial_cmp(&cost(grid[b])).unwrap()).unwrap();
    let a = grid[k.saturating_sub(1)];
    let b = grid[(k + 1).min(n)];
    Ok(golden_min(a, b, 1e-9, cost).exp())
}

/// First frequency (log-interpolated) at which the ratio rises through `level_db`.
pub fn raw_crossing(freqs: &[f64], ratio_db: &[f64], level_db: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = freqs
        .iter()
        .zip(ratio_db)
        .filter(|(f, r)| **f > 0.0 && r.is_finite())
        .map(|(f, r)| (*f, *r))
        .collect();
    pts.windows(2).find(|w| w[0].1 < level_db && w[1].1 >= level_db).map(|w| {
        let t = (level_db - w[0].1) / (w[1].1 - w[0].1);
        (w[0].0.ln() + t * (w[1].0.ln() - w[0].0.ln())).exp()
    })
}

/// Corner of a one-pole low-pass S0 / (1 + (f/fc)^2) fitted in log space.
pub fn fit_one_pole(psd: &PsdEstimate, band: (f64, f64)) -> Result<(f64, f64)> {
    let idx = psd.band_indices(band.0, band.1);
    let pts: Vec<(f64, f64)> = idx
        .iter()
        .filter(|&&i| psd.values[i] > 0.0)
        .map(|&i| (psd.freqs[i], psd.values[i].ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Domain("too few bins for a one-pole fit".into()));
    }
    let level = |fc: f64| {
        pts.iter().map(|(f, ly)| ly + (1.0 + (f / fc).powi(2)).ln()).sum::<f64>() / pts.len() as f64
    };
    let cost = |lfc: f64| {
        let fc = lfc.exp();
        let l0 = level(fc);
        pts.iter().map(|(f, ly)| (ly - l0 + (1.0 + (f / fc).powi(2)).ln()).powi(2)).sum::<f64>()
    };
    let lo = (band.0.max(psd.resolution()) / 100.0).ln();
    let hi = (band.1 * 100.0).ln();
    let n = 200;
    let grid: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    let k = (0..=n).min_by(|&a, &b| cost(grid[a]).partial_cmp(&cost(grid[b])).unwrap()).unwrap();
    let lfc = golden_min(grid[k.saturating_sub(1)], grid[(k + 1).min(n)], 1e-9, cost);
    let fc = lfc.exp();
    Ok((level(fc).exp(), fc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn white(n: usize, fs: f64, seed: u64) -> TimeSeries {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        TimeSeries::new(s, fs, "V").unwrap()
    }

    #[test]
    fn white_noise_level() {
        let x = white(1 << 18, 1e5, 1);
        let p = welch_psd(&x, 1 << 12, 0.5, Window::Hann).unwrap();
        let mean = p.values[1..p.values.len() - 1].iter().sum::<f64>() / (p.values.len() - 2) as f64;
        assert!((mean / 2e-5 - 1.0).abs() < 0.05, "{mean}");
        assert_eq!(p.unit, "V^2/Hz");
        assert!(!p.low_confidence);
    }

    #[test]
    fn tone_power() {
        let fs = 1e4;
        let n = 1 << 16;
        let a = 0.7;
        let s: Vec<f64> = (0..n).map(|i| a * (2.0 * std::f64::consts::PI * 1234.5 * i as f64 / fs).sin()).collect();
        let p = welch_psd(&TimeSeries::new(s, fs, "V").unwrap(), 1 << 12, 0.5, Window::Hann).unwrap();
        let power = rms_over_band(&p, 1200.0, 1270.0).unwrap().powi(2);
        assert!((power / (a * a / 2.0) - 1.0).abs() < 0.02, "{power}");
    }

    #[test]
    fn single_segment_flagged() {
        let x = white(1024, 1e3, 2);
        let p = welch_psd(&x, 1024, 0.5, Window::Hann).unwrap();
        assert!(p.low_confidence);
        assert!(welch_psd(&x, 2048, 0.5, Window::Hann).is_err());
    }

    #[test]
    fn flat_band_rms() {
        let f: Vec<f64> = (0..=1000).map(|i| i as f64).collect();
        let p = PsdEstimate::from_values(f, vec![3.0; 1001], "V^2/Hz").unwrap();
        let r = rms_over_band(&p, 10.5, 400.25).unwrap();
        assert!((r - (3.0 * (400.25 - 10.5f64)).sqrt()).abs() < 1e-12);
        assert!(rms_over_band(&p, 5.0, 5.0).is_err());
    }

    #[test]
    fn reference_band_rms() {
        let n = 2_000_001;
        let f: Vec<f64> = (0..n).map(|i| 1.0 + 1330.0 * i as f64 / (n - 1) as f64).collect();
        let v = f.iter().map(|f| 5.5e-7 * f.powf(-0.89)).collect();
        let p = PsdEstimate::from_values(f, v, "e^2/Hz").unwrap();
        let r = rms_over_band(&p, 1.0, 1331.0).unwrap();
        let exact = (5.5e-7 / 0.11 * (1331f64.powf(0.11) - 1.0)).sqrt();
        assert!((r - exact).abs() < 1e-6 * exact);
        assert!((r / 2.47e-3 - 1.0).abs() < 0.01, "{r}");
    }

    #[test]
    fn extraction_inverts_forward_model() {
        let f: Vec<f64> = (0..2000).map(|i| 0.5 * i as f64).collect();
        let g0 = 3.0;
        let wl = 2.0 * std::f64::consts::PI * 200.0;
        let sbb: Vec<f64> = f.iter().map(|f| 1e-6 / (1.0 + f)).collect();
        let floor_v = 1e-9;
        let syy: Vec<f64> = f
            .iter()
            .zip(&sbb)
            .map(|(f, s)| s * g0 * g0 / (1.0 + (2.0 * std::f64::consts::PI * f / wl).powi(2)) + floor_v)
            .collect();
        let syy = PsdEstimate::from_values(f.clone(), syy, "V^2/Hz").unwrap();
        let floor = PsdEstimate::from_values(f.clone(), vec![floor_v; f.len()], "V^2/Hz").unwrap();
        let out = extract_charge_psd(&syy, Some(&floor), g0, wl, "e^2/Hz").unwrap();
        for i in 1..f.len() {
            assert!((out.values[i] / sbb[i] - 1.0).abs() < 1e-9);
        }
        let none = extract_charge_psd(&floor, Some(&floor), g0, wl, "e^2/Hz").unwrap();
        assert!(none.values.iter().all(|&v| v == 0.0));
        assert!(none.flags.iter().all(|&fl| fl == BinFlag::Clipped));
        assert!(extract_charge_psd(&syy, None, 0.0, wl, "e^2/Hz").is_err());
    }

    #[test]
    fn fit_separates_plateau_from_power_law() {
        let f: Vec<f64> = (1..=2000).map(|i| 0.5 * i as f64).collect();
        let v: Vec<f64> = f
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let wiggle = 1.0 + 0.05 * ((i * 7919 % 13) as f64 / 6.0 - 1.0);
                (5.5e-7 * f.powf(-0.89) + 2e-9 / (1.0 + (f / 5e4).powi(2))) * wiggle
            })
            .collect();
        let p = PsdEstimate::from_values(f, v, "e^2/Hz").unwrap();
        let fit = fit_powerlaw_plus_lorentzian(&p, (1.0, 1000.0)).unwrap();
        assert!((fit.exponent - 0.89).abs() < 0.02, "{fit:?}");
        assert!((fit.amp_at_1hz / 5.5e-7 - 1.0).abs() < 0.05, "{fit:?}");
        let plateau_in_band = fit.plateau / (1.0 + (1000.0 / fit.corner_fit_hz).powi(2));
        assert!((plateau_in_band / 2e-9 - 1.0).abs() < 0.3, "{fit:?}");
        assert_eq!(fit.corner, Corner::Unresolved);
        assert!(fit.residual_db < 1.0);
    }

    #[test]
    fn crossover_fit_recovers_corner() {
        let f: Vec<f64> = (1..400).map(|i| i as f64 * 10.0).collect();
        let r: Vec<f64> = f.iter().map(|f| PoleShape::HighPass.db(*f, 1400.0)).collect();
        let fc = fit_pole_crossover(&f, &r, (40.0, 4200.0), PoleShape::HighPass).unwrap();
        assert!((fc / 1400.0 - 1.0).abs() < 1e-6);
        let x = raw_crossing(&f, &r, -3.0).unwrap();
        assert!((x / 1400.0 - 1.0).abs() < 0.01);
        let v: Vec<f64> = f.iter().map(|f| 2.0 / (1.0 + (f / 1331.0).powi(2))).collect();
        let p = PsdEstimate::from_values(f, v, "V^2/Hz").unwrap();
        let (s0, c) = fit_one_pole(&p, (10.0, 3990.0)).unwrap();
        assert!((c / 1331.0 - 1.0).abs() < 1e-6 && (s0 / 2.0 - 1.0).abs() < 1e-6);
    }
}
