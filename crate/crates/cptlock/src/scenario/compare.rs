use serde::Serialize;

use super::run::{ScenarioResult, Table};
use crate::error::{Error, Result};
use crate::spectral::{fit_pole_crossover, fit_powerlaw_plus_lorentzian, raw_crossing, PoleShape, PsdEstimate};

/// Per-bin ratio of two spectra and the crossovers fitted to it.
#[derive(Debug, Clone, Serialize)]
pub struct SuppressionReport {
    /// freq_hz, ratio_raw_db (against the measured denominator) and
    /// ratio_fit_db (against a power-law fit of it).
    pub table: Table,
    pub crossover_raw_hz: Option<f64>,
    pub crossover_fit_hz: Option<f64>,
    /// First -3 dB crossing of the raw ratio, without a model.
    pub crossing_3db_hz: Option<f64>,
    /// The numerator was interpolated onto the denominator grid.
    pub resampled: bool,
    pub warnings: Vec<String>,
}

fn same_grid(a: &PsdEstimate, b: &PsdEstimate) -> bool {
    a.freqs.len() == b.freqs.len()
        && a.freqs
            .iter()
            .zip(&b.freqs)
            .all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0))
}

fn db(num: f64, den: f64) -> f64 {
    if num > 0.0 && den > 0.0 {
        10.0 * (num / den).log10()
    } else {
        f64::NAN
    }
}

/// Compares `num` against `den` (for example closed against open).
///
/// `band` limits the crossover fits; `fit_band` is where the denominator
/// model is fitted, defaulting to `band`.
pub fn compare_psds(
    den: &PsdEstimate,
    num: &PsdEstimate,
    band: (f64, f64),
    shape: PoleShape,
    fit_band: Option<(f64, f64)>,
) -> Result<SuppressionReport> {
    if !(band.0 > 0.0 && band.1 > band.0) {
        return Err(Error::Config(format!("comparison band {band:?} must satisfy 0 < lo < hi")));
    }
    let mut warnings = Vec::new();
    let resampled = !same_grid(den, num);
    let num_vals: Vec<f64> = if resampled {
        warnings.push(format!(
            "frequency grids differ ({} vs {} bins); numerator interpolated onto the denominator grid",
            num.freqs.len(),
            den.freqs.len()
        ));
        den.freqs.iter().map(|&f| num.interpolate(f)).collect()
    } else {
        num.values.clone()
    };
    let model = match fit_powerlaw_plus_lorentzian(den, fit_band.unwrap_or(band)) {
        Ok(fit) => Some(fit),
        Err(Error::FitNonConvergent { best, .. }) => {
            warnings.push("denominator fit did not converge; using its best iterate".into());
            Some(*best)
        }
        Err(e) => {
            warnings.push(format!("denominator fit failed: {e}"));
            None
        }
    };
    let mut table = Table::new(&["freq_hz", "ratio_raw_db", "ratio_fit_db"]);
    let mut raw = Vec::with_capacity(den.freqs.len());
    let mut fitted = Vec::with_capacity(den.freqs.len());
    for (i, &f) in den.freqs.iter().enumerate() {
        let r = db(num_vals[i], den.values[i]);
        let m = match &model {
            Some(fit) if f > 0.0 => db(num_vals[i], fit.model(f)),
            _ => f64::NAN,
        };
        raw.push(r);
        fitted.push(m);
        table.push(vec![f, r, m]);
    }
    Ok(SuppressionReport {
        crossover_raw_hz: fit_pole_crossover(&den.freqs, &raw, band, shape).ok(),
        crossover_fit_hz: fit_pole_crossover(&den.freqs, &fitted, band, shape).ok(),
        crossing_3db_hz: raw_crossing(&den.freqs, &raw, -3.0),
        table,
        resampled,
        warnings,
    })
}

/// Compares the same-named spectrum of two runs, `closed` over `open`.
pub fn compare_runs(open: &ScenarioResult, closed: &ScenarioResult, psd: &str, band: (f64, f64)) -> Result<SuppressionReport> {
    fn get<'a>(r: &'a ScenarioResult, psd: &str) -> Result<&'a PsdEstimate> {
        r.psds.get(psd).ok_or_else(|| {
            Error::Config(format!(
                "run {} has no spectrum {psd:?}; available: {}",
                r.config.name,
                r.psds.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }
    compare_psds(get(open, psd)?, get(closed, psd)?, band, PoleShape::HighPass, None)
}
