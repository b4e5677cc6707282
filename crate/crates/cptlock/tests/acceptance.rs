//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::f64::consts::TAU;
use std::path::Path;
use std::time::{Duration, Instant};

use cptlock::device::{coupling_coefficient, cpt_ground_energy, resonant_frequency, BiasAxis, BiasPoint, CptParams, Parity};
use cptlock::langevin::{validate_grid, OracleSettings};
use cptlock::noise::power_law_noise;
use cptlock::rf::DriveConfig;
use cptlock::scenario::{preset, preset_names, run_scenario, write_outputs, BandwidthRule, EmbeddedResolver, Format, ScenarioConfig};
use cptlock::spectral::{fit_powerlaw_plus_lorentzian, rms_over_band, welch_psd, Window};

type Outcome = Result<String, String>;

fn within(x: f64, target: f64, rel: f64) -> bool {
    (x / target - 1.0).abs() <= rel
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metric(r: &cptlock::scenario::ScenarioResult, key: &str) -> Result<f64, String> {
    r.metric(key).ok_or_else(|| format!("metric {key} missing"))
}

fn run(cfg: &ScenarioConfig) -> Result<cptlock::scenario::ScenarioResult, String> {
    run_scenario(cfg).map_err(|e| format!("{}: {e}", cfg.name))
}

fn error_signal_shape() -> Outcome {
    let with_kerr = preset("fig3b_response").map_err(|e| e.to_string())?;
    let mut linear = with_kerr.clone();
    linear.device.kerr_hz = 0.0;
    let rk = run(&with_kerr)?;
    let r0 = run(&linear)?;
    let kappa = metric(&r0, "kappa_tot_hz")?;
    let mut ok = true;
    let mut worst_zero: f64 = 0.0;
    let mut worst_sep: f64 = 0.0;
    let mut worst_lin: f64 = 0.0;
    let p1 = metric(&r0, "n1_peak_to_peak_v")?;
    for n in [1.0, 5.0, 10.0] {
        let zero = metric(&rk, &format!("n{n}_zero_crossing_hz"))?;
        let expect = metric(&rk, &format!("n{n}_expected_zero_hz"))?;
        worst_zero = worst_zero.max((zero - expect).abs() / kappa);
        let sep = metric(&r0, &format!("n{n}_extrema_separation_hz"))?;
        worst_sep = worst_sep.max((sep / kappa - 1.0).abs());
        let pp = metric(&r0, &format!("n{n}_peak_to_peak_v"))?;
        worst_lin = worst_lin.max((pp / (n * p1) - 1.0).abs());
    }
    ok &= worst_zero <= 0.01 && worst_sep <= 0.02 && worst_lin <= 0.02;
    check(
        ok,
        format!(
            "zero offset {worst_zero:.2e} kappa (<=1e-2), separation error {:.2} % (<=2), amplitude linearity {:.2} % (<=2)",
            100.0 * worst_sep,
            100.0 * worst_lin
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let cfg = preset("fig3b_response").map_err(|e| e.to_string())?;
    let mut device = cfg.device.clone();
    let kerr = TAU * device.kerr_hz;
    device.kerr_hz = 0.0;
    let cav = device.cavity().map_err(|e| e.to_string())?;
    let power = cfg.drive.power().map_err(|e| e.to_string())?;
    let drive = DriveConfig::new(cav.omega_bare, 1.08, TAU * cfg.drive.f_mod_hz, power);
    let rows = validate_grid(&cav, &drive, &[1.08, 1.84], &[0.0, kerr], 21, 2.0, &OracleSettings::default())
        .map_err(|e| e.to_string())?;
    let worst = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    check(
        rows.len() == 84 && worst < 0.01,
        format!("{} grid points, worst relative error {:.3} % (<1)", rows.len(), 100.0 * worst),
    )
}

fn noise_fidelity() -> Outcome {
    let (fs, n, seg) = (8192.0, 1 << 18, 1 << 14);
    let mut exps = Vec::new();
    let mut amps = Vec::new();
    let mut rms = Vec::new();
    for seed in 0..20u64 {
        let x = power_law_noise(5.5e-7, 0.89, fs, n, seed).map_err(|e| e.to_string())?;
        let p = welch_psd(&x, seg, 0.5, Window::Hann).map_err(|e| e.to_string())?;
        let fit = match fit_powerlaw_plus_lorentzian(&p, (1.0, 1331.0)) {
            Ok(f) => f,
            Err(cptlock::error::Error::FitNonConvergent { best, .. }) => *best,
            Err(e) => return Err(e.to_string()),
        };
        exps.push(fit.exponent);
        amps.push(fit.amp_at_1hz);
        rms.push(rms_over_band(&p, 1.0, 1331.0).map_err(|e| e.to_string())?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (e, a, r) = (mean(&exps), mean(&amps), mean(&rms));
    check(
        (e - 0.89).abs() <= 0.05 && within(a, 5.5e-7, 0.10) && within(r, 2.47e-3, 0.15),
        format!("20-seed means: exponent {e:.4}, amplitude {a:.3e} e^2/Hz, band rms {r:.3e} e"),
    )
}

const LINEAR_LOOP: &str = r#"
include = "device.toml"
name = "loop_shape"
mode = "paired"
seed = 5
duration = 10.48576

[bias]
ng = 0.6

[drive]
beta = 1.84
f_mod_hz = 30e6
photons = 10.0

# small enough that the error signal stays on its linear slope
[noise]
charge_amp = 5.5e-10
charge_exponent = 0.89
bandwidth_hz = 12e3

[chain]
g_amp = 1e14
tau_la = 200e-6
fs_out = 100e3

[loop]
bandwidth = { rule = "fixed", f_prime_hz = 600.0 }
gain = { rule = "small_signal" }

# 1.5 Hz bins keep f'/30 clear of the window leakage next to DC
[analysis]
segment_len = 65536
"#;

fn loop_shaping() -> Outcome {
    let base = ScenarioConfig::from_toml(LINEAR_LOOP, &EmbeddedResolver).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for fp in [150.0, 600.0] {
        let mut cfg = base.clone();
        if let Some(l) = cfg.control.as_mut() {
            l.bandwidth = BandwidthRule::Fixed { f_prime_hz: fp };
        }
        let r = run(&cfg)?;
        let t = &r.tables["suppression"];
        let f = t.column("freq_hz").unwrap();
        let got = t.column("residual_ratio_db").unwrap();
        let want = t.column("loop_shape_db").unwrap();
        let mut worst: f64 = 0.0;
        let mut bins = 0;
        for i in 0..f.len() {
            if f[i] >= fp / 30.0 && f[i] <= 3.0 * fp {
                worst = worst.max((got[i] - want[i]).abs());
                bins += 1;
            }
        }
        ok &= bins > 10 && worst <= 1.0 && !r.lost_lock;
        parts.push(format!("f' = {fp:.0} Hz: {bins} bins, worst {worst:.3} dB"));
    }
    check(ok, format!("{} (<=1 dB over [f'/30, 3f'])", parts.join("; ")))
}

fn reference_rolloffs() -> Outcome {
    let base = preset("fig4c_n10").map_err(|e| e.to_string())?;
    let mut fcs = Vec::new();
    for k in 0..4 {
        let mut c = base.clone();
        c.seed = base.seed + k;
        fcs.push(metric(&run(&c)?, "suppression_3db_hz")?);
    }
    let n10 = fcs.iter().sum::<f64>() / fcs.len() as f64;
    let r1 = run(&preset("fig4f_n1").map_err(|e| e.to_string())?)?;
    let n1 = metric(&r1, "suppression_3db_hz")?;
    let seeds: Vec<String> = fcs.iter().map(|f| format!("{f:.0}")).collect();
    check(
        within(n10, 1400.0, 0.15) && within(n1, 11.0, 0.30),
        format!(
            "n=10 crossover {n10:.0} Hz (4-seed mean of {}; 1400 +-15 %), n=1 crossover {n1:.2} Hz (11 +-30 %)",
            seeds.join(", ")
        ),
    )
}

fn capture_and_jump() -> Outcome {
    let sweep = run(&preset("fig4a_sweep").map_err(|e| e.to_string())?)?;
    let half = metric(&sweep, "capture_half_width")?;
    let jump = run(&preset("fig4d_jump").map_err(|e| e.to_string())?)?;
    let app = metric(&jump, "jump_applied_mean")?;
    let shift = metric(&jump, "tracked_shift_hz")?;
    check(
        !sweep.lost_lock && (half - 0.1).abs() <= 0.03 && within(app, -0.022, 0.10) && within(shift, 4e6, 0.15),
        format!("capture half-width {half:.4}, post-jump mean correction {app:.5}, tracked shift {:.3} MHz", shift / 1e6),
    )
}

fn device_suite() -> Outcome {
    let cav = preset("fig3b_response")
        .and_then(|c| c.device.cavity())
        .map_err(|e| e.to_string())?;
    let mut fails = Vec::new();

    // truncation convergence
    let cpt = CptParams::default();
    let wide = CptParams { n_trunc: 30, ..cpt };
    let mut conv: f64 = 0.0;
    for &(ng, phi) in &[(0.0, 0.0), (0.5, 0.2), (0.99, 0.0), (0.3, 0.45)] {
        let b = BiasPoint::new(ng, phi);
        let a = cpt_ground_energy(b, &cpt).map_err(|e| e.to_string())?;
        let w = cpt_ground_energy(b, &wide).map_err(|e| e.to_string())?;
        conv = conv.max((a - w).abs() / cpt.ec_hz);
    }
    if conv > 1e-9 {
        fails.push(format!("truncation {conv:e}"));
    }

    // Periodicity and mirror symmetry are exact when the shifted bias is
    // itself representable, hence the dyadic grid. Off that grid the input
    // rounding reaches the curvature stencil, which is held to a looser bound.
    let w = |ng: f64, phi: f64| resonant_frequency(BiasPoint::new(ng, phi), &cav, Parity::Even).unwrap();
    let mut sym: f64 = 0.0;
    let mut off_grid: f64 = 0.0;
    for i in 0..40 {
        let (ng, phi) = (-1.0 + i as f64 / 16.0, -0.25 + i as f64 / 64.0);
        let base = w(ng, phi);
        for other in [w(ng + 2.0, phi), w(-ng, phi), w(ng, -phi), w(ng, phi + 1.0)] {
            sym = sym.max((other - base).abs() / base);
        }
        let (ng, phi) = (-1.0 + 0.0517 * i as f64, 0.011 * i as f64 - 0.2);
        let base = w(ng, phi);
        for other in [w(ng + 2.0, phi), w(-ng, phi), w(ng, -phi), w(ng, phi + 1.0)] {
            off_grid = off_grid.max((other - base).abs() / base);
        }
    }
    if sym != 0.0 {
        fails.push(format!("symmetry {sym:e}"));
    }
    if off_grid > 1e-8 {
        fails.push(format!("off-grid symmetry {off_grid:e}"));
    }

    // finite-difference slope against a dense sweep
    let mut slope: f64 = 0.0;
    for &(ng, phi, axis) in &[
        (0.2, 0.0, BiasAxis::Gate),
        (0.4, 0.0, BiasAxis::Gate),
        (0.6, 0.1, BiasAxis::Gate),
        (0.8, 0.0, BiasAxis::Gate),
        (0.4, 0.15, BiasAxis::Flux),
        (0.6, 0.25, BiasAxis::Flux),
    ] {
        let g = coupling_coefficient(BiasPoint::new(ng, phi), &cav, axis).map_err(|e| e.to_string())?;
        // least-squares slope over 41 points spanning +-0.004
        let pts: Vec<(f64, f64)> = (-20..=20)
            .map(|k| {
                let d = 2e-4 * k as f64;
                let v = match axis {
                    BiasAxis::Gate => w(ng + d, phi),
                    BiasAxis::Flux => w(ng, phi + d),
                };
                (d, v)
            })
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        slope = slope.max((g / (sxy / sxx) - 1.0).abs());
    }
    if slope > 0.01 {
        fails.push(format!("slope {slope:e}"));
    }

    // tunability over a dense gate sweep
    let sweep: Vec<f64> = (0..=2000).map(|i| w(-1.0 + 1e-3 * i as f64, 0.0)).collect();
    let span = (sweep.iter().cloned().fold(f64::MIN, f64::max) - sweep.iter().cloned().fold(f64::MAX, f64::min)) / TAU;
    if !within(span, 140e6, 0.05) {
        fails.push(format!("span {span:e}"));
    }
    check(
        fails.is_empty(),
        format!(
            "truncation {conv:.1e}, symmetry {sym:.1e} (off-grid {off_grid:.1e}), slope mismatch {:.3} %, tunability {:.2} MHz{}",
            100.0 * slope,
            span / 1e6,
            if fails.is_empty() { String::new() } else { format!("; failed: {}", fails.join(", ")) }
        ),
    )
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn determinism() -> Outcome {
    let mut files = 0;
    let mut slow = Vec::new();
    for name in preset_names() {
        let cfg = preset(name).map_err(|e| e.to_string())?;
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let mut times = Vec::new();
        for d in &dirs {
            let t = Instant::now();
            let r = run(&cfg)?;
            write_outputs(&r, d.path(), Format::Csv).map_err(|e| e.to_string())?;
            times.push(t.elapsed());
        }
        let (a, b) = (csv_bytes(dirs[0].path()), csv_bytes(dirs[1].path()));
        if a != b {
            return Err(format!("{name}: outputs differ between two runs"));
        }
        files += a.len();
        if times[1] > 2 * times[0] + Duration::from_millis(50) {
            slow.push(name);
        }
    }
    check(
        slow.is_empty(),
        format!("{} presets, {files} CSV/JSON files byte-identical across two runs", preset_names().len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 8] = [
        ("error-signal shape", error_signal_shape, 5),
        ("oracle equivalence", oracle_equivalence, 120),
        ("noise synthesis fidelity", noise_fidelity, 30),
        ("loop-shaping law", loop_shaping, 60),
        ("suppression roll-offs", reference_rolloffs, 240),
        ("lock capture and jump tracking", capture_and_jump, 60),
        ("device model suite", device_suite, 10),
        ("determinism", determinism, 600),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        let over = secs > *budget as f64;
        let (tag, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; took {secs:.1} s, budget {budget} s")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("criterion {} [{tag}] {name}: {detail} ({secs:.1} s)", i + 1);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}
