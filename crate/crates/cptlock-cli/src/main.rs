use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cptlock::device::{coupling_coefficient, resonant_frequency, BiasAxis, BiasPoint, Parity};
use cptlock::error::Error;
use cptlock::langevin::{validate_grid, OracleSettings};
use cptlock::noise::{power_law_noise, read_binary, write_binary};
use cptlock::rf::DriveConfig;
use cptlock::scenario::{
    compare_psds, fmt_f64, preset, preset_names, provenance_header, psd_csv, read_psd_csv, read_series_csv,
    run_scenario, table_csv, trajectory_csv, write_outputs, Format, LinePlot, Mode, ResponseSection, ScenarioConfig,
    Table,
};
use cptlock::spectral::{fit_powerlaw_plus_lorentzian, welch_psd, Corner, PoleShape, Window};

/// Like `println!`, but a closed stdout (for example `| head`) is not fatal.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

const EXIT_LOST_LOCK: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_OTHER: u8 = 1;

#[derive(Parser)]
#[command(name = "cptlock", version, about = "Feedback stabilisation of a gate-tunable Kerr cavity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// csv, svg or both.
    #[arg(long, global = true, default_value = "csv")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a built-in scenario; `--list` prints the names.
    Preset {
        name: Option<String>,
        #[arg(long)]
        list: bool,
        /// Print the resolved TOML instead of running.
        #[arg(long)]
        show: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Device maps.
    Device {
        #[command(subcommand)]
        what: DeviceCmd,
    },
    /// Static error-signal sweeps.
    Response {
        #[command(subcommand)]
        what: ResponseCmd,
    },
    /// Noise records.
    Noise {
        #[command(subcommand)]
        what: NoiseCmd,
    },
    /// Welch spectrum of a CSV or binary record, with a power-law fit.
    Psd {
        input: PathBuf,
        #[arg(long, default_value_t = 16384)]
        segment: usize,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        /// Fit band "lo,hi" in Hz.
        #[arg(long, value_parser = parse_band)]
        fit_band: Option<(f64, f64)>,
        #[command(flatten)]
        common: Common,
    },
    /// Quasi-static model against the time-domain oracle.
    Oracle {
        #[command(subcommand)]
        what: OracleCmd,
    },
    /// Ratio of the spectra written by two runs (B over A).
    Compare {
        dir_a: PathBuf,
        dir_b: PathBuf,
        /// Spectrum artifact to compare.
        #[arg(long, default_value = "psd_y_open")]
        artifact: String,
        /// Spectrum artifact of run B, if named differently.
        #[arg(long)]
        artifact_b: Option<String>,
        /// Crossover fit band "lo,hi" in Hz.
        #[arg(long, value_parser = parse_band)]
        band: Option<(f64, f64)>,
        /// Fit a low-pass corner instead of a high-pass one.
        #[arg(long)]
        low_pass: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum DeviceCmd {
    /// Resonance and coupling coefficients over an (n_g, phi) grid.
    Sweep {
        /// Scenario file whose device block is used; defaults to the built-in device.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 101)]
        ng_points: usize,
        #[arg(long, default_value_t = 11)]
        phi_points: usize,
        #[arg(long, default_value_t = 0.4)]
        phi_max: f64,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum ResponseCmd {
    /// Y and X against carrier detuning.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Photon numbers, comma separated.
        #[arg(long, default_value = "1,5,10", value_delimiter = ',')]
        photons: Vec<f64>,
        #[arg(long, default_value_t = 3.0)]
        span_kappa: f64,
        #[arg(long, default_value_t = 601)]
        points: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum NoiseCmd {
    /// Power-law record.
    Gen {
        #[arg(long, default_value_t = 5.5e-7)]
        amp: f64,
        #[arg(long, default_value_t = 0.89)]
        exponent: f64,
        #[arg(long, default_value_t = 100e3)]
        fs: f64,
        #[arg(long, default_value_t = 1 << 20)]
        samples: usize,
        /// Write the compact binary format instead of CSV.
        #[arg(long)]
        binary: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// 21 offsets x 2 modulation depths x 2 Kerr values.
    Validate {
        #[arg(long, default_value_t = 21)]
        points: usize,
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected lo,hi".into());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| "bad lower edge")?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| "bad upper edge")?;
    if !(lo > 0.0 && hi > lo) {
        return Err("need 0 < lo < hi".into());
    }
    Ok((lo, hi))
}

/// Outcome of a command that completed without an error.
enum Done {
    Ok,
    LostLock,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Done::Ok) => ExitCode::SUCCESS,
        Ok(Done::LostLock) => ExitCode::from(EXIT_LOST_LOCK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Calibration(_) => EXIT_CONFIG,
        Error::Io { .. } => EXIT_IO,
        Error::LoopAbort { .. } => EXIT_LOST_LOCK,
        _ => EXIT_OTHER,
    }
}

fn format_of(c: &Common) -> Result<Format, Error> {
    c.format.parse()
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from("out").join(default))
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    out!("wrote {}", path.display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<Done, Error> {
    match cmd {
        Command::Run { config, common } => run_config(ScenarioConfig::from_file(&config)?, &common),
        Command::Preset { name, list, show, common } => {
            if list || name.is_none() {
                for n in preset_names() {
                    out!("{n}");
                }
                return Ok(Done::Ok);
            }
            let cfg = preset(name.as_deref().unwrap_or_default())?;
            if show {
                out!("{}", cfg.to_toml().trim_end());
                return Ok(Done::Ok);
            }
            run_config(cfg, &common)
        }
        Command::Device { what: DeviceCmd::Sweep { config, ng_points, phi_points, phi_max, common } } => {
            device_sweep(config.as_deref(), ng_points, phi_points, phi_max, &common)
        }
        Command::Response { what: ResponseCmd::Sweep { config, photons, span_kappa, points, common } } => {
            let mut cfg = match config {
                Some(p) => ScenarioConfig::from_file(&p)?,
                None => preset("fig3b_response")?,
            };
            cfg.mode = Mode::Response;
            cfg.name = format!("{}_response", cfg.name.trim_end_matches("_response"));
            cfg.response = Some(ResponseSection { photons, span_kappa, points });
            cfg.outputs = vec!["response".into()];
            run_config(cfg, &common)
        }
        Command::Noise { what: NoiseCmd::Gen { amp, exponent, fs, samples, binary, common } } => {
            let seed = common.seed.unwrap_or(0);
            let s = power_law_noise(amp, exponent, fs, samples, seed)?;
            let dir = out_dir(&common, "noise");
            if binary {
                let path = dir.join("noise.bin");
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_binary(&path, &s)?;
                out!("wrote {}", path.display());
            } else {
                let header = format!("# amp={amp} exponent={exponent} fs={fs} seed={seed}\n");
                write_file(&dir.join("noise.csv"), &trajectory_csv(&s, &header))?;
            }
            Ok(Done::Ok)
        }
        Command::Psd { input, segment, overlap, fit_band, common } => psd_cmd(&input, segment, overlap, fit_band, &common),
        Command::Oracle { what: OracleCmd::Validate { points, tolerance, common } } => oracle_cmd(points, tolerance, &common),
        Command::Compare { dir_a, dir_b, artifact, artifact_b, band, low_pass, common } => {
            compare_cmd(&dir_a, &dir_b, &artifact, artifact_b.as_deref().unwrap_or(&artifact), band, low_pass, &common)
        }
    }
}

fn run_config(mut cfg: ScenarioConfig, common: &Common) -> Result<Done, Error> {
    let format = format_of(common)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let result = run_scenario(&cfg)?;
    let dir = out_dir(common, &cfg.name);
    for path in write_outputs(&result, &dir, format)? {
        out!("wrote {}", path.display());
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    for key in [
        "suppression_3db_hz",
        "app_rolloff_raw_hz",
        "capture_half_width",
        "jump_applied_mean",
        "tracked_shift_hz",
        "charge_exponent",
    ] {
        if let Some(v) = result.metric(key) {
            out!("{key} = {v}");
        }
    }
    if result.lost_lock {
        eprintln!("lost lock");
        return Ok(Done::LostLock);
    }
    Ok(Done::Ok)
}

fn device_sweep(
    config: Option<&Path>,
    ng_points: usize,
    phi_points: usize,
    phi_max: f64,
    common: &Common,
) -> Result<Done, Error> {
    if ng_points < 2 || phi_points < 1 {
        return Err(Error::Config("need at least 2 n_g points and 1 phi point".into()));
    }
    let cfg = match config {
        Some(p) => ScenarioConfig::from_file(p)?,
        None => preset("fig3b_response")?,
    };
    let cav = cfg.device.cavity()?;
    let mut t = Table::new(&["n_g", "phi_ext", "omega0_Hz", "g_gate_Hz", "g_flux_Hz"]);
    let tau = std::f64::consts::TAU;
    let mut unresolved = 0usize;
    for j in 0..phi_points {
        let phi = if phi_points == 1 { 0.0 } else { phi_max * j as f64 / (phi_points - 1) as f64 };
        for i in 0..ng_points {
            let ng = -1.0 + 2.0 * i as f64 / (ng_points - 1) as f64;
            let b = BiasPoint::new(ng, phi);
            let mut soft = |v: Result<f64, Error>| match v {
                Ok(x) => Ok(x / tau),
                Err(Error::Accuracy { .. }) => {
                    unresolved += 1;
                    Ok(f64::NAN)
                }
                Err(e) => Err(e),
            };
            let w0 = soft(resonant_frequency(b, &cav, Parity::Even))?;
            let gg = soft(coupling_coefficient(b, &cav, BiasAxis::Gate))?;
            let gf = soft(coupling_coefficient(b, &cav, BiasAxis::Flux))?;
            t.push(vec![ng, phi, w0, gg, gf]);
        }
    }
    if unresolved > 0 {
        eprintln!("warning: {unresolved} values near the conical point did not converge and are written as nan");
    }
    let header = provenance_header(&cfg.hash(), cfg.seed);
    let dir = out_dir(common, "device");
    let format = format_of(common)?;
    if matches!(format, Format::Csv | Format::Both) {
        write_file(&dir.join("device_sweep.csv"), &table_csv(&t, &header))?;
    }
    if matches!(format, Format::Svg | Format::Both) {
        let mut plot = LinePlot::new("resonance along the gate axis", "n_g", "omega0 / 2pi (Hz)");
        for j in 0..phi_points {
            let rows = &t.rows[j * ng_points..(j + 1) * ng_points];
            plot = plot.series(&format!("phi = {}", fmt_f64(rows[0][1])), rows.iter().map(|r| (r[0], r[2])).collect());
        }
        write_file(&dir.join("device_sweep.svg"), &plot.render())?;
    }
    Ok(Done::Ok)
}

fn psd_cmd(input: &Path, segment: usize, overlap: f64, fit_band: Option<(f64, f64)>, common: &Common) -> Result<Done, Error> {
    let series = if input.extension().is_some_and(|e| e == "bin") {
        read_binary(input)?
    } else {
        read_series_csv(input)?
    };
    let seg = segment.min(series.len().next_power_of_two() / 2).max(16);
    let psd = welch_psd(&series, seg, overlap, Window::Hann)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("series");
    let dir = common.out.clone().unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).to_path_buf());
    let header = format!("# source={} fs={}\n", input.display(), series.fs);
    let format = format_of(common)?;
    if matches!(format, Format::Csv | Format::Both) {
        write_file(&dir.join(format!("{stem}_psd.csv")), &psd_csv(&psd, &header))?;
    }
    if matches!(format, Format::Svg | Format::Both) {
        let pts = psd.freqs.iter().zip(&psd.values).map(|(f, v)| (*f, *v)).collect();
        let plot = LinePlot::new(stem, "frequency (Hz)", &format!("PSD ({})", psd.unit)).log_log().series(stem, pts);
        write_file(&dir.join(format!("{stem}_psd.svg")), &plot.render())?;
    }
    let band = fit_band.unwrap_or((2.0 * psd.resolution(), 0.4 * series.fs));
    let fit = match fit_powerlaw_plus_lorentzian(&psd, band) {
        Ok(f) => f,
        Err(Error::FitNonConvergent { best, residual, .. }) => {
            eprintln!("warning: fit did not converge (residual {residual:.3} dB)");
            *best
        }
        Err(e) => return Err(e),
    };
    out!("fit band = [{}, {}] Hz", band.0, band.1);
    out!("amp_at_1hz = {}", fit.amp_at_1hz);
    out!("exponent = {}", fit.exponent);
    out!("plateau = {}", fit.plateau);
    match fit.corner {
        Corner::Resolved(f) => out!("corner_hz = {f}"),
        Corner::Unresolved => out!("corner_hz = unresolved"),
    }
    out!("residual_db = {}", fit.residual_db);
    Ok(Done::Ok)
}

fn oracle_cmd(points: usize, tolerance: f64, common: &Common) -> Result<Done, Error> {
    let cfg = preset("fig3b_response")?;
    let mut device = cfg.device.clone();
    let kerr = std::f64::consts::TAU * device.kerr_hz;
    device.kerr_hz = 0.0;
    let cav = device.cavity()?;
    let drive = DriveConfig::new(cav.omega_bare, 1.08, std::f64::consts::TAU * cfg.drive.f_mod_hz, cfg.drive.power()?);
    let rows = validate_grid(&cav, &drive, &[1.08, 1.84], &[0.0, kerr], points, 2.0, &OracleSettings::default())?;
    let mut t = Table::new(&["point", "delta_omega0_Hz", "beta", "kerr_Hz", "analytic_Y_W", "oracle_Y_W", "rel_error"]);
    let tau = std::f64::consts::TAU;
    for (i, r) in rows.iter().enumerate() {
        t.push(vec![
            i as f64,
            r.delta_omega0 / tau,
            r.beta,
            r.kerr_k / tau,
            r.analytic_y,
            r.oracle_y,
            r.rel_error,
        ]);
    }
    let dir = out_dir(common, "oracle");
    write_file(&dir.join("oracle_validate.csv"), &table_csv(&t, &provenance_header(&cfg.hash(), cfg.seed)))?;
    let worst = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    out!("max relative error = {worst:.3e} over {} points", rows.len());
    if worst > tolerance {
        return Err(Error::Accuracy {
            what: "oracle agreement".into(),
            first: worst,
            second: tolerance,
        });
    }
    Ok(Done::Ok)
}

/// Locates `{scenario}_{artifact}.csv`, taking the scenario name from the
/// run's summary file. A bare suffix match would confuse `x_psd_y_open` with
/// `x_psd` + `_y_open` when the scenario name itself ends in `_psd`.
fn find_artifact(dir: &Path, artifact: &str) -> Result<PathBuf, Error> {
    let files: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().and_then(|e| e.file_name().into_string().ok()))
        .collect();
    let mut runs: Vec<&str> = files.iter().filter_map(|n| n.strip_suffix("_summary.json")).collect();
    runs.sort();
    let suffix = format!("_{artifact}.csv");
    match runs.as_slice() {
        [run] => {
            let name = format!("{run}{suffix}");
            if files.contains(&name) {
                Ok(dir.join(name))
            } else {
                Err(Error::Config(format!("run {run} in {} has no {name}", dir.display())))
            }
        }
        [] => {
            let mut hits: Vec<&String> = files.iter().filter(|n| n.ends_with(&suffix)).collect();
            hits.sort();
            match hits.as_slice() {
                [one] => Ok(dir.join(one)),
                [] => Err(Error::Config(format!("no *{suffix} in {}", dir.display()))),
                _ => Err(Error::Config(format!("several *{suffix} in {}; keep one run per directory", dir.display()))),
            }
        }
        _ => Err(Error::Config(format!(
            "{} holds several runs ({}); keep one run per directory",
            dir.display(),
            runs.join(", ")
        ))),
    }
}

fn compare_cmd(
    dir_a: &Path,
    dir_b: &Path,
    art_a: &str,
    art_b: &str,
    band: Option<(f64, f64)>,
    low_pass: bool,
    common: &Common,
) -> Result<Done, Error> {
    let pa = find_artifact(dir_a, art_a)?;
    let pb = find_artifact(dir_b, art_b)?;
    let a = read_psd_csv(&pa)?;
    let b = read_psd_csv(&pb)?;
    let band = band.unwrap_or((2.0 * a.resolution(), *a.freqs.last().unwrap_or(&1.0) * 0.5));
    let shape = if low_pass { PoleShape::LowPass } else { PoleShape::HighPass };
    let report = compare_psds(&a, &b, band, shape, None)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let header = format!(
        "# a={} b={} resampled={}\n",
        pa.display(),
        pb.display(),
        report.resampled
    );
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("out").join("compare"));
    let format = format_of(common)?;
    if matches!(format, Format::Csv | Format::Both) {
        write_file(&dir.join("compare_ratio.csv"), &table_csv(&report.table, &header))?;
    }
    if matches!(format, Format::Svg | Format::Both) {
        let mut plot = LinePlot::new("B over A", "frequency (Hz)", "ratio (dB)");
        plot.log_x = true;
        for (j, name) in report.table.columns.iter().enumerate().skip(1) {
            plot = plot.series(name, report.table.rows.iter().map(|r| (r[0], r[j])).collect());
        }
        write_file(&dir.join("compare_ratio.svg"), &plot.render())?;
    }
    let show = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
    out!("crossover_raw_hz = {}", show(report.crossover_raw_hz));
    out!("crossover_fit_hz = {}", show(report.crossover_fit_hz));
    out!("crossing_3db_hz = {}", show(report.crossing_3db_hz));
    out!("resampled = {}", report.resampled);
    Ok(Done::Ok)
}
