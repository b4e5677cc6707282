use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::run::{ScenarioResult, Table};
use super::svg::LinePlot;
use crate::error::{Error, Result};
use crate::series::TimeSeries;
use crate::spectral::{BinFlag, PsdEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Svg,
    Both,
}

impl Format {
    fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
    fn svg(self) -> bool {
        matches!(self, Format::Svg | Format::Both)
    }
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "svg" => Ok(Format::Svg),
            "both" => Ok(Format::Both),
            _ => Err(Error::Config(format!("unknown format {s:?}; use csv, svg or both"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Trajectory,
    Psd,
    Table,
    Summary,
    Config,
}

/// Artifact names in a stable order, with their kind.
fn catalogue(r: &ScenarioResult) -> Vec<(String, Kind)> {
    let mut v: Vec<(String, Kind)> = Vec::new();
    v.extend(r.trajectories.keys().map(|k| (k.clone(), Kind::Trajectory)));
    v.extend(r.psds.keys().map(|k| (format!("psd_{k}"), Kind::Psd)));
    v.extend(r.tables.keys().map(|k| (k.clone(), Kind::Table)));
    v.push(("summary".into(), Kind::Summary));
    v.push(("config".into(), Kind::Config));
    v
}

/// Names accepted in the `outputs` list of a scenario.
pub fn artifact_names(r: &ScenarioResult) -> Vec<String> {
    catalogue(r).into_iter().map(|(n, _)| n).collect()
}

/// Artifacts the configuration asks for; summary and config are always kept.
pub fn selected_artifacts(r: &ScenarioResult) -> Result<Vec<String>> {
    let all = artifact_names(r);
    if r.config.outputs.is_empty() {
        return Ok(all);
    }
    let unknown: Vec<&String> = r.config.outputs.iter().filter(|o| !all.contains(o)).collect();
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "unknown artifact(s) {unknown:?}; available: {}",
            all.join(", ")
        )));
    }
    Ok(all
        .into_iter()
        .filter(|n| n == "summary" || n == "config" || r.config.outputs.contains(n))
        .collect())
}

pub fn provenance_header(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash} seed={seed}\n")
}

/// Shortest round-trip exponent form, identical on every platform.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == 0.0 {
        "0".into()
    } else {
        format!("{v:e}")
    }
}

pub fn trajectory_csv(s: &TimeSeries, header: &str) -> String {
    let mut out = String::with_capacity(32 * s.len() + 64);
    out.push_str(header);
    let _ = writeln!(out, "t_s,value_{}", s.unit);
    for (i, v) in s.samples.iter().enumerate() {
        let _ = writeln!(out, "{},{}", fmt_f64(s.time(i)), fmt_f64(*v));
    }
    out
}

pub fn psd_csv(p: &PsdEstimate, header: &str) -> String {
    let mut out = String::with_capacity(48 * p.freqs.len() + 64);
    out.push_str(header);
    let _ = writeln!(
        out,
        "# unit={} segments={} segment_len={} window={} overlap={} low_confidence={}",
        p.unit,
        p.n_segments,
        p.segment_len,
        p.window.name(),
        p.overlap,
        p.low_confidence
    );
    out.push_str("freq_Hz,value,flag\n");
    for i in 0..p.freqs.len() {
        let _ = writeln!(out, "{},{},{}", fmt_f64(p.freqs[i]), fmt_f64(p.values[i]), p.flags[i].as_str());
    }
    out
}

pub fn table_csv(t: &Table, header: &str) -> String {
    let mut out = String::new();
    out.push_str(header);
    out.push_str(&t.columns.join(","));
    out.push('\n');
    for row in &t.rows {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn summary_json(r: &ScenarioResult) -> String {
    let mut doc = serde_json::Map::new();
    doc.insert("config_hash".into(), json!(r.config_hash));
    doc.insert("seed".into(), json!(r.config.seed));
    doc.insert("lost_lock".into(), json!(r.lost_lock));
    doc.insert("artifacts".into(), json!(artifact_names(r)));
    let metrics: serde_json::Map<String, Value> = r.summary.clone().into_iter().collect();
    doc.insert("metrics".into(), Value::Object(metrics));
    let mut s = serde_json::to_string_pretty(&Value::Object(doc)).expect("summary serializes");
    s.push('\n');
    s
}

fn plot_trajectory(name: &str, s: &TimeSeries) -> LinePlot {
    let pts = s.samples.iter().enumerate().map(|(i, v)| (s.time(i), *v)).collect();
    LinePlot::new(name, "time (s)", &s.unit).series(name, pts)
}

fn plot_psd(name: &str, p: &PsdEstimate) -> LinePlot {
    let pts = p.freqs.iter().zip(&p.values).map(|(f, v)| (*f, *v)).collect();
    LinePlot::new(name, "frequency (Hz)", &format!("PSD ({})", p.unit))
        .log_log()
        .series(name, pts)
}

fn plot_table(name: &str, t: &Table) -> LinePlot {
    let mut plot = LinePlot::new(name, &t.columns[0], "");
    plot.log_x = t.columns[0] == "freq_hz";
    for (j, col) in t.columns.iter().enumerate().skip(1) {
        plot = plot.series(col, t.rows.iter().map(|r| (r[0], r[j])).collect());
    }
    plot
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes the requested artifacts as `{scenario}_{artifact}.{ext}` under `dir`.
pub fn write_outputs(r: &ScenarioResult, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let wanted = selected_artifacts(r)?;
    let header = provenance_header(&r.config_hash, r.config.seed);
    let stem = |a: &str, ext: &str| dir.join(format!("{}_{a}.{ext}", r.config.name));
    let mut written = Vec::new();
    for (name, kind) in catalogue(r) {
        if !wanted.contains(&name) {
            continue;
        }
        match kind {
            Kind::Summary => write(stem(&name, "json"), &summary_json(r), &mut written)?,
            Kind::Config => write(stem(&name, "toml"), &(header.clone() + &r.config.to_toml()), &mut written)?,
            Kind::Trajectory => {
                let s = &r.trajectories[&name];
                if format.csv() {
                    write(stem(&name, "csv"), &trajectory_csv(s, &header), &mut written)?;
                }
                if format.svg() {
                    write(stem(&name, "svg"), &plot_trajectory(&name, s).render(), &mut written)?;
                }
            }
            Kind::Psd => {
                let p = &r.psds[&name["psd_".len()..]];
                if format.csv() {
                    write(stem(&name, "csv"), &psd_csv(p, &header), &mut written)?;
                }
                if format.svg() {
                    write(stem(&name, "svg"), &plot_psd(&name, p).render(), &mut written)?;
                }
            }
            Kind::Table => {
                let t = &r.tables[&name];
                if format.csv() {
                    write(stem(&name, "csv"), &table_csv(t, &header), &mut written)?;
                }
                if format.svg() {
                    write(stem(&name, "svg"), &plot_table(&name, t).render(), &mut written)?;
                }
            }
        }
    }
    Ok(written)
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty())
}

fn parse(v: &str, path: &Path) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{}: {v:?} is not a number", path.display())))
}

/// Reads a PSD written by [`psd_csv`].
pub fn read_psd_csv(path: &Path) -> Result<PsdEstimate> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let unit = text
        .lines()
        .find_map(|l| l.strip_prefix("# unit="))
        .and_then(|l| l.split_whitespace().next())
        .unwrap_or("")
        .to_string();
    let mut freqs = Vec::new();
    let mut values = Vec::new();
    let mut flags = Vec::new();
    for line in data_lines(&text).skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 2 {
            return Err(Error::Config(format!("{}: malformed row {line:?}", path.display())));
        }
        freqs.push(parse(cells[0], path)?);
        values.push(parse(cells[1], path)?);
        flags.push(match cells.get(2).map(|s| s.trim()) {
            Some("low_snr") => BinFlag::LowSnr,
            Some("clipped") => BinFlag::Clipped,
            _ => BinFlag::Ok,
        });
    }
    let mut p = PsdEstimate::from_values(freqs, values, unit)?;
    p.flags = flags;
    Ok(p)
}

/// Reads a uniformly sampled series from a two-column (time, value) CSV.
pub fn read_series_csv(path: &Path) -> Result<TimeSeries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = data_lines(&text);
    let header = lines.next().unwrap_or("");
    let unit = header.split(',').nth(1).and_then(|c| c.strip_prefix("value_")).unwrap_or("").to_string();
    let mut t = Vec::new();
    let mut x = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 2 {
            return Err(Error::Config(format!("{}: malformed row {line:?}", path.display())));
        }
        t.push(parse(cells[0], path)?);
        x.push(parse(cells[1], path)?);
    }
    if t.len() < 2 {
        return Err(Error::Config(format!("{}: need at least two samples", path.display())));
    }
    let fs = (t.len() - 1) as f64 / (t[t.len() - 1] - t[0]);
    TimeSeries::new(x, fs, unit)
}
