//! Delimited-text artifact formats.
//!
//! Every stage reads and writes plain text so intermediates stay inspectable
//! and diffable. Each output file starts with comment lines naming the
//! configuration digest and tool version; readers can verify the digest to
//! reject stale intermediates. Floats are written in shortest-roundtrip form,
//! so rereading a file reproduces the exact bits and rerunning a stage
//! reproduces the exact bytes.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{MetricsError, SimilarityMatrix};
use crate::panel::{CharacteristicPanel, PanelError, NO_GROUP};
use crate::qcml::ModelCheckpoint;
use crate::signal::{Horizon, SignalError, SignalSeries};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("cannot parse {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("{path} was produced under config digest {found}, expected {expected}; rerun the earlier stages")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("missing input file {0}")]
    MissingFile(PathBuf),
}

fn parse_err(path: &Path, detail: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn header_block(digest: &str) -> String {
    format!("# config_digest: {digest}\n# tool_version: {TOOL_VERSION}\n")
}

/// Digest recorded in a file's leading comment block.
pub fn read_file_digest(path: &Path) -> Result<String, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("# config_digest:") {
            return Ok(rest.trim().to_string());
        }
        if !line.starts_with('#') {
            break;
        }
    }
    Err(parse_err(path, "no config_digest header"))
}

fn check_digest(path: &Path, expected: Option<&str>) -> Result<(), IoError> {
    if let Some(expected) = expected {
        let found = read_file_digest(path)?;
        if found != expected {
            return Err(IoError::DigestMismatch {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found,
            });
        }
    }
    Ok(())
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn parse_value(s: &str) -> f64 {
    if s.is_empty() {
        f64::NAN
    } else {
        s.parse().unwrap_or(f64::NAN)
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?)
}

// --- panel directory -------------------------------------------------------

/// Write a panel as a directory of delimited files: characteristics, returns,
/// groups, controls, and (when present) the target. The synthetic generator
/// and external data both flow through this one format.
pub fn write_panel_dir(dir: &Path, panel: &CharacteristicPanel, digest: &str) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let dates = panel.dates();
    let firms = panel.firms();

    let mut w = String::new();
    w.push_str(&header_block(digest));
    w.push_str("date,firm_id");
    for name in panel.characteristic_names() {
        w.push(',');
        w.push_str(name);
    }
    w.push('\n');
    for (t, date) in dates.iter().enumerate() {
        let block = panel.characteristics_at(t);
        for (j, firm) in firms.iter().enumerate() {
            w.push_str(&format!("{date},{firm}"));
            for c in 0..panel.n_characteristics() {
                w.push(',');
                w.push_str(&fmt_value(block[(j, c)]));
            }
            w.push('\n');
        }
    }
    fs::write(dir.join("characteristics.csv"), w)?;

    let mut w = String::new();
    w.push_str(&header_block(digest));
    w.push_str("date,firm_id,ret\n");
    for (t, date) in dates.iter().enumerate() {
        for (j, firm) in firms.iter().enumerate() {
            w.push_str(&format!("{date},{firm},{}\n", fmt_value(panel.returns()[(t, j)])));
        }
    }
    fs::write(dir.join("returns.csv"), w)?;

    let mut w = String::new();
    w.push_str(&header_block(digest));
    w.push_str("date,firm_id,group\n");
    for (t, date) in dates.iter().enumerate() {
        for (j, firm) in firms.iter().enumerate() {
            let g = panel.groups_at(t)[j];
            let cell = if g == NO_GROUP { String::new() } else { g.to_string() };
            w.push_str(&format!("{date},{firm},{cell}\n"));
        }
    }
    fs::write(dir.join("groups.csv"), w)?;

    let mut w = String::new();
    w.push_str(&header_block(digest));
    w.push_str("date,firm_id");
    for name in panel.control_names() {
        w.push(',');
        w.push_str(name);
    }
    w.push('\n');
    for (t, date) in dates.iter().enumerate() {
        let block = panel.controls_at(t);
        for (j, firm) in firms.iter().enumerate() {
            w.push_str(&format!("{date},{firm}"));
            for k in 0..panel.n_controls() {
                w.push(',');
                w.push_str(&fmt_value(block[(j, k)]));
            }
            w.push('\n');
        }
    }
    fs::write(dir.join("controls.csv"), w)?;

    if let Some(target) = panel.target() {
        let mut w = String::new();
        w.push_str(&header_block(digest));
        w.push_str("date,firm_id,target\n");
        for (t, date) in dates.iter().enumerate() {
            for (j, firm) in firms.iter().enumerate() {
                w.push_str(&format!("{date},{firm},{}\n", fmt_value(target[(t, j)])));
            }
        }
        fs::write(dir.join("target.csv"), w)?;
    }
    Ok(())
}

struct LongRows {
    columns: Vec<String>,
    rows: Vec<(NaiveDate, String, Vec<f64>)>,
}

fn read_long(path: &Path) -> Result<LongRows, IoError> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "date" || &headers[1] != "firm_id" {
        return Err(parse_err(path, "expected header starting with date,firm_id"));
    }
    let columns: Vec<String> = headers.iter().skip(2).map(String::from).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let date: NaiveDate = record[0]
            .parse()
            .map_err(|_| parse_err(path, format!("bad date '{}'", &record[0])))?;
        let firm = record[1].to_string();
        let values: Vec<f64> = (2..record.len()).map(|i| parse_value(&record[i])).collect();
        rows.push((date, firm, values));
    }
    Ok(LongRows { columns, rows })
}

/// Read a panel directory written by [`write_panel_dir`]. Date and firm axes
/// are the sorted unions found across the files; absent cells become missing.
pub fn read_panel_dir(dir: &Path, expected_digest: Option<&str>) -> Result<CharacteristicPanel, IoError> {
    let chars_path = dir.join("characteristics.csv");
    let returns_path = dir.join("returns.csv");
    let groups_path = dir.join("groups.csv");
    let controls_path = dir.join("controls.csv");
    let target_path = dir.join("target.csv");
    for p in [&chars_path, &returns_path, &groups_path, &controls_path] {
        check_digest(p, expected_digest)?;
    }

    let chars = read_long(&chars_path)?;
    let rets = read_long(&returns_path)?;
    let groups = read_long(&groups_path)?;
    let controls = read_long(&controls_path)?;

    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut firms: Vec<String> = Vec::new();
    for rows in [&chars.rows, &rets.rows, &groups.rows, &controls.rows] {
        for (d, f, _) in rows {
            dates.push(*d);
            firms.push(f.clone());
        }
    }
    dates.sort();
    dates.dedup();
    firms.sort();
    firms.dedup();
    let date_idx: std::collections::HashMap<NaiveDate, usize> =
        dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let firm_idx: std::collections::HashMap<&str, usize> =
        firms.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();

    let t_count = dates.len();
    let j_count = firms.len();
    let c_count = chars.columns.len();
    let k_count = controls.columns.len();

    let mut characteristics = vec![DMatrix::from_element(j_count, c_count, f64::NAN); t_count];
    for (d, f, v) in &chars.rows {
        let (t, j) = (date_idx[d], firm_idx[f.as_str()]);
        for (c, x) in v.iter().enumerate() {
            characteristics[t][(j, c)] = *x;
        }
    }
    let mut control_mats = vec![DMatrix::from_element(j_count, k_count, f64::NAN); t_count];
    for (d, f, v) in &controls.rows {
        let (t, j) = (date_idx[d], firm_idx[f.as_str()]);
        for (k, x) in v.iter().enumerate() {
            control_mats[t][(j, k)] = *x;
        }
    }
    let mut group_rows = vec![vec![NO_GROUP; j_count]; t_count];
    for (d, f, v) in &groups.rows {
        let (t, j) = (date_idx[d], firm_idx[f.as_str()]);
        if let Some(g) = v.first() {
            if g.is_finite() {
                group_rows[t][j] = *g as i32;
            }
        }
    }
    let mut returns = DMatrix::from_element(t_count, j_count, f64::NAN);
    for (d, f, v) in &rets.rows {
        let (t, j) = (date_idx[d], firm_idx[f.as_str()]);
        if let Some(r) = v.first() {
            returns[(t, j)] = *r;
        }
    }

    let mut panel = CharacteristicPanel::new(
        dates,
        firms,
        chars.columns,
        controls.columns,
        characteristics,
        control_mats,
        group_rows,
        returns,
    )?;

    if target_path.exists() {
        check_digest(&target_path, expected_digest)?;
        let target_rows = read_long(&target_path)?;
        let mut target = DMatrix::from_element(panel.n_dates(), panel.n_firms(), f64::NAN);
        let date_idx: std::collections::HashMap<NaiveDate, usize> =
            panel.dates().iter().enumerate().map(|(i, d)| (*d, i)).collect();
        let firm_idx: std::collections::HashMap<&str, usize> = panel
            .firms()
            .iter()
            .enumerate()
            .map(|(i, f)| (f.as_str(), i))
            .collect();
        for (d, f, v) in &target_rows.rows {
            if let (Some(&t), Some(&j)) = (date_idx.get(d), firm_idx.get(f.as_str())) {
                if let Some(x) = v.first() {
                    target[(t, j)] = *x;
                }
            }
        }
        panel.set_target(target)?;
    }
    Ok(panel)
}

// --- similarity matrices ---------------------------------------------------

/// Dense text matrix with a firm-id header row, one file per date.
pub fn write_similarity(path: &Path, sim: &SimilarityMatrix, digest: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = String::new();
    w.push_str(&header_block(digest));
    w.push_str(&format!("# date: {}\n", sim.date));
    w.push_str("firm_id");
    for f in &sim.firms {
        w.push(',');
        w.push_str(f);
    }
    w.push('\n');
    for (a, firm) in sim.firms.iter().enumerate() {
        w.push_str(firm);
        for b in 0..sim.len() {
            w.push(',');
            w.push_str(&fmt_value(sim.values()[(a, b)]));
        }
        w.push('\n');
    }
    fs::write(path, w)?;
    Ok(())
}

pub fn read_similarity(path: &Path, expected_digest: Option<&str>) -> Result<SimilarityMatrix, IoError> {
    check_digest(path, expected_digest)?;
    let mut date: Option<NaiveDate> = None;
    {
        let reader = BufReader::new(fs::File::open(path)?);
        for line in reader.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# date:") {
                date = rest.trim().parse().ok();
            }
            if !line.starts_with('#') {
                break;
            }
        }
    }
    let date = date.ok_or_else(|| parse_err(path, "no date header"))?;
    let mut reader = csv_reader(path)?;
    let headers = reader.headers()?.clone();
    let firms: Vec<String> = headers.iter().skip(1).map(String::from).collect();
    let j = firms.len();
    let mut values = DMatrix::zeros(j, j);
    let mut row_count = 0usize;
    for (a, record) in reader.records().enumerate() {
        let record = record?;
        if a >= j || record.len() != j + 1 {
            return Err(parse_err(path, "matrix shape does not match header"));
        }
        for b in 0..j {
            values[(a, b)] = parse_value(&record[b + 1]);
        }
        row_count += 1;
    }
    if row_count != j {
        return Err(parse_err(path, format!("expected {j} rows, found {row_count}")));
    }
    Ok(SimilarityMatrix::new(date, firms, values)?)
}

// --- model checkpoints ------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config_digest: String,
    tool_version: String,
    checkpoint: ModelCheckpoint,
}

pub fn write_model(path: &Path, checkpoint: &ModelCheckpoint, digest: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = CheckpointFile {
        config_digest: digest.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        checkpoint: checkpoint.clone(),
    };
    let mut out = serde_json::to_string_pretty(&file)?;
    out.push('\n');
    fs::write(path, out)?;
    Ok(())
}

pub fn read_model(path: &Path, expected_digest: Option<&str>) -> Result<ModelCheckpoint, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let file: CheckpointFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if let Some(expected) = expected_digest {
        if file.config_digest != expected {
            return Err(IoError::DigestMismatch {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found: file.config_digest,
            });
        }
    }
    Ok(file.checkpoint)
}

// --- kernel bandwidths -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GammaFile {
    pub config_digest: String,
    pub tool_version: String,
    pub gamma_euclidean: f64,
    pub gamma_qcml: f64,
    /// True when gamma_qcml came from median matching rather than the config.
    pub calibrated: bool,
}

pub fn write_gamma(path: &Path, gamma: &GammaFile) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = serde_json::to_string_pretty(gamma)?;
    out.push('\n');
    fs::write(path, out)?;
    Ok(())
}

pub fn read_gamma(path: &Path, expected_digest: Option<&str>) -> Result<GammaFile, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let file: GammaFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if let Some(expected) = expected_digest {
        if file.config_digest != expected {
            return Err(IoError::DigestMismatch {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found: file.config_digest,
            });
        }
    }
    Ok(file)
}

// --- signals -----------------------------------------------------------------

/// Long-format signal file: date, firm_id, horizon, value. Only finite values
/// are written.
pub fn write_signals(
    path: &Path,
    series: &[SignalSeries],
    firms: &[String],
    digest: &str,
) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = String::new();
    w.push_str(&header_block(digest));
    let normalized = series.iter().all(|s| s.normalized);
    w.push_str(&format!("# normalized: {normalized}\n"));
    w.push_str("date,firm_id,horizon,value\n");
    for s in series {
        for (pos, date) in s.dates.iter().enumerate() {
            for (j, firm) in firms.iter().enumerate() {
                let v = s.values[pos][j];
                if v.is_finite() {
                    w.push_str(&format!("{date},{firm},{},{v}\n", s.horizon.label()));
                }
            }
        }
    }
    fs::write(path, w)?;
    Ok(())
}

/// Read a signal file back against the panel that defines the firm and date
/// axes.
pub fn read_signals(
    path: &Path,
    panel: &CharacteristicPanel,
    expected_digest: Option<&str>,
) -> Result<Vec<SignalSeries>, IoError> {
    check_digest(path, expected_digest)?;
    let mut normalized = false;
    {
        let reader = BufReader::new(fs::File::open(path)?);
        for line in reader.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# normalized:") {
                normalized = rest.trim() == "true";
            }
            if !line.starts_with('#') {
                break;
            }
        }
    }
    let date_idx: std::collections::HashMap<NaiveDate, usize> =
        panel.dates().iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let firm_idx: std::collections::HashMap<&str, usize> = panel
        .firms()
        .iter()
        .enumerate()
        .map(|(i, f)| (f.as_str(), i))
        .collect();

    let mut reader = csv_reader(path)?;
    // horizon label -> date index -> values
    let mut buckets: std::collections::BTreeMap<String, std::collections::BTreeMap<usize, Vec<f64>>> =
        std::collections::BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 4 {
            return Err(parse_err(path, "expected 4 columns"));
        }
        let date: NaiveDate = record[0]
            .parse()
            .map_err(|_| parse_err(path, format!("bad date '{}'", &record[0])))?;
        let Some(&t) = date_idx.get(&date) else {
            return Err(parse_err(path, format!("date {date} not in panel")));
        };
        let Some(&j) = firm_idx.get(&record[1]) else {
            return Err(parse_err(path, format!("firm {} not in panel", &record[1])));
        };
        let horizon = record[2].to_string();
        let value = parse_value(&record[3]);
        buckets
            .entry(horizon)
            .or_default()
            .entry(t)
            .or_insert_with(|| vec![f64::NAN; panel.n_firms()])[j] = value;
    }
    let mut out = Vec::new();
    for (label, dates) in buckets {
        let horizon = Horizon::parse(&label)?;
        let date_indices: Vec<usize> = dates.keys().copied().collect();
        let values: Vec<Vec<f64>> = dates.into_values().collect();
        out.push(SignalSeries {
            horizon,
            dates: date_indices.iter().map(|&t| panel.dates()[t]).collect(),
            date_indices,
            values,
            normalized,
        });
    }
    // stable horizon order: numeric ascending, combined last
    out.sort_by_key(|s| match s.horizon {
        Horizon::Days(d) => (0, d),
        Horizon::Combined => (1, 0),
    });
    Ok(out)
}

// --- backtest report ----------------------------------------------------------

use crate::backtest::BacktestReport;

/// Write the report tables: Sharpe by period x horizon, half-life by period x
/// horizon, and the daily return series for external plotting.
pub fn write_report(dir: &Path, report: &BacktestReport) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let digest = &report.config_digest;

    let mut w = String::new();
    w.push_str(&header_block(digest));
    w.push_str("period,start,end");
    for label in &report.horizon_labels {
        w.push_str(&format!(",h{label}"));
    }
    for label in &report.horizon_labels {
        w.push_str(&format!(",h{label}_degenerate"));
    }
    w.push('\n');
    for (p, period) in report.periods.iter().enumerate() {
        w.push_str(&format!("{},{},{}", period.label, period.start, period.end));
        for cell in &report.sharpe[p] {
            w.push_str(&format!(",{}", fmt_value(cell.sharpe)));
        }
        for cell in &report.sharpe[p] {
            w.push_str(&format!(",{}", cell.degenerate));
        }
        w.push('\n');
    }
    fs::write(dir.join("sharpe.csv"), w)?;

    let mut w = String::new();
    w.push_str(&header_block(digest));
    w.push_str("period,start,end");
    for label in &report.horizon_labels {
        w.push_str(&format!(",h{label}"));
    }
    w.push('\n');
    for (p, period) in report.periods.iter().enumerate() {
        w.push_str(&format!("{},{},{}", period.label, period.start, period.end));
        for hl in &report.half_life[p] {
            w.push(',');
            if let Some(v) = hl {
                w.push_str(&fmt_value(*v));
            }
        }
        w.push('\n');
    }
    fs::write(dir.join("half_life.csv"), w)?;

    let mut w = String::new();
    w.push_str(&header_block(digest));
    w.push_str("date,horizon,ret,ret_scaled\n");
    for (h, label) in report.horizon_labels.iter().enumerate() {
        for (i, date) in report.dates.iter().enumerate() {
            w.push_str(&format!(
                "{date},{label},{},{}\n",
                fmt_value(report.daily_returns[h][i]),
                fmt_value(report.scaled_returns[h][i])
            ));
        }
    }
    fs::write(dir.join("daily_returns.csv"), w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{generate_synthetic, SyntheticConfig};

    #[test]
    fn panel_round_trip() {
        let config = SyntheticConfig {
            firms: 8,
            dates: 40,
            clusters: 2,
            ..SyntheticConfig::default()
        };
        let panel = generate_synthetic(&config).unwrap();
        let panel = crate::panel::build_target(&panel, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_panel_dir(dir.path(), &panel, "abc123").unwrap();
        let back = read_panel_dir(dir.path(), Some("abc123")).unwrap();
        assert_eq!(panel, back);
    }

    #[test]
    fn digest_mismatch_detected() {
        let config = SyntheticConfig {
            firms: 5,
            dates: 10,
            clusters: 2,
            ..SyntheticConfig::default()
        };
        let panel = generate_synthetic(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_panel_dir(dir.path(), &panel, "aaa").unwrap();
        let err = read_panel_dir(dir.path(), Some("bbb")).unwrap_err();
        assert!(matches!(err, IoError::DigestMismatch { .. }));
    }

    #[test]
    fn similarity_round_trip() {
        let date = NaiveDate::from_ymd_opt(2020, 3, 2).unwrap();
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 1.3, 1.3, 0.0]);
        let sim = crate::metrics::similarity_matrix(date, vec!["a".into(), "b".into()], &d, 0.7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim").join("2020-03-02.csv");
        write_similarity(&path, &sim, "xyz").unwrap();
        let back = read_similarity(&path, Some("xyz")).unwrap();
        assert_eq!(sim, back);
    }
}
