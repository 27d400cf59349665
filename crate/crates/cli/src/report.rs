//! Aggregation of training logs into train/test gap curves.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

impl LogRow {
    pub fn gap(&self) -> f64 {
        self.test_loss - self.train_loss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub name: String,
    pub dir: PathBuf,
    /// λ from the run manifest, when one is present.
    pub lambda: Option<f64>,
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn regularized(&self) -> bool {
        self.lambda.is_some_and(|l| l > 0.0)
    }
}

pub fn parse_log(text: &str) -> CliResult<Vec<LogRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "iteration,train_loss,test_loss,test_acc" {
        return Err(CliError::input(format!("unexpected log header {header:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || CliError::input(format!("log line {}: {line:?}", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(LogRow {
                iteration: f[0].trim().parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                test_loss: num(f[2])?,
                test_acc: num(f[3])?,
            })
        })
        .collect()
}

fn read_run(dir: &Path) -> CliResult<RunLog> {
    let log_path = dir.join("log.csv");
    let text = fs::read_to_string(&log_path).map_err(|e| CliError::input(format!("{}: {e}", log_path.display())))?;
    let lambda = fs::read_to_string(dir.join("manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["params"]["lambda"].as_f64());
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunLog { name, dir: dir.to_path_buf(), lambda, rows: parse_log(&text)? })
}

/// Each path is a run directory (holding `log.csv`) or a directory whose
/// immediate subdirectories are runs. Runs come back sorted by name.
pub fn collect_runs(paths: &[PathBuf]) -> CliResult<Vec<RunLog>> {
    let mut dirs = BTreeSet::new();
    for p in paths {
        if p.join("log.csv").is_file() {
            dirs.insert(p.clone());
            continue;
        }
        let entries = fs::read_dir(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
        for e in entries {
            let d = e?.path();
            if d.join("log.csv").is_file() {
                dirs.insert(d);
            }
        }
    }
    let mut runs = dirs.iter().map(|d| read_run(d)).collect::<CliResult<Vec<_>>>()?;
    runs.sort_by(|a, b| a.name.cmp(&b.name).then(a.dir.cmp(&b.dir)));
    let names: BTreeSet<&str> = runs.iter().map(|r| r.name.as_str()).collect();
    if names.len() != runs.len() {
        return Err(CliError::input("run directory names must be unique"));
    }
    Ok(runs)
}

pub fn gap_csv(run: &RunLog) -> String {
    let mut out = String::from("iteration,train_loss,test_loss,gap\n");
    for r in &run.rows {
        writeln!(out, "{},{:.16e},{:.16e},{:.16e}", r.iteration, r.train_loss, r.test_loss, r.gap()).unwrap();
    }
    out
}

/// Iterations logged by every run.
pub fn common_iterations(runs: &[RunLog]) -> Vec<usize> {
    let mut sets = runs.iter().map(|r| r.rows.iter().map(|x| x.iteration).collect::<BTreeSet<_>>());
    let first = sets.next().unwrap_or_default();
    sets.fold(first, |acc, s| acc.intersection(&s).copied().collect()).into_iter().collect()
}

fn gap_at(run: &RunLog, it: usize) -> f64 {
    run.rows.iter().find(|r| r.iteration == it).expect("common iteration").gap()
}

/// One row per common iteration: every run's gap, the mean gap of the
/// unregularized runs, the smallest gap among regularized runs, and whether
/// that smallest gap is at most the unregularized mean.
pub fn comparison_csv(runs: &[RunLog]) -> String {
    let mut out = String::from("iteration");
    for r in runs {
        write!(out, ",{}", r.name).unwrap();
    }
    out.push_str(",unregularized_mean_gap,best_regularized_gap,regularized_le_unregularized\n");
    for it in common_iterations(runs) {
        write!(out, "{it}").unwrap();
        for r in runs {
            write!(out, ",{:.16e}", gap_at(r, it)).unwrap();
        }
        let base: Vec<f64> = runs.iter().filter(|r| !r.regularized()).map(|r| gap_at(r, it)).collect();
        let best = runs.iter().filter(|r| r.regularized()).map(|r| gap_at(r, it)).fold(None, |a: Option<f64>, g| {
            Some(a.map_or(g, |a| a.min(g)))
        });
        let mean = (!base.is_empty()).then(|| base.iter().sum::<f64>() / base.len() as f64);
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.16e}")).unwrap_or_default();
        let cmp = match (best, mean) {
            (Some(b), Some(m)) => (b <= m).to_string(),
            _ => String::new(),
        };
        writeln!(out, ",{},{},{}", cell(mean), cell(best), cmp).unwrap();
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Line plot of the gap curves with a zero line and a legend.
pub fn gap_svg(runs: &[RunLog]) -> String {
    let (w, h, pad) = (720.0, 420.0, 50.0);
    let points: Vec<(f64, f64)> = runs.iter().flat_map(|r| r.rows.iter().map(|x| (x.iteration as f64, x.gap()))).collect();
    let x_max = points.iter().map(|p| p.0).fold(1.0, f64::max);
    let (mut y_min, mut y_max) = points.iter().fold((0.0f64, 0.0f64), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    if y_max - y_min < 1e-12 {
        y_max += 1.0;
        y_min -= 1.0;
    }
    let sx = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y_min) / (y_max - y_min) * (h - 2.0 * pad);
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<line x1="{pad}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        sy(0.0),
        w - pad
    )
    .unwrap();
    writeln!(svg, r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2.0 * pad, h - 2.0 * pad).unwrap();
    writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">iteration (max {x_max})</text>"#, w / 2.0, h - 15.0).unwrap();
    writeln!(
        svg,
        r#"<text x="15" y="{}" font-size="12" transform="rotate(-90 15 {0})" text-anchor="middle">test - train loss [{y_min:.3}, {y_max:.3}]</text>"#,
        h / 2.0
    )
    .unwrap();
    for (i, r) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = r.rows.iter().map(|x| format!("{:.2},{:.2}", sx(x.iteration as f64), sy(x.gap()))).collect();
        writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
        writeln!(svg, r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#, pad + 8.0, pad + 14.0 * (i + 1) as f64, xml_escape(&r.name)).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
