use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::bench::{ConvergenceReport, Diagnostics, ReportRow};
use crate::error::{Error, Result};
use crate::net::train::TrainReport;

/// One CSV row; the same shape for benchmark and training runs.
pub type MetricRow = ReportRow;

pub const CSV_HEADER: [&str; 5] = ["t", "loss", "grad_norm", "violation", "step_len"];

/// Everything written for one run. `verdict` becomes the JSON file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub command: String,
    pub family: String,
    pub seed: u64,
    /// Distinguishes paired runs (`manifold`, `euclidean`).
    pub tag: Option<String>,
    pub rows: Vec<MetricRow>,
    pub verdict: Value,
}

impl RunMetrics {
    pub fn from_bench(command: &str, report: &ConvergenceReport, diagnostics: Option<&Diagnostics>) -> Self {
        let mut verdict = json!({
            "command": command,
            "problem": report.problem,
            "family": report.family.name(),
            "seed": report.seed,
            "iterations": report.rows.len(),
            "failed": report.failed,
            "failure": report.failure,
            "oracle_optimum": report.oracle_optimum,
            "grad_norm_final": report.grad_norm_final,
            "gap_to_oracle": report.gap_to_oracle,
            "max_violation": report.max_violation(),
            "schedule_satisfies_robbins_monro": report.schedule_satisfies_robbins_monro,
        });
        if let Some(d) = diagnostics {
            verdict["diagnostics"] = json!(d);
        }
        RunMetrics {
            command: command.to_string(),
            family: report.family.name().to_string(),
            seed: report.seed,
            tag: None,
            rows: report.rows.clone(),
            verdict,
        }
    }

    /// Training rows use the mean kernel displacement as `step_len`;
    /// wall time is left out so files are reproducible.
    pub fn from_train(family: &str, seed: u64, report: &TrainReport, target: f64) -> Self {
        let rows: Vec<MetricRow> = report
            .records
            .iter()
            .map(|r| ReportRow {
                t: r.iteration,
                loss: r.loss,
                grad_norm: r.grad_norm,
                violation: r.violation,
                step_len: Some(r.step_len),
            })
            .collect();
        let failed = rows.is_empty() || rows.iter().any(|r| !r.loss.is_finite());
        let verdict = json!({
            "command": "train",
            "family": family,
            "seed": seed,
            "iterations": rows.len(),
            "failed": failed,
            "epoch_accuracy": report.epoch_accuracy,
            "best_accuracy": report.best_accuracy(),
            "target_accuracy": target,
            "epochs_to_target": report.epochs_to(target),
            "max_violation": report.max_violation(),
            "det_flips": report.det_flips,
        });
        RunMetrics {
            command: "train".into(),
            family: family.to_string(),
            seed,
            tag: None,
            rows,
            verdict,
        }
    }

    pub fn with_tag(mut self, tag: &str) -> Self {
        self.tag = Some(tag.to_string());
        self
    }

    /// `{command}_{family}_seed{seed}[_{tag}]`
    pub fn stem(&self) -> String {
        let mut s = format!("{}_{}_seed{}", self.command, self.family, self.seed);
        if let Some(t) = &self.tag {
            s.push('_');
            s.push_str(t);
        }
        s
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Numeric(format!("csv encoding: {e}"));
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.t.to_string(),
                r.loss.to_string(),
                r.grad_norm.to_string(),
                r.violation.to_string(),
                r.step_len.map_or_else(String::new, |s| s.to_string()),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numeric(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Writes `<stem>.csv`, `<stem>.json`, `<stem>.svg` and `<stem>.txt` into
/// `outdir`, creating it if needed. Returns the paths written.
pub fn emit_metrics(m: &RunMetrics, outdir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let stem = m.stem();
    let verdict = serde_json::to_string_pretty(&m.verdict).expect("verdict is plain json") + "\n";
    let title = format!("{} {} seed {}", m.command, m.family, m.seed);
    let files = [
        ("csv", m.csv_string()?),
        ("json", verdict),
        ("svg", svg_plot(&m.rows, &title)),
        ("txt", ascii_plot(&m.rows, &title)),
    ];
    let mut written = Vec::new();
    for (ext, body) in files {
        let path = outdir.join(format!("{stem}.{ext}"));
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// At most `max` evenly spaced rows, always keeping the last.
fn thin(rows: &[MetricRow], max: usize) -> Vec<&MetricRow> {
    if rows.len() <= max {
        return rows.iter().collect();
    }
    let stride = rows.len().div_ceil(max);
    let mut v: Vec<&MetricRow> = rows.iter().step_by(stride).collect();
    if v.last().map(|r| r.t) != rows.last().map(|r| r.t) {
        v.push(rows.last().unwrap());
    }
    v
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    Some(if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) })
}

fn log_grad(r: &MetricRow) -> f64 {
    if r.grad_norm > 0.0 {
        r.grad_norm.log10()
    } else {
        f64::NAN
    }
}

/// Loss (linear) above gradient norm (log scale) against iteration.
pub fn svg_plot(rows: &[MetricRow], title: &str) -> String {
    const W: f64 = 640.0;
    const PANEL: f64 = 200.0;
    const LEFT: f64 = 70.0;
    const TOP: f64 = 40.0;
    let pts = thin(rows, 2000);
    let t_max = pts.last().map_or(1.0, |r| r.t.max(1) as f64);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" font-family="monospace" font-size="11">"#,
        TOP + 2.0 * PANEL + 70.0
    );
    let _ = writeln!(s, r#"<text x="{LEFT}" y="20">{}</text>"#, escape(title));
    let panels: [(&str, Box<dyn Fn(&MetricRow) -> f64>, bool); 2] = [
        ("loss", Box::new(|r: &MetricRow| r.loss), false),
        ("grad norm (log10)", Box::new(log_grad), true),
    ];
    for (k, (label, f, log)) in panels.iter().enumerate() {
        let y0 = TOP + k as f64 * (PANEL + 30.0);
        let w = W - LEFT - 20.0;
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{y0}" width="{w}" height="{PANEL}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{label}</text>"#, LEFT + 5.0, y0 + 14.0);
        let Some((lo, hi)) = range(pts.iter().map(|r| f(r))) else {
            continue;
        };
        let fmt = |v: f64| if *log { format!("1e{v:.1}") } else { format!("{v:.3e}") };
        let _ = writeln!(s, r#"<text x="2" y="{}">{}</text>"#, y0 + 10.0, fmt(hi));
        let _ = writeln!(s, r#"<text x="2" y="{}">{}</text>"#, y0 + PANEL, fmt(lo));
        let mut line = String::new();
        for r in &pts {
            let v = f(r);
            if !v.is_finite() {
                continue;
            }
            let x = LEFT + w * r.t as f64 / t_max;
            let y = y0 + PANEL * (hi - v) / (hi - lo);
            let _ = write!(line, "{x:.1},{y:.1} ");
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" points="{}"/>"#,
            if *log { "firebrick" } else { "steelblue" },
            line.trim_end()
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{}">iteration 0 .. {}</text>"#,
        TOP + 2.0 * PANEL + 50.0,
        t_max as u64
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Terminal rendition of the log-scale gradient norm.
pub fn ascii_plot(rows: &[MetricRow], title: &str) -> String {
    const COLS: usize = 64;
    const ROWS: usize = 16;
    let mut out = format!("{title}\nlog10 grad norm vs iteration\n");
    let Some((lo, hi)) = range(rows.iter().map(log_grad)) else {
        out.push_str("(no data)\n");
        return out;
    };
    let mut grid = vec![[b' '; COLS]; ROWS];
    let n = rows.len();
    for (i, r) in rows.iter().enumerate() {
        let v = log_grad(r);
        if !v.is_finite() {
            continue;
        }
        let x = if n > 1 { i * (COLS - 1) / (n - 1) } else { 0 };
        let y = (((hi - v) / (hi - lo)) * (ROWS - 1) as f64).round() as usize;
        grid[y.min(ROWS - 1)][x] = b'*';
    }
    for (k, line) in grid.iter().enumerate() {
        let label = match k {
            0 => format!("{hi:>7.2}"),
            k if k == ROWS - 1 => format!("{lo:>7.2}"),
            _ => " ".repeat(7),
        };
        let _ = writeln!(out, "{label} |{}", String::from_utf8_lossy(line).trim_end());
    }
    let _ = writeln!(out, "{} +{}", " ".repeat(7), "-".repeat(COLS));
    let _ = writeln!(
        out,
        "{}  0{:>width$}",
        " ".repeat(7),
        rows.last().map_or(0, |r| r.t),
        width = COLS - 1
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{self, ConvergenceReport};
    use crate::manifold::Family;

    fn rows(n: u64) -> Vec<MetricRow> {
        (0..n)
            .map(|t| ReportRow {
                t,
                loss: 1.0 / (t + 1) as f64,
                grad_norm: (-(t as f64) / 10.0).exp(),
                violation: 0.0,
                step_len: (t % 2 == 0).then_some(0.5),
            })
            .collect()
    }

    #[test]
    fn empty_report_is_header_only_and_failed() {
        let r = ConvergenceReport::from_rows("rayleigh", Family::Sphere, 0, vec![], -1.0, true, None);
        let m = RunMetrics::from_bench("bench", &r, None);
        assert_eq!(m.csv_string().unwrap(), "t,loss,grad_norm,violation,step_len\n");
        assert_eq!(m.verdict["failed"], json!(true));
        let dir = tempfile::tempdir().unwrap();
        let files = emit_metrics(&m, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        assert!(ascii_plot(&m.rows, "x").contains("no data"));
    }

    #[test]
    fn one_row_per_iteration() {
        let r = ConvergenceReport::from_rows("rayleigh", Family::Sphere, 0, rows(100), 0.0, true, None);
        let csv = RunMetrics::from_bench("bench", &r, None).csv_string().unwrap();
        assert_eq!(csv.lines().count(), 101);
        assert_eq!(csv.lines().nth(2).unwrap(), "1,0.5,0.9048374180359595,0,");
    }

    #[test]
    fn filenames_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        let p = bench::rayleigh_problem(3, 0).unwrap();
        let mut names = std::collections::BTreeSet::new();
        for seed in [1, 2] {
            let r = ConvergenceReport::from_rows("rayleigh", Family::Sphere, seed, rows(5), p.oracle_optimum, true, None);
            for f in emit_metrics(&RunMetrics::from_bench("bench", &r, None), dir.path()).unwrap() {
                assert!(names.insert(f));
            }
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 8);
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        std::fs::write(&file, "x").unwrap();
        let r = ConvergenceReport::from_rows("rayleigh", Family::Sphere, 0, rows(3), 0.0, true, None);
        let e = emit_metrics(&RunMetrics::from_bench("bench", &r, None), &file.join("sub")).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
    }

    #[test]
    fn plots_render() {
        let r = rows(500);
        let svg = svg_plot(&r, "a <b>");
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a &lt;b&gt;"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        let txt = ascii_plot(&r, "t");
        assert_eq!(txt.lines().count(), 2 + 16 + 2);
        assert!(txt.contains('*'));
    }
}
