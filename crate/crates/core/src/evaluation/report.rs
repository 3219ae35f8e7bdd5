//! Per-run metrics CSV and the method-by-shift summary table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::Method;

/// One trained cell: `(method, shift, seed, lambda)` and its three metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub shift: String,
    pub seed: u64,
    pub lambda: f64,
    pub accuracy: f64,
    pub robustness: f64,
    pub invariance: f64,
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(Error::at_path(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(Error::at_path(path))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub const METRICS: [&str; 3] = ["Accuracy", "Robustness", "Invariance"];
const SHIFT_ORDER: [&str; 3] = ["texture", "rotation", "contrast"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportCell {
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

/// One `(shift, metric, method)` entry of the summary, in long form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub shift: String,
    pub metric: String,
    pub method: String,
    pub lambda: Option<f64>,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

/// Columns are methods, body rows are the three metrics for each shift.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    methods: Vec<String>,
    shifts: Vec<String>,
    rows: Vec<SummaryRow>,
}

fn method_rank(m: &str) -> (usize, String) {
    let pos = Method::ALL
        .iter()
        .position(|x| x.label() == m)
        .unwrap_or(Method::ALL.len());
    (pos, m.to_string())
}

fn shift_rank(s: &str) -> (usize, String) {
    (
        SHIFT_ORDER.iter().position(|x| *x == s).unwrap_or(SHIFT_ORDER.len()),
        s.to_string(),
    )
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn uses_lambda(method: &str, rows: &[&MetricsRow]) -> bool {
    match method.parse::<Method>() {
        Ok(m) => m.uses_lambda(),
        Err(_) => rows.iter().any(|r| r.lambda != 0.0),
    }
}

/// A name with its display rank.
type Ranked = (usize, String);

/// Groups runs by `(method, shift)`, picks the lambda with the best mean
/// robustness (ties to the smaller lambda) and summarises its seeds.
pub fn report_table(rows: &[MetricsRow]) -> Result<ReportTable> {
    if rows.is_empty() {
        return Err(Error::Report("no runs to report".into()));
    }
    let mut groups: BTreeMap<(Ranked, Ranked), Vec<&MetricsRow>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in rows {
        if ![r.lambda, r.accuracy, r.robustness, r.invariance]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Report(format!(
                "non-finite value in run {} {} seed {}",
                r.method, r.shift, r.seed
            )));
        }
        if !seen.insert((r.method.clone(), r.shift.clone(), r.seed, r.lambda.to_bits())) {
            return Err(Error::Report(format!(
                "duplicate run {} {} seed {} lambda {}",
                r.method, r.shift, r.seed, r.lambda
            )));
        }
        groups
            .entry((shift_rank(&r.shift), method_rank(&r.method)))
            .or_default()
            .push(r);
    }

    let mut methods: Vec<(usize, String)> = groups.keys().map(|(_, m)| m.clone()).collect();
    methods.sort();
    methods.dedup();
    let mut shifts: Vec<(usize, String)> = groups.keys().map(|(s, _)| s.clone()).collect();
    shifts.dedup();

    let mut out = Vec::new();
    for ((shift, method), runs) in &groups {
        let mut by_lambda: BTreeMap<u64, (f64, Vec<&MetricsRow>)> = BTreeMap::new();
        for r in runs {
            // Nonnegative floats order like their bit patterns.
            by_lambda
                .entry(r.lambda.abs().to_bits())
                .or_insert((r.lambda, Vec::new()))
                .1
                .push(r);
        }
        let seed_sets: BTreeSet<Vec<u64>> = by_lambda
            .values()
            .map(|(_, rs)| {
                let mut s: Vec<u64> = rs.iter().map(|r| r.seed).collect();
                s.sort_unstable();
                s
            })
            .collect();
        if seed_sets.len() > 1 {
            return Err(Error::Report(format!(
                "{} on {}: lambda values were run with different seed sets",
                method.1, shift.1
            )));
        }
        let mut best: Option<(f64, f64, &Vec<&MetricsRow>)> = None;
        for (lambda, rs) in by_lambda.values() {
            let robust = mean_std(&rs.iter().map(|r| r.robustness).collect::<Vec<_>>()).0;
            if best.is_none_or(|(b, _, _)| robust > b) {
                best = Some((robust, *lambda, rs));
            }
        }
        let (_, lambda, chosen) = best.expect("nonempty group");
        let lambda = uses_lambda(&method.1, runs).then_some(lambda);
        let columns: [Vec<f64>; 3] = [
            chosen.iter().map(|r| r.accuracy).collect(),
            chosen.iter().map(|r| r.robustness).collect(),
            chosen.iter().map(|r| r.invariance).collect(),
        ];
        for (metric, values) in METRICS.iter().zip(columns) {
            let (mean, std) = mean_std(&values);
            out.push(SummaryRow {
                shift: shift.1.clone(),
                metric: metric.to_string(),
                method: method.1.clone(),
                lambda,
                mean,
                std,
                seeds: values.len(),
            });
        }
    }
    Ok(ReportTable {
        methods: methods.into_iter().map(|m| m.1).collect(),
        shifts: shifts.into_iter().map(|s| s.1).collect(),
        rows: out,
    })
}

impl ReportTable {
    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn shifts(&self) -> &[String] {
        &self.shifts
    }

    pub fn rows(&self) -> &[SummaryRow] {
        &self.rows
    }

    /// Number of metric rows in the rendered table: three per shift.
    pub fn body_rows(&self) -> usize {
        METRICS.len() * self.shifts.len()
    }

    pub fn cell(&self, shift: &str, metric: &str, method: &str) -> Option<ReportCell> {
        self.rows
            .iter()
            .find(|r| r.shift == shift && r.metric == metric && r.method == method)
            .map(|r| ReportCell {
                mean: r.mean,
                std: r.std,
                seeds: r.seeds,
            })
    }

    pub fn selected_lambda(&self, shift: &str, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.shift == shift && r.method == method)
            .and_then(|r| r.lambda)
    }

    fn grid(&self) -> (Vec<String>, Vec<Vec<String>>, Vec<String>) {
        let mut header = vec!["Shift".to_string(), "Metric".to_string()];
        header.extend(self.methods.iter().cloned());
        let mut body = Vec::new();
        for shift in &self.shifts {
            for metric in METRICS {
                let mut line = vec![shift.clone(), metric.to_string()];
                for m in &self.methods {
                    line.push(match self.cell(shift, metric, m) {
                        Some(c) => format!("{:.1}±{:.1}", 100.0 * c.mean, 100.0 * c.std),
                        None => "-".into(),
                    });
                }
                body.push(line);
            }
        }
        let mut footer = vec!["Selected λ".to_string(), String::new()];
        for m in &self.methods {
            let picks: Vec<String> = self
                .shifts
                .iter()
                .filter_map(|s| self.selected_lambda(s, m).map(|l| format!("{l:e}")))
                .collect();
            footer.push(if picks.is_empty() { "-".into() } else { picks.join("/") });
        }
        (header, body, footer)
    }

    /// Plain text with padded columns.
    pub fn to_text(&self) -> String {
        let (header, body, footer) = self.grid();
        let all: Vec<&Vec<String>> = std::iter::once(&header)
            .chain(&body)
            .chain(std::iter::once(&footer))
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| all.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let fmt = |r: &Vec<String>| {
            r.iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}", w = *w))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = String::new();
        out.push_str(&fmt(&header));
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for r in &body {
            out.push_str(&fmt(r));
            out.push('\n');
        }
        out.push_str(&fmt(&footer));
        out.push('\n');
        out
    }

    pub fn to_markdown(&self) -> String {
        let (header, body, footer) = self.grid();
        let line = |r: &Vec<String>| format!("| {} |\n", r.join(" | "));
        let mut out = line(&header);
        out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
        for r in &body {
            out.push_str(&line(r));
        }
        out.push('\n');
        out.push_str(&format!(
            "{}: {}\n",
            footer[0],
            self.methods
                .iter()
                .zip(&footer[2..])
                .filter(|(_, l)| l.as_str() != "-")
                .map(|(m, l)| format!("{m} = {l}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
        out
    }

    /// Long-form CSV, one [`SummaryRow`] per line.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<SummaryRow> = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<_, _>>()?;
        if rows.is_empty() {
            return Err(Error::Report("empty summary".into()));
        }
        let mut methods = Vec::new();
        let mut shifts = Vec::new();
        for r in &rows {
            if !METRICS.contains(&r.metric.as_str()) {
                return Err(Error::Report(format!("unknown metric `{}`", r.metric)));
            }
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
            if !shifts.contains(&r.shift) {
                shifts.push(r.shift.clone());
            }
        }
        methods.sort_by_key(|m| method_rank(m));
        shifts.sort_by_key(|s| shift_rank(s));
        Ok(Self { methods, shifts, rows })
    }
}
