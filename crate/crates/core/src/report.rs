//! Versioned run manifests, experiment reports, verdicts and an SVG line
//! chart of similarity curves.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{RandomizationOrder, SimilarityTable};
use crate::metrics::MetricId;
use crate::saliency::Method;

pub const REPORT_FORMAT: &str = "saliency-sanity-report";
pub const SCHEMA_VERSION: u32 = 1;

/// Everything needed to repeat a run: the command with its fully resolved
/// arguments, the master seed and the artifacts it wrote (relative to the
/// output directory). Contains no timestamps or host details so reruns
/// serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// The parsed command, replayable with `saliency-sanity rerun`.
    pub invocation: serde_json::Value,
    /// Resolved configuration blocks (training, harness, method and metric
    /// parameters) as used.
    pub config: serde_json::Value,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, invocation: serde_json::Value) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            invocation,
            config: serde_json::Value::Object(Default::default()),
            artifacts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Pass,
    Fail,
    Inconclusive,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// A method passes (is sensitive to the model) when similarity falls
    /// below this.
    pub pass_below: f64,
    /// A method fails when similarity stays above this.
    pub fail_above: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            pass_below: 0.3,
            fail_above: 0.6,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.pass_below <= self.fail_above) {
            return Err(Error::Config(format!(
                "pass threshold {} exceeds fail threshold {}",
                self.pass_below, self.fail_above
            )));
        }
        Ok(())
    }

    pub fn judge(&self, value: f64) -> Outcome {
        if value < self.pass_below {
            Outcome::Pass
        } else if value > self.fail_above {
            Outcome::Fail
        } else {
            Outcome::Inconclusive
        }
    }
}

/// A verdict and the table row it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub method: Method,
    pub metric: MetricId,
    pub stage: String,
    pub value: f64,
    pub n: usize,
    pub thresholds: Thresholds,
    pub outcome: Outcome,
}

/// One verdict per method from its SpearmanAbs row: the last stage for
/// cumulative orders and data randomization, the least similar stage for
/// independent randomization.
pub fn verdicts(table: &SimilarityTable, order: Option<RandomizationOrder>, thresholds: Thresholds) -> Vec<Verdict> {
    let metric = MetricId::SpearmanAbs;
    let mut methods: Vec<Method> = Vec::new();
    for r in &table.records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .filter_map(|method| {
            let rows = table
                .records
                .iter()
                .filter(|r| r.method == method && r.metric == metric && r.stage_index > 0 && r.n > 0);
            let row = if order == Some(RandomizationOrder::Independent) {
                rows.min_by(|a, b| a.mean.total_cmp(&b.mean))
            } else {
                rows.max_by_key(|r| r.stage_index)
            }?;
            Some(Verdict {
                method,
                metric,
                stage: row.stage.clone(),
                value: row.mean,
                n: row.n,
                thresholds,
                outcome: thresholds.judge(row.mean),
            })
        })
        .collect()
}

/// `method  stage  value  outcome` lines.
pub fn verdict_table(verdicts: &[Verdict]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:<14} {:>10} {:>4}  verdict", "method", "stage", "spearman", "n");
    for v in verdicts {
        let _ = writeln!(
            out,
            "{:<28} {:<14} {:>10.4} {:>4}  {} (pass < {}, fail > {})",
            v.method.to_string(),
            v.stage,
            v.value,
            v.n,
            v.outcome,
            v.thresholds.pass_below,
            v.thresholds.fail_above
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub schema_version: u32,
    pub manifest: RunManifest,
    /// Result tables, keyed by kind (`similarity`, `calibration`, ...).
    pub results: serde_json::Value,
    pub verdicts: Vec<Verdict>,
}

impl ExperimentReport {
    pub fn new(manifest: RunManifest, results: serde_json::Value, verdicts: Vec<Verdict>) -> Self {
        ExperimentReport {
            format: REPORT_FORMAT.to_string(),
            schema_version: SCHEMA_VERSION,
            manifest,
            results,
            verdicts,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and checks the format tag and schema version.
    pub fn from_json(text: &str) -> Result<Self> {
        let report: ExperimentReport = serde_json::from_str(text)?;
        if report.format != REPORT_FORMAT {
            return Err(Error::Config(format!("not a report: format `{}`", report.format)));
        }
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema {} is not supported (expected {SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Mean similarity per stage for each method under one metric, as an SVG
/// line chart with a shared `[-1, 1]` axis.
pub fn similarity_svg(table: &SimilarityTable, metric: MetricId) -> String {
    let stages = table.stages();
    let (w, h, left, top, plot_w, plot_h) = (640.0, 360.0, 60.0, 30.0, 420.0, 260.0);
    let x = |i: usize| left + plot_w * if stages.len() > 1 { i as f64 / (stages.len() - 1) as f64 } else { 0.5 };
    let y = |v: f64| top + plot_h * (1.0 - (v + 1.0) / 2.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="18">{} / {}</text>"#, table.test, metric);
    for tick in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"##,
            left + plot_w,
            y(tick),
            y(tick),
            left - 6.0,
            y(tick) + 4.0
        );
    }
    for (i, stage) in stages.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" transform="rotate(-40 {:.1} {:.1})">{stage}</text>"#,
            x(i),
            top + plot_h + 14.0,
            x(i),
            top + plot_h + 14.0
        );
    }
    let mut methods: Vec<Method> = Vec::new();
    for r in &table.records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    for (k, method) in methods.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = stages
            .iter()
            .enumerate()
            .filter_map(|(i, st)| table.record(*method, st, metric).filter(|r| r.n > 0).map(|r| format!("{:.1},{:.1}", x(i), y(r.mean))))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        let ly = top + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{method}</text>"#,
            left + plot_w + 16.0,
            ly,
            left + plot_w + 30.0,
            ly + 9.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds_judge() {
        let t = Thresholds::default();
        assert_eq!(t.judge(0.1), Outcome::Pass);
        assert_eq!(t.judge(0.45), Outcome::Inconclusive);
        assert_eq!(t.judge(0.9), Outcome::Fail);
        assert!(Thresholds {
            pass_below: 0.7,
            fail_above: 0.2
        }
        .validate()
        .is_err());
    }

    #[test]
    fn report_round_trip_and_validation() {
        let m = RunManifest::new("analyze linear", 3, serde_json::json!({"which": "linear"}));
        let r = ExperimentReport::new(m, serde_json::json!({"x": 1}), vec![]);
        let text = r.to_json().unwrap();
        assert_eq!(ExperimentReport::from_json(&text).unwrap(), r);
        let bad = text.replace(REPORT_FORMAT, "other");
        assert!(ExperimentReport::from_json(&bad).is_err());
        let newer = text.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(ExperimentReport::from_json(&newer).is_err());
    }
}
