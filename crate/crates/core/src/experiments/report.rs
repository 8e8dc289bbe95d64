//! Evaluation report and its CSV rendering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::prefcore::argmax;

use super::config::Method;

/// One trained policy.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    /// Run group, e.g. the behavior policy (`mu0`) or an α value.
    pub label: String,
    pub seed: u64,
    /// ρ-weighted generative probabilities of the final policy.
    pub probs: Vec<f64>,
    pub argmax: usize,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaRow {
    pub alpha: f64,
    /// Sampled SRPO loss `L̂` of the final policy on the whole dataset.
    pub loss_srpo: f64,
    /// Sampled improvement loss `L̂†` of the final policy on the whole dataset.
    pub loss_improvement: f64,
    /// Coupled revision metric `m(1)`.
    pub revision_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub num_actions: usize,
    pub runs: Vec<RunRecord>,
    /// `m(k)` for `k = 1..N`, averaged over seeds.
    pub revision_curve: Vec<f64>,
    pub alpha_rows: Vec<AlphaRow>,
}

impl EvalReport {
    pub fn new(num_actions: usize) -> Self {
        EvalReport {
            num_actions,
            ..EvalReport::default()
        }
    }

    /// Distinct `(method, label)` pairs in first-seen order.
    pub fn groups(&self) -> Vec<(Method, String)> {
        let mut out: Vec<(Method, String)> = Vec::new();
        for r in &self.runs {
            if !out.iter().any(|(m, l)| *m == r.method && *l == r.label) {
                out.push((r.method, r.label.clone()));
            }
        }
        out
    }

    fn labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.label.as_str()) {
                out.push(&r.label);
            }
        }
        out
    }

    fn group_runs<'a>(&'a self, method: Method, label: &'a str) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.runs.iter().filter(move |r| r.method == method && r.label == label)
    }

    /// Seed-averaged probabilities of one group.
    pub fn mean_probs(&self, method: Method, label: &str) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.num_actions];
        let mut count = 0usize;
        for r in self.group_runs(method, label) {
            for (s, p) in sum.iter_mut().zip(&r.probs) {
                *s += p;
            }
            count += 1;
        }
        (count > 0).then(|| sum.into_iter().map(|s| s / count as f64).collect())
    }

    /// Per-seed argmax actions of one group.
    pub fn argmaxes(&self, method: Method, label: &str) -> Vec<(u64, usize)> {
        self.group_runs(method, label).map(|r| (r.seed, r.argmax)).collect()
    }

    /// Seed-averaged loss trace of one group.
    pub fn mean_loss_trace(&self, method: Method, label: &str) -> Vec<f64> {
        let runs: Vec<&RunRecord> = self.group_runs(method, label).collect();
        let len = runs.iter().map(|r| r.loss_trace.len()).min().unwrap_or(0);
        (0..len)
            .map(|i| runs.iter().map(|r| r.loss_trace[i]).sum::<f64>() / runs.len() as f64)
            .collect()
    }

    /// Human-readable summary for the terminal.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (method, label) in self.groups() {
            let probs = self.mean_probs(method, &label).unwrap_or_default();
            let seeds: Vec<String> = self
                .argmaxes(method, &label)
                .iter()
                .map(|(s, a)| format!("seed {s}: y{a}"))
                .collect();
            let _ = writeln!(
                out,
                "{:<5} {:<12} mean probs [{}] argmax y{} ({})",
                method.name(),
                label,
                probs.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(", "),
                argmax(&probs),
                seeds.join(", ")
            );
        }
        if !self.revision_curve.is_empty() {
            let _ = writeln!(
                out,
                "revision curve m(k): [{}]",
                self.revision_curve.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
            );
        }
        for row in &self.alpha_rows {
            let _ = writeln!(
                out,
                "alpha {:<5} L_srpo {:.6} L_improvement {:.6} m(1) {:.6}",
                row.alpha, row.loss_srpo, row.loss_improvement, row.revision_gain
            );
        }
        out
    }
}

fn write_csv(dir: &Path, name: &str, body: String, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    write_atomic(&path, body.as_bytes())?;
    written.push(path);
    Ok(())
}

/// Writes the report as CSV files into `out_dir` (created if missing) and
/// returns the paths written:
///
/// - `probs_<method>_<label>.csv`: `action,probability`, seed-averaged;
/// - `loss_trace_<method>.csv` (`loss_trace_<method>_<label>.csv` when the
///   report has several labels): `step,loss`, seed-averaged;
/// - `revision_curve.csv`: `k,expected_preference`;
/// - `seeds.csv`: one row per run with its argmax and probabilities;
/// - `alpha_sweep.csv`: `alpha,loss_srpo,loss_improvement,revision_gain`.
///
/// Numbers use the shortest representation that round-trips.
pub fn emit_csv(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let several_labels = report.labels().len() > 1;

    for (method, label) in report.groups() {
        let probs = report.mean_probs(method, &label).expect("group has runs");
        let mut body = String::from("action,probability\n");
        for (a, p) in probs.iter().enumerate() {
            let _ = writeln!(body, "{a},{p}");
        }
        write_csv(out_dir, &format!("probs_{}_{label}.csv", method.name()), body, &mut written)?;

        let mut body = String::from("step,loss\n");
        for (step, loss) in report.mean_loss_trace(method, &label).iter().enumerate() {
            let _ = writeln!(body, "{step},{loss}");
        }
        let name = if several_labels {
            format!("loss_trace_{}_{label}.csv", method.name())
        } else {
            format!("loss_trace_{}.csv", method.name())
        };
        write_csv(out_dir, &name, body, &mut written)?;
    }

    let mut body = String::from("k,expected_preference\n");
    for (k, m) in report.revision_curve.iter().enumerate() {
        let _ = writeln!(body, "{},{m}", k + 1);
    }
    write_csv(out_dir, "revision_curve.csv", body, &mut written)?;

    let mut body = String::from("method,label,seed,argmax");
    for a in 0..report.num_actions {
        let _ = write!(body, ",p{a}");
    }
    body.push('\n');
    for r in &report.runs {
        let _ = write!(body, "{},{},{},{}", r.method.name(), r.label, r.seed, r.argmax);
        for p in &r.probs {
            let _ = write!(body, ",{p}");
        }
        body.push('\n');
    }
    write_csv(out_dir, "seeds.csv", body, &mut written)?;

    let mut body = String::from("alpha,loss_srpo,loss_improvement,revision_gain\n");
    for row in &report.alpha_rows {
        let _ = writeln!(
            body,
            "{},{},{},{}",
            row.alpha, row.loss_srpo, row.loss_improvement, row.revision_gain
        );
    }
    write_csv(out_dir, "alpha_sweep.csv", body, &mut written)?;
    Ok(written)
}
