//! Run ledger (per-target tokens, attempts, status and wall time), cost
//! accounting and instrumentation overhead measurement.
//!
//! Wall times are inherently non-reproducible, so they live in a
//! `timings.json` sidecar next to `ledger.json`; the ledger file itself is
//! byte-identical across runs with the same inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::Pricing;
use crate::error::{read_to_string, write, Error, Result};
use crate::fsutil;
use crate::instrument::{instrument, InstrumentationPlan};
use crate::llm::Usage;
use crate::pipeline::{CheckerArtifact, Status};
use crate::runner::TestInvocation;
use crate::signature::Signature;
use crate::subject::SubjectProject;

pub const LEDGER_FILE: &str = "ledger.json";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub target: String,
    pub checker_id: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub llm_calls: u64,
    pub attempts: u32,
    pub final_status: Status,
    /// Kept in the timings sidecar.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl LedgerRow {
    pub fn new(artifact: &CheckerArtifact, usage: Usage, wall_time: Duration) -> Self {
        LedgerRow {
            target: artifact.target.clone(),
            checker_id: artifact.id.clone(),
            input_tokens: usage.input_tokens,
            output_tokens: usage.output_tokens,
            llm_calls: usage.calls,
            attempts: artifact.attempts,
            final_status: artifact.status,
            wall_time_s: wall_time.as_secs_f64(),
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    /// One row per target test, sorted by target.
    pub rows: Vec<LedgerRow>,
}

/// Aggregates, always recomputed from the rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub targets: usize,
    pub by_status: BTreeMap<String, usize>,
    pub total_input_tokens: u64,
    pub total_output_tokens: u64,
    pub total_tokens: u64,
    pub total_wall_time_s: f64,
    pub median_wall_time_s: Option<f64>,
    pub median_tokens: Option<f64>,
    pub median_attempts: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_cost: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn cost(pricing: &Pricing, input_tokens: u64, output_tokens: u64) -> f64 {
    (input_tokens as f64 * pricing.input_per_mtok + output_tokens as f64 * pricing.output_per_mtok) / 1e6
}

impl RunLedger {
    /// Inserts or replaces the row for `row.target`.
    pub fn record(&mut self, row: LedgerRow) {
        self.rows.retain(|r| r.target != row.target);
        self.rows.push(row);
        self.rows.sort_by(|a, b| a.target.cmp(&b.target));
    }

    pub fn summary(&self, pricing: Option<&Pricing>) -> LedgerSummary {
        let mut s = LedgerSummary {
            targets: self.rows.len(),
            ..LedgerSummary::default()
        };
        for r in &self.rows {
            let status = serde_json::to_value(r.final_status)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            *s.by_status.entry(status).or_default() += 1;
            s.total_input_tokens += r.input_tokens;
            s.total_output_tokens += r.output_tokens;
            s.total_wall_time_s += r.wall_time_s;
        }
        s.total_tokens = s.total_input_tokens + s.total_output_tokens;
        let col = |f: fn(&LedgerRow) -> f64| self.rows.iter().map(f).collect::<Vec<f64>>();
        s.median_wall_time_s = median(&col(|r| r.wall_time_s));
        s.median_tokens = median(&col(|r| r.total_tokens() as f64));
        s.median_attempts = median(&col(|r| f64::from(r.attempts)));
        s.total_cost = pricing.map(|p| cost(p, s.total_input_tokens, s.total_output_tokens));
        s
    }

    /// Reads `ledger.json` and the timings sidecar; a missing ledger is empty.
    pub fn load(workdir: &Path) -> Result<Self> {
        let path = workdir.join(LEDGER_FILE);
        if !path.is_file() {
            return Ok(RunLedger::default());
        }
        let mut ledger: RunLedger = serde_json::from_str(&read_to_string(&path)?)?;
        let timings_path = workdir.join(TIMINGS_FILE);
        if timings_path.is_file() {
            let timings: BTreeMap<String, f64> = serde_json::from_str(&read_to_string(&timings_path)?)?;
            for r in &mut ledger.rows {
                r.wall_time_s = timings.get(&r.target).copied().unwrap_or(0.0);
            }
        }
        Ok(ledger)
    }

    pub fn save(&self, workdir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write(&workdir.join(LEDGER_FILE), format!("{text}\n"))?;
        let timings: BTreeMap<&str, f64> = self.rows.iter().map(|r| (r.target.as_str(), r.wall_time_s)).collect();
        let text = serde_json::to_string_pretty(&timings)?;
        write(&workdir.join(TIMINGS_FILE), format!("{text}\n"))
    }

    /// Plain-text table plus aggregates.
    pub fn render(&self, pricing: Option<&Pricing>) -> String {
        let s = self.summary(pricing);
        let mut out = String::new();
        let width = self.rows.iter().map(|r| r.target.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(
            out,
            "{:<width$}  {:>16}  {:>8}  {:>10}  {:>10}  {:>9}",
            "target", "status", "attempts", "in_tok", "out_tok", "wall_s"
        );
        for r in &self.rows {
            let status = serde_json::to_value(r.final_status).map(|v| v.as_str().unwrap_or("").to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{:<width$}  {:>16}  {:>8}  {:>10}  {:>10}  {:>9.2}",
                r.target, status, r.attempts, r.input_tokens, r.output_tokens, r.wall_time_s
            );
        }
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        let _ = writeln!(out, "\ntargets: {}", s.targets);
        for (status, n) in &s.by_status {
            let _ = writeln!(out, "  {status}: {n}");
        }
        let _ = writeln!(
            out,
            "tokens: {} in + {} out = {}",
            s.total_input_tokens, s.total_output_tokens, s.total_tokens
        );
        let _ = writeln!(
            out,
            "wall time: {:.2}s total, median {}s per target",
            s.total_wall_time_s,
            opt(s.median_wall_time_s)
        );
        let _ = writeln!(
            out,
            "median tokens per target: {}, median attempts: {}",
            opt(s.median_tokens),
            opt(s.median_attempts)
        );
        if let Some(c) = s.total_cost {
            let _ = writeln!(out, "cost: {c:.4}");
        }
        out
    }
}

/// Source of the bundled no-op checker used as an overhead baseline.
pub const NOOP_CHECKER_SOURCE: &str = "def noop_checker(op, shadowState):\n    assertTrue(True)\n";

/// A validated checker that asserts nothing meaningful, attached to `targets`.
pub fn noop_checker(targets: BTreeSet<Signature>) -> CheckerArtifact {
    CheckerArtifact {
        id: "ck_noop".into(),
        target: "<noop>".into(),
        checker_source: NOOP_CHECKER_SOURCE.into(),
        handled_signatures: targets,
        status: Status::CrossValidated,
        attempts: 0,
        transcript_ref: PathBuf::new(),
        failure_history: Vec::new(),
        state_changing: BTreeSet::new(),
        imports: Vec::new(),
        note: None,
    }
}

/// Plain vs instrumented timings of the target test files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRecord {
    pub repeat: u32,
    pub test_files: Vec<String>,
    pub checkers: Vec<String>,
    pub baseline_runs_s: Vec<f64>,
    pub checked_runs_s: Vec<f64>,
    pub baseline_mean_s: f64,
    pub checked_mean_s: f64,
    /// checked / baseline − 1
    pub relative_overhead: f64,
    /// Coefficient of variation of the baseline runs.
    pub baseline_variation: f64,
    pub noise_bound: f64,
    pub within_noise_bound: bool,
    pub caveat: String,
}

pub const OVERHEAD_CAVEAT: &str = "Timings cover whole test-file runs including interpreter start-up and \
test collection; since the instrumented methods are only a fraction of each run, and checks would \
typically be enabled selectively, the relative overhead is an upper bound for the checkers themselves.";

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs the files containing `target_tests` `repeat` times on a plain copy
/// and on a copy instrumented with `checkers`, alternating the two.
pub fn measure_overhead(
    project: &SubjectProject,
    checkers: &[CheckerArtifact],
    target_tests: &[String],
    repeat: u32,
    noise_bound: f64,
    scratch: &Path,
) -> Result<OverheadRecord> {
    if repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    let files: Vec<String> = target_tests
        .iter()
        .map(|t| t.split("::").next().unwrap_or(t).to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if files.is_empty() {
        return Err(Error::Config("no target tests to time".into()));
    }
    std::fs::create_dir_all(scratch).map_err(|e| Error::io(scratch, e))?;
    let work = tempfile::Builder::new()
        .prefix("overhead-")
        .tempdir_in(scratch)
        .map_err(|e| Error::io(scratch, e))?;
    let plain = work.path().join("plain");
    let checked = work.path().join("checked");
    fsutil::copy_tree(&project.root, &plain, &[])?;
    instrument(project, &InstrumentationPlan::new(checkers.to_vec(), &checked))?;

    let timeout = Duration::from_secs(project.config.timeout_seconds);
    let time = |tree: &Path, label: &str| -> Result<f64> {
        let start = Instant::now();
        let run = TestInvocation::new(tree, &project.config, &files).timeout(timeout).run()?;
        let elapsed = start.elapsed().as_secs_f64();
        if !run.passed() {
            return Err(Error::Runner(format!("{label} run failed:\n{}", run.log())));
        }
        Ok(elapsed)
    };
    // warm-up so the first timed run does not pay for cold caches
    time(&plain, "baseline")?;
    time(&checked, "instrumented")?;
    let mut baseline = Vec::new();
    let mut with_checkers = Vec::new();
    for _ in 0..repeat {
        baseline.push(time(&plain, "baseline")?);
        with_checkers.push(time(&checked, "instrumented")?);
    }
    let b = mean(&baseline);
    let c = mean(&with_checkers);
    let sd = (baseline.iter().map(|x| (x - b).powi(2)).sum::<f64>() / baseline.len() as f64).sqrt();
    let relative = if b > 0.0 { c / b - 1.0 } else { 0.0 };
    info!(baseline = b, checked = c, relative, "overhead measured");
    Ok(OverheadRecord {
        repeat,
        test_files: files,
        checkers: checkers.iter().map(|c| c.id.clone()).collect(),
        baseline_runs_s: baseline,
        checked_runs_s: with_checkers,
        baseline_mean_s: b,
        checked_mean_s: c,
        relative_overhead: relative,
        baseline_variation: if b > 0.0 { sd / b } else { 0.0 },
        noise_bound,
        within_noise_bound: relative <= noise_bound,
        caveat: OVERHEAD_CAVEAT.into(),
    })
}
