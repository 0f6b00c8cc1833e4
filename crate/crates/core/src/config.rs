//! Configuration files: the per-project `ProjectConfig` and the combined
//! `flycatcher.json` (project + provider + budgets + caps).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::ProviderConfig;

pub const DEFAULT_TIMEOUT_SECONDS: u64 = 180;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 125;
pub const DEFAULT_SAME_KIND_CUTOFF: u32 = 5;
pub const DEFAULT_CONTEXT_TOKENS: usize = 30_000;
pub const DEFAULT_EXTRA_VALIDATION: usize = 20;
pub const DEFAULT_VALIDATION_CAP_S: f64 = 1800.0;

/// Pseudo assertion name that makes bare `assert` statements count as
/// assertions.
pub const ASSERT_STATEMENT: &str = "assert";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub source_dirs: Vec<PathBuf>,
    pub test_dirs: Vec<PathBuf>,
    /// Whitespace-separated command template; `{TESTS}` expands to the test ids.
    pub test_runner: String,
    #[serde(default = "default_assertion_names")]
    pub assertion_names: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: u64,
    /// Regexes over runner output; capture group 1 is a failing test id.
    #[serde(default = "default_failure_patterns")]
    pub failure_patterns: Vec<String>,
    /// Exit codes that mean "some test failed" rather than an infrastructure error.
    #[serde(default = "default_failure_exit_codes")]
    pub failure_exit_codes: Vec<i32>,
}

fn default_assertion_names() -> Vec<String> {
    ["assert", "assertEqual", "assertEquals", "assertTrue", "assertNotNull"]
        .into_iter()
        .map(String::from)
        .collect()
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECONDS
}

fn default_failure_patterns() -> Vec<String> {
    vec![r"(?m)^FAILED (\S+)".into(), r"(?m)^ERROR (\S+)".into()]
}

fn default_failure_exit_codes() -> Vec<i32> {
    vec![1]
}

impl ProjectConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ProjectConfig = serde_json::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.source_dirs.is_empty() {
            return Err(Error::Config("source_dirs is empty".into()));
        }
        if !self.test_runner.contains("{TESTS}") {
            return Err(Error::Config("test_runner lacks the {TESTS} placeholder".into()));
        }
        for p in &self.failure_patterns {
            regex::Regex::new(p).map_err(|e| Error::Config(format!("bad failure pattern: {e}")))?;
        }
        Ok(())
    }

    pub fn counts_assert_statements(&self) -> bool {
        self.assertion_names.iter().any(|n| n == ASSERT_STATEMENT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OnViolation {
    #[default]
    Raise,
    Log,
}

impl OnViolation {
    pub fn as_str(self) -> &'static str {
        match self {
            OnViolation::Raise => "raise",
            OnViolation::Log => "log",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    #[serde(default = "d_k")]
    pub max_attempts: u32,
    #[serde(default = "d_cutoff")]
    pub same_kind_cutoff: u32,
    #[serde(default = "d_ctx")]
    pub context_tokens: usize,
    #[serde(default = "d_extra")]
    pub extra_validation: usize,
}

fn d_k() -> u32 {
    DEFAULT_MAX_ATTEMPTS
}
fn d_cutoff() -> u32 {
    DEFAULT_SAME_KIND_CUTOFF
}
fn d_ctx() -> usize {
    DEFAULT_CONTEXT_TOKENS
}
fn d_extra() -> usize {
    DEFAULT_EXTRA_VALIDATION
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            max_attempts: d_k(),
            same_kind_cutoff: d_cutoff(),
            context_tokens: d_ctx(),
            extra_validation: d_extra(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caps {
    /// Wall-time cap for one dynamic validation batch.
    #[serde(default = "d_cap")]
    pub validation_timeout_s: f64,
    /// Relative-overhead noise bound reported by `overhead`.
    #[serde(default = "d_eps")]
    pub overhead_noise_bound: f64,
}

fn d_cap() -> f64 {
    DEFAULT_VALIDATION_CAP_S
}
fn d_eps() -> f64 {
    0.25
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            validation_timeout_s: d_cap(),
            overhead_noise_bound: d_eps(),
        }
    }
}

/// USD per million tokens; only used for reporting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub input_per_mtok: f64,
    pub output_per_mtok: f64,
}

/// The combined `flycatcher.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolConfig {
    pub project: ProjectConfig,
    #[serde(default)]
    pub provider: Option<ProviderConfig>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub caps: Caps,
    #[serde(default)]
    pub on_violation: OnViolation,
    #[serde(default)]
    pub pricing: Option<Pricing>,
    /// Output directory for artifacts, relative to the config file.
    #[serde(default = "d_workdir")]
    pub workdir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn d_workdir() -> PathBuf {
    PathBuf::from(".flycatcher")
}

impl ToolConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::read_to_string(path)?;
        let cfg: ToolConfig = serde_json::from_str(&text)?;
        cfg.project.check()?;
        if let Some(p) = &cfg.provider {
            p.check()?;
        }
        if cfg.budgets.max_attempts == 0 || cfg.budgets.same_kind_cutoff == 0 {
            return Err(Error::Config("max_attempts and same_kind_cutoff must be >= 1".into()));
        }
        Ok(cfg)
    }
}
