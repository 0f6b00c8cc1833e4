//! `flycatcher`: generate, validate and evaluate runtime checkers for a
//! Python project described by a `flycatcher.json`.
//!
//! Exit codes: 0 success, 1 domain failure (a checker was rejected or
//! failed validation), 2 usage or infrastructure error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tracing::{info, warn};

use flycatcher_core::config::{OnViolation, ToolConfig};
use flycatcher_core::corpus::{filter_candidate_tests, CorpusSplit, Funnel};
use flycatcher_core::instrument::{instrument, InstrumentationPlan};
use flycatcher_core::ledger::{measure_overhead, noop_checker, LedgerRow, RunLedger};
use flycatcher_core::llm::{build_provider, ChatProvider, ProviderConfig, ProviderKind};
use flycatcher_core::mutation::{evaluate_mutants, generate_mutants, EvaluationSetup, MutantRecord, MutationReport};
use flycatcher_core::pipeline::{
    artifact_dir, checker_id, load_all_artifacts, load_artifact, refine_loop, save_artifact, CheckerArtifact,
    RefineRequest, Status,
};
use flycatcher_core::subject::{SubjectProject, TestCase};
use flycatcher_core::validate::{cross_validate, dynamic_validate, DynamicValidator};

#[derive(Parser)]
#[command(name = "flycatcher", version, about = "Generalize unit tests into runtime checkers")]
struct Cli {
    /// Tool configuration; the project root is its directory.
    #[arg(long, global = true, default_value = "flycatcher.json")]
    config: PathBuf,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter candidate target tests and print the funnel.
    Analyze,
    /// Generate checkers for target tests.
    Gen {
        /// Target test id (repeatable); defaults to every candidate.
        #[arg(long = "test")]
        tests: Vec<String>,
        /// `config`, `scripted:<path>` or `http:<model>`.
        #[arg(long, default_value = "config")]
        provider: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel targets (http providers only).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-run dynamic validation of one checker.
    Validate {
        #[arg(long)]
        checker: String,
    },
    /// Run the whole suite with every validated checker.
    CrossValidate,
    /// Write an instrumented copy of the project.
    Instrument {
        /// Checker ids, comma-separated; defaults to all validated checkers.
        #[arg(long, value_delimiter = ',')]
        checkers: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        on_violation: Option<ViolationMode>,
    },
    /// Generate mutants for the given classes.
    Mutate {
        /// Class names, comma-separated (simple or module-qualified).
        #[arg(long, value_delimiter = ',', required = true)]
        scope: Vec<String>,
    },
    /// Evaluate the generated mutants against target tests and checkers.
    EvaluateMutants {
        #[arg(long, value_delimiter = ',')]
        checkers: Vec<String>,
    },
    /// Time target test files with and without instrumentation.
    Overhead {
        #[arg(long, default_value_t = 5)]
        repeat: u32,
        #[arg(long, value_delimiter = ',')]
        checkers: Vec<String>,
        /// Replace the checkers by the bundled no-op checker on the same methods.
        #[arg(long)]
        noop: bool,
    },
    /// Print the ledger and the latest evaluation results.
    Report,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ViolationMode {
    Raise,
    Log,
}

/// A failure of the thing being evaluated rather than of the tool.
#[derive(Debug)]
struct DomainFailure(String);

impl std::fmt::Display for DomainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DomainFailure {}

struct Session {
    config: ToolConfig,
    root: PathBuf,
    workdir: PathBuf,
    project: SubjectProject,
}

impl Session {
    fn open(config_path: &Path) -> Result<Self> {
        let config = ToolConfig::load(config_path)
            .with_context(|| format!("loading {}", config_path.display()))?;
        let dir = config_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let root = std::fs::canonicalize(dir).with_context(|| format!("resolving {}", dir.display()))?;
        let project = SubjectProject::scan(&root, config.project.clone())?;
        for w in &project.warnings {
            warn!("{w}");
        }
        let workdir = root.join(&config.workdir);
        Ok(Session {
            config,
            root,
            workdir,
            project,
        })
    }

    fn scratch(&self) -> PathBuf {
        self.workdir.join("scratch")
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
        let path = self.workdir.join(name);
        std::fs::create_dir_all(&self.workdir)?;
        std::fs::write(&path, format!("{}\n", serde_json::to_string_pretty(value)?))
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn read_json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<Option<T>> {
        let path = self.workdir.join(name);
        if !path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
    }

    /// Candidate tests from the last `analyze`, running it when missing.
    fn candidates(&self) -> Result<Vec<TestCase>> {
        let all = self.project.test_cases()?;
        match self.read_json::<Vec<String>>("candidates.json")? {
            Some(ids) => {
                let ids: BTreeSet<String> = ids.into_iter().collect();
                Ok(all.into_iter().filter(|t| ids.contains(&t.id)).collect())
            }
            None => Ok(self.analyze()?.0),
        }
    }

    fn analyze(&self) -> Result<(Vec<TestCase>, Funnel)> {
        let (candidates, funnel) = filter_candidate_tests(&self.project)?;
        let ids: Vec<&str> = candidates.iter().map(|t| t.id.as_str()).collect();
        self.write_json("candidates.json", &ids)?;
        self.write_json("funnel.json", &funnel)?;
        Ok((candidates, funnel))
    }

    fn provider_config(&self, spec: &str) -> Result<ProviderConfig> {
        let cfg = if spec == "config" {
            let mut p = self
                .config
                .provider
                .clone()
                .context("no provider in the configuration; pass --provider")?;
            if let Some(path) = &p.script_path {
                p.script_path = Some(self.root.join(path));
            }
            p
        } else if let Some(path) = spec.strip_prefix("scripted:") {
            ProviderConfig::scripted(std::path::absolute(path)?)
        } else if let Some(model) = spec.strip_prefix("http:") {
            let endpoint = self.config.provider.as_ref().and_then(|p| p.endpoint.clone());
            ProviderConfig::http(model, endpoint)
        } else {
            bail!("unknown provider `{spec}`; expected config, scripted:<path> or http:<model>");
        };
        cfg.check()?;
        Ok(cfg)
    }

    /// Named checkers, or every validated / cross-validated one.
    fn checkers(&self, ids: &[String]) -> Result<Vec<CheckerArtifact>> {
        if ids.is_empty() {
            Ok(load_all_artifacts(&self.workdir)?
                .into_iter()
                .filter(|a| matches!(a.status, Status::Validated | Status::CrossValidated))
                .collect())
        } else {
            ids.iter()
                .map(|id| load_artifact(&self.workdir, id).with_context(|| format!("loading checker {id}")))
                .collect()
        }
    }

    fn split_for(&self, candidates: &[TestCase], target: &TestCase, seed: u64) -> CorpusSplit {
        let b = &self.config.budgets;
        CorpusSplit::build(candidates, target, b.context_tokens, b.extra_validation, seed)
    }

    /// Runs the refinement loop for one target and persists its artifacts.
    fn generate_one(
        &self,
        target: &TestCase,
        candidates: &[TestCase],
        seed: u64,
        provider: &mut dyn ChatProvider,
    ) -> Result<(CheckerArtifact, LedgerRow)> {
        let start = Instant::now();
        let id = checker_id(target);
        let dir = artifact_dir(&self.workdir, &id);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        std::fs::create_dir_all(&dir)?;
        let split = self.split_for(candidates, target, seed);
        std::fs::write(dir.join("split.json"), format!("{}\n", serde_json::to_string_pretty(&split)?))?;
        let context: Vec<TestCase> = candidates
            .iter()
            .filter(|t| split.context.contains(&t.id))
            .cloned()
            .collect();
        let mut dynamic = DynamicValidator::new(
            &self.project,
            split.validation_run(),
            self.config.caps.validation_timeout_s,
            self.scratch(),
        );
        let req = RefineRequest {
            project: &self.project,
            target,
            context: &context,
            budgets: &self.config.budgets,
            transcript: Some(dir.join("transcript.jsonl")),
        };
        let result = refine_loop(&req, provider, &mut dynamic)?;
        for w in &result.warnings {
            warn!(checker = %id, "{w}");
        }
        save_artifact(&self.workdir, &result.artifact)?;
        let row = LedgerRow::new(&result.artifact, result.usage, start.elapsed());
        Ok((result.artifact, row))
    }
}

fn cmd_gen(s: &Session, tests: &[String], provider: &str, seed: Option<u64>, jobs: usize) -> Result<()> {
    let candidates = s.candidates()?;
    let all = s.project.test_cases()?;
    let targets: Vec<TestCase> = if tests.is_empty() {
        candidates.clone()
    } else {
        tests
            .iter()
            .map(|id| {
                let t = all.iter().find(|t| &t.id == id).with_context(|| format!("no test `{id}`"))?;
                if !candidates.iter().any(|c| c.id == t.id) {
                    warn!("{id} is not a candidate test (see `analyze`)");
                }
                Ok(t.clone())
            })
            .collect::<Result<_>>()?
    };
    let seed = seed.unwrap_or(s.config.seed);
    let pcfg = s.provider_config(provider)?;
    let jobs = jobs.max(1);
    let results: Vec<Result<(CheckerArtifact, LedgerRow)>> = if jobs > 1 && pcfg.kind == ProviderKind::Http {
        let chunk = targets.len().div_ceil(jobs).max(1);
        std::thread::scope(|scope| {
            let handles: Vec<_> = targets
                .chunks(chunk)
                .map(|part| {
                    let pcfg = &pcfg;
                    let candidates = &candidates;
                    scope.spawn(move || {
                        let mut p = build_provider(pcfg)?;
                        part.iter()
                            .map(|t| s.generate_one(t, candidates, seed, p.as_mut()))
                            .collect::<Vec<_>>()
                            .into_iter()
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| match h.join().expect("worker panicked") {
                    Ok(v) => v.into_iter().map(Ok).collect(),
                    Err(e) => vec![Err(e)],
                })
                .collect()
        })
    } else {
        if jobs > 1 {
            warn!("--jobs ignored: scripted replies are consumed in target order");
        }
        // one provider for all targets so scripted replies are consumed in order
        let mut p = build_provider(&pcfg)?;
        targets
            .iter()
            .map(|t| s.generate_one(t, &candidates, seed, p.as_mut()))
            .collect()
    };
    let mut ledger = RunLedger::load(&s.workdir)?;
    let mut rejected = Vec::new();
    for r in results {
        let (artifact, row) = r?;
        println!(
            "{}  {}  attempts={}  {}",
            artifact.id,
            serde_json::to_value(artifact.status)?.as_str().unwrap_or(""),
            artifact.attempts,
            artifact_dir(&s.workdir, &artifact.id).display()
        );
        if artifact.status == Status::Rejected {
            rejected.push(format!("{} ({})", artifact.id, artifact.note.as_deref().unwrap_or("rejected")));
        }
        ledger.record(row);
    }
    ledger.save(&s.workdir)?;
    if !rejected.is_empty() {
        return Err(DomainFailure(format!("rejected: {}", rejected.join(", "))).into());
    }
    Ok(())
}

fn cmd_validate(s: &Session, id: &str) -> Result<()> {
    let artifact = load_artifact(&s.workdir, id).with_context(|| format!("loading checker {id}"))?;
    let candidates = s.candidates()?;
    let target = s
        .project
        .test_cases()?
        .into_iter()
        .find(|t| t.id == artifact.target)
        .with_context(|| format!("target test {} no longer exists", artifact.target))?;
    let split = s.split_for(&candidates, &target, s.config.seed);
    let cap = s.config.caps.validation_timeout_s;
    let outcome = dynamic_validate(&s.project, &artifact, &split.validation_run(), cap, &s.scratch())?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    if let Some(feedback) = outcome.classify(cap) {
        return Err(DomainFailure(format!("{id}: {}", feedback.kind)).into());
    }
    Ok(())
}

fn cmd_cross_validate(s: &Session) -> Result<()> {
    let checkers = s.checkers(&[])?;
    let tests: Vec<String> = s.project.test_cases()?.into_iter().map(|t| t.id).collect();
    let timeout = Duration::from_secs_f64(s.config.caps.validation_timeout_s);
    let report = cross_validate(&s.project, &checkers, &tests, timeout, &s.scratch())?;
    for mut artifact in checkers {
        let ok = report.cross_validated.get(&artifact.id).copied().unwrap_or(false);
        artifact.status = if ok { Status::CrossValidated } else { Status::Validated };
        save_artifact(&s.workdir, &artifact)?;
    }
    s.write_json("cross_validation.json", &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let failed: Vec<&str> = report
        .cross_validated
        .iter()
        .filter(|(_, ok)| !**ok)
        .map(|(id, _)| id.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(DomainFailure(format!("not cross-validated: {}", failed.join(", "))).into());
    }
    Ok(())
}

fn cmd_instrument(s: &Session, ids: &[String], out: &Path, mode: Option<ViolationMode>) -> Result<()> {
    let checkers = s.checkers(ids)?;
    let mode = match mode {
        Some(ViolationMode::Raise) => OnViolation::Raise,
        Some(ViolationMode::Log) => OnViolation::Log,
        None => s.config.on_violation,
    };
    let plan = InstrumentationPlan::new(checkers, out).with_on_violation(mode);
    let report = instrument(&s.project, &plan)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_mutate(s: &Session, scope: &[String]) -> Result<()> {
    let scope: BTreeSet<String> = scope.iter().cloned().collect();
    let mutants = generate_mutants(&s.project, &scope)?;
    s.write_json("mutants.json", &mutants)?;
    let mut per_op: std::collections::BTreeMap<String, usize> = Default::default();
    for m in &mutants {
        *per_op.entry(m.operator.to_string()).or_default() += 1;
    }
    println!("{} mutants", mutants.len());
    for (op, n) in per_op {
        println!("  {op}: {n}");
    }
    Ok(())
}

fn cmd_evaluate_mutants(s: &Session, ids: &[String]) -> Result<()> {
    let mut mutants: Vec<MutantRecord> = s
        .read_json("mutants.json")?
        .context("no mutants.json; run `mutate` first")?;
    let checkers = s.checkers(ids)?;
    if checkers.is_empty() {
        bail!("no validated checkers to evaluate");
    }
    let target_tests: Vec<String> = checkers
        .iter()
        .map(|c| c.target.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let setup = EvaluationSetup {
        project: &s.project,
        target_tests,
        checkers,
        scratch: s.scratch(),
        timeout: Duration::from_secs(s.config.project.timeout_seconds),
    };
    let report = evaluate_mutants(&mut mutants, &setup)?;
    s.write_json("mutants.json", &mutants)?;
    s.write_json("mutation_report.json", &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_overhead(s: &Session, repeat: u32, ids: &[String], noop: bool) -> Result<()> {
    let mut checkers = s.checkers(ids)?;
    if checkers.is_empty() {
        bail!("no validated checkers; generate some or name them with --checkers");
    }
    let tests: Vec<String> = checkers
        .iter()
        .map(|c| c.target.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if noop {
        let methods = checkers.iter().flat_map(|c| c.targets().iter().cloned()).collect();
        checkers = vec![noop_checker(methods)];
    }
    let eps = s.config.caps.overhead_noise_bound;
    let record = measure_overhead(&s.project, &checkers, &tests, repeat, eps, &s.scratch())?;
    s.write_json("overhead.json", &record)?;
    println!(
        "baseline mean {:.3}s, checked mean {:.3}s over {} runs",
        record.baseline_mean_s, record.checked_mean_s, record.repeat
    );
    println!(
        "relative overhead {:+.1}% (noise bound {:.1}%, baseline variation {:.1}%)",
        record.relative_overhead * 100.0,
        record.noise_bound * 100.0,
        record.baseline_variation * 100.0
    );
    println!("note: {}", record.caveat);
    Ok(())
}

fn cmd_report(s: &Session) -> Result<()> {
    let ledger = RunLedger::load(&s.workdir)?;
    let pricing = s.config.pricing.as_ref();
    print!("{}", ledger.render(pricing));
    let funnel: Option<Funnel> = s.read_json("funnel.json")?;
    let mutation: Option<MutationReport> = s.read_json("mutation_report.json")?;
    let overhead: Option<serde_json::Value> = s.read_json("overhead.json")?;
    if let Some(f) = &funnel {
        println!(
            "\nfunnel: all {} / with SUT calls {} / with assertions {} / passing {}",
            f.all, f.with_sut_calls, f.with_assert, f.passing
        );
    }
    if let Some(m) = &mutation {
        println!(
            "\nmutants: {} total, {} covered, {} killed by target tests, {} survived them, \
             {} of those killed by checkers, {} not covered",
            m.total, m.all, m.killed_by_target_tests, m.survived, m.killed_by_checkers, m.not_covered
        );
    }
    let report = serde_json::json!({
        "ledger": ledger,
        "summary": ledger.summary(pricing),
        "funnel": funnel,
        "mutation": mutation,
        "overhead": overhead,
    });
    let path = s.write_json("report.json", &report)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let s = Session::open(&cli.config)?;
    match cli.command {
        Command::Analyze => {
            let (_, funnel) = s.analyze()?;
            println!("{}", serde_json::to_string(&funnel)?);
            Ok(())
        }
        Command::Gen {
            tests,
            provider,
            seed,
            jobs,
        } => cmd_gen(&s, &tests, &provider, seed, jobs),
        Command::Validate { checker } => cmd_validate(&s, &checker),
        Command::CrossValidate => cmd_cross_validate(&s),
        Command::Instrument {
            checkers,
            out,
            on_violation,
        } => cmd_instrument(&s, &checkers, &out, on_violation),
        Command::Mutate { scope } => cmd_mutate(&s, &scope),
        Command::EvaluateMutants { checkers } => cmd_evaluate_mutants(&s, &checkers),
        Command::Overhead {
            repeat,
            checkers,
            noop,
        } => cmd_overhead(&s, repeat, &checkers, noop),
        Command::Report => cmd_report(&s),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<DomainFailure>() => {
            eprintln!("flycatcher: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("flycatcher: error: {e:#}");
            ExitCode::from(2)
        }
    }
}
