//! Mutant generation over subject classes and kill evaluation: each mutant
//! is run against the target tests plain, then (if it survives) against a
//! tree instrumented with the checkers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rustpython_parser::ast::{CmpOp, Constant, Expr, Operator, Stmt};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{read_to_string, write, Error, Result};
use crate::fsutil;
use crate::instrument::{instrument, instrument_source, module_of, InstrumentationPlan};
use crate::pipeline::CheckerArtifact;
use crate::pyast::{self, ParsedFile, Visitor};
use crate::runner::{Outcome, TestInvocation};
use crate::signature::Signature;
use crate::subject::{fn_view, SubjectProject};

const COVERAGE_PROBE: &str = include_str!("../shim/coverage_probe.py");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Operator6 {
    EmptyReturn,
    NegateConditional,
    BooleanLiteralFlip,
    ArithmeticSwap,
    ConstantNudge,
    RemoveInitializer,
}

/// Public name of the operator set.
pub type MutationOperator = Operator6;

impl fmt::Display for Operator6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutantStatus {
    NotCovered,
    KilledByTests,
    Survived,
    KilledByChecker,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutantRecord {
    pub id: String,
    pub operator: MutationOperator,
    /// Relative to the project root.
    pub file: PathBuf,
    pub span: Range<usize>,
    /// 1-based line of the span start.
    pub line: usize,
    /// Enclosing method.
    pub method: String,
    pub original_snippet: String,
    pub mutated_snippet: String,
    #[serde(default)]
    pub status: Option<MutantStatus>,
    /// Set when the mutant could not be applied; excluded from totals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl MutantRecord {
    /// Text of `original` with this mutant applied.
    pub fn apply_to(&self, original: &str) -> Result<String> {
        match original.get(self.span.clone()) {
            Some(s) if s == self.original_snippet => Ok(format!(
                "{}{}{}",
                &original[..self.span.start],
                self.mutated_snippet,
                &original[self.span.end..]
            )),
            _ => Err(Error::Internal(format!(
                "{}: span drift in {}",
                self.id,
                self.file.display()
            ))),
        }
    }
}

/// Writes the mutant into `root` and returns the original bytes.
pub fn apply_mutant(root: &Path, m: &MutantRecord) -> Result<String> {
    let path = root.join(&m.file);
    let original = read_to_string(&path)?;
    write(&path, m.apply_to(&original)?)?;
    Ok(original)
}

/// Restores the file contents saved by [`apply_mutant`].
pub fn revert_mutant(root: &Path, m: &MutantRecord, original: &str) -> Result<()> {
    write(&root.join(&m.file), original)
}

fn empty_value(annotation: Option<&Expr>) -> Option<&'static str> {
    let name = match annotation? {
        Expr::Name(n) => n.id.as_str(),
        Expr::Attribute(a) => a.attr.as_str(),
        Expr::Subscript(s) => match &*s.value {
            Expr::Name(n) => n.id.as_str(),
            Expr::Attribute(a) => a.attr.as_str(),
            _ => return None,
        },
        _ => return None,
    };
    Some(match name {
        "set" | "Set" | "frozenset" | "FrozenSet" | "AbstractSet" | "MutableSet" => "set()",
        "list" | "List" | "Sequence" | "MutableSequence" => "[]",
        "dict" | "Dict" | "Mapping" | "MutableMapping" => "{}",
        "str" => "\"\"",
        "bytes" => "b\"\"",
        "int" => "0",
        "float" => "0.0",
        _ => return None,
    })
}

fn cmp_token(op: &CmpOp) -> (&'static str, &'static str) {
    match op {
        CmpOp::Eq => ("==", "!="),
        CmpOp::NotEq => ("!=", "=="),
        CmpOp::Lt => ("<", ">="),
        CmpOp::LtE => ("<=", ">"),
        CmpOp::Gt => (">", "<="),
        CmpOp::GtE => (">=", "<"),
        CmpOp::Is => ("is", "is not"),
        CmpOp::IsNot => ("is not", "is"),
        CmpOp::In => ("in", "not in"),
        CmpOp::NotIn => ("not in", "in"),
    }
}

fn arith_token(op: &Operator) -> Option<(&'static str, &'static str)> {
    Some(match op {
        Operator::Add => ("+", "-"),
        Operator::Sub => ("-", "+"),
        Operator::Mult => ("*", "/"),
        Operator::Div => ("/", "*"),
        Operator::FloorDiv => ("//", "*"),
        Operator::Mod => ("%", "*"),
        _ => return None,
    })
}

struct Site {
    op: Operator6,
    span: Range<usize>,
    mutated: String,
}

struct SiteFinder<'a> {
    file: &'a ParsedFile,
    returns: Option<&'a Expr>,
    sites: Vec<Site>,
}

impl SiteFinder<'_> {
    /// Locates `token` in the gap between two operands.
    fn token_between(&self, gap: Range<usize>, token: &str) -> Option<Range<usize>> {
        let text = &self.file.text[gap.clone()];
        let bytes = text.as_bytes();
        let mut from = 0;
        while let Some(i) = text[from..].find(token) {
            let at = from + i;
            let end = at + token.len();
            // keep word operators whole and symbol operators unmerged
            let word = token.chars().next().is_some_and(|c| c.is_alphabetic());
            let before_ok = at == 0 || !(bytes[at - 1] as char).is_alphanumeric();
            let after_ok = end >= bytes.len()
                || (!word && !matches!(bytes[end], b'=' | b'/' | b'*'))
                || (word && !(bytes[end] as char).is_alphanumeric());
            if before_ok && after_ok {
                return Some(gap.start + at..gap.start + end);
            }
            from = at + 1;
        }
        None
    }

    fn push(&mut self, op: Operator6, span: Range<usize>, mutated: impl Into<String>) {
        let mutated = mutated.into();
        if self.file.text[span.clone()] != mutated {
            self.sites.push(Site { op, span, mutated });
        }
    }

    fn negate(&mut self, test: &Expr) {
        if let Expr::Compare(c) = test {
            if c.ops.len() == 1 {
                let (from, to) = cmp_token(&c.ops[0]);
                let gap = pyast::span(&*c.left).end..pyast::span(&c.comparators[0]).start;
                if let Some(r) = self.token_between(gap, from) {
                    self.push(Operator6::NegateConditional, r, to);
                    return;
                }
            }
        }
        let span = pyast::span(test);
        let text = format!("not ({})", &self.file.text[span.clone()]);
        self.push(Operator6::NegateConditional, span, text);
    }
}

impl<'a> Visitor<'a> for SiteFinder<'a> {
    fn stmt(&mut self, stmt: &'a Stmt) -> bool {
        match stmt {
            // nested definitions have their own return annotations
            Stmt::FunctionDef(_) | Stmt::AsyncFunctionDef(_) | Stmt::ClassDef(_) => return false,
            Stmt::Return(r) => {
                if let (Some(v), Some(empty)) = (&r.value, empty_value(self.returns)) {
                    self.push(Operator6::EmptyReturn, pyast::span(&**v), empty);
                }
            }
            Stmt::If(i) => self.negate(&i.test),
            Stmt::While(w) => self.negate(&w.test),
            Stmt::Assign(a) if a.targets.len() == 1 && matches!(&*a.value, Expr::Constant(_)) => {
                self.push(Operator6::RemoveInitializer, pyast::span(stmt), "pass");
            }
            Stmt::AnnAssign(a) if matches!(a.value.as_deref(), Some(Expr::Constant(_))) => {
                self.push(Operator6::RemoveInitializer, pyast::span(stmt), "pass");
            }
            Stmt::AugAssign(a) => {
                if let Some((from, to)) = arith_token(&a.op) {
                    let gap = pyast::span(&*a.target).end..pyast::span(&*a.value).start;
                    if let Some(r) = self.token_between(gap, &format!("{from}=")) {
                        self.push(Operator6::ArithmeticSwap, r, format!("{to}="));
                    }
                }
            }
            _ => {}
        }
        true
    }

    fn expr(&mut self, expr: &'a Expr) {
        match expr {
            Expr::IfExp(e) => self.negate(&e.test),
            Expr::BinOp(b) => {
                if let Some((from, to)) = arith_token(&b.op) {
                    let gap = pyast::span(&*b.left).end..pyast::span(&*b.right).start;
                    if let Some(r) = self.token_between(gap, from) {
                        self.push(Operator6::ArithmeticSwap, r, to);
                    }
                }
            }
            Expr::Constant(c) => match &c.value {
                Constant::Bool(v) => {
                    let to = if *v { "False" } else { "True" };
                    self.push(Operator6::BooleanLiteralFlip, pyast::span(expr), to);
                }
                Constant::Int(n) => {
                    if let Ok(v) = i64::try_from(n.clone()) {
                        self.push(Operator6::ConstantNudge, pyast::span(expr), (v + 1).to_string());
                    }
                }
                _ => {}
            },
            _ => {}
        }
    }
}

/// Whether a class is named by `scope` (simple or `module.Class`).
fn in_scope(scope: &BTreeSet<String>, module: &str, class: &str) -> bool {
    scope.contains(class) || scope.contains(&format!("{module}.{class}"))
}

/// All operator sites in methods of the scoped classes, ordered by
/// (file, span, operator) and numbered `m0001`, `m0002`, ...
pub fn generate_mutants(project: &SubjectProject, scope: &BTreeSet<String>) -> Result<Vec<MutantRecord>> {
    if scope.is_empty() {
        return Err(Error::Config("mutation scope is empty".into()));
    }
    let files: BTreeSet<&PathBuf> = project.method_index.values().map(|m| &m.file).collect();
    let mut out = Vec::new();
    for rel in files {
        let Some(module) = module_of(project, rel) else { continue };
        let label = rel.to_string_lossy().replace('\\', "/");
        let parsed = ParsedFile::parse(read_to_string(&project.root.join(rel))?, &label)?;
        for stmt in &parsed.suite {
            let Stmt::ClassDef(class) = stmt else { continue };
            if !in_scope(scope, &module, class.name.as_str()) {
                continue;
            }
            for member in &class.body {
                let Some(f) = fn_view(member) else { continue };
                let method: Signature = f.signature(&module, class.name.as_str());
                let mut finder = SiteFinder {
                    file: &parsed,
                    returns: f.returns,
                    sites: Vec::new(),
                };
                pyast::walk_body(f.body, &mut finder);
                for site in finder.sites {
                    out.push(MutantRecord {
                        id: String::new(),
                        operator: site.op,
                        file: rel.clone(),
                        line: parsed.line_of(site.span.start),
                        method: method.to_string(),
                        original_snippet: parsed.slice(site.span.clone()).to_string(),
                        mutated_snippet: site.mutated,
                        span: site.span,
                        status: None,
                        skipped: None,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| {
        (&a.file, a.span.start, a.span.end, a.operator).cmp(&(&b.file, b.span.start, b.span.end, b.operator))
    });
    out.dedup_by(|a, b| a.file == b.file && a.span == b.span && a.operator == b.operator);
    for (i, m) in out.iter_mut().enumerate() {
        m.id = format!("m{:04}", i + 1);
    }
    Ok(out)
}

/// Counts per outcome. `all` is the number of covered mutants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationReport {
    pub total: usize,
    pub all: usize,
    pub killed_by_target_tests: usize,
    /// Covered mutants the plain target tests do not kill.
    pub survived: usize,
    pub killed_by_checkers: usize,
    pub survived_with_checkers: usize,
    pub not_covered: usize,
    pub skipped: usize,
}

impl MutationReport {
    pub fn from_records(records: &[MutantRecord]) -> Self {
        let mut r = MutationReport::default();
        for m in records {
            if m.skipped.is_some() {
                r.skipped += 1;
                continue;
            }
            let Some(status) = m.status else { continue };
            r.total += 1;
            match status {
                MutantStatus::NotCovered => r.not_covered += 1,
                MutantStatus::KilledByTests => r.killed_by_target_tests += 1,
                MutantStatus::Survived => r.survived_with_checkers += 1,
                MutantStatus::KilledByChecker => r.killed_by_checkers += 1,
            }
        }
        r.all = r.total - r.not_covered;
        r.survived = r.survived_with_checkers + r.killed_by_checkers;
        r
    }
}

/// Inputs of a kill evaluation.
pub struct EvaluationSetup<'a> {
    pub project: &'a SubjectProject,
    pub target_tests: Vec<String>,
    pub checkers: Vec<CheckerArtifact>,
    pub scratch: PathBuf,
    pub timeout: Duration,
}

/// Covered lines per relative file, from the probe's JSON output.
type Coverage = BTreeMap<String, BTreeSet<usize>>;

fn baseline_coverage(setup: &EvaluationSetup<'_>, plain: &Path) -> Result<Coverage> {
    let probe_dir = setup.scratch.join("probe");
    write(&probe_dir.join("sitecustomize.py"), COVERAGE_PROBE)?;
    let out = setup.scratch.join("coverage.json");
    let run = TestInvocation::new(plain, &setup.project.config, &setup.target_tests)
        .timeout(setup.timeout)
        .extra_path(&probe_dir)
        .env("FC_COVERAGE_ROOT", plain.to_string_lossy())
        .env("FC_COVERAGE_OUT", out.to_string_lossy())
        .run()?;
    if !run.passed() {
        return Err(Error::Runner(format!("baseline run of the target tests fails:\n{}", run.log())));
    }
    let text = read_to_string(&out)?;
    let raw: BTreeMap<String, Vec<usize>> = serde_json::from_str(&text)?;
    Ok(raw
        .into_iter()
        .map(|(k, v)| (k.replace('\\', "/"), v.into_iter().collect()))
        .collect())
}

/// Evaluates every mutant, setting its status. Both workspaces are
/// restored after each mutant and their hashes checked.
pub fn evaluate_mutants(mutants: &mut [MutantRecord], setup: &EvaluationSetup<'_>) -> Result<MutationReport> {
    let project = setup.project;
    std::fs::create_dir_all(&setup.scratch).map_err(|e| Error::io(&setup.scratch, e))?;
    let work = tempfile::Builder::new()
        .prefix("mutants-")
        .tempdir_in(&setup.scratch)
        .map_err(|e| Error::io(&setup.scratch, e))?;
    let plain = work.path().join("plain");
    let checked = work.path().join("checked");
    fsutil::copy_tree(&project.root, &plain, &[])?;
    let plan = InstrumentationPlan::new(setup.checkers.clone(), &checked);
    instrument(project, &plan)?;

    let coverage = baseline_coverage(setup, &plain)?;
    let checked_baseline = TestInvocation::new(&checked, &project.config, &setup.target_tests)
        .timeout(setup.timeout)
        .run()?;
    if !checked_baseline.passed() {
        return Err(Error::Runner(format!(
            "target tests fail on the unmutated instrumented tree:\n{}",
            checked_baseline.log()
        )));
    }
    let plain_hash = fsutil::tree_hash(&plain)?;
    let checked_hash = fsutil::tree_hash(&checked)?;

    // per-file instrumentation targets
    let mut file_targets: BTreeMap<PathBuf, BTreeMap<Signature, Vec<String>>> = BTreeMap::new();
    for (sig, ids) in &plan.targets {
        if let Some(info) = project.method_index.get(sig) {
            file_targets
                .entry(info.file.clone())
                .or_default()
                .insert(info.signature.clone(), ids.clone());
        }
    }

    for m in mutants.iter_mut() {
        let label = m.file.to_string_lossy().replace('\\', "/");
        let lines = m.line..=m.line + m.original_snippet.matches('\n').count();
        let covered = coverage
            .get(&label)
            .is_some_and(|hit| lines.clone().any(|l| hit.contains(&l)));
        if !covered {
            m.status = Some(MutantStatus::NotCovered);
            continue;
        }
        let original = read_to_string(&plain.join(&m.file))?;
        let mutated = match m.apply_to(&original) {
            Ok(t) => t,
            Err(e) => {
                warn!("{e}");
                m.skipped = Some(e.to_string());
                continue;
            }
        };
        write(&plain.join(&m.file), &mutated)?;
        let plain_run = TestInvocation::new(&plain, &project.config, &setup.target_tests)
            .timeout(setup.timeout)
            .run();
        write(&plain.join(&m.file), &original)?;
        let plain_run = plain_run?;
        if plain_run.outcome == Outcome::Infrastructure {
            warn!(mutant = %m.id, "runner error on mutant; counting it as killed");
        }
        let status = if !plain_run.passed() {
            MutantStatus::KilledByTests
        } else {
            let checked_path = checked.join(&m.file);
            let before = read_to_string(&checked_path)?;
            let text = match file_targets.get(&m.file) {
                Some(t) => {
                    let module = module_of(project, &m.file).unwrap_or_default();
                    instrument_source(&mutated, &module, &label, t)?.0
                }
                None => mutated.clone(),
            };
            write(&checked_path, text)?;
            let run = TestInvocation::new(&checked, &project.config, &setup.target_tests)
                .timeout(setup.timeout)
                .run();
            write(&checked_path, &before)?;
            if run?.passed() {
                MutantStatus::Survived
            } else {
                MutantStatus::KilledByChecker
            }
        };
        info!(mutant = %m.id, operator = %m.operator, ?status, "evaluated");
        m.status = Some(status);
        if fsutil::tree_hash(&plain)? != plain_hash || fsutil::tree_hash(&checked)? != checked_hash {
            return Err(Error::Internal(format!("workspace not restored after {}", m.id)));
        }
    }
    Ok(MutationReport::from_records(mutants))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sites(src: &str) -> Vec<(Operator6, String, String)> {
        let file = ParsedFile::parse(src, "<t>").unwrap();
        let Stmt::FunctionDef(f) = &file.suite[0] else { panic!() };
        let mut finder = SiteFinder {
            file: &file,
            returns: f.returns.as_deref(),
            sites: Vec::new(),
        };
        pyast::walk_body(&f.body, &mut finder);
        finder
            .sites
            .into_iter()
            .map(|s| (s.op, src[s.span].to_string(), s.mutated))
            .collect()
    }

    #[test]
    fn empty_return_follows_annotation() {
        let s = sites("def f(x) -> Set[str]:\n    return frozenset(x)\n");
        assert_eq!(s, [(Operator6::EmptyReturn, "frozenset(x)".into(), "set()".into())]);
        assert!(sites("def f(x) -> bool:\n    return x\n").is_empty());
        assert!(sites("def f(x):\n    return x\n").is_empty());
    }

    #[test]
    fn comparison_operator_is_flipped_in_place() {
        let s = sites("def f(a, b):\n    if (a) <= b:\n        pass\n    while a is not None:\n        pass\n");
        assert_eq!(s[0], (Operator6::NegateConditional, "<=".into(), ">".into()));
        assert_eq!(s[1], (Operator6::NegateConditional, "is not".into(), "is".into()));
    }

    #[test]
    fn other_conditions_are_wrapped() {
        let s = sites("def f(a):\n    return 1 if a else 2\n");
        assert!(s.contains(&(Operator6::NegateConditional, "a".into(), "not (a)".into())));
    }

    #[test]
    fn arithmetic_and_constants() {
        let s = sites("def f(a):\n    a += 2\n    return (a - 1) // 3\n");
        let ops: Vec<(Operator6, &str, &str)> =
            s.iter().map(|(o, a, b)| (*o, a.as_str(), b.as_str())).collect();
        assert!(ops.contains(&(Operator6::ArithmeticSwap, "+=", "-=")));
        assert!(ops.contains(&(Operator6::ArithmeticSwap, "-", "+")));
        assert!(ops.contains(&(Operator6::ArithmeticSwap, "//", "*")));
        assert!(ops.contains(&(Operator6::ConstantNudge, "3", "4")));
    }

    #[test]
    fn booleans_and_initializers() {
        let s = sites("def f(self):\n    self.x = 0\n    y: bool = True\n    return False\n");
        let ops: Vec<Operator6> = s.iter().map(|x| x.0).collect();
        assert_eq!(
            ops,
            [
                Operator6::RemoveInitializer,
                Operator6::ConstantNudge,
                Operator6::RemoveInitializer,
                Operator6::BooleanLiteralFlip,
                Operator6::BooleanLiteralFlip
            ]
        );
    }

    #[test]
    fn apply_and_revert_round_trip() {
        let m = MutantRecord {
            id: "m0001".into(),
            operator: Operator6::ConstantNudge,
            file: "x.py".into(),
            span: 4..5,
            line: 1,
            method: "x.A.f()".into(),
            original_snippet: "1".into(),
            mutated_snippet: "2".into(),
            status: None,
            skipped: None,
        };
        assert_eq!(m.apply_to("x = 1\n").unwrap(), "x = 2\n");
        assert!(m.apply_to("x = 3\n").is_err());
    }

    #[test]
    fn report_partitions() {
        let mk = |s| MutantRecord {
            id: String::new(),
            operator: Operator6::ConstantNudge,
            file: "x".into(),
            span: 0..1,
            line: 1,
            method: String::new(),
            original_snippet: "1".into(),
            mutated_snippet: "2".into(),
            status: Some(s),
            skipped: None,
        };
        let r = MutationReport::from_records(&[
            mk(MutantStatus::NotCovered),
            mk(MutantStatus::KilledByTests),
            mk(MutantStatus::KilledByChecker),
            mk(MutantStatus::Survived),
        ]);
        assert_eq!((r.total, r.all, r.survived, r.killed_by_checkers), (4, 3, 2, 1));
    }
}
