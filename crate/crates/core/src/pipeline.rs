//! Per-target checker inference: state-changing identification, checker
//! generation, static validation, scaffolding and the bounded refinement
//! loop, plus on-disk artifacts.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rustpython_parser::ast::{CmpOp, Expr, Pattern, Stmt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::config::{Budgets, ASSERT_STATEMENT};
use crate::error::{read_to_string, write, Error, Result};
use crate::llm::{
    render_generation_prompt, render_identification_prompt, ChatProvider, Conversation, Stage,
    Usage, STATE_CHANGING_COMMENT,
};
use crate::pyast::{self, ParsedFile, Visitor};
use crate::signature::Signature;
use crate::subject::{SubjectProject, TestCase};

/// Assertion helpers the runtime shim provides to checkers.
pub const SHIM_ASSERTIONS: &[&str] = &[
    "assertTrue",
    "assertFalse",
    "assertEquals",
    "assertEqual",
    "assertNotNull",
];

pub const GUARD_MESSAGE: &str = "Checker is calling a state-changing method.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Draft,
    StaticallyValid,
    Validated,
    CrossValidated,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeedbackKind {
    SyntaxError,
    NoAssertion,
    NonSutMethod,
    UnqualifiedSignature,
    TestFailure,
    RecursiveCall,
    Timeout,
}

impl FeedbackKind {
    pub fn stage(self) -> Stage {
        match self {
            FeedbackKind::SyntaxError
            | FeedbackKind::NoAssertion
            | FeedbackKind::NonSutMethod
            | FeedbackKind::UnqualifiedSignature => Stage::Compile,
            FeedbackKind::RecursiveCall => Stage::Instrument,
            FeedbackKind::TestFailure | FeedbackKind::Timeout => Stage::Execute,
        }
    }
}

impl fmt::Display for FeedbackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A validation failure with the message sent back to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub kind: FeedbackKind,
    pub message: String,
}

impl Feedback {
    pub fn syntax_error() -> Self {
        Feedback {
            kind: FeedbackKind::SyntaxError,
            message: "Syntax error in Python code. Make sure that the checker method is indeed a single method, i.e. do not output helper methods or classes.".into(),
        }
    }

    pub fn no_assertion() -> Self {
        Feedback {
            kind: FeedbackKind::NoAssertion,
            message: "The checker does not contain a call to an assertion method. Make sure to include assertions outside comments.".into(),
        }
    }

    pub fn non_sut_method(methods: &[String]) -> Self {
        Feedback {
            kind: FeedbackKind::NonSutMethod,
            message: format!(
                "The system under test (SUT) does not contain the following methods: {}. Make sure that the checker handles methods from the system under analysis rather than built-in functions or methods from the test suite.",
                methods.join(", ")
            ),
        }
    }

    pub fn unqualified_signature(signatures: &[String]) -> Self {
        Feedback {
            kind: FeedbackKind::UnqualifiedSignature,
            message: format!(
                "The checker handles methods without fully qualified signature: {}. Use fully qualified names for the method and all argument types.",
                signatures.join(", ")
            ),
        }
    }

    pub fn test_failure(logs: &str) -> Self {
        Feedback {
            kind: FeedbackKind::TestFailure,
            message: format!(
                "The following tests fail: {}. The checker should be generic and robust enough to meaningfully satisfy all test cases.",
                logs.trim_end()
            ),
        }
    }

    pub fn recursive_call() -> Self {
        Feedback {
            kind: FeedbackKind::RecursiveCall,
            message: "This checker is calling a state-changing method. This is not allowed.".into(),
        }
    }

    pub fn timeout(cap_s: f64) -> Self {
        Feedback {
            kind: FeedbackKind::Timeout,
            message: format!(
                "The checker is making the tests run for more than {}.",
                format_duration(cap_s)
            ),
        }
    }
}

/// `1800` → `30min`, `2.5` → `2.5s`.
fn format_duration(secs: f64) -> String {
    if secs >= 60.0 && secs.fract() == 0.0 && (secs as u64).is_multiple_of(60) {
        format!("{}min", secs as u64 / 60)
    } else {
        format!("{secs}s")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTest {
    pub base: TestCase,
    pub state_changing: BTreeSet<Signature>,
    pub annotated_body: String,
}

impl AnnotatedTest {
    /// Builds the annotated body from a set of state-changing methods;
    /// constructors the test calls are always included.
    pub fn new(base: TestCase, flagged: BTreeSet<Signature>) -> Self {
        let mut state_changing: BTreeSet<Signature> = flagged
            .into_iter()
            .filter(|s| base.sut_calls.contains(s))
            .collect();
        state_changing.extend(base.sut_calls.iter().filter(|s| s.is_constructor()).cloned());
        let lines: BTreeSet<usize> = base
            .call_sites
            .iter()
            .filter(|c| state_changing.contains(&c.signature))
            .map(|c| c.line)
            .collect();
        let annotated_body = base
            .body
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if lines.contains(&(i + 1)) {
                    format!("{l}  {STATE_CHANGING_COMMENT}\n")
                } else {
                    format!("{l}\n")
                }
            })
            .collect();
        AnnotatedTest {
            base,
            state_changing,
            annotated_body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckerArtifact {
    pub id: String,
    pub target: String,
    pub checker_source: String,
    pub handled_signatures: BTreeSet<Signature>,
    pub status: Status,
    pub attempts: u32,
    pub transcript_ref: PathBuf,
    pub failure_history: Vec<FeedbackKind>,
    #[serde(default)]
    pub state_changing: BTreeSet<Signature>,
    /// Import lines of the target test, reused by the scaffold.
    #[serde(default)]
    pub imports: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CheckerArtifact {
    pub fn new(id: impl Into<String>, target: &TestCase) -> Self {
        CheckerArtifact {
            id: id.into(),
            target: target.id.clone(),
            checker_source: String::new(),
            handled_signatures: BTreeSet::new(),
            status: Status::Draft,
            attempts: 0,
            transcript_ref: PathBuf::from("transcript.jsonl"),
            failure_history: Vec::new(),
            state_changing: BTreeSet::new(),
            imports: target.imports.clone(),
            note: None,
        }
    }

    /// Methods to instrument for this checker.
    pub fn targets(&self) -> &BTreeSet<Signature> {
        if self.handled_signatures.is_empty() {
            &self.state_changing
        } else {
            &self.handled_signatures
        }
    }

    /// Name of the checker function in `checker_source`.
    pub fn function_name(&self) -> Option<String> {
        let parsed = ParsedFile::parse(self.checker_source.clone(), &self.id).ok()?;
        match parsed.suite.as_slice() {
            [Stmt::FunctionDef(f)] => Some(f.name.to_string()),
            _ => None,
        }
    }
}

/// `ck_<test name>_<first 8 hex digits of sha256(test id)>`
pub fn checker_id(test: &TestCase) -> String {
    let digest = Sha256::digest(test.id.as_bytes());
    format!("ck_{}_{}", test.name, &hex::encode(digest)[..8])
}

/// First fenced code block of a reply and the number of blocks found.
pub fn extract_code_block(reply: &str) -> Option<(String, usize)> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in reply.lines() {
        let fence = line.trim_start().starts_with("```");
        match (&mut current, fence) {
            (None, true) => current = Some(Vec::new()),
            (Some(lines), true) => {
                blocks.push(lines.join("\n"));
                current = None;
            }
            (Some(lines), false) => lines.push(line),
            (None, false) => {}
        }
    }
    let count = blocks.len();
    blocks.into_iter().next().map(|b| (format!("{b}\n"), count))
}

fn normalize_line(line: &str) -> String {
    let without = line.replace(STATE_CHANGING_COMMENT, "").replace("// state-changing", "");
    let code = match without.find("  #") {
        Some(i) => &without[..i],
        None => &without,
    };
    code.trim().to_string()
}

/// Parses an identification reply: the flagged lines are matched back to
/// the test's lines and their resolved calls. `None` when the reply does
/// not contain the test.
pub fn parse_identification_reply(
    test: &TestCase,
    reply: &str,
) -> Option<(BTreeSet<Signature>, Vec<String>)> {
    let text = extract_code_block(reply).map(|(c, _)| c).unwrap_or_else(|| reply.to_string());
    let header = format!("def {}(", test.name);
    let start = text.lines().position(|l| l.trim_start().starts_with(&header))?;
    let test_lines: Vec<String> = test.body.lines().map(normalize_line).collect();
    let mut flagged = BTreeSet::new();
    let mut warnings = Vec::new();
    for line in text.lines().skip(start) {
        if !line.contains(STATE_CHANGING_COMMENT) && !line.contains("// state-changing") {
            continue;
        }
        let wanted = normalize_line(line);
        let matches: Vec<usize> = test_lines
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == wanted)
            .map(|(i, _)| i + 1)
            .collect();
        let calls: Vec<&Signature> = test
            .call_sites
            .iter()
            .filter(|c| matches.contains(&c.line))
            .map(|c| &c.signature)
            .collect();
        if calls.is_empty() {
            let w = format!("flagged line `{wanted}` has no resolved subject call; ignored");
            warn!(test = %test.id, "{w}");
            warnings.push(w);
        }
        flagged.extend(calls.into_iter().cloned());
    }
    Some((flagged, warnings))
}

/// Asks the model which calls of the test change state. Retries once when
/// the reply does not contain the test.
pub fn identify_state_changing(
    project: &SubjectProject,
    test: &TestCase,
    provider: &mut dyn ChatProvider,
    conversation: &mut Conversation,
) -> Result<(AnnotatedTest, Vec<String>)> {
    if test.sut_calls.is_empty() {
        return Err(Error::Internal(format!("{} calls no subject method", test.id)));
    }
    let impls: Vec<_> = test.sut_calls.iter().filter_map(|s| project.method(s)).collect();
    let mut reply = conversation.send(provider, render_identification_prompt(test, &impls))?;
    for retry in [true, false] {
        if let Some((flagged, warnings)) = parse_identification_reply(test, &reply) {
            return Ok((AnnotatedTest::new(test.clone(), flagged), warnings));
        }
        if retry {
            reply = conversation.send(
                provider,
                format!(
                    "The reply does not contain the test `{}`. Reply with the complete annotated test in a single ```python code block.",
                    test.name
                ),
            )?;
        }
    }
    Err(Error::Internal(format!(
        "identification reply for {} does not contain the test",
        test.id
    )))
}

struct StaticScan<'p> {
    assertion_names: BTreeSet<&'p str>,
    count_assert_stmt: bool,
    assertions: usize,
    literals: Vec<String>,
}

fn is_signature_field(e: &Expr) -> bool {
    matches!(e, Expr::Attribute(a) if a.attr.as_str() == "signature")
}

fn string_literals(e: &Expr) -> Vec<String> {
    match e {
        Expr::Tuple(t) => t.elts.iter().flat_map(string_literals).collect(),
        Expr::List(l) => l.elts.iter().flat_map(string_literals).collect(),
        Expr::Set(s) => s.elts.iter().flat_map(string_literals).collect(),
        _ => pyast::string_constant(e).map(str::to_string).into_iter().collect(),
    }
}

fn pattern_literals(p: &Pattern, out: &mut Vec<String>) {
    match p {
        Pattern::MatchValue(v) => out.extend(string_literals(&v.value)),
        Pattern::MatchOr(o) => o.patterns.iter().for_each(|p| pattern_literals(p, out)),
        Pattern::MatchAs(a) => {
            if let Some(inner) = &a.pattern {
                pattern_literals(inner, out)
            }
        }
        _ => {}
    }
}

impl<'a> Visitor<'a> for StaticScan<'_> {
    fn stmt(&mut self, stmt: &'a Stmt) -> bool {
        match stmt {
            Stmt::Assert(_) if self.count_assert_stmt => self.assertions += 1,
            Stmt::Match(m) if is_signature_field(&m.subject) => {
                for case in &m.cases {
                    pattern_literals(&case.pattern, &mut self.literals);
                }
            }
            _ => {}
        }
        true
    }

    fn expr(&mut self, expr: &'a Expr) {
        match expr {
            Expr::Call(c) => {
                if pyast::callee_name(&c.func).is_some_and(|n| self.assertion_names.contains(n)) {
                    self.assertions += 1;
                }
            }
            Expr::Compare(c) => {
                let operands: Vec<&Expr> =
                    std::iter::once(&*c.left).chain(c.comparators.iter()).collect();
                for (i, op) in c.ops.iter().enumerate() {
                    if !matches!(
                        op,
                        CmpOp::Eq | CmpOp::NotEq | CmpOp::Is | CmpOp::IsNot | CmpOp::In | CmpOp::NotIn
                    ) {
                        continue;
                    }
                    let (l, r) = (operands[i], operands[i + 1]);
                    if is_signature_field(l) {
                        self.literals.extend(string_literals(r));
                    } else if is_signature_field(r) {
                        self.literals.extend(string_literals(l));
                    }
                }
            }
            _ => {}
        }
    }
}

/// Static checks, in order: a single function definition, at least one
/// assertion, handled signatures that exist in the subject, and handled
/// signatures that are fully qualified. Returns the handled signatures.
pub fn static_validate(
    source: &str,
    project: &SubjectProject,
) -> std::result::Result<BTreeSet<Signature>, Feedback> {
    let parsed = ParsedFile::parse(source, "<checker>").map_err(|_| Feedback::syntax_error())?;
    let [Stmt::FunctionDef(func)] = parsed.suite.as_slice() else {
        return Err(Feedback::syntax_error());
    };
    let mut scan = StaticScan {
        assertion_names: SHIM_ASSERTIONS
            .iter()
            .copied()
            .chain(project.config.assertion_names.iter().map(String::as_str))
            .filter(|n| *n != ASSERT_STATEMENT)
            .collect(),
        count_assert_stmt: project.config.counts_assert_statements(),
        assertions: 0,
        literals: Vec::new(),
    };
    pyast::walk_body(&func.body, &mut scan);
    if scan.assertions == 0 {
        return Err(Feedback::no_assertion());
    }
    let mut seen = BTreeSet::new();
    let mut handled = BTreeSet::new();
    let mut missing = Vec::new();
    let mut unqualified = Vec::new();
    for lit in scan.literals {
        if !seen.insert(lit.clone()) {
            continue;
        }
        match lit.parse::<Signature>() {
            Ok(sig) if project.contains(&lit) => {
                handled.insert(sig);
            }
            Ok(_) => missing.push(lit),
            Err(_) => unqualified.push(lit),
        }
    }
    if !missing.is_empty() {
        return Err(Feedback::non_sut_method(&missing));
    }
    if !unqualified.is_empty() {
        return Err(Feedback::unqualified_signature(&unqualified));
    }
    Ok(handled)
}

/// Wraps a statically valid checker into an importable module: shim
/// imports, the target test's imports, a container class named after the
/// checker id, the reentrancy guard around the body and the `ENTRY` alias.
pub fn scaffold(artifact: &CheckerArtifact) -> Result<String> {
    let parsed = ParsedFile::parse(artifact.checker_source.clone(), &artifact.id)?;
    let [Stmt::FunctionDef(func)] = parsed.suite.as_slice() else {
        return Err(Error::Internal(format!("{}: checker is not a single function", artifact.id)));
    };
    let def_start = pyast::span(&parsed.suite[0]).start;
    let def_start = match func.decorator_list.first() {
        Some(d) => def_start.min(pyast::span(d).start),
        None => def_start,
    };
    let body_start = pyast::span(&func.body[0]).start;
    let body_end = pyast::span(func.body.last().expect("non-empty body")).end;
    let header_start = parsed.text[def_start..body_start]
        .find("def ")
        .map_or(def_start, |i| def_start + i);
    let header = parsed.text[header_start..body_start].trim_end();
    let body = pyast::reindent_block(&parsed, body_start..body_end, "            ");
    let class = format!("Checker_{}", artifact.id);
    let mut out = String::new();
    out.push_str(&format!("# Runtime checker {} for {}\n", artifact.id, artifact.target));
    out.push_str("from fc_runtime import ABSENT, CheckerRecursionError, CheckerViolation, Operation, ShadowState\n");
    out.push_str("from fc_runtime import assertEqual, assertEquals, assertFalse, assertNotNull, assertTrue\n");
    for import in &artifact.imports {
        if !import.trim_start().starts_with("from .") {
            out.push_str(import);
            out.push('\n');
        }
    }
    out.push_str(&format!(
        "\n\nclass {class}(object):\n    CHECKER_ID = \"{id}\"\n\n    @staticmethod\n    {header}\n",
        id = artifact.id
    ));
    out.push_str(&format!(
        "        if ShadowState.in_checker():\n            raise CheckerRecursionError(\"{GUARD_MESSAGE}\")\n        ShadowState.enter({class}.CHECKER_ID)\n        try:\n"
    ));
    out.push_str(&body);
    out.push_str(&format!(
        "        except AssertionError as _fc_error:\n            raise CheckerViolation({class}.CHECKER_ID, str(_fc_error) or repr(_fc_error))\n        finally:\n            ShadowState.exit()\n"
    ));
    out.push_str(&format!("\n\nENTRY = {class}.{}\n", func.name));
    Ok(out)
}

/// Dynamic validation hook used by the refinement loop.
pub trait DynamicCheck {
    /// `None` when the checker passes.
    fn check(&mut self, artifact: &CheckerArtifact) -> Option<Feedback>;
}

/// Accepts every statically valid checker.
pub struct StaticOnly;

impl DynamicCheck for StaticOnly {
    fn check(&mut self, _artifact: &CheckerArtifact) -> Option<Feedback> {
        None
    }
}

pub struct RefineRequest<'a> {
    pub project: &'a SubjectProject,
    pub target: &'a TestCase,
    pub context: &'a [TestCase],
    pub budgets: &'a Budgets,
    /// Shared transcript file for both conversations.
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub artifact: CheckerArtifact,
    pub annotated: Option<AnnotatedTest>,
    pub usage: Usage,
    pub warnings: Vec<String>,
}

/// True when the last `cutoff` kinds are all equal.
fn same_kind_streak(history: &[FeedbackKind], cutoff: u32) -> bool {
    let n = cutoff as usize;
    history.len() >= n && history[history.len() - n..].windows(2).all(|w| w[0] == w[1])
}

/// identify → generate → validate, refining in one conversation until the
/// checker validates, `max_attempts` rounds were used or the same kind of
/// failure occurred `same_kind_cutoff` times in a row.
pub fn refine_loop(
    req: &RefineRequest<'_>,
    provider: &mut dyn ChatProvider,
    dynamic: &mut dyn DynamicCheck,
) -> Result<RefineResult> {
    let mut artifact = CheckerArtifact::new(checker_id(req.target), req.target);
    let mut usage = Usage::default();
    let mut warnings = Vec::new();
    let reject = |mut artifact: CheckerArtifact, note: String, usage, warnings, annotated| {
        info!(checker = %artifact.id, "rejected: {note}");
        artifact.status = Status::Rejected;
        artifact.note = Some(note);
        Ok(RefineResult {
            artifact,
            annotated,
            usage,
            warnings,
        })
    };

    let mut ident_conv = Conversation::new(req.transcript.clone());
    let identified = identify_state_changing(req.project, req.target, provider, &mut ident_conv);
    usage.add(ident_conv.usage());
    let annotated = match identified {
        Ok((a, w)) => {
            warnings.extend(w);
            a
        }
        Err(Error::Io { path, source }) => return Err(Error::Io { path, source }),
        Err(e) => return reject(artifact, format!("identification failed: {e}"), usage, warnings, None),
    };
    artifact.state_changing = annotated.state_changing.clone();

    let mut conv = Conversation::new(req.transcript.clone());
    let prompt = render_generation_prompt(&annotated, &req.target.imports, req.context);
    let mut reply = match conv.send(provider, prompt) {
        Ok(r) => r,
        Err(e) => {
            usage.add(conv.usage());
            return reject(artifact, format!("provider: {e}"), usage, warnings, Some(annotated));
        }
    };
    loop {
        artifact.attempts += 1;
        artifact.status = Status::Draft;
        let feedback = match extract_code_block(&reply) {
            None => Feedback::syntax_error(),
            Some((code, blocks)) => {
                if blocks > 1 {
                    let w = format!("reply has {blocks} code blocks; using the first");
                    warn!(checker = %artifact.id, "{w}");
                    warnings.push(w);
                }
                artifact.checker_source = code;
                match static_validate(&artifact.checker_source, req.project) {
                    Err(f) => f,
                    Ok(handled) => {
                        artifact.handled_signatures = handled;
                        artifact.status = Status::StaticallyValid;
                        match dynamic.check(&artifact) {
                            None => {
                                artifact.status = Status::Validated;
                                usage.add(conv.usage());
                                return Ok(RefineResult {
                                    artifact,
                                    annotated: Some(annotated),
                                    usage,
                                    warnings,
                                });
                            }
                            Some(f) => f,
                        }
                    }
                }
            }
        };
        info!(checker = %artifact.id, attempt = artifact.attempts, kind = %feedback.kind, "checker failed validation");
        artifact.failure_history.push(feedback.kind);
        if artifact.attempts >= req.budgets.max_attempts {
            usage.add(conv.usage());
            let note = format!("attempt budget of {} exhausted", req.budgets.max_attempts);
            return reject(artifact, note, usage, warnings, Some(annotated));
        }
        if same_kind_streak(&artifact.failure_history, req.budgets.same_kind_cutoff) {
            usage.add(conv.usage());
            let note = format!(
                "{} consecutive {} failures",
                req.budgets.same_kind_cutoff, feedback.kind
            );
            return reject(artifact, note, usage, warnings, Some(annotated));
        }
        reply = match conv.refine(provider, feedback.kind.stage(), &feedback.message) {
            Ok(r) => r,
            Err(e) => {
                usage.add(conv.usage());
                return reject(artifact, format!("provider: {e}"), usage, warnings, Some(annotated));
            }
        };
    }
}

/// Directory of one checker's artifacts.
pub fn artifact_dir(workdir: &Path, id: &str) -> PathBuf {
    workdir.join("checkers").join(id)
}

pub fn save_artifact(workdir: &Path, artifact: &CheckerArtifact) -> Result<PathBuf> {
    let dir = artifact_dir(workdir, &artifact.id);
    write(&dir.join("checker.src"), &artifact.checker_source)?;
    let meta = serde_json::to_string_pretty(artifact)?;
    write(&dir.join("meta.json"), format!("{meta}\n"))?;
    Ok(dir)
}

pub fn load_artifact(workdir: &Path, id: &str) -> Result<CheckerArtifact> {
    let dir = artifact_dir(workdir, id);
    let meta = read_to_string(&dir.join("meta.json"))?;
    let mut artifact: CheckerArtifact = serde_json::from_str(&meta)?;
    artifact.checker_source = read_to_string(&dir.join("checker.src"))?;
    Ok(artifact)
}

/// Every artifact under `<workdir>/checkers`, sorted by id.
pub fn load_all_artifacts(workdir: &Path) -> Result<Vec<CheckerArtifact>> {
    let root = workdir.join("checkers");
    if !root.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids: Vec<String> = std::fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("meta.json").is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids.iter().map(|id| load_artifact(workdir, id)).collect()
}
