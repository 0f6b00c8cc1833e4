//! Source-to-source instrumentation. Each targeted method keeps its
//! declaration; its body moves into an inner function whose result is
//! captured, and an epilogue that always runs hands an `Operation` record
//! to the chained checkers. The runtime shim and the scaffolded checker
//! modules are emitted under `<output_root>/fc_runtime/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::path::{Path, PathBuf};

use rustpython_parser::ast::{Expr, Stmt};
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::config::OnViolation;
use crate::error::{read_to_string, write, Error, Result};
use crate::fsutil;
use crate::pipeline::{scaffold, CheckerArtifact};
use crate::pyast::{self, ParsedFile};
use crate::signature::Signature;
use crate::subject::{fn_view, module_name, FnView, MethodKind, SubjectProject};

/// First line of every rewritten file.
pub const MARKER: &str = "# fc-instrumented";
pub const SHIM_IMPORT: &str = "import fc_runtime as _fc_rt";
pub const SHIM_DIR: &str = "fc_runtime";

const SHIM_SOURCE: &str = include_str!("../shim/fc_runtime.py");

/// Which checkers run after which methods.
#[derive(Debug, Clone, Default)]
pub struct InstrumentationPlan {
    pub checkers: Vec<CheckerArtifact>,
    /// Canonical signature → checker ids, sorted.
    pub targets: BTreeMap<String, Vec<String>>,
    pub output_root: PathBuf,
    pub on_violation: OnViolation,
}

impl InstrumentationPlan {
    pub fn new(checkers: Vec<CheckerArtifact>, output_root: impl Into<PathBuf>) -> Self {
        let mut targets: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for c in &checkers {
            for sig in c.targets() {
                targets.entry(sig.to_string()).or_default().push(c.id.clone());
            }
        }
        for ids in targets.values_mut() {
            ids.sort();
            ids.dedup();
        }
        InstrumentationPlan {
            checkers,
            targets,
            output_root: output_root.into(),
            on_violation: OnViolation::default(),
        }
    }

    pub fn with_on_violation(mut self, mode: OnViolation) -> Self {
        self.on_violation = mode;
        self
    }
}

/// Methods wrapped per file (relative path).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentReport {
    pub wrapped: BTreeMap<String, Vec<String>>,
}

impl InstrumentReport {
    pub fn wrapped_count(&self) -> usize {
        self.wrapped.values().map(Vec::len).sum()
    }
}

fn is_docstring(stmt: &Stmt) -> bool {
    matches!(stmt, Stmt::Expr(e) if pyast::string_constant(&e.value).is_some())
}

fn is_future_import(stmt: &Stmt) -> bool {
    matches!(stmt, Stmt::ImportFrom(i) if i.module.as_deref() == Some("__future__"))
}

/// Byte offset where the shim import goes: after a module docstring and
/// any `__future__` imports.
fn import_offset(file: &ParsedFile) -> usize {
    let mut after = 0;
    for (i, stmt) in file.suite.iter().enumerate() {
        if (i == 0 && is_docstring(stmt)) || is_future_import(stmt) {
            after = file.line_end_after(pyast::span(stmt).end.saturating_sub(1));
        } else {
            break;
        }
    }
    after
}

fn leading_ws(line: &str) -> &str {
    &line[..line.len() - line.trim_start().len()]
}

/// Parameter list of the inner function and the matching call arguments.
fn relay_params(f: &FnView<'_>) -> (String, String) {
    let a = f.args;
    let mut params = Vec::new();
    let mut call = Vec::new();
    for p in a.posonlyargs.iter().chain(&a.args) {
        params.push(p.def.arg.to_string());
        call.push(p.def.arg.to_string());
    }
    if let Some(v) = &a.vararg {
        params.push(format!("*{}", v.arg));
        call.push(format!("*{}", v.arg));
    } else if !a.kwonlyargs.is_empty() {
        params.push("*".into());
    }
    for p in &a.kwonlyargs {
        params.push(p.def.arg.to_string());
        call.push(format!("{0}={0}", p.def.arg));
    }
    if let Some(k) = &a.kwarg {
        params.push(format!("**{}", k.arg));
        call.push(format!("**{}", k.arg));
    }
    (params.join(", "), call.join(", "))
}

fn py_str(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Rewrites one method. Returns the byte range to replace and its text.
fn wrap_method(
    file: &ParsedFile,
    f: &FnView<'_>,
    sig: &Signature,
    ids: &[String],
) -> Result<(std::ops::Range<usize>, String)> {
    if pyast::is_generator(f.body) {
        return Err(Error::Instrument(format!("{sig}: generator methods are not supported")));
    }
    let def_start = f.def_span(file).start;
    let def_line = file.line_of(def_start);
    let def_indent = leading_ws(file.line_text(def_line)).to_string();
    let first = &f.body[0];
    let first_start = pyast::span(first).start;
    let last_end = pyast::span(f.body.last().expect("non-empty body")).end;
    let on_own_line = file.line_of(first_start) != def_line
        && file.text[file.line_start(file.line_of(first_start))..first_start].trim().is_empty();
    let indent = if on_own_line {
        leading_ws(file.line_text(file.line_of(first_start))).to_string()
    } else {
        format!("{def_indent}    ")
    };
    let inner = format!("{indent}    ");

    // Replace from the start of the first body line (or right after the
    // colon of a one-line definition) through the end of the last line.
    let replace_start = if on_own_line {
        file.line_start(file.line_of(first_start))
    } else {
        first_start
    };
    let replace_end = file.line_end_after(last_end.saturating_sub(1).max(first_start));

    let mut out = String::new();
    if !on_own_line {
        out.push('\n');
    }
    let relocated = if is_docstring(first) {
        out.push_str(&pyast::reindent_block(file, first_start..pyast::span(first).end, &indent));
        f.body.get(1)
    } else {
        Some(first)
    };
    let (params, call) = relay_params(f);
    let kw = if f.is_async { "async def" } else { "def" };
    let _ = writeln!(out, "{indent}{kw} _fc_body({params}):");
    match relocated {
        Some(stmt) => {
            out.push_str(&pyast::reindent_block(file, pyast::span(stmt).start..last_end, &inner))
        }
        None => {
            let _ = writeln!(out, "{inner}pass");
        }
    }
    let kind = f.kind();
    let declared: Vec<String> = f.declared_params().iter().map(|p| p.def.arg.to_string()).collect();
    let base = match kind {
        MethodKind::Instance => f
            .args
            .posonlyargs
            .iter()
            .chain(&f.args.args)
            .next()
            .map(|p| p.def.arg.to_string())
            .ok_or_else(|| Error::Instrument(format!("{sig}: instance method without receiver")))?,
        MethodKind::Static | MethodKind::Class => "_fc_rt.ABSENT".into(),
    };
    let ret = if sig.is_constructor() { "_fc_rt.ABSENT" } else { "_fc_ret" };
    let ids_tuple = match ids {
        [one] => format!("({},)", py_str(one)),
        many => format!("({})", many.iter().map(|i| py_str(i)).collect::<Vec<_>>().join(", ")),
    };
    let awaited = if f.is_async { "await " } else { "" };
    let _ = writeln!(out, "{indent}_fc_ret = _fc_rt.ABSENT");
    let _ = writeln!(out, "{indent}try:");
    let _ = writeln!(out, "{inner}_fc_ret = {awaited}_fc_body({call})");
    let _ = writeln!(out, "{indent}finally:");
    let _ = writeln!(
        out,
        "{inner}_fc_rt.dispatch(_fc_rt.Operation({}, {base}, [{}], {ret}), {ids_tuple})",
        py_str(&sig.to_string()),
        declared.join(", ")
    );
    let _ = writeln!(out, "{indent}return _fc_ret");
    Ok((replace_start..replace_end, out))
}

/// Instruments one module's source text. `targets` maps signatures of
/// methods declared in this module to their checker ids. Returns the new
/// text and the signatures actually wrapped; errors when a target is not
/// declared in the module.
pub fn instrument_source(
    text: &str,
    module: &str,
    path_label: &str,
    targets: &BTreeMap<Signature, Vec<String>>,
) -> Result<(String, Vec<Signature>)> {
    let file = ParsedFile::parse(text, path_label)?;
    if file.text.starts_with(MARKER) {
        return Err(Error::Instrument(format!("{path_label} is already instrumented")));
    }
    if targets.is_empty() {
        return Ok((text.to_string(), Vec::new()));
    }
    let mut edits = Vec::new();
    let mut wrapped = Vec::new();
    for stmt in &file.suite {
        let Stmt::ClassDef(class) = stmt else { continue };
        for member in &class.body {
            let Some(f) = fn_view(member) else { continue };
            let sig = f.signature(module, class.name.as_str());
            if let Some(ids) = targets.get(&sig) {
                if wrapped.contains(&sig) {
                    continue;
                }
                edits.push(wrap_method(&file, &f, &sig, ids)?);
                wrapped.push(sig);
            }
        }
    }
    let missing: Vec<String> = targets
        .keys()
        .filter(|s| !wrapped.contains(s))
        .map(Signature::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Instrument(format!(
            "{path_label}: targeted methods not found: {}",
            missing.join(", ")
        )));
    }
    let at = import_offset(&file);
    edits.push((at..at, format!("{SHIM_IMPORT}\n")));
    edits.sort_by_key(|(r, _)| (r.start, r.end));
    let mut out = format!("{MARKER}\n");
    let mut pos = 0;
    for (range, replacement) in edits {
        out.push_str(&text[pos..range.start]);
        // An import inserted at the very end of a file lacking a final newline.
        if range.start == text.len() && !out.ends_with('\n') {
            out.push('\n');
        }
        out.push_str(&replacement);
        pos = range.end;
    }
    out.push_str(&text[pos..]);
    ParsedFile::parse(out.as_str(), path_label)
        .map_err(|e| Error::Instrument(format!("rewritten {path_label} does not parse: {e}")))?;
    wrapped.sort();
    Ok((out, wrapped))
}

/// Writes the runtime shim, settings and scaffolded checkers under `root`.
pub fn emit_shim(root: &Path, checkers: &[CheckerArtifact], mode: OnViolation) -> Result<Vec<PathBuf>> {
    let dir = root.join(SHIM_DIR);
    let mut files = vec![
        (dir.join("__init__.py"), SHIM_SOURCE.to_string()),
        (
            dir.join("_settings.py"),
            format!("ON_VIOLATION = \"{}\"\n", mode.as_str()),
        ),
        (dir.join("checkers").join("__init__.py"), String::new()),
    ];
    for c in checkers {
        files.push((dir.join("checkers").join(format!("{}.py", c.id)), scaffold(c)?));
    }
    for (path, text) in &files {
        write(path, text)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

fn check_not_instrumented(project: &SubjectProject) -> Result<()> {
    for dir in &project.config.source_dirs {
        for entry in walkdir::WalkDir::new(project.root.join(dir)).into_iter().flatten() {
            if entry.path().extension().is_some_and(|x| x == "py") {
                let text = read_to_string(entry.path())?;
                if text.starts_with(MARKER) {
                    return Err(Error::Instrument(format!(
                        "{} is already instrumented",
                        entry.path().display()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Copies the project to `plan.output_root` and instruments the copy.
pub fn instrument(project: &SubjectProject, plan: &InstrumentationPlan) -> Result<InstrumentReport> {
    let out = &plan.output_root;
    if !fsutil::is_empty_dir(out) {
        return Err(Error::Instrument(format!("output root {} is not empty", out.display())));
    }
    check_not_instrumented(project)?;
    let mut per_file: BTreeMap<PathBuf, BTreeMap<Signature, Vec<String>>> = BTreeMap::new();
    for (sig, ids) in &plan.targets {
        let info = project.method_index.get(sig).ok_or_else(|| {
            Error::Instrument(format!("targeted method {sig} is not in the subject"))
        })?;
        per_file
            .entry(info.file.clone())
            .or_default()
            .insert(info.signature.clone(), ids.clone());
    }
    let skip: Vec<&Path> = match out.strip_prefix(&project.root) {
        Ok(rel) if !rel.as_os_str().is_empty() => vec![rel],
        _ => vec![],
    };
    fsutil::copy_tree(&project.root, out, &skip)?;
    let mut report = InstrumentReport::default();
    for (rel, targets) in &per_file {
        let module = module_of(project, rel)
            .ok_or_else(|| Error::Instrument(format!("{} is not a module", rel.display())))?;
        let label = rel.to_string_lossy().replace('\\', "/");
        let text = read_to_string(&project.root.join(rel))?;
        let (new_text, wrapped) = instrument_source(&text, &module, &label, targets)?;
        write(&out.join(rel), new_text)?;
        debug!(file = %label, count = wrapped.len(), "instrumented");
        report
            .wrapped
            .insert(label, wrapped.iter().map(Signature::to_string).collect());
    }
    emit_shim(out, &plan.checkers, plan.on_violation)?;
    Ok(report)
}

/// Module name of a file relative to the project root.
pub fn module_of(project: &SubjectProject, rel: &Path) -> Option<String> {
    project.config.source_dirs.iter().find_map(|d| {
        let abs = project.root.join(d);
        module_name(&abs, &project.root.join(rel))
    })
}

/// Outcome of comparing an instrumented tree with its original.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffReport {
    /// Wrapped signatures per file.
    pub wrapped: BTreeMap<String, Vec<String>>,
    /// Emitted shim files, relative to the instrumented root.
    pub shim_files: Vec<String>,
    /// Human-readable descriptions of unexpected differences.
    pub corruption: Vec<String>,
}

impl DiffReport {
    pub fn is_corrupted(&self) -> bool {
        !self.corruption.is_empty()
    }

    pub fn wrapped_count(&self) -> usize {
        self.wrapped.values().map(Vec::len).sum()
    }
}

/// Dispatch calls found in an instrumented module: signature → ids.
fn find_dispatches(file: &ParsedFile) -> BTreeMap<Signature, Vec<String>> {
    struct Finder(BTreeMap<Signature, Vec<String>>);
    impl<'a> pyast::Visitor<'a> for Finder {
        fn expr(&mut self, e: &'a Expr) {
            let Expr::Call(call) = e else { return };
            let Expr::Attribute(attr) = &*call.func else { return };
            if attr.attr.as_str() != "dispatch"
                || !matches!(&*attr.value, Expr::Name(n) if n.id.as_str() == "_fc_rt")
            {
                return;
            }
            let [Expr::Call(op), ids] = call.args.as_slice() else { return };
            let Some(sig) = op.args.first().and_then(pyast::string_constant) else { return };
            let Ok(sig) = sig.parse::<Signature>() else { return };
            let ids = match ids {
                Expr::Tuple(t) => t
                    .elts
                    .iter()
                    .filter_map(pyast::string_constant)
                    .map(str::to_string)
                    .collect(),
                _ => Vec::new(),
            };
            self.0.insert(sig, ids);
        }
    }
    let mut finder = Finder(BTreeMap::new());
    pyast::walk_body(&file.suite, &mut finder);
    finder.0
}

/// Method definitions of a module keyed by signature, with their text.
fn method_texts(file: &ParsedFile, module: &str) -> BTreeMap<Signature, String> {
    let mut out = BTreeMap::new();
    for stmt in &file.suite {
        let Stmt::ClassDef(class) = stmt else { continue };
        for member in &class.body {
            if let Some(f) = fn_view(member) {
                let sig = f.signature(module, class.name.as_str());
                out.entry(sig).or_insert_with(|| file.slice(f.def_span(file)).to_string());
            }
        }
    }
    out
}

/// Compares an instrumented tree against its original: every difference
/// must be explained by re-instrumenting the original with the wrapped
/// methods found in the instrumented files.
pub fn uninstrument_diff(project: &SubjectProject, instrumented: &Path) -> Result<DiffReport> {
    let original = &project.root;
    let mut report = DiffReport::default();
    let orig_files: BTreeSet<PathBuf> = fsutil::list_files(original)?
        .into_iter()
        .filter(|p| !instrumented.starts_with(original.join(p.iter().next().unwrap_or_default())))
        .collect();
    let inst_files = fsutil::list_files(instrumented)?;
    for rel in &inst_files {
        let label = rel.to_string_lossy().replace('\\', "/");
        if rel.starts_with(SHIM_DIR) {
            report.shim_files.push(label);
            continue;
        }
        if !orig_files.contains(rel) {
            report.corruption.push(format!("{label}: not present in the original tree"));
            continue;
        }
        let before = std::fs::read(original.join(rel)).map_err(|e| Error::io(original.join(rel), e))?;
        let after = std::fs::read(instrumented.join(rel)).map_err(|e| Error::io(instrumented.join(rel), e))?;
        if before == after {
            continue;
        }
        let after_text = String::from_utf8_lossy(&after).into_owned();
        let before_text = String::from_utf8_lossy(&before).into_owned();
        if !after_text.starts_with(MARKER) {
            report.corruption.push(format!("{label}: changed without the instrumentation marker"));
            continue;
        }
        let Some(module) = module_of(project, rel) else {
            report.corruption.push(format!("{label}: changed but is not a subject module"));
            continue;
        };
        let parsed_after = match ParsedFile::parse(after_text.as_str(), &label) {
            Ok(p) => p,
            Err(e) => {
                report.corruption.push(format!("{label}: does not parse: {e}"));
                continue;
            }
        };
        let targets = find_dispatches(&parsed_after);
        let expected = match instrument_source(&before_text, &module, &label, &targets) {
            Ok((text, _)) => text,
            Err(e) => {
                report.corruption.push(format!("{label}: cannot re-instrument original: {e}"));
                continue;
            }
        };
        if expected != after_text {
            let want = ParsedFile::parse(expected.as_str(), &label)
                .map(|f| method_texts(&f, &module))
                .unwrap_or_default();
            let got = method_texts(&parsed_after, &module);
            let changed: Vec<String> = want
                .iter()
                .filter(|(sig, text)| got.get(*sig) != Some(*text))
                .map(|(sig, _)| sig.to_string())
                .chain(got.keys().filter(|s| !want.contains_key(*s)).map(Signature::to_string))
                .collect();
            if changed.is_empty() {
                report.corruption.push(format!("{label}: module-level code differs"));
            } else {
                for sig in changed {
                    report.corruption.push(format!("{label}: {sig} differs"));
                }
            }
        }
        report
            .wrapped
            .insert(label, targets.keys().map(Signature::to_string).collect());
    }
    let inst_set: BTreeSet<&PathBuf> = inst_files.iter().collect();
    for rel in &orig_files {
        if !inst_set.contains(rel) {
            report
                .corruption
                .push(format!("{}: missing from the instrumented tree", rel.display()));
        }
    }
    Ok(report)
}
