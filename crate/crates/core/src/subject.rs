//! Static model of the subject project: source files, methods, tests,
//! imports and the subject methods each test calls.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rustpython_parser::ast::{self, Expr, Stmt};
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::config::{ProjectConfig, ASSERT_STATEMENT};
use crate::error::{read_to_string, Error, Result};
use crate::pyast::{self, ParsedFile, Visitor};
use crate::signature::Signature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Instance,
    Static,
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodInfo {
    pub signature: Signature,
    /// Path relative to the project root.
    pub file: PathBuf,
    /// Byte range of the definition, decorators excluded.
    pub span: Range<usize>,
    pub body: String,
    pub is_constructor: bool,
    pub kind: MethodKind,
    pub min_arity: usize,
    /// `None` when the method takes `*args` or `**kwargs`.
    pub max_arity: Option<usize>,
}

impl MethodInfo {
    pub fn accepts(&self, arity: usize, open_ended: bool) -> bool {
        let fits_max = self.max_arity.is_none_or(|m| arity <= m);
        if open_ended {
            fits_max
        } else {
            arity >= self.min_arity && fits_max
        }
    }
}

/// A resolved call inside a test body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSite {
    /// 1-based line within the test body.
    pub line: usize,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub file: PathBuf,
    pub name: String,
    pub body: String,
    pub imports: Vec<String>,
    pub sut_calls: Vec<Signature>,
    #[serde(default)]
    pub call_sites: Vec<CallSite>,
    pub assertion_count: usize,
    pub token_estimate: usize,
}

impl TestCase {
    pub fn declaring_types(&self) -> BTreeSet<String> {
        self.sut_calls.iter().map(Signature::declaring_type).collect()
    }
}

/// A discovered test before call resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTest {
    pub id: String,
    pub file: PathBuf,
    pub name: String,
    pub class: Option<String>,
    pub body: String,
    pub imports: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub case: TestCase,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SubjectProject {
    pub root: PathBuf,
    pub config: ProjectConfig,
    pub method_index: BTreeMap<String, MethodInfo>,
    pub warnings: Vec<String>,
}

/// `ceil(chars / 4)`
pub fn token_estimate(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

fn sorted_py_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x == "py"))
        .filter(|p| !p.components().any(|c| c.as_os_str() == "__pycache__"))
        .collect();
    files.sort();
    files
}

pub(crate) fn module_name(source_dir: &Path, file: &Path) -> Option<String> {
    let rel = file.strip_prefix(source_dir).ok()?;
    let mut parts: Vec<String> = rel
        .iter()
        .map(|c| c.to_string_lossy().into_owned())
        .collect();
    let last = parts.pop()?;
    let stem = last.strip_suffix(".py")?;
    if stem != "__init__" {
        parts.push(stem.to_string());
    }
    if parts.is_empty() || !parts.iter().all(|p| crate::signature::is_identifier(p)) {
        return None;
    }
    Some(parts.join("."))
}

/// Simple name of a parameter annotation; `object` when absent or opaque.
fn annotation_name(annotation: Option<&Expr>) -> String {
    fn name_of(e: &Expr) -> Option<String> {
        match e {
            Expr::Name(n) => Some(n.id.to_string()),
            Expr::Attribute(a) => Some(a.attr.to_string()),
            Expr::Subscript(s) => name_of(&s.value),
            Expr::Constant(_) => pyast::string_constant(e)
                .map(|s| s.rsplit('.').next().unwrap_or(s).trim().to_string())
                .filter(|s| crate::signature::is_identifier(s)),
            _ => None,
        }
    }
    annotation.and_then(name_of).unwrap_or_else(|| "object".into())
}

fn decorator_names(decorators: &[Expr]) -> Vec<String> {
    decorators
        .iter()
        .filter_map(|d| match d {
            Expr::Name(n) => Some(n.id.to_string()),
            Expr::Attribute(a) => Some(a.attr.to_string()),
            _ => None,
        })
        .collect()
}

/// Function definitions as seen by the indexer, sync or async.
pub(crate) struct FnView<'a> {
    pub name: &'a str,
    pub args: &'a ast::Arguments,
    pub body: &'a [Stmt],
    pub decorators: &'a [Expr],
    pub returns: Option<&'a Expr>,
    pub is_async: bool,
    pub stmt: &'a Stmt,
}

pub(crate) fn fn_view(stmt: &Stmt) -> Option<FnView<'_>> {
    match stmt {
        Stmt::FunctionDef(f) => Some(FnView {
            name: f.name.as_str(),
            args: &f.args,
            body: &f.body,
            decorators: &f.decorator_list,
            returns: f.returns.as_deref(),
            is_async: false,
            stmt,
        }),
        Stmt::AsyncFunctionDef(f) => Some(FnView {
            name: f.name.as_str(),
            args: &f.args,
            body: &f.body,
            decorators: &f.decorator_list,
            returns: f.returns.as_deref(),
            is_async: true,
            stmt,
        }),
        _ => None,
    }
}

impl FnView<'_> {
    pub fn kind(&self) -> MethodKind {
        let decos = decorator_names(self.decorators);
        if decos.iter().any(|d| d == "staticmethod") {
            MethodKind::Static
        } else if decos.iter().any(|d| d == "classmethod") {
            MethodKind::Class
        } else {
            MethodKind::Instance
        }
    }

    /// Parameters after the receiver, in declaration order (positional,
    /// then keyword-only).
    pub fn declared_params(&self) -> Vec<&ast::ArgWithDefault> {
        let skip = usize::from(self.kind() != MethodKind::Static);
        self.args
            .posonlyargs
            .iter()
            .chain(&self.args.args)
            .skip(skip)
            .chain(&self.args.kwonlyargs)
            .collect()
    }

    /// Canonical signature of this function as a method of `module.class`.
    pub fn signature(&self, module: &str, class: &str) -> Signature {
        Signature::new(
            module,
            class,
            self.name,
            self.declared_params()
                .iter()
                .map(|p| annotation_name(p.def.annotation.as_deref()))
                .collect(),
        )
    }

    /// Byte span from `def`/`async def` to the end, decorators excluded.
    pub fn def_span(&self, file: &ParsedFile) -> Range<usize> {
        let full = pyast::span(self.stmt);
        let start = match self.decorators.last() {
            None => full.start,
            Some(last) => {
                // first `def`/`async` after the last decorator's line
                let after = file.line_end_after(pyast::span(last).end);
                let rest = &file.text[after..full.end];
                let off = rest
                    .find(if self.is_async { "async" } else { "def" })
                    .unwrap_or(0);
                after + off
            }
        };
        start..full.end
    }
}

impl SubjectProject {
    pub fn scan(root: &Path, config: ProjectConfig) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::MissingRoot(root.to_path_buf()));
        }
        let mut method_index = BTreeMap::new();
        let mut warnings = Vec::new();
        let mut parsed_files = 0usize;
        for dir in &config.source_dirs {
            let abs_dir = root.join(dir);
            for file in sorted_py_files(&abs_dir) {
                let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
                let Some(module) = module_name(&abs_dir, &file) else {
                    warnings.push(format!("{}: not an importable module path", rel.display()));
                    continue;
                };
                let text = read_to_string(&file)?;
                let parsed = match ParsedFile::parse(text, &rel.to_string_lossy()) {
                    Ok(p) => p,
                    Err(e) => {
                        warn!("{e}");
                        warnings.push(e.to_string());
                        continue;
                    }
                };
                parsed_files += 1;
                index_file(&parsed, &module, &rel, &mut method_index, &mut warnings);
            }
        }
        if parsed_files == 0 {
            return Err(Error::NoSources(root.to_path_buf()));
        }
        Ok(SubjectProject {
            root: root.to_path_buf(),
            config,
            method_index,
            warnings,
        })
    }

    pub fn method(&self, sig: &Signature) -> Option<&MethodInfo> {
        self.method_index.get(&sig.to_string())
    }

    pub fn contains(&self, sig: &str) -> bool {
        self.method_index.contains_key(sig)
    }

    /// Fully-qualified names of all indexed types.
    pub fn types(&self) -> BTreeSet<String> {
        self.method_index
            .values()
            .map(|m| m.signature.declaring_type())
            .collect()
    }

    /// Test files under the configured test directories, sorted.
    pub fn test_files(&self) -> Vec<PathBuf> {
        self.config
            .test_dirs
            .iter()
            .flat_map(|d| sorted_py_files(&self.root.join(d)))
            .filter(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
                name.starts_with("test_") || name.ends_with("_test.py")
            })
            .collect()
    }

    /// Discovers tests in file order: module-level `test*` functions and
    /// `test*` methods of `Test*` classes.
    pub fn discover_tests(&self) -> Result<Vec<RawTest>> {
        let mut tests = Vec::new();
        for file in self.test_files() {
            let rel = file.strip_prefix(&self.root).unwrap_or(&file).to_path_buf();
            let rel_str = rel.to_string_lossy().replace('\\', "/");
            let text = read_to_string(&file)?;
            let parsed = match ParsedFile::parse(text, &rel_str) {
                Ok(p) => p,
                Err(e) => {
                    warn!("skipping unparseable test file: {e}");
                    continue;
                }
            };
            let imports = imports_of(&parsed);
            let mut push = |class: Option<&str>, f: &FnView<'_>| {
                let span = f.def_span(&parsed);
                let id = match class {
                    Some(c) => format!("{rel_str}::{c}::{}", f.name),
                    None => format!("{rel_str}::{}", f.name),
                };
                tests.push(RawTest {
                    id,
                    file: rel.clone(),
                    name: f.name.to_string(),
                    class: class.map(str::to_string),
                    body: dedent_def(&parsed, span),
                    imports: imports.clone(),
                });
            };
            for stmt in &parsed.suite {
                if let Some(f) = fn_view(stmt) {
                    if f.name.starts_with("test") {
                        push(None, &f);
                    }
                } else if let Stmt::ClassDef(c) = stmt {
                    if !c.name.as_str().starts_with("Test") {
                        continue;
                    }
                    for inner in &c.body {
                        if let Some(f) = fn_view(inner) {
                            if f.name.starts_with("test") {
                                push(Some(c.name.as_str()), &f);
                            }
                        }
                    }
                }
            }
        }
        Ok(tests)
    }

    /// Discovers and resolves every test. Warnings are logged.
    pub fn test_cases(&self) -> Result<Vec<TestCase>> {
        self.discover_tests()?
            .iter()
            .map(|raw| resolve_test_calls(self, raw).map(|r| r.case))
            .collect()
    }
}

/// Text of a definition with the first line's indentation removed from
/// every line that carries it.
fn dedent_def(file: &ParsedFile, span: Range<usize>) -> String {
    let line_start = file.line_start(file.line_of(span.start));
    let indent = &file.text[line_start..span.start];
    let text = &file.text[span];
    if indent.is_empty() {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i == 0 {
            out.push_str(line);
        } else {
            out.push_str(line.strip_prefix(indent).unwrap_or(line));
        }
    }
    out
}

fn index_file(
    file: &ParsedFile,
    module: &str,
    rel: &Path,
    index: &mut BTreeMap<String, MethodInfo>,
    warnings: &mut Vec<String>,
) {
    for stmt in &file.suite {
        let Stmt::ClassDef(class) = stmt else { continue };
        for member in &class.body {
            let Some(f) = fn_view(member) else { continue };
            let params = f.declared_params();
            let sig = f.signature(module, class.name.as_str());
            let open = f.args.vararg.is_some() || f.args.kwarg.is_some();
            let span = f.def_span(file);
            let info = MethodInfo {
                is_constructor: sig.is_constructor(),
                kind: f.kind(),
                min_arity: params.iter().filter(|p| p.default.is_none()).count(),
                max_arity: (!open).then_some(params.len()),
                body: file.text[span.clone()].to_string(),
                file: rel.to_path_buf(),
                span,
                signature: sig.clone(),
            };
            let key = sig.to_string();
            if index.contains_key(&key) {
                warnings.push(format!("duplicate signature {key}; keeping the first definition"));
                continue;
            }
            index.insert(key, info);
        }
    }
}

fn imports_of(file: &ParsedFile) -> Vec<String> {
    file.suite
        .iter()
        .filter(|s| matches!(s, Stmt::Import(_) | Stmt::ImportFrom(_)))
        .map(|s| file.slice(pyast::span(s)).to_string())
        .collect()
}

/// Top-level import statements of a file, verbatim and in file order.
pub fn extract_imports(path: &Path) -> Result<Vec<String>> {
    let text = read_to_string(path)?;
    let parsed = ParsedFile::parse(text, &path.to_string_lossy())?;
    Ok(imports_of(&parsed))
}

struct CallCollector<'a, 'p> {
    project: &'p SubjectProject,
    types: BTreeSet<&'p str>,
    file: &'a ParsedFile,
    assert_names: BTreeSet<&'p str>,
    count_assert_stmt: bool,
    assertion_count: usize,
    sites: Vec<CallSite>,
    warnings: Vec<String>,
}

impl<'a> Visitor<'a> for CallCollector<'a, '_> {
    fn stmt(&mut self, stmt: &'a Stmt) -> bool {
        if self.count_assert_stmt && matches!(stmt, Stmt::Assert(_)) {
            self.assertion_count += 1;
        }
        true
    }

    fn expr(&mut self, expr: &'a Expr) {
        let Expr::Call(call) = expr else { return };
        let Some(name) = pyast::callee_name(&call.func) else { return };
        if self.assert_names.contains(name) {
            self.assertion_count += 1;
        }
        let open = call.args.iter().any(|a| matches!(a, Expr::Starred(_)))
            || call.keywords.iter().any(|k| k.arg.is_none());
        let arity = call.args.iter().filter(|a| !matches!(a, Expr::Starred(_))).count()
            + call.keywords.iter().filter(|k| k.arg.is_some()).count();
        let is_type_call = matches!(&*call.func, Expr::Name(_)) && self.types.contains(name);
        let candidates: Vec<&MethodInfo> = self
            .project
            .method_index
            .values()
            .filter(|m| {
                if is_type_call {
                    m.is_constructor && m.signature.type_name == name
                } else {
                    !m.is_constructor && m.signature.method == name
                }
            })
            .filter(|m| m.accepts(arity, open))
            .collect();
        let line = self.file.line_of(pyast::span(expr).start);
        match candidates.as_slice() {
            [one] => self.sites.push(CallSite {
                line,
                signature: one.signature.clone(),
            }),
            [] => debug!("line {line}: call to `{name}` does not resolve to a subject method"),
            many => {
                let names: Vec<String> = many.iter().map(|m| m.signature.to_string()).collect();
                let msg = format!(
                    "line {line}: ambiguous call to `{name}` with {arity} argument(s): {}",
                    names.join(", ")
                );
                warn!("{msg}");
                self.warnings.push(msg);
            }
        }
    }
}

/// Resolves the subject methods a test calls by simple name and arity.
pub fn resolve_test_calls(project: &SubjectProject, test: &RawTest) -> Result<Resolved> {
    let parsed = ParsedFile::parse(test.body.clone(), &test.id)?;
    let types = project
        .method_index
        .values()
        .map(|m| m.signature.type_name.as_str())
        .collect();
    let mut collector = CallCollector {
        project,
        types,
        file: &parsed,
        assert_names: project
            .config
            .assertion_names
            .iter()
            .map(String::as_str)
            .filter(|n| *n != ASSERT_STATEMENT)
            .collect(),
        count_assert_stmt: project.config.counts_assert_statements(),
        assertion_count: 0,
        sites: Vec::new(),
        warnings: Vec::new(),
    };
    // Walk the body only, so the test's own decorators are ignored.
    for stmt in &parsed.suite {
        if let Some(f) = fn_view(stmt) {
            pyast::walk_body(f.body, &mut collector);
        } else {
            pyast::walk_stmt(stmt, &mut collector);
        }
    }
    let mut sut_calls: Vec<Signature> = Vec::new();
    for site in &collector.sites {
        if !sut_calls.contains(&site.signature) {
            sut_calls.push(site.signature.clone());
        }
    }
    Ok(Resolved {
        case: TestCase {
            id: test.id.clone(),
            file: test.file.clone(),
            name: test.name.clone(),
            imports: test.imports.clone(),
            token_estimate: token_estimate(&test.body),
            body: test.body.clone(),
            sut_calls,
            call_sites: collector.sites,
            assertion_count: collector.assertion_count,
        },
        warnings: collector.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ProjectConfig {
        ProjectConfig::from_json(
            r#"{"source_dirs":["src"],"test_dirs":["tests"],"test_runner":"pytest {TESTS}","assertion_names":["assert","assertEquals"]}"#,
        )
        .unwrap()
    }

    fn project_with(files: &[(&str, &str)]) -> (tempfile::TempDir, SubjectProject) {
        let dir = tempfile::tempdir().unwrap();
        for (path, text) in files {
            crate::error::write(&dir.path().join(path), text).unwrap();
        }
        let p = SubjectProject::scan(dir.path(), cfg()).unwrap();
        (dir, p)
    }

    #[test]
    fn empty_directory_has_no_sources() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("src")).unwrap();
        let err = SubjectProject::scan(dir.path(), cfg()).unwrap_err();
        assert!(err.to_string().contains("zero parseable source files"));
    }

    #[test]
    fn missing_root() {
        let err = SubjectProject::scan(Path::new("/nonexistent/fc"), cfg()).unwrap_err();
        assert!(matches!(err, Error::MissingRoot(_)));
    }

    #[test]
    fn one_file_two_methods() {
        let (_d, p) = project_with(&[(
            "src/m.py",
            "class A:\n    def f(self, x: int):\n        pass\n    @staticmethod\n    def g(y, z=1):\n        pass\n",
        )]);
        assert_eq!(p.method_index.len(), 2);
        let g = &p.method_index["m.A.g(object,object)"];
        assert_eq!(g.kind, MethodKind::Static);
        assert_eq!((g.min_arity, g.max_arity), (1, Some(2)));
        assert!(p.method_index.contains_key("m.A.f(int)"));
    }

    #[test]
    fn unparseable_file_is_a_warning() {
        let (_d, p) = project_with(&[
            ("src/ok.py", "class A:\n    def f(self):\n        pass\n"),
            ("src/bad.py", "class B(:\n"),
        ]);
        assert_eq!(p.method_index.len(), 1);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn span_addresses_the_definition() {
        let src = "class A:\n    @property\n    def f(self) -> int:\n        return 1\n";
        let (_d, p) = project_with(&[("src/pkg/__init__.py", src)]);
        let m = &p.method_index["pkg.A.f()"];
        assert_eq!(&src[m.span.clone()], "def f(self) -> int:\n        return 1");
        assert_eq!(m.body, "def f(self) -> int:\n        return 1");
    }

    #[test]
    fn ambiguous_call_is_omitted_with_one_warning() {
        let (_d, p) = project_with(&[
            (
                "src/m.py",
                "class A:\n    def put(self, k):\n        pass\nclass B:\n    def put(self, k):\n        pass\n    def only(self):\n        pass\n",
            ),
            (
                "tests/test_m.py",
                "from m import A, B\n\ndef test_x():\n    b = B()\n    b.put(1)\n    b.only()\n    assert True\n",
            ),
        ]);
        let raw = p.discover_tests().unwrap();
        assert_eq!(raw.len(), 1);
        let r = resolve_test_calls(&p, &raw[0]).unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.case.sut_calls, vec!["m.B.only()".parse::<Signature>().unwrap()]);
        assert_eq!(r.case.assertion_count, 1);
    }

    #[test]
    fn stdlib_only_test_has_no_sut_calls() {
        let (_d, p) = project_with(&[
            ("src/m.py", "class A:\n    def f(self):\n        pass\n"),
            (
                "tests/test_std.py",
                "import os\n\nclass TestStd:\n    def test_join(self):\n        assertEquals(os.path.join('a', 'b'), 'a/b')\n",
            ),
        ]);
        let cases = p.test_cases().unwrap();
        assert_eq!(cases[0].id, "tests/test_std.py::TestStd::test_join");
        assert!(cases[0].sut_calls.is_empty());
        assert_eq!(cases[0].assertion_count, 1);
        assert!(cases[0].body.starts_with("def test_join(self):\n    assertEquals"));
    }

    #[test]
    fn imports_in_order_with_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("t.py");
        std::fs::write(&f, "import os\nfrom a import (b,\n    c)\nimport os\nx = 1\n").unwrap();
        assert_eq!(
            extract_imports(&f).unwrap(),
            vec!["import os", "from a import (b,\n    c)", "import os"]
        );
        std::fs::write(&f, "x = 1\n").unwrap();
        assert!(extract_imports(&f).unwrap().is_empty());
    }

    #[test]
    fn token_estimate_is_ceiling_of_quarter() {
        assert_eq!(token_estimate(""), 0);
        assert_eq!(token_estimate("a"), 1);
        assert_eq!(token_estimate("abcd"), 1);
        assert_eq!(token_estimate("abcde"), 2);
    }
}
