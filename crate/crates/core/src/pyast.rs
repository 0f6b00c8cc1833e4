//! Thin layer over the Python parser: parsing with byte offsets, line
//! bookkeeping and a by-reference walker over statements and expressions.

use std::ops::Range;

pub use rustpython_parser::ast;
use rustpython_parser::ast::{Constant, Expr, Pattern, Ranged, Stmt};
use rustpython_parser::lexer::lex;
use rustpython_parser::{Mode, Parse, Tok};

use crate::error::{Error, Result};

/// A parsed Python source file.
#[derive(Debug, Clone)]
pub struct ParsedFile {
    pub text: String,
    pub suite: Vec<Stmt>,
    line_starts: Vec<usize>,
}

impl ParsedFile {
    pub fn parse(text: impl Into<String>, path: &str) -> Result<Self> {
        let text = text.into();
        let suite = ast::Suite::parse(&text, path).map_err(|e| Error::Parse {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        let line_starts = line_starts(&text);
        Ok(ParsedFile {
            text,
            suite,
            line_starts,
        })
    }

    /// 1-based line number of a byte offset.
    pub fn line_of(&self, offset: usize) -> usize {
        match self.line_starts.binary_search(&offset) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
    }

    /// Byte offset where a 1-based line starts.
    pub fn line_start(&self, line: usize) -> usize {
        self.line_starts
            .get(line.saturating_sub(1))
            .copied()
            .unwrap_or(self.text.len())
    }

    /// Byte offset just past the end of the line containing `offset`
    /// (including its newline).
    pub fn line_end_after(&self, offset: usize) -> usize {
        let line = self.line_of(offset);
        self.line_start(line + 1)
    }

    pub fn slice(&self, range: Range<usize>) -> &str {
        &self.text[range]
    }

    pub fn line_text(&self, line: usize) -> &str {
        let start = self.line_start(line);
        let end = self.line_start(line + 1);
        self.text[start..end].trim_end_matches(['\n', '\r'])
    }

    /// Byte ranges of string literal tokens; used to avoid re-indenting
    /// lines that live inside multi-line strings.
    pub fn string_token_ranges(&self) -> Vec<Range<usize>> {
        lex(&self.text, Mode::Module)
            .filter_map(|tok| tok.ok())
            .filter(|(tok, _)| matches!(tok, Tok::String { .. }))
            .map(|(_, range)| range.start().to_usize()..range.end().to_usize())
            .collect()
    }
}

fn line_starts(text: &str) -> Vec<usize> {
    let mut starts = vec![0];
    starts.extend(
        text.bytes()
            .enumerate()
            .filter(|(_, b)| *b == b'\n')
            .map(|(i, _)| i + 1),
    );
    starts
}

pub fn span<T: Ranged>(node: &T) -> Range<usize> {
    let r = node.range();
    r.start().to_usize()..r.end().to_usize()
}

/// Name of a call target: `f(...)` → `f`, `a.b.f(...)` → `f`.
pub fn callee_name(func: &Expr) -> Option<&str> {
    match func {
        Expr::Name(n) => Some(n.id.as_str()),
        Expr::Attribute(a) => Some(a.attr.as_str()),
        _ => None,
    }
}

pub fn string_constant(expr: &Expr) -> Option<&str> {
    match expr {
        Expr::Constant(c) => match &c.value {
            Constant::Str(s) => Some(s.as_str()),
            _ => None,
        },
        _ => None,
    }
}

/// Callbacks for [`walk_body`]. Returning `false` from `stmt` skips the
/// statement's children.
pub trait Visitor<'a> {
    fn stmt(&mut self, _stmt: &'a Stmt) -> bool {
        true
    }
    fn expr(&mut self, _expr: &'a Expr) {}
    fn pattern(&mut self, _pattern: &'a Pattern) {}
}

pub fn walk_body<'a, V: Visitor<'a> + ?Sized>(body: &'a [Stmt], v: &mut V) {
    for s in body {
        walk_stmt(s, v);
    }
}

fn walk_opt<'a, V: Visitor<'a> + ?Sized>(e: &'a Option<Box<Expr>>, v: &mut V) {
    if let Some(e) = e {
        walk_expr(e, v);
    }
}

fn walk_exprs<'a, V: Visitor<'a> + ?Sized>(es: &'a [Expr], v: &mut V) {
    for e in es {
        walk_expr(e, v);
    }
}

fn walk_arguments<'a, V: Visitor<'a> + ?Sized>(args: &'a ast::Arguments, v: &mut V) {
    for a in args
        .posonlyargs
        .iter()
        .chain(&args.args)
        .chain(&args.kwonlyargs)
    {
        walk_opt(&a.default, v);
    }
}

pub fn walk_stmt<'a, V: Visitor<'a> + ?Sized>(stmt: &'a Stmt, v: &mut V) {
    if !v.stmt(stmt) {
        return;
    }
    match stmt {
        Stmt::FunctionDef(f) => {
            walk_exprs(&f.decorator_list, v);
            walk_arguments(&f.args, v);
            walk_body(&f.body, v);
        }
        Stmt::AsyncFunctionDef(f) => {
            walk_exprs(&f.decorator_list, v);
            walk_arguments(&f.args, v);
            walk_body(&f.body, v);
        }
        Stmt::ClassDef(c) => {
            walk_exprs(&c.decorator_list, v);
            walk_exprs(&c.bases, v);
            for k in &c.keywords {
                walk_expr(&k.value, v);
            }
            walk_body(&c.body, v);
        }
        Stmt::Return(r) => walk_opt(&r.value, v),
        Stmt::Delete(d) => walk_exprs(&d.targets, v),
        Stmt::Assign(a) => {
            walk_exprs(&a.targets, v);
            walk_expr(&a.value, v);
        }
        Stmt::TypeAlias(t) => walk_expr(&t.value, v),
        Stmt::AugAssign(a) => {
            walk_expr(&a.target, v);
            walk_expr(&a.value, v);
        }
        Stmt::AnnAssign(a) => {
            walk_expr(&a.target, v);
            walk_opt(&a.value, v);
        }
        Stmt::For(f) => {
            walk_expr(&f.target, v);
            walk_expr(&f.iter, v);
            walk_body(&f.body, v);
            walk_body(&f.orelse, v);
        }
        Stmt::AsyncFor(f) => {
            walk_expr(&f.target, v);
            walk_expr(&f.iter, v);
            walk_body(&f.body, v);
            walk_body(&f.orelse, v);
        }
        Stmt::While(w) => {
            walk_expr(&w.test, v);
            walk_body(&w.body, v);
            walk_body(&w.orelse, v);
        }
        Stmt::If(i) => {
            walk_expr(&i.test, v);
            walk_body(&i.body, v);
            walk_body(&i.orelse, v);
        }
        Stmt::With(w) => {
            for item in &w.items {
                walk_expr(&item.context_expr, v);
                walk_opt(&item.optional_vars, v);
            }
            walk_body(&w.body, v);
        }
        Stmt::AsyncWith(w) => {
            for item in &w.items {
                walk_expr(&item.context_expr, v);
                walk_opt(&item.optional_vars, v);
            }
            walk_body(&w.body, v);
        }
        Stmt::Match(m) => {
            walk_expr(&m.subject, v);
            for case in &m.cases {
                walk_pattern(&case.pattern, v);
                walk_opt(&case.guard, v);
                walk_body(&case.body, v);
            }
        }
        Stmt::Raise(r) => {
            walk_opt(&r.exc, v);
            walk_opt(&r.cause, v);
        }
        Stmt::Try(t) => {
            walk_body(&t.body, v);
            for ast::ExceptHandler::ExceptHandler(h) in &t.handlers {
                walk_opt(&h.type_, v);
                walk_body(&h.body, v);
            }
            walk_body(&t.orelse, v);
            walk_body(&t.finalbody, v);
        }
        Stmt::TryStar(t) => {
            walk_body(&t.body, v);
            for ast::ExceptHandler::ExceptHandler(h) in &t.handlers {
                walk_opt(&h.type_, v);
                walk_body(&h.body, v);
            }
            walk_body(&t.orelse, v);
            walk_body(&t.finalbody, v);
        }
        Stmt::Assert(a) => {
            walk_expr(&a.test, v);
            walk_opt(&a.msg, v);
        }
        Stmt::Expr(e) => walk_expr(&e.value, v),
        Stmt::Import(_)
        | Stmt::ImportFrom(_)
        | Stmt::Global(_)
        | Stmt::Nonlocal(_)
        | Stmt::Pass(_)
        | Stmt::Break(_)
        | Stmt::Continue(_) => {}
    }
}

fn walk_pattern<'a, V: Visitor<'a> + ?Sized>(p: &'a Pattern, v: &mut V) {
    v.pattern(p);
    match p {
        Pattern::MatchValue(m) => walk_expr(&m.value, v),
        Pattern::MatchSequence(m) => m.patterns.iter().for_each(|p| walk_pattern(p, v)),
        Pattern::MatchMapping(m) => {
            walk_exprs(&m.keys, v);
            m.patterns.iter().for_each(|p| walk_pattern(p, v));
        }
        Pattern::MatchClass(m) => {
            walk_expr(&m.cls, v);
            m.patterns.iter().for_each(|p| walk_pattern(p, v));
            m.kwd_patterns.iter().for_each(|p| walk_pattern(p, v));
        }
        Pattern::MatchAs(m) => {
            if let Some(p) = &m.pattern {
                walk_pattern(p, v);
            }
        }
        Pattern::MatchOr(m) => m.patterns.iter().for_each(|p| walk_pattern(p, v)),
        Pattern::MatchSingleton(_) | Pattern::MatchStar(_) => {}
    }
}

pub fn walk_expr<'a, V: Visitor<'a> + ?Sized>(expr: &'a Expr, v: &mut V) {
    v.expr(expr);
    match expr {
        Expr::BoolOp(b) => walk_exprs(&b.values, v),
        Expr::NamedExpr(n) => {
            walk_expr(&n.target, v);
            walk_expr(&n.value, v);
        }
        Expr::BinOp(b) => {
            walk_expr(&b.left, v);
            walk_expr(&b.right, v);
        }
        Expr::UnaryOp(u) => walk_expr(&u.operand, v),
        Expr::Lambda(l) => {
            walk_arguments(&l.args, v);
            walk_expr(&l.body, v);
        }
        Expr::IfExp(i) => {
            walk_expr(&i.test, v);
            walk_expr(&i.body, v);
            walk_expr(&i.orelse, v);
        }
        Expr::Dict(d) => {
            for k in d.keys.iter().flatten() {
                walk_expr(k, v);
            }
            walk_exprs(&d.values, v);
        }
        Expr::Set(s) => walk_exprs(&s.elts, v),
        Expr::ListComp(c) => {
            walk_expr(&c.elt, v);
            walk_generators(&c.generators, v);
        }
        Expr::SetComp(c) => {
            walk_expr(&c.elt, v);
            walk_generators(&c.generators, v);
        }
        Expr::DictComp(c) => {
            walk_expr(&c.key, v);
            walk_expr(&c.value, v);
            walk_generators(&c.generators, v);
        }
        Expr::GeneratorExp(c) => {
            walk_expr(&c.elt, v);
            walk_generators(&c.generators, v);
        }
        Expr::Await(a) => walk_expr(&a.value, v),
        Expr::Yield(y) => walk_opt(&y.value, v),
        Expr::YieldFrom(y) => walk_expr(&y.value, v),
        Expr::Compare(c) => {
            walk_expr(&c.left, v);
            walk_exprs(&c.comparators, v);
        }
        Expr::Call(c) => {
            walk_expr(&c.func, v);
            walk_exprs(&c.args, v);
            for k in &c.keywords {
                walk_expr(&k.value, v);
            }
        }
        Expr::FormattedValue(f) => {
            walk_expr(&f.value, v);
            walk_opt(&f.format_spec, v);
        }
        Expr::JoinedStr(j) => walk_exprs(&j.values, v),
        Expr::Attribute(a) => walk_expr(&a.value, v),
        Expr::Subscript(s) => {
            walk_expr(&s.value, v);
            walk_expr(&s.slice, v);
        }
        Expr::Starred(s) => walk_expr(&s.value, v),
        Expr::List(l) => walk_exprs(&l.elts, v),
        Expr::Tuple(t) => walk_exprs(&t.elts, v),
        Expr::Slice(s) => {
            walk_opt(&s.lower, v);
            walk_opt(&s.upper, v);
            walk_opt(&s.step, v);
        }
        Expr::Constant(_) | Expr::Name(_) => {}
    }
}

fn walk_generators<'a, V: Visitor<'a> + ?Sized>(gens: &'a [ast::Comprehension], v: &mut V) {
    for g in gens {
        walk_expr(&g.target, v);
        walk_expr(&g.iter, v);
        walk_exprs(&g.ifs, v);
    }
}

/// Re-indents the block of statements occupying `range` (which starts at a
/// statement) so its first statement sits at `indent`; nested lines keep
/// their relative indentation and trailing comments on the last line are
/// kept. Lines that begin inside a string literal are copied verbatim,
/// blank lines become empty. The result ends with a newline.
pub fn reindent_block(file: &ParsedFile, range: Range<usize>, indent: &str) -> String {
    let strings = file.string_token_ranges();
    let inside_string = |offset: usize| strings.iter().any(|r| r.start < offset && offset < r.end);
    let first_line = file.line_of(range.start);
    let prefix = &file.text[file.line_start(first_line)..range.start];
    // A block starting mid-line (`def f(): body`) has no base indentation.
    let base = if prefix.trim().is_empty() { prefix.len() } else { 0 };
    let last_line = file.line_of(range.end.saturating_sub(1).max(range.start));
    let mut out = String::new();
    for line in first_line..=last_line {
        let start = if line == first_line {
            range.start
        } else {
            file.line_start(line)
        };
        let stop = file.line_start(line + 1).max(start);
        let text = file.text[start..stop].trim_end_matches(['\n', '\r']);
        if line != first_line && inside_string(start) {
            out.push_str(text);
        } else if !text.trim().is_empty() {
            let ws = if line == first_line {
                0
            } else {
                (text.len() - text.trim_start().len()).min(base)
            };
            out.push_str(indent);
            out.push_str(&text[ws..]);
        }
        out.push('\n');
    }
    out
}

/// True when a function body yields (directly, not in nested scopes).
pub fn is_generator(body: &[Stmt]) -> bool {
    struct Y(bool);
    impl<'a> Visitor<'a> for Y {
        fn stmt(&mut self, s: &'a Stmt) -> bool {
            !matches!(
                s,
                Stmt::FunctionDef(_) | Stmt::AsyncFunctionDef(_) | Stmt::ClassDef(_)
            )
        }
        fn expr(&mut self, e: &'a Expr) {
            if matches!(e, Expr::Yield(_) | Expr::YieldFrom(_)) {
                self.0 = true;
            }
        }
    }
    let mut y = Y(false);
    walk_body(body, &mut y);
    y.0
}
