//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit when
//! any criterion fails. Runs without the libtest harness so the lines are
//! always printed.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use common::{copy_fixture, flycatcher, python_available, TARGET_TEST};
use flycatcher_core::config::{Budgets, ToolConfig};
use flycatcher_core::corpus::select_context_tests;
use flycatcher_core::fsutil;
use flycatcher_core::instrument::{instrument, uninstrument_diff, InstrumentationPlan, MARKER, SHIM_DIR};
use flycatcher_core::llm::ScriptedProvider;
use flycatcher_core::mutation::{
    apply_mutant, evaluate_mutants, generate_mutants, revert_mutant, EvaluationSetup, MutantStatus,
};
use flycatcher_core::pipeline::{
    refine_loop, static_validate, CheckerArtifact, FeedbackKind, RefineRequest, Status, StaticOnly,
};
use flycatcher_core::shadow::{ChildOp, ShadowModel};
use flycatcher_core::subject::{SubjectProject, TestCase};
use flycatcher_core::Signature;

fn load_project(root: &Path) -> (ToolConfig, SubjectProject) {
    let config = ToolConfig::load(&root.join("flycatcher.json")).unwrap();
    let project = SubjectProject::scan(root, config.project.clone()).unwrap();
    (config, project)
}

/// Runs the refinement loop with static checks only.
fn refine_static(project: &SubjectProject, target: &str, script: &str, budgets: &Budgets) -> CheckerArtifact {
    let target = project
        .test_cases()
        .unwrap()
        .into_iter()
        .find(|t| t.id == target)
        .expect("target test");
    let mut provider = ScriptedProvider::from_path(&project.root.join("scripts").join(script)).unwrap();
    let req = RefineRequest {
        project,
        target: &target,
        context: &[],
        budgets,
        transcript: None,
    };
    refine_loop(&req, &mut provider, &mut StaticOnly).unwrap().artifact
}

fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn determinism() -> String {
    assert!(python_available(), "python3 with pytest is required");
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let root = copy_fixture("datanode_py", &tmp.path().join(name));
        let out = flycatcher(&root, &["gen", "--test", TARGET_TEST, "--seed", "7"]);
        assert!(
            out.status.success(),
            "gen failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        runs.push(root);
    }
    let elapsed = start.elapsed();
    let workdirs: Vec<PathBuf> = runs.iter().map(|r| r.join(".flycatcher")).collect();
    let checkers = workdirs[0].join("checkers");
    let ids: Vec<String> = std::fs::read_dir(&checkers)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(ids.len(), 1);
    let mut compared = 0;
    for rel in [
        format!("checkers/{}/checker.src", ids[0]),
        format!("checkers/{}/meta.json", ids[0]),
        format!("checkers/{}/split.json", ids[0]),
        format!("checkers/{}/transcript.jsonl", ids[0]),
        "ledger.json".to_string(),
    ] {
        let a = read_bytes(&workdirs[0].join(&rel));
        let b = read_bytes(&workdirs[1].join(&rel));
        assert!(!a.is_empty(), "{rel} is empty");
        assert!(a == b, "{rel} differs between runs");
        compared += 1;
    }
    let ledger: serde_json::Value = serde_json::from_slice(&read_bytes(&workdirs[0].join("ledger.json"))).unwrap();
    assert_eq!(ledger["rows"].as_array().unwrap().len(), 1);
    assert!(elapsed < Duration::from_secs(60), "two runs took {elapsed:?}");
    format!("{compared} artifacts byte-identical, two runs in {:.1}s", elapsed.as_secs_f64())
}

fn static_table() -> String {
    let tmp = tempfile::tempdir().unwrap();
    let root = copy_fixture("datanode_py", tmp.path());
    let (_, project) = load_project(&root);
    let cases: [(&str, &str, FeedbackKind, &str); 4] = [
        (
            "syntax error",
            "def checker(op, shadowState)\n    assertTrue(op.baseObject is not None)\n",
            FeedbackKind::SyntaxError,
            "Syntax error in Python code. Make sure that the checker method is indeed a single method, \
             i.e. do not output helper methods or classes.",
        ),
        (
            "comment-only assertions",
            "def checker(op, shadowState):\n    children = op.baseObject.getChildren()\n    \
             # assertTrue(len(children) == 0)\n    # assertEquals(0, len(children))\n",
            FeedbackKind::NoAssertion,
            "The checker does not contain a call to an assertion method. Make sure to include assertions \
             outside comments.",
        ),
        (
            "unknown-method dispatch",
            "def checker(op, shadowState):\n    if op.signature == \"datanode.DataNode.appendChild(str)\":\n        \
             assertTrue(op.arguments[0] in op.baseObject.getChildren())\n",
            FeedbackKind::NonSutMethod,
            "The system under test (SUT) does not contain the following methods: \
             datanode.DataNode.appendChild(str). Make sure that the checker handles methods from the \
             system under analysis rather than built-in functions or methods from the test suite.",
        ),
        (
            "unqualified signature",
            "def checker(op, shadowState):\n    if op.signature == \"addChild(String)\":\n        \
             assertTrue(op.arguments[0] in op.baseObject.getChildren())\n",
            FeedbackKind::UnqualifiedSignature,
            "The checker handles methods without fully qualified signature: addChild(String). Use fully \
             qualified names for the method and all argument types.",
        ),
    ];
    for (label, source, kind, text) in cases {
        let fb = static_validate(source, &project).expect_err(label);
        assert_eq!(fb.kind, kind, "{label}");
        assert_eq!(fb.message, text, "{label}");
    }
    "4 of 4 bad checkers give the expected kind and text".into()
}

fn refinement_policy() -> String {
    let tmp = tempfile::tempdir().unwrap();
    let root = copy_fixture("datanode_py", tmp.path());
    let (_, project) = load_project(&root);

    let forever = refine_static(&project, TARGET_TEST, "forever_broken.json", &Budgets::default());
    assert_eq!(forever.status, Status::Rejected);
    assert_eq!(forever.attempts, 5);
    assert_eq!(forever.failure_history, vec![FeedbackKind::SyntaxError; 5]);

    let budgets = Budgets {
        max_attempts: 7,
        ..Budgets::default()
    };
    let alternating = refine_static(&project, TARGET_TEST, "alternating.json", &budgets);
    assert_eq!(alternating.status, Status::Rejected);
    assert_eq!(alternating.attempts, 7);
    let kinds: HashSet<FeedbackKind> = alternating.failure_history.iter().copied().collect();
    assert_eq!(kinds.len(), 2, "{:?}", alternating.failure_history);
    assert!(alternating.failure_history.windows(2).all(|w| w[0] != w[1]));
    format!(
        "constant failure rejected after {}, alternating rejected at k={}",
        forever.attempts, alternating.attempts
    )
}

fn test_case(id: String, ty: &str, tokens: usize) -> TestCase {
    TestCase {
        file: PathBuf::from(id.split("::").next().unwrap()),
        name: id.rsplit("::").next().unwrap().to_string(),
        id,
        body: String::new(),
        imports: vec![],
        sut_calls: vec![Signature::new("pkg", ty, "run", vec![])],
        call_sites: vec![],
        assertion_count: 1,
        token_estimate: tokens,
    }
}

fn context_budget() -> String {
    const BUDGET: usize = 30_000;
    const CASES: u32 = 256;
    let pool_strategy = (
        prop::collection::vec((0usize..3, 0usize..16_000), 0..60),
        any::<u64>(),
        any::<u64>(),
    );
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let selected_total = std::cell::Cell::new(0usize);
    runner
        .run(&pool_strategy, |(spec, seed, shuffle_seed)| {
            let types = ["A", "B", "C"];
            let pool: Vec<TestCase> = spec
                .iter()
                .enumerate()
                .map(|(i, (ty, tokens))| test_case(format!("tests/t{}.py::test_{i}", i % 4), types[*ty], *tokens))
                .collect();
            let target = test_case("tests/target.py::test_target".into(), "A", 100);
            let picked = select_context_tests(&pool, &target, BUDGET, seed);
            let total: usize = picked.iter().map(|t| t.token_estimate).sum();
            prop_assert!(total <= BUDGET, "context of {total} tokens");
            prop_assert!(picked.iter().all(|t| t.id != target.id));
            let ids: HashSet<&str> = picked.iter().map(|t| t.id.as_str()).collect();
            prop_assert_eq!(ids.len(), picked.len());
            prop_assert!(picked.iter().all(|t| t.sut_calls[0].type_name == "A"));
            // same seed, same selection, whatever the pool order
            let again = select_context_tests(&pool, &target, BUDGET, seed);
            prop_assert_eq!(&again, &picked);
            let mut reordered = pool.clone();
            let n = reordered.len().max(1);
            reordered.rotate_left((shuffle_seed as usize) % n);
            reordered.reverse();
            prop_assert_eq!(select_context_tests(&reordered, &target, BUDGET, seed), picked.clone());
            selected_total.set(selected_total.get() + picked.len());
            Ok(())
        })
        .unwrap_or_else(|e| panic!("{e}"));
    assert!(selected_total.get() > 0, "selection never picked anything");
    format!("{CASES} random pools within {BUDGET} tokens, deterministic per seed")
}

fn instrumentation_identity() -> String {
    let tmp = tempfile::tempdir().unwrap();
    let root = copy_fixture("datanode_py", &tmp.path().join("src"));
    let (config, project) = load_project(&root);

    // empty plan
    let out = tmp.path().join("empty");
    instrument(&project, &InstrumentationPlan::new(vec![], &out)).unwrap();
    let before: BTreeSet<PathBuf> = fsutil::list_files(&root).unwrap().into_iter().collect();
    let after: BTreeSet<PathBuf> = fsutil::list_files(&out).unwrap().into_iter().collect();
    assert!(before.is_subset(&after), "files lost by instrumentation");
    for extra in after.difference(&before) {
        assert!(extra.starts_with(SHIM_DIR), "unexpected file {}", extra.display());
    }
    let strip_markers = |text: String| -> String {
        text.lines()
            .filter(|l| l.trim() != MARKER)
            .map(|l| format!("{l}\n"))
            .collect()
    };
    for rel in &before {
        let a = strip_markers(std::fs::read_to_string(root.join(rel)).unwrap());
        let b = strip_markers(std::fs::read_to_string(out.join(rel)).unwrap());
        assert_eq!(a, b, "{} changed beyond marker comments", rel.display());
    }

    // a real plan: declarations keep their canonical signatures
    let checker = refine_static(&project, TARGET_TEST, "children.json", &config.budgets);
    assert_eq!(checker.status, Status::Validated);
    let out = tmp.path().join("planned");
    let report = instrument(&project, &InstrumentationPlan::new(vec![checker.clone()], &out)).unwrap();
    assert_eq!(report.wrapped_count(), checker.targets().len());
    let rescanned = SubjectProject::scan(&out, config.project.clone()).unwrap();
    let original: BTreeSet<&String> = project.method_index.keys().collect();
    let reparsed: BTreeSet<&String> = rescanned.method_index.keys().collect();
    assert_eq!(original, reparsed);
    for sig in checker.targets() {
        let text = std::fs::read_to_string(out.join(&project.method(sig).unwrap().file)).unwrap();
        assert!(text.starts_with(MARKER));
        assert!(rescanned.contains(&sig.to_string()), "{sig} lost");
    }
    let diff = uninstrument_diff(&project, &out).unwrap();
    assert!(!diff.is_corrupted(), "{:?}", diff.corruption);
    format!(
        "empty plan adds only {} shim files; {} wrapped declarations re-parse unchanged",
        after.len() - before.len(),
        report.wrapped_count()
    )
}

fn shadow_oracle() -> String {
    const CASES: u32 = 1_000;
    let op = (any::<bool>(), 0u64..4, 0u8..6);
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&prop::collection::vec(op, 0..=64), |seq| {
            let mut model = ShadowModel::new();
            let mut oracle: HashMap<u64, HashSet<String>> = HashMap::new();
            for (add, obj, child) in seq {
                let name = format!("c{child}");
                if add {
                    model.apply(&ChildOp::Add(obj, name.clone()));
                    oracle.entry(obj).or_default().insert(name);
                } else {
                    model.apply(&ChildOp::Remove(obj, name.clone()));
                    oracle.entry(obj).or_default().remove(&name);
                }
                for o in 0..4 {
                    let expected: BTreeSet<String> = oracle.get(&o).map(|s| s.iter().cloned().collect()).unwrap_or_default();
                    prop_assert_eq!(model.children(o), expected.clone());
                    prop_assert!(model.check(o, &expected));
                }
            }
            prop_assert_eq!(model.tracked_objects(), oracle.len());
            Ok(())
        })
        .unwrap_or_else(|e| panic!("{e}"));
    format!("{CASES} random sequences match the set oracle")
}

fn mutation_partition() -> String {
    assert!(python_available(), "python3 with pytest is required");
    let tmp = tempfile::tempdir().unwrap();
    let root = copy_fixture("datanode_py", tmp.path());
    let (config, project) = load_project(&root);
    let scope: BTreeSet<String> = ["DataNode", "DataTree"].into_iter().map(String::from).collect();
    let mut mutants = generate_mutants(&project, &scope).unwrap();
    let operators: BTreeSet<String> = mutants.iter().map(|m| m.operator.to_string()).collect();
    assert!(mutants.len() >= 50, "only {} mutants", mutants.len());
    assert!(operators.len() >= 4, "operators: {operators:?}");

    // apply/revert on a scratch copy keeps the tree hash
    let copy = tmp.path().join("copy");
    fsutil::copy_tree(&root, &copy, &[]).unwrap();
    let hash = fsutil::tree_hash(&copy).unwrap();
    for m in &mutants {
        let original = apply_mutant(&copy, m).unwrap();
        assert_ne!(fsutil::tree_hash(&copy).unwrap(), hash, "{} is a no-op", m.id);
        revert_mutant(&copy, m, &original).unwrap();
        assert_eq!(fsutil::tree_hash(&copy).unwrap(), hash, "{} not reverted", m.id);
    }

    let root_hash = fsutil::tree_hash(&root).unwrap();
    let checker = refine_static(&project, TARGET_TEST, "children.json", &config.budgets);
    let setup = EvaluationSetup {
        project: &project,
        target_tests: vec![TARGET_TEST.to_string()],
        checkers: vec![checker],
        scratch: tmp.path().join("scratch"),
        timeout: Duration::from_secs(60),
    };
    let report = evaluate_mutants(&mut mutants, &setup).unwrap();
    assert_eq!(fsutil::tree_hash(&root).unwrap(), root_hash, "project tree modified");
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &mutants {
        let key = match m.status {
            Some(MutantStatus::NotCovered) => "not_covered",
            Some(MutantStatus::KilledByTests) => "killed_by_tests",
            Some(MutantStatus::KilledByChecker) => "killed_by_checker",
            Some(MutantStatus::Survived) => "survived",
            None => "unevaluated",
        };
        *counts.entry(key).or_default() += 1;
    }
    assert_eq!(counts.get("unevaluated"), None);
    assert_eq!(counts.values().sum::<usize>(), mutants.len());
    assert_eq!(report.total, mutants.len());
    assert_eq!(
        report.not_covered + report.killed_by_target_tests + report.killed_by_checkers + report.survived_with_checkers,
        report.total
    );
    assert_eq!(report.all, report.total - report.not_covered);
    assert_eq!(report.survived, report.all - report.killed_by_target_tests);
    format!(
        "{} mutants over {} operators: {} not covered, {} killed by tests, {} by checker, {} survived",
        report.total,
        operators.len(),
        report.not_covered,
        report.killed_by_target_tests,
        report.killed_by_checkers,
        report.survived_with_checkers
    )
}

type Criterion = (&'static str, fn() -> String);

fn main() {
    let criteria: [Criterion; 7] = [
        ("determinism", determinism),
        ("static-validation table", static_table),
        ("refinement policy", refinement_policy),
        ("context budget", context_budget),
        ("instrumentation identity", instrumentation_identity),
        ("shadow-state oracle", shadow_oracle),
        ("mutation partition", mutation_partition),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL [{}] {name}: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
