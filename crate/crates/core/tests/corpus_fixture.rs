//! Candidate filtering and corpus splits on fixture projects.

mod common;

use common::{load, python_available, TARGET_TEST};
use flycatcher_core::corpus::{filter_candidate_tests, CorpusSplit, Funnel};

#[test]
fn funnel_drops_assertion_free_and_slow_tests() {
    if !python_available() {
        eprintln!("skipping: python3 with pytest not available");
        return;
    }
    let fx = load("funnel_py");
    let (candidates, funnel) = filter_candidate_tests(&fx.project).unwrap();
    // ten tests, all calling Counter; two assert nothing; one sleeps past the timeout
    assert_eq!(
        funnel,
        Funnel {
            all: 10,
            with_sut_calls: 10,
            with_assert: 8,
            passing: 7
        }
    );
    let names: Vec<&str> = candidates.iter().map(|t| t.name.as_str()).collect();
    assert!(!names.contains(&"test_slow"));
    assert!(!names.iter().any(|n| n.starts_with("test_no_assertion")));
    let json = serde_json::to_string(&funnel).unwrap();
    assert_eq!(json, r#"{"all":10,"with_sut_calls":10,"with_assert":8,"passing":7}"#);
}

#[test]
fn fixture_split_is_disjoint_and_reproducible() {
    let fx = load("datanode_py");
    let cases = fx.project.test_cases().unwrap();
    let target = fx.test(TARGET_TEST);
    for seed in 0..20 {
        let split = CorpusSplit::build(&cases, &target, 30_000, 3, seed);
        assert_eq!(split, CorpusSplit::build(&cases, &target, 30_000, 3, seed));
        assert!(!split.context.contains(&split.target));
        assert!(!split.validation.contains(&split.target));
        assert!(split.context.iter().all(|c| !split.validation.contains(c)));
        assert_eq!(split.validation_run()[0], TARGET_TEST);
    }
}

#[test]
fn tiny_budget_gives_no_context() {
    let fx = load("datanode_py");
    let cases = fx.project.test_cases().unwrap();
    let target = fx.test(TARGET_TEST);
    let split = CorpusSplit::build(&cases, &target, 1, 0, 7);
    assert!(split.context.is_empty());
}
