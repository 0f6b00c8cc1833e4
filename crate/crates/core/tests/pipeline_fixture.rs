//! Refinement loop on the DataNode fixture with scripted replies and real
//! dynamic validation.

mod common;

use common::{load, TARGET_TEST};
use flycatcher_core::corpus::CorpusSplit;
use flycatcher_core::llm::read_transcript;
use flycatcher_core::pipeline::{refine_loop, FeedbackKind, RefineRequest, Status, StaticOnly};
use flycatcher_core::validate::DynamicValidator;

fn run(script: &str) -> flycatcher_core::pipeline::RefineResult {
    let fx = load("datanode_py");
    let target = fx.test(TARGET_TEST);
    let cases = fx.project.test_cases().unwrap();
    let split = CorpusSplit::build(&cases, &target, 30_000, 0, 7);
    let mut provider = fx.script(script);
    let mut dynamic =
        DynamicValidator::new(&fx.project, split.validation_run(), 300.0, fx.scratch());
    let req = RefineRequest {
        project: &fx.project,
        target: &target,
        context: &[],
        budgets: &fx.config.budgets,
        transcript: None,
    };
    refine_loop(&req, &mut provider, &mut dynamic).unwrap()
}

#[test]
fn children_checker_validates_first_time() {
    let r = run("children.json");
    assert_eq!(r.artifact.status, Status::Validated, "{:?}", r.artifact);
    assert_eq!(r.artifact.attempts, 1);
    let handled: Vec<String> = r.artifact.handled_signatures.iter().map(|s| s.to_string()).collect();
    assert_eq!(
        handled,
        ["datanode.DataNode.addChild(str)", "datanode.DataNode.removeChild(str)"]
    );
    let sc: Vec<String> = r.artifact.state_changing.iter().map(|s| s.to_string()).collect();
    assert_eq!(
        sc,
        [
            "datanode.DataNode.__init__(bytes,int)",
            "datanode.DataNode.addChild(str)",
            "datanode.DataNode.removeChild(str)"
        ]
    );
}

#[test]
fn syntax_error_then_fix() {
    let r = run("bad_then_children.json");
    assert_eq!(r.artifact.status, Status::Validated);
    assert_eq!(r.artifact.attempts, 2);
    assert_eq!(r.artifact.failure_history, [FeedbackKind::SyntaxError]);
}

#[test]
fn recursion_is_reported() {
    let r = run("recursive_then_children.json");
    assert_eq!(r.artifact.failure_history, [FeedbackKind::RecursiveCall]);
    assert_eq!(r.artifact.status, Status::Validated);
}

#[test]
fn overfitted_checker_fails_tests() {
    let r = run("size_one_then_children.json");
    assert_eq!(r.artifact.failure_history, [FeedbackKind::TestFailure]);
    assert_eq!(r.artifact.status, Status::Validated);
}

#[test]
fn slow_checker_times_out() {
    let fx = load("datanode_py");
    let target = fx.test(TARGET_TEST);
    let mut provider = fx.script("slow_then_children.json");
    let mut dynamic = DynamicValidator::new(&fx.project, vec![TARGET_TEST.to_string()], 5.0, fx.scratch());
    let req = RefineRequest {
        project: &fx.project,
        target: &target,
        context: &[],
        budgets: &fx.config.budgets,
        transcript: None,
    };
    let r = refine_loop(&req, &mut provider, &mut dynamic).unwrap();
    assert_eq!(r.artifact.failure_history, [FeedbackKind::Timeout]);
    assert_eq!(r.artifact.status, Status::Validated);
}

#[test]
fn transcript_records_both_conversations() {
    let fx = load("datanode_py");
    let target = fx.test(TARGET_TEST);
    let transcript = fx.dir.path().join("transcript.jsonl");
    let req = RefineRequest {
        project: &fx.project,
        target: &target,
        context: &[],
        budgets: &fx.config.budgets,
        transcript: Some(transcript.clone()),
    };
    let r = refine_loop(&req, &mut fx.script("bad_then_children.json"), &mut StaticOnly).unwrap();
    let messages = read_transcript(&transcript).unwrap();
    // identification, generation and one refinement: two messages each
    assert_eq!(messages.len(), 6);
    assert_eq!(r.usage.calls, 3);
    let output: u64 = messages.iter().map(|m| m.output_tokens).sum();
    assert_eq!(output, r.usage.output_tokens);
}
