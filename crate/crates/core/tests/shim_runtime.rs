//! Behaviour of the emitted Python runtime: reentrancy guard and concurrent
//! dispatch into scaffolded checkers.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use common::{load, python_available};
use flycatcher_core::config::OnViolation;
use flycatcher_core::instrument::{emit_shim, instrument, InstrumentationPlan};
use flycatcher_core::ledger::noop_checker;
use flycatcher_core::pipeline::{CheckerArtifact, GUARD_MESSAGE};
use flycatcher_core::Signature;

fn checker(id: &str, source: &str, targets: &[&str]) -> CheckerArtifact {
    let mut c = noop_checker(targets.iter().map(|s| s.parse::<Signature>().unwrap()).collect::<BTreeSet<_>>());
    c.id = id.into();
    c.checker_source = source.into();
    c
}

fn python(pythonpath: &[&Path], script: &str) -> (bool, String, String) {
    let joined = std::env::join_paths(pythonpath).unwrap();
    let out = Command::new("python3")
        .arg("-c")
        .arg(script)
        .env("PYTHONPATH", joined)
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .output()
        .unwrap();
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn guard_trips_with_its_message_and_is_cleared() {
    if !python_available() {
        eprintln!("skipping: python3 not available");
        return;
    }
    let fx = load("datanode_py");
    let recursive = checker(
        "ck_recursive",
        "def recursiveChecker(op, shadowState):\n    op.baseObject.addChild(\"again\")\n    assertTrue(True)\n",
        &["datanode.DataNode.addChild(str)"],
    );
    let tree = fx.dir.path().join("tree");
    instrument(&fx.project, &InstrumentationPlan::new(vec![recursive], &tree)).unwrap();
    let script = "\
import fc_runtime as rt
from datanode import DataNode
node = DataNode()
try:
    node.addChild('a')
    print('NO-ERROR')
except rt.CheckerRecursionError as e:
    print('MESSAGE=' + str(e))
print('ACTIVE=%s' % rt.ShadowState.in_checker())
";
    let (ok, stdout, stderr) = python(&[&tree, &tree.join("src")], script);
    assert!(ok, "{stderr}");
    assert!(stdout.contains(&format!("MESSAGE={GUARD_MESSAGE}")), "{stdout}");
    assert!(stdout.contains("ACTIVE=False"), "{stdout}");
    assert!(stderr.contains(&format!("fc-recursion[ck_recursive] {GUARD_MESSAGE}")), "{stderr}");
}

#[test]
fn concurrent_dispatch_loses_no_updates() {
    if !python_available() {
        eprintln!("skipping: python3 not available");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let tracking = checker(
        "ck_children",
        "\
def childrenChecker(op, shadowState):
    node = op.baseObject
    kids = shadowState.get(node, None)
    if kids is None:
        kids = set()
        shadowState[node] = kids
    if op.signature == \"demo.Node.addChild(str)\":
        kids.add(op.arguments[0])
    elif op.signature == \"demo.Node.removeChild(str)\":
        kids.discard(op.arguments[0])
    assertTrue(kids == node.children)
",
        &[],
    );
    emit_shim(dir.path(), &[tracking], OnViolation::Raise).unwrap();
    let script = "\
import json, random, threading
import fc_runtime as rt

THREADS, OPS = 8, 10000

class Node(object):
    def __init__(self):
        self.children = set()

errors = []
oracle = {}
nodes = {}

def worker(t):
    rng = random.Random(t)
    mine = [Node() for _ in range(4)]
    expected = [set() for _ in mine]
    try:
        for _ in range(OPS):
            i = rng.randrange(len(mine))
            name = 'c%d' % rng.randrange(6)
            node = mine[i]
            if rng.random() < 0.6:
                node.children.add(name)
                expected[i].add(name)
                sig = 'demo.Node.addChild(str)'
            else:
                node.children.discard(name)
                expected[i].discard(name)
                sig = 'demo.Node.removeChild(str)'
            rt.dispatch(rt.Operation(sig, node, [name], True), ('ck_children',))
    except Exception as e:
        errors.append(repr(e))
    oracle[t] = expected
    nodes[t] = mine

threads = [threading.Thread(target=worker, args=(t,)) for t in range(THREADS)]
for th in threads:
    th.start()
for th in threads:
    th.join()

mismatches = 0
for t in range(THREADS):
    for node, exp in zip(nodes[t], oracle[t]):
        if rt.ShadowState.state.get(node) != exp or node.children != exp:
            mismatches += 1
print(json.dumps({
    'errors': errors,
    'mismatches': mismatches,
    'entries': len(rt.ShadowState.state),
    'dispatches': rt._counters['dispatches'],
}))
";
    let (ok, stdout, stderr) = python(&[dir.path()], script);
    assert!(ok, "{stderr}");
    let result: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(result["errors"].as_array().unwrap().len(), 0, "{result}");
    assert_eq!(result["mismatches"], 0, "{result}");
    assert_eq!(result["entries"], 8 * 4);
    assert_eq!(result["dispatches"], 8 * 10_000);
    assert!(!stderr.contains("fc-recursion"), "{stderr}");
}
