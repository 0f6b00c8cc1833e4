//! Candidate filtering and, per target test, selection of context tests
//! (shown to the model) and validation tests (run with the checker).

use std::collections::BTreeSet;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::{Error, Result};
use crate::runner::{Outcome, TestInvocation};
use crate::subject::{SubjectProject, TestCase};

/// How many tests survive each filtering step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Funnel {
    pub all: usize,
    pub with_sut_calls: usize,
    pub with_assert: usize,
    pub passing: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub target: String,
    pub context: Vec<String>,
    /// Validation tests other than the target itself.
    pub validation: Vec<String>,
    pub seed: u64,
    pub context_token_budget: usize,
}

impl CorpusSplit {
    /// Builds the split for `target` from the candidate population.
    pub fn build(
        candidates: &[TestCase],
        target: &TestCase,
        budget: usize,
        extra: usize,
        seed: u64,
    ) -> Self {
        let context = select_context_tests(candidates, target, budget, seed);
        let validation = select_validation_tests(candidates, target, &context, extra, seed);
        CorpusSplit {
            target: target.id.clone(),
            context: context.iter().map(|t| t.id.clone()).collect(),
            validation: validation
                .iter()
                .filter(|t| t.id != target.id)
                .map(|t| t.id.clone())
                .collect(),
            seed,
            context_token_budget: budget,
        }
    }

    /// Ids to run during dynamic validation: the target first.
    pub fn validation_run(&self) -> Vec<String> {
        std::iter::once(self.target.clone())
            .chain(self.validation.iter().cloned())
            .collect()
    }
}

/// Keeps tests that call the subject, assert something and pass alone
/// within the configured timeout.
pub fn filter_candidate_tests(project: &SubjectProject) -> Result<(Vec<TestCase>, Funnel)> {
    let all = project.test_cases()?;
    let mut funnel = Funnel {
        all: all.len(),
        ..Funnel::default()
    };
    let with_calls: Vec<TestCase> = all.into_iter().filter(|t| !t.sut_calls.is_empty()).collect();
    funnel.with_sut_calls = with_calls.len();
    let with_assert: Vec<TestCase> = with_calls
        .into_iter()
        .filter(|t| t.assertion_count >= 1)
        .collect();
    funnel.with_assert = with_assert.len();
    let timeout = Duration::from_secs(project.config.timeout_seconds);
    let mut passing = Vec::new();
    for t in with_assert {
        let ids = [t.id.clone()];
        let run = TestInvocation::new(&project.root, &project.config, &ids)
            .timeout(timeout)
            .run()?;
        match run.outcome {
            Outcome::Passed => passing.push(t),
            Outcome::TestsFailed | Outcome::TimedOut => {
                info!(test = %t.id, outcome = ?run.outcome, "dropping candidate")
            }
            Outcome::Infrastructure => {
                return Err(Error::Runner(format!(
                    "runner failed on {} with exit code {:?}:\n{}",
                    t.id,
                    run.exit_code,
                    run.log()
                )))
            }
        }
    }
    funnel.passing = passing.len();
    Ok((passing, funnel))
}

fn shares_type(a: &BTreeSet<String>, t: &TestCase) -> bool {
    t.sut_calls.iter().any(|s| a.contains(&s.declaring_type()))
}

/// Seeded uniform sample of tests sharing a declaring type with `target`,
/// taken in random order while the running token total stays within
/// `budget`. Stops at the first test that would overshoot.
pub fn select_context_tests(
    pool: &[TestCase],
    target: &TestCase,
    budget: usize,
    seed: u64,
) -> Vec<TestCase> {
    let types = target.declaring_types();
    let mut candidates: Vec<&TestCase> = pool
        .iter()
        .filter(|t| t.id != target.id && shares_type(&types, t))
        .collect();
    candidates.sort_by(|a, b| a.id.cmp(&b.id));
    candidates.dedup_by(|a, b| a.id == b.id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let mut used = 0usize;
    let mut out = Vec::new();
    for t in candidates {
        if used + t.token_estimate > budget {
            break;
        }
        used += t.token_estimate;
        out.push(t.clone());
    }
    out
}

/// The target, every other candidate in the target's file, and `extra`
/// seeded-random candidates sharing a declaring type; never a context test.
pub fn select_validation_tests(
    pool: &[TestCase],
    target: &TestCase,
    context: &[TestCase],
    extra: usize,
    seed: u64,
) -> Vec<TestCase> {
    let excluded: BTreeSet<&str> = context.iter().map(|t| t.id.as_str()).collect();
    let mut out = vec![target.clone()];
    let mut taken: BTreeSet<String> = BTreeSet::from([target.id.clone()]);
    for t in pool {
        if t.file == target.file && !excluded.contains(t.id.as_str()) && taken.insert(t.id.clone()) {
            out.push(t.clone());
        }
    }
    let types = target.declaring_types();
    let mut rest: Vec<&TestCase> = pool
        .iter()
        .filter(|t| !taken.contains(&t.id) && !excluded.contains(t.id.as_str()))
        .filter(|t| shares_type(&types, t))
        .collect();
    rest.sort_by(|a, b| a.id.cmp(&b.id));
    rest.dedup_by(|a, b| a.id == b.id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_eed0_f7a1);
    rest.shuffle(&mut rng);
    out.extend(rest.into_iter().take(extra).cloned());
    out
}
