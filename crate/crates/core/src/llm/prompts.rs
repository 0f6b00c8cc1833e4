//! The three prompt templates: state-changing identification, checker
//! generation (guidelines + few-shot examples + target) and refinement.

use std::fmt::Write;

use crate::pipeline::AnnotatedTest;
use crate::subject::{MethodInfo, TestCase};

/// Line comment marking state-changing calls in annotated tests.
pub const STATE_CHANGING_COMMENT: &str = "# state-changing";

const IDENTIFICATION_TEMPLATE: &str = "\
Many methods called in a test may modify the state of the target system, e.g., write and delete.
Given a test case and the implementation of the methods called in the test, identify all method calls that can cause side effects in the target system and produce a new version of the test containing the `# state-changing` comment in each line with method calls that can cause side effects. Constructors are state-changing methods by default.

Method implementations: [implementations]

Test: [test]
";

const GUIDELINES: &[&str] = &[
    "The checker is a single, parameterized top-level function `def <name>(op, shadowState):`; it must not be nested in a class and must not come with helper functions.",
    "The checker receives (i) an `Operation` object, which contains the following attributes: `signature`, `baseObject`, `arguments`, and `returnValue`; and (ii) a shadow state mapping objects to their properties and respective values.",
    "The checker handles methods that modify the state of object instances. These methods are marked with a `# state-changing` comment in the target test. For these methods, the checker updates the provided shadow state. Identify a method by comparing `op.signature` with its fully qualified signature `<module>.<Class>.<method>(<ParamType>,...)`, where constructors are named `__init__`.",
    "When reading a property from the shadow state, the checker falls back to a default value, as the property may not be in the shadow state yet.",
    "The checker updates the values in the shadow state based on the semantics of the received `Operation` object.",
    "Toward the end of the checker code, the checker asserts that properties have their expected values using `assertTrue`, `assertEquals` and `assertNotNull`. Like the assertions in the test case, the assertions may use methods that do not modify the system state. Assert statements should be outside of if-statements, as in the test. Do not insert any return statements.",
    "To obtain the expected value in the assertion, the checker retrieves it from the shadow state.",
    "The checker does not modify the state of the `baseObject` from the received `Operation`.",
    "The checker only contains necessary variables and operations, and accesses methods and attributes according to their visibility (no `_private` members of other objects).",
    "The checker code is explained with comments.",
];

const FEW_SHOTS: &[&str] = &[
    include_str!("../../prompts/fewshot/1_bank_account.md"),
    include_str!("../../prompts/fewshot/2_list_manager.md"),
    include_str!("../../prompts/fewshot/3_rectangle.md"),
    include_str!("../../prompts/fewshot/4_counter.md"),
    include_str!("../../prompts/fewshot/5_key_value_store.md"),
];

/// The step at which a checker failed, named in the refinement prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Compile,
    Instrument,
    Execute,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Compile => "compile",
            Stage::Instrument => "instrument",
            Stage::Execute => "execute",
        }
    }
}

fn fenced(code: &str) -> String {
    format!("```python\n{}\n```", code.trim_end())
}

pub fn render_identification_prompt(test: &TestCase, impls: &[&MethodInfo]) -> String {
    let implementations = impls
        .iter()
        .map(|m| format!("\n# {}\n{}", m.signature, fenced(&m.body)))
        .collect::<String>();
    IDENTIFICATION_TEMPLATE
        .replace("[implementations]", &implementations)
        .replace("[test]", &format!("\n{}", fenced(&test.body)))
}

pub fn render_generation_prompt(
    target: &AnnotatedTest,
    imports: &[String],
    context: &[TestCase],
) -> String {
    let mut out = String::new();
    out.push_str(
        "Generalize the target unit test below into a runtime checker that is invoked after every \
         call to a state-changing method and validates the same properties as the test, for any \
         execution. Follow these guidelines:\n\n",
    );
    for (i, g) in GUIDELINES.iter().enumerate() {
        let _ = writeln!(out, "{}. {g}", i + 1);
    }
    out.push_str("\nExamples of tests and their checkers:\n");
    for (i, shot) in FEW_SHOTS.iter().enumerate() {
        let _ = write!(out, "\nExample {}:\n{}", i + 1, shot);
    }
    let _ = write!(out, "\nTarget test:\n{}\n", fenced(&target.annotated_body));
    let _ = write!(out, "\nImports of the target test:\n{}\n", fenced(&imports.join("\n")));
    if context.is_empty() {
        out.push_str("\nContext tests: none\n");
    } else {
        out.push_str("\nContext tests:\n");
        for t in context {
            let _ = writeln!(out, "{}", fenced(&t.body));
        }
    }
    out.push_str("\nReply with the checker function in a single ```python code block.\n");
    out
}

pub fn render_refinement_prompt(stage: Stage, error: &str) -> String {
    format!(
        "When trying to {} the provided checker, the following error happens:\n\n{}\n\nPlease, provide a fixed version of the provided checker to fix the error.",
        stage.as_str(),
        error
    )
}
