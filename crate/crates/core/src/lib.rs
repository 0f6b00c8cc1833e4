//! Generalizes existing unit tests of a Python project into stateful runtime
//! checkers, validates them statically and dynamically, instruments the
//! project so the checkers run online against a shadow state, and measures
//! checker quality with mutation testing.
//!
//! The pipeline is split into one module per stage:
//!
//! - [`subject`]: static model of the subject project (methods, tests, calls)
//! - [`corpus`]: candidate filtering and context/validation test selection
//! - [`llm`]: provider abstraction, transcripts and prompt templates
//! - [`pipeline`]: identification, generation, static checks, scaffolding
//!   and the refinement loop
//! - [`instrument`]: source-to-source wrapping of state-changing methods
//! - [`validate`]: dynamic validation and cross-validation
//! - [`mutation`]: mutant generation and kill evaluation
//! - [`ledger`]: run ledger, cost accounting and overhead measurement

pub mod config;
pub mod corpus;
pub mod error;
pub mod fsutil;
pub mod instrument;
pub mod ledger;
pub mod llm;
pub mod mutation;
pub mod pipeline;
pub mod pyast;
pub mod runner;
pub mod shadow;
pub mod signature;
pub mod subject;
pub mod validate;

pub use error::{Error, Result};
pub use signature::Signature;
