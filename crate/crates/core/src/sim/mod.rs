//! Deterministic offline environment: rule-based agent, evaluator and
//! scripted providers.

mod fixtures;
mod harness;
mod scripted;

pub use fixtures::{
    build_convergence_suite, build_fixture, build_poisoned_suite, build_stability_suite, fixture,
    fixture_file, SimServices, SuiteBundle, FIXTURE_NAMES,
};
pub use harness::{failure_description, rule_run, RuleRunner, SyntheticTask};
pub use scripted::{
    fingerprint, ChatScript, Condition, ScriptRule, ScriptedChat, ScriptedResponse,
};
