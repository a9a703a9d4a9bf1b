use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::IterationReport;
use crate::gateway::{CallRole, UsageCounters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub iterations: usize,
    pub trajectory_count: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub wall_time_ms: u64,
    /// `total_tokens / trajectory_count`.
    pub amortized_tokens: f64,
    /// `wall_time_ms / trajectory_count`.
    pub amortized_time_ms: f64,
    pub by_role: BTreeMap<CallRole, UsageCounters>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("no iteration reports")]
    NoReports,
    #[error("no trajectories were executed, amortized figures are undefined")]
    ZeroTrajectories,
}

pub fn cost_report(reports: &[IterationReport]) -> Result<CostSummary, CostError> {
    if reports.is_empty() {
        return Err(CostError::NoReports);
    }
    let trajectory_count: u64 = reports.iter().map(|r| r.trajectories).sum();
    if trajectory_count == 0 {
        return Err(CostError::ZeroTrajectories);
    }
    let usage: UsageCounters = reports.iter().map(|r| r.usage).sum();
    let wall_time_ms: u64 = reports.iter().map(|r| r.wall_time_ms).sum();
    let mut by_role: BTreeMap<CallRole, UsageCounters> = BTreeMap::new();
    for r in reports {
        for (role, u) in &r.usage_by_role {
            *by_role.entry(*role).or_default() += *u;
        }
    }
    Ok(CostSummary {
        iterations: reports.len(),
        trajectory_count,
        prompt_tokens: usage.prompt_tokens,
        completion_tokens: usage.completion_tokens,
        total_tokens: usage.total_tokens(),
        wall_time_ms,
        amortized_tokens: usage.total_tokens() as f64 / trajectory_count as f64,
        amortized_time_ms: wall_time_ms as f64 / trajectory_count as f64,
        by_role,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(tokens: u64, trajectories: u64) -> IterationReport {
        IterationReport {
            iteration: 1,
            task_count: 10,
            passed_before: 0,
            passed_after: 0,
            success_before: 0.0,
            success_after: 0.0,
            gradient_count: 0,
            cluster_count: 0,
            noise_count: 0,
            proposals_attempted: 0,
            proposals_accepted: 0,
            proposals_rolled_back: 0,
            clusters_skipped: 0,
            trajectories,
            usage: UsageCounters {
                prompt_tokens: tokens,
                completion_tokens: 0,
                wall_time: Default::default(),
            },
            usage_by_role: Default::default(),
            wall_time_ms: 50,
        }
    }

    #[test]
    fn amortizes_over_trajectories() {
        let s = cost_report(&[report(1000, 10)]).unwrap();
        assert_eq!(s.amortized_tokens, 100.0);
        assert_eq!(s.amortized_time_ms, 5.0);
        let s = cost_report(&[report(600, 4), report(400, 6)]).unwrap();
        assert_eq!((s.total_tokens, s.trajectory_count), (1000, 10));
        assert_eq!(s.amortized_tokens, 100.0);
    }

    #[test]
    fn zero_trajectories_is_an_error() {
        assert_eq!(
            cost_report(&[report(10, 0)]),
            Err(CostError::ZeroTrajectories)
        );
        assert_eq!(cost_report(&[]), Err(CostError::NoReports));
    }
}
