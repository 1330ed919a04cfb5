//! Send-on-delta event trigger with an adaptive threshold.
//!
//! An agent broadcasts when the deviation between its current message value
//! and its last broadcast reaches the threshold delta(t) = sigma * eta + eps,
//! where eta in [0,1] either is a fixed constant or comes from the shared
//! network evaluated on local observations. Hard mode takes the if/else
//! decision used at test time; fuzzy mode is the sigmoid-blended relaxation
//! used during training so gradients can flow through event decisions.

use crate::error::{Error, Result};
use crate::num::logistic;
use crate::protocols::AgentState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerMode {
    Hard,
    Fuzzy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSource {
    /// Constant eta in [0, 1].
    Fixed(f64),
    /// eta produced by the shared network from local features.
    Learned,
}

/// Threshold rule parameters. `delta(t) = sigma * eta + epsilon` lies in
/// `[epsilon, sigma + epsilon]` for any eta in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerPolicy {
    pub sigma: f64,
    pub epsilon: f64,
    /// Fuzzy sigmoid steepness.
    pub alpha: f64,
    pub mode: TriggerMode,
    pub source: ThresholdSource,
}

impl TriggerPolicy {
    pub fn new(
        sigma: f64,
        epsilon: f64,
        alpha: f64,
        mode: TriggerMode,
        source: ThresholdSource,
    ) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "sigma must be >= 0, got {sigma}"
            )));
        }
        if epsilon <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be > 0, got {epsilon}"
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "alpha must be > 0, got {alpha}"
            )));
        }
        if let ThresholdSource::Fixed(eta) = source {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::InvalidParameter(format!(
                    "fixed eta must be in [0,1], got {eta}"
                )));
            }
        }
        Ok(TriggerPolicy {
            sigma,
            epsilon,
            alpha,
            mode,
            source,
        })
    }

    pub fn delta(&self, eta: f64) -> f64 {
        self.sigma * eta + self.epsilon
    }
}

/// Outcome of one trigger evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TriggerDecision {
    /// Hard decision: deviation reached the threshold.
    pub fired: bool,
    /// Blend weight. Exactly 0 or 1 in hard mode, in (0,1) in fuzzy mode.
    pub nu: f64,
    /// Threshold value used.
    pub delta: f64,
    /// eta value used.
    pub eta: f64,
}

/// Hard trigger: fire iff |current - last broadcast| >= delta. The caller
/// applies the update (refresh broadcast, record event time).
pub fn evaluate_hard(
    agent: &AgentState,
    current_message: f64,
    eta: f64,
    policy: &TriggerPolicy,
) -> TriggerDecision {
    debug_assert_eq!(policy.mode, TriggerMode::Hard);
    let delta = policy.delta(eta);
    let err = (current_message - agent.last_broadcast).abs();
    let fired = err >= delta;
    TriggerDecision {
        fired,
        nu: if fired { 1.0 } else { 0.0 },
        delta,
        eta,
    }
}

/// Fuzzy trigger: nu = sigmoid(alpha * (err - delta)). The caller blends the
/// held broadcast as `b <- nu * current + (1 - nu) * b`.
pub fn evaluate_fuzzy(
    agent: &AgentState,
    current_message: f64,
    eta: f64,
    policy: &TriggerPolicy,
) -> TriggerDecision {
    debug_assert_eq!(policy.mode, TriggerMode::Fuzzy);
    let delta = policy.delta(eta);
    let err = (current_message - agent.last_broadcast).abs();
    let nu = logistic(policy.alpha * (err - delta));
    TriggerDecision {
        fired: err >= delta,
        nu,
        delta,
        eta,
    }
}

/// Inter-event spacing statistics over per-agent sorted event-time lists.
#[derive(Debug, Clone)]
pub struct InterEventStats {
    /// Smallest gap between consecutive events of the same agent. When no
    /// agent has two events the horizon is reported as a sentinel.
    pub min_gap: f64,
    pub mean_gap: f64,
    pub per_agent_counts: Vec<usize>,
}

pub fn inter_event_statistics(events: &[Vec<f64>], horizon: f64) -> InterEventStats {
    let mut min_gap = f64::INFINITY;
    let mut sum = 0.0;
    let mut n_gaps = 0usize;
    for agent_events in events {
        for pair in agent_events.windows(2) {
            let gap = pair[1] - pair[0];
            min_gap = min_gap.min(gap);
            sum += gap;
            n_gaps += 1;
        }
    }
    let (min_gap, mean_gap) = if n_gaps == 0 {
        (horizon, horizon)
    } else {
        (min_gap, sum / n_gaps as f64)
    };
    InterEventStats {
        min_gap,
        mean_gap,
        per_agent_counts: events.iter().map(Vec::len).collect(),
    }
}
