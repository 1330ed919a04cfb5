//! Trajectory-level verification of the protocol guarantees.
//!
//! For the linear protocol the disagreement norm admits an explicit
//! envelope: a decaying exponential of the initial disagreement plus a
//! constant threshold gain plus a constant signal-rate gain,
//!
//! ```text
//! B(t) = exp(-kappa lambda2 t) ||x(0)||
//!        + (lambda_max / lambda2) (sigma + eps)
//!        + sqrt(N) R / (kappa lambda2)
//! ```
//!
//! The envelope is continuous-time; a discrete simulator can overshoot
//! within one Euler step, so checks carry an explicit one-step slack instead
//! of a silently widened bound. The trigger layer additionally guarantees
//! that delta(t) stays in [eps, sigma + eps] and that same-agent events are
//! at least one grid step apart; both are asserted per rollout here.

use crate::error::{Error, Result};
use crate::etm::inter_event_statistics;
use crate::graph::NetworkGraph;
use crate::protocols::{ProtocolConfig, RolloutResult};
use crate::training::CostBreakdown;
use std::io::Write;
use std::path::Path;

/// Disturbance-envelope evaluation for one rollout.
#[derive(Debug, Clone)]
pub struct BoundReport {
    /// Envelope B(t) at every grid point.
    pub bound: Vec<f64>,
    /// Recorded ||x(t)||.
    pub actual: Vec<f64>,
    /// max over t of actual - bound (negative means margin everywhere).
    pub max_violation: f64,
    /// Grid time at which the worst margin occurs.
    pub worst_time: f64,
    pub tolerance: f64,
    /// max_violation > tolerance.
    pub violated: bool,
}

/// One-Euler-step slack for the envelope check: within a step the held
/// error may overshoot the threshold before the next trigger round.
pub fn default_bound_tolerance(
    graph: &NetworkGraph,
    kappa: f64,
    sigma: f64,
    epsilon: f64,
    step: f64,
) -> f64 {
    kappa * graph.lambda_max * (sigma + epsilon) * step + 1e-9
}

/// Evaluate the linear-protocol disagreement envelope against a rollout.
///
/// `rate_bound` is the analytic sup of |dr/dt| from the signal generator,
/// not a sample estimate. The rollout must come from the linear protocol
/// with the same gain.
pub fn check_linear_bound(
    rollout: &RolloutResult,
    graph: &NetworkGraph,
    kappa: f64,
    sigma: f64,
    epsilon: f64,
    rate_bound: f64,
    tolerance: f64,
) -> Result<BoundReport> {
    match &rollout.config {
        ProtocolConfig::Linear { kappa: k } => {
            if (k - kappa).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "rollout was integrated with kappa {k}, bound asked for {kappa}"
                )));
            }
        }
        ProtocolConfig::SlidingMode { .. } => {
            return Err(Error::InvalidParameter(
                "disagreement envelope applies to the linear protocol only".into(),
            ));
        }
    }
    if rollout.n_agents() != graph.n_agents {
        return Err(Error::DimensionMismatch {
            expected: graph.n_agents,
            got: rollout.n_agents(),
            context: "bound check graph",
        });
    }

    let x0 = rollout.disagreement_norm[0];
    let gain = graph.lambda_max / graph.lambda2 * (sigma + epsilon);
    let rate_term = (graph.n_agents as f64).sqrt() * rate_bound / (kappa * graph.lambda2);
    let decay = kappa * graph.lambda2;

    let mut bound = Vec::with_capacity(rollout.times.len());
    let mut max_violation = f64::NEG_INFINITY;
    let mut worst_time = 0.0;
    let mut prev_b = f64::INFINITY;
    for (&t, &x) in rollout.times.iter().zip(&rollout.disagreement_norm) {
        let b = (-decay * t).exp() * x0 + gain + rate_term;
        assert!(b <= prev_b + 1e-12, "envelope must be non-increasing in t");
        prev_b = b;
        let v = x - b;
        if v > max_violation {
            max_violation = v;
            worst_time = t;
        }
        bound.push(b);
    }

    Ok(BoundReport {
        bound,
        actual: rollout.disagreement_norm.clone(),
        max_violation,
        worst_time,
        tolerance,
        violated: max_violation > tolerance,
    })
}

impl BoundReport {
    /// CSV with one row per grid point: t, actual, bound, margin.
    pub fn export_csv(&self, times: &[f64], path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,x_norm,bound,margin")?;
        for ((t, a), b) in times.iter().zip(&self.actual).zip(&self.bound) {
            writeln!(out, "{t},{a},{b},{}", b - a)?;
        }
        Ok(())
    }
}

/// Trigger-layer guarantees observed on one rollout.
#[derive(Debug, Clone, Copy)]
pub struct TriggerGuaranteeReport {
    /// eps <= delta(t) <= sigma + eps held at every recorded step.
    pub delta_in_range: bool,
    pub delta_min: f64,
    pub delta_max: f64,
    /// Smallest same-agent inter-event gap (horizon when fewer than two
    /// events exist anywhere).
    pub min_gap: f64,
    /// min_gap is at least one grid step.
    pub spacing_ok: bool,
}

/// Check threshold range and event spacing on a rollout with event logs and
/// an eta trace.
pub fn check_trigger_guarantees(rollout: &RolloutResult) -> TriggerGuaranteeReport {
    let policy = &rollout.policy;
    let mut delta_min = f64::INFINITY;
    let mut delta_max = f64::NEG_INFINITY;
    for etas in &rollout.eta_trace {
        for &eta in etas {
            let d = policy.delta(eta);
            delta_min = delta_min.min(d);
            delta_max = delta_max.max(d);
        }
    }
    let delta_in_range = delta_min >= policy.epsilon && delta_max <= policy.sigma + policy.epsilon;
    let stats = inter_event_statistics(&rollout.events, rollout.horizon);
    TriggerGuaranteeReport {
        delta_in_range,
        delta_min,
        delta_max,
        min_gap: stats.min_gap,
        spacing_ok: stats.min_gap >= rollout.step - 1e-12,
    }
}

/// Largest pairwise sup-distance between per-agent eta traces. Zero means
/// all agents produced identical traces.
pub fn eta_trace_spread(rollout: &RolloutResult) -> f64 {
    let n = rollout.n_agents();
    let mut spread = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let mut d = 0.0f64;
            for etas in &rollout.eta_trace {
                d = d.max((etas[i] - etas[j]).abs());
            }
            spread = spread.max(d);
        }
    }
    spread
}

/// Distribution statistics of one metric over a test batch.
#[derive(Debug, Clone)]
pub struct DistStats {
    pub mean: f64,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Vec<HistBin>,
}

#[derive(Debug, Clone, Copy)]
pub struct HistBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub n_sequences: usize,
    pub rel_error: DistStats,
    pub comm_rate: DistStats,
}

/// Per-lambda distributions of relative error and communication rate over a
/// shared test batch, with histogram bins aligned across lambdas so the
/// emitted CSV is directly plottable.
#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub entries: Vec<LambdaSummary>,
    pub n_bins: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn dist_stats(values: &[f64], lo: f64, hi: f64, n_bins: usize) -> DistStats {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let width = if hi > lo {
        (hi - lo) / n_bins as f64
    } else {
        1.0
    };
    let mut histogram: Vec<HistBin> = (0..n_bins)
        .map(|b| HistBin {
            left: lo + b as f64 * width,
            right: lo + (b + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        histogram[b].count += 1;
    }
    DistStats {
        mean,
        median: quantile(&sorted, 0.5),
        q10: quantile(&sorted, 0.1),
        q90: quantile(&sorted, 0.9),
        min: sorted[0],
        max: *sorted.last().unwrap(),
        histogram,
    }
}

/// Aggregate per-lambda cost breakdowns into distribution summaries.
pub fn lambda_sweep_summary(results: &[(f64, Vec<CostBreakdown>)]) -> Result<SweepSummary> {
    if results.len() < 2 {
        return Err(Error::InvalidParameter(
            "sweep summary needs at least two lambda values".into(),
        ));
    }
    if results.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::InvalidParameter(
            "empty result list for a lambda".into(),
        ));
    }
    let n_bins = 20;
    let all_rel: Vec<f64> = results
        .iter()
        .flat_map(|(_, v)| v.iter().map(|c| c.rel_error))
        .collect();
    let all_comm: Vec<f64> = results
        .iter()
        .flat_map(|(_, v)| v.iter().map(|c| c.comm_rate))
        .collect();
    let bounds = |vals: &[f64]| {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (rlo, rhi) = bounds(&all_rel);
    let (clo, chi) = bounds(&all_comm);

    let entries = results
        .iter()
        .map(|(lambda, costs)| {
            let rel: Vec<f64> = costs.iter().map(|c| c.rel_error).collect();
            let comm: Vec<f64> = costs.iter().map(|c| c.comm_rate).collect();
            LambdaSummary {
                lambda: *lambda,
                n_sequences: costs.len(),
                rel_error: dist_stats(&rel, rlo, rhi, n_bins),
                comm_rate: dist_stats(&comm, clo, chi, n_bins),
            }
        })
        .collect();
    Ok(SweepSummary { entries, n_bins })
}

impl SweepSummary {
    /// Plot-ready CSV: lambda, bin_left, bin_right, count, metric.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "lambda,bin_left,bin_right,count,metric")?;
        for e in &self.entries {
            for b in &e.rel_error.histogram {
                writeln!(out, "{},{},{},{},E_r", e.lambda, b.left, b.right, b.count)?;
            }
            for b in &e.comm_rate.histogram {
                writeln!(out, "{},{},{},{},C", e.lambda, b.left, b.right, b.count)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etm::{ThresholdSource, TriggerMode, TriggerPolicy};
    use crate::graph::{complete, path};
    use crate::protocols::{rollout_hard, InitMode};
    use crate::signals::generate_sinusoid_batch;

    fn fixed_hard(sigma: f64, epsilon: f64, eta: f64) -> TriggerPolicy {
        TriggerPolicy::new(
            sigma,
            epsilon,
            100.0,
            TriggerMode::Hard,
            ThresholdSource::Fixed(eta),
        )
        .unwrap()
    }

    #[test]
    fn vanishing_threshold_and_rate_pins_disagreement_near_zero() {
        // Identical constant signals, identical starts: x stays at 0 and the
        // envelope degenerates to (lambda_max/lambda2) * eps.
        let mut batch =
            generate_sinusoid_batch(1, 3, 0.5, 1e-3, (2.0, 2.0), (0.0, 0.0), 1).unwrap();
        let common = batch.values[0][0].clone();
        for a in 0..3 {
            batch.values[0][a] = common.clone();
            batch.derivatives[0][a] = vec![0.0; common.len()];
        }
        let g = complete(3).unwrap();
        let cfg = ProtocolConfig::Linear { kappa: 5.0 };
        let policy = fixed_hard(0.0, 1e-9, 0.0);
        let r = rollout_hard(&g, &cfg, &policy, InitMode::Reference, &batch, 0, None).unwrap();
        let tol = default_bound_tolerance(&g, 5.0, 0.0, 1e-9, batch.step);
        let rep = check_linear_bound(&r, &g, 5.0, 0.0, 1e-9, 0.0, tol).unwrap();
        assert!(!rep.violated);
        assert!(rep.actual.iter().all(|&x| x < 1e-12));
        let expected_tail = g.lambda_max / g.lambda2 * 1e-9;
        assert!((rep.bound.last().unwrap() - expected_tail).abs() < 1e-12);
    }

    #[test]
    fn paper_regime_asymptote_plugin_arithmetic() {
        // Complete 5-graph, kappa 5, sigma+eps 0.101, R = 1:
        // constant part = 1 * 0.101 + sqrt(5)/25.
        let g = complete(5).unwrap();
        let batch = generate_sinusoid_batch(1, 5, 0.2, 1e-3, (1.0, 5.0), (1.0, 1.0), 3).unwrap();
        let cfg = ProtocolConfig::Linear { kappa: 5.0 };
        let policy = fixed_hard(0.1, 0.001, 1.0);
        let r = rollout_hard(&g, &cfg, &policy, InitMode::Reference, &batch, 0, None).unwrap();
        let tol = default_bound_tolerance(&g, 5.0, 0.1, 0.001, batch.step);
        let rep = check_linear_bound(&r, &g, 5.0, 0.1, 0.001, batch.rate_bound, tol).unwrap();
        let constant_part = 1.0 * 0.101 + 5f64.sqrt() / 25.0;
        assert!((constant_part - 0.1904).abs() < 1e-4);
        let tail = rep.bound.last().unwrap() - (-5.0 * g.lambda2 * 0.2).exp() * rep.actual[0];
        assert!((tail - constant_part).abs() < 1e-9);
        assert!(!rep.violated, "max violation {}", rep.max_violation);
    }

    #[test]
    fn adversarial_fixed_eta_rollouts_respect_envelope() {
        let g = complete(5).unwrap();
        let cfg = ProtocolConfig::Linear { kappa: 5.0 };
        for seed in 0..10u64 {
            let batch =
                generate_sinusoid_batch(1, 5, 1.0, 1e-3, (1.0, 5.0), (0.0, 1.0), seed).unwrap();
            for eta in [0.0, 1.0] {
                let policy = fixed_hard(0.1, 0.001, eta);
                let r =
                    rollout_hard(&g, &cfg, &policy, InitMode::Reference, &batch, 0, None).unwrap();
                let tol = default_bound_tolerance(&g, 5.0, 0.1, 0.001, batch.step);
                let rep =
                    check_linear_bound(&r, &g, 5.0, 0.1, 0.001, batch.rate_bound, tol).unwrap();
                assert!(
                    !rep.violated,
                    "seed {seed} eta {eta}: violation {} at t={}",
                    rep.max_violation, rep.worst_time
                );
            }
        }
    }

    #[test]
    fn bound_rejects_wrong_protocol_or_gain() {
        let batch = generate_sinusoid_batch(1, 2, 0.1, 1e-3, (1.0, 5.0), (0.0, 1.0), 5).unwrap();
        let g = path(2).unwrap();
        let sliding = ProtocolConfig::SlidingMode {
            gains: vec![2.0, 4.0],
            order: 1,
        };
        let policy = fixed_hard(0.1, 0.001, 0.5);
        let r = rollout_hard(&g, &sliding, &policy, InitMode::Reference, &batch, 0, None).unwrap();
        assert!(check_linear_bound(&r, &g, 5.0, 0.1, 0.001, 1.0, 1e-3).is_err());

        let linear = ProtocolConfig::Linear { kappa: 5.0 };
        let r2 = rollout_hard(&g, &linear, &policy, InitMode::Reference, &batch, 0, None).unwrap();
        assert!(check_linear_bound(&r2, &g, 4.0, 0.1, 0.001, 1.0, 1e-3).is_err());
    }

    #[test]
    fn trigger_guarantees_for_constant_eta() {
        let batch = generate_sinusoid_batch(1, 3, 0.5, 1e-3, (1.0, 5.0), (0.0, 1.0), 9).unwrap();
        let g = path(3).unwrap();
        let cfg = ProtocolConfig::Linear { kappa: 5.0 };
        for (eta, expect) in [(0.0, 0.001), (1.0, 0.101)] {
            let policy = fixed_hard(0.1, 0.001, eta);
            let r = rollout_hard(&g, &cfg, &policy, InitMode::Reference, &batch, 0, None).unwrap();
            let rep = check_trigger_guarantees(&r);
            assert!(rep.delta_in_range);
            assert!((rep.delta_min - expect).abs() < 1e-15);
            assert!((rep.delta_max - expect).abs() < 1e-15);
            assert!(rep.spacing_ok);
        }
    }

    #[test]
    fn sweep_summary_identical_inputs_identical_distributions() {
        let costs: Vec<CostBreakdown> = (0..40)
            .map(|i| {
                let c = i as f64 / 40.0;
                CostBreakdown {
                    mse: 1.0,
                    comm_rate: c,
                    mse_fc: 0.5,
                    rel_error: 1.0 - c,
                    total: 1.0,
                    lambda: 0.1,
                }
            })
            .collect();
        let summary =
            lambda_sweep_summary(&[(0.001, costs.clone()), (1.0, costs.clone())]).unwrap();
        let a = &summary.entries[0];
        let b = &summary.entries[1];
        assert_eq!(a.comm_rate.mean, b.comm_rate.mean);
        assert_eq!(a.rel_error.median, b.rel_error.median);
        let mass: usize = a.comm_rate.histogram.iter().map(|h| h.count).sum();
        assert_eq!(mass, 40);
        assert!(a
            .comm_rate
            .histogram
            .iter()
            .zip(&b.comm_rate.histogram)
            .all(|(x, y)| x.count == y.count));
    }

    #[test]
    fn sweep_summary_input_validation() {
        assert!(lambda_sweep_summary(&[]).is_err());
        let one = vec![(
            0.1,
            vec![CostBreakdown {
                mse: 1.0,
                comm_rate: 0.5,
                mse_fc: 0.5,
                rel_error: 1.0,
                total: 1.05,
                lambda: 0.1,
            }],
        )];
        assert!(lambda_sweep_summary(&one).is_err());
        let empty = vec![(0.1, Vec::new()), (1.0, Vec::new())];
        assert!(lambda_sweep_summary(&empty).is_err());
    }

    #[test]
    fn eta_spread_zero_for_fixed_source_positive_for_learned() {
        let batch = generate_sinusoid_batch(1, 3, 0.3, 1e-3, (1.0, 5.0), (0.0, 1.0), 15).unwrap();
        let g = path(3).unwrap();
        let cfg = ProtocolConfig::Linear { kappa: 5.0 };
        let fixed = fixed_hard(0.1, 0.001, 0.5);
        let r = rollout_hard(&g, &cfg, &fixed, InitMode::Reference, &batch, 0, None).unwrap();
        assert_eq!(eta_trace_spread(&r), 0.0);

        let params = crate::neural::MlpParameters::new_random(&[2, 8, 1], 2).unwrap();
        let learned = TriggerPolicy::new(
            0.1,
            0.001,
            100.0,
            TriggerMode::Hard,
            ThresholdSource::Learned,
        )
        .unwrap();
        let r2 = rollout_hard(
            &g,
            &cfg,
            &learned,
            InitMode::Reference,
            &batch,
            0,
            Some(&params),
        )
        .unwrap();
        assert!(eta_trace_spread(&r2) > 0.0);
    }
}
