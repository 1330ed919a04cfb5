//! Training pipeline: pre-train the shared network to a constant output,
//! then run epochs of fuzzy rollouts over a pre-generated signal batch,
//! backpropagate the cost through the whole simulation, and take one
//! optimizer step per epoch.
//!
//! The fuzzy rollout is written once, generic over [`Scalar`], so the
//! recorded (differentiable) training path and the plain-float evaluation
//! path share every formula. In fuzzy mode the trigger's if/else is replaced
//! by nu = sigmoid(alpha (err - delta)); held broadcasts, last-event times
//! and the per-agent event count are all blended by nu, which keeps the
//! entire rollout differentiable. Hard integer counts are reported at
//! evaluation time instead.

use crate::error::{Error, Result};
use crate::etm::{ThresholdSource, TriggerMode, TriggerPolicy};
use crate::graph::NetworkGraph;
use crate::neural::{adam_step, AdamState, GradientTape, MlpGradients, MlpParameters, Var};
use crate::num::Scalar;
use crate::parallel::parallel_map;
use crate::protocols::{
    full_communication_rollout, linear_update, neighbor_disagreement, InitMode, ProtocolConfig,
    RolloutResult,
};
use crate::signals::SignalBatch;

/// Floor under the full-communication baseline error; anything below it is
/// treated as a degenerate baseline rather than divided by.
pub const BASELINE_FLOOR: f64 = 1e-12;

/// Cost pieces for one rollout against its full-communication baseline.
#[derive(Debug, Clone, Copy)]
pub struct CostBreakdown {
    /// Mean squared deviation of agents from their instantaneous average.
    pub mse: f64,
    /// Events per agent per step, in [0, 1].
    pub comm_rate: f64,
    /// Baseline mean squared error at full communication.
    pub mse_fc: f64,
    /// (mse - mse_fc) / mse_fc
    pub rel_error: f64,
    /// rel_error + lambda * comm_rate
    pub total: f64,
    pub lambda: f64,
}

/// Mean squared deviation from the rollout's own instantaneous average,
/// normalized as h/(N T) over all grid points and agents. Since T is an
/// integer multiple of h, the factor is computed as 1/(N K) with K = T/h,
/// which keeps the normalization exact in floating point.
#[allow(clippy::needless_range_loop)]
pub fn rollout_mse(rollout: &RolloutResult) -> f64 {
    let n = rollout.n_agents();
    let dim = rollout.states[0][0].len();
    let k_steps = rollout.times.len() - 1;
    let mut acc = 0.0;
    for (k, step_states) in rollout.states.iter().enumerate() {
        for z in step_states {
            for c in 0..dim {
                let d = rollout.consensus_avg[k][c] - z[c];
                acc += d * d;
            }
        }
    }
    acc / (n as f64 * k_steps as f64)
}

/// Evaluate the trade-off cost of an event-triggered rollout against its
/// full-communication baseline on the same sequence.
pub fn compute_cost(
    rollout: &RolloutResult,
    baseline: &RolloutResult,
    lambda: f64,
) -> Result<CostBreakdown> {
    if lambda < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    if rollout.times.len() != baseline.times.len()
        || rollout.n_agents() != baseline.n_agents()
        || (rollout.step - baseline.step).abs() > 1e-15
    {
        return Err(Error::DimensionMismatch {
            expected: baseline.times.len(),
            got: rollout.times.len(),
            context: "rollout/baseline grids",
        });
    }
    let mse = rollout_mse(rollout);
    let mse_fc = rollout_mse(baseline);
    if mse_fc < BASELINE_FLOOR {
        return Err(Error::DegenerateBaseline(mse_fc));
    }
    let n = rollout.n_agents() as f64;
    let k_steps = (rollout.times.len() - 1) as f64;
    let events: f64 = (0..rollout.n_agents())
        .map(|i| rollout.comm_events(i))
        .sum();
    let comm_rate = events / (n * k_steps);
    let rel_error = (mse - mse_fc) / mse_fc;
    let total = rel_error + lambda * comm_rate;
    Ok(CostBreakdown {
        mse,
        comm_rate,
        mse_fc,
        rel_error,
        total,
        lambda,
    })
}

/// Accumulators produced by one fuzzy rollout.
pub struct FuzzyRollout<V: Scalar> {
    /// Eq.-style mean squared deviation from the instantaneous average.
    pub mse: V,
    /// Blended communication rate in [0, 1].
    pub comm_rate: V,
    /// Mean of (eta - target)^2 over all agents and grid points.
    pub eta_dev_sq_mean: V,
    /// f64 snapshots for checks and trace export.
    pub states_trace: Vec<Vec<f64>>,
    pub broadcast_trace: Vec<Vec<f64>>,
    pub eta_trace: Vec<Vec<f64>>,
    pub nu_sums: Vec<f64>,
    pub consensus_avg: Vec<f64>,
    pub disagreement_norm: Vec<f64>,
}

/// Run the sigmoid-blended rollout of the linear protocol, generic over the
/// scalar type. `lift` introduces constants (initial conditions), `eta_fn`
/// produces eta from the two local features.
#[allow(clippy::too_many_arguments)]
pub fn fuzzy_rollout<V, L, E>(
    graph: &NetworkGraph,
    kappa: f64,
    policy: &TriggerPolicy,
    init: InitMode,
    batch: &SignalBatch,
    seq: usize,
    pretrain_target: f64,
    lift: L,
    eta_fn: E,
) -> Result<FuzzyRollout<V>>
where
    V: Scalar,
    L: Fn(f64) -> V,
    E: Fn(usize, [V; 2]) -> Result<V>,
{
    if policy.mode != TriggerMode::Fuzzy {
        return Err(Error::InvalidParameter(
            "fuzzy rollout requires a fuzzy-mode trigger policy".into(),
        ));
    }
    if graph.n_agents != batch.n_agents {
        return Err(Error::DimensionMismatch {
            expected: graph.n_agents,
            got: batch.n_agents,
            context: "batch agent count",
        });
    }
    let n = graph.n_agents;
    let h = batch.step;
    let n_steps = batch.n_steps();
    let (sigma, eps, alpha) = (policy.sigma, policy.epsilon, policy.alpha);

    let r0: Vec<f64> = (0..n).map(|i| batch.values[seq][i][0]).collect();
    let mean_r0 = r0.iter().sum::<f64>() / n as f64;
    let off = match init {
        InitMode::Reference => 0.0,
        InitMode::ZeroSum => mean_r0,
    };
    let mut z: Vec<V> = r0.iter().map(|&r| lift(r - off)).collect();
    let mut held: Vec<V> = z.clone();
    let mut tau: Vec<V> = (0..n).map(|_| lift(0.0)).collect();
    let mut nu_sum: Vec<Option<V>> = vec![None; n];

    let mut states_trace = Vec::with_capacity(n_steps + 1);
    let mut broadcast_trace = Vec::with_capacity(n_steps + 1);
    let mut eta_trace = Vec::with_capacity(n_steps + 1);
    let mut consensus_avg = Vec::with_capacity(n_steps + 1);
    let mut disagreement_norm = Vec::with_capacity(n_steps + 1);

    let mut mse_acc: Option<V> = None;
    let mut eta_dev_acc: Option<V> = None;
    let add_to = |acc: &mut Option<V>, v: V| {
        *acc = Some(match acc.take() {
            Some(a) => a.add(v),
            None => v,
        });
    };

    let record = |z: &[V],
                  held: &[V],
                  etas: &[f64],
                  avg: V,
                  states_trace: &mut Vec<Vec<f64>>,
                  broadcast_trace: &mut Vec<Vec<f64>>,
                  eta_trace: &mut Vec<Vec<f64>>,
                  consensus_avg: &mut Vec<f64>,
                  disagreement_norm: &mut Vec<f64>| {
        states_trace.push(z.iter().map(|v| v.val()).collect());
        broadcast_trace.push(held.iter().map(|v| v.val()).collect());
        eta_trace.push(etas.to_vec());
        let a = avg.val();
        consensus_avg.push(a);
        disagreement_norm.push(z.iter().map(|v| (v.val() - a).powi(2)).sum::<f64>().sqrt());
    };

    // Grid point 0: eta is recorded and enters the pretraining objective,
    // but the freshly initialized broadcasts make any trigger a no-op.
    let mut etas = vec![0.0; n];
    {
        let avg = average(&z);
        for i in 0..n {
            let f0 = neighbor_disagreement(z[i], &held, graph, i);
            let f1 = lift(0.0);
            let eta = eta_fn(i, [f0, f1])?;
            etas[i] = eta.val();
            add_to(&mut eta_dev_acc, eta.offset(-pretrain_target).sq());
            let d = avg.sub(z[i]);
            add_to(&mut mse_acc, d.sq());
        }
        record(
            &z,
            &held,
            &etas,
            avg,
            &mut states_trace,
            &mut broadcast_trace,
            &mut eta_trace,
            &mut consensus_avg,
            &mut disagreement_norm,
        );
    }

    for k in 1..=n_steps {
        let dr: Vec<f64> = (0..n)
            .map(|i| (batch.values[seq][i][k] - batch.values[seq][i][k - 1]) / h)
            .collect();
        z = linear_update(&z, &held, &dr, graph, kappa, h);

        let t = k as f64 * h;
        let pre = held.clone();
        for i in 0..n {
            let f0 = neighbor_disagreement(z[i], &pre, graph, i);
            let f1 = tau[i].scale(-1.0).offset(t);
            let eta = eta_fn(i, [f0, f1])?;
            etas[i] = eta.val();
            add_to(&mut eta_dev_acc, eta.offset(-pretrain_target).sq());

            let delta = eta.scale(sigma).offset(eps);
            let err = z[i].sub(pre[i]).abs();
            let nu = err.sub(delta).scale(alpha).logistic();
            // Blend of the event/no-event outcomes for broadcast, event time
            // and event count.
            held[i] = nu.mul(z[i].sub(pre[i])).add(pre[i]);
            tau[i] = nu.mul(tau[i].scale(-1.0).offset(t)).add(tau[i]);
            add_to(&mut nu_sum[i], nu);
        }
        let avg = average(&z);
        for zi in &z {
            let d = avg.sub(*zi);
            add_to(&mut mse_acc, d.sq());
        }
        record(
            &z,
            &held,
            &etas,
            avg,
            &mut states_trace,
            &mut broadcast_trace,
            &mut eta_trace,
            &mut consensus_avg,
            &mut disagreement_norm,
        );
    }

    let norm = 1.0 / (n as f64 * n_steps as f64);
    let mse = mse_acc.expect("at least one grid point").scale(norm);
    let comm_rate = nu_sum
        .iter()
        .fold(None::<V>, |acc, s| {
            let s = s.expect("n_steps >= 1 gives every agent a blend sum");
            Some(match acc {
                Some(a) => a.add(s),
                None => s,
            })
        })
        .expect("at least one agent")
        .scale(norm);
    let eta_dev_sq_mean = eta_dev_acc
        .expect("accumulated")
        .scale(1.0 / (n as f64 * (n_steps + 1) as f64));

    Ok(FuzzyRollout {
        mse,
        comm_rate,
        eta_dev_sq_mean,
        nu_sums: nu_sum.iter().map(|s| s.unwrap().val()).collect(),
        states_trace,
        broadcast_trace,
        eta_trace,
        consensus_avg,
        disagreement_norm,
    })
}

fn average<V: Scalar>(z: &[V]) -> V {
    let mut acc = z[0];
    for v in &z[1..] {
        acc = acc.add(*v);
    }
    acc.scale(1.0 / z.len() as f64)
}

/// Plain-float fuzzy rollout packaged as a [`RolloutResult`], with the
/// blended per-agent event counts in `nu_sums`.
pub fn rollout_fuzzy(
    graph: &NetworkGraph,
    config: &ProtocolConfig,
    policy: &TriggerPolicy,
    init: InitMode,
    batch: &SignalBatch,
    seq: usize,
    params: Option<&MlpParameters>,
) -> Result<RolloutResult> {
    let ProtocolConfig::Linear { kappa } = config else {
        return Err(Error::InvalidParameter(
            "fuzzy rollouts support the linear protocol only".into(),
        ));
    };
    config.validate()?;
    let eta_fn = |_: usize, f: [f64; 2]| -> Result<f64> {
        match policy.source {
            ThresholdSource::Fixed(v) => Ok(v),
            ThresholdSource::Learned => params
                .ok_or_else(|| {
                    Error::InvalidParameter(
                        "learned threshold source requires network parameters".into(),
                    )
                })?
                .forward(&f),
        }
    };
    let fr = fuzzy_rollout(graph, *kappa, policy, init, batch, seq, 0.5, |c| c, eta_fn)?;

    let n = graph.n_agents;
    Ok(RolloutResult {
        times: batch.times(),
        states: fr
            .states_trace
            .iter()
            .map(|step| step.iter().map(|&v| vec![v]).collect())
            .collect(),
        broadcasts: fr.broadcast_trace,
        events: vec![Vec::new(); n],
        eta_trace: fr.eta_trace,
        consensus_avg: fr.consensus_avg.iter().map(|&a| vec![a]).collect(),
        disagreement_norm: fr.disagreement_norm,
        nu_sums: Some(fr.nu_sums),
        params_version: params.map(|p| p.version()),
        config: config.clone(),
        policy: *policy,
        horizon: batch.horizon,
        step: batch.step,
    })
}

/// Per-epoch cost record.
#[derive(Debug, Clone, Copy)]
pub struct EpochCost {
    pub epoch: usize,
    /// Batch-accumulated cost (sum over sequences).
    pub total: f64,
    pub mean_rel_error: f64,
    pub mean_comm_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub cost_trace: Vec<EpochCost>,
    /// Set when an epoch produced a non-finite cost or gradient; parameters
    /// are restored to the last set that produced a finite cost.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub epochs_run: usize,
    pub final_mean_abs_dev: f64,
    pub converged: bool,
}

/// Knobs of the epoch loop shared by pre-training and training.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub pretrain_target: f64,
    pub grad_clip: f64,
    pub threads: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lambda: 0.1,
            learning_rate: 5e-2,
            epochs: 150,
            pretrain_epochs: 200,
            pretrain_target: 0.5,
            grad_clip: 10.0,
            threads: 1,
        }
    }
}

/// Full-communication baseline errors, one per sequence. Policy-independent,
/// so callers compute them once and reuse them across epochs and policies.
pub fn baseline_mse(
    graph: &NetworkGraph,
    config: &ProtocolConfig,
    init: InitMode,
    batch: &SignalBatch,
    threads: usize,
) -> Result<Vec<f64>> {
    let res = parallel_map(batch.batch_size, threads, |s| {
        full_communication_rollout(graph, config, init, batch, s).map(|r| rollout_mse(&r))
    });
    res.into_iter().collect()
}

fn check_trainable(policy: &TriggerPolicy) -> Result<()> {
    if policy.mode != TriggerMode::Fuzzy {
        return Err(Error::InvalidParameter(
            "training requires a fuzzy-mode policy".into(),
        ));
    }
    if policy.source != ThresholdSource::Learned {
        return Err(Error::InvalidParameter(
            "training requires the learned threshold source".into(),
        ));
    }
    Ok(())
}

struct SeqGrad {
    cost: f64,
    rel_error: f64,
    comm_rate: f64,
    mean_abs_dev: f64,
    grads: Result<MlpGradients>,
    version: u64,
}

/// Run one fuzzy rollout recorded on a tape, with eta coming from the
/// shared network. This is the differentiable path used by training and by
/// gradient-verification tests.
#[allow(clippy::too_many_arguments)]
pub fn tape_rollout<'t>(
    tape: &'t GradientTape,
    params: &MlpParameters,
    graph: &NetworkGraph,
    kappa: f64,
    policy: &TriggerPolicy,
    init: InitMode,
    batch: &SignalBatch,
    seq: usize,
    pretrain_target: f64,
) -> Result<FuzzyRollout<Var<'t>>> {
    let eta_fn = move |_: usize, f: [Var<'t>; 2]| tape.mlp(params, f);
    fuzzy_rollout(
        graph,
        kappa,
        policy,
        init,
        batch,
        seq,
        pretrain_target,
        |c| tape.leaf(c),
        eta_fn,
    )
}

#[allow(clippy::too_many_arguments)]
fn epoch_pass(
    params: &MlpParameters,
    graph: &NetworkGraph,
    kappa: f64,
    policy: &TriggerPolicy,
    init: InitMode,
    batch: &SignalBatch,
    baselines: Option<&[f64]>,
    settings: &TrainSettings,
    pretrain: bool,
) -> Vec<SeqGrad> {
    parallel_map(batch.batch_size, settings.threads, |s| {
        let tape = GradientTape::new();
        let fr = match tape_rollout(
            &tape,
            params,
            graph,
            kappa,
            policy,
            init,
            batch,
            s,
            settings.pretrain_target,
        ) {
            Ok(fr) => fr,
            Err(e) => {
                return SeqGrad {
                    cost: f64::NAN,
                    rel_error: f64::NAN,
                    comm_rate: f64::NAN,
                    mean_abs_dev: f64::NAN,
                    grads: Err(e),
                    version: params.version(),
                }
            }
        };
        let cost_var = if pretrain {
            fr.eta_dev_sq_mean
        } else {
            let efc = baselines.expect("baselines required for training")[s];
            let rel = fr.mse.offset(-efc).scale(1.0 / efc);
            rel.add(fr.comm_rate.scale(settings.lambda))
        };
        let dev: f64 = fr
            .eta_trace
            .iter()
            .flatten()
            .map(|e| (e - settings.pretrain_target).abs())
            .sum::<f64>()
            / (fr.eta_trace.len() * graph.n_agents) as f64;
        let rel_error = if pretrain {
            0.0
        } else {
            let efc = baselines.unwrap()[s];
            (fr.mse.val() - efc) / efc
        };
        SeqGrad {
            cost: cost_var.val(),
            rel_error,
            comm_rate: fr.comm_rate.val(),
            mean_abs_dev: dev,
            grads: tape.backward(cost_var, params),
            version: params.version(),
        }
    })
}

/// Reduce per-sequence results in sequence order; returns the summed batch
/// gradient and cost, or a diagnostic when anything is non-finite.
fn reduce_epoch(
    params: &MlpParameters,
    results: Vec<SeqGrad>,
) -> std::result::Result<(MlpGradients, f64, f64, f64, f64), String> {
    let mut grads = MlpGradients::zeros_like(params);
    let mut total = 0.0;
    let mut rel = 0.0;
    let mut comm = 0.0;
    let mut dev = 0.0;
    let n = results.len() as f64;
    for (s, r) in results.into_iter().enumerate() {
        if r.version != params.version() {
            return Err(format!(
                "parameter sharing broken: sequence {s} saw version {} != {}",
                r.version,
                params.version()
            ));
        }
        match r.grads {
            Ok(g) if g.is_finite() && r.cost.is_finite() => {
                grads.add_assign(&g);
                total += r.cost;
                rel += r.rel_error;
                comm += r.comm_rate;
                dev += r.mean_abs_dev;
            }
            Ok(_) => return Err(format!("non-finite cost or gradient in sequence {s}")),
            Err(e) => return Err(format!("sequence {s}: {e}")),
        }
    }
    Ok((grads, total, rel / n, comm / n, dev / n))
}

/// Pre-training: drive the network output toward a constant target at every
/// step of every fuzzy rollout in the batch.
pub fn pretrain(
    params: &mut MlpParameters,
    graph: &NetworkGraph,
    config: &ProtocolConfig,
    policy: &TriggerPolicy,
    init: InitMode,
    batch: &SignalBatch,
    settings: &TrainSettings,
) -> Result<PretrainOutcome> {
    check_trainable(policy)?;
    let ProtocolConfig::Linear { kappa } = config else {
        return Err(Error::InvalidParameter(
            "training supports the linear protocol only".into(),
        ));
    };
    if !(0.0..=1.0).contains(&settings.pretrain_target) {
        return Err(Error::InvalidParameter(
            "pretrain target must be in [0,1]".into(),
        ));
    }
    let mut adam = AdamState::new(params);
    let mut last_dev = f64::INFINITY;
    let mut epochs_run = 0;
    for _ in 0..settings.pretrain_epochs {
        let results = epoch_pass(
            params, graph, *kappa, policy, init, batch, None, settings, true,
        );
        let (mut grads, _total, _rel, _comm, dev) =
            reduce_epoch(params, results).map_err(Error::NonFinite)?;
        // The measured deviation belongs to the current parameters; once it
        // is comfortably inside the target band, stop before stepping so
        // the returned weights match the reported deviation.
        last_dev = dev;
        if dev < 2.5e-3 {
            return Ok(PretrainOutcome {
                epochs_run,
                final_mean_abs_dev: dev,
                converged: true,
            });
        }
        grads.clip_global_norm(settings.grad_clip);
        adam_step(params, &grads, &mut adam, settings.learning_rate)?;
        epochs_run += 1;
    }
    // Budget exhausted: measure the deviation of the final parameters (the
    // loop's last measurement lags one optimizer step).
    if epochs_run > 0 {
        let results = epoch_pass(
            params, graph, *kappa, policy, init, batch, None, settings, true,
        );
        if let Ok((_, _, _, _, dev)) = reduce_epoch(params, results) {
            last_dev = dev;
        }
    }
    Ok(PretrainOutcome {
        epochs_run,
        final_mean_abs_dev: last_dev,
        converged: last_dev < 0.01,
    })
}

/// Epoch loop over the batch: fuzzy rollouts, cost, one backward
/// pass and one optimizer update per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train(
    params: &mut MlpParameters,
    graph: &NetworkGraph,
    config: &ProtocolConfig,
    policy: &TriggerPolicy,
    init: InitMode,
    batch: &SignalBatch,
    baselines: &[f64],
    settings: &TrainSettings,
    mut epoch_hook: impl FnMut(usize, &MlpParameters, &EpochCost),
) -> Result<TrainOutcome> {
    check_trainable(policy)?;
    let ProtocolConfig::Linear { kappa } = config else {
        return Err(Error::InvalidParameter(
            "training supports the linear protocol only".into(),
        ));
    };
    if baselines.len() != batch.batch_size {
        return Err(Error::DimensionMismatch {
            expected: batch.batch_size,
            got: baselines.len(),
            context: "baseline cache",
        });
    }
    if let Some(&bad) = baselines.iter().find(|&&b| b < BASELINE_FLOOR) {
        return Err(Error::DegenerateBaseline(bad));
    }

    let mut adam = AdamState::new(params);
    let mut cost_trace = Vec::with_capacity(settings.epochs);
    let mut last_verified: Option<MlpParameters> = None;

    for epoch in 0..settings.epochs {
        let results = epoch_pass(
            params,
            graph,
            *kappa,
            policy,
            init,
            batch,
            Some(baselines),
            settings,
            false,
        );
        match reduce_epoch(params, results) {
            Ok((mut grads, total, rel, comm, _dev)) => {
                let record = EpochCost {
                    epoch,
                    total,
                    mean_rel_error: rel,
                    mean_comm_rate: comm,
                };
                cost_trace.push(record);
                last_verified = Some(params.clone());
                grads.clip_global_norm(settings.grad_clip);
                adam_step(params, &grads, &mut adam, settings.learning_rate)?;
                epoch_hook(epoch, params, &record);
            }
            Err(msg) => {
                if let Some(good) = last_verified {
                    *params = good;
                }
                return Ok(TrainOutcome {
                    cost_trace,
                    aborted: Some(format!("epoch {epoch}: {msg}")),
                });
            }
        }
    }
    Ok(TrainOutcome {
        cost_trace,
        aborted: None,
    })
}
