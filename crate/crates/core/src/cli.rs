//! Command-line orchestration: generate signal batches, pretrain/train the
//! shared trigger network, evaluate policies on fresh batches, sweep the
//! communication weight, and check the runtime guarantees.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure,
//! 4 guarantee violation, 1 anything else.

use crate::analysis::{
    check_linear_bound, check_trigger_guarantees, default_bound_tolerance, eta_trace_spread,
    lambda_sweep_summary,
};
use crate::config::{RunConfig, SourceKind};
use crate::error::{Error, Result};
use crate::etm::{ThresholdSource, TriggerMode, TriggerPolicy};
use crate::graph::NetworkGraph;
use crate::neural::{FeatureScale, MlpParameters};
use crate::parallel::parallel_map;
use crate::protocols::{
    full_communication_rollout, rollout_features, rollout_hard, InitMode, ProtocolConfig,
};
use crate::signals::{export_batch_csv, SignalBatch};
use crate::training::{baseline_mse, compute_cost, pretrain, train, CostBreakdown};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

const USAGE: &str = "\
usage: evcon <command> [options]

commands:
  generate      write the configured signal batch as CSV files
  pretrain      pretrain the shared network to a constant output
  train         pretrain (unless --init-weights) then train; writes weights,
                checkpoints and the cost trace
  evaluate      run hard-mode rollouts of a policy on a fresh test batch,
                with cost rows and guarantee checks
  sweep         train one policy per lambda and evaluate all of them on a
                shared test batch
  check-bounds  verify the disagreement envelope and trigger guarantees

common options:
  --config PATH        run configuration file (required)
  --threads N          override [training] threads
  --out-dir DIR        override [output] dir

command options:
  generate:     --out DIR
  pretrain:     --out FILE
  train:        --init-weights FILE
  evaluate:     --weights FILE | --fixed-eta X | --full-comm,
                --sequences N, --seed S, --export-rollout K
  sweep:        --lambdas A,B,C [--eval-config PATH] --sequences N --seed S
  check-bounds: --weights FILE | --fixed-eta X, --adversarial,
                --sequences N, --seed S
";

/// Entry point used by the binary: parses argv (without the program name),
/// runs the command, maps errors to the exit-code contract.
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    match execute(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::InvalidEdge(..)
        | Error::TooFewAgents(_)
        | Error::DisconnectedGraph(_)
        | Error::DimensionMismatch { .. }
        | Error::UnsupportedOrder(..)
        | Error::WeightFormat(_)
        | Error::CsvFormat(_) => 2,
        Error::NonFinite(_) | Error::DegenerateBaseline(_) | Error::EigenNoConvergence(_) => 3,
        Error::GuaranteeViolation(_) => 4,
        Error::Io(_) => 1,
    }
}

struct Opts {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
}

const SWITCHES: &[&str] = &["--full-comm", "--adversarial"];

impl Opts {
    fn parse(args: &[String]) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut switches = Vec::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            if !arg.starts_with("--") {
                return Err(Error::Config(format!(
                    "unexpected argument {arg:?}\n{USAGE}"
                )));
            }
            if SWITCHES.contains(&arg.as_str()) {
                switches.push(arg.clone());
                continue;
            }
            let value = it
                .next()
                .ok_or_else(|| Error::Config(format!("missing value for {arg}")))?;
            values.insert(arg.clone(), value.clone());
        }
        Ok(Opts { values, switches })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn has(&self, key: &str) -> bool {
        self.switches.iter().any(|s| s == key)
    }

    fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}"))),
        }
    }
}

fn execute<I>(args: I) -> Result<()>
where
    I: IntoIterator<Item = String>,
{
    let args: Vec<String> = args.into_iter().collect();
    let Some(cmd) = args.first() else {
        return Err(Error::Config(format!("missing command\n{USAGE}")));
    };
    let opts = Opts::parse(&args[1..])?;
    match cmd.as_str() {
        "generate" => cmd_generate(&opts),
        "pretrain" => cmd_pretrain(&opts),
        "train" => cmd_train(&opts),
        "evaluate" => cmd_evaluate(&opts),
        "sweep" => cmd_sweep(&opts),
        "check-bounds" => cmd_check_bounds(&opts),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(Error::Config(format!("unknown command {other:?}\n{USAGE}"))),
    }
}

fn load_config(opts: &Opts) -> Result<RunConfig> {
    let path = opts
        .get("--config")
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(Path::new(path))?;
    if let Some(threads) = opts.get_parsed::<usize>("--threads")? {
        cfg.training.threads = threads.max(1);
    }
    if let Some(dir) = opts.get("--out-dir") {
        cfg.output.dir = PathBuf::from(dir);
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_generate(opts: &Opts) -> Result<()> {
    let cfg = load_config(opts)?;
    let dir = opts
        .get("--out")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output.dir.join("signals"));
    let batch = cfg.signals.generate(cfg.graph.n_agents())?;
    let paths = export_batch_csv(&batch, &dir)?;
    println!(
        "wrote {} sequence files ({} rows each) to {}",
        paths.len(),
        batch.n_steps() + 1,
        dir.display()
    );
    Ok(())
}

/// z-score statistics for the two features, estimated from hard rollouts of
/// the training batch under the constant pretraining threshold.
fn estimate_feature_scale(
    graph: &NetworkGraph,
    protocol: &ProtocolConfig,
    init: InitMode,
    batch: &SignalBatch,
    cfg: &RunConfig,
) -> Result<FeatureScale> {
    let pilot_policy = TriggerPolicy::new(
        cfg.trigger.sigma,
        cfg.trigger.epsilon,
        cfg.trigger.alpha,
        TriggerMode::Hard,
        ThresholdSource::Fixed(cfg.training.pretrain_target),
    )?;
    let mut count = 0usize;
    let mut mean = [0.0f64; 2];
    let mut m2 = [0.0f64; 2];
    for seq in 0..batch.batch_size {
        let r = rollout_hard(graph, protocol, &pilot_policy, init, batch, seq, None)?;
        for f in rollout_features(&r, graph) {
            let f = f.as_array();
            count += 1;
            for c in 0..2 {
                let d = f[c] - mean[c];
                mean[c] += d / count as f64;
                m2[c] += d * (f[c] - mean[c]);
            }
        }
    }
    let std: Vec<f64> = m2
        .iter()
        .map(|&s| (s / count.max(2) as f64).sqrt().max(1e-9))
        .collect();
    Ok(FeatureScale {
        mean: mean.to_vec(),
        std,
    })
}

fn init_params(cfg: &RunConfig) -> Result<MlpParameters> {
    MlpParameters::new_random(&cfg.nn.layer_dims, cfg.nn.init_seed)
}

fn cmd_pretrain(opts: &Opts) -> Result<()> {
    let cfg = load_config(opts)?;
    let out = opts
        .get("--out")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output.dir.join("weights_pretrained.txt"));
    let graph = cfg.graph.build()?;
    let protocol = cfg.protocol.to_config();
    let batch = cfg.signals.generate(graph.n_agents)?;
    let policy = cfg.trigger.with_mode(TriggerMode::Fuzzy)?;
    let settings = cfg.training.to_settings();

    let mut params = init_params(&cfg)?;
    if cfg.nn.zscore_features {
        let scale = estimate_feature_scale(&graph, &protocol, cfg.protocol.init, &batch, &cfg)?;
        params.set_feature_scale(Some(scale))?;
    }
    let outcome = pretrain(
        &mut params,
        &graph,
        &protocol,
        &policy,
        cfg.protocol.init,
        &batch,
        &settings,
    )?;
    ensure_dir(out.parent().unwrap_or(Path::new(".")))?;
    params.save(&out)?;
    println!(
        "pretrained {} epochs, mean |eta - {}| = {:.3e}{} -> {}",
        outcome.epochs_run,
        settings.pretrain_target,
        outcome.final_mean_abs_dev,
        if outcome.converged {
            ""
        } else {
            " (did not reach 0.01)"
        },
        out.display()
    );
    Ok(())
}

fn cmd_train(opts: &Opts) -> Result<()> {
    let cfg = load_config(opts)?;
    let out_dir = cfg.output.dir.clone();
    ensure_dir(&out_dir)?;
    let graph = cfg.graph.build()?;
    let protocol = cfg.protocol.to_config();
    let batch = cfg.signals.generate(graph.n_agents)?;
    let policy = cfg.trigger.with_mode(TriggerMode::Fuzzy)?;
    let settings = cfg.training.to_settings();

    let mut params = match opts.get("--init-weights") {
        Some(path) => {
            let p = MlpParameters::load(Path::new(path))?;
            if p.layer_dims() != cfg.nn.layer_dims.as_slice() {
                return Err(Error::DimensionMismatch {
                    expected: cfg.nn.layer_dims.len(),
                    got: p.layer_dims().len(),
                    context: "weight file layer dims vs nn spec",
                });
            }
            p
        }
        None => {
            let mut p = init_params(&cfg)?;
            if cfg.nn.zscore_features {
                let scale =
                    estimate_feature_scale(&graph, &protocol, cfg.protocol.init, &batch, &cfg)?;
                p.set_feature_scale(Some(scale))?;
            }
            let outcome = pretrain(
                &mut p,
                &graph,
                &protocol,
                &policy,
                cfg.protocol.init,
                &batch,
                &settings,
            )?;
            println!(
                "pretrain: {} epochs, mean |eta - {}| = {:.3e}",
                outcome.epochs_run, settings.pretrain_target, outcome.final_mean_abs_dev
            );
            p
        }
    };

    let baselines = baseline_mse(
        &graph,
        &protocol,
        cfg.protocol.init,
        &batch,
        settings.threads,
    )?;
    let interval = cfg.training.checkpoint_interval;
    let ckpt_dir = out_dir.clone();
    let outcome = train(
        &mut params,
        &graph,
        &protocol,
        &policy,
        cfg.protocol.init,
        &batch,
        &baselines,
        &settings,
        |epoch, p, _| {
            if interval > 0 && (epoch + 1) % interval == 0 {
                let _ = p.save(&ckpt_dir.join(format!("weights_epoch_{:04}.txt", epoch + 1)));
            }
        },
    )?;

    let weights_path = out_dir.join("weights_final.txt");
    params.save(&weights_path)?;
    let trace_path = out_dir.join("cost_trace.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&trace_path)?);
    writeln!(f, "epoch,total_cost,mean_rel_error,mean_comm_rate")?;
    for e in &outcome.cost_trace {
        writeln!(
            f,
            "{},{},{},{}",
            e.epoch, e.total, e.mean_rel_error, e.mean_comm_rate
        )?;
    }
    drop(f);

    if let Some(diag) = outcome.aborted {
        return Err(Error::NonFinite(format!(
            "training aborted ({diag}); last finite weights kept at {}",
            weights_path.display()
        )));
    }
    let last = outcome.cost_trace.last();
    println!(
        "trained {} epochs (lambda {}), final batch cost {} -> {}",
        outcome.cost_trace.len(),
        settings.lambda,
        last.map(|e| e.total.to_string())
            .unwrap_or_else(|| "n/a".into()),
        weights_path.display()
    );
    println!("cost trace -> {}", trace_path.display());
    Ok(())
}

/// Policy/parameter resolution shared by evaluate and check-bounds.
fn resolve_policy(cfg: &RunConfig, opts: &Opts) -> Result<(TriggerPolicy, Option<MlpParameters>)> {
    if let Some(eta) = opts.get_parsed::<f64>("--fixed-eta")? {
        let policy = TriggerPolicy::new(
            cfg.trigger.sigma,
            cfg.trigger.epsilon,
            cfg.trigger.alpha,
            TriggerMode::Hard,
            ThresholdSource::Fixed(eta),
        )?;
        return Ok((policy, None));
    }
    if let Some(path) = opts.get("--weights") {
        let params = MlpParameters::load(Path::new(path))?;
        if params.layer_dims() != cfg.nn.layer_dims.as_slice() {
            return Err(Error::DimensionMismatch {
                expected: cfg.nn.layer_dims.len(),
                got: params.layer_dims().len(),
                context: "weight file layer dims vs nn spec",
            });
        }
        let policy = TriggerPolicy::new(
            cfg.trigger.sigma,
            cfg.trigger.epsilon,
            cfg.trigger.alpha,
            TriggerMode::Hard,
            ThresholdSource::Learned,
        )?;
        return Ok((policy, Some(params)));
    }
    match cfg.trigger.source {
        SourceKind::Fixed => Ok((cfg.trigger.with_mode(TriggerMode::Hard)?, None)),
        SourceKind::Learned => Err(Error::Config(
            "learned threshold source needs --weights (or use --fixed-eta / --full-comm)".into(),
        )),
    }
}

struct EvalRow {
    seq: usize,
    cost: CostBreakdown,
    bound_margin: f64,
    bound_violated: bool,
    delta_ok: bool,
    min_gap: f64,
    spacing_ok: bool,
    eta_spread: f64,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_batch(
    graph: &NetworkGraph,
    protocol: &ProtocolConfig,
    init: InitMode,
    policy: &TriggerPolicy,
    params: Option<&MlpParameters>,
    batch: &SignalBatch,
    lambda: f64,
    threads: usize,
    full_comm: bool,
) -> Result<Vec<EvalRow>> {
    let kappa = match protocol {
        ProtocolConfig::Linear { kappa } => Some(*kappa),
        ProtocolConfig::SlidingMode { .. } => None,
    };
    let rows = parallel_map(batch.batch_size, threads, |seq| -> Result<EvalRow> {
        let baseline = full_communication_rollout(graph, protocol, init, batch, seq)?;
        let rollout = if full_comm {
            baseline.clone()
        } else {
            rollout_hard(graph, protocol, policy, init, batch, seq, params)?
        };
        let cost = compute_cost(&rollout, &baseline, lambda)?;
        let (bound_margin, bound_violated) = match kappa {
            Some(k) if !full_comm => {
                let tol =
                    default_bound_tolerance(graph, k, policy.sigma, policy.epsilon, batch.step);
                let rep = check_linear_bound(
                    &rollout,
                    graph,
                    k,
                    policy.sigma,
                    policy.epsilon,
                    batch.rate_bound,
                    tol,
                )?;
                (rep.max_violation, rep.violated)
            }
            _ => (f64::NEG_INFINITY, false),
        };
        let (delta_ok, min_gap, spacing_ok, eta_spread) = if full_comm {
            (true, batch.step, true, 0.0)
        } else {
            let rep = check_trigger_guarantees(&rollout);
            (
                rep.delta_in_range,
                rep.min_gap,
                rep.spacing_ok,
                eta_trace_spread(&rollout),
            )
        };
        Ok(EvalRow {
            seq,
            cost,
            bound_margin,
            bound_violated,
            delta_ok,
            min_gap,
            spacing_ok,
            eta_spread,
        })
    });
    rows.into_iter().collect()
}

fn write_metrics_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "seq,mse,mse_fc,rel_error,comm_rate,total,bound_margin,bound_violated,delta_in_range,min_gap,eta_spread"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.seq,
            r.cost.mse,
            r.cost.mse_fc,
            r.cost.rel_error,
            r.cost.comm_rate,
            r.cost.total,
            r.bound_margin,
            r.bound_violated,
            r.delta_ok,
            r.min_gap,
            r.eta_spread
        )?;
    }
    Ok(())
}

fn mean<F: Fn(&EvalRow) -> f64>(rows: &[EvalRow], f: F) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn guarantee_failures(rows: &[EvalRow]) -> usize {
    rows.iter()
        .filter(|r| r.bound_violated || !r.delta_ok || !r.spacing_ok)
        .count()
}

fn write_eval_summary(path: &Path, header: &str, rows: &[EvalRow], extra: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    writeln!(f, "sequences: {}", rows.len())?;
    writeln!(
        f,
        "mean rel_error: {:.6e}",
        mean(rows, |r| r.cost.rel_error)
    )?;
    writeln!(f, "mean comm_rate: {:.6}", mean(rows, |r| r.cost.comm_rate))?;
    writeln!(f, "mean total:     {:.6e}", mean(rows, |r| r.cost.total))?;
    let worst = rows
        .iter()
        .map(|r| r.bound_margin)
        .fold(f64::NEG_INFINITY, f64::max);
    writeln!(f, "worst bound margin (actual - envelope): {worst:.6e}")?;
    writeln!(f, "guarantee failures: {}", guarantee_failures(rows))?;
    for line in extra {
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn cmd_evaluate(opts: &Opts) -> Result<()> {
    let cfg = load_config(opts)?;
    let out_dir = cfg.output.dir.clone();
    ensure_dir(&out_dir)?;
    let graph = cfg.graph.build()?;
    let protocol = cfg.protocol.to_config();
    let sequences = opts.get_parsed::<usize>("--sequences")?.unwrap_or(200);
    let seed = opts
        .get_parsed::<u64>("--seed")?
        .unwrap_or(cfg.signals.seed.wrapping_add(7919));
    let batch = cfg.signals.generate_with(graph.n_agents, sequences, seed)?;
    let full_comm = opts.has("--full-comm");
    let (policy, params) = if full_comm {
        (cfg.trigger.with_mode(TriggerMode::Hard)?, None)
    } else {
        resolve_policy(&cfg, opts)?
    };

    let rows = evaluate_batch(
        &graph,
        &protocol,
        cfg.protocol.init,
        &policy,
        params.as_ref(),
        &batch,
        cfg.training.lambda,
        cfg.training.threads,
        full_comm,
    )?;

    let metrics_path = out_dir.join("metrics.csv");
    write_metrics_csv(&rows, &metrics_path)?;
    let summary_path = out_dir.join("summary.txt");
    write_eval_summary(
        &summary_path,
        &format!(
            "evaluation: {} agents, {} sequences, seed {seed}, lambda {}{}",
            graph.n_agents,
            sequences,
            cfg.training.lambda,
            if full_comm {
                ", full-communication baseline"
            } else {
                ""
            }
        ),
        &rows,
        &[],
    )?;

    if let Some(k) = opts.get_parsed::<usize>("--export-rollout")? {
        if k >= batch.batch_size {
            return Err(Error::Config(format!("--export-rollout {k} out of range")));
        }
        let r = if full_comm {
            full_communication_rollout(&graph, &protocol, cfg.protocol.init, &batch, k)?
        } else {
            rollout_hard(
                &graph,
                &protocol,
                &policy,
                cfg.protocol.init,
                &batch,
                k,
                params.as_ref(),
            )?
        };
        let p = out_dir.join(format!("rollout_{k:04}.csv"));
        r.export_csv(&p)?;
        println!("rollout trace -> {}", p.display());
    }

    println!(
        "evaluated {} sequences: mean rel_error {:.4e}, mean comm_rate {:.4}",
        rows.len(),
        mean(&rows, |r| r.cost.rel_error),
        mean(&rows, |r| r.cost.comm_rate)
    );
    println!("metrics -> {}", metrics_path.display());
    println!("summary -> {}", summary_path.display());

    let failures = guarantee_failures(&rows);
    if failures > 0 {
        return Err(Error::GuaranteeViolation(format!(
            "{failures} of {} sequences violated a guarantee (see {})",
            rows.len(),
            metrics_path.display()
        )));
    }
    Ok(())
}

fn cmd_sweep(opts: &Opts) -> Result<()> {
    let cfg = load_config(opts)?;
    let out_dir = cfg.output.dir.clone();
    ensure_dir(&out_dir)?;
    let lambdas: Vec<f64> = opts
        .get("--lambdas")
        .ok_or_else(|| Error::Config("--lambdas is required (comma-separated)".into()))?
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad lambda {v:?}")))
        })
        .collect::<Result<_>>()?;
    if lambdas.len() < 2 {
        return Err(Error::Config(
            "sweep needs at least two lambda values".into(),
        ));
    }

    let graph = cfg.graph.build()?;
    let protocol = cfg.protocol.to_config();
    let batch = cfg.signals.generate(graph.n_agents)?;
    let fuzzy = cfg.trigger.with_mode(TriggerMode::Fuzzy)?;
    let settings = cfg.training.to_settings();

    // One pretraining run seeds every lambda, isolating the penalty effect.
    let mut pre = init_params(&cfg)?;
    if cfg.nn.zscore_features {
        let scale = estimate_feature_scale(&graph, &protocol, cfg.protocol.init, &batch, &cfg)?;
        pre.set_feature_scale(Some(scale))?;
    }
    let pre_out = pretrain(
        &mut pre,
        &graph,
        &protocol,
        &fuzzy,
        cfg.protocol.init,
        &batch,
        &settings,
    )?;
    println!(
        "pretrain: {} epochs, mean |eta - {}| = {:.3e}",
        pre_out.epochs_run, settings.pretrain_target, pre_out.final_mean_abs_dev
    );
    let baselines = baseline_mse(
        &graph,
        &protocol,
        cfg.protocol.init,
        &batch,
        settings.threads,
    )?;

    // Evaluation setup (possibly a different network size).
    let eval_cfg = match opts.get("--eval-config") {
        Some(path) => RunConfig::load(Path::new(path))?,
        None => cfg.clone(),
    };
    let eval_graph = eval_cfg.graph.build()?;
    let eval_protocol = eval_cfg.protocol.to_config();
    let sequences = opts.get_parsed::<usize>("--sequences")?.unwrap_or(200);
    let seed = opts
        .get_parsed::<u64>("--seed")?
        .unwrap_or(eval_cfg.signals.seed.wrapping_add(7919));
    let eval_batch = eval_cfg
        .signals
        .generate_with(eval_graph.n_agents, sequences, seed)?;
    let hard = TriggerPolicy::new(
        cfg.trigger.sigma,
        cfg.trigger.epsilon,
        cfg.trigger.alpha,
        TriggerMode::Hard,
        ThresholdSource::Learned,
    )?;

    let mut per_lambda = Vec::new();
    let mut summary_lines = Vec::new();
    for &lambda in &lambdas {
        let mut params = pre.clone();
        let mut s = settings.clone();
        s.lambda = lambda;
        let outcome = train(
            &mut params,
            &graph,
            &protocol,
            &fuzzy,
            cfg.protocol.init,
            &batch,
            &baselines,
            &s,
            |_, _, _| {},
        )?;
        if let Some(diag) = outcome.aborted {
            return Err(Error::NonFinite(format!("lambda {lambda}: {diag}")));
        }
        let wpath = out_dir.join(format!("weights_lambda_{lambda}.txt"));
        params.save(&wpath)?;

        let rows = evaluate_batch(
            &eval_graph,
            &eval_protocol,
            eval_cfg.protocol.init,
            &hard,
            Some(&params),
            &eval_batch,
            lambda,
            settings.threads,
            false,
        )?;
        let line = format!(
            "lambda {lambda}: mean rel_error {:.6e}, mean comm_rate {:.6}, weights {}",
            mean(&rows, |r| r.cost.rel_error),
            mean(&rows, |r| r.cost.comm_rate),
            wpath.display()
        );
        println!("{line}");
        summary_lines.push(line);
        per_lambda.push((lambda, rows.iter().map(|r| r.cost).collect::<Vec<_>>()));
    }

    let summary = lambda_sweep_summary(&per_lambda)?;
    let hist_path = out_dir.join("sweep_histograms.csv");
    summary.export_csv(&hist_path)?;
    let text_path = out_dir.join("sweep_summary.txt");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&text_path)?);
    writeln!(
        f,
        "sweep over lambdas {:?} ({} eval sequences on {} agents, seed {seed})",
        lambdas, sequences, eval_graph.n_agents
    )?;
    for line in &summary_lines {
        writeln!(f, "{line}")?;
    }
    for e in &summary.entries {
        writeln!(
            f,
            "lambda {}: rel_error median {:.6e} (q10 {:.3e}, q90 {:.3e}), comm_rate median {:.6} (q10 {:.4}, q90 {:.4})",
            e.lambda,
            e.rel_error.median,
            e.rel_error.q10,
            e.rel_error.q90,
            e.comm_rate.median,
            e.comm_rate.q10,
            e.comm_rate.q90
        )?;
    }
    drop(f);
    println!("histograms -> {}", hist_path.display());
    println!("summary -> {}", text_path.display());
    Ok(())
}

fn cmd_check_bounds(opts: &Opts) -> Result<()> {
    let cfg = load_config(opts)?;
    let out_dir = cfg.output.dir.clone();
    ensure_dir(&out_dir)?;
    let graph = cfg.graph.build()?;
    let protocol = cfg.protocol.to_config();
    if !protocol.is_linear() {
        return Err(Error::InvalidParameter(
            "check-bounds applies to the linear protocol".into(),
        ));
    }
    let sequences = opts.get_parsed::<usize>("--sequences")?.unwrap_or(100);
    let seed = opts
        .get_parsed::<u64>("--seed")?
        .unwrap_or(cfg.signals.seed.wrapping_add(104_729));
    let batch = cfg.signals.generate_with(graph.n_agents, sequences, seed)?;

    let mut policies: Vec<(String, TriggerPolicy, Option<MlpParameters>)> = Vec::new();
    let (main_policy, params) = resolve_policy(&cfg, opts)?;
    policies.push(("configured policy".into(), main_policy, params));
    if opts.has("--adversarial") {
        for eta in [0.0, 1.0] {
            let p = TriggerPolicy::new(
                cfg.trigger.sigma,
                cfg.trigger.epsilon,
                cfg.trigger.alpha,
                TriggerMode::Hard,
                ThresholdSource::Fixed(eta),
            )?;
            policies.push((format!("adversarial eta={eta}"), p, None));
        }
    }

    let mut lines = Vec::new();
    let mut failures = 0usize;
    let mut worst_global: Option<(f64, usize, usize)> = None;
    for (pi, (name, policy, params)) in policies.iter().enumerate() {
        let rows = evaluate_batch(
            &graph,
            &protocol,
            cfg.protocol.init,
            policy,
            params.as_ref(),
            &batch,
            cfg.training.lambda,
            cfg.training.threads,
            false,
        )?;
        failures += guarantee_failures(&rows);
        let worst = rows
            .iter()
            .max_by(|a, b| a.bound_margin.total_cmp(&b.bound_margin))
            .expect("non-empty batch");
        lines.push(format!(
            "{name}: {} sequences, worst bound margin {:.6e} (seq {}), min gap {:.6}, delta range ok: {}",
            rows.len(),
            worst.bound_margin,
            worst.seq,
            rows.iter().map(|r| r.min_gap).fold(f64::INFINITY, f64::min),
            rows.iter().all(|r| r.delta_ok)
        ));
        match worst_global {
            Some((m, _, _)) if m >= worst.bound_margin => {}
            _ => worst_global = Some((worst.bound_margin, worst.seq, pi)),
        }
    }

    // Export the single worst trajectory's envelope trace for inspection.
    if let Some((_, seq, pi)) = worst_global {
        let (_, policy, params) = &policies[pi];
        let r = rollout_hard(
            &graph,
            &protocol,
            policy,
            cfg.protocol.init,
            &batch,
            seq,
            params.as_ref(),
        )?;
        let kappa = match protocol {
            ProtocolConfig::Linear { kappa } => kappa,
            _ => unreachable!(),
        };
        let tol = default_bound_tolerance(&graph, kappa, policy.sigma, policy.epsilon, batch.step);
        let rep = check_linear_bound(
            &r,
            &graph,
            kappa,
            policy.sigma,
            policy.epsilon,
            batch.rate_bound,
            tol,
        )?;
        rep.export_csv(&r.times, &out_dir.join("bound_worst.csv"))?;
    }

    let path = out_dir.join("bounds_summary.txt");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(
        f,
        "envelope checks: {} agents, {} sequences, seed {seed}",
        graph.n_agents, sequences
    )?;
    for line in &lines {
        writeln!(f, "{line}")?;
        println!("{line}");
    }
    writeln!(f, "guarantee failures: {failures}")?;
    drop(f);
    println!("summary -> {}", path.display());

    if failures > 0 {
        return Err(Error::GuaranteeViolation(format!(
            "{failures} guarantee failures (see {})",
            path.display()
        )));
    }
    Ok(())
}
