//! Plain-text run configuration: sections of key = value pairs.
//!
//! One file drives every command. Parsing is strict (unknown keys and
//! malformed values are errors, reported with line numbers) and the
//! canonical writer round-trips losslessly, so experiment files double as
//! provenance records.

use crate::error::{Error, Result};
use crate::etm::{ThresholdSource, TriggerMode, TriggerPolicy};
use crate::graph::{self, NetworkGraph};
use crate::protocols::{InitMode, ProtocolConfig};
use crate::signals::{generate_sinusoid_batch, SignalBatch};
use crate::training::TrainSettings;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSpec {
    Complete {
        n: usize,
    },
    Path {
        n: usize,
    },
    Ring {
        n: usize,
    },
    RandomConnected {
        n: usize,
        extra_edge_prob: f64,
        seed: u64,
    },
    Edges {
        n: usize,
        edges: Vec<(usize, usize)>,
    },
}

impl GraphSpec {
    pub fn build(&self) -> Result<NetworkGraph> {
        match self {
            GraphSpec::Complete { n } => graph::complete(*n),
            GraphSpec::Path { n } => graph::path(*n),
            GraphSpec::Ring { n } => graph::ring(*n),
            GraphSpec::RandomConnected {
                n,
                extra_edge_prob,
                seed,
            } => graph::random_connected(*n, *extra_edge_prob, *seed),
            GraphSpec::Edges { n, edges } => graph::build_graph(*n, edges),
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            GraphSpec::Complete { n }
            | GraphSpec::Path { n }
            | GraphSpec::Ring { n }
            | GraphSpec::RandomConnected { n, .. }
            | GraphSpec::Edges { n, .. } => *n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub kappa: f64,
    pub gains: Vec<f64>,
    pub order: usize,
    pub init: InitMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolKind {
    Linear,
    SlidingMode,
}

impl ProtocolSpec {
    pub fn to_config(&self) -> ProtocolConfig {
        match self.kind {
            ProtocolKind::Linear => ProtocolConfig::Linear { kappa: self.kappa },
            ProtocolKind::SlidingMode => ProtocolConfig::SlidingMode {
                gains: self.gains.clone(),
                order: self.order,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub batch_size: usize,
    pub horizon: f64,
    pub step: f64,
    pub amp_min: f64,
    pub amp_max: f64,
    pub freq_min: f64,
    pub freq_max: f64,
    pub seed: u64,
}

impl SignalSpec {
    pub fn generate(&self, n_agents: usize) -> Result<SignalBatch> {
        self.generate_with(n_agents, self.batch_size, self.seed)
    }

    pub fn generate_with(
        &self,
        n_agents: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<SignalBatch> {
        generate_sinusoid_batch(
            batch_size,
            n_agents,
            self.horizon,
            self.step,
            (self.amp_min, self.amp_max),
            (self.freq_min, self.freq_max),
            seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub sigma: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub mode: TriggerMode,
    pub source: SourceKind,
    pub eta_fixed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Fixed,
    Learned,
}

impl TriggerSpec {
    pub fn to_policy(&self) -> Result<TriggerPolicy> {
        let source = match self.source {
            SourceKind::Fixed => ThresholdSource::Fixed(self.eta_fixed),
            SourceKind::Learned => ThresholdSource::Learned,
        };
        TriggerPolicy::new(self.sigma, self.epsilon, self.alpha, self.mode, source)
    }

    pub fn with_mode(&self, mode: TriggerMode) -> Result<TriggerPolicy> {
        let mut spec = self.clone();
        spec.mode = mode;
        spec.to_policy()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layer_dims: Vec<usize>,
    pub init_seed: u64,
    pub zscore_features: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSpec {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub pretrain_target: f64,
    pub grad_clip: f64,
    pub checkpoint_interval: usize,
    pub threads: usize,
}

impl TrainingSpec {
    pub fn to_settings(&self) -> TrainSettings {
        TrainSettings {
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            pretrain_epochs: self.pretrain_epochs,
            pretrain_target: self.pretrain_target,
            grad_clip: self.grad_clip,
            threads: self.threads,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

/// Everything a command needs, in one validated bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub graph: GraphSpec,
    pub protocol: ProtocolSpec,
    pub signals: SignalSpec,
    pub trigger: TriggerSpec,
    pub nn: NetworkSpec,
    pub training: TrainingSpec,
    pub output: OutputSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            graph: GraphSpec::Complete { n: 2 },
            protocol: ProtocolSpec {
                kind: ProtocolKind::Linear,
                kappa: 5.0,
                gains: vec![2.0, 4.0],
                order: 1,
                init: InitMode::Reference,
            },
            signals: SignalSpec {
                batch_size: 10,
                horizon: 10.0,
                step: 1e-3,
                amp_min: 1.0,
                amp_max: 5.0,
                freq_min: 0.0,
                freq_max: 1.0,
                seed: 1,
            },
            trigger: TriggerSpec {
                sigma: 0.1,
                epsilon: 0.001,
                alpha: 100.0,
                mode: TriggerMode::Hard,
                source: SourceKind::Learned,
                eta_fixed: 0.5,
            },
            nn: NetworkSpec {
                layer_dims: vec![2, 16, 16, 1],
                init_seed: 42,
                zscore_features: false,
            },
            training: TrainingSpec {
                lambda: 0.1,
                learning_rate: 5e-2,
                epochs: 150,
                pretrain_epochs: 200,
                pretrain_target: 0.5,
                grad_clip: 10.0,
                checkpoint_interval: 0,
                threads: 1,
            },
            output: OutputSpec {
                dir: PathBuf::from("out"),
            },
        }
    }
}

impl RunConfig {
    /// Validate cross-field constraints that the individual builders would
    /// only catch at first use.
    pub fn validate(&self) -> Result<()> {
        self.trigger.to_policy()?;
        self.protocol.to_config().validate()?;
        if self.nn.layer_dims.first() != Some(&2) {
            return Err(Error::Config(
                "nn.layer_dims must start with 2 (the two local features)".into(),
            ));
        }
        if self.nn.layer_dims.last() != Some(&1) {
            return Err(Error::Config("nn.layer_dims must end with 1".into()));
        }
        if self.signals.batch_size == 0 {
            return Err(Error::Config("signals.batch_size must be positive".into()));
        }
        if self.signals.step <= 0.0 {
            return Err(Error::Config("signals.step must be positive".into()));
        }
        if self.training.lambda < 0.0 {
            return Err(Error::Config("training.lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.training.pretrain_target) {
            return Err(Error::Config(
                "training.pretrain_target must be in [0,1]".into(),
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[graph]");
        match &self.graph {
            GraphSpec::Complete { n } => {
                let _ = writeln!(s, "kind = complete\nn = {n}");
            }
            GraphSpec::Path { n } => {
                let _ = writeln!(s, "kind = path\nn = {n}");
            }
            GraphSpec::Ring { n } => {
                let _ = writeln!(s, "kind = ring\nn = {n}");
            }
            GraphSpec::RandomConnected {
                n,
                extra_edge_prob,
                seed,
            } => {
                let _ = writeln!(
                    s,
                    "kind = random-connected\nn = {n}\nextra_edge_prob = {extra_edge_prob}\nseed = {seed}"
                );
            }
            GraphSpec::Edges { n, edges } => {
                let list: Vec<String> = edges.iter().map(|(a, b)| format!("{a}-{b}")).collect();
                let _ = writeln!(s, "kind = edges\nn = {n}\nedges = {}", list.join(","));
            }
        }
        let p = &self.protocol;
        let _ = writeln!(s, "\n[protocol]");
        let kind = match p.kind {
            ProtocolKind::Linear => "linear",
            ProtocolKind::SlidingMode => "sliding_mode",
        };
        let gains: Vec<String> = p.gains.iter().map(f64::to_string).collect();
        let init = match p.init {
            InitMode::Reference => "reference",
            InitMode::ZeroSum => "zero_sum",
        };
        let _ = writeln!(
            s,
            "kind = {kind}\nkappa = {}\ngains = {}\norder = {}\ninit = {init}",
            p.kappa,
            gains.join(","),
            p.order
        );
        let g = &self.signals;
        let _ = writeln!(s, "\n[signals]");
        let _ = writeln!(
            s,
            "batch_size = {}\nhorizon = {}\nstep = {}\namp_min = {}\namp_max = {}\nfreq_min = {}\nfreq_max = {}\nseed = {}",
            g.batch_size, g.horizon, g.step, g.amp_min, g.amp_max, g.freq_min, g.freq_max, g.seed
        );
        let t = &self.trigger;
        let _ = writeln!(s, "\n[trigger]");
        let mode = match t.mode {
            TriggerMode::Hard => "hard",
            TriggerMode::Fuzzy => "fuzzy",
        };
        let source = match t.source {
            SourceKind::Fixed => "fixed",
            SourceKind::Learned => "learned",
        };
        let _ = writeln!(
            s,
            "sigma = {}\nepsilon = {}\nalpha = {}\nmode = {mode}\nsource = {source}\neta_fixed = {}",
            t.sigma, t.epsilon, t.alpha, t.eta_fixed
        );
        let n = &self.nn;
        let dims: Vec<String> = n.layer_dims.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "\n[nn]");
        let _ = writeln!(
            s,
            "layer_dims = {}\ninit_seed = {}\nzscore_features = {}",
            dims.join(","),
            n.init_seed,
            n.zscore_features
        );
        let tr = &self.training;
        let _ = writeln!(s, "\n[training]");
        let _ = writeln!(
            s,
            "lambda = {}\nlearning_rate = {}\nepochs = {}\npretrain_epochs = {}\npretrain_target = {}\ngrad_clip = {}\ncheckpoint_interval = {}\nthreads = {}",
            tr.lambda,
            tr.learning_rate,
            tr.epochs,
            tr.pretrain_epochs,
            tr.pretrain_target,
            tr.grad_clip,
            tr.checkpoint_interval,
            tr.threads
        );
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", self.output.dir.display());
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, Vec<(String, usize, String)>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_string();
                if sections.contains_key(&name) {
                    return Err(Error::Config(format!(
                        "line {}: duplicate section [{name}]",
                        lineno + 1
                    )));
                }
                sections.insert(name.clone(), Vec::new());
                current = Some(name);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    lineno + 1
                )));
            };
            let section = current.as_ref().ok_or_else(|| {
                Error::Config(format!("line {}: key before any [section]", lineno + 1))
            })?;
            let entry = sections.get_mut(section).unwrap();
            let key = key.trim().to_string();
            if entry.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key} in [{section}]",
                    lineno + 1
                )));
            }
            entry.push((key, lineno + 1, value.trim().to_string()));
        }

        let mut cfg = RunConfig::default();
        for (section, mut entries) in sections {
            // The kind selector decides which sibling keys are meaningful,
            // so it applies first regardless of file order.
            entries.sort_by_key(|(k, _, _)| (k != "kind", 0));
            for (key, lineno, value) in entries {
                apply_key(&mut cfg, &section, &key, &value)
                    .map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_key(
    cfg: &mut RunConfig,
    section: &str,
    key: &str,
    value: &str,
) -> std::result::Result<(), String> {
    let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| format!("bad number {v:?}"));
    let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| format!("bad integer {v:?}"));
    let parse_u64 = |v: &str| v.parse::<u64>().map_err(|_| format!("bad integer {v:?}"));
    let parse_bool = |v: &str| match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("bad boolean {v:?}")),
    };
    match (section, key) {
        ("graph", "kind") => {
            let n = cfg.graph.n_agents();
            cfg.graph = match value {
                "complete" => GraphSpec::Complete { n },
                "path" => GraphSpec::Path { n },
                "ring" => GraphSpec::Ring { n },
                "random-connected" => GraphSpec::RandomConnected {
                    n,
                    extra_edge_prob: 0.3,
                    seed: 0,
                },
                "edges" => GraphSpec::Edges {
                    n,
                    edges: Vec::new(),
                },
                other => return Err(format!("unknown graph kind {other:?}")),
            };
        }
        ("graph", "n") => {
            let n = parse_usize(value)?;
            match &mut cfg.graph {
                GraphSpec::Complete { n: slot }
                | GraphSpec::Path { n: slot }
                | GraphSpec::Ring { n: slot }
                | GraphSpec::RandomConnected { n: slot, .. }
                | GraphSpec::Edges { n: slot, .. } => *slot = n,
            }
        }
        ("graph", "extra_edge_prob") => match &mut cfg.graph {
            GraphSpec::RandomConnected {
                extra_edge_prob, ..
            } => {
                *extra_edge_prob = parse_f64(value)?;
            }
            _ => return Err("extra_edge_prob only applies to random-connected".into()),
        },
        ("graph", "seed") => match &mut cfg.graph {
            GraphSpec::RandomConnected { seed, .. } => *seed = parse_u64(value)?,
            _ => return Err("seed only applies to random-connected".into()),
        },
        ("graph", "edges") => match &mut cfg.graph {
            GraphSpec::Edges { edges, .. } => {
                let mut list = Vec::new();
                for pair in value.split(',') {
                    let pair = pair.trim();
                    if pair.is_empty() {
                        continue;
                    }
                    let (a, b) = pair
                        .split_once('-')
                        .ok_or_else(|| format!("bad edge {pair:?}, expected a-b"))?;
                    list.push((parse_usize(a.trim())?, parse_usize(b.trim())?));
                }
                *edges = list;
            }
            _ => return Err("edges only applies to kind = edges".into()),
        },
        ("protocol", "kind") => {
            cfg.protocol.kind = match value {
                "linear" => ProtocolKind::Linear,
                "sliding_mode" => ProtocolKind::SlidingMode,
                other => return Err(format!("unknown protocol kind {other:?}")),
            }
        }
        ("protocol", "kappa") => cfg.protocol.kappa = parse_f64(value)?,
        ("protocol", "gains") => {
            cfg.protocol.gains = value
                .split(',')
                .map(|v| parse_f64(v.trim()))
                .collect::<std::result::Result<_, _>>()?;
        }
        ("protocol", "order") => cfg.protocol.order = parse_usize(value)?,
        ("protocol", "init") => {
            cfg.protocol.init = match value {
                "reference" => InitMode::Reference,
                "zero_sum" => InitMode::ZeroSum,
                other => return Err(format!("unknown init mode {other:?}")),
            }
        }
        ("signals", "batch_size") => cfg.signals.batch_size = parse_usize(value)?,
        ("signals", "horizon") => cfg.signals.horizon = parse_f64(value)?,
        ("signals", "step") => cfg.signals.step = parse_f64(value)?,
        ("signals", "amp_min") => cfg.signals.amp_min = parse_f64(value)?,
        ("signals", "amp_max") => cfg.signals.amp_max = parse_f64(value)?,
        ("signals", "freq_min") => cfg.signals.freq_min = parse_f64(value)?,
        ("signals", "freq_max") => cfg.signals.freq_max = parse_f64(value)?,
        ("signals", "seed") => cfg.signals.seed = parse_u64(value)?,
        ("trigger", "sigma") => cfg.trigger.sigma = parse_f64(value)?,
        ("trigger", "epsilon") => cfg.trigger.epsilon = parse_f64(value)?,
        ("trigger", "alpha") => cfg.trigger.alpha = parse_f64(value)?,
        ("trigger", "mode") => {
            cfg.trigger.mode = match value {
                "hard" => TriggerMode::Hard,
                "fuzzy" => TriggerMode::Fuzzy,
                other => return Err(format!("unknown trigger mode {other:?}")),
            }
        }
        ("trigger", "source") => {
            cfg.trigger.source = match value {
                "fixed" => SourceKind::Fixed,
                "learned" => SourceKind::Learned,
                other => return Err(format!("unknown threshold source {other:?}")),
            }
        }
        ("trigger", "eta_fixed") => cfg.trigger.eta_fixed = parse_f64(value)?,
        ("nn", "layer_dims") => {
            cfg.nn.layer_dims = value
                .split(',')
                .map(|v| parse_usize(v.trim()))
                .collect::<std::result::Result<_, _>>()?;
        }
        ("nn", "init_seed") => cfg.nn.init_seed = parse_u64(value)?,
        ("nn", "zscore_features") => cfg.nn.zscore_features = parse_bool(value)?,
        ("training", "lambda") => cfg.training.lambda = parse_f64(value)?,
        ("training", "learning_rate") => cfg.training.learning_rate = parse_f64(value)?,
        ("training", "epochs") => cfg.training.epochs = parse_usize(value)?,
        ("training", "pretrain_epochs") => cfg.training.pretrain_epochs = parse_usize(value)?,
        ("training", "pretrain_target") => cfg.training.pretrain_target = parse_f64(value)?,
        ("training", "grad_clip") => cfg.training.grad_clip = parse_f64(value)?,
        ("training", "checkpoint_interval") => {
            cfg.training.checkpoint_interval = parse_usize(value)?
        }
        ("training", "threads") => cfg.training.threads = parse_usize(value)?,
        ("output", "dir") => cfg.output.dir = PathBuf::from(value),
        (s, k) => return Err(format!("unknown key {k:?} in section [{s}]")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_losslessly() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn edge_list_and_random_graph_round_trip() {
        let mut cfg = RunConfig {
            graph: GraphSpec::Edges {
                n: 4,
                edges: vec![(0, 1), (1, 2), (2, 3), (0, 3)],
            },
            ..RunConfig::default()
        };
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);

        cfg.graph = GraphSpec::RandomConnected {
            n: 6,
            extra_edge_prob: 0.25,
            seed: 9,
        };
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
        assert!(parsed.graph.build().is_ok());
    }

    #[test]
    fn invalid_trigger_rejected_before_any_compute() {
        let mut cfg = RunConfig::default();
        cfg.trigger.sigma = -0.1;
        assert!(cfg.validate().is_err());
        cfg.trigger.sigma = 0.1;
        cfg.trigger.epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = RunConfig::parse("[graph]\nkind = dodecahedron\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        let err = RunConfig::parse("[graph]\nbogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
        let err = RunConfig::parse("orphan = 1\n").unwrap_err();
        assert!(err.to_string().contains("before any [section]"));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# experiment file\n[trigger]\nsigma = 0.2  # wider band\n\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.trigger.sigma, 0.2);
    }

    #[test]
    fn graph_kind_applies_before_sibling_keys() {
        let a = RunConfig::parse("[graph]\nkind = path\nn = 5\n").unwrap();
        let b = RunConfig::parse("[graph]\nn = 5\nkind = path\n").unwrap();
        assert_eq!(a.graph, GraphSpec::Path { n: 5 });
        assert_eq!(b.graph, a.graph);
        let c = RunConfig::parse(
            "[graph]\nextra_edge_prob = 0.5\nseed = 3\nkind = random-connected\nn = 7\n",
        )
        .unwrap();
        assert_eq!(
            c.graph,
            GraphSpec::RandomConnected {
                n: 7,
                extra_edge_prob: 0.5,
                seed: 3
            }
        );
    }
}
