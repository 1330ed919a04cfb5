//! Per-agent reference signal batches on the simulation time grid.
//!
//! Signals are sinusoids r_i(t) = a_i + sin(w_i t) with per-agent amplitude
//! offset and frequency drawn uniformly from configured ranges. Derivatives
//! are analytic, never finite-differenced, and every batch is reproducible
//! bit-for-bit from its seed.

use crate::error::{Error, Result};
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Per-agent sinusoid parameters, kept so higher derivatives stay analytic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidParams {
    pub offset: f64,
    pub omega: f64,
}

/// A batch of reference-signal sequences sampled on the grid t = 0, h, ..., T.
#[derive(Debug, Clone)]
pub struct SignalBatch {
    pub batch_size: usize,
    pub n_agents: usize,
    pub horizon: f64,
    pub step: f64,
    /// values[seq][agent][k] = r_i(kh)
    pub values: Vec<Vec<Vec<f64>>>,
    /// derivatives[seq][agent][k] = dr_i/dt at kh (analytic)
    pub derivatives: Vec<Vec<Vec<f64>>>,
    /// sup over agents and time of |dr_i/dt|
    pub rate_bound: f64,
    pub seed: u64,
    /// Generator parameters; absent for batches imported from CSV.
    pub params: Option<Vec<Vec<SinusoidParams>>>,
}

impl SignalBatch {
    pub fn n_steps(&self) -> usize {
        self.values[0][0].len() - 1
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps()).map(|k| k as f64 * self.step).collect()
    }

    /// Second derivative of r_i at kh. Only available for generated batches,
    /// where the sinusoid parameters are known.
    pub fn second_derivative(&self, seq: usize, agent: usize, k: usize) -> Result<f64> {
        let params = self.params.as_ref().ok_or_else(|| {
            Error::InvalidParameter(
                "second derivative requires a generated batch (imported CSV lacks signal parameters)"
                    .into(),
            )
        })?;
        let p = params[seq][agent];
        let t = k as f64 * self.step;
        Ok(-p.omega * p.omega * (p.omega * t).sin())
    }

    /// sup |d^2 r / dt^2| over the batch, for the sliding-mode protocol.
    pub fn accel_bound(&self) -> Result<f64> {
        let params = self.params.as_ref().ok_or_else(|| {
            Error::InvalidParameter("acceleration bound requires a generated batch".into())
        })?;
        Ok(params
            .iter()
            .flatten()
            .map(|p| p.omega * p.omega)
            .fold(0.0, f64::max))
    }
}

/// Uniform draw in [lo, hi] from the top 53 bits of a u64. Hand-rolled so the
/// mapping is pinned independent of distribution-crate internals.
fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    lo + u * (hi - lo)
}

fn check_grid(horizon: f64, step: f64) -> Result<usize> {
    if step <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "step must be positive, got {step}"
        )));
    }
    let n_steps = horizon / step;
    let rounded = n_steps.round();
    if rounded < 1.0 || (n_steps - rounded).abs() > 1e-9 * rounded.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} is not an integer multiple of step {step}"
        )));
    }
    Ok(rounded as usize)
}

/// Generate a batch of sinusoid reference sequences, r_i(t) = a_i + sin(w_i t),
/// with a_i, w_i drawn per agent per sequence.
pub fn generate_sinusoid_batch(
    batch_size: usize,
    n_agents: usize,
    horizon: f64,
    step: f64,
    amp_offset_range: (f64, f64),
    freq_range: (f64, f64),
    seed: u64,
) -> Result<SignalBatch> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter(
            "batch_size must be positive".into(),
        ));
    }
    if n_agents == 0 {
        return Err(Error::InvalidParameter("n_agents must be positive".into()));
    }
    if amp_offset_range.1 < amp_offset_range.0 || freq_range.1 < freq_range.0 {
        return Err(Error::InvalidParameter("empty parameter range".into()));
    }
    let n_steps = check_grid(horizon, step)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(batch_size);
    let mut derivatives = Vec::with_capacity(batch_size);
    let mut params = Vec::with_capacity(batch_size);
    let mut rate_bound = 0.0f64;

    for _ in 0..batch_size {
        let mut seq_vals = Vec::with_capacity(n_agents);
        let mut seq_ders = Vec::with_capacity(n_agents);
        let mut seq_params = Vec::with_capacity(n_agents);
        for _ in 0..n_agents {
            let offset = uniform(&mut rng, amp_offset_range.0, amp_offset_range.1);
            let omega = uniform(&mut rng, freq_range.0, freq_range.1);
            rate_bound = rate_bound.max(omega.abs());
            let mut vals = Vec::with_capacity(n_steps + 1);
            let mut ders = Vec::with_capacity(n_steps + 1);
            for k in 0..=n_steps {
                let t = k as f64 * step;
                vals.push(offset + (omega * t).sin());
                ders.push(omega * (omega * t).cos());
            }
            seq_vals.push(vals);
            seq_ders.push(ders);
            seq_params.push(SinusoidParams { offset, omega });
        }
        values.push(seq_vals);
        derivatives.push(seq_ders);
        params.push(seq_params);
    }

    Ok(SignalBatch {
        batch_size,
        n_agents,
        horizon,
        step,
        values,
        derivatives,
        rate_bound,
        seed,
        params: Some(params),
    })
}

/// Write one CSV file per sequence: columns t, r_1..r_N, dr_1..dr_N.
pub fn export_batch_csv(batch: &SignalBatch, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(batch.batch_size);
    for seq in 0..batch.batch_size {
        let path = dir.join(format!("seq_{seq:04}.csv"));
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        write!(out, "t")?;
        for i in 1..=batch.n_agents {
            write!(out, ",r_{i}")?;
        }
        for i in 1..=batch.n_agents {
            write!(out, ",dr_{i}")?;
        }
        writeln!(out)?;
        for k in 0..=batch.n_steps() {
            write!(out, "{}", k as f64 * batch.step)?;
            for agent in 0..batch.n_agents {
                write!(out, ",{}", batch.values[seq][agent][k])?;
            }
            for agent in 0..batch.n_agents {
                write!(out, ",{}", batch.derivatives[seq][agent][k])?;
            }
            writeln!(out)?;
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Read back a batch written by [`export_batch_csv`]. Files are taken in
/// lexicographic order; all sequences must share the grid and agent count.
pub fn import_batch_csv(dir: &Path) -> Result<SignalBatch> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::CsvFormat(format!(
            "no .csv sequence files in {}",
            dir.display()
        )));
    }

    let mut values = Vec::new();
    let mut derivatives = Vec::new();
    let mut n_agents = 0usize;
    let mut step = 0.0f64;
    let mut horizon = 0.0f64;
    let mut rate_bound = 0.0f64;

    for path in &files {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::CsvFormat(format!("{}: empty file", path.display())))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols.len().is_multiple_of(2) || cols[0] != "t" {
            return Err(Error::CsvFormat(format!(
                "{}: expected header t,r_1..r_N,dr_1..dr_N",
                path.display()
            )));
        }
        let agents = (cols.len() - 1) / 2;
        if n_agents == 0 {
            n_agents = agents;
        } else if agents != n_agents {
            return Err(Error::CsvFormat(format!(
                "{}: agent count {} differs from {}",
                path.display(),
                agents,
                n_agents
            )));
        }

        let mut times = Vec::new();
        let mut vals = vec![Vec::new(); agents];
        let mut ders = vec![Vec::new(); agents];
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::CsvFormat(format!(
                    "{}: row has {} fields, expected {}",
                    path.display(),
                    fields.len(),
                    cols.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::CsvFormat(format!("{}: bad number {s:?}", path.display())))
            };
            times.push(parse(fields[0])?);
            for a in 0..agents {
                vals[a].push(parse(fields[1 + a])?);
                let d = parse(fields[1 + agents + a])?;
                rate_bound = rate_bound.max(d.abs());
                ders[a].push(d);
            }
        }
        if times.len() < 2 {
            return Err(Error::CsvFormat(format!(
                "{}: need at least two samples",
                path.display()
            )));
        }
        let this_step = times[1] - times[0];
        let this_horizon = *times.last().unwrap();
        if step == 0.0 {
            step = this_step;
            horizon = this_horizon;
        } else if (this_step - step).abs() > 1e-12 || (this_horizon - horizon).abs() > 1e-9 {
            return Err(Error::CsvFormat(format!(
                "{}: grid differs from first sequence",
                path.display()
            )));
        }
        values.push(vals);
        derivatives.push(ders);
    }

    Ok(SignalBatch {
        batch_size: values.len(),
        n_agents,
        horizon,
        step,
        values,
        derivatives,
        rate_bound,
        seed: 0,
        params: None,
    })
}
