//! Shared multilayer perceptron producing the trigger threshold signal
//! eta in (0, 1) from two local features, plus reverse-mode differentiation
//! through entire rollouts and an adaptive-moment optimizer.
//!
//! One parameter set is shared by every agent (parameter sharing): agents
//! differ only through their local inputs. Hidden layers use the rectifier,
//! the output layer a logistic unit, so the output range is architectural.

mod adam;
mod tape;

pub use adam::{adam_step, AdamState};
pub use tape::{GradientTape, Var};

use crate::error::{Error, Result};
use crate::num::logistic;
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Optional per-feature affine normalization applied before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScale {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Local observations fed to the shared network: the agent's disagreement
/// with its neighbors' held broadcasts, and the time since its own last
/// event. Both are N-independent, which is what lets weights trained on a
/// small network run unchanged on a larger one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub neighbor_disagreement: f64,
    pub time_since_event: f64,
}

impl FeatureVector {
    pub fn as_array(&self) -> [f64; 2] {
        [self.neighbor_disagreement, self.time_since_event]
    }
}

/// Weights and biases of the shared network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParameters {
    layer_dims: Vec<usize>,
    /// weights[l] is row-major, dims[l+1] x dims[l].
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    feature_scale: Option<FeatureScale>,
    version: u64,
}

/// Gradient of a scalar cost with respect to every parameter, in the same
/// layout as [`MlpParameters`].
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGradients {
    pub fn zeros_like(params: &MlpParameters) -> Self {
        MlpGradients {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for w in self.weights.iter().chain(self.biases.iter()) {
            for v in w {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    /// Scale gradients down so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for w in self.weights.iter_mut().chain(self.biases.iter_mut()) {
                for v in w {
                    *v *= s;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|w| w.iter().all(|v| v.is_finite()))
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl MlpParameters {
    /// Uniform init in [-0.5, 0.5], deterministic for a seed.
    pub fn new_random(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidParameter(
                "network needs at least input and output layers".into(),
            ));
        }
        if *layer_dims.last().unwrap() != 1 {
            return Err(Error::InvalidParameter(
                "output layer must have exactly one unit".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidParameter("zero-width layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = move || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_dims.len() - 1 {
            weights.push(
                (0..layer_dims[l + 1] * layer_dims[l])
                    .map(|_| draw())
                    .collect(),
            );
            biases.push((0..layer_dims[l + 1]).map(|_| draw()).collect());
        }
        Ok(MlpParameters {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            feature_scale: None,
            version: 0,
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        let mut p = Self::new_random(layer_dims, 0)?;
        for w in p.weights.iter_mut().chain(p.biases.iter_mut()) {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn feature_scale(&self) -> Option<&FeatureScale> {
        self.feature_scale.as_ref()
    }

    pub fn set_feature_scale(&mut self, scale: Option<FeatureScale>) -> Result<()> {
        if let Some(s) = &scale {
            if s.mean.len() != self.input_dim() || s.std.len() != self.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.input_dim(),
                    got: s.mean.len(),
                    context: "feature scale",
                });
            }
            if s.std.iter().any(|&v| v <= 0.0) {
                return Err(Error::InvalidParameter(
                    "feature std must be positive".into(),
                ));
            }
        }
        self.feature_scale = scale;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Read a parameter by flat index (weights then biases, per layer).
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if idx < w.len() {
                return w[idx];
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if idx < w.len() {
                w[idx] = value;
                return;
            }
            idx -= w.len();
            if idx < b.len() {
                b[idx] = value;
                return;
            }
            idx -= b.len();
        }
        panic!("flat index out of range");
    }

    fn scaled_input(&self, features: &[f64]) -> Vec<f64> {
        match &self.feature_scale {
            None => features.to_vec(),
            Some(s) => features
                .iter()
                .enumerate()
                .map(|(i, f)| (f - s.mean[i]) / s.std[i])
                .collect(),
        }
    }

    /// Forward pass returning eta in (0, 1).
    pub fn forward(&self, features: &[f64]) -> Result<f64> {
        Ok(self.forward_with_activations(features)?.0)
    }

    /// Forward pass that also returns the flattened per-layer activations
    /// (scaled input first), as needed for the reverse pass.
    pub(crate) fn forward_with_activations(&self, features: &[f64]) -> Result<(f64, Vec<f64>)> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: features.len(),
                context: "network input",
            });
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let n_layers = self.layer_dims.len() - 1;
        let mut acts: Vec<f64> = Vec::with_capacity(self.layer_dims.iter().sum());
        acts.extend(self.scaled_input(features));

        let mut offset = 0usize;
        for l in 0..n_layers {
            let (din, dout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let last = l == n_layers - 1;
            for o in 0..dout {
                let mut pre = self.biases[l][o];
                let row = &self.weights[l][o * din..(o + 1) * din];
                for (wi, ai) in row.iter().zip(&acts[offset..offset + din]) {
                    pre += wi * ai;
                }
                acts.push(if last { logistic(pre) } else { pre.max(0.0) });
            }
            offset += din;
        }
        let eta = *acts.last().unwrap();
        Ok((eta, acts))
    }

    /// Reverse pass through one recorded forward call: accumulates parameter
    /// gradients scaled by `upstream` and returns the gradient with respect
    /// to the raw (unscaled) input features.
    #[allow(clippy::needless_range_loop)]
    pub(crate) fn backward_through_call(
        &self,
        acts: &[f64],
        upstream: f64,
        grads: &mut MlpGradients,
    ) -> Vec<f64> {
        let n_layers = self.layer_dims.len() - 1;
        // Offsets of each activation block inside `acts`.
        let mut offsets = Vec::with_capacity(self.layer_dims.len());
        let mut off = 0usize;
        for d in &self.layer_dims {
            offsets.push(off);
            off += d;
        }

        let eta = acts[offsets[n_layers]];
        let mut g = vec![upstream * eta * (1.0 - eta)]; // d cost / d pre(last)

        for l in (0..n_layers).rev() {
            let (din, dout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let a_in = &acts[offsets[l]..offsets[l] + din];
            let mut g_prev = vec![0.0; din];
            for o in 0..dout {
                let go = g[o];
                if go != 0.0 {
                    grads.biases[l][o] += go;
                    let wrow = &self.weights[l][o * din..(o + 1) * din];
                    let grow = &mut grads.weights[l][o * din..(o + 1) * din];
                    for i in 0..din {
                        grow[i] += go * a_in[i];
                        g_prev[i] += wrow[i] * go;
                    }
                }
            }
            if l > 0 {
                // Rectifier derivative from the stored post-activation value.
                for (gp, a) in g_prev.iter_mut().zip(a_in) {
                    if *a <= 0.0 {
                        *gp = 0.0;
                    }
                }
                g = g_prev;
            } else {
                // Undo feature scaling on the way out.
                if let Some(s) = &self.feature_scale {
                    for (gp, std) in g_prev.iter_mut().zip(&s.std) {
                        *gp /= std;
                    }
                }
                return g_prev;
            }
        }
        unreachable!("network has at least one layer");
    }

    /// Write the parameters to a versioned plain-text file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "evcon-weights v1")?;
        write!(out, "dims")?;
        for d in &self.layer_dims {
            write!(out, " {d}")?;
        }
        writeln!(out)?;
        if let Some(s) = &self.feature_scale {
            write!(out, "scale")?;
            for (m, sd) in s.mean.iter().zip(&s.std) {
                write!(out, " {m} {sd}")?;
            }
            writeln!(out)?;
        }
        for l in 0..self.layer_dims.len() - 1 {
            let din = self.layer_dims[l];
            writeln!(out, "layer {l}")?;
            for o in 0..self.layer_dims[l + 1] {
                let row: Vec<String> = self.weights[l][o * din..(o + 1) * din]
                    .iter()
                    .map(f64::to_string)
                    .collect();
                writeln!(out, "{}", row.join(" "))?;
            }
            let bias: Vec<String> = self.biases[l].iter().map(f64::to_string).collect();
            writeln!(out, "bias {}", bias.join(" "))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let bad = |msg: &str| Error::WeightFormat(format!("{}: {msg}", path.display()));

        let magic = lines.next().ok_or_else(|| bad("empty file"))??;
        if magic.trim() != "evcon-weights v1" {
            return Err(bad("unrecognized header"));
        }
        let dims_line = lines.next().ok_or_else(|| bad("missing dims line"))??;
        let mut parts = dims_line.split_whitespace();
        if parts.next() != Some("dims") {
            return Err(bad("expected dims line"));
        }
        let layer_dims: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| bad("bad dims value")))
            .collect::<Result<_>>()?;
        if layer_dims.len() < 2 {
            return Err(bad("need at least two layer dims"));
        }

        let mut feature_scale = None;
        let mut pending: Option<String> = None;
        if let Some(line) = lines.next() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("scale") {
                let vals: Vec<f64> = rest
                    .split_whitespace()
                    .map(|p| p.parse().map_err(|_| bad("bad scale value")))
                    .collect::<Result<_>>()?;
                if vals.len() != 2 * layer_dims[0] {
                    return Err(bad("scale line length mismatch"));
                }
                feature_scale = Some(FeatureScale {
                    mean: vals.iter().step_by(2).copied().collect(),
                    std: vals.iter().skip(1).step_by(2).copied().collect(),
                });
            } else {
                pending = Some(line);
            }
        }

        let mut next_line = move |lines: &mut std::io::Lines<BufReader<std::fs::File>>| {
            if let Some(p) = pending.take() {
                Some(Ok(p))
            } else {
                lines.next()
            }
        };

        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_dims.len() - 1 {
            let header = next_line(&mut lines).ok_or_else(|| bad("missing layer header"))??;
            if header.trim() != format!("layer {l}") {
                return Err(bad("unexpected layer header"));
            }
            let (din, dout) = (layer_dims[l], layer_dims[l + 1]);
            let mut w = Vec::with_capacity(din * dout);
            for _ in 0..dout {
                let row = next_line(&mut lines).ok_or_else(|| bad("missing weight row"))??;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|p| p.parse().map_err(|_| bad("bad weight value")))
                    .collect::<Result<_>>()?;
                if vals.len() != din {
                    return Err(bad("weight row length mismatch"));
                }
                w.extend(vals);
            }
            let bias_line = next_line(&mut lines).ok_or_else(|| bad("missing bias line"))??;
            let rest = bias_line
                .strip_prefix("bias")
                .ok_or_else(|| bad("expected bias line"))?;
            let b: Vec<f64> = rest
                .split_whitespace()
                .map(|p| p.parse().map_err(|_| bad("bad bias value")))
                .collect::<Result<_>>()?;
            if b.len() != dout {
                return Err(bad("bias length mismatch"));
            }
            weights.push(w);
            biases.push(b);
        }

        Ok(MlpParameters {
            layer_dims,
            weights,
            biases,
            feature_scale,
            version: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_output_half() {
        let p = MlpParameters::zeros(&[2, 16, 16, 1]).unwrap();
        let eta = p.forward(&[3.0, -1.5]).unwrap();
        assert_eq!(eta, 0.5);
    }

    #[test]
    fn forward_matches_loop_free_oracle() {
        // Small fixed net [2, 2, 1], reimplemented below without loops.
        let mut p = MlpParameters::zeros(&[2, 2, 1]).unwrap();
        let (w0, b0) = ([0.3, -0.7, 1.1, 0.4], [0.05, -0.2]);
        let (w1, b1) = ([0.9, -1.3], [0.1]);
        for (i, v) in w0.iter().enumerate() {
            p.weights[0][i] = *v;
        }
        p.biases[0] = b0.to_vec();
        p.weights[1] = w1.to_vec();
        p.biases[1] = b1.to_vec();

        let (x0, x1) = (0.8, -0.35);
        let h0 = (w0[0] * x0 + w0[1] * x1 + b0[0]).max(0.0);
        let h1 = (w0[2] * x0 + w0[3] * x1 + b0[1]).max(0.0);
        let logit = w1[0] * h0 + w1[1] * h1 + b1[0];
        let oracle = 1.0 / (1.0 + (-logit).exp());

        let eta = p.forward(&[x0, x1]).unwrap();
        assert!((eta - oracle).abs() < 1e-12);
    }

    #[test]
    fn output_strictly_inside_unit_interval_for_huge_inputs() {
        let p = MlpParameters::new_random(&[2, 16, 16, 1], 5).unwrap();
        for f in [[1e6, 1e6], [-1e6, 1e6], [1e6, 0.0], [-1e6, -1e6]] {
            let eta = p.forward(&f).unwrap();
            assert!(eta > 0.0 && eta < 1.0, "eta = {eta} for {f:?}");
        }
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let p = MlpParameters::new_random(&[2, 4, 1], 1).unwrap();
        assert!(p.forward(&[f64::NAN, 0.0]).is_err());
        assert!(p.forward(&[0.0, f64::INFINITY]).is_err());
        assert!(p.forward(&[0.0]).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = MlpParameters::new_random(&[2, 16, 16, 1], 42).unwrap();
        let b = MlpParameters::new_random(&[2, 16, 16, 1], 42).unwrap();
        assert_eq!(a, b);
        for l in 0..a.weights.len() {
            assert!(a.weights[l].iter().all(|w| (-0.5..=0.5).contains(w)));
        }
        let c = MlpParameters::new_random(&[2, 16, 16, 1], 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("evcon_w_{}.txt", std::process::id()));
        let mut p = MlpParameters::new_random(&[2, 8, 1], 77).unwrap();
        p.set_feature_scale(Some(FeatureScale {
            mean: vec![0.1, 2.0],
            std: vec![1.5, 3.0],
        }))
        .unwrap();
        p.save(&path).unwrap();
        let q = MlpParameters::load(&path).unwrap();
        assert_eq!(p.weights, q.weights);
        assert_eq!(p.biases, q.biases);
        assert_eq!(p.feature_scale, q.feature_scale);
        std::fs::remove_file(&path).unwrap();

        // Without scaling the optional line is absent.
        let path2 = dir.join(format!("evcon_w2_{}.txt", std::process::id()));
        let p2 = MlpParameters::new_random(&[2, 4, 1], 3).unwrap();
        p2.save(&path2).unwrap();
        let q2 = MlpParameters::load(&path2).unwrap();
        assert_eq!(p2, q2);
        std::fs::remove_file(&path2).unwrap();
    }

    #[test]
    fn flat_indexing_round_trip() {
        let mut p = MlpParameters::new_random(&[2, 3, 1], 9).unwrap();
        let n = p.param_count();
        assert_eq!(n, 2 * 3 + 3 + 3 + 1);
        let before: Vec<f64> = (0..n).map(|i| p.get_flat(i)).collect();
        p.set_flat(4, 99.0);
        assert_eq!(p.get_flat(4), 99.0);
        p.set_flat(4, before[4]);
        let after: Vec<f64> = (0..n).map(|i| p.get_flat(i)).collect();
        assert_eq!(before, after);
    }
}
