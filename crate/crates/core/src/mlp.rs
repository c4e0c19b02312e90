//! Small dense ReLU network trained per task on the demonstration pairs,
//! the supervised point of comparison for the in-context methods.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::channel::ReceivedSample;
use crate::llm::LabelProbs;
use crate::metrics;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("depth {0} outside the supported range 4..=7")]
    BadDepth(usize),
    #[error("bad layer spec: {0}")]
    BadSpec(String),
    #[error("feature width {got} does not match input width {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {k} classes")]
    BadLabel { label: usize, k: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty dataset")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Layer widths from input to output, e.g. `[2, 10, 30, 30, 30, 8]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MLPSpec {
    pub layers: Vec<usize>,
}

impl MLPSpec {
    pub fn validate(&self) -> Result<(), MlpError> {
        if self.layers.len() < 2 {
            return Err(MlpError::BadSpec("need at least input and output widths".into()));
        }
        if self.layers.iter().any(|w| *w == 0) {
            return Err(MlpError::BadSpec("zero-width layer".into()));
        }
        Ok(())
    }

    /// Weights plus biases across all layer windows.
    pub fn param_count(&self) -> usize {
        self.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layers.last().expect("validated spec")
    }
}

/// The benchmark family: two inputs, a width-10 first hidden layer, then
/// width-30 hidden layers up to the requested depth, eight outputs.
pub fn dnn(depth: usize) -> Result<MLPSpec, MlpError> {
    if !(4..=7).contains(&depth) {
        return Err(MlpError::BadDepth(depth));
    }
    let mut layers = vec![2, 10];
    layers.extend(std::iter::repeat(30).take(depth - 1));
    layers.push(8);
    Ok(MLPSpec { layers })
}

pub fn dnn_name(depth: usize) -> String {
    format!("dnn{depth}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major, `out_dim` rows by `in_dim` columns.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MLPModel {
    pub spec: MLPSpec,
    pub layers: Vec<Layer>,
    pub name: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Weights and biases uniform on +-1/sqrt(fan_in).
    #[default]
    UniformFanIn,
}

pub fn build_mlp(
    spec: &MLPSpec,
    init: InitScheme,
    name: &str,
    rng: &mut impl Rng,
) -> Result<MLPModel, MlpError> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.layers.len() - 1);
    for window in spec.layers.windows(2) {
        let (in_dim, out_dim) = (window[0], window[1]);
        let bound = match init {
            InitScheme::UniformFanIn => 1.0 / (in_dim as f64).sqrt(),
        };
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        layers.push(Layer { in_dim, out_dim, w, b });
    }
    Ok(MLPModel { spec: spec.clone(), layers, name: name.to_string() })
}

/// Convenience constructor for the benchmark family.
pub fn dnn_model(depth: usize, rng: &mut impl Rng) -> Result<MLPModel, MlpError> {
    build_mlp(&dnn(depth)?, InitScheme::UniformFanIn, &dnn_name(depth), rng)
}

impl MLPModel {
    pub fn save(&self, path: &Path) -> Result<(), MlpError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MlpError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn features(x: Complex64) -> Vec<f64> {
    vec![x.re, x.im]
}

/// Pre-activations and post-activations per layer; ReLU on hidden layers,
/// raw logits at the output.
fn forward_pass(model: &MLPModel, input: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut post = Vec::with_capacity(model.layers.len() + 1);
    post.push(input.to_vec());
    for (l, layer) in model.layers.iter().enumerate() {
        let a = post.last().expect("post has input");
        let mut z = layer.b.clone();
        for o in 0..layer.out_dim {
            let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
            z[o] += row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>();
        }
        let activated = if l + 1 < model.layers.len() {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(activated);
    }
    (pre, post)
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn forward(model: &MLPModel, input: &[f64]) -> Result<LabelProbs, MlpError> {
    if input.len() != model.spec.input_width() {
        return Err(MlpError::DimMismatch {
            expected: model.spec.input_width(),
            got: input.len(),
        });
    }
    let (pre, _) = forward_pass(model, input);
    let probs = softmax(pre.last().expect("at least one layer"));
    Ok(LabelProbs { probs, coverage: 1.0, source: model.name.clone() })
}

/// Zero-filled gradient holder shaped like the model's layers.
fn zero_grads(model: &MLPModel) -> Vec<Layer> {
    model
        .layers
        .iter()
        .map(|l| Layer {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            w: vec![0.0; l.w.len()],
            b: vec![0.0; l.b.len()],
        })
        .collect()
}

/// Mean cross-entropy over the batch and its exact gradients.
pub fn loss_and_grads(
    model: &MLPModel,
    xs: &[Vec<f64>],
    ys: &[usize],
) -> Result<(f64, Vec<Layer>), MlpError> {
    if xs.len() != ys.len() {
        return Err(MlpError::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    if xs.is_empty() {
        return Err(MlpError::Empty);
    }
    let k = model.spec.output_width();
    let mut grads = zero_grads(model);
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        if y >= k {
            return Err(MlpError::BadLabel { label: y, k });
        }
        if x.len() != model.spec.input_width() {
            return Err(MlpError::DimMismatch {
                expected: model.spec.input_width(),
                got: x.len(),
            });
        }
        let (pre, post) = forward_pass(model, x);
        let logits = pre.last().expect("at least one layer");
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - logits[y];
        let mut delta = softmax(logits);
        delta[y] -= 1.0;
        for l in (0..model.layers.len()).rev() {
            let layer = &model.layers[l];
            let a_in = &post[l];
            for o in 0..layer.out_dim {
                grads[l].b[o] += delta[o];
                for (i, a) in a_in.iter().enumerate() {
                    grads[l].w[o * layer.in_dim + i] += delta[o] * a;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for o in 0..layer.out_dim {
                    for (i, p) in prev.iter_mut().enumerate() {
                        *p += layer.w[o * layer.in_dim + i] * delta[o];
                    }
                }
                for (p, z) in prev.iter_mut().zip(&pre[l - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    let n = xs.len() as f64;
    loss /= n;
    for g in &mut grads {
        for w in &mut g.w {
            *w /= n;
        }
        for b in &mut g.b {
            *b /= n;
        }
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 2000 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean cross-entropy at every iterate, starting with the init.
    pub loss_curve: Vec<f64>,
}

struct AdamState {
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_step(model: &mut MLPModel, grads: &[Layer], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let bias1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *param -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        };
        for (i, w) in layer.w.iter_mut().enumerate() {
            update(w, grads[l].w[i], &mut state.m[l].w[i], &mut state.v[l].w[i]);
        }
        for (i, b) in layer.b.iter_mut().enumerate() {
            update(b, grads[l].b[i], &mut state.m[l].b[i], &mut state.v[l].b[i]);
        }
    }
}

/// Full-batch Adam on mean cross-entropy.
pub fn train(
    model: &mut MLPModel,
    xs: &[Vec<f64>],
    ys: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport, MlpError> {
    let mut state = AdamState { m: zero_grads(model), v: zero_grads(model), t: 0 };
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let (loss, grads) = loss_and_grads(model, xs, ys)?;
        curve.push(loss);
        adam_step(model, &grads, &mut state, cfg.learning_rate);
    }
    let (final_loss, _) = loss_and_grads(model, xs, ys)?;
    curve.push(final_loss);
    Ok(TrainReport { loss_curve: curve })
}

/// Trains on received samples, using the raw I/Q pair as features.
pub fn train_on_samples(
    model: &mut MLPModel,
    samples: &[ReceivedSample],
    cfg: &TrainConfig,
) -> Result<TrainReport, MlpError> {
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| features(s.x)).collect();
    let ys: Vec<usize> = samples.iter().map(|s| s.y).collect();
    train(model, &xs, &ys, cfg)
}

/// Accuracy plus the full per-sample distributions.
pub fn evaluate(
    model: &MLPModel,
    samples: &[ReceivedSample],
) -> Result<(f64, Vec<LabelProbs>), MlpError> {
    if samples.is_empty() {
        return Err(MlpError::Empty);
    }
    let mut hits = 0;
    let mut all = Vec::with_capacity(samples.len());
    for s in samples {
        let lp = forward(model, &features(s.x))?;
        if metrics::argmax(&lp.probs) == s.y {
            hits += 1;
        }
        all.push(lp);
    }
    Ok((hits as f64 / samples.len() as f64, all))
}

pub fn write_loss_curve_csv(path: &Path, curve: &[f64]) -> Result<(), MlpError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["epoch", "loss"])?;
    for (epoch, loss) in curve.iter().enumerate() {
        writer.write_record([epoch.to_string(), format!("{loss:.12}")])?;
    }
    writer.flush()?;
    Ok(())
}
