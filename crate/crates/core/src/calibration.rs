//! Decision rules over recovered label probabilities: raw argmax plus two
//! affine recalibrations, one fit from content-free queries and one fit by
//! gradient descent on leave-one-out probes. Neither needs labels beyond
//! the demonstrations already in the prompt.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::channel::ReceivedSample;
use crate::llm::{label_probabilities, Backend, ClientError, LabelProbs};
use crate::metrics;
use crate::prompting::{
    build_prompt, content_free_prompt, PromptError, PromptTemplate, QuantizationConfig,
};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {k} classes")]
    BadLabel { label: usize, k: usize },
    #[error("calibrated logits are not finite")]
    NonFinite,
    #[error(
        "content-free probability for class {class} is {value:.3e}, too small to invert; \
         add content-free text variants"
    )]
    TinyContentFreeMass { class: usize, value: f64 },
    #[error("need at least 2 demonstrations for leave-one-out probes, got {0}")]
    NotEnoughProbes(usize),
    #[error("no content-free texts supplied")]
    EmptyCfTexts,
    #[error("no probe items")]
    EmptyProbeSet,
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibMethod {
    Vanilla,
    Conc,
    Linc,
}

impl CalibMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            CalibMethod::Vanilla => "vanilla",
            CalibMethod::Conc => "conc",
            CalibMethod::Linc => "linc",
        }
    }
}

/// Affine map `softmax(A p + b)` applied to recovered probabilities.
/// Vanilla keeps the identity and bypasses the softmax entirely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibParams {
    pub method: CalibMethod,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl CalibParams {
    pub fn identity(method: CalibMethod, k: usize) -> Self {
        let mut a = vec![vec![0.0; k]; k];
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { method, a, b: vec![0.0; k] }
    }

    pub fn k(&self) -> usize {
        self.b.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_dims(params: &CalibParams, k: usize) -> Result<(), CalibError> {
    if params.b.len() != k || params.a.len() != k {
        return Err(CalibError::DimMismatch { expected: k, got: params.b.len() });
    }
    for row in &params.a {
        if row.len() != k {
            return Err(CalibError::DimMismatch { expected: k, got: row.len() });
        }
    }
    Ok(())
}

/// Runs the affine map and softmax; vanilla parameters pass input through.
/// Coverage and source survive recalibration.
pub fn apply_calibration(
    params: &CalibParams,
    lp: &LabelProbs,
) -> Result<LabelProbs, CalibError> {
    if params.method == CalibMethod::Vanilla {
        return Ok(lp.clone());
    }
    let k = lp.k();
    check_dims(params, k)?;
    let mut z = params.b.clone();
    for (i, row) in params.a.iter().enumerate() {
        for (j, a) in row.iter().enumerate() {
            z[i] += a * lp.probs[j];
        }
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::NonFinite);
    }
    Ok(LabelProbs { probs: softmax(&z), coverage: lp.coverage, source: lp.source.clone() })
}

/// Calibrated class decision: largest probability, lowest index on ties.
pub fn predict(lp: &LabelProbs) -> usize {
    metrics::argmax(&lp.probs)
}

/// Scores each content-free query text under the full demonstration
/// context and averages the recovered distributions.
pub fn conc_content_free_probs(
    backend: &dyn Backend,
    template: &PromptTemplate,
    demos: &[ReceivedSample],
    cf_texts: &[String],
    q: &QuantizationConfig,
) -> Result<LabelProbs, CalibError> {
    if cf_texts.is_empty() {
        return Err(CalibError::EmptyCfTexts);
    }
    let k = template.k();
    let mut mean = vec![0.0; k];
    let mut coverage = 0.0;
    for text in cf_texts {
        let prompt = content_free_prompt(template, demos, text, q)?;
        let lp = label_probabilities(backend, &prompt)?;
        for (m, p) in mean.iter_mut().zip(&lp.probs) {
            *m += p;
        }
        coverage += lp.coverage;
    }
    let n = cf_texts.len() as f64;
    Ok(LabelProbs::from_masses(&mean, coverage / n, backend.name())?)
}

/// Contextual calibration: inverts the content-free distribution, so a
/// class the model favors on no evidence gets scaled down by that favor.
pub fn conc_params(cf: &LabelProbs) -> Result<CalibParams, CalibError> {
    let k = cf.k();
    let mut params = CalibParams::identity(CalibMethod::Conc, k);
    for (class, &p) in cf.probs.iter().enumerate() {
        if p < 1e-9 {
            return Err(CalibError::TinyContentFreeMass { class, value: p });
        }
        params.a[class][class] = 1.0 / p;
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinCInit {
    #[default]
    IdentityAZeroB,
    ZeroAZeroB,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinCConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub init: LinCInit,
}

impl Default for LinCConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, epochs: 100, init: LinCInit::IdentityAZeroB }
    }
}

/// One supervised example for fitting: recovered probabilities plus the
/// true class of the held-out demonstration.
#[derive(Clone, Debug)]
pub struct ProbeItem {
    pub probs: LabelProbs,
    pub label: usize,
}

/// Mean cross-entropy of `softmax(A p + b)` over probe items, with exact
/// gradients in A and b.
pub fn linc_loss_and_grad(
    a: &[Vec<f64>],
    b: &[f64],
    items: &[ProbeItem],
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>), CalibError> {
    if items.is_empty() {
        return Err(CalibError::EmptyProbeSet);
    }
    let k = b.len();
    let mut loss = 0.0;
    let mut grad_a = vec![vec![0.0; k]; k];
    let mut grad_b = vec![0.0; k];
    for item in items {
        if item.probs.k() != k {
            return Err(CalibError::DimMismatch { expected: k, got: item.probs.k() });
        }
        if item.label >= k {
            return Err(CalibError::BadLabel { label: item.label, k });
        }
        let p = &item.probs.probs;
        let mut z = b.to_vec();
        for (i, row) in a.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                z[i] += w * p[j];
            }
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[item.label];
        let q = softmax(&z);
        for i in 0..k {
            let residual = q[i] - (i == item.label) as usize as f64;
            grad_b[i] += residual;
            for j in 0..k {
                grad_a[i][j] += residual * p[j];
            }
        }
    }
    let n = items.len() as f64;
    loss /= n;
    for row in &mut grad_a {
        for g in row.iter_mut() {
            *g /= n;
        }
    }
    for g in &mut grad_b {
        *g /= n;
    }
    Ok((loss, grad_a, grad_b))
}

#[derive(Clone, Debug)]
pub struct LinCFit {
    pub params: CalibParams,
    /// Mean cross-entropy at every iterate, starting with the init.
    pub loss_curve: Vec<f64>,
}

/// Full-batch gradient descent; returns the iterate with the lowest loss,
/// the earliest one on ties, so extra epochs never hurt.
pub fn linc_fit(items: &[ProbeItem], cfg: &LinCConfig) -> Result<LinCFit, CalibError> {
    if items.is_empty() {
        return Err(CalibError::EmptyProbeSet);
    }
    let k = items[0].probs.k();
    let mut params = match cfg.init {
        LinCInit::IdentityAZeroB => CalibParams::identity(CalibMethod::Linc, k),
        LinCInit::ZeroAZeroB => {
            CalibParams { method: CalibMethod::Linc, a: vec![vec![0.0; k]; k], b: vec![0.0; k] }
        }
    };
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    for _ in 0..cfg.epochs {
        let (loss, grad_a, grad_b) = linc_loss_and_grad(&params.a, &params.b, items)?;
        curve.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = params.clone();
        }
        for (row, grad_row) in params.a.iter_mut().zip(&grad_a) {
            for (w, g) in row.iter_mut().zip(grad_row) {
                *w -= cfg.learning_rate * g;
            }
        }
        for (w, g) in params.b.iter_mut().zip(&grad_b) {
            *w -= cfg.learning_rate * g;
        }
    }
    let (final_loss, _, _) = linc_loss_and_grad(&params.a, &params.b, items)?;
    curve.push(final_loss);
    if final_loss < best_loss {
        best = params;
    }
    Ok(LinCFit { params: best, loss_curve: curve })
}

/// Builds the label-free training set for linear calibration: each
/// demonstration in turn becomes the query while the rest stay in context.
pub fn linc_probe_set(
    backend: &dyn Backend,
    template: &PromptTemplate,
    demos: &[ReceivedSample],
    q: &QuantizationConfig,
) -> Result<Vec<ProbeItem>, CalibError> {
    if demos.len() < 2 {
        return Err(CalibError::NotEnoughProbes(demos.len()));
    }
    let mut items = Vec::with_capacity(demos.len());
    for held_out in 0..demos.len() {
        let context: Vec<ReceivedSample> = demos
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != held_out)
            .map(|(_, s)| s.clone())
            .collect();
        let prompt = build_prompt(template, &context, demos[held_out].x, q)?;
        let probs = label_probabilities(backend, &prompt)?;
        items.push(ProbeItem { probs, label: demos[held_out].y });
    }
    Ok(items)
}
