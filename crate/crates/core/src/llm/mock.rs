//! Deterministic in-process stand-in for a completion backend.
//!
//! The mock parses a prompt back into numeric demonstrations, forms
//! per-class centroids in the quantized plane, and scores each class by
//! negative squared distance to its centroid over a temperature. Classes
//! without demonstrations always score strictly below every demonstrated
//! class; a non-numeric (content-free) query gives every demonstrated class
//! the same score. Scores go through a softmax and come back as token
//! logprobs, so the same plumbing serves real and mock backends.

use crate::llm::{Backend, ClientError, TokenLogprobs};
use crate::prompting::{parse_prompt, template_registry, ParsedPrompt, PromptTemplate};

/// Smallest probability a token is allowed to report; keeps logprobs finite
/// and serializable even when a class is astronomically far away.
const MIN_PROB: f64 = 1e-300;

pub struct MockBackend {
    templates: Vec<PromptTemplate>,
    /// Softmax temperature over squared quantized-plane distances.
    pub temperature: f64,
    /// Additive score penalty for classes with no demonstrations.
    pub penalty: f64,
    /// Number of top tokens reported.
    pub top_n: usize,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    /// Mock over the built-in template registry.
    pub fn new() -> Self {
        Self::with_templates(template_registry())
    }

    pub fn with_templates(templates: Vec<PromptTemplate>) -> Self {
        Self { templates, temperature: 1.0, penalty: 10.0, top_n: 20 }
    }

    /// Scores one prompt; a pure function of the text.
    pub fn score(&self, text: &str) -> Result<TokenLogprobs, ClientError> {
        let parsed = parse_prompt(text, &self.templates)
            .map_err(|e| ClientError::MockParse(e.to_string()))?;
        let scores = self.class_scores(&parsed)?;
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut top: Vec<(String, f64)> = parsed
            .labels
            .iter()
            .zip(exps.iter())
            .map(|(label, e)| (label.clone(), (e / sum).max(MIN_PROB).ln()))
            .collect();
        top.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite logprobs"));
        top.truncate(self.top_n.max(1));
        Ok(TokenLogprobs { top })
    }

    fn class_scores(&self, parsed: &ParsedPrompt) -> Result<Vec<f64>, ClientError> {
        let k = parsed.k();
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); k];
        for demo in &parsed.demos {
            let re: f64 = demo.re_text.parse().map_err(|_| {
                ClientError::MockParse(format!("non-numeric demonstration value {:?}", demo.re_text))
            })?;
            let im: f64 = demo.im_text.parse().map_err(|_| {
                ClientError::MockParse(format!("non-numeric demonstration value {:?}", demo.im_text))
            })?;
            let entry = &mut sums[demo.label];
            entry.0 += re;
            entry.1 += im;
            entry.2 += 1;
        }
        let centroids: Vec<Option<(f64, f64)>> = sums
            .iter()
            .map(|(re, im, n)| (*n > 0).then(|| (re / *n as f64, im / *n as f64)))
            .collect();
        if centroids.iter().all(Option::is_none) {
            return Err(ClientError::MockParse("prompt has no demonstrations".into()));
        }
        let query: Option<(f64, f64)> = match (
            parsed.query.re_text.parse::<f64>(),
            parsed.query.im_text.parse::<f64>(),
        ) {
            (Ok(re), Ok(im)) if re.is_finite() && im.is_finite() => Some((re, im)),
            _ => None,
        };
        let scores = match query {
            Some((qx, qy)) => {
                let d2 = |c: &(f64, f64)| (qx - c.0).powi(2) + (qy - c.1).powi(2);
                let nearest = centroids
                    .iter()
                    .flatten()
                    .map(d2)
                    .fold(f64::INFINITY, f64::min);
                centroids
                    .iter()
                    .map(|c| match c {
                        Some(c) => -d2(c) / self.temperature,
                        None => -nearest / self.temperature - self.penalty,
                    })
                    .collect::<Vec<f64>>()
            }
            None => centroids
                .iter()
                .map(|c| if c.is_some() { 0.0 } else { -self.penalty })
                .collect(),
        };
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(ClientError::MockParse("demonstration values overflow scoring".into()));
        }
        Ok(scores)
    }
}

impl Backend for MockBackend {
    fn complete(&self, prompt_text: &str) -> Result<TokenLogprobs, ClientError> {
        self.score(prompt_text)
    }

    fn name(&self) -> String {
        "mock".to_string()
    }
}
