//! Label-token scoring against a text-completion backend.
//!
//! A backend returns top token log-probabilities for a one-token
//! completion. Each class's captured mass is the larger of its bare and
//! leading-space token variants; absent tokens contribute nothing; the
//! captured mass is kept as `coverage` and the masses are renormalized
//! into a distribution.

pub mod http;
pub mod mock;
pub mod server;
pub mod wire;

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::prompting::Prompt;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("no label token appeared in the top logprobs for template {template_id}; raise top_logprobs or check the verbalizer")]
    NoLabelMass { template_id: String },
    #[error("probability vector invalid: {0}")]
    BadProbs(String),
    #[error("api key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("mock could not parse prompt: {0}")]
    MockParse(String),
    #[error("replay log has no entry for this prompt")]
    ReplayMiss,
    #[error("backend call budget exhausted after {0} calls")]
    BudgetExhausted(u64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Top token log-probabilities for the single completed token, most likely
/// first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub top: Vec<(String, f64)>,
}

impl TokenLogprobs {
    pub fn logprob(&self, token: &str) -> Option<f64> {
        self.top.iter().find(|(t, _)| t == token).map(|(_, lp)| *lp)
    }
}

/// A one-token completion scorer, safe to call from worker threads.
pub trait Backend: Send + Sync {
    fn complete(&self, prompt_text: &str) -> Result<TokenLogprobs, ClientError>;
    /// Short name recorded as the provenance of returned probabilities.
    fn name(&self) -> String;
}

impl Backend for Box<dyn Backend> {
    fn complete(&self, prompt_text: &str) -> Result<TokenLogprobs, ClientError> {
        self.as_ref().complete(prompt_text)
    }

    fn name(&self) -> String {
        self.as_ref().name()
    }
}

/// Class probabilities recovered from one scorer call. `probs` sums to one;
/// `coverage` is the raw label-token mass found before renormalization;
/// `source` names the scorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelProbs {
    pub probs: Vec<f64>,
    pub coverage: f64,
    pub source: String,
}

impl LabelProbs {
    /// Normalizes non-negative finite masses into a distribution.
    pub fn from_masses(
        masses: &[f64],
        coverage: f64,
        source: impl Into<String>,
    ) -> Result<Self, ClientError> {
        if masses.is_empty() {
            return Err(ClientError::BadProbs("empty mass vector".into()));
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(ClientError::BadProbs("masses must be finite and non-negative".into()));
        }
        let sum: f64 = masses.iter().sum();
        if sum <= 0.0 {
            return Err(ClientError::BadProbs("total mass is zero".into()));
        }
        Ok(Self {
            probs: masses.iter().map(|m| m / sum).collect(),
            coverage,
            source: source.into(),
        })
    }

    pub fn uniform(k: usize, source: impl Into<String>) -> Self {
        Self { probs: vec![1.0 / k as f64; k], coverage: 1.0, source: source.into() }
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }
}

/// Scores a prompt's label tokens with one backend call. Per label the
/// captured mass is `max(P(token), P(" " + token))`; the total captured
/// mass becomes `coverage`; masses are renormalized. Errors if no label
/// token appears at all.
pub fn label_probabilities(
    backend: &dyn Backend,
    prompt: &Prompt,
) -> Result<LabelProbs, ClientError> {
    let top = backend.complete(&prompt.text)?;
    let mut masses = Vec::with_capacity(prompt.label_tokens.len());
    for token in &prompt.label_tokens {
        let bare = top.logprob(token);
        let spaced = top.logprob(&format!(" {token}"));
        let mass = match (bare, spaced) {
            (Some(a), Some(b)) => a.max(b).exp(),
            (Some(a), None) | (None, Some(a)) => a.exp(),
            (None, None) => 0.0,
        };
        masses.push(mass);
    }
    let captured: f64 = masses.iter().sum();
    if captured <= 0.0 {
        return Err(ClientError::NoLabelMass { template_id: prompt.template_id.clone() });
    }
    LabelProbs::from_masses(&masses, captured.min(1.0), backend.name())
}

/// Decorator that counts calls and enforces an optional budget.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicU64,
    cap: Option<u64>,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B, cap: Option<u64>) -> Self {
        Self { inner, calls: AtomicU64::new(0), cap }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn complete(&self, prompt_text: &str) -> Result<TokenLogprobs, ClientError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if let Some(cap) = self.cap {
            if n > cap {
                return Err(ClientError::BudgetExhausted(cap));
            }
        }
        self.inner.complete(prompt_text)
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Backend stub returning a fixed token table.
    pub(crate) struct FixedBackend(pub Vec<(String, f64)>);

    impl Backend for FixedBackend {
        fn complete(&self, _prompt: &str) -> Result<TokenLogprobs, ClientError> {
            Ok(TokenLogprobs { top: self.0.clone() })
        }
        fn name(&self) -> String {
            "fixed".to_string()
        }
    }

    fn digit_prompt() -> Prompt {
        Prompt {
            text: "irrelevant".to_string(),
            label_tokens: (0..8).map(|i| i.to_string()).collect(),
            template_id: "format-1".to_string(),
        }
    }

    #[test]
    fn captured_mass_renormalizes_to_the_documented_split() {
        let backend = FixedBackend(vec![
            ("5".to_string(), 0.6f64.ln()),
            ("3".to_string(), 0.2f64.ln()),
            ("\n".to_string(), 0.2f64.ln()),
        ]);
        let p = label_probabilities(&backend, &digit_prompt()).unwrap();
        assert!((p.coverage - 0.8).abs() < 1e-12);
        let mut expected = vec![0.0; 8];
        expected[3] = 0.25;
        expected[5] = 0.75;
        for (got, want) in p.probs.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(p.source, "fixed");
    }

    #[test]
    fn leading_space_variant_counts_once_via_max() {
        let backend = FixedBackend(vec![
            (" 5".to_string(), 0.5f64.ln()),
            ("5".to_string(), 0.3f64.ln()),
            (" 2".to_string(), 0.5f64.ln()),
        ]);
        let p = label_probabilities(&backend, &digit_prompt()).unwrap();
        assert!((p.coverage - 1.0).abs() < 1e-12);
        assert!((p.probs[5] - 0.5).abs() < 1e-12);
        assert!((p.probs[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_all_label_tokens_is_a_hard_error() {
        let backend = FixedBackend(vec![
            ("\n".to_string(), 0.9f64.ln()),
            ("the".to_string(), 0.1f64.ln()),
        ]);
        let err = label_probabilities(&backend, &digit_prompt()).unwrap_err();
        assert!(matches!(err, ClientError::NoLabelMass { .. }));
    }

    #[test]
    fn raising_a_label_logprob_weakly_raises_its_probability() {
        let mut last = 0.0;
        for step in 1..=8 {
            let mass = 0.1 * step as f64;
            let backend = FixedBackend(vec![
                ("4".to_string(), mass.ln()),
                ("1".to_string(), 0.1f64.ln()),
            ]);
            let p = label_probabilities(&backend, &digit_prompt()).unwrap();
            assert!(
                p.probs[4] >= last,
                "probability dropped from {last} at mass {mass}"
            );
            last = p.probs[4];
        }
    }

    #[test]
    fn from_masses_validates_inputs() {
        assert!(LabelProbs::from_masses(&[], 1.0, "t").is_err());
        assert!(LabelProbs::from_masses(&[0.1, -0.2], 1.0, "t").is_err());
        assert!(LabelProbs::from_masses(&[0.0, 0.0], 1.0, "t").is_err());
        assert!(LabelProbs::from_masses(&[0.1, f64::NAN], 1.0, "t").is_err());
        let p = LabelProbs::from_masses(&[1.0, 3.0], 0.5, "t").unwrap();
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p.probs[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn uniform_distribution_is_flat_and_normalized() {
        let p = LabelProbs::uniform(8, "guessing");
        assert_eq!(p.k(), 8);
        assert!(p.probs.iter().all(|v| (*v - 0.125).abs() < 1e-15));
        assert!((p.coverage - 1.0).abs() < 1e-15);
    }

    #[test]
    fn counting_backend_enforces_its_budget() {
        let backend = CountingBackend::new(
            FixedBackend(vec![("0".to_string(), 0.0)]),
            Some(2),
        );
        assert!(backend.complete("a").is_ok());
        assert!(backend.complete("b").is_ok());
        let err = backend.complete("c").unwrap_err();
        assert!(matches!(err, ClientError::BudgetExhausted(2)));
        assert_eq!(backend.calls(), 3);
    }
}
