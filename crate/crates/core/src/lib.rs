//! Few-shot symbol demodulation over a noisy 8-APSK link, scored by a
//! frozen text-completion model.
//!
//! The pipeline: [`channel`] simulates the impaired link and draws labeled
//! I/Q samples; [`prompting`] renders them into text prompts; [`llm`] scores
//! label tokens against a real or mock completion backend; [`calibration`]
//! reweights those scores; [`mlp`] trains small dense baselines from
//! scratch; [`metrics`] and [`experiment`] measure everything and
//! orchestrate seeded, reproducible grids with JSONL/CSV outputs.

pub mod calibration;
pub mod channel;
pub mod experiment;
pub mod llm;
pub mod metrics;
pub mod mlp;
pub mod parallel;
pub mod prompting;
pub mod rng;
