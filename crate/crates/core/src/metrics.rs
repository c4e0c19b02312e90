//! Accuracy, calibration error, and entropy summaries shared by every
//! decision rule in the pipeline.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("confidence {0} outside (0, 1]")]
    BadConfidence(f64),
    #[error("entropy {0} outside [0, {1}] bits")]
    BadEntropy(f64, f64),
    #[error("bin count must be positive")]
    BadBinCount,
    #[error("label count must be at least 2")]
    BadLabelCount,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { left: preds.len(), right: labels.len() });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EceBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EceReport {
    pub value: f64,
    pub n_samples: usize,
    pub bins: Vec<EceBin>,
}

/// Right-inclusive bin index over (0, 1]: the smallest b with c <= b/B.
/// Scanning edges instead of multiplying out avoids putting values that
/// sit exactly on an edge (0.9 with ten bins) into the wrong bin.
fn confidence_bin(c: f64, bins: usize) -> Result<usize, MetricsError> {
    if !c.is_finite() || c <= 0.0 || c > 1.0 {
        return Err(MetricsError::BadConfidence(c));
    }
    for b in 1..=bins {
        if c <= b as f64 / bins as f64 {
            return Ok(b - 1);
        }
    }
    Ok(bins - 1)
}

/// Expected calibration error over equal-width confidence bins: the
/// bin-weighted mean gap between accuracy and mean confidence.
pub fn ece(confidences: &[f64], corrects: &[bool], bins: usize) -> Result<EceReport, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::BadBinCount);
    }
    if confidences.len() != corrects.len() {
        return Err(MetricsError::LengthMismatch {
            left: confidences.len(),
            right: corrects.len(),
        });
    }
    if confidences.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sums = vec![0.0f64; bins];
    let mut hit_sums = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(corrects) {
        let b = confidence_bin(c, bins)?;
        counts[b] += 1;
        conf_sums[b] += c;
        hit_sums[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut value = 0.0;
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let (mean_confidence, acc) = if counts[b] > 0 {
            (conf_sums[b] / counts[b] as f64, hit_sums[b] as f64 / counts[b] as f64)
        } else {
            (0.0, 0.0)
        };
        value += counts[b] as f64 / n * (acc - mean_confidence).abs();
        out.push(EceBin { lo, hi, count: counts[b], mean_confidence, accuracy: acc });
    }
    Ok(EceReport { value, n_samples: confidences.len(), bins: out })
}

/// Shannon entropy in bits; zero-probability terms contribute nothing.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.log2()).sum()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropyHistogram {
    /// Upper end of the support, log2 of the label count.
    pub max_bits: f64,
    /// bins + 1 edges from 0 to max_bits.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Histogram over [0, log2 k] with the top bin closed. Values may
/// overshoot the top edge by float noise; anything further out errors.
pub fn entropy_histogram(
    entropies: &[f64],
    k: usize,
    bins: usize,
) -> Result<EntropyHistogram, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::BadBinCount);
    }
    if k < 2 {
        return Err(MetricsError::BadLabelCount);
    }
    if entropies.is_empty() {
        return Err(MetricsError::Empty);
    }
    let max_bits = (k as f64).log2();
    let edges: Vec<f64> = (0..=bins).map(|b| b as f64 * max_bits / bins as f64).collect();
    let slack = 1e-9;
    let mut counts = vec![0usize; bins];
    for &e in entropies {
        if !e.is_finite() || e < -slack || e > max_bits + slack {
            return Err(MetricsError::BadEntropy(e, max_bits));
        }
        let mut bin = bins - 1;
        for b in 1..=bins {
            if e <= edges[b] {
                bin = b - 1;
                break;
            }
        }
        counts[bin] += 1;
    }
    Ok(EntropyHistogram { max_bits, edges, counts })
}

pub fn write_ece_csv(path: &Path, report: &EceReport) -> Result<(), MetricsError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["bin_lo", "bin_hi", "count", "mean_confidence", "accuracy"])?;
    for bin in &report.bins {
        writer.write_record([
            format!("{:.6}", bin.lo),
            format!("{:.6}", bin.hi),
            bin.count.to_string(),
            format!("{:.6}", bin.mean_confidence),
            format!("{:.6}", bin.accuracy),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_entropy_histogram_csv(
    path: &Path,
    hist: &EntropyHistogram,
) -> Result<(), MetricsError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["bin_lo_bits", "bin_hi_bits", "count"])?;
    for (b, count) in hist.counts.iter().enumerate() {
        writer.write_record([
            format!("{:.6}", hist.edges[b]),
            format!("{:.6}", hist.edges[b + 1]),
            count.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
