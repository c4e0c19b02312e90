//! On-disk layout for a run: line-delimited records and per-sample
//! probabilities, the resolved config with its hash, and the aggregate
//! CSV tables. Everything here is deterministic given the inputs.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{
    CellFailure, ExperimentConfig, ExperimentError, MethodId, RunRecord, SampleRecord,
};
use crate::metrics::EntropyHistogram;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SAMPLES_FILE: &str = "probs.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const ACCURACY_STD_FILE: &str = "accuracy_std.csv";
pub const ECE_FILE: &str = "ece.csv";
pub const ENTROPY_FILE: &str = "entropy.csv";
pub const SWEEP_RECORDS_FILE: &str = "sweep_records.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_BOX_FILE: &str = "sweep_box.csv";
pub const ENTROPY_HIST_FILE: &str = "entropy_hist.csv";

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    config_hash: String,
    config: ExperimentConfig,
}

pub fn write_config(
    dir: &Path,
    config: &ExperimentConfig,
    hash: &str,
) -> Result<(), ExperimentError> {
    let stored = StoredConfig { config_hash: hash.to_string(), config: config.clone() };
    std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&stored)?)?;
    Ok(())
}

pub fn read_config(dir: &Path) -> Result<(ExperimentConfig, String), ExperimentError> {
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| ExperimentError::MissingFile(path.display().to_string()))?;
    let stored: StoredConfig = serde_json::from_str(&text)?;
    Ok((stored.config, stored.config_hash))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ExperimentError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut file, item)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let file = std::fs::File::open(path)
        .map_err(|_| ExperimentError::MissingFile(path.display().to_string()))?;
    let mut items = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}

pub fn write_records(dir: &Path, records: &[RunRecord]) -> Result<(), ExperimentError> {
    write_jsonl(&dir.join(RECORDS_FILE), records)
}

pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>, ExperimentError> {
    read_jsonl(&dir.join(RECORDS_FILE))
}

pub fn write_samples(dir: &Path, samples: &[SampleRecord]) -> Result<(), ExperimentError> {
    write_jsonl(&dir.join(SAMPLES_FILE), samples)
}

pub fn read_samples(dir: &Path) -> Result<Vec<SampleRecord>, ExperimentError> {
    read_jsonl(&dir.join(SAMPLES_FILE))
}

pub fn write_failures(dir: &Path, failures: &[CellFailure]) -> Result<(), ExperimentError> {
    write_jsonl(&dir.join(FAILURES_FILE), failures)
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn grouped(
    records: &[RunRecord],
    shots: usize,
    method: MethodId,
    value: impl Fn(&RunRecord) -> f64,
) -> Option<(f64, f64)> {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.shots == shots && r.method == method)
        .map(value)
        .collect();
    if values.is_empty() {
        None
    } else {
        Some(mean_and_std(&values))
    }
}

fn write_table(
    path: &Path,
    records: &[RunRecord],
    shots_list: &[usize],
    methods: &[MethodId],
    value: impl Fn(&RunRecord) -> f64 + Copy,
    take_std: bool,
) -> Result<(), ExperimentError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["shots".to_string()];
    header.extend(methods.iter().map(|m| m.as_str().to_string()));
    writer.write_record(&header)?;
    for &shots in shots_list {
        let mut row = vec![shots.to_string()];
        for &method in methods {
            row.push(match grouped(records, shots, method, value) {
                Some((mean, std)) => {
                    format!("{:.6}", if take_std { std } else { mean })
                }
                None => String::new(),
            });
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Rewrites the four aggregate tables from the records alone: accuracy
/// mean and std over seeds per shot count and method, calibration error
/// for the in-context methods, and mean predictive entropy.
pub fn write_csvs(dir: &Path, records: &[RunRecord]) -> Result<(), ExperimentError> {
    let shots_list: Vec<usize> = records
        .iter()
        .map(|r| r.shots)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let methods: Vec<MethodId> = records
        .iter()
        .map(|r| r.method)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let llm_methods: Vec<MethodId> =
        methods.iter().copied().filter(|m| m.is_llm()).collect();
    write_table(
        &dir.join(ACCURACY_FILE),
        records,
        &shots_list,
        &methods,
        |r| r.accuracy,
        false,
    )?;
    write_table(
        &dir.join(ACCURACY_STD_FILE),
        records,
        &shots_list,
        &methods,
        |r| r.accuracy,
        true,
    )?;
    if !llm_methods.is_empty() {
        write_table(&dir.join(ECE_FILE), records, &shots_list, &llm_methods, |r| r.ece, false)?;
    }
    write_table(
        &dir.join(ENTROPY_FILE),
        records,
        &shots_list,
        &methods,
        |r| r.mean_entropy_bits,
        false,
    )?;
    Ok(())
}

/// One histogram of predictive entropies per method, pooled over the
/// whole grid.
pub fn write_entropy_hist(
    dir: &Path,
    hists: &[(MethodId, EntropyHistogram)],
) -> Result<(), ExperimentError> {
    let mut writer = csv::Writer::from_path(dir.join(ENTROPY_HIST_FILE))?;
    writer.write_record(["method", "bin_lo_bits", "bin_hi_bits", "count"])?;
    for (method, hist) in hists {
        for (i, &count) in hist.counts.iter().enumerate() {
            writer.write_record([
                method.as_str().to_string(),
                format!("{:.6}", hist.edges[i]),
                format!("{:.6}", hist.edges[i + 1]),
                count.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Per-template accuracy summary, one row per template and method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub template_id: String,
    pub method: MethodId,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// Box statistics of per-template mean accuracies for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRow {
    pub method: MethodId,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub variance: f64,
}

pub fn write_sweep_outputs(
    dir: &Path,
    records: &[RunRecord],
    rows: &[SweepRow],
    boxes: &[BoxRow],
) -> Result<(), ExperimentError> {
    write_jsonl(&dir.join(SWEEP_RECORDS_FILE), records)?;
    let mut writer = csv::Writer::from_path(dir.join(SWEEP_FILE))?;
    writer.write_record(["template_id", "method", "accuracy_mean", "accuracy_std"])?;
    for row in rows {
        writer.write_record([
            row.template_id.clone(),
            row.method.as_str().to_string(),
            format!("{:.6}", row.accuracy_mean),
            format!("{:.6}", row.accuracy_std),
        ])?;
    }
    writer.flush()?;
    let mut writer = csv::Writer::from_path(dir.join(SWEEP_BOX_FILE))?;
    writer.write_record(["method", "min", "q1", "median", "q3", "max", "variance"])?;
    for b in boxes {
        writer.write_record([
            b.method.as_str().to_string(),
            format!("{:.6}", b.min),
            format!("{:.6}", b.q1),
            format!("{:.6}", b.median),
            format!("{:.6}", b.q3),
            format!("{:.6}", b.max),
            format!("{:.9}", b.variance),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: MethodId, shots: usize, seed: u64, accuracy: f64) -> RunRecord {
        RunRecord {
            cell: super::super::cell_key(method, shots, seed, ""),
            method,
            shots,
            seed,
            template_id: String::new(),
            n_test: 10,
            accuracy,
            ece: 0.1,
            mean_entropy_bits: 2.5,
            demos_hash: "d".repeat(64),
            config_hash: "c".repeat(64),
            probs_ref: format!("{SAMPLES_FILE}#x"),
            wall_secs: 0.5,
        }
    }

    #[test]
    fn records_and_samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![record(MethodId::Vanilla, 4, 0, 0.7)];
        write_records(dir.path(), &records).unwrap();
        assert_eq!(read_records(dir.path()).unwrap(), records);

        let samples = vec![SampleRecord {
            cell: "vanilla-s4-r0".to_string(),
            method: MethodId::Vanilla,
            idx: 0,
            label: 3,
            pred: 3,
            probs: vec![0.125; 8],
            coverage: 0.93,
            source: "mock".to_string(),
        }];
        write_samples(dir.path(), &samples).unwrap();
        assert_eq!(read_samples(dir.path()).unwrap(), samples);
    }

    #[test]
    fn config_round_trips_with_its_hash() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig::default();
        let hash = super::super::config_hash(&config).unwrap();
        write_config(dir.path(), &config, &hash).unwrap();
        let (loaded, loaded_hash) = read_config(dir.path()).unwrap();
        assert_eq!(loaded, config);
        assert_eq!(loaded_hash, hash);
    }

    #[test]
    fn missing_files_are_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        match read_records(dir.path()) {
            Err(ExperimentError::MissingFile(p)) => assert!(p.contains("records.jsonl")),
            other => panic!("expected missing-file error, got {other:?}"),
        }
    }

    #[test]
    fn accuracy_table_has_one_row_per_shot_count() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            record(MethodId::Vanilla, 4, 0, 0.6),
            record(MethodId::Vanilla, 4, 1, 0.8),
            record(MethodId::Guessing, 4, 0, 0.1),
            record(MethodId::Guessing, 4, 1, 0.2),
            record(MethodId::Vanilla, 8, 0, 0.9),
            record(MethodId::Guessing, 8, 0, 0.15),
        ];
        write_csvs(dir.path(), &records).unwrap();
        let text = std::fs::read_to_string(dir.path().join(ACCURACY_FILE)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "shots,vanilla,guessing");
        assert_eq!(lines[1], "4,0.700000,0.150000");
        assert_eq!(lines[2], "8,0.900000,0.150000");
        assert_eq!(lines.len(), 3);

        let std_text = std::fs::read_to_string(dir.path().join(ACCURACY_STD_FILE)).unwrap();
        let std_lines: Vec<&str> = std_text.lines().collect();
        // sample std of {0.6, 0.8} is sqrt(0.02)
        assert!(std_lines[1].starts_with("4,0.141421,"));
        // single record gets std 0
        assert!(std_lines[2].starts_with("8,0.000000,"));

        let ece_text = std::fs::read_to_string(dir.path().join(ECE_FILE)).unwrap();
        assert!(ece_text.starts_with("shots,vanilla\n"), "ece: {ece_text}");

        let entropy_text = std::fs::read_to_string(dir.path().join(ENTROPY_FILE)).unwrap();
        assert!(entropy_text.starts_with("shots,vanilla,guessing\n"));
    }

    #[test]
    fn sweep_outputs_have_expected_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            SweepRow {
                template_id: "format-1".to_string(),
                method: MethodId::Vanilla,
                accuracy_mean: 0.7,
                accuracy_std: 0.05,
            },
            SweepRow {
                template_id: "format-2".to_string(),
                method: MethodId::Vanilla,
                accuracy_mean: 0.72,
                accuracy_std: 0.04,
            },
        ];
        let boxes = vec![BoxRow {
            method: MethodId::Vanilla,
            min: 0.7,
            q1: 0.705,
            median: 0.71,
            q3: 0.715,
            max: 0.72,
            variance: 0.0002,
        }];
        write_sweep_outputs(dir.path(), &[], &rows, &boxes).unwrap();
        let text = std::fs::read_to_string(dir.path().join(SWEEP_FILE)).unwrap();
        assert_eq!(text.lines().count(), 3);
        let text = std::fs::read_to_string(dir.path().join(SWEEP_BOX_FILE)).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("method,min,q1,median,q3,max,variance"));
    }
}
