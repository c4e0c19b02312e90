//! Simulation of the impaired transmission link.
//!
//! A constellation point is distorted by receiver gain imbalance and
//! quadrature crosstalk, rotated by a random phase shared across one task,
//! and hit with additive complex Gaussian noise whose total variance is
//! `10^(-snr_db/10)`. Tasks bundle demonstration and test samples drawn
//! from one hidden channel realization.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{BufRead, Write};

use crate::rng::SeedRecord;

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("ring spec must contain at least one ring")]
    EmptyRingSpec,
    #[error("ring {index}: point count must be positive")]
    EmptyRing { index: usize },
    #[error("ring {index}: radius {radius} must be positive and finite")]
    BadRadius { index: usize, radius: f64 },
    #[error("ring {index}: radii must be strictly increasing")]
    NonIncreasingRadii { index: usize },
    #[error("label {label} out of range for {k}-point constellation")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("dataset needs n_shots >= 1 and n_test >= 1 (got {n_shots}, {n_test})")]
    EmptyDataset { n_shots: usize, n_test: usize },
    #[error("record io: {0}")]
    Io(#[from] std::io::Error),
    #[error("record parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// One amplitude ring: `count` evenly spaced points at `radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    pub count: usize,
    pub radius: f64,
}

/// The default 8-point layout: four inner points and four outer points at
/// twice the inner radius.
pub fn default_ring_spec() -> Vec<Ring> {
    vec![Ring { count: 4, radius: 1.0 }, Ring { count: 4, radius: 2.0 }]
}

/// Modulation alphabet, scaled to unit average energy. Labels are the point
/// indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    pub points: Vec<Complex64>,
}

impl Constellation {
    pub fn k(&self) -> usize {
        self.points.len()
    }
}

/// Places each ring's points counter-clockwise, inner rings first. Every
/// second ring starting with the innermost is rotated half an angular step
/// so adjacent rings interleave (a lone ring is not rotated). The whole set
/// is scaled so the mean squared magnitude is exactly one.
pub fn make_constellation(ring_spec: &[Ring]) -> Result<Constellation, ChannelError> {
    if ring_spec.is_empty() {
        return Err(ChannelError::EmptyRingSpec);
    }
    let mut energy = 0.0;
    let mut total = 0usize;
    for (index, ring) in ring_spec.iter().enumerate() {
        if ring.count == 0 {
            return Err(ChannelError::EmptyRing { index });
        }
        if !(ring.radius.is_finite() && ring.radius > 0.0) {
            return Err(ChannelError::BadRadius { index, radius: ring.radius });
        }
        if index > 0 && ring.radius <= ring_spec[index - 1].radius {
            return Err(ChannelError::NonIncreasingRadii { index });
        }
        energy += ring.count as f64 * ring.radius * ring.radius;
        total += ring.count;
    }
    let scale = (total as f64 / energy).sqrt();
    let mut points = Vec::with_capacity(total);
    for (index, ring) in ring_spec.iter().enumerate() {
        let step = 2.0 * PI / ring.count as f64;
        let offset = if ring_spec.len() > 1 && index % 2 == 0 { step / 2.0 } else { 0.0 };
        for i in 0..ring.count {
            let angle = offset + step * i as f64;
            points.push(Complex64::from_polar(scale * ring.radius, angle));
        }
    }
    Ok(Constellation { points })
}

/// Scales for the per-task receiver error draws: `eps` lands in
/// `[0, eps_scale]` and `delta` in `[0, delta_scale]` radians, each shaped
/// by Beta(5, 2).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceConfig {
    pub eps_scale: f64,
    pub delta_scale: f64,
}

impl Default for ImbalanceConfig {
    fn default() -> Self {
        Self { eps_scale: 0.15, delta_scale: 15.0 * PI / 180.0 }
    }
}

/// Hidden realization shared by every sample of one task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub psi: f64,
    pub eps: f64,
    pub delta: f64,
}

/// Draws one task's realization: phase uniform over `[0, 2pi)`, then gain
/// error, then crosstalk error, mutually independent.
pub fn draw_channel_state(rng: &mut impl Rng, cfg: &ImbalanceConfig) -> ChannelState {
    let beta = Beta::new(5.0, 2.0).expect("fixed valid shape parameters");
    let psi = rng.random_range(0.0..2.0 * PI);
    let eps = cfg.eps_scale * beta.sample(rng);
    let delta = cfg.delta_scale * beta.sample(rng);
    ChannelState { psi, eps, delta }
}

/// Receiver gain imbalance and quadrature crosstalk applied to one sample:
/// the I rail is scaled by `1 + eps` and the Q rail by `1 - eps` after each
/// rail mixes in the other through `-sin(delta)` (diagonal `cos(delta)`).
/// Linear in `y`.
pub fn apply_iq_imbalance(y: Complex64, eps: f64, delta: f64) -> Complex64 {
    let (s, c) = delta.sin_cos();
    Complex64::new(
        (1.0 + eps) * (c * y.re - s * y.im),
        (1.0 - eps) * (-s * y.re + c * y.im),
    )
}

/// One channel use for constellation point `label`: imbalance, then the
/// task's phase rotation, then complex Gaussian noise with total variance
/// `10^(-snr_db/10)` (half per rail).
pub fn transmit(
    rng: &mut impl Rng,
    label: usize,
    constellation: &Constellation,
    state: &ChannelState,
    snr_db: f64,
) -> Result<Complex64, ChannelError> {
    let point = constellation
        .points
        .get(label)
        .copied()
        .ok_or(ChannelError::LabelOutOfRange { label, k: constellation.k() })?;
    let bar = apply_iq_imbalance(point, state.eps, state.delta);
    let rotated = Complex64::from_polar(1.0, state.psi) * bar;
    let sigma = (10f64.powf(-snr_db / 10.0) / 2.0).sqrt();
    let rail = Normal::new(0.0, sigma).expect("finite noise deviation");
    let noise = Complex64::new(rail.sample(rng), rail.sample(rng));
    Ok(rotated + noise)
}

/// A received point paired with its transmitted label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceivedSample {
    pub x: Complex64,
    pub y: usize,
}

/// Link parameters shared by all samples of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    pub imbalance: ImbalanceConfig,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { snr_db: 5.0, imbalance: ImbalanceConfig::default() }
    }
}

/// A few-shot episode: labeled demonstrations and a held-out test set drawn
/// from one shared channel realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub demos: Vec<ReceivedSample>,
    pub test: Vec<ReceivedSample>,
    pub state: ChannelState,
    pub seed: SeedRecord,
}

/// Draws a complete episode from `seed`: one channel state, then `n_shots`
/// demonstrations followed by `n_test` test samples, labels uniform over
/// the alphabet. The same seed record always reproduces the same episode.
pub fn generate_task(
    seed: &SeedRecord,
    n_shots: usize,
    n_test: usize,
    constellation: &Constellation,
    cfg: &ChannelConfig,
) -> Result<TaskDataset, ChannelError> {
    if n_shots == 0 || n_test == 0 {
        return Err(ChannelError::EmptyDataset { n_shots, n_test });
    }
    let mut rng = seed.rng();
    let state = draw_channel_state(&mut rng, &cfg.imbalance);
    let k = constellation.k();
    let draw = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        (0..n)
            .map(|_| {
                let y = rng.random_range(0..k);
                transmit(rng, y, constellation, &state, cfg.snr_db)
                    .map(|x| ReceivedSample { x, y })
            })
            .collect::<Result<Vec<_>, _>>()
    };
    let demos = draw(n_shots, &mut rng)?;
    let test = draw(n_test, &mut rng)?;
    Ok(TaskDataset { demos, test, state, seed: seed.clone() })
}

/// Flat per-sample record used by the line-delimited dataset format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub re: f64,
    pub im: f64,
    pub label: usize,
    pub split: String,
    pub task_id: String,
    pub seed: String,
}

/// Writes one JSON record per sample, demonstrations first.
pub fn write_task_records<W: Write>(
    w: &mut W,
    task: &TaskDataset,
    task_id: &str,
) -> Result<(), ChannelError> {
    let seed = task.seed.label();
    let splits = [("demo", &task.demos), ("test", &task.test)];
    for (split, samples) in splits {
        for s in samples.iter() {
            let record = TaskRecord {
                re: s.x.re,
                im: s.x.im,
                label: s.y,
                split: split.to_string(),
                task_id: task_id.to_string(),
                seed: seed.clone(),
            };
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads records written by [`write_task_records`] (blank lines skipped).
pub fn read_task_records<R: BufRead>(r: R) -> Result<Vec<TaskRecord>, ChannelError> {
    let mut records = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    const TOL: f64 = 1e-12;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn default_constellation_has_unit_energy_and_interleaved_rings() {
        let c = make_constellation(&default_ring_spec()).unwrap();
        assert_eq!(c.k(), 8);
        let mean_energy: f64 = c.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / 8.0;
        assert!(close(mean_energy, 1.0, TOL), "mean energy {mean_energy}");
        // Inner four at radius 1/sqrt(2.5) starting at 45 degrees, outer
        // four at twice that starting at 0.
        let r_inner = (1.0f64 / 2.5).sqrt();
        for i in 0..4 {
            let expect = Complex64::from_polar(r_inner, PI / 4.0 + PI / 2.0 * i as f64);
            assert!((c.points[i] - expect).norm() < TOL, "inner point {i}");
        }
        for i in 0..4 {
            let expect = Complex64::from_polar(2.0 * r_inner, PI / 2.0 * i as f64);
            assert!((c.points[4 + i] - expect).norm() < TOL, "outer point {i}");
        }
    }

    #[test]
    fn single_ring_is_plain_psk_with_no_offset() {
        let c = make_constellation(&[Ring { count: 8, radius: 3.0 }]).unwrap();
        let mean_energy: f64 = c.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / 8.0;
        assert!(close(mean_energy, 1.0, TOL));
        for i in 0..8 {
            let expect = Complex64::from_polar(1.0, 2.0 * PI * i as f64 / 8.0);
            assert!((c.points[i] - expect).norm() < TOL, "point {i}");
        }
    }

    #[test]
    fn constellation_rejects_bad_ring_specs() {
        assert!(matches!(make_constellation(&[]), Err(ChannelError::EmptyRingSpec)));
        assert!(matches!(
            make_constellation(&[Ring { count: 0, radius: 1.0 }]),
            Err(ChannelError::EmptyRing { index: 0 })
        ));
        assert!(matches!(
            make_constellation(&[Ring { count: 4, radius: -1.0 }]),
            Err(ChannelError::BadRadius { index: 0, .. })
        ));
        assert!(matches!(
            make_constellation(&[Ring { count: 4, radius: 2.0 }, Ring { count: 4, radius: 2.0 }]),
            Err(ChannelError::NonIncreasingRadii { index: 1 })
        ));
    }

    #[test]
    fn imbalance_identity_when_both_errors_vanish() {
        let y = Complex64::new(0.3, -0.7);
        let out = apply_iq_imbalance(y, 0.0, 0.0);
        assert!((out - y).norm() < TOL);
    }

    #[test]
    fn imbalance_gain_only_scales_the_rails() {
        let out = apply_iq_imbalance(Complex64::new(1.0, 0.0), 0.1, 0.0);
        assert!((out - Complex64::new(1.1, 0.0)).norm() < TOL);
        let out = apply_iq_imbalance(Complex64::new(0.0, 1.0), 0.1, 0.0);
        assert!((out - Complex64::new(0.0, 0.9)).norm() < TOL);
    }

    #[test]
    fn imbalance_quarter_turn_crosstalk_swaps_and_negates() {
        let out = apply_iq_imbalance(Complex64::new(1.0, 0.0), 0.0, PI / 2.0);
        assert!((out - Complex64::new(0.0, -1.0)).norm() < TOL);
    }

    #[test]
    fn imbalance_is_linear_over_random_draws() {
        let mut rng = derive_rng(11, "test/iq-linearity");
        for _ in 0..1000 {
            let y1 = Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let y2 = Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let eps = rng.random_range(0.0..0.15);
            let delta: f64 = rng.random_range(0.0..0.27);
            let lhs = apply_iq_imbalance(a * y1 + b * y2, eps, delta);
            let rhs = a * apply_iq_imbalance(y1, eps, delta) + b * apply_iq_imbalance(y2, eps, delta);
            assert!((lhs - rhs).norm() < TOL);
        }
    }

    #[test]
    fn imbalance_matches_explicit_matrix_product() {
        let mut rng = derive_rng(12, "test/iq-matrix");
        for _ in 0..1000 {
            let y = Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let eps = rng.random_range(0.0..0.15);
            let delta: f64 = rng.random_range(0.0..0.27);
            // Oracle: diag(1+eps, 1-eps) times the symmetric mixing matrix,
            // multiplied out as 2x2 rows.
            let m = [
                [delta.cos(), -delta.sin()],
                [-delta.sin(), delta.cos()],
            ];
            let mixed = [
                m[0][0] * y.re + m[0][1] * y.im,
                m[1][0] * y.re + m[1][1] * y.im,
            ];
            let expect = Complex64::new((1.0 + eps) * mixed[0], (1.0 - eps) * mixed[1]);
            let got = apply_iq_imbalance(y, eps, delta);
            assert!((got - expect).norm() < TOL);
        }
    }

    #[test]
    fn phase_rotation_preserves_energy() {
        let c = make_constellation(&default_ring_spec()).unwrap();
        let mut rng = derive_rng(13, "test/phase-energy");
        for _ in 0..1000 {
            let psi: f64 = rng.random_range(0.0..2.0 * PI);
            let p = c.points[rng.random_range(0..8)];
            let rotated = Complex64::from_polar(1.0, psi) * p;
            assert!(close(rotated.norm(), p.norm(), TOL));
        }
    }

    #[test]
    fn transmit_rejects_out_of_range_label() {
        let c = make_constellation(&default_ring_spec()).unwrap();
        let state = ChannelState { psi: 0.0, eps: 0.0, delta: 0.0 };
        let mut rng = derive_rng(14, "test/label-range");
        let err = transmit(&mut rng, 8, &c, &state, 5.0).unwrap_err();
        assert!(matches!(err, ChannelError::LabelOutOfRange { label: 8, k: 8 }));
    }

    #[test]
    fn channel_state_draws_respect_documented_ranges() {
        let cfg = ImbalanceConfig::default();
        let mut rng = derive_rng(15, "test/state-ranges");
        for _ in 0..2000 {
            let s = draw_channel_state(&mut rng, &cfg);
            assert!((0.0..2.0 * PI).contains(&s.psi));
            assert!((0.0..=cfg.eps_scale).contains(&s.eps));
            assert!((0.0..=cfg.delta_scale).contains(&s.delta));
        }
    }

    #[test]
    fn noise_variance_tracks_snr() {
        let c = make_constellation(&default_ring_spec()).unwrap();
        let state = ChannelState { psi: 1.0, eps: 0.05, delta: 0.1 };
        let snr_db = 5.0;
        let clean = Complex64::from_polar(1.0, state.psi)
            * apply_iq_imbalance(c.points[3], state.eps, state.delta);
        let mut rng = derive_rng(16, "test/noise-variance");
        let n = 30_000;
        let mean_sq: f64 = (0..n)
            .map(|_| {
                let x = transmit(&mut rng, 3, &c, &state, snr_db).unwrap();
                (x - clean).norm_sqr()
            })
            .sum::<f64>()
            / n as f64;
        let expect = 10f64.powf(-snr_db / 10.0);
        assert!(
            (mean_sq - expect).abs() < 0.03 * expect,
            "measured {mean_sq}, expected {expect}"
        );
    }

    #[test]
    fn generate_task_shapes_and_shared_state() {
        let c = make_constellation(&default_ring_spec()).unwrap();
        let cfg = ChannelConfig::default();
        let seed = SeedRecord::new(3, "task/shots=8");
        let task = generate_task(&seed, 8, 25, &c, &cfg).unwrap();
        assert_eq!(task.demos.len(), 8);
        assert_eq!(task.test.len(), 25);
        assert!(task.demos.iter().chain(task.test.iter()).all(|s| s.y < 8));
        assert_eq!(task.seed, seed);
    }

    #[test]
    fn generate_task_is_deterministic_per_seed() {
        let c = make_constellation(&default_ring_spec()).unwrap();
        let cfg = ChannelConfig::default();
        let seed = SeedRecord::new(9, "task/shots=4");
        let a = generate_task(&seed, 4, 10, &c, &cfg).unwrap();
        let b = generate_task(&seed, 4, 10, &c, &cfg).unwrap();
        assert_eq!(a, b);
        let other = generate_task(&SeedRecord::new(10, "task/shots=4"), 4, 10, &c, &cfg).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn generate_task_rejects_empty_splits() {
        let c = make_constellation(&default_ring_spec()).unwrap();
        let cfg = ChannelConfig::default();
        let seed = SeedRecord::new(0, "task/shots=0");
        assert!(matches!(
            generate_task(&seed, 0, 5, &c, &cfg),
            Err(ChannelError::EmptyDataset { .. })
        ));
        assert!(matches!(
            generate_task(&seed, 5, 0, &c, &cfg),
            Err(ChannelError::EmptyDataset { .. })
        ));
    }

    #[test]
    fn task_labels_are_roughly_uniform() {
        let c = make_constellation(&default_ring_spec()).unwrap();
        let cfg = ChannelConfig::default();
        let seed = SeedRecord::new(21, "task/shots=4");
        let task = generate_task(&seed, 4, 8000, &c, &cfg).unwrap();
        let mut counts = [0usize; 8];
        for s in &task.test {
            counts[s.y] += 1;
        }
        for (label, count) in counts.iter().enumerate() {
            let freq = *count as f64 / 8000.0;
            assert!(
                (freq - 0.125).abs() < 0.02,
                "label {label} frequency {freq}"
            );
        }
    }

    #[test]
    fn task_records_round_trip_through_jsonl() {
        let c = make_constellation(&default_ring_spec()).unwrap();
        let cfg = ChannelConfig::default();
        let seed = SeedRecord::new(5, "task/shots=4");
        let task = generate_task(&seed, 4, 6, &c, &cfg).unwrap();
        let mut buf = Vec::new();
        write_task_records(&mut buf, &task, "shots4-seed5").unwrap();
        let records = read_task_records(&buf[..]).unwrap();
        assert_eq!(records.len(), 10);
        assert_eq!(records.iter().filter(|r| r.split == "demo").count(), 4);
        assert_eq!(records.iter().filter(|r| r.split == "test").count(), 6);
        assert!(records.iter().all(|r| r.task_id == "shots4-seed5"));
        assert!(records.iter().all(|r| r.seed == "task/shots=4#5"));
        for (record, sample) in records[..4].iter().zip(task.demos.iter()) {
            assert_eq!(record.re, sample.x.re);
            assert_eq!(record.im, sample.x.im);
            assert_eq!(record.label, sample.y);
        }
    }
}
