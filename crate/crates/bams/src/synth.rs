//! Synthetic multi-timescale behavioral data.
//!
//! Each sequence carries two ground-truth factors at different timescales:
//! a per-sequence global class (constant for the whole recording) and a
//! regime class that switches between contiguous segments. Channels are
//! sinusoids whose amplitude and frequency depend on (global, regime,
//! channel) lookup tables drawn once per dataset, plus a global-dependent
//! constant drift and white noise:
//!
//!   x[t][c] = amp[g][r_t][c] * sin(2*pi * freq[g][r_t][c] * t / fps + phase[g][c])
//!             + drift[g][c] + noise
//!
//! Table construction keeps the two factors at their intended timescales:
//! regime classes are separated by a large relative frequency gap (>= 20%,
//! 35% as built), while the global class only modulates frequency and
//! amplitude by a few percent on visible channels and mainly expresses
//! itself as a strong drift offset on the trailing channels -- the ones a
//! default dataset hides from the encoder and uses as prediction targets
//! for the hidden-feature task. Short observation windows therefore say a
//! lot about the regime and little about the global class; long windows
//! resolve both.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FrameLabels, Label, Trajectory};
use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::rng::{mix, Rng};

pub const GLOBAL_LABEL: &str = "global_class";
pub const REGIME_LABEL: &str = "regime_class";

/// Relative frequency step between adjacent regime classes.
const REGIME_FREQ_STEP: f64 = 1.35;
/// Fractional frequency modulation by the global class on all channels.
const GLOBAL_FREQ_MOD: f64 = 0.04;
/// Fractional amplitude modulation by the global class.
const GLOBAL_AMP_MOD: f64 = 0.02;
/// Drift offset swing of the global class on visible channels.
const VISIBLE_DRIFT_SWING: f64 = 0.03;
/// Drift offset swing of the global class on hidden channels.
const HIDDEN_DRIFT_SWING: f64 = 0.6;
/// Amplitude scale of hidden channels relative to visible ones.
const HIDDEN_AMP_SCALE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    pub frame_rate: f64,
    pub num_global_classes: usize,
    pub num_regime_classes: usize,
    /// [min, max] segment length in frames, inclusive.
    pub segment_length_range: [usize; 2],
    pub noise_std: f64,
    pub num_channels: usize,
    /// How many trailing channels a generated dataset marks as hidden.
    pub hidden_channels: usize,
    /// How many leading channels become future-prediction targets.
    pub target_channels: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_sequences: 76,
            frames_per_sequence: 900,
            frame_rate: 15.0,
            num_global_classes: 2,
            num_regime_classes: 5,
            segment_length_range: [120, 360],
            noise_std: 0.3,
            num_channels: 12,
            hidden_channels: 2,
            target_channels: 6,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_channels < 2 {
            return Err(Error::Config("num_channels must be >= 2".into()));
        }
        if self.num_global_classes < 2 || self.num_regime_classes < 2 {
            return Err(Error::Config("class counts must be >= 2".into()));
        }
        if self.segment_length_range[0] < 1 {
            return Err(Error::Config("segment length min must be >= 1".into()));
        }
        if self.segment_length_range[0] > self.segment_length_range[1] {
            return Err(Error::Config(format!(
                "segment length range is inverted: {:?}",
                self.segment_length_range
            )));
        }
        if self.frames_per_sequence < self.segment_length_range[0] {
            return Err(Error::Config(format!(
                "frames_per_sequence {} is shorter than the minimum segment {}",
                self.frames_per_sequence, self.segment_length_range[0]
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.hidden_channels + self.target_channels > self.num_channels {
            return Err(Error::Config(format!(
                "hidden ({}) + target ({}) channels exceed num_channels ({})",
                self.hidden_channels, self.target_channels, self.num_channels
            )));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::Config(format!("bad frame rate {}", self.frame_rate)));
        }
        if self.num_sequences == 0 {
            return Err(Error::Config("num_sequences must be >= 1".into()));
        }
        Ok(())
    }

    pub fn channel_names(&self) -> Vec<String> {
        (0..self.num_channels).map(|c| format!("ch{c:02}")).collect()
    }
}

/// Contiguous regime segments covering [0, total_frames).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegimeSchedule {
    /// (start_frame, regime_class) entries with strictly increasing starts,
    /// the first at frame 0.
    pub segments: Vec<(usize, usize)>,
    pub total_frames: usize,
}

impl RegimeSchedule {
    pub fn new(segments: Vec<(usize, usize)>, total_frames: usize) -> Result<Self> {
        let schedule = RegimeSchedule {
            segments,
            total_frames,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() || self.segments[0].0 != 0 {
            return Err(Error::InvalidData(
                "schedule must start with a segment at frame 0".into(),
            ));
        }
        for pair in self.segments.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidData("schedule segments must be increasing".into()));
            }
        }
        if self.segments.last().unwrap().0 >= self.total_frames {
            return Err(Error::InvalidData(
                "schedule extends past the sequence end".into(),
            ));
        }
        Ok(())
    }

    pub fn regime_at(&self, frame: usize) -> usize {
        debug_assert!(frame < self.total_frames);
        let mut current = self.segments[0].1;
        for &(start, class) in &self.segments {
            if start <= frame {
                current = class;
            } else {
                break;
            }
        }
        current
    }

    pub fn frame_classes(&self) -> Vec<i64> {
        let mut out = Vec::with_capacity(self.total_frames);
        let mut seg = 0;
        for t in 0..self.total_frames {
            while seg + 1 < self.segments.len() && self.segments[seg + 1].0 <= t {
                seg += 1;
            }
            out.push(self.segments[seg].1 as i64);
        }
        out
    }

    /// Random schedule with segment lengths uniform in the configured
    /// range and no two adjacent segments sharing a regime. The first
    /// segment's regime is forced, which lets the dataset generator
    /// guarantee that every regime class appears.
    pub fn sample(config: &GeneratorConfig, first_regime: usize, rng: &mut Rng) -> Self {
        let [lo, hi] = config.segment_length_range;
        let total = config.frames_per_sequence;
        let mut segments = Vec::new();
        let mut start = 0;
        let mut regime = first_regime % config.num_regime_classes;
        while start < total {
            segments.push((start, regime));
            let len = lo + rng.range(hi - lo + 1);
            start += len;
            // Next regime differs from the current one.
            let step = 1 + rng.range(config.num_regime_classes - 1);
            regime = (regime + step) % config.num_regime_classes;
        }
        RegimeSchedule {
            segments,
            total_frames: total,
        }
    }
}

/// Per-dataset lookup tables, a deterministic function of the seed.
#[derive(Debug, Clone)]
pub struct FactorTables {
    /// freq[g][r][c] in Hz.
    pub freq: Vec<Vec<Vec<f64>>>,
    /// amp[g][r][c].
    pub amp: Vec<Vec<Vec<f64>>>,
    /// phase[g][c] in radians (equal across g as built; see module docs).
    pub phase: Vec<Vec<f64>>,
    /// drift[g][c].
    pub drift: Vec<Vec<f64>>,
}

impl FactorTables {
    pub fn build(config: &GeneratorConfig) -> Self {
        let mut rng = Rng::from_seed_stream(config.seed, 0x7AB1E5);
        let g_n = config.num_global_classes;
        let r_n = config.num_regime_classes;
        let c_n = config.num_channels;
        let hidden_start = c_n - config.hidden_channels;

        let chan_freq_factor: Vec<f64> = (0..c_n).map(|_| rng.range_f64(0.9, 1.1)).collect();
        let amp_base: Vec<f64> = (0..c_n)
            .map(|c| {
                let base = rng.range_f64(0.8, 1.2);
                if c >= hidden_start {
                    base * HIDDEN_AMP_SCALE
                } else {
                    base
                }
            })
            .collect();
        let regime_amp: Vec<Vec<f64>> = (0..r_n)
            .map(|_| (0..c_n).map(|_| rng.range_f64(0.75, 1.25)).collect())
            .collect();
        let phase_row: Vec<f64> = (0..c_n)
            .map(|_| rng.range_f64(0.0, std::f64::consts::TAU))
            .collect();
        let drift_base: Vec<f64> = (0..c_n).map(|_| rng.range_f64(-0.5, 0.5)).collect();

        let global_sign = |g: usize| -> f64 {
            if g_n == 1 {
                0.0
            } else {
                2.0 * g as f64 / (g_n - 1) as f64 - 1.0
            }
        };

        let mut freq = vec![vec![vec![0.0; c_n]; r_n]; g_n];
        let mut amp = vec![vec![vec![0.0; c_n]; r_n]; g_n];
        let mut phase = vec![vec![0.0; c_n]; g_n];
        let mut drift = vec![vec![0.0; c_n]; g_n];
        for g in 0..g_n {
            let s = global_sign(g);
            for r in 0..r_n {
                let f_base = 0.8 * REGIME_FREQ_STEP.powi(r as i32);
                for c in 0..c_n {
                    freq[g][r][c] = f_base * chan_freq_factor[c] * (1.0 + GLOBAL_FREQ_MOD * s);
                    amp[g][r][c] = amp_base[c] * regime_amp[r][c] * (1.0 + GLOBAL_AMP_MOD * s);
                }
            }
            for c in 0..c_n {
                phase[g][c] = phase_row[c];
                let swing = if c >= hidden_start {
                    HIDDEN_DRIFT_SWING
                } else {
                    VISIBLE_DRIFT_SWING
                };
                drift[g][c] = drift_base[c] + s * swing;
            }
        }
        FactorTables {
            freq,
            amp,
            phase,
            drift,
        }
    }

    /// Noiseless channel value, the closed-form the generator realizes.
    pub fn clean_value(&self, global: usize, regime: usize, channel: usize, frame: usize, frame_rate: f64) -> f64 {
        let f = self.freq[global][regime][channel];
        let a = self.amp[global][regime][channel];
        let p = self.phase[global][channel];
        a * (std::f64::consts::TAU * f * frame as f64 / frame_rate + p).sin()
            + self.drift[global][channel]
    }
}

/// Generates one sequence from explicit factors. Deterministic given
/// (config, tables, global class, schedule, seed).
pub fn generate_sequence(
    config: &GeneratorConfig,
    tables: &FactorTables,
    global_class: usize,
    schedule: &RegimeSchedule,
    seed: u64,
) -> Result<Trajectory> {
    config.validate()?;
    schedule.validate()?;
    if schedule.total_frames != config.frames_per_sequence {
        return Err(Error::InvalidData(format!(
            "schedule covers {} frames, config wants {}",
            schedule.total_frames, config.frames_per_sequence
        )));
    }
    if global_class >= config.num_global_classes {
        return Err(Error::Config(format!(
            "global class {global_class} out of range"
        )));
    }
    for &(_, r) in &schedule.segments {
        if r >= config.num_regime_classes {
            return Err(Error::InvalidData(format!("regime class {r} out of range")));
        }
    }

    let t_len = config.frames_per_sequence;
    let c_n = config.num_channels;
    let mut rng = Rng::from_seed_stream(seed, 0x5E9);
    let mut data = Vec::with_capacity(t_len * c_n);
    let frame_classes = schedule.frame_classes();
    for (t, &class) in frame_classes.iter().enumerate() {
        let regime = class as usize;
        for c in 0..c_n {
            let clean = tables.clean_value(global_class, regime, c, t, config.frame_rate);
            let noise = if config.noise_std > 0.0 {
                rng.normal_scaled(0.0, config.noise_std)
            } else {
                0.0
            };
            data.push(clean + noise);
        }
    }

    let mut sequence_labels = BTreeMap::new();
    sequence_labels.insert(GLOBAL_LABEL.to_string(), Label::Categorical(global_class as i64));
    let mut frame_labels = BTreeMap::new();
    frame_labels.insert(REGIME_LABEL.to_string(), FrameLabels::Categorical(frame_classes));

    let traj = Trajectory {
        features: Tensor::new(vec![t_len, c_n], data)?,
        frame_rate: config.frame_rate,
        sequence_labels,
        frame_labels,
        agent_id: format!("seq-{seed:016x}"),
    };
    traj.validate()?;
    Ok(traj)
}

/// Generates the full dataset: balanced global classes, random schedules,
/// and first-segment regimes cycling through all classes so every regime
/// appears. Per-sequence seeds partition the seed space deterministically.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let tables = FactorTables::build(config);
    let mut trajectories = Vec::with_capacity(config.num_sequences);
    for i in 0..config.num_sequences {
        let global_class = i % config.num_global_classes;
        let mut schedule_rng = Rng::from_seed_stream(config.seed, 0x5C_0000 + i as u64);
        let schedule = RegimeSchedule::sample(config, i % config.num_regime_classes, &mut schedule_rng);
        let seq_seed = mix(config.seed, 0xDA7A_0000 + i as u64);
        let mut traj = generate_sequence(config, &tables, global_class, &schedule, seq_seed)?;
        traj.agent_id = format!("seq_{i:03}");
        trajectories.push(traj);
    }
    let c_n = config.num_channels;
    let dataset = Dataset {
        trajectories,
        feature_names: config.channel_names(),
        target_indices: (0..config.target_channels).collect(),
        hidden_indices: (c_n - config.hidden_channels..c_n).collect(),
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::dominant_frequency_bin;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            num_sequences: 10,
            frames_per_sequence: 300,
            frame_rate: 15.0,
            segment_length_range: [60, 120],
            noise_std: 0.0,
            seed: 11,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn noiseless_sequence_matches_closed_form() {
        let config = small_config();
        let tables = FactorTables::build(&config);
        let schedule = RegimeSchedule::new(vec![(0, 2)], 300).unwrap();
        let traj = generate_sequence(&config, &tables, 1, &schedule, 99).unwrap();
        // Oracle: direct evaluation of the generative formula.
        for t in [0usize, 1, 7, 150, 299] {
            for c in 0..config.num_channels {
                let expected = tables.clean_value(1, 2, c, t, config.frame_rate);
                assert_eq!(traj.features.row(t)[c], expected, "t={t} c={c}");
            }
        }
    }

    #[test]
    fn identical_inputs_give_bitwise_identical_output() {
        let config = GeneratorConfig {
            noise_std: 0.4,
            ..small_config()
        };
        let tables = FactorTables::build(&config);
        let schedule = RegimeSchedule::new(vec![(0, 0), (100, 3)], 300).unwrap();
        let a = generate_sequence(&config, &tables, 0, &schedule, 7).unwrap();
        let b = generate_sequence(&config, &tables, 0, &schedule, 7).unwrap();
        assert_eq!(a.features.data(), b.features.data());
    }

    #[test]
    fn spectra_differ_across_segment_boundary() {
        // Oracle: discrete Fourier argmax per segment. Two regimes in one
        // noiseless sequence must put their dominant power in different bins.
        let config = GeneratorConfig {
            frames_per_sequence: 512,
            segment_length_range: [256, 256],
            noise_std: 0.0,
            ..small_config()
        };
        let tables = FactorTables::build(&config);
        let schedule = RegimeSchedule::new(vec![(0, 0), (256, 4)], 512).unwrap();
        let traj = generate_sequence(&config, &tables, 0, &schedule, 3).unwrap();
        let channel = 0;
        let seg_a: Vec<f64> = (0..256)
            .map(|t| traj.features.row(t)[channel] - tables.drift[0][channel])
            .collect();
        let seg_b: Vec<f64> = (256..512)
            .map(|t| traj.features.row(t)[channel] - tables.drift[0][channel])
            .collect();
        let bin_a = dominant_frequency_bin(&seg_a);
        let bin_b = dominant_frequency_bin(&seg_b);
        assert_ne!(bin_a, bin_b, "regimes 0 and 4 share a dominant bin");
        // Frequencies are a 1.35^4 ratio apart; the bins must reflect that.
        assert!(bin_b > bin_a);
    }

    #[test]
    fn schedule_must_cover_sequence() {
        let config = small_config();
        let tables = FactorTables::build(&config);
        let bad = RegimeSchedule {
            segments: vec![(0, 0), (400, 1)],
            total_frames: 300,
        };
        assert!(generate_sequence(&config, &tables, 0, &bad, 1).is_err());
    }

    #[test]
    fn dataset_default_shape() {
        let config = GeneratorConfig {
            num_sequences: 76,
            ..small_config()
        };
        let ds = generate_dataset(&config).unwrap();
        assert_eq!(ds.len(), 76);
        assert_eq!(ds.channels(), 12);
        for t in &ds.trajectories {
            assert_eq!(t.frames(), 300);
            // about a minute of data at the configured rate would be 900
            // frames; the test config shortens sequences for speed.
        }
        assert_eq!(ds.target_indices, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(ds.hidden_indices, vec![10, 11]);
    }

    #[test]
    fn default_config_is_about_one_minute() {
        let config = GeneratorConfig::default();
        let seconds = config.frames_per_sequence as f64 / config.frame_rate;
        assert!((seconds - 60.0).abs() < 1.0);
        assert_eq!(config.num_sequences, 76);
    }

    #[test]
    fn two_sequences_balance_two_classes() {
        let config = GeneratorConfig {
            num_sequences: 2,
            ..small_config()
        };
        let ds = generate_dataset(&config).unwrap();
        let globals: Vec<i64> = ds
            .trajectories
            .iter()
            .map(|t| match t.sequence_labels.get(GLOBAL_LABEL) {
                Some(Label::Categorical(v)) => *v,
                _ => panic!("missing global label"),
            })
            .collect();
        assert_eq!(globals, vec![0, 1]);
    }

    #[test]
    fn all_regimes_appear_in_dataset() {
        let config = small_config();
        let ds = generate_dataset(&config).unwrap();
        let mut seen = vec![false; config.num_regime_classes];
        for t in &ds.trajectories {
            if let Some(FrameLabels::Categorical(vals)) = t.frame_labels.get(REGIME_LABEL) {
                for &v in vals {
                    seen[v as usize] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "regime coverage {seen:?}");
    }

    #[test]
    fn global_classes_differ_in_every_segment() {
        let config = small_config();
        let tables = FactorTables::build(&config);
        let schedule = RegimeSchedule::new(vec![(0, 1), (150, 3)], 300).unwrap();
        let a = generate_sequence(&config, &tables, 0, &schedule, 5).unwrap();
        let b = generate_sequence(&config, &tables, 1, &schedule, 5).unwrap();
        for (start, end) in [(0usize, 150usize), (150, 300)] {
            let mut max_diff = 0.0f64;
            for t in start..end {
                for c in 0..config.num_channels {
                    max_diff = max_diff.max((a.features.row(t)[c] - b.features.row(t)[c]).abs());
                }
            }
            assert!(max_diff > 1e-6, "segment [{start},{end}) identical across globals");
        }
    }

    #[test]
    fn regime_frequency_gap_at_least_20_percent() {
        let config = small_config();
        let tables = FactorTables::build(&config);
        for g in 0..config.num_global_classes {
            for c in 0..config.num_channels {
                for r in 0..config.num_regime_classes - 1 {
                    let ratio = tables.freq[g][r + 1][c] / tables.freq[g][r][c];
                    assert!(ratio >= 1.2, "gap {ratio} at g={g} r={r} c={c}");
                }
            }
        }
    }

    #[test]
    fn nearest_centroid_on_segment_spectra_beats_chance() {
        // Mutual-information sanity: regime recoverable from per-segment
        // spectra by the dumbest possible classifier on noiseless data.
        let config = GeneratorConfig {
            num_sequences: 20,
            frames_per_sequence: 512,
            segment_length_range: [128, 128],
            noise_std: 0.0,
            seed: 23,
            ..GeneratorConfig::default()
        };
        let ds = generate_dataset(&config).unwrap();
        // Collect (dominant bin per channel, regime) per segment.
        let mut samples: Vec<(Vec<f64>, usize)> = Vec::new();
        for traj in &ds.trajectories {
            let labels = match traj.frame_labels.get(REGIME_LABEL) {
                Some(FrameLabels::Categorical(v)) => v,
                _ => unreachable!(),
            };
            for seg in 0..4 {
                let start = seg * 128;
                let regime = labels[start] as usize;
                let mut feat = Vec::new();
                for c in 0..4 {
                    let signal: Vec<f64> =
                        (start..start + 128).map(|t| traj.features.row(t)[c]).collect();
                    feat.push(dominant_frequency_bin(&signal) as f64);
                }
                samples.push((feat, regime));
            }
        }
        // Nearest-centroid classification, leave-nothing-out (sanity only).
        let classes = config.num_regime_classes;
        let dim = samples[0].0.len();
        let mut centroids = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for (f, r) in &samples {
            for (c, v) in centroids[*r].iter_mut().zip(f) {
                *c += v;
            }
            counts[*r] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            if *n > 0 {
                for v in c.iter_mut() {
                    *v /= *n as f64;
                }
            }
        }
        let mut correct = 0;
        for (f, r) in &samples {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                if counts[k] == 0 {
                    continue;
                }
                let d: f64 = c.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if best == *r {
                correct += 1;
            }
        }
        let acc = correct as f64 / samples.len() as f64;
        assert!(acc > 1.0 / classes as f64 + 0.2, "accuracy {acc}");
    }
}
