//! Trajectories, keypoint-derived features, dataset splits, windowed batch
//! sampling, channel standardization, and the CSV/JSON file formats.
//!
//! A trajectory stores a frame-major T x D feature matrix plus labels.
//! On disk each sequence is a CSV (one row per frame, header row of feature
//! names) with a JSON sidecar carrying frame rate, agent id, and labels;
//! a dataset directory adds a manifest with provenance and label counts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::rng::Rng;

/// One per-sequence label value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Label {
    Categorical(i64),
    Real(f64),
}

/// One per-frame label track (length T).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum FrameLabels {
    Categorical(Vec<i64>),
    Real(Vec<f64>),
}

impl FrameLabels {
    pub fn len(&self) -> usize {
        match self {
            FrameLabels::Categorical(v) => v.len(),
            FrameLabels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub features: Tensor,
    pub frame_rate: f64,
    pub sequence_labels: BTreeMap<String, Label>,
    pub frame_labels: BTreeMap<String, FrameLabels>,
    pub agent_id: String,
}

impl Trajectory {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.ndim() != 2 || self.frames() == 0 || self.channels() == 0 {
            return Err(Error::InvalidData(format!(
                "trajectory {}: features must be a non-empty T x D matrix, got {:?}",
                self.agent_id,
                self.features.shape()
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::InvalidData(format!(
                "trajectory {}: non-finite feature values",
                self.agent_id
            )));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::InvalidData(format!(
                "trajectory {}: bad frame rate {}",
                self.agent_id, self.frame_rate
            )));
        }
        for (name, track) in &self.frame_labels {
            if track.len() != self.frames() {
                return Err(Error::InvalidData(format!(
                    "trajectory {}: frame label {name} has length {}, expected {}",
                    self.agent_id,
                    track.len(),
                    self.frames()
                )));
            }
        }
        Ok(())
    }

    /// Group key for multi-agent recordings: the part of the agent id
    /// before ':', or the whole id for single-agent data.
    pub fn group_key(&self) -> &str {
        self.agent_id.split(':').next().unwrap_or(&self.agent_id)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub feature_names: Vec<String>,
    /// Channels used as future-prediction targets.
    pub target_indices: Vec<usize>,
    /// Channels withheld from the encoder and predicted as hidden features.
    pub hidden_indices: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feature_names.len()
    }

    /// Channel indices fed to the encoder (all minus hidden), in order.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.channels())
            .filter(|i| !self.hidden_indices.contains(i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.channels();
        if d == 0 {
            return Err(Error::InvalidData("dataset has no feature names".into()));
        }
        for t in &self.trajectories {
            t.validate()?;
            if t.channels() != d {
                return Err(Error::InvalidData(format!(
                    "trajectory {} has {} channels, dataset declares {d}",
                    t.agent_id,
                    t.channels()
                )));
            }
        }
        for &i in self.target_indices.iter().chain(&self.hidden_indices) {
            if i >= d {
                return Err(Error::InvalidData(format!(
                    "channel index {i} out of range for {d} channels"
                )));
            }
        }
        for i in &self.target_indices {
            if self.hidden_indices.contains(i) {
                return Err(Error::InvalidData(format!(
                    "channel {i} is both a prediction target and hidden"
                )));
            }
        }
        Ok(())
    }

    pub fn min_frames(&self) -> usize {
        self.trajectories.iter().map(|t| t.frames()).min().unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Keypoints and pose features
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    /// K x 2 coordinates, one row per keypoint.
    pub points: Vec<[f64; 2]>,
}

/// Which keypoints play which role when deriving egocentric features.
/// Each joint triple (a, b, c) measures the angle at b between the
/// segments b->a and b->c.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointRoles {
    pub head: usize,
    pub body_center: usize,
    #[serde(default)]
    pub joints: Vec<[usize; 3]>,
}

/// Egocentric pose features from raw keypoints: heading direction
/// (sin/cos), centroid speed, and per-joint angle (sin/cos) plus angular
/// velocity. No absolute position enters any channel, so adding a constant
/// offset to every keypoint leaves the output unchanged, and pairwise
/// distances between agents stay hidden from the encoder.
///
/// Velocities are backward differences scaled by the frame rate; the
/// first frame's velocity is defined by the forward difference (i.e. it
/// duplicates frame 1's value).
pub fn compute_pose_features(
    frames: &[KeypointFrame],
    frame_rate: f64,
    roles: &KeypointRoles,
) -> Result<Trajectory> {
    if frames.len() < 2 {
        return Err(Error::InvalidData("insufficient frames".into()));
    }
    let k = frames[0].points.len();
    for (i, f) in frames.iter().enumerate() {
        if f.points.len() != k {
            return Err(Error::InvalidData(format!(
                "frame {i} has {} keypoints, expected {k}",
                f.points.len()
            )));
        }
        if f.points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidData(format!("frame {i} has non-finite keypoints")));
        }
    }
    let check_role = |name: &str, idx: usize| -> Result<()> {
        if idx >= k {
            return Err(Error::Config(format!(
                "keypoint role {name} refers to index {idx}, but frames have {k} keypoints"
            )));
        }
        Ok(())
    };
    check_role("head", roles.head)?;
    check_role("body_center", roles.body_center)?;
    for (j, triple) in roles.joints.iter().enumerate() {
        for &idx in triple {
            check_role(&format!("joint{j}"), idx)?;
        }
    }

    let t_len = frames.len();
    let centroids: Vec<[f64; 2]> = frames
        .iter()
        .map(|f| {
            let (mut cx, mut cy) = (0.0, 0.0);
            for p in &f.points {
                cx += p[0];
                cy += p[1];
            }
            [cx / k as f64, cy / k as f64]
        })
        .collect();

    // Per-frame joint angles, needed before angular velocities.
    let angles: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            roles
                .joints
                .iter()
                .map(|&[a, b, c]| joint_angle(f.points[a], f.points[b], f.points[c]))
                .collect()
        })
        .collect();

    let d = 3 + 3 * roles.joints.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let f = &frames[t];
        let mut row = Vec::with_capacity(d);
        let heading = [
            f.points[roles.head][0] - f.points[roles.body_center][0],
            f.points[roles.head][1] - f.points[roles.body_center][1],
        ];
        let heading_angle = heading[1].atan2(heading[0]);
        row.push(heading_angle.sin());
        row.push(heading_angle.cos());

        // Speed: backward difference, frame 0 borrows the forward one.
        let (prev, cur) = if t == 0 {
            (centroids[0], centroids[1])
        } else {
            (centroids[t - 1], centroids[t])
        };
        let speed = ((cur[0] - prev[0]).powi(2) + (cur[1] - prev[1]).powi(2)).sqrt() * frame_rate;
        row.push(speed);

        for (j, &angle) in angles[t].iter().enumerate() {
            row.push(angle.sin());
            row.push(angle.cos());
            let (a_prev, a_cur) = if t == 0 {
                (angles[0][j], angles[1][j])
            } else {
                (angles[t - 1][j], angles[t][j])
            };
            row.push(wrap_angle(a_cur - a_prev) * frame_rate);
        }
        rows.push(row);
    }

    let traj = Trajectory {
        features: Tensor::from_rows(&rows)?,
        frame_rate,
        sequence_labels: BTreeMap::new(),
        frame_labels: BTreeMap::new(),
        agent_id: String::new(),
    };
    traj.validate()?;
    Ok(traj)
}

/// Feature names matching the channel layout of [`compute_pose_features`].
pub fn pose_feature_names(roles: &KeypointRoles) -> Vec<String> {
    let mut names = vec![
        "heading_sin".to_string(),
        "heading_cos".to_string(),
        "centroid_speed".to_string(),
    ];
    for j in 0..roles.joints.len() {
        names.push(format!("joint{j}_sin"));
        names.push(format!("joint{j}_cos"));
        names.push(format!("joint{j}_angvel"));
    }
    names
}

/// Per-frame distance between the body centers of two agents, from raw
/// keypoints. Used as the hidden target of the pairwise distance task.
pub fn pair_distances(
    frames_a: &[KeypointFrame],
    frames_b: &[KeypointFrame],
    roles: &KeypointRoles,
) -> Result<Vec<f64>> {
    if frames_a.len() != frames_b.len() {
        return Err(Error::InvalidData(format!(
            "agents have different frame counts: {} vs {}",
            frames_a.len(),
            frames_b.len()
        )));
    }
    Ok(frames_a
        .iter()
        .zip(frames_b)
        .map(|(fa, fb)| {
            let pa = fa.points[roles.body_center];
            let pb = fb.points[roles.body_center];
            ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
        })
        .collect())
}

fn joint_angle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let u = [a[0] - b[0], a[1] - b[1]];
    let v = [c[0] - b[0], c[1] - b[1]];
    let cross = u[0] * v[1] - u[1] * v[0];
    let dot = u[0] * v[0] + u[1] * v[1];
    cross.atan2(dot)
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = a;
    while x > std::f64::consts::PI {
        x -= std::f64::consts::TAU;
    }
    while x <= -std::f64::consts::PI {
        x += std::f64::consts::TAU;
    }
    x
}

// ---------------------------------------------------------------------------
// Splits and batch sampling
// ---------------------------------------------------------------------------

/// Sequence-level split: ceil(N * train_fraction) sequences go to the train
/// fold, the rest to test. Deterministic given the seed; no trajectory ever
/// straddles the split.
pub fn split_dataset(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::InvalidData(format!(
            "cannot split a dataset of {n} sequences"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (n as f64 * train_fraction).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::from_seed_stream(seed, 0x5714);
    rng.shuffle(&mut order);
    let mut train_idx: Vec<usize> = order[..n_train].to_vec();
    let mut test_idx: Vec<usize> = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| Dataset {
        trajectories: idx.iter().map(|&i| dataset.trajectories[i].clone()).collect(),
        feature_names: dataset.feature_names.clone(),
        target_indices: dataset.target_indices.clone(),
        hidden_indices: dataset.hidden_indices.clone(),
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowMeta {
    pub sequence_index: usize,
    pub start: usize,
}

#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// Each window is window_length x D (all channels).
    pub windows: Vec<Tensor>,
    pub meta: Vec<WindowMeta>,
}

/// Samples `batch_size` contiguous windows, each entirely inside one
/// trajectory picked uniformly at random, with a uniform start offset.
pub fn sample_batch(
    dataset: &Dataset,
    batch_size: usize,
    window_length: usize,
    rng: &mut Rng,
) -> Result<WindowBatch> {
    if dataset.is_empty() {
        return Err(Error::InvalidData("sample_batch: empty dataset".into()));
    }
    if window_length == 0 || batch_size == 0 {
        return Err(Error::Config("sample_batch: zero batch or window".into()));
    }
    for t in &dataset.trajectories {
        if window_length > t.frames() {
            return Err(Error::InvalidData(format!(
                "window length {window_length} exceeds sequence {} ({} frames)",
                t.agent_id,
                t.frames()
            )));
        }
    }
    let mut windows = Vec::with_capacity(batch_size);
    let mut meta = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let si = rng.range(dataset.len());
        let t = &dataset.trajectories[si];
        let max_start = t.frames() - window_length;
        let start = if max_start == 0 { 0 } else { rng.range(max_start + 1) };
        windows.push(t.features.slice_rows(start, window_length));
        meta.push(WindowMeta {
            sequence_index: si,
            start,
        });
    }
    Ok(WindowBatch { windows, meta })
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Per-channel zero-mean unit-variance scaling, fit on the training split
/// and stored with checkpoints so embedding time sees the same transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let d = dataset.channels();
        if dataset.is_empty() {
            return Err(Error::InvalidData("standardizer: empty dataset".into()));
        }
        let mut count = 0usize;
        let mut mean = vec![0.0; d];
        for t in &dataset.trajectories {
            for r in 0..t.frames() {
                for (m, &v) in mean.iter_mut().zip(t.features.row(r)) {
                    *m += v;
                }
            }
            count += t.frames();
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; d];
        for t in &dataset.trajectories {
            for r in 0..t.frames() {
                for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(t.features.row(r)) {
                    let dv = v - m;
                    *s += dv * dv;
                }
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / count as f64).sqrt().max(1e-8))
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, features: &Tensor) -> Tensor {
        let (rows, cols) = (features.rows(), features.cols());
        assert_eq!(cols, self.mean.len(), "standardizer channel mismatch");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (c, &v) in features.row(r).iter().enumerate() {
                data.push((v - self.mean[c]) / self.std[c]);
            }
        }
        Tensor::new(vec![rows, cols], data).expect("shape preserved")
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Sidecar {
    frame_rate: f64,
    agent_id: String,
    sequence_labels: BTreeMap<String, Label>,
    frame_labels: BTreeMap<String, FrameLabels>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub csv: String,
    pub sidecar: String,
    pub frames: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub feature_names: Vec<String>,
    pub target_indices: Vec<usize>,
    pub hidden_indices: Vec<usize>,
    pub sequences: Vec<SequenceEntry>,
    /// label name -> label value -> occurrence count.
    pub label_inventory: BTreeMap<String, BTreeMap<String, usize>>,
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, feature_names: &[String]) -> Result<()> {
    if feature_names.len() != traj.channels() {
        return Err(Error::shape(
            "write_trajectory_csv",
            &[traj.channels()],
            &[feature_names.len()],
        ));
    }
    for name in feature_names {
        if name.contains(',') || name.contains('\n') {
            return Err(Error::InvalidData(format!("bad feature name: {name:?}")));
        }
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{}", feature_names.join(","))?;
    for r in 0..traj.frames() {
        let row: Vec<String> = traj.features.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidData(format!("{}: empty csv", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let d = names.len();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut row = Vec::with_capacity(d);
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidData(format!(
                    "{}: line {}: bad number {field:?}",
                    path.display(),
                    lineno + 2
                ))
            })?;
            row.push(v);
        }
        if row.len() != d {
            return Err(Error::InvalidData(format!(
                "{}: line {}: {} fields, expected {d}",
                path.display(),
                lineno + 2,
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok((names, Tensor::from_rows(&rows)?))
}

/// Reads a keypoint CSV with columns kp0_x, kp0_y, kp1_x, ...
pub fn read_keypoints_csv(path: &Path) -> Result<Vec<KeypointFrame>> {
    let (names, values) = read_trajectory_csv(path)?;
    if names.len() % 2 != 0 {
        return Err(Error::InvalidData(format!(
            "{}: keypoint csv needs x/y column pairs",
            path.display()
        )));
    }
    let k = names.len() / 2;
    for i in 0..k {
        let (x, y) = (format!("kp{i}_x"), format!("kp{i}_y"));
        if names[2 * i] != x || names[2 * i + 1] != y {
            return Err(Error::InvalidData(format!(
                "{}: expected columns {x},{y}, found {},{}",
                path.display(),
                names[2 * i],
                names[2 * i + 1]
            )));
        }
    }
    Ok((0..values.rows())
        .map(|r| {
            let row = values.row(r);
            KeypointFrame {
                points: (0..k).map(|i| [row[2 * i], row[2 * i + 1]]).collect(),
            }
        })
        .collect())
}

/// Writes a dataset directory: per-sequence CSV + sidecar JSON plus a
/// manifest carrying the resolved generator config and label inventory.
pub fn save_dataset(dir: &Path, dataset: &Dataset, seed: u64, config: &serde_json::Value) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let mut sequences = Vec::new();
    let mut inventory: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        let id = format!("seq_{i:03}");
        let csv = format!("{id}.csv");
        let sidecar = format!("{id}.json");
        write_trajectory_csv(&dir.join(&csv), traj, &dataset.feature_names)?;
        let doc = Sidecar {
            frame_rate: traj.frame_rate,
            agent_id: traj.agent_id.clone(),
            sequence_labels: traj.sequence_labels.clone(),
            frame_labels: traj.frame_labels.clone(),
        };
        fs::write(dir.join(&sidecar), serde_json::to_string_pretty(&doc)?)?;
        sequences.push(SequenceEntry {
            id,
            csv,
            sidecar,
            frames: traj.frames(),
        });
        for (name, label) in &traj.sequence_labels {
            let key = match label {
                Label::Categorical(v) => v.to_string(),
                Label::Real(_) => "real".to_string(),
            };
            *inventory.entry(name.clone()).or_default().entry(key).or_default() += 1;
        }
        for (name, track) in &traj.frame_labels {
            if let FrameLabels::Categorical(vals) = track {
                let entry = inventory.entry(name.clone()).or_default();
                for v in vals {
                    *entry.entry(v.to_string()).or_default() += 1;
                }
            }
        }
    }
    let manifest = Manifest {
        version: crate::version_string(),
        seed,
        config: config.clone(),
        feature_names: dataset.feature_names.clone(),
        target_indices: dataset.target_indices.clone(),
        hidden_indices: dataset.hidden_indices.clone(),
        sequences,
        label_inventory: inventory,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let mut trajectories = Vec::with_capacity(manifest.sequences.len());
    for entry in &manifest.sequences {
        let (names, features) = read_trajectory_csv(&dir.join(&entry.csv))?;
        if names != manifest.feature_names {
            return Err(Error::InvalidData(format!(
                "{}: feature names disagree with manifest",
                entry.csv
            )));
        }
        let sidecar_path = dir.join(&entry.sidecar);
        let doc: Sidecar = serde_json::from_str(&fs::read_to_string(&sidecar_path)?)?;
        trajectories.push(Trajectory {
            features,
            frame_rate: doc.frame_rate,
            sequence_labels: doc.sequence_labels,
            frame_labels: doc.frame_labels,
            agent_id: doc.agent_id,
        });
    }
    let dataset = Dataset {
        trajectories,
        feature_names: manifest.feature_names,
        target_indices: manifest.target_indices,
        hidden_indices: manifest.hidden_indices,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Resolves the sidecar path convention (same stem, .json) for loose files.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}
