//! Frozen-representation readout: group pooling, linear probes
//! (multinomial classification scored by macro-F1, ridge regression scored
//! by MSE), and the timescale-ablation report that scores every task on
//! every embedding subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FrameLabels, Label, Standardizer, Trajectory};
use crate::error::{Error, Result};
use crate::model::{embed, BamsConfig, Branch};
use crate::nn::layers::ParamStore;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLevel {
    Frame,
    Sequence,
}

impl TaskLevel {
    pub fn name(&self) -> &'static str {
        match self {
            TaskLevel::Frame => "frame",
            TaskLevel::Sequence => "sequence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Categorical,
    Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeTask {
    pub name: String,
    pub level: TaskLevel,
    pub kind: TaskKind,
}

impl ProbeTask {
    pub fn categorical(name: &str, level: TaskLevel) -> Self {
        ProbeTask {
            name: name.to_string(),
            level,
            kind: TaskKind::Categorical,
        }
    }
}

/// Embedding column subsets the ablation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Full,
    RecentOnly,
    ShortOnly,
    LongOnly,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::Full, Subset::ShortOnly, Subset::LongOnly, Subset::RecentOnly];

    pub fn name(&self) -> &'static str {
        match self {
            Subset::Full => "full",
            Subset::RecentOnly => "recent_only",
            Subset::ShortOnly => "short_only",
            Subset::LongOnly => "long_only",
        }
    }

    pub fn columns(&self, slices: &BranchSlices) -> std::ops::Range<usize> {
        match self {
            Subset::Full => 0..slices.long.end,
            Subset::RecentOnly => slices.recent.clone(),
            Subset::ShortOnly => slices.short.clone(),
            Subset::LongOnly => slices.long.clone(),
        }
    }
}

/// Column layout of the branches inside a concatenated embedding. Lets a
/// report run from saved embedding files without the model itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSlices {
    pub recent: std::ops::Range<usize>,
    pub short: std::ops::Range<usize>,
    pub long: std::ops::Range<usize>,
}

impl BranchSlices {
    pub fn from_config(config: &BamsConfig) -> Self {
        BranchSlices {
            recent: config.branch_columns(Branch::RecentPast),
            short: config.branch_columns(Branch::ShortTerm),
            long: config.branch_columns(Branch::LongTerm),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.long.end
    }

    pub fn validate(&self) -> Result<()> {
        if self.recent.start != 0
            || self.recent.end != self.short.start
            || self.short.end != self.long.start
            || self.long.start >= self.long.end
        {
            return Err(Error::Config(format!("branch slices not contiguous: {self:?}")));
        }
        Ok(())
    }

    /// Header comment of the embeddings CSV, e.g. "rp=0-15 s=16-47 l=48-63"
    /// with inclusive end columns.
    pub fn header_comment(&self) -> String {
        format!(
            "rp={}-{} s={}-{} l={}-{}",
            self.recent.start,
            self.recent.end - 1,
            self.short.start,
            self.short.end - 1,
            self.long.start,
            self.long.end - 1
        )
    }

    pub fn parse_header_comment(text: &str) -> Result<Self> {
        let mut parts = std::collections::BTreeMap::new();
        for token in text.split_whitespace() {
            if let Some((key, range)) = token.split_once('=') {
                if let Some((a, b)) = range.split_once('-') {
                    let start: usize = a.parse().map_err(|_| {
                        Error::InvalidData(format!("bad slice token {token:?}"))
                    })?;
                    let end: usize = b.parse().map_err(|_| {
                        Error::InvalidData(format!("bad slice token {token:?}"))
                    })?;
                    parts.insert(key.to_string(), start..end + 1);
                }
            }
        }
        let get = |k: &str| -> Result<std::ops::Range<usize>> {
            parts
                .get(k)
                .cloned()
                .ok_or_else(|| Error::InvalidData(format!("missing branch slice {k}")))
        };
        let slices = BranchSlices {
            recent: get("rp")?,
            short: get("s")?,
            long: get("l")?,
        };
        slices.validate()?;
        Ok(slices)
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Aggregates the embeddings of N agents at one frame into a single
/// vector: elementwise mean concatenated with (max - min), doubling the
/// dimension (64 -> 128 with the default embedding). Permutation-invariant
/// over agents by construction.
pub fn pool_group(embeddings: &[&[f64]]) -> Result<Vec<f64>> {
    if embeddings.is_empty() {
        return Err(Error::InvalidData("pool_group: no agents".into()));
    }
    let dim = embeddings[0].len();
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::shape("pool_group", &[dim], &[e.len()]));
        }
    }
    let n = embeddings.len() as f64;
    let mut out = vec![0.0; 2 * dim];
    let mut column = vec![0.0; embeddings.len()];
    for c in 0..dim {
        for (slot, e) in column.iter_mut().zip(embeddings) {
            *slot = e[c];
        }
        // Sorting before the sum makes the mean bitwise independent of
        // agent order, not just mathematically so.
        column.sort_by(f64::total_cmp);
        out[c] = column.iter().sum::<f64>() / n;
        out[dim + c] = column[column.len() - 1] - column[0];
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Macro-averaged F1: per-class F1 with equal weight over every class that
/// appears in the predictions or the labels.
pub fn f1_macro(predictions: &[i64], labels: &[i64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("f1_macro", &[labels.len()], &[predictions.len()]));
    }
    if labels.is_empty() {
        return Err(Error::InvalidData("f1_macro: empty inputs".into()));
    }
    let mut classes: Vec<i64> = predictions.iter().chain(labels).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut f1_sum = 0.0;
    for &class in &classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == class, l == class) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let denom = 2.0 * tp + fp + fn_;
        f1_sum += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(f1_sum / classes.len() as f64)
}

pub fn mse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("mse", &[labels.len()], &[predictions.len()]));
    }
    if labels.is_empty() {
        return Err(Error::InvalidData("mse: empty inputs".into()));
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(&p, &l)| (p - l) * (p - l))
        .sum::<f64>()
        / labels.len() as f64)
}

// ---------------------------------------------------------------------------
// Linear probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeTargets {
    Categorical(Vec<i64>),
    Real(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeOptions {
    /// Full-batch gradient-descent iterations for the classifier.
    pub iterations: usize,
    /// L2 penalty on probe weights (bias excluded).
    pub l2: f64,
    /// Frame-level probes subsample to at most this many rows per fold.
    pub max_frames: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            iterations: 600,
            l2: 1e-4,
            max_frames: 60_000,
        }
    }
}

struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn fit_feature_scaler(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= x.rows as f64;
    }
    let mut var = vec![0.0; x.cols];
    for r in 0..x.rows {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(x.row(r)) {
            let d = v - m;
            *s += d * d;
        }
    }
    let std: Vec<f64> = var
        .into_iter()
        .map(|s| (s / x.rows as f64).sqrt().max(1e-8))
        .collect();
    (mean, std)
}

fn scale_matrix(x: &Matrix, mean: &[f64], std: &[f64]) -> Matrix {
    let mut data = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            data.push((v - mean[c]) / std[c]);
        }
    }
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data,
    }
}

/// Top eigenvalue of X^T X / n by power iteration with a fixed start.
fn top_eigenvalue(x: &Matrix) -> f64 {
    let d = x.cols;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 1.0;
    for _ in 0..40 {
        // u = X^T (X v) / n
        let mut xv = vec![0.0; x.rows];
        for (r, slot) in xv.iter_mut().enumerate() {
            *slot = x.row(r).iter().zip(&v).map(|(&a, &b)| a * b).sum();
        }
        let mut u = vec![0.0; d];
        for (r, &s) in xv.iter().enumerate() {
            for (uc, &xc) in u.iter_mut().zip(x.row(r)) {
                *uc += s * xc;
            }
        }
        for uc in &mut u {
            *uc /= x.rows as f64;
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return 1e-12;
        }
        lambda = norm;
        for (vc, &uc) in v.iter_mut().zip(&u) {
            *vc = uc / norm;
        }
    }
    lambda
}

/// Multinomial logistic regression by full-batch gradient descent with a
/// fixed iteration budget, L2 penalty on the weights, and a step size set
/// from the data's curvature bound. Deterministic (zero init).
#[allow(clippy::needless_range_loop)] // row/label/probability arrays in lockstep
fn train_softmax_probe(
    x: &Matrix,
    y: &[usize],
    num_classes: usize,
    opts: &ProbeOptions,
) -> (Vec<f64>, Vec<f64>) {
    let (n, d, k) = (x.rows, x.cols, num_classes);
    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let lipschitz = 0.5 * top_eigenvalue(x) + opts.l2 + 1e-9;
    let lr = 1.0 / lipschitz;
    let mut probs = vec![0.0; n * k];
    for _ in 0..opts.iterations {
        // Forward: softmax(XW + b) row by row.
        for r in 0..n {
            let row = x.row(r);
            let p = &mut probs[r * k..(r + 1) * k];
            p.copy_from_slice(&b);
            for (i, &xv) in row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &w[i * k..(i + 1) * k];
                for (pc, &wc) in p.iter_mut().zip(wrow) {
                    *pc += xv * wc;
                }
            }
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for pc in p.iter_mut() {
                *pc = (*pc - max).exp();
                sum += *pc;
            }
            for pc in p.iter_mut() {
                *pc /= sum;
            }
        }
        // Gradients.
        let mut gw = vec![0.0; d * k];
        let mut gb = vec![0.0; k];
        for r in 0..n {
            let p = &probs[r * k..(r + 1) * k];
            let row = x.row(r);
            let label = y[r];
            for c in 0..k {
                let delta = p[c] - if c == label { 1.0 } else { 0.0 };
                gb[c] += delta;
                if delta != 0.0 {
                    for (i, &xv) in row.iter().enumerate() {
                        gw[i * k + c] += delta * xv;
                    }
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        for (wc, gwc) in w.iter_mut().zip(&gw) {
            *wc -= lr * (gwc * inv_n + opts.l2 * *wc);
        }
        for (bc, gbc) in b.iter_mut().zip(&gb) {
            *bc -= lr * gbc * inv_n;
        }
    }
    (w, b)
}

#[allow(clippy::needless_range_loop)]
fn softmax_predict(x: &Matrix, w: &[f64], b: &[f64], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mut logits = b.to_vec();
        for (i, &xv) in row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[i * k..(i + 1) * k];
            for (lc, &wc) in logits.iter_mut().zip(wrow) {
                *lc += xv * wc;
            }
        }
        let mut best = 0;
        for c in 1..k {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        out.push(best);
    }
    out
}

/// Ridge regression with a closed-form normal-equations solve.
#[allow(clippy::needless_range_loop)]
fn train_ridge(x: &Matrix, y: &[f64], l2: f64) -> (Vec<f64>, f64) {
    let (n, d) = (x.rows, x.cols);
    let y_mean = y.iter().sum::<f64>() / n as f64;
    // Gram matrix of centered-by-scaler features plus ridge diagonal.
    let mut gram = vec![0.0; d * d];
    let mut xty = vec![0.0; d];
    for r in 0..n {
        let row = x.row(r);
        let yc = y[r] - y_mean;
        for i in 0..d {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            xty[i] += xi * yc;
            for j in i..d {
                gram[i * d + j] += xi * row[j];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for i in 0..d {
        for j in i..d {
            let v = gram[i * d + j] * inv_n;
            gram[i * d + j] = v;
            gram[j * d + i] = v;
        }
        gram[i * d + i] += l2;
        xty[i] *= inv_n;
    }
    let w = cholesky_solve(&mut gram, &xty, d);
    (w, y_mean)
}

/// Solves A x = b for symmetric positive-definite A (in place Cholesky).
fn cholesky_solve(a: &mut [f64], b: &[f64], d: usize) -> Vec<f64> {
    // Factor A = L L^T.
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= a[i * d + k] * a[j * d + k];
            }
            if i == j {
                a[i * d + j] = sum.max(1e-12).sqrt();
            } else {
                a[i * d + j] = sum / a[j * d + j];
            }
        }
    }
    // Forward then backward substitution.
    let mut x = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            x[i] -= a[i * d + k] * x[k];
        }
        x[i] /= a[i * d + i];
    }
    for i in (0..d).rev() {
        for k in i + 1..d {
            x[i] -= a[k * d + i] * x[k];
        }
        x[i] /= a[i * d + i];
    }
    x
}

/// Trains a linear readout on frozen embedding rows and scores it on the
/// test fold: macro-F1 for categorical targets, MSE for real ones.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &ProbeTargets,
    test_x: &[Vec<f64>],
    test_y: &ProbeTargets,
    opts: &ProbeOptions,
) -> Result<f64> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::InvalidData("linear_probe: empty fold".into()));
    }
    let xtr = Matrix::from_rows(train_x);
    let xte = Matrix::from_rows(test_x);
    if xtr.cols != xte.cols {
        return Err(Error::shape("linear_probe", &[xtr.cols], &[xte.cols]));
    }
    let (mean, std) = fit_feature_scaler(&xtr);
    let xtr = scale_matrix(&xtr, &mean, &std);
    let xte = scale_matrix(&xte, &mean, &std);

    match (train_y, test_y) {
        (ProbeTargets::Categorical(ytr), ProbeTargets::Categorical(yte)) => {
            if ytr.len() != xtr.rows || yte.len() != xte.rows {
                return Err(Error::InvalidData("linear_probe: label count mismatch".into()));
            }
            let mut classes: Vec<i64> = ytr.clone();
            classes.sort_unstable();
            classes.dedup();
            if classes.len() < 2 {
                return Err(Error::InvalidData(
                    "linear_probe: training fold has a single class".into(),
                ));
            }
            let class_index: BTreeMap<i64, usize> =
                classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            let y_idx: Vec<usize> = ytr.iter().map(|v| class_index[v]).collect();
            let (w, b) = train_softmax_probe(&xtr, &y_idx, classes.len(), opts);
            let pred_idx = softmax_predict(&xte, &w, &b, classes.len());
            let predictions: Vec<i64> = pred_idx.into_iter().map(|i| classes[i]).collect();
            f1_macro(&predictions, yte)
        }
        (ProbeTargets::Real(ytr), ProbeTargets::Real(yte)) => {
            if ytr.len() != xtr.rows || yte.len() != xte.rows {
                return Err(Error::InvalidData("linear_probe: label count mismatch".into()));
            }
            let (w, intercept) = train_ridge(&xtr, ytr, opts.l2);
            let predictions: Vec<f64> = (0..xte.rows)
                .map(|r| {
                    intercept + xte.row(r).iter().zip(&w).map(|(&a, &b)| a * b).sum::<f64>()
                })
                .collect();
            mse(&predictions, yte)
        }
        _ => Err(Error::InvalidData(
            "linear_probe: train/test target kinds disagree".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Ablation report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub task: String,
    pub level: TaskLevel,
    pub subset: Subset,
    pub metric: String,
    pub score: f64,
    pub rel_change_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub version: String,
    /// Resolved configuration of the run that produced the report.
    #[serde(default)]
    pub config: serde_json::Value,
    pub entries: Vec<ProbeEntry>,
    pub skipped: Vec<String>,
}

impl ProbeReport {
    pub fn score(&self, task: &str, subset: Subset) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.task == task && e.subset == subset)
            .map(|e| e.score)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,level,subset,metric,score,rel_change_pct\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.3}\n",
                e.task,
                e.level.name(),
                e.subset.name(),
                e.metric,
                e.score,
                e.rel_change_pct
            ));
        }
        out
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }

    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let mut w = |s: String| out.push_str(&s);
        w(format!(
            "{:<16} {:<9} {:<12} {:<7} {:>9} {:>12}\n",
            "task", "level", "subset", "metric", "score", "rel_change%"
        ));
        for e in &self.entries {
            w(format!(
                "{:<16} {:<9} {:<12} {:<7} {:>9.4} {:>12.2}\n",
                e.task,
                e.level.name(),
                e.subset.name(),
                e.metric,
                e.score,
                e.rel_change_pct
            ));
        }
        for s in &self.skipped {
            w(format!("skipped: {s}\n"));
        }
        out
    }
}

/// Embeds every trajectory of both folds once (visible channels,
/// standardized) and probes each task on each embedding subset. See
/// [`ablation_report_from_embeddings`] for the probing contract.
#[allow(clippy::too_many_arguments)]
pub fn ablation_report(
    config: &BamsConfig,
    params: &ParamStore,
    standardizer: &Standardizer,
    hidden_indices: &[usize],
    train: &Dataset,
    test: &Dataset,
    tasks: &[ProbeTask],
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    let visible: Vec<usize> = (0..train.channels())
        .filter(|i| !hidden_indices.contains(i))
        .collect();
    let embed_all = |ds: &Dataset| -> Result<Vec<Tensor>> {
        let jobs: Vec<&Trajectory> = ds.trajectories.iter().collect();
        let results = crate::parallel_map(jobs, |traj| {
            let standardized = standardizer.apply(&traj.features);
            let vis = standardized.select_cols(&visible);
            embed(config, params, &vis).map(|set| set.full)
        });
        results.into_iter().collect()
    };
    let train_emb = embed_all(train)?;
    let test_emb = embed_all(test)?;
    ablation_report_from_embeddings(
        &BranchSlices::from_config(config),
        train,
        &train_emb,
        test,
        &test_emb,
        tasks,
        opts,
    )
}

/// Probes each task on each embedding subset given per-trajectory
/// embedding matrices (frames x embedding_dim, aligned with the fold's
/// trajectory order). Sequence-level tasks read out the per-sequence
/// time-mean embedding; frame-level tasks read out per-frame rows,
/// subsampled to the probe's frame budget. Slicing happens before probe
/// training, so a subset probe never sees columns outside its slice.
/// Tasks whose label is absent from any sequence are listed as skipped
/// rather than failing the report.
pub fn ablation_report_from_embeddings(
    slices: &BranchSlices,
    train: &Dataset,
    train_emb: &[Tensor],
    test: &Dataset,
    test_emb: &[Tensor],
    tasks: &[ProbeTask],
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks".into()));
    }
    slices.validate()?;

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for task in tasks {
        let train_data = build_task_data(task, train, train_emb);
        let test_data = build_task_data(task, test, test_emb);
        let ((train_rows, train_targets), (test_rows, test_targets)) =
            match (train_data, test_data) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(reason), _) | (_, Err(reason)) => {
                    skipped.push(format!("{}: {reason}", task.name));
                    continue;
                }
            };

        let budget = |rows: &[Vec<f64>]| -> Vec<usize> {
            let stride = rows.len().div_ceil(opts.max_frames.max(1)).max(1);
            (0..rows.len()).step_by(stride).collect()
        };
        let train_keep = budget(&train_rows);
        let test_keep = budget(&test_rows);

        let mut full_score = None;
        for subset in Subset::ALL {
            let columns = subset.columns(slices);
            let slice_rows = |rows: &[Vec<f64>], keep: &[usize]| -> Vec<Vec<f64>> {
                keep.iter().map(|&r| rows[r][columns.clone()].to_vec()).collect()
            };
            let pick_targets = |t: &ProbeTargets, keep: &[usize]| -> ProbeTargets {
                match t {
                    ProbeTargets::Categorical(v) => {
                        ProbeTargets::Categorical(keep.iter().map(|&r| v[r]).collect())
                    }
                    ProbeTargets::Real(v) => {
                        ProbeTargets::Real(keep.iter().map(|&r| v[r]).collect())
                    }
                }
            };
            let score = linear_probe(
                &slice_rows(&train_rows, &train_keep),
                &pick_targets(&train_targets, &train_keep),
                &slice_rows(&test_rows, &test_keep),
                &pick_targets(&test_targets, &test_keep),
                opts,
            )?;
            if subset == Subset::Full {
                full_score = Some(score);
            }
            let full = full_score.expect("full subset scored first");
            let rel = if full.abs() < 1e-12 {
                0.0
            } else {
                (score - full) / full.abs() * 100.0
            };
            entries.push(ProbeEntry {
                task: task.name.clone(),
                level: task.level,
                subset,
                metric: match task.kind {
                    TaskKind::Categorical => "f1".to_string(),
                    TaskKind::Real => "mse".to_string(),
                },
                score,
                rel_change_pct: rel,
            });
        }
    }
    Ok(ProbeReport {
        version: crate::version_string(),
        config: serde_json::Value::Null,
        entries,
        skipped,
    })
}

/// Collects (embedding rows, targets) for a task over one fold.
/// Returns a readable reason string when the label is missing.
fn build_task_data(
    task: &ProbeTask,
    dataset: &Dataset,
    embeddings: &[Tensor],
) -> std::result::Result<(Vec<Vec<f64>>, ProbeTargets), String> {
    match task.level {
        TaskLevel::Sequence => {
            let mut rows = Vec::with_capacity(dataset.len());
            let mut cat = Vec::new();
            let mut real = Vec::new();
            for (traj, emb) in dataset.trajectories.iter().zip(embeddings) {
                let label = traj
                    .sequence_labels
                    .get(&task.name)
                    .ok_or_else(|| format!("sequence label missing on {}", traj.agent_id))?;
                match (task.kind, label) {
                    (TaskKind::Categorical, Label::Categorical(v)) => cat.push(*v),
                    (TaskKind::Real, Label::Real(v)) => real.push(*v),
                    _ => return Err(format!("label kind mismatch on {}", traj.agent_id)),
                }
                // Time-mean of the per-frame embedding.
                let (t_len, dim) = (emb.rows(), emb.cols());
                let mut mean = vec![0.0; dim];
                for t in 0..t_len {
                    for (m, &v) in mean.iter_mut().zip(emb.row(t)) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= t_len as f64;
                }
                rows.push(mean);
            }
            let targets = match task.kind {
                TaskKind::Categorical => ProbeTargets::Categorical(cat),
                TaskKind::Real => ProbeTargets::Real(real),
            };
            Ok((rows, targets))
        }
        TaskLevel::Frame => {
            let mut rows = Vec::new();
            let mut cat = Vec::new();
            let mut real = Vec::new();
            for (traj, emb) in dataset.trajectories.iter().zip(embeddings) {
                // A sequence label probed at frame level is broadcast to
                // every frame, matching challenge-style per-frame readouts.
                let broadcast = traj.sequence_labels.get(&task.name).map(|l| match l {
                    Label::Categorical(v) => {
                        FrameLabels::Categorical(vec![*v; traj.frames()])
                    }
                    Label::Real(v) => FrameLabels::Real(vec![*v; traj.frames()]),
                });
                let track = match (traj.frame_labels.get(&task.name), &broadcast) {
                    (Some(t), _) => t,
                    (None, Some(b)) => b,
                    (None, None) => {
                        return Err(format!("frame label missing on {}", traj.agent_id))
                    }
                };
                match (task.kind, track) {
                    (TaskKind::Categorical, FrameLabels::Categorical(vals)) => {
                        for (t, &v) in vals.iter().enumerate() {
                            rows.push(emb.row(t).to_vec());
                            cat.push(v);
                        }
                    }
                    (TaskKind::Real, FrameLabels::Real(vals)) => {
                        for (t, &v) in vals.iter().enumerate() {
                            rows.push(emb.row(t).to_vec());
                            real.push(v);
                        }
                    }
                    _ => return Err(format!("label kind mismatch on {}", traj.agent_id)),
                }
            }
            let targets = match task.kind {
                TaskKind::Categorical => ProbeTargets::Categorical(cat),
                TaskKind::Real => ProbeTargets::Real(real),
            };
            Ok((rows, targets))
        }
    }
}
