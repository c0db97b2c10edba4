//! Command-line entry point: gen, train, embed, probe, report.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed --assert
//! checks), 2 usage or configuration errors.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use bams::data::{load_dataset, save_dataset, split_dataset, Dataset};
use bams::error::Error;
use bams::eval::{
    ablation_report, ablation_report_from_embeddings, BranchSlices, ProbeReport, ProbeTask, Subset,
};
use bams::model::embed;
use bams::nn::tensor::Tensor;
use bams::synth::{generate_dataset, GLOBAL_LABEL, REGIME_LABEL};
use bams::trainer::{load_checkpoint, train, Checkpoint};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "bams", version, about = "Multi-timescale behavioral representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-timescale dataset.
    Gen {
        /// Run configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Seed overriding the configuration's.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (from `gen` or hand-assembled).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint and log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Train on the train fold of the evaluation split instead of the
        /// whole directory, keeping probe test sequences unseen.
        #[arg(long)]
        holdout: bool,
    },
    /// Write per-frame embeddings of every sequence to CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Pool agents sharing a group key and append 2x-width columns.
        #[arg(long)]
        group: bool,
    },
    /// Train linear probes on the frozen embeddings and write a report.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated task names (defaults to the config's tasks).
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        /// Exit nonzero unless the timescale orderings hold.
        #[arg(long)]
        assert: bool,
    },
    /// Rebuild a probe report from saved embeddings, without the model.
    Report {
        /// Embeddings CSV written by `embed`.
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long)]
        assert: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) | Error::InvalidData(_) => 2,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Gen {
            config,
            out,
            seed,
            force,
        } => cmd_gen(config.as_deref(), &out, seed, force),
        Command::Train {
            config,
            data,
            out,
            seed,
            holdout,
        } => cmd_train(config.as_deref(), &data, &out, seed, holdout),
        Command::Embed {
            checkpoint,
            data,
            out,
            group,
        } => cmd_embed(&checkpoint, &data, &out, group),
        Command::Probe {
            checkpoint,
            data,
            out,
            config,
            seed,
            tasks,
            assert,
        } => cmd_probe(&checkpoint, &data, &out, config.as_deref(), seed, &tasks, assert),
        Command::Report {
            embeddings,
            data,
            out,
            config,
            seed,
            tasks,
            assert,
        } => cmd_report(&embeddings, &data, &out, config.as_deref(), seed, &tasks, assert),
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), Error> {
    if !path.is_dir() {
        return Err(Error::Config(format!(
            "{what} directory not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>, force: bool) -> Result<i32, Error> {
    let run_config = RunConfig::load(config)?.with_seed(seed);
    if out.is_dir() && fs::read_dir(out)?.next().is_some() && !force {
        return Err(Error::Config(format!(
            "output directory {} is not empty (use --force to overwrite)",
            out.display()
        )));
    }
    let dataset = generate_dataset(&run_config.generator)?;
    save_dataset(
        out,
        &dataset,
        run_config.generator.seed,
        &serde_json::to_value(&run_config)?,
    )?;
    println!(
        "wrote {} sequences ({} channels, {} frames each) to {}",
        dataset.len(),
        dataset.channels(),
        dataset.trajectories[0].frames(),
        out.display()
    );
    Ok(0)
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    holdout: bool,
) -> Result<i32, Error> {
    require_dir(data, "data")?;
    let run_config = RunConfig::load(config)?.with_seed(seed);
    let mut dataset = load_dataset(data)?;
    if holdout {
        let (train_fold, _) = split_dataset(
            &dataset,
            run_config.eval.train_fraction,
            run_config.split_seed(),
        )?;
        dataset = train_fold;
    }
    let model_config = run_config.resolve_model(&dataset)?;
    fs::create_dir_all(out)?;
    fs::write(
        out.join("resolved_config.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "version": bams::version_string(),
            "run": run_config,
            "model": model_config,
        }))?,
    )?;
    let summary = train(&dataset, &model_config, &run_config.train, out)?;
    println!(
        "trained {} epochs ({} steps); first-epoch mean total {:.4}, last {:.4}",
        summary.epochs,
        summary.steps,
        summary.first_epoch_mean_total,
        summary.last_epoch_mean_total
    );
    println!("checkpoint: {}", summary.checkpoint_path.display());
    println!("log: {}", summary.log_path.display());
    Ok(0)
}

/// Embeds every trajectory with the checkpointed model and standardizer.
fn embed_dataset(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Vec<Tensor>, Error> {
    if dataset.feature_names != ckpt.feature_names {
        return Err(Error::Config(
            "dataset feature names do not match the checkpoint".into(),
        ));
    }
    let visible: Vec<usize> = (0..dataset.channels())
        .filter(|i| !ckpt.hidden_indices.contains(i))
        .collect();
    let jobs: Vec<&bams::data::Trajectory> = dataset.trajectories.iter().collect();
    let results = bams::parallel_map(jobs, |traj| {
        let standardized = ckpt.standardizer.apply(&traj.features);
        let vis = standardized.select_cols(&visible);
        embed(&ckpt.model_config, &ckpt.params, &vis).map(|set| set.full)
    });
    results.into_iter().collect()
}

fn cmd_embed(checkpoint: &Path, data: &Path, out: &Path, group: bool) -> Result<i32, Error> {
    require_dir(data, "data")?;
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let embeddings = embed_dataset(&ckpt, &dataset)?;
    let slices = BranchSlices::from_config(&ckpt.model_config);
    let dim = slices.embedding_dim();

    // Pooled per-group embeddings when requested.
    let pooled: Option<BTreeMap<String, Tensor>> = if group {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, traj) in dataset.trajectories.iter().enumerate() {
            groups.entry(traj.group_key().to_string()).or_default().push(i);
        }
        let mut pooled = BTreeMap::new();
        for (key, members) in &groups {
            let frames = dataset.trajectories[members[0]].frames();
            for &m in members {
                if dataset.trajectories[m].frames() != frames {
                    return Err(Error::InvalidData(format!(
                        "group {key}: member frame counts differ"
                    )));
                }
            }
            let mut data = Vec::with_capacity(frames * 2 * dim);
            for t in 0..frames {
                let rows: Vec<&[f64]> = members.iter().map(|&m| embeddings[m].row(t)).collect();
                data.extend(bams::eval::pool_group(&rows)?);
            }
            pooled.insert(key.clone(), Tensor::new(vec![frames, 2 * dim], data)?);
        }
        Some(pooled)
    } else {
        None
    };

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(out)?);
    writeln!(w, "# {}", bams::version_string())?;
    writeln!(w, "# branch_slices {}", slices.header_comment())?;
    writeln!(w, "# config {}", serde_json::to_string(&ckpt.model_config)?)?;
    let mut header: Vec<String> = vec!["seq".into(), "t".into()];
    header.extend((0..dim).map(|i| format!("z_{i}")));
    if group {
        header.extend((0..2 * dim).map(|i| format!("g_{i}")));
    }
    writeln!(w, "{}", header.join(","))?;
    let mut rows_written = 0usize;
    for (traj, emb) in dataset.trajectories.iter().zip(&embeddings) {
        let pooled_for_group = pooled.as_ref().map(|p| &p[traj.group_key()]);
        for t in 0..emb.rows() {
            let mut fields: Vec<String> = Vec::with_capacity(2 + dim);
            fields.push(traj.agent_id.clone());
            fields.push(t.to_string());
            fields.extend(emb.row(t).iter().map(|v| format!("{v:?}")));
            if let Some(p) = pooled_for_group {
                fields.extend(p.row(t).iter().map(|v| format!("{v:?}")));
            }
            writeln!(w, "{}", fields.join(","))?;
            rows_written += 1;
        }
    }
    w.flush()?;
    println!("wrote {rows_written} embedding rows to {}", out.display());
    Ok(0)
}

fn resolve_tasks(run_config: &RunConfig, requested: &[String]) -> (Vec<ProbeTask>, Vec<String>) {
    if requested.is_empty() {
        return (run_config.eval.tasks.clone(), Vec::new());
    }
    let mut tasks = Vec::new();
    let mut skipped = Vec::new();
    for name in requested {
        match run_config.eval.tasks.iter().find(|t| &t.name == name) {
            Some(task) => tasks.push(task.clone()),
            None => skipped.push(format!("{name}: unknown task")),
        }
    }
    (tasks, skipped)
}

fn finish_report(
    mut report: ProbeReport,
    run_config: &RunConfig,
    pre_skipped: Vec<String>,
    out: &Path,
    assert: bool,
) -> Result<i32, Error> {
    report.config = serde_json::to_value(run_config)?;
    report.skipped.extend(pre_skipped);
    report.save(out, "probe_report")?;
    print!("{}", report.render_table());
    println!("report: {}", out.join("probe_report.csv").display());
    if assert {
        let failures = ordering_failures(&report);
        if failures.is_empty() {
            println!("assert: all timescale orderings hold");
        } else {
            for f in &failures {
                eprintln!("assert failed: {f}");
            }
            return Ok(1);
        }
    }
    Ok(0)
}

fn cmd_probe(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    requested: &[String],
    assert: bool,
) -> Result<i32, Error> {
    require_dir(data, "data")?;
    let run_config = RunConfig::load(config)?.with_seed(seed);
    let (tasks, pre_skipped) = resolve_tasks(&run_config, requested);
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let (train_ds, test_ds) = split_dataset(
        &dataset,
        run_config.eval.train_fraction,
        run_config.split_seed(),
    )?;
    let report = ablation_report(
        &ckpt.model_config,
        &ckpt.params,
        &ckpt.standardizer,
        &ckpt.hidden_indices,
        &train_ds,
        &test_ds,
        &tasks,
        &run_config.eval.probe,
    )?;
    finish_report(report, &run_config, pre_skipped, out, assert)
}

fn cmd_report(
    embeddings: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    requested: &[String],
    assert: bool,
) -> Result<i32, Error> {
    require_dir(data, "data")?;
    let run_config = RunConfig::load(config)?.with_seed(seed);
    let (tasks, pre_skipped) = resolve_tasks(&run_config, requested);
    let dataset = load_dataset(data)?;
    let (slices, by_sequence) = read_embeddings_csv(embeddings)?;
    let collect = |fold: &Dataset| -> Result<Vec<Tensor>, Error> {
        fold.trajectories
            .iter()
            .map(|traj| {
                by_sequence.get(&traj.agent_id).cloned().ok_or_else(|| {
                    Error::InvalidData(format!(
                        "no embeddings for sequence {} in {}",
                        traj.agent_id,
                        embeddings.display()
                    ))
                })
            })
            .collect()
    };
    let (train_ds, test_ds) = split_dataset(
        &dataset,
        run_config.eval.train_fraction,
        run_config.split_seed(),
    )?;
    let train_emb = collect(&train_ds)?;
    let test_emb = collect(&test_ds)?;
    let report = ablation_report_from_embeddings(
        &slices,
        &train_ds,
        &train_emb,
        &test_ds,
        &test_emb,
        &tasks,
        &run_config.eval.probe,
    )?;
    finish_report(report, &run_config, pre_skipped, out, assert)
}

/// Reads an embeddings CSV back into per-sequence matrices, using only the
/// z_ columns (pooled g_ columns are ignored).
fn read_embeddings_csv(path: &Path) -> Result<(BranchSlices, BTreeMap<String, Tensor>), Error> {
    let text = fs::read_to_string(path)?;
    let mut slices = None;
    let mut header: Option<Vec<String>> = None;
    let mut rows: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# branch_slices ") {
            slices = Some(BranchSlices::parse_header_comment(rest)?);
            continue;
        }
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        match &header {
            None => {
                header = Some(line.split(',').map(str::to_string).collect());
            }
            Some(cols) => {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != cols.len() {
                    return Err(Error::InvalidData(format!(
                        "{}: row has {} fields, header has {}",
                        path.display(),
                        fields.len(),
                        cols.len()
                    )));
                }
                let seq = fields[0].to_string();
                let mut z = Vec::new();
                for (name, value) in cols.iter().zip(&fields).skip(2) {
                    if name.starts_with("z_") {
                        z.push(value.parse::<f64>().map_err(|_| {
                            Error::InvalidData(format!("bad embedding value {value:?}"))
                        })?);
                    }
                }
                rows.entry(seq).or_default().push(z);
            }
        }
    }
    let slices = slices.ok_or_else(|| {
        Error::InvalidData(format!(
            "{}: missing '# branch_slices' header",
            path.display()
        ))
    })?;
    let mut by_sequence = BTreeMap::new();
    for (seq, seq_rows) in rows {
        by_sequence.insert(seq, Tensor::from_rows(&seq_rows)?);
    }
    Ok((slices, by_sequence))
}

/// The timescale orderings `--assert` enforces on the synthetic tasks:
/// the global class must read out better from the long-term branch alone
/// than from the short-term one (by margin) and cleanly (>= 0.90), and
/// the full embedding must not lose to either branch alone on the regime
/// task while beating chance by a wide margin.
fn ordering_failures(report: &ProbeReport) -> Vec<String> {
    let mut failures = Vec::new();
    let need = |task: &str, subset: Subset| -> Option<f64> { report.score(task, subset) };
    match (
        need(GLOBAL_LABEL, Subset::LongOnly),
        need(GLOBAL_LABEL, Subset::ShortOnly),
    ) {
        (Some(long), Some(short)) => {
            if long < short + 0.05 {
                failures.push(format!(
                    "f1({GLOBAL_LABEL}|long_only)={long:.4} < f1({GLOBAL_LABEL}|short_only)={short:.4} + 0.05"
                ));
            }
            if long < 0.90 {
                failures.push(format!("f1({GLOBAL_LABEL}|long_only)={long:.4} < 0.90"));
            }
        }
        _ => failures.push(format!("{GLOBAL_LABEL} scores missing from report")),
    }
    match (
        need(REGIME_LABEL, Subset::Full),
        need(REGIME_LABEL, Subset::ShortOnly),
        need(REGIME_LABEL, Subset::LongOnly),
    ) {
        (Some(full), Some(short), Some(long)) => {
            if full < short.max(long) - 0.02 {
                failures.push(format!(
                    "f1({REGIME_LABEL}|full)={full:.4} < max(short={short:.4}, long={long:.4}) - 0.02"
                ));
            }
            if full < 0.2 + 0.25 {
                failures.push(format!(
                    "f1({REGIME_LABEL}|full)={full:.4} does not beat chance 0.2 by 0.25"
                ));
            }
        }
        _ => failures.push(format!("{REGIME_LABEL} scores missing from report")),
    }
    failures
}
