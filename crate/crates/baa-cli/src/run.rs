//! Command implementations. Each resolves the config, loads its inputs,
//! does the work, and writes every artifact plus a `run_manifest.json`
//! under `--out`. All outputs are deterministic in (inputs, seed).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use baa::embednet::{exclusivity_histogram, EmbedNet, Histogram, HISTOGRAM_BINS};
use baa::synthworld::{build_datasets, Datasets, SequenceDataset};
use baa::tensor::Tensor;
use baa::trainer::{
    self, config_hash, AdaptMode, EpochSummary, EvalReport, Phase, RunState, TrainError,
};

use crate::config::{self, Loaded};
use crate::manifest::RunManifest;
use crate::plot::{line_plot, series_csv, Series};
use crate::{train_failure, world_failure, Common, Failure, PhaseArg, SplitArg};

fn ensure_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .map_err(Failure::io)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::io)
}

fn load_data(dir: &Path) -> Result<Datasets, Failure> {
    if !dir.join("manifest.json").exists() {
        return Err(Failure::io(anyhow!(
            "no dataset at {}; run `baa gen-data --out {}` first",
            dir.display(),
            dir.display()
        )));
    }
    Datasets::load(dir).map_err(world_failure)
}

fn load_ckpt(dir: &Path, produced_by: &str) -> Result<RunState, Failure> {
    if !dir.join("state.json").exists() {
        return Err(Failure::missing_checkpoint(anyhow!(
            "no checkpoint at {}; pass a checkpoint directory written by `baa {produced_by}`",
            dir.display()
        )));
    }
    trainer::load_checkpoint(dir).map_err(train_failure)
}

fn progress(phase: &str, total: usize) -> impl FnMut(&EpochSummary) + '_ {
    move |s| {
        let gen = s.mean_gen.map(|g| format!(", gen {g:.4}")).unwrap_or_default();
        eprintln!(
            "{phase} epoch {}/{total}: {} steps, ce {:.4}{gen}, {} skipped, {:.1}s",
            s.epoch, s.steps, s.mean_ce, s.skipped_steps, s.seconds
        );
    }
}

fn write_ape_plot(out: &Path, reports: &[(String, &EvalReport)]) -> Result<(), Failure> {
    let series: Vec<Series> = reports
        .iter()
        .map(|(label, r)| Series {
            label: label.clone(),
            points: r
                .ape_curve
                .iter()
                .enumerate()
                .map(|(i, &v)| ((i + 1) as f64, v))
                .collect(),
        })
        .collect();
    let svg = line_plot(
        "APE vs sequence length",
        "sequence length (frames)",
        "APE (world units)",
        &series,
    );
    write_file(&out.join("ape_vs_length.svg"), &svg)?;
    write_file(&out.join("ape_vs_length.csv"), &series_csv("length", &series))
}

// ---- gen-data ----

pub fn gen_data(common: Common) -> Result<(), Failure> {
    let Loaded { file, path } = config::load(common.config.as_deref(), common.seed)?;
    ensure_out(&common.out)?;
    eprintln!("rendering datasets with seed {}", file.dataset.seed);
    let data = build_datasets(&file.dataset).map_err(world_failure)?;
    data.save(&common.out).map_err(world_failure)?;
    RunManifest::new("gen-data".into(), &path, &file, &[], &common.out)?.write(&common.out)
}

// ---- pretrain ----

pub fn pretrain(common: Common, data_dir: PathBuf) -> Result<(), Failure> {
    let Loaded { file, path } = config::load(common.config.as_deref(), common.seed)?;
    let data = load_data(&data_dir)?;
    ensure_out(&common.out)?;

    let mut state =
        RunState::new(file.train.clone(), data.config.image_size).map_err(train_failure)?;
    let k = data.config.intrinsics();
    let epochs = state.config.pretrain.epochs;
    trainer::pretrain(&mut state, &data.source_train, &k, progress("pretrain", epochs))
        .map_err(train_failure)?;

    trainer::save_checkpoint(common.out.join("checkpoint"), &state).map_err(train_failure)?;
    write_file(&common.out.join("training_log.csv"), &state.log.to_csv())?;

    let report =
        trainer::evaluate(&state.net, &data.source_test, &k, &state.config).map_err(train_failure)?;
    report.save_json(common.out.join("metrics.json")).map_err(train_failure)?;
    write_ape_plot(&common.out, &[("source".to_string(), &report)])?;
    eprintln!("source test APE@5 {:.2}, APE@50 {:.2}", report.ape5, report.ape50);

    RunManifest::new("pretrain".into(), &path, &file, &[&data_dir], &common.out)?
        .write(&common.out)
}

// ---- adapt / ablate ----

pub fn adapt(
    common: Common,
    data_dir: PathBuf,
    checkpoint: PathBuf,
    mode: AdaptMode,
    command_name: &str,
) -> Result<(), Failure> {
    let Loaded { file, path } = config::load(common.config.as_deref(), common.seed)?;
    let data = load_data(&data_dir)?;
    let mut state = load_ckpt(&checkpoint, "pretrain")?;
    if config_hash(&file.train) != config_hash(&state.config) {
        return Err(Failure::config(anyhow!(
            "config does not match the checkpoint at {}; pass the config (and seed) used for \
             pretraining",
            checkpoint.display()
        )));
    }
    ensure_out(&common.out)?;

    let k = data.config.intrinsics();
    let epochs = state.config.adapt.epochs;
    let outcome = trainer::adapt(
        &mut state,
        &data.source_train,
        &data.target_train,
        mode,
        progress(command_name, epochs),
    );
    match outcome {
        Ok(_) => {}
        Err(e @ TrainError::Diverged { .. }) => {
            let dump = common.out.join("diverged");
            trainer::save_checkpoint(&dump, &state).map_err(train_failure)?;
            write_file(&common.out.join("training_log.csv"), &state.log.to_csv())?;
            let mut f = train_failure(e);
            f.error = f.error.context(format!("state dumped under {}", dump.display()));
            return Err(f);
        }
        Err(e) => return Err(train_failure(e)),
    }

    trainer::save_checkpoint(common.out.join("checkpoint"), &state).map_err(train_failure)?;
    write_file(&common.out.join("training_log.csv"), &state.log.to_csv())?;

    let report = trainer::evaluate(&state.net, &data.target_test, &k, &state.config)
        .map_err(train_failure)?;
    report.save_json(common.out.join("metrics.json")).map_err(train_failure)?;
    write_ape_plot(&common.out, &[(mode.name().to_string(), &report)])?;
    eprintln!("target test APE@5 {:.2}, APE@50 {:.2}", report.ape5, report.ape50);

    let command = match command_name {
        "adapt" => "adapt".to_string(),
        _ => format!("ablate --mode {}", mode.name()),
    };
    RunManifest::new(command, &path, &file, &[&data_dir, &checkpoint], &common.out)?
        .write(&common.out)
}

// ---- eval ----

/// Curve label for a checkpoint path: the run directory name when the path
/// ends in the standard `checkpoint`/`diverged` component, otherwise the
/// last component itself.
fn label_of(path: &Path) -> String {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned());
    let raw = match name.as_deref() {
        Some("checkpoint") | Some("diverged") => path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .or(name)
            .unwrap(),
        Some(_) => name.unwrap(),
        None => path.display().to_string(),
    };
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

fn unique_label(path: &Path, used: &[String]) -> String {
    let base = label_of(path);
    if !used.contains(&base) {
        return base;
    }
    let mut i = 2;
    loop {
        let candidate = format!("{base}-{i}");
        if !used.contains(&candidate) {
            return candidate;
        }
        i += 1;
    }
}

pub fn eval(
    common: Common,
    data_dir: PathBuf,
    checkpoints: Vec<PathBuf>,
    split: SplitArg,
) -> Result<(), Failure> {
    let Loaded { file, path } = config::load(common.config.as_deref(), common.seed)?;
    let data = load_data(&data_dir)?;
    ensure_out(&common.out)?;
    let (split_name, test) = match split {
        SplitArg::Source => ("source", &data.source_test),
        SplitArg::Target => ("target", &data.target_test),
    };
    let k = data.config.intrinsics();

    let mut labels: Vec<String> = Vec::new();
    let mut reports: Vec<EvalReport> = Vec::new();
    for dir in &checkpoints {
        let state = load_ckpt(dir, "pretrain or adapt")?;
        // the active config's eval block governs evaluation; everything else
        // (temperature above all) belongs to the trained model
        let mut cfg = state.config.clone();
        cfg.eval = file.train.eval.clone();
        let label = unique_label(dir, &labels);
        eprintln!("evaluating {label} on the {split_name} test split");
        let report =
            trainer::evaluate(&state.net, test, &k, &cfg).map_err(train_failure)?;
        eprintln!("  APE@5 {:.2}, APE@50 {:.2}", report.ape5, report.ape50);

        let log_name = if reports.is_empty() {
            "training_log.csv".to_string()
        } else {
            format!("training_log.{label}.csv")
        };
        write_file(&common.out.join(log_name), &state.log.to_csv())?;
        labels.push(label);
        reports.push(report);
    }

    let entries: Vec<serde_json::Value> = labels
        .iter()
        .zip(&reports)
        .map(|(label, report)| serde_json::json!({ "label": label, "report": report }))
        .collect();
    let json =
        serde_json::to_string_pretty(&serde_json::Value::Array(entries)).map_err(Failure::io)?;
    write_file(&common.out.join("metrics.json"), &(json + "\n"))?;

    let pairs: Vec<(String, &EvalReport)> =
        labels.iter().cloned().zip(reports.iter()).collect();
    write_ape_plot(&common.out, &pairs)?;

    let input_dirs: Vec<&Path> = std::iter::once(data_dir.as_path())
        .chain(checkpoints.iter().map(|p| p.as_path()))
        .collect();
    RunManifest::new(format!("eval --split {split_name}"), &path, &file, &input_dirs, &common.out)?
        .write(&common.out)
}

// ---- histogram ----

fn split_histogram(
    net: &EmbedNet,
    split: &SequenceDataset,
    temperature: f64,
) -> Result<Histogram, Failure> {
    let mut grids = Vec::new();
    for seq in &split.sequences {
        let images: Vec<&Tensor<f32>> = seq.iter().map(|f| &f.image).collect();
        grids.extend(net.embed_batch(&images).map_err(|e| train_failure(e.into()))?);
    }
    Ok(exclusivity_histogram(&grids, temperature))
}

fn fractions(label: &str, h: &Histogram) -> Series {
    Series {
        label: label.to_string(),
        points: h
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as f64 / HISTOGRAM_BINS as f64, c as f64 / h.total.max(1) as f64))
            .collect(),
    }
}

pub fn histogram(
    common: Common,
    data_dir: PathBuf,
    checkpoint: PathBuf,
    phase: PhaseArg,
) -> Result<(), Failure> {
    let Loaded { file, path } = config::load(common.config.as_deref(), common.seed)?;
    let data = load_data(&data_dir)?;
    let state = load_ckpt(&checkpoint, "pretrain or adapt")?;
    let expected = match phase {
        PhaseArg::Pre => Phase::Pretrain,
        PhaseArg::Post => Phase::Adapt,
    };
    if state.phase != expected {
        let (have, want) = match phase {
            PhaseArg::Pre => ("adapt", "pretrain"),
            PhaseArg::Post => ("pretrain", "adapt"),
        };
        return Err(Failure::config(anyhow!(
            "checkpoint at {} was written by `baa {have}`; --phase {} expects one written by \
             `baa {want}`",
            checkpoint.display(),
            phase.name()
        )));
    }
    ensure_out(&common.out)?;

    let t = state.config.temperature;
    let source = split_histogram(&state.net, &data.source_test, t)?;
    let target = split_histogram(&state.net, &data.target_test, t)?;

    const THRESHOLD: f64 = 0.1;
    let metrics = serde_json::json!({
        "phase": phase.name(),
        "threshold": THRESHOLD,
        "bins": HISTOGRAM_BINS,
        "source_mass_below": source.mass_below(THRESHOLD),
        "target_mass_below": target.mass_below(THRESHOLD),
        "seed": state.config.seed,
        "config_hash": config_hash(&state.config),
    });
    let json = serde_json::to_string_pretty(&metrics).map_err(Failure::io)?;
    write_file(&common.out.join("metrics.json"), &(json + "\n"))?;
    eprintln!(
        "mass below {THRESHOLD}: source {:.3}, target {:.3}",
        source.mass_below(THRESHOLD),
        target.mass_below(THRESHOLD)
    );

    let series = [fractions("source", &source), fractions("target", &target)];
    let svg = line_plot(
        &format!("Exclusivity histogram ({}-adaptation)", phase.name()),
        "mean off-self probability",
        "fraction of vectors",
        &series,
    );
    write_file(&common.out.join("histogram.svg"), &svg)?;
    write_file(&common.out.join("histogram.csv"), &series_csv("bin_left", &series))?;
    write_file(&common.out.join("training_log.csv"), &state.log.to_csv())?;

    RunManifest::new(
        format!("histogram --phase {}", phase.name()),
        &path,
        &file,
        &[&data_dir, &checkpoint],
        &common.out,
    )?
    .write(&common.out)
}
