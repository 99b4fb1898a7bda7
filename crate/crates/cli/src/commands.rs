use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Result};
use tacoformer::gradcheck::tiny_check;
use tacoformer::preprocess::grid::ChannelGridMap;
use tacoformer::preprocess::instances::{Dataset, InstanceSet, Task};
use tacoformer::preprocess::pipeline::{
    deap_pipeline, dreamer_pipeline, DEAP_THRESHOLD, DREAMER_THRESHOLD,
};
use tacoformer::preprocess::raw::{read_ratings, read_subject, subject_files, RATINGS_FILE};
use tacoformer::preprocess::synth::{synth_generate, SynthSpec};
use tacoformer::trainer::ablation::run_ablation;
use tacoformer::trainer::checkpoint::{load_checkpoint, save_checkpoint, sidecar_path};
use tacoformer::trainer::{evaluate, split, train as run_training};
use tacoformer::{Error, Execution, FusionMode};

use crate::config::{effective_config, to_json};
use crate::ConfigArgs;

/// Raised when a check ran to completion and found a violation.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// 1 for I/O, 3 for a failed check, 2 for everything else (bad config or input).
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. }) => 1,
        _ if err.downcast_ref::<std::io::Error>().is_some() => 1,
        _ => 2,
    }
}

#[cfg(feature = "parallel")]
pub fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
pub fn set_threads(threads: Option<usize>) -> Result<()> {
    if threads.is_some_and(|n| n != 1) {
        eprintln!("note: built without the `parallel` feature; running on one thread");
    }
    Ok(())
}

fn default_execution() -> Execution {
    if Execution::is_parallel_available() {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let f = File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn preprocess(
    dataset: Dataset,
    input: &Path,
    map: Option<&Path>,
    task: Task,
    threshold: Option<f64>,
    out: &Path,
) -> Result<()> {
    let (default_map, default_threshold) = match dataset {
        Dataset::Deap => (ChannelGridMap::deap(), DEAP_THRESHOLD),
        Dataset::Dreamer => (ChannelGridMap::dreamer(), DREAMER_THRESHOLD),
        Dataset::Synthetic => bail!(Error::Config("use `synth` to create synthetic data".into())),
    };
    let map = match map {
        Some(p) => ChannelGridMap::load(p)?,
        None => default_map,
    };
    let threshold = threshold.unwrap_or(default_threshold);
    let ratings = read_ratings(&input.join(RATINGS_FILE))?;
    let subjects = subject_files(input)?;
    if subjects.is_empty() {
        bail!(Error::Malformed {
            path: input.to_path_buf(),
            reason: "no s<NN>.pstb subject containers".into(),
        });
    }
    let mut parts = Vec::new();
    for (subject, path) in subjects {
        let trials = read_subject(&path, subject, dataset, &ratings)?;
        let mut count = 0;
        for trial in &trials {
            let set = match dataset {
                Dataset::Deap => deap_pipeline(trial, &map, task, threshold)?,
                _ => dreamer_pipeline(trial, &map, task, threshold)?,
            };
            count += set.len();
            parts.push(set);
        }
        println!("subject {subject}: {} trials, {count} instances", trials.len());
    }
    let all = InstanceSet::concat(&parts)?;
    all.save(out)?;
    println!(
        "{} instances ({} positive) for {task} written to {}",
        all.len(),
        all.positives(),
        out.display()
    );
    Ok(())
}

pub fn synth(spec: &SynthSpec, out: &Path) -> Result<()> {
    let set = synth_generate(spec)?;
    set.save(out)?;
    println!(
        "{} instances ({} positive, coupling {}) written to {}",
        set.len(),
        set.positives(),
        spec.coupling,
        out.display()
    );
    Ok(())
}

pub fn train(data: &Path, args: &ConfigArgs, out: &Path, log: Option<&Path>) -> Result<()> {
    let cfg = effective_config(args.config.as_deref(), &args.overrides)?;
    let set = InstanceSet::load(data)?;
    if set.task != cfg.train.task {
        bail!(Error::Config(format!(
            "data is labelled for {} but train.task is {}",
            set.task, cfg.train.task
        )));
    }
    let echo = format!("{{\"config\":{}}}", to_json(&cfg)?);
    eprintln!("{echo}");
    let (tr, te) = split(&set, cfg.train.split_ratio, cfg.train.seed, cfg.train.split_mode)?;
    let model = cfg.arch.model_for(&tr)?;
    let mut sink: Box<dyn Write> = match log {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(sink, "{echo}")?;
    let outcome = run_training(&model, &tr, Some(&te), &cfg.train, Some(&mut *sink))?;
    sink.flush()?;
    drop(sink);
    save_checkpoint(out, model.config(), &outcome.params)?;
    let m = evaluate(&model, &outcome.params, &te, cfg.train.execution, cfg.train.chunk_size)?;
    eprintln!(
        "test accuracy {:.4} on {} instances; checkpoint {} (+ {})",
        m.accuracy,
        m.n,
        out.display(),
        sidecar_path(out).display()
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (model, params) = load_checkpoint(checkpoint)?;
    let set = InstanceSet::load(data)?;
    let m = evaluate(&model, &params, &set, default_execution(), 8)?;
    let text = serde_json::to_string_pretty(&m)?;
    println!("{text}");
    if let Some(p) = out {
        write_text(p, &(text + "\n"))?;
    }
    Ok(())
}

pub fn ablate(data: &Path, args: &ConfigArgs, seeds: &[u64], out: &Path) -> Result<()> {
    let cfg = effective_config(args.config.as_deref(), &args.overrides)?;
    eprintln!("{{\"config\":{}}}", to_json(&cfg)?);
    let set = InstanceSet::load(data)?;
    let mut progress = |line: &str| eprintln!("{line}");
    let results = run_ablation(&set, &cfg.arch, &cfg.train, seeds, Some(&mut progress))?;
    write_text(out, &results.to_csv())?;
    print!("{}", results.to_table());
    Ok(())
}

pub fn gradcheck(modes: &[FusionMode], seed: u64, tolerance: f64, samples: Option<usize>) -> Result<()> {
    let samples = samples.unwrap_or(usize::MAX);
    let modes = if modes.is_empty() { &FusionMode::ALL[..] } else { modes };
    let mut failed = Vec::new();
    println!("{:<8} {:<28} {:>7} {:>12}", "mode", "tensor", "checked", "max_rel_err");
    for &mode in modes {
        let report = tiny_check(mode, seed, samples)?;
        for t in &report.tensors {
            println!("{:<8} {:<28} {:>7} {:>12.3e}", mode, t.name, t.checked, t.max_rel_error);
        }
        if !report.passes(tolerance) {
            failed.push(format!("{mode} ({:.3e})", report.max_rel_error()));
        }
    }
    if !failed.is_empty() {
        bail!(CheckFailed(format!(
            "gradient check above {tolerance:e} for {}",
            failed.join(", ")
        )));
    }
    println!("all tensors within {tolerance:e}");
    Ok(())
}

pub fn export_attn(checkpoint: &Path, data: &Path, index: usize, out: &Path) -> Result<()> {
    let (model, params) = load_checkpoint(checkpoint)?;
    let set = InstanceSet::load(data)?;
    if index >= set.len() {
        bail!(Error::Config(format!("--index {index} but the file has {} instances", set.len())));
    }
    let eeg = set.eeg.index_axis0(index)?;
    let pps = set.pps.index_axis0(index)?;
    let report = model.fusion_report(&params, &eeg, &pps, set.labels[index])?;
    for p in tacoformer::fusion::export_attention(&report, out)? {
        println!("{}", p.display());
    }
    Ok(())
}
