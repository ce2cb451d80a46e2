//! Command-line front end: data generation, both training stages,
//! leave-one-domain-out evaluation, heatmaps and the attention-bias report.
//!
//! Every command writes into a fresh `runs/<timestamp>/` directory that
//! holds a `metrics.csv` and a `run.json` metadata record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attdiv::backbone::Backbone;
use attdiv::checkpoint::{self, CheckpointMeta};
use attdiv::datagen::{self, BenchmarkConfig, DomainDataset, Sample, Split};
use attdiv::evalviz::{self, Method};
use attdiv::trainer::{self, Precision, TrainConfig, Trained};
use attdiv::{Error, Real, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "attdiv", version, about = "Attention diversification for domain generalization")]
struct Cli {
    /// Parent directory of per-run output directories.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    /// Use this run directory name instead of a timestamp.
    #[arg(long, global = true)]
    run_name: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain benchmark.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        domains: usize,
        #[arg(long, default_value_t = BenchmarkConfig::default().per_domain)]
        per_domain: usize,
        #[arg(long, default_value_t = 7)]
        classes: usize,
        #[arg(long, default_value_t = BenchmarkConfig::default().image_size)]
        size: usize,
        /// Probability that the cue encodes the label.
        #[arg(long, default_value_t = 0.9)]
        shortcut: f64,
    },
    /// Stage 1: train the domain-specific model of one domain.
    TrainSpecific {
        /// Domain name (directory) or index.
        #[arg(long)]
        domain: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the aggregated model against frozen stage-1 models.
    TrainAggregated {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, num_args = 0.., value_delimiter = ' ')]
        specific: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Domain excluded from training.
        #[arg(long)]
        held_out: Option<String>,
    },
    /// Leave-one-domain-out evaluation.
    Eval {
        #[arg(long, default_value = "lodo")]
        protocol: String,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: baseline, intra, i2adr, inter-only, intra+dir, intra+dvr.
        #[arg(long, default_value = "baseline,intra,i2adr")]
        methods: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export thresholded attention heatmaps.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        /// PNG paths or glob patterns.
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<String>,
        #[arg(long, default_value = "1,2,3,4", value_delimiter = ',')]
        blocks: Vec<usize>,
        #[arg(long, default_value_t = evalviz::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Pairwise attention divergence of domain-specific models on one domain.
    BiasReport {
        #[arg(long, num_args = 2.., required = true)]
        specific: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Domain to evaluate on; defaults to the one no model was trained on.
        #[arg(long)]
        held_out: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Control models for a paired sign test (e.g. trained without the shortcut).
        #[arg(long, num_args = 2..)]
        control_specific: Vec<PathBuf>,
        /// Dataset of the control models.
        #[arg(long)]
        control_data: Option<PathBuf>,
    },
}

/// Creates `runs/<timestamp>` (or the requested name), suffixing on clashes.
fn run_dir(cli: &Cli) -> Result<PathBuf> {
    let base = cli.run_name.clone().unwrap_or_else(|| chrono::Local::now().format("%Y%m%d-%H%M%S").to_string());
    let mut dir = cli.runs_dir.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = cli.runs_dir.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_run_json(dir: &Path, command: &str, fields: Value) -> Result<()> {
    let mut record = json!({
        "command": command,
        "args": std::env::args().collect::<Vec<_>>(),
        "version": checkpoint::code_version(),
        "parallel": attdiv::par::is_parallel(),
    });
    if let (Value::Object(r), Value::Object(f)) = (&mut record, fields) {
        r.extend(f);
    }
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_text(&fs::read_to_string(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn find_domain<'a>(data: &'a [DomainDataset], key: &str) -> Result<&'a DomainDataset> {
    data.iter()
        .find(|d| d.name == key)
        .or_else(|| key.parse::<usize>().ok().and_then(|i| data.get(i)))
        .ok_or_else(|| {
            let names: Vec<&str> = data.iter().map(|d| d.name.as_str()).collect();
            Error::Config(format!("unknown domain {key:?}; available: {}", names.join(", ")))
        })
}

fn write_trained<T: Real>(t: &Trained<T>, meta: &CheckpointMeta, out: &Path, dir: &Path) -> Result<()> {
    checkpoint::save(out, &t.model, meta)?;
    t.log.write_metrics(&dir.join("metrics.csv"))?;
    t.log.write_batches(&dir.join("batches.csv"))?;
    Ok(())
}

fn train_specific_cmd<T: Real>(d: &DomainDataset, cfg: &TrainConfig, out: &Path, dir: &Path) -> Result<Value> {
    let t = trainer::train_specific::<T>(d, cfg)?;
    let mut meta = CheckpointMeta::new(cfg.backbone.clone(), "specific", Some(d.domain), cfg.seed);
    meta.extra.insert("domain_name".into(), d.name.clone());
    write_trained(&t, &meta, out, dir)?;
    Ok(json!({ "best_epoch": t.best_epoch, "best_val_accuracy": t.best_val_accuracy }))
}

fn train_aggregated_cmd<T: Real>(
    sources: &[&DomainDataset],
    ckpts: &[PathBuf],
    cfg: &TrainConfig,
    out: &Path,
    dir: &Path,
) -> Result<Value> {
    let mut specific: BTreeMap<usize, Backbone<T>> = BTreeMap::new();
    let mut before = BTreeMap::new();
    for p in ckpts {
        let (m, meta) = checkpoint::load::<T>(p)?;
        let d = meta.domain.ok_or_else(|| Error::Config(format!("{} is not a domain-specific checkpoint", p.display())))?;
        before.insert(d, checkpoint::checksum(&m));
        specific.insert(d, m);
    }
    let t = trainer::train_aggregated::<T>(sources, &specific, cfg)?;
    for (d, m) in &specific {
        if checkpoint::checksum(m) != before[d] {
            return Err(Error::Config(format!("frozen model for domain {d} changed during training")));
        }
    }
    let meta = CheckpointMeta::new(cfg.backbone.clone(), "aggregated", None, cfg.seed);
    write_trained(&t, &meta, out, dir)?;
    Ok(json!({
        "best_epoch": t.best_epoch,
        "best_val_accuracy": t.best_val_accuracy,
        "sources": sources.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
        "frozen_checksums": before,
    }))
}

fn eval_cmd<T: Real>(data: &[DomainDataset], methods: &[Method], seeds: &[u64], cfg: &TrainConfig, dir: &Path) -> Result<Value> {
    let r = evalviz::run_protocol::<T>(data, methods, seeds, cfg, Some(&dir.join("training")))?;
    let table = r.table();
    print!("{table}");
    fs::write(dir.join("table.txt"), &table)?;
    r.write_table_csv(&dir.join("table.csv"))?;
    r.write_runs_csv(&dir.join("metrics.csv"))?;
    let audit: Vec<Value> = r
        .runs
        .iter()
        .map(|run| json!({ "held_out": run.held_out, "seed": run.seed, "method": run.method.name(), "trained_on": run.trained_on }))
        .collect();
    Ok(json!({ "audit": audit }))
}

fn expand_images(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in patterns {
        let matches = glob::glob(p).map_err(|e| Error::Config(format!("bad pattern {p:?}: {e}")))?;
        let mut found: Vec<PathBuf> = matches.filter_map(|m| m.ok()).collect();
        if found.is_empty() && Path::new(p).exists() {
            found.push(PathBuf::from(p));
        }
        if found.is_empty() {
            return Err(Error::Config(format!("no images match {p:?}")));
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn visualize_cmd<T: Real>(ckpt: &Path, paths: &[PathBuf], blocks: &[usize], threshold: f64, dir: &Path) -> Result<Value> {
    let (model, _) = checkpoint::load::<T>(ckpt)?;
    let mut images = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let (img, _) = datagen::read_png(p)?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        images.push((format!("{i:04}_{stem}"), img));
    }
    let maps = evalviz::export_attention(&model, &images, blocks, threshold, &dir.join("heatmaps"))?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["image", "block", "min", "max", "argmax_row", "argmax_col"])?;
    for m in &maps {
        let (mut arg, mut hi, mut lo) = ((0, 0), f64::NEG_INFINITY, f64::INFINITY);
        for ((r, c), &v) in m.map.indexed_iter() {
            if v > hi {
                hi = v;
                arg = (r, c);
            }
            lo = lo.min(v);
        }
        w.write_record([m.image.clone(), m.block.to_string(), lo.to_string(), hi.to_string(), arg.0.to_string(), arg.1.to_string()])?;
    }
    w.flush()?;
    Ok(json!({
        "images": paths,
        "blocks": blocks,
        "threshold": threshold,
        "colormap": evalviz::COLORMAP,
        "alpha": evalviz::DEFAULT_ALPHA,
        "normalization": "min-max per map; constant maps keep every pixel",
    }))
}

struct BiasInputs<T> {
    models: Vec<Backbone<T>>,
    domain: String,
    samples: Vec<Sample>,
}

fn bias_inputs<T: Real>(ckpts: &[PathBuf], data: &Path, held_out: Option<&str>, split: Split) -> Result<BiasInputs<T>> {
    let mut models = Vec::new();
    let mut trained = Vec::new();
    for p in ckpts {
        let (m, meta) = checkpoint::load::<T>(p)?;
        trained.extend(meta.domain);
        models.push(m);
    }
    let all = datagen::load_dataset(data)?;
    let domain = match held_out {
        Some(k) => find_domain(&all, k)?,
        None => {
            let unseen: Vec<&DomainDataset> = all.iter().filter(|d| !trained.contains(&d.domain)).collect();
            match unseen.as_slice() {
                [one] => *one,
                _ => return Err(Error::Config("cannot infer the unseen domain; pass --held-out".into())),
            }
        }
    };
    Ok(BiasInputs { models, domain: domain.name.clone(), samples: domain.split(split).to_vec() })
}

fn bias_cmd<T: Real>(
    ckpts: &[PathBuf],
    data: &Path,
    held_out: Option<&str>,
    split: Split,
    control: Option<(&[PathBuf], &Path)>,
    dir: &Path,
) -> Result<Value> {
    let main = bias_inputs::<T>(ckpts, data, held_out, split)?;
    let refs: Vec<&Backbone<T>> = main.models.iter().collect();
    let samples: Vec<&Sample> = main.samples.iter().collect();
    let report = evalviz::bias_report(&refs, &samples)?;

    let control_report = match control {
        Some((c, cdata)) => {
            let ctl = bias_inputs::<T>(c, cdata, Some(&main.domain), split)?;
            if ctl.samples.len() != main.samples.len() {
                return Err(Error::Config("control split has a different number of images".into()));
            }
            let crefs: Vec<&Backbone<T>> = ctl.models.iter().collect();
            Some(evalviz::bias_report(&crefs, &ctl.samples.iter().collect::<Vec<_>>())?)
        }
        None => None,
    };

    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    let mut header = vec!["image", "l2", "cosine"];
    if control_report.is_some() {
        header.extend(["control_l2", "control_cosine"]);
    }
    w.write_record(&header)?;
    for (i, img) in report.images.iter().enumerate() {
        let mut row = vec![i.to_string(), img.l2.to_string(), img.cosine.to_string()];
        if let Some(c) = &control_report {
            row.push(c.images[i].l2.to_string());
            row.push(c.images[i].cosine.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut pairs = csv::Writer::from_path(dir.join("pairs.csv"))?;
    pairs.write_record(["image", "model_a", "model_b", "l2", "cosine"])?;
    for img in &report.images {
        for p in &img.pairs {
            pairs.write_record([img.index.to_string(), p.a.to_string(), p.b.to_string(), p.l2.to_string(), p.cosine.to_string()])?;
        }
    }
    pairs.flush()?;

    println!("domain {} ({} images, {} models): mean L2 {:.5}, mean cosine {:.5}", main.domain, samples.len(), refs.len(), report.mean_l2, report.mean_cosine);
    let mut summary = json!({
        "domain": main.domain,
        "images": samples.len(),
        "models": refs.len(),
        "mean_l2": report.mean_l2,
        "mean_cosine": report.mean_cosine,
    });
    if let Some(c) = &control_report {
        let a: Vec<f64> = report.images.iter().map(|d| d.l2).collect();
        let b: Vec<f64> = c.images.iter().map(|d| d.l2).collect();
        let s = evalviz::sign_test(&a, &b);
        println!("control mean L2 {:.5}; sign test {} wins / {} losses / {} ties, one-sided p = {:.3e}", c.mean_l2, s.wins, s.losses, s.ties, s.p_value);
        summary["control_mean_l2"] = json!(c.mean_l2);
        summary["control_mean_cosine"] = json!(c.mean_cosine);
        summary["sign_test"] = json!({ "wins": s.wins, "losses": s.losses, "ties": s.ties, "p_value": s.p_value });
    }
    Ok(summary)
}

/// Dispatches a generic command body on the configured precision.
macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    let dir = run_dir(&cli)?;
    log::info!("writing run outputs to {}", dir.display());
    match &cli.command {
        Command::Generate { out, seed, domains, per_domain, classes, size, shortcut } => {
            let cfg = BenchmarkConfig {
                seed: *seed,
                domains: *domains,
                per_domain: *per_domain,
                classes: *classes,
                image_size: *size,
                shortcut: *shortcut,
            };
            let data = datagen::generate(&cfg)?;
            fs::create_dir_all(out)?;
            datagen::write_dataset(out, &data, Some(&cfg))?;
            let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
            w.write_record(["domain", "train", "val", "test", "sha256"])?;
            for d in &data {
                w.write_record([d.name.clone(), d.train.len().to_string(), d.val.len().to_string(), d.test.len().to_string(), datagen::fingerprint(d)])?;
            }
            w.flush()?;
            write_run_json(&dir, "generate", json!({ "benchmark": cfg, "out": out }))?;
        }
        Command::TrainSpecific { domain, data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let all = datagen::load_dataset(data)?;
            let d = find_domain(&all, domain)?;
            let info = with_precision!(cfg.precision, train_specific_cmd(d, &cfg, out, &dir))?;
            write_run_json(&dir, "train-specific", json!({ "config": cfg.to_text(), "domain": d.name, "out": out, "result": info }))?;
        }
        Command::TrainAggregated { data, specific, config, out, held_out } => {
            let cfg = load_config(config.as_deref())?;
            let all = datagen::load_dataset(data)?;
            let excluded = held_out.as_deref().map(|k| find_domain(&all, k)).transpose()?.map(|d| d.domain);
            let sources: Vec<&DomainDataset> = all.iter().filter(|d| Some(d.domain) != excluded).collect();
            let info = with_precision!(cfg.precision, train_aggregated_cmd(&sources, specific, &cfg, out, &dir))?;
            write_run_json(&dir, "train-aggregated", json!({ "config": cfg.to_text(), "out": out, "result": info }))?;
        }
        Command::Eval { protocol, data, methods, seeds, config } => {
            if protocol != "lodo" {
                return Err(Error::Config(format!("unknown protocol {protocol:?}; only lodo is supported")));
            }
            let cfg = load_config(config.as_deref())?;
            let methods: Vec<Method> = methods.split(',').map(|m| Method::parse(m.trim())).collect::<Result<_>>()?;
            let seeds: Vec<u64> = (0..*seeds).map(|s| cfg.seed + s).collect();
            let all = datagen::load_dataset(data)?;
            let info = with_precision!(cfg.precision, eval_cmd(&all, &methods, &seeds, &cfg, &dir))?;
            write_run_json(&dir, "eval", json!({ "config": cfg.to_text(), "seeds": seeds, "result": info }))?;
        }
        Command::Visualize { ckpt, images, blocks, threshold } => {
            let paths = expand_images(images)?;
            // checkpoints store f64, so heatmaps use full precision
            let info = visualize_cmd::<f64>(ckpt, &paths, blocks, *threshold, &dir)?;
            write_run_json(&dir, "visualize", info)?;
        }
        Command::BiasReport { specific, data, held_out, split, control_specific, control_data } => {
            let split = Split::parse(split)?;
            let control = match (control_specific.is_empty(), control_data) {
                (true, None) => None,
                (false, Some(d)) => Some((control_specific.as_slice(), d.as_path())),
                _ => return Err(Error::Config("--control-specific and --control-data go together".into())),
            };
            let info = bias_cmd::<f64>(specific, data, held_out.as_deref(), split, control, &dir)?;
            write_run_json(&dir, "bias-report", info)?;
        }
    }
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
