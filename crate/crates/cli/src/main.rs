use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use clipforge_core::data::{generate_corpus, write_corpus, CorpusSpec, Dataset, Manifest};
use clipforge_core::eval::{evaluate, EvalSet};
use clipforge_core::model::ClipModel;
use clipforge_core::train::{ablate, bench, AblationData, Checkpoint, TrainConfig, Trainer};

/// Selects where run directories are created; defaults to `runs`.
const RUN_ROOT_ENV: &str = "CLIPFORGE_RUN_ROOT";
const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Parser, Debug)]
#[command(name = "clipforge", version, about = "Contrastive image-text training at desk scale")]
struct Cli {
    /// Overrides the seed of the config or corpus spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic image-caption corpus.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// `key=value` overrides applied after the file is parsed.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Zero-shot evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// One class name per line, in class-id order.
        #[arg(long)]
        classes: PathBuf,
        /// One prompt template per line, `{}` marks the class name.
        #[arg(long)]
        templates: PathBuf,
        /// Data manifest; defaults to the one the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Time masked against unmasked training steps.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Steps per arm including warm-up.
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the four-arm ablation and write a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<kind>-NNNN` with the first free number.
fn new_run_dir(kind: &str) -> Result<PathBuf> {
    let root = run_root();
    fs::create_dir_all(&root).with_context(|| format!("creating run root {}", root.display()))?;
    for n in 1.. {
        let dir = root.join(format!("{kind}-{n:04}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!("run numbers are unbounded")
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?
        .with_overrides(overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(dir: &Path, cfg: &TrainConfig, source: &Path, overrides: &[String], seed: Option<u64>) -> Result<()> {
    let mut text = format!("# config: {}\n", source.display());
    for o in overrides {
        text.push_str(&format!("# override: {o}\n"));
    }
    if let Some(s) = seed {
        text.push_str(&format!("# override: seed={s}\n"));
    }
    text.push_str(&cfg.to_toml());
    write(&dir.join(RESOLVED_CONFIG), text)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading data manifest {}", path.display()))
}

fn train_dataset(m: &Manifest) -> Result<Arc<Dataset>> {
    Ok(Arc::new(Dataset::new(m.read_split("train")?, m.image_size, m.channels)?))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn gen_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading corpus spec {}", spec_path.display()))?;
    let mut spec = CorpusSpec::from_toml(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = generate_corpus(&spec)?;
    write_corpus(&corpus, &spec, out)?;
    let dir = new_run_dir("gen-data")?;
    write(
        &dir.join(RESOLVED_CONFIG),
        toml::to_string(&spec).context("serializing corpus spec")?,
    )?;
    println!(
        "wrote {} train / {} holdout records to {} (run {})",
        corpus.train.len(),
        corpus.holdout.len(),
        out.display(),
        dir.display()
    );
    Ok(())
}

fn train(config: &Path, resume: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, overrides, seed)?;
    let manifest = load_manifest(&cfg.data_manifest)?;
    let ds = train_dataset(&manifest)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            Trainer::resume(cfg.clone(), ds, &ck)?
        }
        None => Trainer::new(cfg.clone(), ds)?,
    };
    let dir = new_run_dir("train")?;
    write_resolved(&dir, &cfg, config, overrides, seed)?;
    if let Some(r) = &trainer.init_report {
        write(&dir.join("init_report.json"), serde_json::to_string_pretty(r)?)?;
    }
    let records = trainer.run(Some(&dir))?;
    match records.last() {
        Some(last) => println!(
            "step {} loss {:.4} logit scale {:.2}; run {}",
            last.step,
            last.loss,
            last.logit_scale,
            dir.display()
        ),
        None => println!("nothing to do; run {}", dir.display()),
    }
    Ok(())
}

fn eval(ckpt: &Path, classes: &Path, templates: &Path, data: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let manifest_path = match data {
        Some(p) => p.to_path_buf(),
        None => {
            let text = ck
                .meta
                .train_config
                .as_deref()
                .context("checkpoint has no training config; pass --data")?;
            TrainConfig::from_toml(text)?.data_manifest
        }
    };
    let manifest = load_manifest(&manifest_path)?;
    let mut records = manifest.read_split("holdout")?;
    if records.is_empty() {
        records = manifest.read_split("train")?;
    }
    let names = read_lines(classes)?;
    let prompts = read_lines(templates)?;
    let model = ClipModel::from_params(ck.meta.model.clone(), ck.params)?;
    let set = EvalSet::from_records(&records, manifest.image_size, manifest.channels)?;
    let report = evaluate(&model, &set, &names, &prompts, seed.unwrap_or(ck.meta.seed))?;
    let dir = new_run_dir("eval")?;
    write(
        &dir.join(RESOLVED_CONFIG),
        format!(
            "checkpoint = {:?}\nclasses = {:?}\ntemplates = {:?}\ndata_manifest = {:?}\n",
            ckpt.display().to_string(),
            classes.display().to_string(),
            templates.display().to_string(),
            manifest_path.display().to_string()
        ),
    )?;
    report.write(&dir)?;
    let reference = &report.benchmarks[&report.reference];
    println!(
        "{} top-1 {:.1}; averaged {:.1}; delta {:.1}; run {}",
        report.reference,
        reference.top1,
        report.averaged_accuracy,
        report.delta_gap,
        dir.display()
    );
    Ok(())
}

fn run_bench(config: &Path, steps: usize, overrides: &[String], seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, overrides, seed)?;
    let ds = train_dataset(&load_manifest(&cfg.data_manifest)?)?;
    let dir = new_run_dir("bench")?;
    write_resolved(&dir, &cfg, config, overrides, seed)?;
    let r = bench(&cfg, ds, steps)?;
    write(&dir.join("bench.json"), serde_json::to_string_pretty(&r)?)?;
    println!(
        "masked {:.1} ms/step, unmasked {:.1} ms/step, ratio {:.3}; {:.0} s per 1M samples masked; peak tensor bytes {} vs {}; run {}",
        r.masked.median_step_ms,
        r.unmasked.median_step_ms,
        r.time_ratio,
        r.masked.secs_per_million_samples,
        r.masked.peak_tensor_bytes,
        r.unmasked.peak_tensor_bytes,
        dir.display()
    );
    Ok(())
}

fn run_ablate(config: &Path, overrides: &[String], seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, overrides, seed)?;
    let manifest = load_manifest(&cfg.data_manifest)?;
    let holdout = manifest.read_split("holdout")?;
    if holdout.is_empty() {
        bail!("ablation needs a holdout split; set holdout_per_class in the corpus spec");
    }
    let data = AblationData {
        train: train_dataset(&manifest)?,
        holdout,
        class_names: manifest.class_names.clone(),
        templates: read_lines(&manifest.root.join("templates.txt"))?,
    };
    let dir = new_run_dir("ablate")?;
    write_resolved(&dir, &cfg, config, overrides, seed)?;
    let report = ablate(&cfg, &data, Some(&dir))?;
    print!("{}", report.table());
    println!("run {}", dir.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData { spec, out } => gen_data(spec, out, cli.seed),
        Command::Train {
            config,
            resume,
            overrides,
        } => train(config, resume.as_deref(), overrides, cli.seed),
        Command::Eval {
            ckpt,
            classes,
            templates,
            data,
        } => eval(ckpt, classes, templates, data.as_deref(), cli.seed),
        Command::Bench {
            config,
            steps,
            overrides,
        } => run_bench(config, *steps, overrides, cli.seed),
        Command::Ablate { config, overrides } => run_ablate(config, overrides, cli.seed),
    }
}
