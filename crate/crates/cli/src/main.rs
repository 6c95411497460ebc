//! `cmems`: toy data generation, copy-paste synthesis, dual-network training,
//! evaluation, ablations and plots.
//!
//! Exit status is 0 on success, 1 for invalid input (unknown flags, bad
//! configuration, unreadable data) and 2 for failures at run time.

mod config;
mod plot;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cmems::datamodel::manifest::{load_dataset, save_image, save_mask, DatasetManifest, LoadedDataset};
use cmems::evalmetrics::{evaluate_dataset, NetworkSelector, Report};
use cmems::synthesis::{build_synthetic_dataset, SynthesisConfig};
use cmems::toybench::{generate_toy, run_ablation, AblationSetup, AblationTable, ToySpec};
use cmems::trainer::{checkpoint, fit, write_json, MetricRecord, TrainData, TrainState};

use config::{invalid, read_or_default, relative_to, AblateConfig, Invalid, RunConfig};

const SNAPSHOT: &str = "resolved_config.json";

#[derive(Parser, Debug)]
#[command(name = "cmems", version, about = "Single-exemplar semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (JSON, or TOML with a .toml extension)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, env = "CMEMS_OUT_DIR", default_value = "cmems-out")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural toy dataset and its manifest
    Toygen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export copy-paste composites built from a dataset manifest
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the two networks
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest (overrides the config file)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iter: Option<u64>,
        /// Resume from this checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Network scored during validation: 1, 2 or avg
        #[arg(long)]
        network: Option<NetworkSelector>,
    },
    /// Score a checkpoint on a manifest's test volumes; prints the report as JSON
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest
        #[arg(long)]
        data: PathBuf,
        /// Network that predicts: 1, 2 or avg
        #[arg(long, default_value = "1")]
        network: NetworkSelector,
    },
    /// Run the toy ablation and write CSV and JSON tables
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Toy dataset seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iter: Option<u64>,
    },
    /// Render figures from a run or ablation directory
    Plot {
        /// Directory holding metrics.jsonl, report.json or ablation.json
        input: PathBuf,
        /// Where figures go; defaults to the input directory
        #[arg(long, env = "CMEMS_OUT_DIR")]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<cmems::Error>() {
            return if err.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Toygen { common, seed } => toygen(common, seed),
        Command::Synthesize { common, data, seed } => synthesize(common, &data, seed),
        Command::Train {
            common,
            data,
            seed,
            max_iter,
            checkpoint,
            network,
        } => train(common, data, seed, max_iter, checkpoint, network),
        Command::Evaluate {
            common,
            checkpoint,
            data,
            network,
        } => evaluate(common, &checkpoint, &data, network),
        Command::Ablate { common, seed, max_iter } => ablate(common, seed, max_iter),
        Command::Plot { input, out_dir } => plot_dir(&input, out_dir.as_deref().unwrap_or(&input)),
    }
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn snapshot<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    write_json(&dir.join(SNAPSHOT), value)?;
    Ok(())
}

fn load_manifest(path: &Path) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::from_file(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    Ok(load_dataset(root, &manifest)?)
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn toygen(common: Common, seed: Option<u64>) -> Result<()> {
    let mut spec: ToySpec = read_or_default(common.config.as_deref())?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    prepare_out_dir(&common.out_dir)?;
    snapshot(&common.out_dir, &spec)?;
    let manifest = generate_toy(&spec, &common.out_dir)?;
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct SyntheticItem {
    image: String,
    label: String,
}

fn synthesize(common: Common, data: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: SynthesisConfig = read_or_default(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = load_manifest(data)?;
    let out = &common.out_dir;
    prepare_out_dir(&out.join("synthetic"))?;
    snapshot(out, &cfg)?;
    let synthetic = build_synthetic_dataset(&ds.exemplar, &ds.unlabeled, &cfg)?;
    let mut index = Vec::with_capacity(synthetic.len());
    for (i, (img, mask)) in synthetic.items().iter().enumerate() {
        let item = SyntheticItem {
            image: format!("synthetic/s{i:04}.npy"),
            label: format!("synthetic/s{i:04}_label.npy"),
        };
        save_image(&out.join(&item.image), img)?;
        save_mask(&out.join(&item.label), mask)?;
        index.push(item);
    }
    write_json(&out.join("synthetic.json"), &index)?;
    log::info!("wrote {} composites to {}", index.len(), out.display());
    Ok(())
}

fn train(
    common: Common,
    data: Option<PathBuf>,
    seed: Option<u64>,
    max_iter: Option<u64>,
    resume: Option<PathBuf>,
    network: Option<NetworkSelector>,
) -> Result<()> {
    let cfg_path = common.config.as_deref();
    let mut cfg: RunConfig = read_or_default(cfg_path)?;
    let manifest = match (data, &cfg.data) {
        (Some(d), _) => d,
        (None, Some(d)) => relative_to(cfg_path, d),
        (None, None) => return Err(invalid("no dataset: pass --data or set \"data\" in the config")),
    };
    if !manifest.is_file() {
        return Err(invalid(format!("dataset manifest {} does not exist", manifest.display())));
    }
    cfg.data = Some(absolute(&manifest));
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(m) = max_iter {
        cfg.train.max_iter = m;
    }
    if let Some(n) = network {
        cfg.train.eval_network = n;
    }
    cfg.train.validate()?;

    let ds = load_manifest(&manifest)?;
    let synthetic = if cfg.train.use_synthetic {
        Some(build_synthetic_dataset(&ds.exemplar, &ds.unlabeled, &cfg.synthesis)?)
    } else {
        None
    };
    let data = TrainData {
        exemplar: ds.exemplar,
        synthetic,
        unlabeled: ds.unlabeled,
        validation: ds.test_volumes,
        class_names: ds.class_names[1..].to_vec(),
    };
    let mut state = match &resume {
        Some(p) => checkpoint::resume(p, &cfg.train)?,
        None => TrainState::new(&cfg.train, data.num_classes())?,
    };
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    snapshot(out, &cfg)?;
    log::info!(
        "training from iteration {} to {} ({} synthetic composites)",
        state.iteration,
        cfg.train.max_iter,
        data.synthetic.as_ref().map_or(0, |s| s.len())
    );
    let outcome = fit(&mut state, &data, &cfg.train, Some(out))?;
    write_json(&out.join("evals.json"), &outcome.evals)?;
    if !data.validation.is_empty() {
        let report = evaluate_dataset(&state.nets, &data.validation, cfg.train.eval_network, &data.class_names)?;
        write_json(&out.join("report.json"), &report.to_json())?;
        print!("{}", report.to_table());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateConfig<'a> {
    checkpoint: PathBuf,
    data: PathBuf,
    network: NetworkSelector,
    iteration: u64,
    train: &'a cmems::trainer::TrainConfig,
}

fn evaluate(common: Common, ckpt: &Path, data: &Path, network: NetworkSelector) -> Result<()> {
    let (meta, state) = checkpoint::load(ckpt)?;
    let ds = load_manifest(data)?;
    if ds.num_classes != meta.num_classes {
        return Err(invalid(format!(
            "checkpoint predicts {} classes, dataset has {}",
            meta.num_classes, ds.num_classes
        )));
    }
    if ds.test_volumes.is_empty() {
        return Err(invalid(format!("{} lists no test volumes", data.display())));
    }
    let report: Report = evaluate_dataset(&state.nets, &ds.test_volumes, network, &ds.class_names[1..])?;
    let json = report.to_json();
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    snapshot(
        out,
        &EvaluateConfig {
            checkpoint: absolute(ckpt),
            data: absolute(data),
            network,
            iteration: meta.iteration,
            train: &meta.config,
        },
    )?;
    write_json(&out.join("report.json"), &json)?;
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

fn ablate(common: Common, seed: Option<u64>, max_iter: Option<u64>) -> Result<()> {
    let mut cfg: AblateConfig = read_or_default(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.toy.seed = s;
    }
    if let Some(m) = max_iter {
        cfg.train.max_iter = m;
    }
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(invalid("ablation needs at least one variant and one seed"));
    }
    cfg.train.validate()?;
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    snapshot(out, &cfg)?;
    let setup = AblationSetup::new(&cfg.toy, &cfg.synthesis, cfg.train.clone())?;
    let table = run_ablation(&setup, &cfg.variants, &cfg.seeds, &mut |row| {
        log::info!(
            "{} seed {}: DSC {:.4} ({:.0} s)",
            row.variant.name(),
            row.seed,
            row.dsc_avg,
            row.seconds
        );
    })?;
    fs::write(out.join("ablation.csv"), table.to_csv())?;
    write_json(&out.join("ablation.json"), &table.to_json())?;
    for &v in &cfg.variants {
        if let Some(m) = table.mean_dsc(v) {
            println!("{:<28} {m:.4}", v.name());
        }
    }
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn plot_dir(input: &Path, out: &Path) -> Result<()> {
    if !input.is_dir() {
        return Err(invalid(format!("{} is not a directory", input.display())));
    }
    prepare_out_dir(out)?;
    let mut written = Vec::new();

    let metrics = input.join("metrics.jsonl");
    if metrics.is_file() {
        let recs = read_metrics(&metrics)?;
        if !recs.is_empty() {
            let p = out.join("loss_curves.svg");
            plot::loss_curves(&recs, &p)?;
            written.push(p);
        }
    }

    let report = input.join("report.json");
    if report.is_file() {
        let json = read_json(&report)?;
        let per_class = json["per_class"]
            .as_object()
            .ok_or_else(|| invalid(format!("{} has no per_class table", report.display())))?;
        let labels: Vec<String> = per_class.keys().cloned().collect();
        let values: Vec<f64> = per_class.values().map(|c| c["dsc"].as_f64().unwrap_or(0.0)).collect();
        let p = out.join("dsc_bars.svg");
        plot::dsc_bars("Per-class DSC", &labels, &values, &p)?;
        written.push(p);
    }

    let ablation = input.join("ablation.json");
    if ablation.is_file() {
        let json = read_json(&ablation)?;
        let table = AblationTable {
            class_names: serde_json::from_value(json["class_names"].clone()).unwrap_or_default(),
            rows: serde_json::from_value(json["runs"].clone())
                .map_err(|e| invalid(format!("{}: {e}", ablation.display())))?,
        };
        let variants = table.variants();
        let labels: Vec<String> = variants.iter().map(|v| v.name().to_string()).collect();
        let values: Vec<f64> = variants.iter().map(|&v| table.mean_dsc(v).unwrap_or(0.0)).collect();
        let p = out.join("ablation_dsc.svg");
        plot::dsc_bars("Mean test DSC per configuration", &labels, &values, &p)?;
        written.push(p);
    }

    if written.is_empty() {
        return Err(invalid(format!(
            "{} holds none of metrics.jsonl, report.json, ablation.json",
            input.display()
        )));
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
