//! Command-line surface: dataset synthesis, training, evaluation,
//! prediction, architecture inspection, and gradient checking.
//!
//! Every command is deterministic given its arguments; the `MDU_SEED`
//! environment variable overrides the configured seed. Failure classes map
//! to disjoint exit codes: 2 configuration/schema, 3 data/format/io,
//! 4 divergence, 1 anything else.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::mdt::{load_case, save_case};
use crate::data::synth::{synth_dataset, SynthSpec};
use crate::data::Case;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::metrics::MetricsReport;
use crate::network::{connectivity_graph, render as render_edges, shape_table, Network, NetworkConfig};
use crate::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use crate::trainer::{evaluate, predict_case, train, CheckpointPolicy, TrainConfig};

#[derive(Parser)]
#[command(
    name = "mdunet",
    version,
    about = "Dense multi-path U-Net for multi-modal binary segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-modal cohort under OUT/train and OUT/val.
    Synth(SynthArgs),
    /// Train a network; writes checkpoint, log.csv and manifest.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint against labelled cases.
    Eval(EvalArgs),
    /// Run inference and write per-slice masks (and optional PGM images).
    Predict(PredictArgs),
    /// Print the layer shape table, connectivity and parameter count.
    Inspect(InspectArgs),
    /// Finite-difference validation of analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory (train/ and val/ subdirectories are created).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub train_cases: usize,
    #[arg(long, default_value_t = 20)]
    pub val_cases: usize,
    /// Square slice size; must be a multiple of 16.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Maximum slices per case.
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 2)]
    pub modalities: usize,
    /// Make the lesion detectable only by combining the first two
    /// modalities (single-modality decoys).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub conjunctive: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run config: {"network": {…}, "train": {…}}.
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory containing train/ and optionally val/.
    #[arg(long)]
    pub data: PathBuf,
    /// Artifact directory (checkpoint.mdtw, log.csv, manifest.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write intermediate checkpoints every N epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of labelled .mdtc cases.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional directory for per_case.csv and summary.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of .mdtc cases (masks not required).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Additionally write one PGM image per slice for quick inspection.
    #[arg(long, default_value_t = false)]
    pub pgm: bool,
}

#[derive(Args)]
pub struct InspectArgs {
    /// Network config JSON (bare, or a run config with a "network" key).
    #[arg(long)]
    pub config: PathBuf,
    /// Optional directory for shape_table.csv and connectivity.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Check one primitive op by name (see `--op help` output on error).
    #[arg(long, conflicts_with = "full_network_small")]
    pub op: Option<String>,
    /// Check the full tiny two-stream network end to end.
    #[arg(long, default_value_t = false)]
    pub full_network_small: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// On-disk run configuration: the network description plus the training
/// protocol. Unknown keys are rejected so typos fail fast.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Everything needed to reproduce a completed run bitwise, serialized next
/// to its artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data_dir: String,
    pub out_dir: String,
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

/// Seed override hook: `MDU_SEED` beats the config file.
fn seed_override() -> Result<Option<u64>> {
    match std::env::var("MDU_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("MDU_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid {what}: {e}")))
}

/// Every `*.mdtc` in `dir`, sorted by file name.
fn list_mdtc(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())))
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mdtc"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every `*.mdtc` case in `dir`; at least one must exist.
fn load_dir(dir: &Path) -> Result<Vec<Case>> {
    let paths = list_mdtc(dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no .mdtc cases found in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_case(p)).collect()
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let seed = seed_override()?.unwrap_or(a.seed);
    let spec = SynthSpec {
        seed,
        num_cases: a.train_cases + a.val_cases,
        size: (a.size, a.size),
        depth: a.depth,
        num_modalities: a.modalities,
        conjunctive: a.conjunctive,
    };
    let cases = synth_dataset(&spec)?;
    let train_dir = a.out.join("train");
    let val_dir = a.out.join("val");
    fs::create_dir_all(&train_dir)?;
    fs::create_dir_all(&val_dir)?;
    for (i, case) in cases.iter().enumerate() {
        let dir = if i < a.train_cases { &train_dir } else { &val_dir };
        save_case(&dir.join(format!("{}.mdtc", case.case_id)), case)?;
    }
    println!(
        "wrote {} training and {} validation cases to {}",
        a.train_cases,
        a.val_cases,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = read_json(&a.config, "run config")?;
    if let Some(seed) = seed_override()? {
        cfg.train.seed = seed;
    }
    cfg.network.validate()?;
    cfg.train.validate()?;

    let train_cases = load_dir(&a.data.join("train"))?;
    let val_dir = a.data.join("val");
    let val_cases = if val_dir.is_dir() && !list_mdtc(&val_dir)?.is_empty() {
        load_dir(&val_dir)?
    } else {
        Vec::new()
    };

    fs::create_dir_all(&a.out)?;
    let manifest = RunManifest {
        network: cfg.network.clone(),
        train: cfg.train.clone(),
        data_dir: a.data.display().to_string(),
        out_dir: a.out.display().to_string(),
        seed: cfg.train.seed,
    };
    fs::write(
        a.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;

    let mut net = Network::<f32>::new(cfg.network.clone(), cfg.train.seed)?;
    let policy = a.checkpoint_every.map(|every| CheckpointPolicy {
        every,
        dir: a.out.clone(),
    });
    let log = train(&mut net, &train_cases, &val_cases, &cfg.train, policy.as_ref())?;

    save_checkpoint(&a.out.join("checkpoint.mdtw"), &net)?;
    fs::write(a.out.join("log.csv"), log.render_csv())?;
    if let Some(last) = log.epochs.last() {
        println!(
            "trained {} epochs; final loss {:.6}{}",
            last.epoch,
            last.train_loss,
            last.val_dsc
                .map(|d| format!(", val DSC {d:.4}"))
                .unwrap_or_default()
        );
    }
    println!("artifacts in {}", a.out.display());
    Ok(())
}

fn render_report(report: &MetricsReport) -> (String, String) {
    (report.render_csv(), report.render_summary())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut net = load_checkpoint(&a.checkpoint)?;
    let cases = load_dir(&a.data)?;
    let report = evaluate(&mut net, &cases)?;
    let (csv, summary) = render_report(&report);
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("per_case.csv"), &csv)?;
        fs::write(out.join("summary.txt"), format!("{summary}\n"))?;
    }
    println!("{summary}");
    Ok(())
}

/// P5 (binary) PGM, foreground white.
fn write_pgm(path: &Path, h: usize, w: usize, mask: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    f.write_all(&bytes)?;
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let mut net = load_checkpoint(&a.checkpoint)?;
    let cases = load_dir(&a.data)?;
    fs::create_dir_all(&a.out)?;
    for case in &cases {
        let mask = predict_case(&mut net, case)?;
        let (d, h, w) = case.shape();
        let dir = a.out.join(&case.case_id);
        fs::create_dir_all(&dir)?;
        let info = serde_json::json!({
            "case_id": case.case_id,
            "shape": [d, h, w],
            "spacing": case.spacing,
        });
        fs::write(dir.join("prediction.json"), info.to_string() + "\n")?;
        for k in 0..d {
            let slice = &mask.data()[k * h * w..(k + 1) * h * w];
            fs::write(dir.join(format!("slice{k:03}.mask")), slice)?;
            if a.pgm {
                write_pgm(&dir.join(format!("slice{k:03}.pgm")), h, w, slice)?;
            }
        }
        println!(
            "{}: {} foreground voxels",
            case.case_id,
            mask.data().iter().filter(|&&v| v != 0).count()
        );
    }
    Ok(())
}

/// Accepts either a bare network config or a full run config.
fn read_network_config(path: &Path) -> Result<NetworkConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid config JSON: {e}")))?;
    let net_value = value.get("network").cloned().unwrap_or(value);
    serde_json::from_value(net_value).map_err(|e| Error::Config(format!("invalid network config: {e}")))
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let config = read_network_config(&a.config)?;
    config.validate()?;
    let table = shape_table(&config)?;
    let edges = connectivity_graph(&config)?;

    // Parameter count via an actual build; spatial size does not affect it,
    // so build at the smallest legal resolution to keep this instant.
    let mut small = config.clone();
    let div = 1usize << small.depth;
    small.input_spatial = (div.max(16), div.max(16));
    let net = Network::<f32>::new(small, 0)?;
    let params = net.params.total_scalars();

    let text = table.render_text();
    println!(
        "streams: {} ({:?} fusion, {:?} modules)",
        config.num_streams(),
        config.effective_fusion(),
        config.module_variant
    );
    println!("{text}");
    println!("parameters: {params}");
    println!("\nconnectivity:");
    print!("{}", render_edges(&edges));

    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("shape_table.csv"), table.render_csv())?;
        fs::write(out.join("connectivity.txt"), render_edges(&edges))?;
        fs::write(out.join("parameters.txt"), format!("{params}\n"))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let seed = seed_override()?.unwrap_or(a.seed);
    let reports = if a.full_network_small {
        vec![gradcheck::check_full_network(seed)?]
    } else if let Some(op) = &a.op {
        vec![gradcheck::check_op(op, seed)?]
    } else {
        let mut all = Vec::new();
        for op in gradcheck::OP_NAMES {
            all.push(gradcheck::check_op(op, seed)?);
        }
        all
    };
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<22} max rel err {:.3e} (threshold {:.0e}, {} instances) {verdict}",
            r.name, r.max_rel_err, r.threshold, r.instances
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "{} check(s) above threshold: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}
