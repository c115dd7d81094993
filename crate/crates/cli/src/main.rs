use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hnf_core::data::{load_dataset, load_manifest, preprocess, write_nifti, NiftiData, PreprocessParams};
use hnf_core::engine::{infer_study, train, Ensemble, InferConfig, NetPredictor, Predictor, RunConfig, TrainConfig, TrainOptions};
use hnf_core::metrics::{evaluate_predictions, prediction_name};
use hnf_core::tensor::load_checkpoint;

#[derive(Parser)]
#[command(name = "hnf", version, about = "Multi-scale 3D brain tumor segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics.csv and checkpoints to the output directory.
    Train {
        /// JSON with optional `network`, `train` and `infer` sections.
        #[arg(long)]
        config: PathBuf,
        /// Manifest of labeled studies or a synthetic dataset spec.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many epochs (the schedule still spans all epochs).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Segment every study of a dataset, writing `<id>_seg.nii.gz`.
    Infer {
        /// Model checkpoint; repeat to average an ensemble.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the inference settings stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predicted segmentations against a labeled manifest.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    Ok(RunConfig::from_json(&text)?)
}

fn run_train(config: &Path, data: &Path, out: &Path, stop_after: Option<usize>) -> Result<()> {
    let mut cfg = read_config(config)?;
    cfg.train.apply_env()?;
    cfg.validate()?;
    let studies = load_dataset(data)?.studies()?;
    eprintln!("training on {} studies, seed {}", studies.len(), cfg.train.seed);
    let opts = TrainOptions { out_dir: Some(out.to_path_buf()), stop_after_epochs: stop_after, verbose: true };
    let outcome = train(&studies, &cfg, &opts)?;
    if let Some(last) = outcome.log.last() {
        eprintln!("final epoch {}: loss {:.6}", last.epoch, last.loss);
    }
    Ok(())
}

/// Preprocessing settings recorded at training time, or the defaults.
fn stored_preprocess(path: &Path) -> Result<PreprocessParams> {
    let ckpt = load_checkpoint(path)?;
    Ok(match ckpt.config.get("train") {
        Some(t) => serde_json::from_value::<TrainConfig>(t.clone())
            .with_context(|| format!("training section of {}", path.display()))?
            .preprocess,
        None => PreprocessParams::default(),
    })
}

fn run_infer(checkpoints: &[PathBuf], data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut members: Vec<Box<dyn Predictor>> = Vec::new();
    let mut stored: Option<InferConfig> = None;
    for path in checkpoints {
        let (p, infer) = NetPredictor::load(path).with_context(|| format!("loading {}", path.display()))?;
        stored = stored.or(infer);
        members.push(Box::new(p));
    }
    let infer = match config {
        Some(path) => read_config(path)?.infer,
        None => stored.unwrap_or_default(),
    };
    infer.validate()?;
    let pre = stored_preprocess(&checkpoints[0])?;
    let predictor: Box<dyn Predictor> = if members.len() == 1 { members.remove(0) } else { Box::new(Ensemble { members }) };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let studies = load_dataset(data)?.studies()?;
    for study in &studies {
        let seg = infer_study(predictor.as_ref(), &preprocess(study, &pre)?, &infer)?;
        let path = out.join(prediction_name(&study.id));
        write_nifti(&path, NiftiData::U8(seg.volume()), study.spacing)?;
        eprintln!("{}: wrote {}", study.id, path.display());
    }
    Ok(())
}

fn run_eval(pred: &Path, gt: &Path, report: &Path) -> Result<()> {
    let entries = load_manifest(gt)?;
    let rep = evaluate_predictions(pred, &entries)?;
    std::fs::write(report, rep.to_csv()).with_context(|| format!("writing {}", report.display()))?;
    eprintln!(
        "{} cases, mean dice et/tc/wt {:.4}/{:.4}/{:.4}",
        rep.rows.len(),
        rep.mean[0],
        rep.mean[1],
        rep.mean[2]
    );
    Ok(())
}

fn run_selftest() -> Result<()> {
    let mut failed = 0;
    for check in hnf_core::selftest::run_all() {
        match check.outcome {
            Ok(detail) => println!("PASS  {}: {detail}", check.name),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {}: {reason}", check.name);
            }
        }
    }
    if failed > 0 {
        bail!("{failed} self-test check(s) failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, data, out, stop_after } => run_train(config, data, out, *stop_after),
        Command::Infer { checkpoint, data, out, config } => run_infer(checkpoint, data, out, config.as_deref()),
        Command::Eval { pred, gt, report } => run_eval(pred, gt, report),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
