//! The `dmrn` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use dmrn::data::Dataset;
use dmrn::eval::{self, CvResult};
use dmrn::synth::{self, SynthSpec};
use dmrn::{checkpoint, classifier, pairing, trainer};
use serde::Serialize;

pub mod config;
pub mod output;

use config::{ConfigArgs, ResolvedRun, RunConfig};

/// An error with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: String) -> Self {
        Failure { code: 1, message }
    }

    pub fn data(message: String) -> Self {
        Failure { code: 2, message }
    }
}

impl From<dmrn::Error> for Failure {
    fn from(e: dmrn::Error) -> Self {
        let code = if matches!(e, dmrn::Error::Config(_)) {
            1
        } else if e.is_data_error() {
            2
        } else {
            3
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dmrn", version, about = "Multi-scale contrastive twin network: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train on every study and save a checkpoint, the training log and an SVM head.
    Train(RunArgs),
    /// Study-level k-fold cross-validation with the raw-pixel floor baseline.
    Cv(CvArgs),
    /// Cross-validate with all four loss stages and with the final stage only.
    Ablate(CvArgs),
    /// Export final-stage embeddings of every slice.
    Embed(EmbedArgs),
}

#[derive(clap::Args, Debug)]
pub struct GenArgs {
    /// `table1` or `table1-small`.
    #[arg(long, default_value = "table1-small")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub difficulty: Option<f64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Scales study and slice counts of the preset.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Target directory; must not exist or be empty.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct RunArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    pub out_root: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(clap::Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Folds trained concurrently; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(clap::Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "runs")]
    pub out_root: PathBuf,
}

/// Parses `args` (including the program name) and runs the command; returns
/// the run or dataset directory on success.
pub fn run<I, T>(args: I) -> Result<PathBuf, Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        let code = if e.use_stderr() { 1 } else { 0 };
        Failure {
            code,
            message: e.render().to_string(),
        }
    })?;
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Cv(a) => cmd_cv(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Embed(a) => cmd_embed(&a),
    }
}

fn load(data: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load(data)?)
}

fn prepare(command: &str, args: &RunArgs) -> Result<(Dataset, RunConfig, PathBuf), Failure> {
    let dataset = load(&args.data)?;
    let cfg = args.config.resolve(&dataset)?;
    let hash = output::hash_dir(&args.data)?;
    let dir = output::run_dir(&args.out_root, command, cfg.seed)?;
    config::write_resolved(
        &dir,
        &ResolvedRun {
            command,
            data: args.data.display().to_string(),
            data_sha256: hash,
            config: &cfg,
        },
    )?;
    Ok((dataset, cfg, dir))
}

pub fn cmd_gen(args: &GenArgs) -> Result<PathBuf, Failure> {
    let mut spec = SynthSpec::preset(&args.preset).map_err(|e| Failure::usage(e.to_string()))?;
    if let Some(f) = args.scale {
        spec = spec.scaled(f);
    }
    if let Some(d) = args.difficulty {
        spec.difficulty = d;
    }
    if let Some(s) = args.image_size {
        spec.image_size = s;
    }
    spec.seed = args.seed;
    spec.validate().map_err(|e| Failure::usage(e.to_string()))?;
    if let Ok(mut entries) = fs::read_dir(&args.out) {
        if entries.next().is_some() {
            return Err(Failure::data(format!("{} exists and is not empty", args.out.display())));
        }
    }
    let ds = synth::generate(&spec, &args.out)?;
    log::info!(
        "wrote {} studies, {} slices to {}",
        ds.studies.len(),
        ds.num_slices(),
        args.out.display()
    );
    Ok(args.out.clone())
}

pub fn cmd_train(args: &RunArgs) -> Result<PathBuf, Failure> {
    let (dataset, cfg, dir) = prepare("train", args)?;
    let all: Vec<usize> = (0..dataset.studies.len()).collect();
    let samples = dataset.samples(&all);
    let labels: Vec<usize> = samples.iter().map(|s| s.class).collect();
    let ids: Vec<String> = dataset
        .studies
        .iter()
        .flat_map(|s| s.slices.iter().map(|sl| sl.id.clone()))
        .collect();
    let first = pairing::sample_pairs(&labels, dataset.num_classes(), &cfg.train.sampler, 0)?;
    let mut pairs_csv = Vec::new();
    pairing::write_pairs_csv(&first.pairs, &ids, &mut pairs_csv)?;
    output::write(&dir.join("pairs_epoch1.csv"), &pairs_csv)?;

    let (params, log) = trainer::train::<f32>(&samples, dataset.num_classes(), &cfg.train)?;
    checkpoint::save(&params, &dir.join("checkpoint.dmrn"))?;
    let mut log_csv = Vec::new();
    log.write_csv(&mut log_csv)?;
    output::write(&dir.join("training_log.csv"), &log_csv)?;

    let features = classifier::embed_samples(&params, &samples)?;
    let svm = classifier::svm_train(&features, &labels, &cfg.svm)?;
    output::write(
        &dir.join("svm.json"),
        serde_json::to_string_pretty(&svm).expect("serialisable").as_bytes(),
    )?;
    Ok(dir)
}

fn cross_validate(dataset: &Dataset, cfg: &RunConfig, jobs: usize) -> Result<(CvResult, CvResult), Failure> {
    let classes: Vec<usize> = dataset.studies.iter().map(|s| s.class).collect();
    let plan = eval::make_folds(&classes, cfg.folds, cfg.seed)?;
    let cv = eval::cross_validate(dataset, &plan, &cfg.train, &cfg.svm, jobs)?;
    let floor = eval::raw_pixel_baseline(dataset, &plan, &cfg.svm)?;
    Ok((cv, floor))
}

#[derive(Serialize)]
struct CvSummary {
    pooled_accuracy: f64,
    fold_accuracies: Vec<f64>,
    baseline_accuracy: f64,
    studies: u64,
}

fn summary(cv: &CvResult, floor: &CvResult) -> CvSummary {
    CvSummary {
        pooled_accuracy: cv.pooled.accuracy_value(),
        fold_accuracies: cv.folds.iter().map(|f| f.report.accuracy_value()).collect(),
        baseline_accuracy: floor.pooled.accuracy_value(),
        studies: cv.pooled.total,
    }
}

fn write_cv_outputs(dir: &Path, dataset: &Dataset, cv: &CvResult, floor: &CvResult) -> Result<(), Failure> {
    output::write_cv(dir, dataset, cv, true)?;
    output::write_cv(&dir.join("baseline"), dataset, floor, false)?;
    output::write(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary(cv, floor)).expect("serialisable").as_bytes(),
    )
}

pub fn cmd_cv(args: &CvArgs) -> Result<PathBuf, Failure> {
    let (dataset, cfg, dir) = prepare("cv", &args.run)?;
    let (cv, floor) = cross_validate(&dataset, &cfg, args.jobs)?;
    write_cv_outputs(&dir, &dataset, &cv, &floor)?;
    print!("{}", cv.pooled.to_table(&dataset.classes));
    println!("raw-pixel floor accuracy {:.4}", floor.pooled.accuracy_value());
    Ok(dir)
}

pub fn cmd_ablate(args: &CvArgs) -> Result<PathBuf, Failure> {
    let (dataset, cfg, dir) = prepare("ablate", &args.run)?;
    let mut final_only = cfg.clone();
    final_only.train.loss.stages = vec![dmrn::contrastive::NUM_STAGES];
    let mut rows = String::from("variant,stages,terms_per_pair,pooled_accuracy,macro_f1,baseline_accuracy\n");
    for (name, variant) in [("multiscale", &cfg), ("final_stage", &final_only)] {
        let vdir = dir.join(name);
        output::create_dir(&vdir)?;
        output::write(
            &vdir.join("config.json"),
            serde_json::to_string_pretty(variant).expect("serialisable").as_bytes(),
        )?;
        let (cv, floor) = cross_validate(&dataset, variant, args.jobs)?;
        write_cv_outputs(&vdir, &dataset, &cv, &floor)?;
        let stages: Vec<String> = variant.train.loss.stages.iter().map(|s| s.to_string()).collect();
        rows.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            stages.join(" "),
            stages.len(),
            cv.pooled.accuracy_value(),
            cv.pooled.macro_avg.f1.map_or_else(String::new, |v| v.to_string()),
            floor.pooled.accuracy_value()
        ));
        println!("{name}: pooled accuracy {:.4}", cv.pooled.accuracy_value());
    }
    output::write(&dir.join("comparison.csv"), rows.as_bytes())?;
    Ok(dir)
}

pub fn cmd_embed(args: &EmbedArgs) -> Result<PathBuf, Failure> {
    let dataset = load(&args.data)?;
    let params = checkpoint::restore::<f32>(&args.checkpoint)?;
    let model = params.config();
    let [channels, size, _] = dataset.image_shape;
    if model.in_channels != channels || model.input_size != size {
        return Err(Failure::data(format!(
            "checkpoint expects {}x{size0}x{size0} inputs, dataset has {channels}x{size}x{size}",
            model.in_channels,
            size0 = model.input_size
        )));
    }
    let hash = output::hash_dir(&args.data)?;
    let dir = output::run_dir(&args.out_root, "embed", 0)?;
    #[derive(Serialize)]
    struct EmbedRun {
        command: &'static str,
        data: String,
        data_sha256: String,
        checkpoint: String,
    }
    output::write(
        &dir.join("config.json"),
        serde_json::to_string_pretty(&EmbedRun {
            command: "embed",
            data: args.data.display().to_string(),
            data_sha256: hash,
            checkpoint: args.checkpoint.display().to_string(),
        })
        .expect("serialisable")
        .as_bytes(),
    )?;
    let all: Vec<usize> = (0..dataset.studies.len()).collect();
    let samples = dataset.samples(&all);
    let features = classifier::embed_samples(&params, &samples)?;
    let rows: Vec<(String, String, usize)> = dataset
        .studies
        .iter()
        .flat_map(|s| s.slices.iter().map(move |sl| (sl.id.clone(), s.id.clone(), s.class)))
        .collect();
    let mut csv = Vec::new();
    classifier::write_embeddings_csv(&rows, &features, &mut csv)?;
    output::write(&dir.join("embeddings.csv"), &csv)?;
    Ok(dir)
}
