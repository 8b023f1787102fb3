use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dyadsync::baselines::{self, BaselineMethod, HingeConfig};
use dyadsync::checkpoint::{self, SavedModel};
use dyadsync::eval::{predictions_from_csv, predictions_to_csv, Branch, ScoreBinning};
use dyadsync::pipeline::{self, ModelKind, RunConfig};
use dyadsync::pose::{load_dataset, write_keypoint_file, ManifestEntry, SkeletonSequence, TARGET_FRAMES};
use dyadsync::similarity::{compute_csm, compute_ssm, csm_input, CSM_INPUT_SIDE};
use dyadsync::sttf::{HeadKind, ModelConfig};
use dyadsync::synth::{generate_dataset, SynthConfig};
use dyadsync::{Error, ErrorKind, Result};

/// Dyadic movement-synchrony pipeline.
#[derive(Parser)]
#[command(name = "dyadsync", version, about)]
struct Cli {
    /// Seed for every stochastic stage; overrides config files (default 0).
    #[arg(long, global = true, env = "DYADSYNC_SEED")]
    seed: Option<u64>,
    /// Worker threads for per-sequence stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// More log output; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset of keypoint files plus a manifest.
    Synth(SynthArgs),
    /// Filter, resample and normalize keypoint files into a new dataset.
    Preprocess(PreprocessArgs),
    /// Write cross- or self-similarity matrices for every clip.
    Csm(CsmArgs),
    /// Train and evaluate a classical baseline with a linear classifier.
    Baseline(BaselineArgs),
    /// Train a TFN or CSM branch model.
    Train(TrainArgs),
    /// Evaluate and fuse one or more branches.
    Eval(EvalArgs),
    /// Check transformer gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Export attention maps of a trained TFN for one clip.
    ExportAttn(ExportAttnArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for keypoint files and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Clips generated per class.
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    /// Generator config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Label clips with synchrony scores instead of classes.
    #[arg(long)]
    scores: bool,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for normalized keypoint files and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Frames per clip after resampling.
    #[arg(long, default_value_t = TARGET_FRAMES)]
    frames: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatrixChoice {
    /// Raw cross-similarity matrix, f×f.
    Csm,
    /// Self-similarity of person a.
    SsmA,
    /// Self-similarity of person b.
    SsmB,
    /// Normalized CSM resized to the classifier input side.
    Input,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Bin,
    Csv,
    Pgm,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Bin => "bin",
            Format::Csv => "csv",
            Format::Pgm => "pgm",
        }
    }
}

#[derive(Args)]
struct CsmArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csm")]
    kind: MatrixChoice,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long, default_value_t = TARGET_FRAMES)]
    frames: usize,
}

#[derive(Args)]
struct BaselineArgs {
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    /// Test manifest; metrics are written when given.
    #[arg(long)]
    test: Option<PathBuf>,
    /// dtw, corr2d or crossrec.
    #[arg(long)]
    method: BaselineMethod,
    /// Recurrence radius for crossrec (default: 10% of each matrix's largest distance).
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TARGET_FRAMES)]
    frames: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON (model kind, model configs, training config).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt, history.csv and run_config.json.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the model kind from the config.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Overrides the epoch count from the config.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint of a branch to fuse; repeatable.
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    /// Predictions CSV of an external branch.
    #[arg(long)]
    external: Option<PathBuf>,
    /// Test manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for predictions.csv, metrics.json and metrics.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check a regression head instead of the classifier.
    #[arg(long)]
    regress: bool,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct ExportAttnArgs {
    /// TFN checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Manifest position of the clip to export.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "pgm")]
    format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, tag) = match e.kind() {
                ErrorKind::Config => (2, "config error"),
                ErrorKind::Data => (3, "data error"),
                ErrorKind::Internal => (4, "internal error"),
            };
            eprintln!("{tag}: {e}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed.unwrap_or(0)),
        Command::Preprocess(a) => preprocess(a),
        Command::Csm(a) => csm(a),
        Command::Baseline(a) => baseline(a),
        Command::Train(a) => train(a, cli.seed),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a, cli.seed.unwrap_or(0)),
        Command::ExportAttn(a) => export_attn(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    cfg.seed = seed;
    cfg.score_labels |= a.scores;
    let manifest = generate_dataset(&cfg, a.per_class, &a.out)?;
    log::info!("wrote {} clips to {}", manifest.len(), a.out.display());
    Ok(())
}

fn file_stem(id: &str) -> String {
    Path::new(id)
        .file_stem()
        .map_or_else(|| id.to_string(), |s| s.to_string_lossy().into_owned())
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let seqs = load_dataset(&a.data, a.frames)?;
    mkdir(&a.out)?;
    let mut manifest = Vec::with_capacity(seqs.len());
    for s in &seqs {
        let name = format!("{}.json", file_stem(&s.source_id));
        write_keypoint_file(&a.out.join(&name), &s.to_frames())?;
        let (class, score) = match s.label {
            Some(dyadsync::pose::Label::Class(c)) => (Some(c), None),
            Some(dyadsync::pose::Label::Score(v)) => (None, Some(v)),
            None => (None, None),
        };
        manifest.push(ManifestEntry {
            path: name,
            label_class: class,
            label_score: score,
        });
    }
    write_json(&a.out.join("manifest.json"), &manifest)
}

fn csm(a: &CsmArgs) -> Result<()> {
    let seqs = load_dataset(&a.data, a.frames)?;
    mkdir(&a.out)?;
    for s in &seqs {
        let m = match a.kind {
            MatrixChoice::Csm => compute_csm(s)?,
            MatrixChoice::SsmA => compute_ssm(s, 0)?,
            MatrixChoice::SsmB => compute_ssm(s, 1)?,
            MatrixChoice::Input => csm_input(s, CSM_INPUT_SIDE)?,
        };
        m.write(&a.out.join(format!("{}.{}", file_stem(&s.source_id), a.format.ext())))?;
    }
    Ok(())
}

fn class_labels(seqs: &[SkeletonSequence]) -> Result<Vec<usize>> {
    seqs.iter()
        .map(|s| pipeline::target_for(s, HeadKind::Classify).map(|t| match t {
            dyadsync::training::Target::Class(c) => c,
            dyadsync::training::Target::Score(_) => unreachable!("classification target"),
        }))
        .collect()
}

fn baseline(a: &BaselineArgs) -> Result<()> {
    use rayon::prelude::*;
    let extract = |seqs: &[SkeletonSequence]| -> Result<Vec<_>> {
        seqs.par_iter()
            .map(|s| baselines::extract_features(a.method, s, a.eps))
            .collect()
    };
    let train = load_dataset(&a.data, a.frames)?;
    let feats = extract(&train)?;
    mkdir(&a.out)?;
    write(&a.out.join("features_train.csv"), baselines::features_to_csv(&feats))?;
    let clf = baselines::train_linear_hinge(&feats, &class_labels(&train)?, 3, &HingeConfig::default())?;
    write_json(&a.out.join("classifier.json"), &clf)?;
    if let Some(test_path) = &a.test {
        let test = load_dataset(test_path, a.frames)?;
        let tf = extract(&test)?;
        write(&a.out.join("features_test.csv"), baselines::features_to_csv(&tf))?;
        let preds = tf
            .iter()
            .map(|f| baselines::predict_linear(&clf, f))
            .collect::<Result<Vec<_>>>()?;
        let cm = dyadsync::eval::confusion_normalized(&class_labels(&test)?, &preds)?;
        let report = dyadsync::eval::compute_metrics(&cm, None)?;
        write_json(&a.out.join("metrics.json"), &report)?;
        write(&a.out.join("metrics.txt"), report.to_table())?;
        print!("{}", report.to_table());
    }
    Ok(())
}

fn train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut run: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(m) = a.model {
        run.model = m;
    }
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    let frames = match run.model {
        ModelKind::Tfn => run.tfn.frames,
        ModelKind::Csm => TARGET_FRAMES,
    };
    let seqs = load_dataset(&a.data, frames)?;
    let (model, history) = pipeline::train_model(&run, &seqs)?;
    mkdir(&a.out)?;
    checkpoint::save(&a.out.join("model.ckpt"), &model)?;
    write(&a.out.join("history.csv"), history.to_csv())?;
    write_json(&a.out.join("run_config.json"), &run)?;
    log::info!("best epoch {}", history.best_epoch);
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let models = a
        .ckpts
        .iter()
        .map(|p| checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let frames = models
        .iter()
        .find_map(|m| match m {
            SavedModel::Tfn(t) => Some(t.config.frames),
            SavedModel::Csm(_) => None,
        })
        .unwrap_or(TARGET_FRAMES);
    let seqs = load_dataset(&a.data, frames)?;
    let mut branches = models
        .iter()
        .map(|m| pipeline::predict_branch(m, &seqs))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = &a.external {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let mut ext = predictions_from_csv(&text)?;
        ext.iter_mut().for_each(|e| e.branch = Branch::External);
        branches.push(ext);
    }
    let (_, report) = pipeline::evaluate(&branches, &seqs, &ScoreBinning::default())?;
    mkdir(&a.out)?;
    let all: Vec<_> = branches.concat();
    write(&a.out.join("predictions.csv"), predictions_to_csv(&all))?;
    write_json(&a.out.join("metrics.json"), &report)?;
    write(&a.out.join("metrics.txt"), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> Result<()> {
    let cfg = ModelConfig {
        frames: 4,
        joints: 2,
        joint_dim: 8,
        temporal_dim: 32,
        layers: 1,
        heads: 2,
        dropout: 0.0,
        head: if a.regress { HeadKind::Regress } else { HeadKind::Classify },
    };
    let report = pipeline::transformer_gradcheck(&cfg, seed, a.eps)?;
    println!(
        "max relative error {:.3e} at {} over {} evaluations",
        report.max_rel_error, report.worst_param, report.evaluations
    );
    if report.max_rel_error >= a.tolerance {
        return Err(Error::Contract(format!(
            "gradient error {:.3e} exceeds {:.1e}",
            report.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}

fn export_attn(a: &ExportAttnArgs) -> Result<()> {
    let SavedModel::Tfn(model) = checkpoint::load(&a.ckpt)? else {
        return Err(Error::Config("attention export needs a TFN checkpoint".into()));
    };
    let seqs = load_dataset(&a.data, model.config.frames)?;
    let seq = seqs
        .get(a.index)
        .ok_or_else(|| Error::Data(format!("clip index {} out of range ({} clips)", a.index, seqs.len())))?;
    let maps = model.export_attention(seq)?;
    let written = maps.write(&a.out, a.format.ext())?;
    log::info!("wrote {} attention maps", written.len());
    Ok(())
}
