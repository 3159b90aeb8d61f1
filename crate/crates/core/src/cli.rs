//! The `pmx` command-line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::{
    generate_synthetic, load_dataset_with, split_dataset, write_clinical_csv, write_embeddings_binary,
    write_embeddings_csv, EmbeddingFormat, Label, LoadOptions, PatientCase, SynthConfig, CLINICAL_FEATURES,
    EMBEDDING_DIM,
};
use crate::error::{PmxError, Result};
use crate::eval::{compare_heads, evaluate_with, predict_cases, run_ablations, AblationTable};
use crate::explain::{Explainer, InferencePath};
use crate::training::gradcheck::run_gradcheck;
use crate::training::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "pmx", version, about = "Prototype-based explainable bone-health classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (clinical CSV plus embeddings).
    GenSynth(GenSynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test partition (or all cases).
    Eval(EvalArgs),
    /// Print predicted labels.
    Predict(PredictArgs),
    /// Write an explanation report for one case.
    Explain(ExplainArgs),
    /// Train the full model and every ablation and tabulate test accuracy.
    Ablate(AblateArgs),
    /// Write the prototype bank with its source cases as CSV.
    ExportPrototypes(ExportArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum FormatArg {
    Binary,
    Csv,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Synthetic cohort config (TOML); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Class fractions as `normal,osteopenia,osteoporosis`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub tabular_signal: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub image_corruption: Option<f64>,
    #[arg(long, value_enum, default_value = "binary")]
    pub format: FormatArg,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub data_clinical: PathBuf,
    #[arg(long)]
    pub data_embeddings: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainFlags {
    /// Training config (TOML); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_gate: bool,
    #[arg(long)]
    pub no_multitask: bool,
    #[arg(long)]
    pub no_cross_attention: bool,
    #[arg(long)]
    pub no_prototypes: bool,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau_conf: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Required embedding width; 0 accepts any consistent width.
    #[arg(long, default_value_t = EMBEDDING_DIM)]
    pub embedding_dim: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum PathArg {
    /// The checkpoint's own path (k-NN with prototypes, head without).
    Auto,
    Knn,
    Head,
}

#[derive(Debug, Args, Clone)]
pub struct InferenceFlags {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau_conf: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub inference: InferenceFlags,
    /// Evaluate every case instead of the checkpoint's test partition.
    #[arg(long)]
    pub all: bool,
    #[arg(long, value_enum, default_value = "auto")]
    pub path: PathArg,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub inference: InferenceFlags,
    /// Predict a single case; all cases otherwise.
    #[arg(long)]
    pub case: Option<String>,
    #[arg(long, value_enum, default_value = "auto")]
    pub path: PathArg,
    /// Also write predictions.csv and a run manifest here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub inference: InferenceFlags,
    #[arg(long)]
    pub case: String,
    /// Known diagnosis; adds a misclassification audit to the report.
    #[arg(long, value_parser = parse_label)]
    pub true_label: Option<Label>,
    /// Also write the report and a run manifest here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long, default_value_t = EMBEDDING_DIM)]
    pub embedding_dim: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random networks and batches.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_label(s: &str) -> std::result::Result<Label, String> {
    Label::ALL
        .into_iter()
        .find(|l| l.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown class '{s}' (expected normal, osteopenia or osteoporosis)"))
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    pub wall_clock_seconds: f64,
    pub code_version: String,
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| PmxError::io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
    })
}

struct Run {
    argv: Vec<String>,
    command: &'static str,
    started: Instant,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl Run {
    fn new(argv: &[String], command: &'static str) -> Self {
        Self {
            argv: argv.to_vec(),
            command,
            started: Instant::now(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        std::fs::write(&path, bytes).map_err(|e| PmxError::io(&path, e))?;
        self.artifacts.push(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    fn finish(self, out_dir: &Path, config: serde_json::Value, seed: Option<u64>) -> Result<()> {
        let manifest = RunManifest {
            command_line: self.argv,
            command: self.command.to_string(),
            config,
            seed,
            inputs: self.inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
            artifacts: self.artifacts.iter().map(|p| digest(p)).collect::<Result<_>>()?,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = out_dir.join("run_manifest.json");
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| PmxError::io(&path, e))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PmxError::io(dir, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| PmxError::io(path, e))
}

/// Effective training config: built-in defaults, then the config file, then
/// flags.
pub fn resolve_train_config(flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => TrainConfig::from_toml_str(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    cfg.ablation.no_gate |= flags.no_gate;
    cfg.ablation.no_multitask |= flags.no_multitask;
    cfg.ablation.no_cross_attention |= flags.no_cross_attention;
    cfg.ablation.no_prototypes |= flags.no_prototypes;
    if let Some(k) = flags.k {
        cfg.k = k;
    }
    if let Some(t) = flags.tau_conf {
        cfg.tau_conf = t;
    }
    if let Some(v) = flags.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.patience {
        cfg.patience = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_synth_config(args: &GenSynthArgs) -> Result<SynthConfig> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| PmxError::Config(e.to_string()))?,
        None => SynthConfig::default(),
    };
    if let Some(v) = args.n {
        cfg.n_cases = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(f) = &args.fractions {
        cfg.class_fractions = [f[0], f[1], f[2]];
    }
    if let Some(v) = args.separation {
        cfg.embedding_separation = v;
    }
    if let Some(v) = args.tabular_signal {
        cfg.tabular_signal = v;
    }
    if let Some(v) = args.noise_sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = args.embedding_dim {
        cfg.embedding_dim = v;
    }
    if let Some(v) = args.image_corruption {
        cfg.image_corruption_fraction = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(run: &mut Run, data: &DataArgs, expected_dim: Option<usize>) -> Result<Vec<PatientCase>> {
    run.input(&data.data_clinical);
    run.input(&data.data_embeddings);
    load_dataset_with(&data.data_clinical, &data.data_embeddings, LoadOptions { expected_dim })
}

fn load_for_inference(run: &mut Run, flags: &InferenceFlags) -> Result<Checkpoint> {
    run.input(&flags.checkpoint);
    let mut ckpt = load_checkpoint(&flags.checkpoint)?;
    if let Some(k) = flags.k {
        ckpt.config.k = k;
    }
    if let Some(t) = flags.tau_conf {
        ckpt.config.tau_conf = t;
    }
    ckpt.config.validate()?;
    Ok(ckpt)
}

fn inference_path(arg: PathArg, ckpt: &Checkpoint) -> InferencePath {
    match arg {
        PathArg::Auto => InferencePath::for_model(&ckpt.model),
        PathArg::Knn => InferencePath::Knn,
        PathArg::Head => InferencePath::Head,
    }
}

fn find_case<'a>(cases: &'a [PatientCase], id: &str) -> Result<&'a PatientCase> {
    cases
        .iter()
        .find(|c| c.patient_id == id)
        .ok_or_else(|| PmxError::Validation(format!("no case with patient_id '{id}'")))
}

fn predictions_csv(preds: &[crate::eval::CasePrediction]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| PmxError::Csv(e.to_string());
    w.write_record(["patient_id", "true_label", "prediction", "confidence", "predicted_t_score"])
        .map_err(err)?;
    for p in preds {
        w.write_record([
            p.patient_id.clone(),
            p.true_label.name().to_string(),
            p.prediction.name().to_string(),
            p.confidence.map(|c| format!("{c:.6}")).unwrap_or_default(),
            format!("{:.4}", p.predicted_t_score),
        ])
        .map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| PmxError::Csv(e.to_string()))?).map_err(|e| PmxError::Csv(e.to_string()))
}

/// One row per prototype: class, slot, source case and its clinical record.
pub fn prototypes_csv(ckpt: &Checkpoint) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| PmxError::Csv(e.to_string());
    let mut header = vec!["class", "slot", "source_patient_id", "source_t_score"];
    header.extend(CLINICAL_FEATURES);
    w.write_record(&header).map_err(err)?;
    for p in ckpt.model.bank.prototypes() {
        let mut row = vec![p.class.name().to_string(), p.slot.to_string()];
        match &p.source {
            Some(s) => {
                row.push(s.patient_id.clone());
                row.push(s.t_score.to_string());
                row.extend(s.clinical.to_array().iter().map(|v| v.to_string()));
            }
            None => row.extend(std::iter::repeat_n(String::new(), 2 + CLINICAL_FEATURES.len())),
        }
        w.write_record(&row).map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| PmxError::Csv(e.to_string()))?).map_err(|e| PmxError::Csv(e.to_string()))
}

fn dim_option(dim: usize) -> Option<usize> {
    (dim > 0).then_some(dim)
}

fn cmd_gen_synth(argv: &[String], args: GenSynthArgs) -> Result<()> {
    let mut run = Run::new(argv, "gen-synth");
    if let Some(p) = &args.config {
        run.input(p);
    }
    let cfg = resolve_synth_config(&args)?;
    let cases = generate_synthetic(&cfg)?;
    ensure_dir(&args.out_dir)?;
    let clinical = args.out_dir.join("clinical.csv");
    write_clinical_csv(&clinical, &cases)?;
    run.artifacts.push(clinical);
    let emb = match args.format {
        FormatArg::Binary => {
            let p = args.out_dir.join("embeddings.bin");
            write_embeddings_binary(&p, &cases)?;
            p
        }
        FormatArg::Csv => {
            let p = args.out_dir.join("embeddings.csv");
            write_embeddings_csv(&p, &cases)?;
            p
        }
    };
    run.artifacts.push(emb);
    let format = match args.format {
        FormatArg::Binary => EmbeddingFormat::Binary,
        FormatArg::Csv => EmbeddingFormat::Csv,
    };
    let config = serde_json::json!({ "synth": cfg, "embedding_format": format });
    println!("wrote {} synthetic cases to {}", cases.len(), args.out_dir.display());
    run.finish(&args.out_dir, config, Some(cfg.seed))
}

fn cmd_train(argv: &[String], args: TrainArgs) -> Result<()> {
    let mut run = Run::new(argv, "train");
    if let Some(p) = &args.flags.config {
        run.input(p);
    }
    let cfg = resolve_train_config(&args.flags)?;
    let cases = load_data(&mut run, &args.data, dim_option(args.embedding_dim))?;
    let split = split_dataset(&cases, cfg.seed)?;
    let out = train(&split, &cfg)?;
    let ckpt = out.checkpoint;
    ensure_dir(&args.out_dir)?;
    let path = args.out_dir.join("checkpoint.pmxc");
    save_checkpoint(&ckpt, &path)?;
    run.artifacts.push(path);
    run.write_json(args.out_dir.join("history.json"), &ckpt.history)?;
    println!(
        "trained {} epochs (best epoch {}, val accuracy {:.4}); checkpoint {}",
        ckpt.history.epochs.len(),
        ckpt.history.best_epoch,
        ckpt.history.final_val_accuracy,
        ckpt.checkpoint_id()
    );
    run.finish(&args.out_dir, serde_json::to_value(&cfg)?, Some(cfg.seed))
}

fn cmd_eval(argv: &[String], args: EvalArgs) -> Result<()> {
    let mut run = Run::new(argv, "eval");
    let ckpt = load_for_inference(&mut run, &args.inference)?;
    let cases = load_data(&mut run, &args.data, Some(ckpt.standardizer.embedding_dim()))?;
    let cases = if args.all {
        cases
    } else {
        split_dataset(&cases, ckpt.split_seed)?.test
    };
    let path = inference_path(args.path, &ckpt);
    let report = evaluate_with(&ckpt, &cases, path)?;
    ensure_dir(&args.out_dir)?;
    run.write_json(args.out_dir.join("metrics.json"), &report.metrics)?;
    run.write(args.out_dir.join("predictions.csv"), predictions_csv(&report.predictions)?.as_bytes())?;
    let summary = serde_json::json!({
        "checkpoint_id": report.checkpoint_id,
        "inference_path": report.inference_path,
        "n": report.metrics.n,
        "accuracy": report.metrics.accuracy,
        "macro_f1": report.metrics.macro_f1,
        "clinical_agreement": report.metrics.clinical_agreement,
        "normal_vs_abnormal_sensitivity": report.metrics.normal_vs_abnormal_sensitivity,
        "mean_confidence_correct": report.mean_confidence_correct,
        "mean_confidence_incorrect": report.mean_confidence_incorrect,
        "confidence_separation": report.confidence_separation,
        "heads": if ckpt.model.ablation.no_prototypes { None } else { Some(compare_heads(&ckpt, &cases)?) },
    });
    run.write_json(args.out_dir.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    run.finish(&args.out_dir, serde_json::to_value(&ckpt.config)?, Some(ckpt.config.seed))
}

fn cmd_predict(argv: &[String], args: PredictArgs) -> Result<()> {
    let mut run = Run::new(argv, "predict");
    let ckpt = load_for_inference(&mut run, &args.inference)?;
    let cases = load_data(&mut run, &args.data, Some(ckpt.standardizer.embedding_dim()))?;
    let selected = match &args.case {
        Some(id) => vec![find_case(&cases, id)?.clone()],
        None => cases,
    };
    let preds = predict_cases(&ckpt, &selected, inference_path(args.path, &ckpt))?;
    let text = predictions_csv(&preds)?;
    print!("{text}");
    if let Some(dir) = &args.out_dir {
        ensure_dir(dir)?;
        run.write(dir.join("predictions.csv"), text.as_bytes())?;
        run.finish(dir, serde_json::to_value(&ckpt.config)?, Some(ckpt.config.seed))?;
    }
    Ok(())
}

fn cmd_explain(argv: &[String], args: ExplainArgs) -> Result<()> {
    let mut run = Run::new(argv, "explain");
    let ckpt = load_for_inference(&mut run, &args.inference)?;
    let cases = load_data(&mut run, &args.data, Some(ckpt.standardizer.embedding_dim()))?;
    let case = find_case(&cases, &args.case)?;
    let id = ckpt.checkpoint_id();
    let explainer = Explainer {
        model: &ckpt.model,
        standardizer: &ckpt.standardizer,
        class_norms: &ckpt.class_norms,
        checkpoint_id: &id,
        k: ckpt.config.k,
        tau_conf: ckpt.config.tau_conf,
    };
    let report = explainer.explain(case, args.true_label)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &args.out_dir {
        ensure_dir(dir)?;
        run.write_json(dir.join(format!("explanation_{}.json", case.patient_id)), &report)?;
        run.finish(dir, serde_json::to_value(&ckpt.config)?, Some(ckpt.config.seed))?;
    }
    Ok(())
}

fn cmd_ablate(argv: &[String], args: AblateArgs) -> Result<()> {
    let mut run = Run::new(argv, "ablate");
    if let Some(p) = &args.flags.config {
        run.input(p);
    }
    let cfg = resolve_train_config(&args.flags)?;
    let cases = load_data(&mut run, &args.data, dim_option(args.embedding_dim))?;
    let split = split_dataset(&cases, cfg.seed)?;
    let table: AblationTable = run_ablations(&split, &cfg)?;
    ensure_dir(&args.out_dir)?;
    let csv = table.to_csv()?;
    run.write(args.out_dir.join("ablation.csv"), csv.as_bytes())?;
    run.write_json(args.out_dir.join("ablation.json"), &table)?;
    print!("{csv}");
    run.finish(&args.out_dir, serde_json::to_value(&cfg)?, Some(cfg.seed))
}

fn cmd_export(argv: &[String], args: ExportArgs) -> Result<()> {
    let mut run = Run::new(argv, "export-prototypes");
    run.input(&args.checkpoint);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    crate::explain::require_prototypes(&ckpt.model)?;
    ensure_dir(&args.out_dir)?;
    run.write(args.out_dir.join("prototypes.csv"), prototypes_csv(&ckpt)?.as_bytes())?;
    run.finish(&args.out_dir, serde_json::to_value(&ckpt.config)?, Some(ckpt.config.seed))
}

fn cmd_gradcheck(argv: &[String], args: GradcheckArgs) -> Result<()> {
    let mut run = Run::new(argv, "gradcheck");
    let suite = run_gradcheck(args.seeds, args.seed)?;
    for r in &suite.results {
        println!(
            "{} seed {:>3} {:<13} max rel err {:.3e} over {} coords",
            if r.passed() { "PASS" } else { "FAIL" },
            r.seed,
            r.objective,
            r.max_rel_error,
            r.checked
        );
    }
    if let Some(dir) = &args.out_dir {
        ensure_dir(dir)?;
        run.write_json(dir.join("gradcheck.json"), &suite)?;
        let config = serde_json::json!({ "seeds": args.seeds, "step": suite.step, "tolerance": suite.tolerance });
        run.finish(dir, config, Some(args.seed))?;
    }
    if suite.passed() {
        println!("gradient check passed (max relative error {:.3e})", suite.max_rel_error());
        Ok(())
    } else {
        Err(PmxError::Validation(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            suite.max_rel_error(),
            suite.tolerance
        )))
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 for usage and validation errors,
/// 2 for runtime failures.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(&argv, a),
        Command::Train(a) => cmd_train(&argv, a),
        Command::Eval(a) => cmd_eval(&argv, a),
        Command::Predict(a) => cmd_predict(&argv, a),
        Command::Explain(a) => cmd_explain(&argv, a),
        Command::Ablate(a) => cmd_ablate(&argv, a),
        Command::ExportPrototypes(a) => cmd_export(&argv, a),
        Command::Gradcheck(a) => cmd_gradcheck(&argv, a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
