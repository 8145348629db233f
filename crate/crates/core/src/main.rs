use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mammopipe::augment::{derive_channels, ChannelConfig, CHANNEL_NAMES};
use mammopipe::cascade::Condition;
use mammopipe::pgm::{read_pgm, write_pgm};
use mammopipe::pipeline::{self, PipelineError, RunConfig, RunSummary, Seeds};
use mammopipe::preprocess::{adaptive_mean_filter, segment_filtered};
use mammopipe::synthetic::{write_synthetic, SyntheticConfig};
use mammopipe::wavelet::{export_pyramid, multilevel_dwt};

#[derive(Parser)]
#[command(name = "mammopipe", version, about = "Mammogram preprocessing, cascade training and ROC evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset directory and print class counts.
    Ingest(IngestArgs),
    /// Generate a synthetic dataset in mini-MIAS layout.
    Synthetic(SyntheticArgs),
    /// Write filtered, segmented and wavelet images for inspection.
    Preprocess(PreprocessArgs),
    /// Train and evaluate the cascade.
    Run(RunArgs),
    /// Build AUC tables and overlaid ROC plots from finished runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Also write ingest_summary.json here.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 120)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Default)]
struct PreprocessFlags {
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    dev_factor: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Dataset directory (all images) or a single PGM file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: PreprocessFlags,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ConditionArg {
    OriginalOnly,
    Preprocessed,
    Both,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    condition: Option<ConditionArg>,
    /// Print the resolved configuration and exit without writing anything.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    flags: PreprocessFlags,
    #[arg(long)]
    copies: Option<usize>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    head_lr_mult: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (each holding summary.json and predictions.csv).
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value = "MiniNet")]
    model_name: String,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, PipelineError> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::from_json_file)
}

fn apply_preprocess_flags(cfg: &mut RunConfig, f: &PreprocessFlags) {
    if let Some(v) = f.window {
        cfg.filter.window = v;
    }
    if let Some(v) = f.dev_factor {
        cfg.filter.deviation_factor = v;
    }
    if let Some(v) = f.k {
        cfg.segment.k = v;
    }
    if let Some(v) = f.levels {
        cfg.wavelet.levels = v;
    }
}

fn cmd_ingest(args: IngestArgs) -> Result<bool, PipelineError> {
    let dir = match args.dataset {
        Some(d) => d,
        None => RunConfig::default().resolved_dataset()?,
    };
    let summary = pipeline::ingest(&dir)?;
    let json = pipeline::to_json(&summary);
    print!("{json}");
    if let Some(out) = args.output_dir {
        std::fs::create_dir_all(&out).map_err(|e| PipelineError { stage: "write", message: e.to_string() })?;
        std::fs::write(out.join("ingest_summary.json"), &json)
            .map_err(|e| PipelineError { stage: "write", message: e.to_string() })?;
    }
    for name in &summary.corrupt_images {
        log::warn!("corrupt image: {name}");
    }
    if !summary.missing_images.is_empty() {
        for name in &summary.missing_images {
            log::error!("missing image: {name}");
        }
        return Ok(false);
    }
    Ok(true)
}

fn cmd_synthetic(args: SyntheticArgs) -> Result<bool, PipelineError> {
    let cfg = SyntheticConfig { count: args.count, size: args.size, seed: args.seed, ..SyntheticConfig::default() };
    let records = write_synthetic(&args.output_dir, &cfg).map_err(|e| PipelineError { stage: "synthetic", message: e.to_string() })?;
    println!("wrote {} images to {}", records.len(), args.output_dir.display());
    Ok(true)
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<bool, PipelineError> {
    let mut cfg = load_config(args.config.as_deref())?;
    apply_preprocess_flags(&mut cfg, &args.flags);
    if let Some(s) = args.seed {
        cfg.segment.seed = s;
    }
    let channel_cfg: ChannelConfig = cfg.channel_config();
    let inputs: Vec<(String, PathBuf)> = if args.input.is_dir() {
        pipeline::read_records(&args.input)?
            .iter()
            .map(|r| (r.id.clone(), mammopipe::mias::image_path(&args.input, &r.id)))
            .collect::<std::collections::BTreeMap<_, _>>()
            .into_iter()
            .collect()
    } else {
        let stem = args.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        vec![(stem, args.input.clone())]
    };
    let err = |e: &dyn std::fmt::Display| PipelineError { stage: "preprocess", message: e.to_string() };
    std::fs::create_dir_all(&args.output_dir).map_err(|e| err(&e))?;
    for (id, path) in inputs {
        let img = read_pgm(&path).map_err(|e| err(&format!("{}: {e}", path.display())))?;
        let filtered = adaptive_mean_filter(&img, cfg.filter.window, cfg.filter.deviation_factor).map_err(|e| err(&e))?;
        write_pgm(&args.output_dir.join(format!("{id}_filtered.pgm")), &filtered).map_err(|e| err(&e))?;
        let segmented = segment_filtered(&filtered, &cfg.segment).map_err(|e| err(&e))?;
        write_pgm(&args.output_dir.join(format!("{id}_segmented.pgm")), &segmented).map_err(|e| err(&e))?;
        let pyramid = multilevel_dwt(&filtered, cfg.wavelet.levels, cfg.wavelet.family).map_err(|e| err(&e))?;
        export_pyramid(&args.output_dir, &id, &pyramid).map_err(|e| err(&e))?;
        let channels = derive_channels(&img, &channel_cfg).map_err(|e| err(&e))?;
        for (c, ch) in channels.iter().enumerate().skip(2) {
            write_pgm(&args.output_dir.join(format!("{id}_{}.pgm", CHANNEL_NAMES[c])), ch).map_err(|e| err(&e))?;
        }
        log::info!("preprocessed {id}");
    }
    Ok(true)
}

fn resolve_run_config(args: &RunArgs) -> Result<(RunConfig, Vec<Condition>), PipelineError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(d) = &args.dataset {
        cfg.dataset_path = Some(d.clone());
    }
    if cfg.dataset_path.is_none() {
        cfg.dataset_path = Some(cfg.resolved_dataset()?);
    }
    if let Some(o) = &args.output_dir {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seeds = Seeds::all(s);
        cfg.segment.seed = s;
    }
    apply_preprocess_flags(&mut cfg, &args.flags);
    if let Some(v) = args.copies {
        cfg.copies = v;
    }
    if let Some(v) = args.input_size {
        cfg.input_size = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = args.batch {
        cfg.train.mini_batch = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learn_rate = v;
    }
    if let Some(v) = args.momentum {
        cfg.train.momentum = v;
    }
    if let Some(v) = args.head_lr_mult {
        cfg.train.head_lr_multiplier = v;
    }
    let conditions = match args.condition {
        Some(ConditionArg::OriginalOnly) => vec![Condition::OriginalOnly],
        Some(ConditionArg::Preprocessed) => vec![Condition::Preprocessed],
        Some(ConditionArg::Both) => vec![Condition::OriginalOnly, Condition::Preprocessed],
        None => vec![cfg.condition],
    };
    cfg.condition = conditions[0];
    cfg.validate()?;
    Ok((cfg, conditions))
}

fn print_summary(s: &RunSummary) {
    let aucs: Vec<String> =
        s.auc.iter().map(|c| format!("{} {}", c.class, c.auc.map_or("n/a".to_string(), |a| format!("{a:.4}")))).collect();
    println!(
        "{}: severity accuracy {:.3}, AUC {}",
        s.condition.name(),
        s.val_severity_accuracy,
        aucs.join(", ")
    );
}

fn cmd_run(args: RunArgs) -> Result<bool, PipelineError> {
    let (cfg, conditions) = resolve_run_config(&args)?;
    if args.dry_run {
        for c in &conditions {
            print!("{}", pipeline::to_json(&RunConfig { condition: *c, ..cfg.clone() }));
        }
        return Ok(true);
    }
    let mut dirs = Vec::new();
    for &condition in &conditions {
        let run_cfg = RunConfig { condition, ..cfg.clone() };
        let dir = cfg.output_dir.join(condition.name());
        let out = pipeline::run(&run_cfg)?;
        pipeline::write_run(&dir, &out)?;
        print_summary(&out.summary);
        dirs.push((condition, dir));
    }
    if dirs.len() > 1 {
        pipeline::write_report(&cfg.output_dir.join("report"), &dirs, "MiniNet")?;
    }
    Ok(true)
}

fn cmd_report(args: ReportArgs) -> Result<bool, PipelineError> {
    let mut runs = Vec::new();
    for dir in &args.runs {
        let path = dir.join("summary.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| PipelineError { stage: "report", message: format!("{}: {e}", path.display()) })?;
        let s: RunSummary = serde_json::from_str(&text)
            .map_err(|e| PipelineError { stage: "report", message: format!("{}: {e}", path.display()) })?;
        runs.push((s.condition, dir.clone()));
    }
    for p in pipeline::write_report(&args.output_dir, &runs, &args.model_name)? {
        println!("{}", p.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synthetic(a) => cmd_synthetic(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
