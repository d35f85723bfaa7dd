use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ppm_harness::run::{records, RunManifest, MANIFEST};
use ppm_harness::stages::{self, write_json, UrmInputs};
use ppm_harness::{pipeline, run_ablation, Config, HarnessError, Variant};

#[derive(Parser)]
#[command(name = "ppm", about = "Pre-trained plug-in CTR model and unified ranking model on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory; defaults to runs/<command>-seed<seed>.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliVariant {
    /// Shared encoder over ids and untrained-encoder features.
    Base,
    /// Shared encoder over ids and trained-encoder features.
    Qmep,
    /// Ranking model with the plug-in branch.
    Urm,
    /// Ranking model without the plug-in branch.
    Idrec,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Random,
    Frozen,
    Finetune,
}

fn variant_of(v: CliVariant, mode: CliMode) -> Variant {
    match (v, mode) {
        (CliVariant::Base, _) => Variant::Base,
        (CliVariant::Qmep, _) => Variant::QmEp,
        (CliVariant::Idrec, _) => Variant::PureIdRec,
        (CliVariant::Urm, CliMode::Random) => Variant::PpmRandom,
        (CliVariant::Urm, CliMode::Frozen) => Variant::PpmFrozen,
        (CliVariant::Urm, CliMode::Finetune) => Variant::PpmFinetune,
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and save it under <run-dir>/data.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the text and vision encoders; writes encoders.ckpt.
    TrainModenc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Save the initialization without training.
        #[arg(long)]
        untrained: bool,
    },
    /// Encode every catalog item; writes features.jsonl.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoders: PathBuf,
    },
    /// Pack exported features into features.cache.
    BuildCache {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
    },
    /// Pretrain the plug-in CTR model on the training split; writes ppm.ckpt.
    PretrainPpm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        parent: Option<PathBuf>,
    },
    /// Train a ranking model; writes urm.ckpt.
    TrainUrm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Not read by --variant base, which encodes with untrained encoders.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        ppm: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "finetune")]
        ppm_mode: CliMode,
        #[arg(long, value_enum, default_value = "urm")]
        variant: CliVariant,
    },
    /// Score the test day with a trained ranking model; writes report.json
    /// and metrics.jsonl.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        urm: PathBuf,
        #[arg(long, value_enum, default_value = "urm")]
        variant: CliVariant,
    },
    /// Run the ablation grid over the configured seeds.
    Ablation {
        #[command(flatten)]
        common: Common,
    },
    /// Offline training, evaluation and one incremental update.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainModenc { .. } => "train-modenc",
            Command::ExportFeatures { .. } => "export-features",
            Command::BuildCache { .. } => "build-cache",
            Command::PretrainPpm { .. } => "pretrain-ppm",
            Command::TrainUrm { .. } => "train-urm",
            Command::Eval { .. } => "eval",
            Command::Ablation { .. } => "ablation",
            Command::Pipeline { .. } => "pipeline",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::TrainModenc { common, .. }
            | Command::ExportFeatures { common, .. }
            | Command::BuildCache { common, .. }
            | Command::PretrainPpm { common, .. }
            | Command::TrainUrm { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablation { common }
            | Command::Pipeline { common } => common,
        }
    }
}

struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn execute(cmd: &Command, config: &Config, dir: &Path) -> Result<Outcome, HarnessError> {
    let seed = cmd.common().seed;
    let p = |name: &str| dir.join(name);
    let mut inputs = Vec::new();
    let outputs;
    match cmd {
        Command::GenData { .. } => {
            stages::generate_data(config, seed, &p(pipeline::DATA_DIR))?;
            outputs = vec![p(pipeline::DATA_DIR)];
        }
        Command::TrainModenc { data, untrained, .. } => {
            inputs.push(data.clone());
            let dataset = stages::load_data(data, "train-modenc")?;
            let report = stages::train_modality_encoders(config, &dataset, seed, *untrained, &p(pipeline::ENCODERS))?;
            write_json(&p("encoder_report.json"), &report)?;
            outputs = vec![p(pipeline::ENCODERS), p("encoder_report.json")];
        }
        Command::ExportFeatures { data, encoders, .. } => {
            inputs.extend([data.clone(), encoders.clone()]);
            let dataset = stages::load_data(data, "export-features")?;
            stages::export_features(config, &dataset, encoders, &p(pipeline::FEATURES))?;
            outputs = vec![p(pipeline::FEATURES)];
        }
        Command::BuildCache { features, .. } => {
            inputs.push(features.clone());
            stages::build_feature_cache(features, &p(pipeline::CACHE))?;
            outputs = vec![p(pipeline::CACHE)];
        }
        Command::PretrainPpm { data, cache, parent, .. } => {
            inputs.extend([data.clone(), cache.clone()]);
            inputs.extend(parent.clone());
            let dataset = stages::load_data(data, "pretrain-ppm")?;
            let report =
                stages::pretrain_ppm(config, &dataset, cache, None, parent.as_deref(), seed, &p(pipeline::PPM))?;
            write_json(&p("pretrain_report.json"), &report)?;
            outputs = vec![p(pipeline::PPM), p("pretrain_report.json")];
        }
        Command::TrainUrm { data, cache, ppm, ppm_mode, variant, .. } => {
            inputs.push(data.clone());
            inputs.extend(cache.clone());
            inputs.extend(ppm.clone());
            let v = variant_of(*variant, *ppm_mode);
            if matches!(v, Variant::PpmFrozen | Variant::PpmFinetune) && ppm.is_none() {
                return Err(HarnessError::Stage { stage: "train-urm", message: "--ppm is required for this mode".into() });
            }
            let dataset = stages::load_data(data, "train-urm")?;
            let features = stages::variant_features(config, &dataset, v, cache.as_deref(), seed, "train-urm")?;
            let urm_inputs = UrmInputs { variant: v, features: &features, ppm: ppm.as_deref(), init: None, window: None };
            let report = stages::train_urm(config, &dataset, &urm_inputs, seed, &p(pipeline::URM))?;
            write_json(&p("train_report.json"), &report)?;
            outputs = vec![p(pipeline::URM), p("train_report.json")];
        }
        Command::Eval { data, cache, urm, variant, .. } => {
            inputs.extend([data.clone(), urm.clone()]);
            inputs.extend(cache.clone());
            let v = variant_of(*variant, CliMode::Finetune);
            let dataset = stages::load_data(data, "eval")?;
            let features = stages::variant_features(config, &dataset, v, cache.as_deref(), seed, "eval")?;
            let report = stages::evaluate_urm(config, &dataset, v, &features, urm, seed)?;
            write_json(&p("report.json"), &report)?;
            report.write_lines("test", &p(pipeline::METRICS))?;
            outputs = vec![p("report.json"), p(pipeline::METRICS)];
        }
        Command::Ablation { .. } => {
            let report = run_ablation(config, &config.experiment.grid);
            write_json(&p("ablation.json"), &report)?;
            std::fs::write(p("ablation.txt"), report.table()).map_err(|e| HarnessError::io(p("ablation.txt"), e))?;
            print!("{}", report.table());
            outputs = vec![p("ablation.json"), p("ablation.txt")];
            if !report.complete {
                let failed: Vec<&str> = report.rows.iter().filter(|r| r.failed).map(|r| r.label.as_str()).collect();
                return Err(HarnessError::Stage { stage: "ablation", message: format!("failed: {}", failed.join(", ")) });
            }
        }
        Command::Pipeline { .. } => {
            let report = pipeline::run_pipeline(config, seed, dir)?;
            println!(
                "day-{} average AUC before update {:?}, after {:?}",
                report.windows.eval_day, report.before.average_auc, report.after.average_auc
            );
            outputs = [
                pipeline::DATA_DIR,
                pipeline::ENCODERS,
                pipeline::FEATURES,
                pipeline::CACHE,
                pipeline::PPM,
                pipeline::URM,
                pipeline::PPM_UPDATE,
                pipeline::URM_UPDATE,
                pipeline::REPORT,
                pipeline::METRICS,
            ]
            .iter()
            .map(|n| p(n))
            .collect();
        }
    }
    Ok(Outcome { inputs, outputs })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cmd = &cli.command;
    let common = cmd.common();
    let name = cmd.name();
    let config = match &common.config {
        Some(path) => Config::load(path),
        None => Ok(Config::default()),
    };
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error in stage config: {e}");
            return ExitCode::FAILURE;
        }
    };
    let dir = common.run_dir.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{name}-seed{}", common.seed)));
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!("error in stage {name}: {}: {e}", dir.display());
        return ExitCode::FAILURE;
    }
    let start = Instant::now();
    let result = execute(cmd, &config, &dir);
    let mut manifest = RunManifest {
        command: name.into(),
        seed: common.seed,
        config_hash: config.hash(),
        args: std::env::args().collect(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        status: "ok".into(),
        failed_stage: None,
        error: None,
        elapsed_seconds: 0.0,
    };
    let code = match &result {
        Ok(outcome) => {
            manifest.inputs = records(&outcome.inputs);
            manifest.outputs = records(&outcome.outputs);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let stage = match e {
                HarnessError::Stage { stage, .. } => stage.to_string(),
                _ => name.to_string(),
            };
            eprintln!("error in stage {stage}: {e}");
            manifest.status = "failed".into();
            manifest.failed_stage = Some(stage);
            manifest.error = Some(e.to_string());
            ExitCode::FAILURE
        }
    };
    manifest.elapsed_seconds = start.elapsed().as_secs_f64();
    if let Err(e) = write_json(&dir.join(MANIFEST), &manifest) {
        eprintln!("error in stage {name}: {e}");
        return ExitCode::FAILURE;
    }
    code
}
