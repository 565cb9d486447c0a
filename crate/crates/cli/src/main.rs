use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use molvae_core::chem_data::TaskKind;
use molvae_core::pipelines::{self as p, Context, ExperimentConfig, PipelineError, TargetConfig};
use molvae_core::qsar::{ModelKind, QsarSpec};
use molvae_core::vae::EmbedMode;

#[derive(Parser)]
#[command(name = "molvae", version, about = "SMILES VAE embeddings and QSAR experiments")]
struct Cli {
    /// Worker threads for replicate seeds, sweep points and CV folds.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mean,
    Sampled,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Lr,
    Mlp,
    Resnet1d,
}

#[derive(Subcommand)]
enum Command {
    /// Train one VAE (plain or joint, per `variant`) and save its bundle.
    TrainVae(ExperimentArgs),
    /// Encode a SMILES CSV with a saved bundle.
    Embed {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "mean")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rank target descriptors by correlation with the target.
    SelectDescriptors(ExperimentArgs),
    /// Cross-validate a QSAR model on an embedding CSV.
    TrainQsar {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value = "target")]
        target_column: String,
        #[arg(long, value_enum, default_value = "regression")]
        task: Task,
        #[arg(long, value_enum, default_value = "lr")]
        model: Model,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Plain and joint VAEs per replicate seed, embeddings, QSAR, Δ table.
    Pipeline(ExperimentArgs),
    /// VAEs on nested source subsets.
    SubsetSweep(ExperimentArgs),
    /// Joint VAEs on descriptors degraded to lower target correlations.
    NoiseSweep(ExperimentArgs),
    /// The pipeline on a target subsample of `size_matched_n` rows.
    SizeMatched(ExperimentArgs),
    /// K-means cluster profiles, KL to the prior, and a PCA plot bundle.
    ClusterAnalysis(ExperimentArgs),
    /// Embedding-sampling variance against fold and model variance.
    VarianceStudy(ExperimentArgs),
}

fn load_context(a: &ExperimentArgs) -> Result<Context, PipelineError> {
    let mut overrides = Vec::new();
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    if let Some(s) = a.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(d) = &a.output_dir {
        overrides.push(("output_dir".into(), serde_json::to_string(d).expect("path serializes")));
    }
    if let Some(e) = a.epochs {
        overrides.push(("train.epochs".into(), e.to_string()));
    }
    Context::new(ExperimentConfig::from_file(&a.config, &overrides)?)
}

fn print<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("results serialize"));
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::TrainVae(a) => print(&p::cmd_train_vae(&load_context(&a)?)?),
        Command::SelectDescriptors(a) => print(&p::cmd_select_descriptors(&load_context(&a)?)?),
        Command::Pipeline(a) => print(&p::cmd_pipeline(&load_context(&a)?)?.summary),
        Command::SubsetSweep(a) => print(&p::cmd_subset_sweep(&load_context(&a)?)?),
        Command::NoiseSweep(a) => print(&p::cmd_noise_sweep(&load_context(&a)?)?),
        Command::SizeMatched(a) => print(&p::cmd_size_matched(&load_context(&a)?)?.summary),
        Command::ClusterAnalysis(a) => {
            let r = p::cmd_cluster_analysis(&load_context(&a)?)?;
            for c in &r.clusterings {
                println!("k = {}: Spearman(KL, error) = {:.3}", c.k, c.spearman_without_farthest);
            }
        }
        Command::VarianceStudy(a) => print(&p::cmd_variance_study(&load_context(&a)?)?),
        Command::Embed {
            bundle,
            input,
            output,
            mode,
            seed,
        } => {
            let mode = match mode {
                Mode::Mean => EmbedMode::Mean,
                Mode::Sampled => EmbedMode::Sampled,
            };
            let es = p::cmd_embed(&bundle, &input, mode, seed, &output)?;
            println!("embedded {} molecules, excluded {}", es.len(), es.excluded.len());
        }
        Command::TrainQsar {
            embeddings,
            target,
            target_column,
            task,
            model,
            folds,
            seed,
            output,
        } => {
            let task = match task {
                Task::Regression => TaskKind::Regression,
                Task::Classification => TaskKind::Classification,
            };
            let kind = match model {
                Model::Lr => ModelKind::Lr,
                Model::Mlp => ModelKind::Mlp,
                Model::Resnet1d => ModelKind::ResNet1d,
            };
            if !target.is_file() {
                return Err(PipelineError::Config(format!("input file {} does not exist", target.display())));
            }
            let tc = TargetConfig {
                path: target,
                target_column,
                task,
                label_threshold: None,
            };
            let spec = QsarSpec::new(kind, task, seed);
            print(&p::cmd_train_qsar(&embeddings, &tc, &spec, folds, seed, &output)?.cv);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: cannot size worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
