use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use relvis_cli::{
    cmd_analyze, cmd_attribute, cmd_render, cmd_serve, cmd_synth, cmd_train, AnalyzeOptions, CliError,
    SynthSpec, MODEL_DIR,
};
use relvis_core::attribution::CompositeParams;
use relvis_core::spray::{AnalysisParams, Normalization, TsneInput};
use relvis_core::store::Strategy;

#[derive(Parser)]
#[command(name = "relvis", version, about = "Dataset-wide relevance attribution and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    TrueLabel,
    PredictedLabel,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    None,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum TsneOn {
    Raw,
    Spectral,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset with a planted watermark.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0.5)]
        watermark_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the demo CNN.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Model directory; defaults to `<data>/model`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attribute every sample with a named composite.
    Attribute {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "epsilon-gamma-box")]
        composite: String,
        #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
        low: f64,
        #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
        high: f64,
        #[arg(long, default_value_t = 0.25)]
        gamma: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, value_enum, default_value = "true-label")]
        strategy: StrategyArg,
    },
    /// Run the spectral analysis per class.
    Analyze {
        #[arg(long)]
        attributions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Source dataset: names categories, writes project.json and the watermark report.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Only analyze these categories (repeatable).
        #[arg(long)]
        category: Vec<String>,
        /// Analyze all samples as one category.
        #[arg(long)]
        no_per_category: bool,
        /// Per-sample scaling of the attributions before distances.
        #[arg(long, value_enum, default_value = "l2")]
        normalize: NormArg,
        #[arg(long, default_value_t = 10)]
        knn_k: usize,
        #[arg(long, default_value_t = 8)]
        n_eigval: usize,
        #[arg(long, default_value_t = 2)]
        k_min: usize,
        #[arg(long, default_value_t = 19)]
        k_max: usize,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        tsne_iters: usize,
        #[arg(long, value_enum, default_value = "raw")]
        tsne_on: TsneOn,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render heatmaps as PNG files.
    Render {
        #[arg(long)]
        attributions: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        index: Vec<usize>,
        #[arg(long, default_value = "coldnhot")]
        colormap: String,
        #[arg(long, default_value = "attribution")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve projects to the web explorer.
    Serve {
        #[arg(long = "project")]
        projects: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Allow cross-origin requests (for a separately served UI).
        #[arg(long)]
        cors: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            out,
            n_per_class,
            watermark_fraction,
            seed,
        } => {
            if !(0.0..=1.0).contains(&watermark_fraction) {
                return Err(CliError::Usage("--watermark-fraction must be in [0, 1]".into()));
            }
            let store = cmd_synth(&out, &SynthSpec { n_per_class, watermark_fraction, seed })?;
            println!("wrote {} samples to {}", store.len(), out.display());
        }
        Command::Train { data, out, epochs, lr, seed } => {
            let out = out.unwrap_or_else(|| data.join(MODEL_DIR));
            let s = cmd_train(&data, &out, epochs, lr, seed)?;
            println!("train accuracy {:.4} after {} epochs; model in {}", s.accuracy, s.epochs_run, out.display());
        }
        Command::Attribute {
            data,
            model,
            out,
            composite,
            low,
            high,
            gamma,
            eps,
            strategy,
        } => {
            let params = CompositeParams { low, high, gamma, eps };
            let strategy = match strategy {
                StrategyArg::TrueLabel => Strategy::TrueLabel,
                StrategyArg::PredictedLabel => Strategy::PredictedLabel,
            };
            let store = cmd_attribute(&data, &model, &out, &composite, &params, strategy)?;
            println!("wrote {} attributions to {}", store.len(), out.display());
        }
        Command::Analyze {
            attributions,
            out,
            data,
            category,
            no_per_category,
            normalize,
            knn_k,
            n_eigval,
            k_min,
            k_max,
            perplexity,
            tsne_iters,
            tsne_on,
            seed,
        } => {
            if k_min < 2 || k_max < k_min {
                return Err(CliError::Usage("need 2 <= --k-min <= --k-max".into()));
            }
            let params = AnalysisParams {
                normalize: match normalize {
                    NormArg::None => Normalization::None,
                    NormArg::L2 => Normalization::L2,
                },
                knn_k,
                n_eigval,
                kmeans_range: k_min..=k_max,
                tsne_perplexity: perplexity,
                tsne_iters,
                tsne_on: match tsne_on {
                    TsneOn::Raw => TsneInput::Raw,
                    TsneOn::Spectral => TsneInput::Spectral,
                },
                seed,
            };
            let opts = AnalyzeOptions {
                per_category: !no_per_category,
                only: category,
                data_dir: data,
            };
            let s = cmd_analyze(&attributions, &out, &params, &opts)?;
            let total = s.stats.total_executed() + s.stats.total_hits();
            println!(
                "analyzed {} categories; {} of {} processor calls served from cache",
                s.categories.len(),
                s.stats.total_hits(),
                total
            );
            if let Some(r) = s.watermark {
                println!(
                    "watermark: {}/{} cluster {} coverage {:.3} purity {:.3} tag ratio {:.2}",
                    r.category, r.clustering, r.cluster, r.coverage, r.purity, r.tag_ratio
                );
            }
        }
        Command::Render {
            attributions,
            data,
            index,
            colormap,
            mode,
            out,
        } => {
            let files = cmd_render(&attributions, data.as_deref(), &index, &colormap, &mode, &out)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
        Command::Serve { projects, host, port, cors } => cmd_serve(&projects, &host, port, cors)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
