use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coreset_interp::coreset::SelectionMethod;
use coreset_interp::pipeline::{FeatureTag, Run, RunConfig, FEATURES_FILE};
use coreset_interp::synthetic::{make_synthetic, ChannelLayout, SyntheticConfig};
use coreset_interp::Error;

/// Exit codes: 0 success, 2 invalid input or usage, 3 computation failure,
/// 4 file system or image I/O failure.
#[derive(Parser)]
#[command(name = "coreset-interp", version, about = "Coreset selection and interpretation similarity for CNN activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic activation dataset with a bundled classifier head.
    Synth(SynthArgs),
    /// Select coresets for every configured selector and budget.
    Select(RunArgs),
    /// Fit interpretation features on the full data or on one coreset.
    Interpret {
        #[command(flatten)]
        run: RunArgs,
        /// Coreset file; omit for the full-data reference.
        #[arg(long)]
        coreset: Option<PathBuf>,
    },
    /// Compare coreset features against full-data features.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        full: PathBuf,
        #[arg(long = "features")]
        features: PathBuf,
    },
    /// Mean and std of Φ across budgets, as JSON and a text table.
    Robustness(RunArgs),
    /// Render a heatmap panel: one row per sample, one column per feature set.
    Visualize {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "features", required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<String>,
        /// Directory holding `{sample_id}.png`; gray tiles are used otherwise.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a coreset chosen on another model's activations to this dataset.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        coreset: PathBuf,
    },
    /// select, interpret, evaluate and robustness over the whole grid.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    selectors: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<f64>>,
    /// Partial-whitening strength of the shape metric.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    viz_k: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.model {
            cfg.model = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.methods {
            cfg.methods = v.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
        }
        if let Some(v) = &self.selectors {
            cfg.selectors = v.iter().map(|s| s.parse()).collect::<Result<Vec<SelectionMethod>, _>>()?;
        }
        if let Some(v) = &self.budgets {
            cfg.budgets = v.clone();
        }
        if let Some(v) = self.alpha {
            cfg.metric.alpha = v;
        }
        if let Some(v) = self.viz_k {
            cfg.viz_k = v;
        }
        Ok(cfg)
    }

    fn open(&self) -> Result<Run, Error> {
        Run::open(self.config()?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Mixed,
    SingleActive,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 4)]
    height: usize,
    #[arg(long, default_value_t = 4)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    depth: usize,
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    early_layers: usize,
    #[arg(long, default_value_t = 16)]
    early_depth: usize,
    #[arg(long, value_enum, default_value_t = Layout::Mixed)]
    layout: Layout,
    /// Applies a seeded near-identity channel mix, standing in for a second model.
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long, default_value = "synthetic-a")]
    source_model: String,
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn transfer(run: &Run, coreset: &Path) -> Result<(), Error> {
    let dirs = run.interpret(Some(coreset))?;
    print_paths(&dirs);
    for (method, dir) in run.cfg.methods.iter().zip(&dirs) {
        let full = FeatureTag::full(*method).dir(&run.cfg.output_dir, &run.model);
        if full.join(FEATURES_FILE).exists() {
            let eval = run.evaluate(&full, dir)?;
            println!("{method}: phi {:.6} accuracy {:.4}", eval.similarity.phi_mean, eval.fidelity.accuracy);
        } else {
            log::info!("no full-data {method} features at {}; skipping evaluation", full.display());
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = SyntheticConfig {
                classes: a.classes,
                per_class: a.per_class,
                height: a.height,
                width: a.width,
                depth: a.depth,
                spread: a.spread,
                seed: a.seed,
                early_layers: a.early_layers,
                early_depth: a.early_depth,
                layout: match a.layout {
                    Layout::Mixed => ChannelLayout::Mixed,
                    Layout::SingleActive => ChannelLayout::SingleActive,
                },
                model_seed: a.model_seed,
                source_model: a.source_model,
            };
            println!("{}", make_synthetic(&cfg, &a.out)?.display());
        }
        Command::Select(r) => print_paths(&r.open()?.select()?),
        Command::Interpret { run, coreset } => print_paths(&run.open()?.interpret(coreset.as_deref())?),
        Command::Evaluate { run, full, features } => {
            let eval = run.open()?.evaluate(&full, &features)?;
            print_json(&eval.similarity);
            print_json(&eval.fidelity);
        }
        Command::Robustness(r) => print!("{}", r.open()?.robustness()?.1),
        Command::Visualize {
            run,
            features,
            samples,
            images,
            size,
            out,
        } => {
            let meta = run.open()?.visualize(&features, &samples, images.as_deref(), (size, size), &out)?;
            print_json(&meta);
        }
        Command::Transfer { run, coreset } => transfer(&run.open()?, &coreset)?,
        Command::Run(r) => print!("{}", r.open()?.run_all()?),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else if e.is_io() {
        4
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
