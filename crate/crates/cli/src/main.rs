use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use stainkit::exec::Execution;
use stainkit::pipeline::{
    cmd_evaluate, cmd_normalize, cmd_select_template, cmd_tile, cmd_train, EdgePolicy, Method, RunConfig,
    TemplateSource,
};

/// Stain normalization for histopathology tiles.
#[derive(Parser, Debug)]
#[command(name = "stainkit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pick the image whose color histogram is closest to the dataset mean.
    SelectTemplate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input_dir: Option<PathBuf>,
        /// Directory for the winning and mean histograms (default: beside the winner).
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Cut images into fixed-size tiles.
    Tile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input_dir: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        tile_size: Option<usize>,
        /// retain | discard
        #[arg(long, value_parser = parse_edge_policy)]
        edge_policy: Option<EdgePolicy>,
    },
    /// Normalize every image of a directory toward a template.
    Normalize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input_dir: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// reinhard | macenko | vahadane | pidr
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Template image path, or "auto" to select one from the inputs.
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the restaining network on two color domains.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        domain_a: Option<PathBuf>,
        #[arg(long)]
        domain_b: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Score normalized images against references (SSIM, MS-SSIM, UQI).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        reference_dir: Option<PathBuf>,
        /// Metric CSV path (default: metrics.csv in the output directory).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed and STAINKIT_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: stainkit::Error| e.to_string())
}

fn parse_edge_policy(s: &str) -> Result<EdgePolicy, String> {
    match s.to_ascii_lowercase().as_str() {
        "retain" => Ok(EdgePolicy::Retain),
        "discard" => Ok(EdgePolicy::Discard),
        _ => Err(format!("unknown edge policy {s:?}; expected retain or discard")),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply_env()?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(t) = common.threads {
        config.threads = t;
    }
    Ok(config)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

enum Outcome {
    Done,
    Partial,
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::SelectTemplate {
            common,
            input_dir,
            output_dir,
            bins,
        } => {
            let mut config = load_config(&common)?;
            set_opt(&mut config.input_dir, input_dir);
            set_opt(&mut config.output_dir, output_dir);
            set(&mut config.bins, bins);
            let input = config.input_dir.clone().context("input_dir is not set")?;
            let mode = Execution::from_threads(if config.threads == 0 { 2 } else { config.threads });
            let choice = stainkit::exec::with_threads(config.threads, || {
                cmd_select_template(&input, config.bins, config.output_dir.as_deref(), mode)
            })?;
            println!("{}", choice.path.display());
            log::info!(
                "distance to mean histogram {:.6}; histograms in {} and {}",
                choice.distance,
                choice.histogram_path.display(),
                choice.mean_histogram_path.display()
            );
            Ok(if choice.skipped.is_empty() { Outcome::Done } else { Outcome::Partial })
        }
        Command::Tile {
            common,
            input_dir,
            output_dir,
            tile_size,
            edge_policy,
        } => {
            let mut config = load_config(&common)?;
            set_opt(&mut config.input_dir, input_dir);
            set_opt(&mut config.output_dir, output_dir);
            set(&mut config.tile.tile_size, tile_size);
            set(&mut config.tile.edge_policy, edge_policy);
            let manifest = cmd_tile(&config)?;
            let tiles: usize = manifest.files.iter().map(|f| f.parts.len()).sum();
            println!("{} images -> {tiles} tiles, {} skipped", manifest.succeeded(), manifest.skipped());
            Ok(if manifest.skipped() == 0 { Outcome::Done } else { Outcome::Partial })
        }
        Command::Normalize {
            common,
            input_dir,
            output_dir,
            method,
            template,
            checkpoint,
        } => {
            let mut config = load_config(&common)?;
            set_opt(&mut config.input_dir, input_dir);
            set_opt(&mut config.output_dir, output_dir);
            set(&mut config.method, method);
            set(&mut config.template, template.map(TemplateSource::from));
            set_opt(&mut config.checkpoint, checkpoint);
            let manifest = cmd_normalize(&config)?;
            println!(
                "{} normalized with {}, {} skipped",
                manifest.succeeded(),
                config.method,
                manifest.skipped()
            );
            Ok(if manifest.skipped() == 0 { Outcome::Done } else { Outcome::Partial })
        }
        Command::Train {
            common,
            domain_a,
            domain_b,
            checkpoint,
            steps,
            loss_csv,
        } => {
            let mut config = load_config(&common)?;
            set_opt(&mut config.domain_a_dir, domain_a);
            set_opt(&mut config.domain_b_dir, domain_b);
            set_opt(&mut config.checkpoint, checkpoint);
            set(&mut config.train.steps, steps);
            set_opt(&mut config.train.loss_csv, loss_csv);
            let summary = cmd_train(&config)?;
            let last = summary.history.last().map_or(0.0, |r| r.total);
            println!(
                "{} steps, final total loss {last:.6}; checkpoint {}, loss curve {}",
                summary.history.len(),
                summary.checkpoint.display(),
                summary.loss_csv.display()
            );
            Ok(Outcome::Done)
        }
        Command::Evaluate {
            common,
            output_dir,
            reference_dir,
            csv,
        } => {
            let mut config = load_config(&common)?;
            set_opt(&mut config.output_dir, output_dir);
            set_opt(&mut config.reference_dir, reference_dir);
            let summary = cmd_evaluate(&config, csv.as_deref())?;
            match summary.report.mean() {
                Some(m) => println!(
                    "{} pairs: ssim {:.4}, ms-ssim {:.4}, uqi {:.4}",
                    summary.report.rows.len(),
                    m.ssim,
                    m.ms_ssim,
                    m.uqi
                ),
                None => println!("no matched pairs"),
            }
            for u in &summary.unmatched {
                println!("unmatched {u}");
            }
            Ok(if summary.is_partial() { Outcome::Partial } else { Outcome::Done })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
