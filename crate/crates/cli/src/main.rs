use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use fedpkg::config::RunConfig;
use fedpkg::eval::{rows_to_csv, Averaging, DEFAULT_K_PREDICT};
use fedpkg::federation::{FederationConfig, ModelPreset};
use fedpkg::pipeline::{
    self, BuildDatasetOptions, DatasetSource, EvalOptions, SynthOptions, TrainMode,
    DEFAULT_EMBEDDING_DIM,
};
use fedpkg::synth::SynthConfig;
use log::info;

/// Environment variable read for the log filter, e.g. `FEDPKG_LOG=debug`.
const LOG_ENV: &str = "FEDPKG_LOG";

#[derive(Parser)]
#[command(
    name = "fedpkg",
    version,
    about = "Federated preference fine-tuning over personal knowledge graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build train/test examples, a catalog and per-client graphs from a corpus.
    #[command(group(ArgGroup::new("source").required(true).args(["convs", "ratings"])))]
    BuildDataset {
        /// Annotated conversation logs (JSON lines).
        #[arg(long)]
        convs: Option<PathBuf>,
        /// Star ratings (JSON lines).
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of desirable examples held out for testing, in (0, 1).
        #[arg(long, default_value_t = 0.1, value_parser = open_unit_interval)]
        holdout: f64,
        #[arg(long, default_value_t = DEFAULT_EMBEDDING_DIM)]
        embedding_dim: usize,
    },
    /// Append masking and redundancy examples generated from client graphs.
    Synth {
        #[arg(long = "in")]
        input: PathBuf,
        /// Folder of per-client graphs written by build-dataset.
        #[arg(long)]
        pkgs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3, value_parser = open_unit_interval)]
        mask_frac: f64,
        #[arg(long, default_value_t = 2)]
        mask_count: usize,
        #[arg(long, default_value_t = 1)]
        redundancy_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "movie")]
        domain: String,
    },
    /// Train an adapter federated, centralized or per client.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the global adapter every N rounds (federated mode).
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Score a test set and write metrics and predictions.
    Eval {
        /// Adapter checkpoint; the untrained base model when omitted.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        testset: PathBuf,
        /// Catalog file; defaults to `catalog.json` next to the test set.
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_K_PREDICT)]
        k: usize,
        /// Macro-average precision, recall and F1 over cases.
        #[arg(long = "macro")]
        macro_avg: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the centralized / federated / local-only grid with and without
    /// synthetic data.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapter communication cost per client and per training run.
    #[command(group(ArgGroup::new("size").args(["params", "model_preset"])))]
    Commcost {
        /// Trainable parameter count.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        params: Option<u64>,
        #[arg(long, value_parser = parse_preset)]
        model_preset: Option<ModelPreset>,
        #[arg(long, default_value_t = 128)]
        rounds: usize,
        #[arg(long, default_value_t = 4)]
        clients: usize,
        #[arg(long, default_value_t = 4)]
        bytes_per_param: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Federated,
    Centralized,
    Local,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Federated => TrainMode::Federated,
            Mode::Centralized => TrainMode::Centralized,
            Mode::Local => TrainMode::Local,
        }
    }
}

fn open_unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie strictly between 0 and 1, got {v}"))
    }
}

fn parse_preset(s: &str) -> Result<ModelPreset, String> {
    ModelPreset::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ModelPreset::ALL.iter().map(|p| p.name()).collect();
        format!("unknown preset `{s}`, expected one of {}", names.join(", "))
    })
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildDataset {
            convs,
            ratings,
            out,
            seed,
            holdout,
            embedding_dim,
        } => {
            let source = match (convs, ratings) {
                (Some(p), _) => DatasetSource::Conversations(p),
                (None, Some(p)) => DatasetSource::Ratings(p),
                (None, None) => unreachable!("clap requires one source"),
            };
            let opts = BuildDatasetOptions {
                seed,
                holdout,
                embedding_dim,
                synth: SynthConfig {
                    rng_seed: seed,
                    ..SynthConfig::default()
                },
                ..BuildDatasetOptions::new(source, out)
            };
            let s = pipeline::build_dataset(&opts)?;
            println!(
                "{}: {} clients, {} train examples ({} real, {} synthetic), {} test examples, {} catalog entities",
                s.domain,
                s.counts.clients,
                s.train_examples,
                s.counts.real,
                s.counts.synthetic,
                s.test_examples,
                s.catalog_entities
            );
        }
        Command::Synth {
            input,
            pkgs,
            out,
            mask_frac,
            mask_count,
            redundancy_count,
            seed,
            domain,
        } => {
            let s = pipeline::synthesize(&SynthOptions {
                input,
                pkgs,
                out,
                domain,
                synth: SynthConfig {
                    mask_count_per_client: mask_count,
                    redundancy_count_per_client: redundancy_count,
                    mask_fraction: mask_frac,
                    rng_seed: seed,
                },
            })?;
            println!(
                "{} examples: {} real, {} synthetic",
                s.total, s.real, s.synthetic
            );
        }
        Command::Train {
            mode,
            config,
            out,
            checkpoint_every,
        } => {
            let cfg = load_config(&config)?;
            let s = pipeline::train(mode.into(), &cfg, &out, checkpoint_every)?;
            match s.total_bytes {
                Some(bytes) => println!(
                    "trained over {} clients in {} rounds, {bytes} bytes exchanged",
                    s.clients, s.rounds
                ),
                None if !s.local_clients.is_empty() => println!(
                    "trained {} local adapters: {}",
                    s.local_clients.len(),
                    s.local_clients.join(", ")
                ),
                None => println!("trained on {} clients", s.clients),
            }
        }
        Command::Eval {
            adapter,
            testset,
            catalog,
            k,
            macro_avg,
            out,
        } => {
            let catalog = match catalog {
                Some(c) => c,
                None => testset
                    .parent()
                    .map(|d| d.join("catalog.json"))
                    .context("cannot locate catalog.json next to the test set; pass --catalog")?,
            };
            let r = pipeline::evaluate_files(&EvalOptions {
                adapter,
                testset,
                catalog,
                k,
                averaging: if macro_avg {
                    Averaging::Macro
                } else {
                    Averaging::Micro
                },
                out_dir: out,
            })?;
            println!(
                "{} cases: precision {:.4} recall {:.4} f1 {:.4} mrr {:.4} hits@1 {:.4} hits@3 {:.4} hits@10 {:.4}",
                r.n_cases,
                r.precision,
                r.recall,
                r.f1,
                r.mrr,
                r.hits(1),
                r.hits(3),
                r.hits(10)
            );
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(&config)?;
            let rows = pipeline::ablate(&cfg, &out)?;
            print!("{}", rows_to_csv(&rows));
        }
        Command::Commcost {
            params,
            model_preset,
            rounds,
            clients,
            bytes_per_param,
        } => {
            let cfg = FederationConfig {
                total_rounds: rounds,
                clients_per_round: clients,
                bytes_per_param,
                ..FederationConfig::default()
            };
            for (name, r) in pipeline::comm_costs(params, model_preset, &cfg)? {
                println!(
                    "{name}: {} ({} bytes per client one-way per round, {} bytes total over {} rounds x {} clients)",
                    r.summary(),
                    r.per_round_client_bytes,
                    r.total_server_bytes,
                    r.total_rounds,
                    r.clients_per_round
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    info!("fedpkg {}", env!("CARGO_PKG_VERSION"));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // library errors often repeat their cause in their own message
            let mut shown = e.to_string();
            for cause in e.chain().skip(1) {
                let text = cause.to_string();
                if !shown.contains(&text) {
                    eprintln!("  caused by: {text}");
                    shown = text;
                }
            }
            ExitCode::FAILURE
        }
    }
}
