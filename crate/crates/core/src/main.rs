use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::Utc;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hitl3d::corpus::load_corpus;
use hitl3d::service::http::{self, AppState};
use hitl3d::service::{ServiceConfig, System, DATA_DIR_ENV};
use hitl3d::simulation::{self, RunConfig, SimClock};

#[derive(Parser)]
#[command(name = "hitl3d", version, about = "Moderation pipeline for shared 3D-printing designs")]
struct Cli {
    /// Data directory holding the audit log, assets, meshes and model snapshot.
    #[arg(long, env = DATA_DIR_ENV, default_value = "data", global = true)]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Population {
    Mixed,
    Homogeneous,
}

#[derive(Subcommand)]
enum Command {
    /// Load a JSON-lines corpus (with `images/` beside it) into the data directory.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the initial model on a random seed set and queue predictions for review.
    SeedTrain {
        #[arg(long, default_value_t = 1077)]
        pos: usize,
        #[arg(long, default_value_t = 1077)]
        neg: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Run the moderator simulation in memory and write metrics plus the audit log.
    Simulate {
        #[arg(long, default_value_t = 100)]
        rounds: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Population::Mixed)]
        population: Population,
        #[arg(long, default_value_t = 1077)]
        pos: usize,
        #[arg(long, default_value_t = 1077)]
        neg: usize,
        #[arg(long, default_value = "sim-out")]
        out: PathBuf,
    },
    /// Write a synthetic corpus in the format `ingest` reads.
    GenerateCorpus {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1077)]
        pos: usize,
        #[arg(long, default_value_t = 1077)]
        neg: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the audit log as JSON lines.
    ExportAudit {
        #[arg(long)]
        out: PathBuf,
    },
}

fn print(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn open(dir: &Path) -> Result<System, Box<dyn std::error::Error>> {
    Ok(System::open(dir, ServiceConfig::default(), Utc::now())?)
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Ingest { corpus } => {
            let files = load_corpus(&corpus)?;
            let mut system = open(&cli.data_dir)?;
            let now = Utc::now();
            let report = system.load_corpus_files(files, now)?;
            let queued = if system.model().is_ok() { system.enqueue_all(now)? } else { 0 };
            print(&report);
            tracing::info!(queued, "ingest done");
        }
        Command::SeedTrain { pos, neg, seed, epochs } => {
            let mut system = open(&cli.data_dir)?;
            let now = Utc::now();
            let report = system.seed_train(pos, neg, seed, epochs, now)?;
            let queued = system.enqueue_all(now)?;
            print(&serde_json::json!({ "seed": report, "queued": queued }));
        }
        Command::Serve { port, host } => {
            let system = open(&cli.data_dir)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(http::serve(AppState::new(system), SocketAddr::new(host, port)))?;
        }
        Command::Simulate { rounds, seed, population, pos, neg, out } => {
            let corpus = simulation::generate_corpus(seed, pos, neg);
            let population = match population {
                Population::Mixed => simulation::mixed(0.2, 0.8),
                Population::Homogeneous => simulation::homogeneous(0.5),
            };
            let run = RunConfig { rounds, rng_seed: seed, ..RunConfig::default() };
            let mut clock = SimClock::default();
            let mut system = simulation::build_system(&corpus, &population, &run, &mut clock)?;
            let metrics = simulation::run_rounds(&mut system, &corpus, &population, &run, &mut clock)?;
            metrics.write(&out)?;
            system.write_audit_file(&out.join("audit.log"))?;
            print(&metrics.last());
        }
        Command::GenerateCorpus { seed, pos, neg, out } => {
            simulation::generate_corpus(seed, pos, neg).write(&out)?;
            println!("{}", out.join("corpus.jsonl").display());
        }
        Command::ExportAudit { out } => {
            let system = open(&cli.data_dir)?;
            let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
            system.export_audit(&mut file)?;
            std::io::Write::flush(&mut file)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
