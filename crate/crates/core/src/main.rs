//! Command-line entry point: run experiments, sweep one factor, serve a
//! federation over TCP for externally started clients, or be one client.

use std::error::Error;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use fedsim::harness::{self, ExperimentConfig, SweepFactor, METRICS_HEADER};
use fedsim::head::HeadModel;
use fedsim::net::{run_client, start_tcp_server, NetError};
use fedsim::server::{run_federation, FederationConfig};
use fedsim::sim::read_shard_file;

/// Upper bound on one server→client exchange, so a wedged client cannot
/// hang the federation forever.
const REQUEST_TIMEOUT: Duration = Duration::from_secs(120);
/// How often `serve` reports registration progress while waiting.
const WAIT_REPORT_INTERVAL: Duration = Duration::from_secs(60);

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: CommandKind,
}

#[derive(Subcommand)]
enum CommandKind {
    /// Run one experiment from a JSON config and emit round metrics as CSV.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Directory to write metrics.csv into; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the experiment once per value of one factor and compare.
    Sweep {
        /// Experiment config (JSON); the swept factor overrides it per run.
        #[arg(long)]
        config: PathBuf,
        /// Factor to vary: local_epochs, clients_per_round, or tau.
        #[arg(long)]
        factor: SweepFactor,
        /// Comma-separated factor values, e.g. 1,5,10.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Directory for per-value metrics_<factor>_<value>.csv files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a federation over TCP and emit round metrics as CSV.
    ///
    /// Training hyper-parameters, cost profiles, cutoffs, and seeds come
    /// from the config; clients register on their own. With the deadline
    /// strategy every connecting client id must appear in the config's
    /// client list so its processor class is known.
    Serve {
        /// Address to listen on, host:port.
        #[arg(long)]
        bind: String,
        /// Number of rounds to run once enough clients registered.
        #[arg(long)]
        rounds: u64,
        /// Registrations to wait for before starting.
        #[arg(long)]
        min_clients: usize,
        /// Aggregation strategy.
        #[arg(long, value_parser = ["fedavg", "deadline"])]
        strategy: String,
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Connect to a server and train on a local shard until dismissed.
    Client {
        /// Server address, host:port.
        #[arg(long)]
        server: String,
        /// Unique client identifier to register under.
        #[arg(long)]
        client_id: String,
        /// Shard file holding this client's data.
        #[arg(long)]
        shard: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(inner) = source {
                eprintln!("  caused by: {inner}");
                source = inner.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Box<dyn Error>> {
    match cli.command {
        CommandKind::Run { config, out } => run_cmd(&config, out.as_deref()),
        CommandKind::Sweep {
            config,
            factor,
            values,
            out,
        } => sweep_cmd(&config, factor, &values, out.as_deref()),
        CommandKind::Serve {
            bind,
            rounds,
            min_clients,
            strategy,
            config,
        } => serve_cmd(&bind, rounds, min_clients, &strategy, &config),
        CommandKind::Client {
            server,
            client_id,
            shard,
        } => {
            let shard = read_shard_file(&shard)?;
            run_client(&server, &client_id, shard)?;
            Ok(())
        }
    }
}

fn run_cmd(config: &std::path::Path, out: Option<&std::path::Path>) -> Result<(), Box<dyn Error>> {
    let cfg = harness::load_config_file(config)?;
    let output = harness::run_experiment(&cfg, None)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            harness::write_metrics(&output.metrics, &path)?;
            println!("{}", path.display());
        }
        None => print!("{}", harness::render_metrics(&output.metrics)),
    }
    Ok(())
}

fn sweep_cmd(
    config: &std::path::Path,
    factor: SweepFactor,
    values: &[f64],
    out: Option<&std::path::Path>,
) -> Result<(), Box<dyn Error>> {
    let cfg = harness::load_config_file(config)?;
    let runs = harness::sweep(&cfg, factor, values, None)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for run in &runs {
            if let Ok(output) = &run.outcome {
                let path = dir.join(format!("metrics_{factor}_{}.csv", run.value));
                harness::write_metrics(&output.metrics, &path)?;
            }
        }
    }
    print!("{}", harness::sweep_summary(factor, &runs));
    let failed = runs.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(format!("{failed} of {} sweep points failed", runs.len()).into());
    }
    Ok(())
}

fn serve_cmd(
    bind: &str,
    rounds: u64,
    min_clients: usize,
    strategy: &str,
    config: &std::path::Path,
) -> Result<(), Box<dyn Error>> {
    let mut cfg: ExperimentConfig = harness::load_config_file(config)?;
    cfg.rounds = rounds;
    cfg.strategy.kind = strategy.to_owned();
    if cfg.strategy.kind == "fedavg" {
        // Cutoffs belong to the deadline strategy; drop them rather than
        // reject a config written for the other flag.
        cfg.strategy.tau_seconds_by_class.clear();
    }
    cfg.validate()?;

    let server = start_tcp_server(bind, Some(REQUEST_TIMEOUT))?;
    eprintln!(
        "listening on {}; waiting for {min_clients} client(s)",
        server.local_addr()
    );
    loop {
        match server.wait_for_clients(min_clients, WAIT_REPORT_INTERVAL) {
            Ok(()) => break,
            Err(NetError::StartupTimeout { got, .. }) => {
                eprintln!("still waiting: {got}/{min_clients} client(s) registered");
            }
            Err(e) => {
                server.shutdown();
                return Err(e.into());
            }
        }
    }

    let registered = server.manager().len();
    let fed_cfg = FederationConfig {
        rounds: cfg.rounds,
        clients_per_round: cfg.effective_clients_per_round().min(registered),
        initial_parameters: HeadModel::random_init(
            cfg.dataset.n_features,
            cfg.dataset.n_classes,
            cfg.seeds.model,
        )
        .to_parameters()?,
        sampling_seed: cfg.seeds.sampling,
        profiles: cfg.profiles()?,
    };
    let strategy = harness::build_strategy(&cfg)?;

    println!("# config_hash={}", cfg.config_hash());
    println!("# evaluation=federated");
    println!("{METRICS_HEADER}");
    let outcome = run_federation(
        server.manager(),
        strategy.as_ref(),
        &fed_cfg,
        |record, _| {
            print!("{}", harness::render_metrics_row(record));
            let _ = std::io::stdout().flush();
        },
    );
    server.shutdown();
    outcome?;
    Ok(())
}
