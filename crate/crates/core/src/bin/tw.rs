use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use tokio::net::TcpListener;

use trialworks::agents::Learner;
use trialworks::builtin::{local_orchestrator_with_threshold, services};
use trialworks::cli::{self, CampaignSpec, CliError, Controller, WatchTarget};
use trialworks::metrics::{serve_metrics, MetricsSink, DEFAULT_THRESHOLD};
use trialworks::orchestrator::server::{serve_tcp, serve_ws};
use trialworks::orchestrator::OrchestratorConfig;
use trialworks::service;

#[derive(Parser)]
#[command(name = "tw", about = "Run and inspect learning trials")]
struct Args {
    /// Orchestrator address.
    #[arg(long, global = true, default_value = cli::DEFAULT_ORCHESTRATOR)]
    orchestrator: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start one trial from a config file and print its id.
    Start { config: PathBuf },
    /// Run many trials, keeping a fixed number in flight.
    Campaign {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Print state changes until the watched trials end.
    Watch {
        trial_id: Option<String>,
        #[arg(long, conflicts_with = "trial_id")]
        all: bool,
        /// With --all, wait for at least this many trials to end.
        #[arg(long, default_value_t = 1)]
        expect: usize,
    },
    /// Summarise a trial log.
    Replay {
        log: PathBuf,
        #[arg(long)]
        summary: bool,
        /// Print aggregated rewards for one actor.
        #[arg(long, conflicts_with = "summary")]
        rewards: Option<String>,
    },
    /// End a trial and wait for it to finish.
    Terminate { trial_id: String },
    /// Print the orchestrator's metrics table.
    Metrics {
        #[arg(long, default_value = cli::DEFAULT_METRICS)]
        metrics: String,
    },
    /// Run an orchestrator with the built-in arena and players.
    Orchestrator {
        #[arg(long, env = "TW_PORT", default_value_t = 9000)]
        port: u16,
        #[arg(long, env = "TW_WS_PORT", default_value_t = 9001)]
        ws_port: u16,
        #[arg(long, env = "TW_METRICS_PORT", default_value_t = 9002)]
        metrics_port: u16,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Host the built-in services over TCP and register them.
    Services {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// First port; each implementation takes the next one.
        #[arg(long, default_value_t = 9100)]
        port: u16,
    },
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let args = Args::parse();
    let code = match run(args).await {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("tw: {e}");
            e.exit_code()
        }
    };
    std::io::stdout().flush().ok();
    std::process::exit(code);
}

async fn run(args: Args) -> Result<(), CliError> {
    let mut out = std::io::stdout();
    match args.command {
        Command::Start { config } => {
            let params = cli::load_params(&config)?;
            let mut ctl = Controller::connect(&args.orchestrator).await?;
            cli::cmd_start(&mut ctl, &params, &mut out).await.map(drop)
        }
        Command::Campaign { config, parallel, trials, base_seed, threshold } => {
            let params = cli::load_params(&config)?;
            let mut ctl = Controller::connect(&args.orchestrator).await?;
            let spec = CampaignSpec { params, parallel, trials, base_seed };
            cli::run_campaign(&mut ctl, &spec, &MetricsSink::new(threshold), &mut out).await.map(drop)
        }
        Command::Watch { trial_id, all, expect } => {
            let target = match (trial_id, all) {
                (Some(id), false) => WatchTarget::Trial(id),
                (None, true) => WatchTarget::All { expect },
                _ => return Err(CliError::Other("give a trial id or --all".into())),
            };
            let mut ctl = Controller::connect(&args.orchestrator).await?;
            cli::cmd_watch(&mut ctl, &target, &mut out).await
        }
        Command::Replay { log, summary, rewards } => match rewards {
            Some(actor) => cli::cmd_replay_rewards(&log, &actor, &mut out),
            None if summary => cli::cmd_replay_summary(&log, &mut out),
            None => Err(CliError::Other("give --summary or --rewards <actor>".into())),
        },
        Command::Terminate { trial_id } => {
            let mut ctl = Controller::connect(&args.orchestrator).await?;
            cli::cmd_terminate(&mut ctl, &trial_id, &mut out).await.map(drop)
        }
        Command::Metrics { metrics } => cli::cmd_metrics(&metrics, &mut out).await,
        Command::Orchestrator { port, ws_port, metrics_port, threshold } => {
            let (orch, _builtins) = local_orchestrator_with_threshold(OrchestratorConfig::from_env(), threshold);
            let tcp = TcpListener::bind(("0.0.0.0", port)).await?;
            let ws = TcpListener::bind(("0.0.0.0", ws_port)).await?;
            let http = TcpListener::bind(("0.0.0.0", metrics_port)).await?;
            tracing::info!("listening: tcp {port}, websocket {ws_port}, metrics {metrics_port}");
            tokio::select! {
                r = serve_tcp(orch.clone(), tcp) => r?,
                r = serve_ws(orch.clone(), ws) => r?,
                r = serve_metrics(Arc::clone(orch.metrics()), http) => r?,
            }
            Ok(())
        }
        Command::Services { host, port } => {
            let mut tasks = tokio::task::JoinSet::new();
            for (i, (class, implementation, svc)) in services(Arc::new(Learner::default())).into_iter().enumerate() {
                let listener = TcpListener::bind((host.as_str(), port + i as u16)).await?;
                let endpoint = listener.local_addr()?.to_string();
                tasks.spawn(async move { service::serve_tcp(listener, svc).await.map_err(|e| e.to_string()) });
                let orch = args.orchestrator.clone();
                tasks.spawn(async move {
                    service::register_and_heartbeat(&orch, class, implementation, &endpoint, Duration::from_secs(1)).await
                });
            }
            // Runs until a listener fails or the orchestrator goes away.
            match tasks.join_next().await {
                Some(Ok(Err(e))) => Err(CliError::Connect(e)),
                _ => Ok(()),
            }
        }
    }
}
