use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use resumable_proxy::client_proxy::{ProxyConfig, RecoveryMode};
use resumable_proxy::gateway::Gateway;
use resumable_proxy::live::{GatewayServer, HttpOrigin, LiveConfig, ProxyServer};
use resumable_proxy::protocol::{rewrite_request, OriginRequest};
use resumable_proxy::sensing::{delay_bound, simulate_detection_delay};
use resumable_proxy::simharness::{self, run_scenario, Scenario, SimRun, StackConfig, TransferMetrics};

const SEED_ENV: &str = "SW_SEED";

#[derive(Parser)]
#[command(name = "resumable-proxy", version, about = "Resumable HTTP transfers across network handoffs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Recovery {
    Packet,
    Session,
}

#[derive(clap::Args)]
struct StackArgs {
    /// Seconds between interface polls.
    #[arg(long, default_value_t = 10.0)]
    poll_interval: f64,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, value_enum, default_value = "packet")]
    recovery: Recovery,
    /// Failures tolerated per transfer; unlimited when absent.
    #[arg(long)]
    retry_budget: Option<u32>,
}

impl StackArgs {
    fn config(&self, preemption: bool) -> StackConfig {
        StackConfig {
            preemption,
            poll_interval: self.poll_interval,
            workers: self.workers,
            recovery: match self.recovery {
                Recovery::Packet => RecoveryMode::PacketLevel,
                Recovery::Session => RecoveryMode::SessionLevel,
            },
            retry_budget: self.retry_budget,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (or a canned scenario name) and write a report.
    Run {
        scenario: String,
        #[arg(long, value_enum, default_value = "on")]
        policy: Switch,
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[command(flatten)]
        stack: StackArgs,
    },
    /// Run a scenario with the policy on and off and compare overall times.
    Compare {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        stack: StackArgs,
    },
    /// Detection delay bound against simulation over a (T, lambda) grid.
    DelaySweep {
        /// Polling intervals in seconds, comma separated.
        #[arg(long = "T", value_delimiter = ',', num_args = 1..)]
        t: Vec<f64>,
        /// Change rates per second, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        lambda: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        cycles: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the gateway request for a fresh and a resumed fetch.
    Golden {
        #[arg(long, default_value = "http://205.132.6.11/scripts/dis.dll")]
        gateway: String,
        #[arg(long, default_value = "http://www.cnn.com/draft.ppt")]
        url: String,
        #[arg(long, default_value_t = 203_223)]
        offset: u64,
    },
    /// List the canned scenarios.
    Scenarios,
    /// Serve the gateway over TCP, fetching from real HTTP origins.
    Gateway {
        #[arg(long, default_value = "127.0.0.1:8081")]
        listen: SocketAddr,
    },
    /// Serve the browser-facing proxy on a loopback address.
    Proxy {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        #[arg(long, default_value = resumable_proxy::client_proxy::DEFAULT_GATEWAY_BASE)]
        gateway: String,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 10.0)]
        poll_interval: f64,
    },
}

/// Flag, then environment, then `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, String> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| format!("{SEED_ENV}={v} is not an unsigned integer")),
        Err(_) => Ok(fallback),
    }
}

fn emit(out: Option<&PathBuf>, text: &str) -> io::Result<()> {
    match out {
        Some(path) => fs::write(path, text),
        None => io::stdout().write_all(text.as_bytes()),
    }
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn load(name: &str) -> Result<Scenario, ExitCode> {
    Scenario::resolve(name).map_err(|e| fail(format!("{name}: {e}")))
}

fn run_one(scenario: &Scenario, cfg: &StackConfig, seed: u64) -> Result<SimRun, ExitCode> {
    run_scenario(scenario, cfg, seed).map_err(fail)
}

fn exit_for(rows: &[TransferMetrics]) -> ExitCode {
    if rows.iter().all(|r| r.completed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            scenario,
            policy,
            seed,
            out,
            format,
            stack,
        } => {
            let sc = match load(&scenario) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let seed = match resolve_seed(seed, sc.seed) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let run = match run_one(&sc, &stack.config(matches!(policy, Switch::On)), seed) {
                Ok(r) => r,
                Err(code) => return code,
            };
            let text = match format {
                Format::Csv => simharness::to_csv(&run.transfers),
                Format::Json => simharness::to_json(&run.transfers),
            };
            if let Err(e) = emit(out.as_ref(), &text) {
                return fail(e);
            }
            exit_for(&run.transfers)
        }
        Command::Compare {
            scenario,
            seed,
            out,
            stack,
        } => {
            let sc = match load(&scenario) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let seed = match resolve_seed(seed, sc.seed) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let (on, off) = match (
                run_one(&sc, &stack.config(true), seed),
                run_one(&sc, &stack.config(false), seed),
            ) {
                (Ok(on), Ok(off)) => (on, off),
                (Err(code), _) | (_, Err(code)) => return code,
            };
            let mut rows = Vec::new();
            let mut text = String::from("policy,resource_id,overall_time_s,per_interface_bytes,completed\n");
            for (label, run) in [("on", &on), ("off", &off)] {
                for r in &run.transfers {
                    let ifaces: Vec<String> = r.per_interface_bytes.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    text.push_str(&format!(
                        "{label},{},{:.2},{},{}\n",
                        r.resource_id,
                        r.overall_time_s,
                        ifaces.join(";"),
                        r.completed
                    ));
                    rows.push(r.clone());
                }
            }
            let total = |run: &SimRun| run.transfers.iter().map(|t| t.overall_time_s).fold(0.0, f64::max);
            let ratio = total(&off) / total(&on);
            text.push_str(&format!("ratio_off_over_on,{ratio:.4}\n"));
            if let Err(e) = emit(out.as_ref(), &text) {
                return fail(e);
            }
            exit_for(&rows)
        }
        Command::DelaySweep {
            t,
            lambda,
            cycles,
            seed,
            out,
        } => {
            if t.is_empty() || lambda.is_empty() {
                return fail("empty grid: give at least one --T and one --lambda value");
            }
            if let Some(bad) = t.iter().chain(&lambda).find(|v| !(**v > 0.0 && v.is_finite())) {
                return fail(format!("grid values must be positive, got {bad}"));
            }
            if cycles == 0 {
                return fail("--cycles must be positive");
            }
            let seed = match resolve_seed(seed, 0) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let mut text = String::from("T,lambda,bound,empirical_mean,stderr\n");
            for &tt in &t {
                for &l in &lambda {
                    let bound = delay_bound(tt, l).expect("validated");
                    let est = simulate_detection_delay(tt, l, cycles, seed).expect("validated");
                    text.push_str(&format!("{tt},{l},{bound:.6},{:.6},{:.6}\n", est.mean, est.stderr));
                }
            }
            match emit(out.as_ref(), &text) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Command::Golden { gateway, url, offset } => {
            let origin = OriginRequest::get(url);
            let blocks = [0, offset].map(|o| rewrite_request(&origin, &gateway, o));
            for b in blocks {
                match b {
                    Ok(text) => print!("{text}"),
                    Err(e) => return fail(e),
                }
            }
            ExitCode::SUCCESS
        }
        Command::Scenarios => {
            for name in Scenario::canned_names() {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Command::Gateway { listen } => {
            let gw = Arc::new(Gateway::new(HttpOrigin::default()));
            let server = match GatewayServer::start(listen, gw) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            eprintln!("gateway listening on {}", server.base_url());
            loop {
                std::thread::park();
            }
        }
        Command::Proxy {
            listen,
            gateway,
            workers,
            poll_interval,
        } => {
            if !(poll_interval > 0.0 && poll_interval.is_finite()) {
                return fail("--poll-interval must be positive");
            }
            let cfg = LiveConfig {
                proxy: ProxyConfig {
                    workers,
                    gateway_base: gateway,
                    retain_payload: false,
                    ..ProxyConfig::default()
                },
                poll_interval: Duration::from_secs_f64(poll_interval),
                ..LiveConfig::default()
            };
            let server = match ProxyServer::start(listen, cfg) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            eprintln!("proxy listening on {}", server.local_addr());
            loop {
                std::thread::park();
            }
        }
    }
}
