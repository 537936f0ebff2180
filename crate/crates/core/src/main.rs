use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::Serialize;

use miso::enclave::SealMode;
use miso::harness::{self, LoginRequest, Scenario};
use miso::stack::{self, Stack, StackDescriptor, StackOptions, Topology};

#[derive(Parser)]
#[command(name = "miso", version, about = "Run and exercise a local MISO stack")]
struct Cli {
    /// State directory (default: $MISO_STATE_DIR, else ./miso-state).
    #[arg(long, global = true)]
    state_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start IdPs, the mixer and RPs on loopback and serve until SIGTERM.
    Up(UpArgs),
    /// Stop a running stack; --wipe also empties the state directory.
    Down {
        #[arg(long)]
        wipe: bool,
    },
    /// Probe every endpoint of the running stack.
    Status,
    /// Run an experiment against a private, throwaway stack.
    #[command(subcommand)]
    Harness(HarnessCommand),
}

#[derive(clap::Args)]
struct UpArgs {
    #[arg(long, default_value_t = 3)]
    idps: usize,
    #[arg(long, default_value_t = 2)]
    rps: usize,
    #[arg(long, default_value = "mrenclave")]
    seal_mode: SealMode,
    /// Also run an RP that uses the first IdP directly.
    #[arg(long)]
    baseline: bool,
    /// First of a contiguous port range; 0 picks free ports.
    #[arg(long, default_value_t = 0)]
    base_port: u16,
    #[arg(long, default_value_t = 8)]
    users: usize,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// RP index to log in to.
    #[arg(long, default_value_t = 0)]
    rp: usize,
    /// Comma-separated IdP ids (default: the first IdP, or all for subsets).
    #[arg(long)]
    idps: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    /// Write the machine-readable result here.
    #[arg(long)]
    json_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// PBKDF2 iterations for fixture passwords.
    #[arg(long, default_value_t = miso::idp::DEFAULT_PBKDF2_ITERATIONS)]
    pbkdf2_iterations: u32,
}

#[derive(Subcommand)]
enum HarnessCommand {
    /// One login, printing the RP's view.
    Login {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "alice")]
        user: String,
    },
    /// Unlinkability games.
    Game {
        #[arg(value_enum)]
        game: Game,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Enroll with every IdP, then try each non-empty subset.
    Subsets {
        #[command(flatten)]
        common: Common,
    },
    /// Open-loop latency measurement; without --scenario runs all three
    /// and reports the MISO/baseline ratio.
    Load {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long, default_value_t = 50.0)]
        rate: f64,
        /// Seconds.
        #[arg(long, default_value_t = 30)]
        duration: u64,
        #[arg(long, default_value_t = 16)]
        users: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Game {
    Idp,
    Rp,
    Collusive,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let state_dir = cli.state_dir.unwrap_or_else(stack::default_state_dir);
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let result = rt.block_on(async {
        match cli.command {
            Command::Up(args) => up(&state_dir, args).await,
            Command::Down { wipe } => down(&state_dir, wipe).await,
            Command::Status => status(&state_dir).await,
            Command::Harness(cmd) => harness(cmd).await,
        }
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("miso: {e}");
            ExitCode::from(2)
        }
    }
}

type Outcome = Result<bool, Box<dyn std::error::Error>>;

async fn up(state_dir: &Path, args: UpArgs) -> Outcome {
    if let Some(d) = StackDescriptor::load(state_dir)? {
        if d.pid != std::process::id() && process_alive(d.pid) {
            return Err(format!(
                "a stack is already running from {} (pid {})",
                state_dir.display(),
                d.pid
            )
            .into());
        }
    }
    let mut opts = StackOptions::new(state_dir);
    opts.topology = Topology {
        idps: args.idps,
        rps: args.rps,
        seal_mode: args.seal_mode,
        baseline_rp: args.baseline,
    };
    opts.base_port = args.base_port;
    opts.users = args.users;
    let stack = Stack::up(opts).await?;
    println!("{}", serde_json::to_string_pretty(stack.descriptor())?);
    wait_for_signal().await;
    stack.down(false).await?;
    Ok(true)
}

async fn wait_for_signal() {
    let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("SIGTERM handler");
    tokio::select! {
        _ = term.recv() => {}
        _ = tokio::signal::ctrl_c() => {}
    }
}

fn process_alive(pid: u32) -> bool {
    // SAFETY: signal 0 only checks that the pid exists.
    unsafe { libc::kill(pid as libc::pid_t, 0) == 0 }
}

async fn down(state_dir: &Path, wipe: bool) -> Outcome {
    if let Some(d) = StackDescriptor::load(state_dir)? {
        if process_alive(d.pid) {
            // SAFETY: plain kill(2) on a pid read from our own descriptor.
            unsafe { libc::kill(d.pid as libc::pid_t, libc::SIGTERM) };
            for _ in 0..100 {
                if !process_alive(d.pid) {
                    break;
                }
                tokio::time::sleep(Duration::from_millis(100)).await;
            }
            if process_alive(d.pid) {
                return Err(format!("pid {} did not exit after SIGTERM", d.pid).into());
            }
        }
    }
    if wipe {
        stack::wipe_dir(state_dir)?;
    }
    Ok(true)
}

async fn status(state_dir: &Path) -> Outcome {
    let Some(d) = StackDescriptor::load(state_dir)? else {
        println!("no stack descriptor in {}", state_dir.display());
        return Ok(false);
    };
    let client = miso::backchannel::http_client();
    let mut all_up = true;
    println!("measurement {}", hex::encode(d.measurement));
    for e in d.endpoints() {
        let ok = client
            .get(format!("{}/healthz", e.url))
            .timeout(Duration::from_secs(2))
            .send()
            .await
            .map(|r| r.status().is_success())
            .unwrap_or(false);
        all_up &= ok;
        println!("{:<12} {:<28} {}", e.id, e.url, if ok { "up" } else { "down" });
    }
    Ok(all_up)
}

fn write_json(path: &Option<PathBuf>, value: &impl Serialize) -> Result<(), Box<dyn std::error::Error>> {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_vec_pretty(value)?)?;
    }
    Ok(())
}

/// A throwaway stack under the system temp dir, removed afterwards.
async fn scratch_stack(common: &Common, users: usize, baseline: bool) -> Result<Stack, Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("miso-harness-{}", std::process::id()));
    let mut opts = StackOptions::new(dir);
    opts.topology.baseline_rp = baseline;
    opts.users = users;
    opts.taps = true;
    opts.pbkdf2_iterations = common.pbkdf2_iterations;
    Ok(Stack::up(opts).await?)
}

async fn harness(cmd: HarnessCommand) -> Outcome {
    let (common, users, baseline) = match &cmd {
        HarnessCommand::Login { common, .. }
        | HarnessCommand::Game { common, .. }
        | HarnessCommand::Subsets { common } => (common.clone(), 8, false),
        HarnessCommand::Load { common, users, .. } => (common.clone(), *users, true),
    };
    let stack = scratch_stack(&common, users, baseline).await?;
    let result = run_harness(&stack, cmd, &common).await;
    stack.down(true).await?;
    let _ = std::fs::remove_dir(std::env::temp_dir().join(format!("miso-harness-{}", std::process::id())));
    result
}

async fn run_harness(stack: &Stack, cmd: HarnessCommand, common: &Common) -> Outcome {
    let idps = common.idps.clone();
    match cmd {
        HarnessCommand::Login { user, .. } => {
            let fixture = stack
                .users()
                .into_iter()
                .find(|u| u.username == user)
                .ok_or_else(|| format!("no fixture user {user:?}"))?;
            let mut req = LoginRequest::new(stack.rp_url(common.rp), &fixture);
            if let Some(l) = &idps {
                req = req.idps(l);
            }
            if let Some(m) = common.m {
                req = req.threshold(m);
            }
            match harness::Agent::new().login(&req).await {
                Ok(ok) => {
                    println!("{}", serde_json::to_string_pretty(&ok)?);
                    write_json(&common.json_out, &ok)?;
                    Ok(true)
                }
                Err(f) => {
                    println!("login failed: {f}");
                    write_json(&common.json_out, &f)?;
                    Ok(false)
                }
            }
        }
        HarnessCommand::Game { game, trials, .. } => {
            let report = match game {
                Game::Idp => harness::run_game_idp(stack, trials, common.seed).await,
                Game::Rp => harness::run_game_rp(stack, trials, common.seed).await,
                Game::Collusive => harness::run_game_collusive(stack, trials, common.seed).await,
            };
            println!(
                "{}: {} trials, {} violations",
                report.game,
                report.trials,
                report.violations.len()
            );
            for v in &report.violations {
                println!("  {v}");
            }
            write_json(&common.json_out, &report)?;
            Ok(report.passed())
        }
        HarnessCommand::Subsets { .. } => {
            let ids: Vec<String> = match &idps {
                Some(l) => l.split(',').map(|s| s.trim().to_owned()).collect(),
                None => stack.idp_ids(),
            };
            let m = common.m.unwrap_or_else(|| ids.len().saturating_sub(1).max(1));
            let user = &stack.users()[0];
            let report = harness::run_subset_oracle(stack, common.rp, user, &ids, m).await;
            println!("enrollment: {:?}", report.enrollment);
            for row in &report.rows {
                let mark = if row.expected == row.observed { "ok" } else { "MISMATCH" };
                println!("{:<24} {:<8} {:?}", row.subset.join(","), mark, row.observed);
            }
            write_json(&common.json_out, &report)?;
            Ok(report.passed())
        }
        HarnessCommand::Load {
            scenario,
            rate,
            duration,
            ..
        } => {
            let scenarios = match scenario {
                Some(s) => vec![s],
                None => vec![Scenario::BaselineSso, Scenario::MisoSingle, Scenario::MisoMulti2of3],
            };
            println!("{}", harness::LoadSummary::table_header());
            let mut rows = Vec::new();
            for s in scenarios {
                let r = harness::run_load(stack, s, rate, Duration::from_secs(duration)).await?;
                println!("{}", r.table_row());
                rows.push(r);
            }
            let mean = |s: Scenario| rows.iter().find(|r| r.scenario == s).map(|r| r.mean_ms);
            if let (Some(b), Some(m)) = (mean(Scenario::BaselineSso), mean(Scenario::MisoSingle)) {
                if b > 0.0 {
                    println!("miso_single / baseline_sso = {:.2}", m / b);
                }
            }
            write_json(&common.json_out, &rows)?;
            Ok(rows.iter().all(|r| r.errors == 0))
        }
    }
}
