//! Command-line front end.
//!
//! Exit status: 0 success, 1 authentication failed, 2 usage error, 3 I/O
//! or file-format error, 4 token exhausted.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use thiserror::Error;

use crate::adversary::{
    attack_table, lifetime_report_table, lifetime_table, run_attack, sweep_lifetime, AttackSetup,
    ExhaustionAttacker, ExperimentError, StrategyKind,
};
use crate::authdb::{AuthDatabase, AuthDbError, ReusePolicy, SharedAuthDb};
use crate::protocol::{ClientOutcome, HonestClient, ServerConfig, DEFAULT_SESSION_TIMEOUT};
use crate::rng::{entropy_seed, stream_rng};
use crate::token::{QuantumToken, TokenError, TokenId};
use crate::transport::{connect, serve, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_AUTH_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_EXHAUSTED: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "qmfa",
    version,
    about = "Quantum-token multi-factor authentication simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Issue a new token: add its record to the database and write the
    /// token file.
    Issue {
        #[arg(long, env = "QMFA_DB")]
        db: PathBuf,
        /// Where to write the token file.
        #[arg(long)]
        token: PathBuf,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long)]
        identity: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mark a token as revoked.
    Revoke {
        #[arg(long, env = "QMFA_DB")]
        db: PathBuf,
        #[arg(long)]
        token_id: String,
    },
    /// Serve authentication sessions until interrupted.
    Serve {
        #[arg(long, env = "QMFA_DB")]
        db: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        #[arg(long, default_value_t = 12)]
        t: usize,
        #[arg(long, value_enum, default_value_t = Reuse::Reject)]
        reuse: Reuse,
        /// Seconds a session may take before it is aborted.
        #[arg(long, default_value_t = DEFAULT_SESSION_TIMEOUT.as_secs())]
        timeout: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Authenticate against a running server with a token file.
    Auth {
        #[arg(long)]
        token: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        #[arg(long)]
        identity: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an attack experiment and print its results table.
    Attack {
        #[arg(long, value_enum)]
        strategy: Strategy,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 12)]
        t: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long)]
        seed: Option<u64>,
        /// For `replay`: tap this many honest sessions instead of
        /// observing every register once.
        #[arg(long)]
        observed: Option<usize>,
        /// For `exhaustion`: stop after this many sessions.
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long, value_enum, default_value_t = Reuse::Allow)]
        reuse: Reuse,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sessions until exhaustion for several challenge sizes.
    Lifetime {
        #[arg(long, default_value_t = 64)]
        k: usize,
        /// Comma-separated challenge sizes, e.g. `3,6,12`.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        t: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        repetitions: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Reuse {
    Reject,
    Allow,
}

impl From<Reuse> for ReusePolicy {
    fn from(r: Reuse) -> Self {
        match r {
            Reuse::Reject => ReusePolicy::Reject,
            Reuse::Allow => ReusePolicy::Allow,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    BlindGuess,
    Replay,
    TranscriptReplay,
    Exhaustion,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("authentication failed")]
    AuthFailed,
    #[error("token exhausted: request a new token")]
    Exhausted,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::AuthFailed => EXIT_AUTH_FAILED,
            CliError::Exhausted => EXIT_EXHAUSTED,
        }
    }
}

impl From<AuthDbError> for CliError {
    fn from(e: AuthDbError) -> Self {
        match e {
            AuthDbError::TooFewRegisters(_) | AuthDbError::InvalidIdentity(_) => {
                CliError::Usage(e.to_string())
            }
            AuthDbError::NotFound(_) | AuthDbError::Revoked(_) => CliError::Usage(e.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<TokenError> for CliError {
    fn from(e: TokenError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Parses `args` and runs the command, returning the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    match execute(cli.command, &mut stdout.lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("qmfa: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    if matches!(command, Command::Attack { .. } | Command::Lifetime { .. })
        && std::env::var_os("RUST_LOG").is_none()
    {
        // experiments run far too many sessions for per-session logging
        log::set_max_level(log::LevelFilter::Warn);
    }
    match command {
        Command::Issue {
            db,
            token,
            k,
            identity,
            seed,
        } => cmd_issue(&db, &token, k, &identity, seed, out),
        Command::Revoke { db, token_id } => cmd_revoke(&db, &token_id, out),
        Command::Serve {
            db,
            addr,
            t,
            reuse,
            timeout,
            seed,
        } => {
            let config = ServerConfig::new(t)
                .with_reuse(reuse.into())
                .with_timeout(Duration::from_secs(timeout.max(1)));
            cmd_serve(&db, &addr, config, seed, out)
        }
        Command::Auth {
            token,
            addr,
            identity,
            seed,
        } => cmd_auth(&token, &addr, &identity, seed, out),
        Command::Attack {
            strategy,
            k,
            t,
            trials,
            seed,
            observed,
            sessions,
            reuse,
            out: path,
        } => {
            let seed = seed.unwrap_or_else(entropy_seed);
            let table = if strategy == Strategy::Exhaustion {
                let attacker = ExhaustionAttacker {
                    sessions_to_force: sessions,
                };
                lifetime_report_table(&attacker.run(k, t, seed)?)
            } else {
                let kind = match (strategy, observed) {
                    (Strategy::BlindGuess, _) => StrategyKind::BlindGuess,
                    (Strategy::Replay, None) => StrategyKind::FullObservation,
                    (Strategy::Replay, Some(n)) => StrategyKind::ReplayEavesdropper {
                        observed_sessions: n,
                    },
                    (Strategy::TranscriptReplay, _) => StrategyKind::TranscriptReplay,
                    (Strategy::Exhaustion, _) => unreachable!(),
                };
                let setup = AttackSetup::new(k, t, trials, seed).with_policy(reuse.into());
                attack_table(&[run_attack(kind, setup)?])
            };
            emit(&table, path.as_deref(), out)
        }
        Command::Lifetime {
            k,
            t,
            repetitions,
            seed,
            out: path,
        } => {
            let seed = seed.unwrap_or_else(entropy_seed);
            let rows = sweep_lifetime(k, &t, repetitions, seed)?;
            emit(&lifetime_table(&rows), path.as_deref(), out)
        }
    }
}

fn emit(table: &str, path: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    out.write_all(table.as_bytes()).map_err(io_err)?;
    if let Some(path) = path {
        fs::write(path, table).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn load_db(path: &Path) -> Result<AuthDatabase, CliError> {
    AuthDatabase::load(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn cmd_issue(
    db_path: &Path,
    token_path: &Path,
    k: usize,
    identity: &str,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if token_path.exists() {
        return Err(CliError::Io(format!(
            "{}: refusing to overwrite an existing token file",
            token_path.display()
        )));
    }
    let mut db = if db_path.exists() {
        load_db(db_path)?
    } else {
        AuthDatabase::new()
    };
    let mut rng = stream_rng(seed.unwrap_or_else(entropy_seed), 0);
    let (token, _) = db.issue(k, identity, &mut rng)?;
    db.save(db_path)?;
    token.save(token_path)?;
    writeln!(out, "{}", token.token_id()).map_err(io_err)
}

fn cmd_revoke(db_path: &Path, token_id: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let id = TokenId::new(token_id).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut db = load_db(db_path)?;
    db.revoke(&id)?;
    db.save(db_path)?;
    writeln!(out, "revoked {id}").map_err(io_err)
}

fn cmd_serve(
    db_path: &Path,
    addr: &str,
    config: ServerConfig,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let db = SharedAuthDb::with_backing_file(load_db(db_path)?, db_path);
    let (stop_tx, stop_rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = stop_tx.send(());
    })
    .map_err(|e| CliError::Io(format!("installing interrupt handler: {e}")))?;

    let mut service_config = ServiceConfig::new(config);
    service_config.seed = seed;
    let handle = serve(addr, db.clone(), service_config)
        .map_err(|e| CliError::Io(format!("binding {addr}: {e}")))?;
    writeln!(out, "listening on {}", handle.local_addr()).map_err(io_err)?;
    out.flush().map_err(io_err)?;

    let _ = stop_rx.recv();
    info!("shutting down");
    handle.shutdown();
    db.flush()?;
    Ok(())
}

fn cmd_auth(
    token_path: &Path,
    addr: &str,
    identity: &str,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut token = QuantumToken::load(token_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", token_path.display())))?;
    let channel = connect(addr).map_err(|e| CliError::Io(format!("connecting to {addr}: {e}")))?;
    let rng = stream_rng(seed.unwrap_or_else(entropy_seed), 0);
    let mut client = HonestClient::new(&mut token, identity, rng);
    let report = channel.run_client(&mut client).map_err(io_err)?;
    // registers measured during the session stay measured whatever the verdict
    token.save(token_path)?;

    let remaining = token.k() - token.used_count();
    let verdict = match report.outcome {
        ClientOutcome::Accepted => "ok",
        ClientOutcome::Exhausted => "exhausted",
        ClientOutcome::Aborted(_) => "aborted",
        _ => "fail",
    };
    writeln!(out, "verdict: {verdict}").map_err(io_err)?;
    writeln!(out, "remaining registers: {remaining}").map_err(io_err)?;
    if token.renewal_due() {
        eprintln!(
            "warning: {} of {} registers used; request a new token soon",
            token.used_count(),
            token.k()
        );
    }
    match report.outcome {
        ClientOutcome::Accepted => Ok(()),
        ClientOutcome::Exhausted => Err(CliError::Exhausted),
        _ => Err(CliError::AuthFailed),
    }
}
