// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedcrypt_core::protocol::Protocol;
use fedcrypt_sim::attack::{duplicate_attack, passthrough_sweep};
use fedcrypt_sim::realnet::run_real;
use fedcrypt_sim::report::{emit_report, expansion_factor, render, ReportRow};
use fedcrypt_sim::runner::{centralized_reference, run_scenario, RunOutcome};
use fedcrypt_sim::scenario::{CollusionMode, Scenario, TransformCost};

const EXIT_PROTOCOL: u8 = 2;
const EXIT_ASSERTION: u8 = 3;

#[derive(Parser)]
#[command(name = "fedcrypt-sim", version, about = "Encrypted federated aggregation harness")]
struct Cli {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use loopback TCP sockets instead of the virtual network.
    #[arg(long, global = true)]
    real_net: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file (key = value text or JSON).
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the frame-level transcript here.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Sweep party counts and protocols.
    Bench(BenchArgs),
    /// Run a collusion scenario and check its outcome.
    Attack(AttackArgs),
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, default_value_t = 512)]
    key_bits: u64,
    /// One-way latency per message, milliseconds.
    #[arg(long, default_value_t = 0.0)]
    latency_ms: f64,
    /// Bytes per second per sender, 0 for unlimited.
    #[arg(long, default_value_t = 0)]
    bandwidth: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    parties: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "ring,broadcast,allreduce")]
    protocols: Vec<Protocol>,
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 1)]
    rounds: u32,
    #[arg(long)]
    out: PathBuf,
    /// `measured` or `modeled:<encrypt_us>,<add_us>`.
    #[arg(long, default_value = "measured")]
    transform: TransformCost,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackMode {
    Duplicate,
    Passthrough,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_enum)]
    mode: AttackMode,
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    parties: Vec<usize>,
    /// Colluding ranks for duplicate mode.
    #[arg(long, value_delimiter = ',')]
    ranks: Vec<u16>,
    #[arg(long, default_value = "ring")]
    protocol: Protocol,
    #[arg(long, default_value_t = 4)]
    length: usize,
    #[command(flatten)]
    net: NetArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Command::Run {
            scenario,
            out,
            transcript,
        } => {
            let mut s = Scenario::load(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            if cli.real_net {
                return real(&s, out);
            }
            let outcome = run_scenario(&s)?;
            if let Some(path) = transcript {
                std::fs::write(&path, outcome.transcript_text())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(path) = &out {
                if !outcome.rows.is_empty() {
                    emit_report(&outcome.rows, path)?;
                }
            }
            Ok(summarize(&outcome))
        }
        Command::Bench(args) => bench(args, cli.seed.unwrap_or(1), cli.real_net),
        Command::Attack(args) => attack(args, cli.seed.unwrap_or(1)),
    }
}

fn real(s: &Scenario, out: Option<PathBuf>) -> Result<u8> {
    eprintln!("real-net mode: wall-clock timings, not reproducible");
    let o = run_real(s, Duration::from_secs(600))?;
    if let Some(path) = &out {
        if !o.rows.is_empty() {
            emit_report(&o.rows, path)?;
        }
    }
    print!("{}", render(&o.rows).unwrap_or_default());
    println!(
        "status {:?}, {} rounds, {} frames",
        o.status, o.completed_rounds, o.frames
    );
    Ok(if o.completed_rounds == s.rounds {
        0
    } else {
        EXIT_PROTOCOL
    })
}

fn summarize(o: &RunOutcome) -> u8 {
    if !o.rows.is_empty() {
        print!("{}", render(&o.rows).unwrap_or_default());
    }
    println!(
        "status {:?} after {} of {} rounds, {} frames, virtual time {:.6}s",
        o.status,
        o.completed_rounds,
        o.scenario.rounds,
        o.transcript.len(),
        o.finished_at as f64 / 1e9
    );
    let mut assertions_ok = true;
    for c in &o.failure_checks {
        let ok = c.holds();
        assertions_ok &= ok;
        println!(
            "failure round {} rank {} step {}: {} (recovery {:?})",
            c.plan.round,
            c.plan.rank,
            c.plan.fail_at_step,
            if ok { "ok" } else { "FAILED" },
            c.recovery
        );
    }
    if let Some(plan) = &o.scenario.collusion_plan {
        let ok = match plan.mode {
            CollusionMode::DuplicateCiphertext => {
                let expected: Vec<u16> = plan.ranks.iter().copied().collect();
                o.scenario.protocol != Protocol::Broadcast
                    || (!o.red_flags.is_empty()
                        && o.red_flags
                            .iter()
                            .all(|f| f.iter().map(|r| r.get()).collect::<Vec<_>>() == expected))
            }
            CollusionMode::PassThrough => {
                let isolated = o.isolated_ranks();
                let exposing = plan.ranks.len() + 1 == o.scenario.parties;
                exposing == !isolated.is_empty()
            }
        };
        assertions_ok &= ok;
        println!(
            "collusion {:?} {:?}: {} (red flags {:?}, isolated {:?})",
            plan.mode,
            plan.ranks,
            if ok { "ok" } else { "FAILED" },
            o.red_flags,
            o.isolated_ranks()
        );
    }
    if o.succeeded() {
        if let Some(reference) = centralized_reference(&o.scenario, o.completed_rounds) {
            let worst = o
                .parameters
                .values()
                .flat_map(|p| p.iter().zip(&reference).map(|(a, b)| (a - b).abs()))
                .fold(0.0f64, f64::max);
            println!("max deviation from centralized descent: {worst:.3e}");
        }
    }
    if !assertions_ok {
        EXIT_ASSERTION
    } else if o.succeeded() {
        0
    } else {
        EXIT_PROTOCOL
    }
}

fn bench(args: BenchArgs, seed: u64, real_net: bool) -> Result<u8> {
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut code = 0;
    for &p in &args.parties {
        for &protocol in &args.protocols {
            let mut s = Scenario::new(p, protocol, args.length);
            s.rounds = args.rounds;
            s.key_bits = args.net.key_bits;
            s.link_latency = args.net.latency_ms;
            s.bandwidth = args.net.bandwidth;
            s.transform = args.transform;
            s.seed = seed;
            let (done, new_rows) = if real_net {
                let o = run_real(&s, Duration::from_secs(600))?;
                (o.completed_rounds == s.rounds, o.rows)
            } else {
                let o = run_scenario(&s)?;
                (o.succeeded(), o.rows)
            };
            if !done {
                eprintln!("{p} parties, {protocol}: job did not complete");
                code = EXIT_PROTOCOL;
            }
            rows.extend(new_rows);
        }
    }
    if rows.is_empty() {
        bail!("no round completed");
    }
    emit_report(&rows, &args.out)?;
    print!("{}", render(&rows)?);
    println!(
        "ciphertext expansion at {} bits: {}x",
        args.net.key_bits,
        expansion_factor(args.net.key_bits)
    );
    Ok(code)
}

fn attack(args: AttackArgs, seed: u64) -> Result<u8> {
    let mut all_ok = true;
    for &p in &args.parties {
        let mut base = Scenario::new(p, args.protocol, args.length);
        base.key_bits = args.net.key_bits;
        base.link_latency = args.net.latency_ms;
        base.bandwidth = args.net.bandwidth;
        base.seed = seed;
        match args.mode {
            AttackMode::Duplicate => {
                let ranks: BTreeSet<u16> = if args.ranks.is_empty() {
                    [1, 2].into()
                } else {
                    args.ranks.iter().copied().collect()
                };
                let r = duplicate_attack(&base, &ranks)?;
                let ok = r.holds();
                all_ok &= ok;
                println!(
                    "duplicate P={p} planted {:?}: red flags {:?} -> {}",
                    r.planted,
                    r.flagged,
                    if ok { "ok" } else { "FAILED" }
                );
            }
            AttackMode::Passthrough => {
                if p > 10 {
                    bail!("pass-through sweep enumerates 2^P coalitions; keep P <= 10");
                }
                let r = passthrough_sweep(&base)?;
                let ok = r.holds();
                all_ok &= ok;
                println!(
                    "passthrough P={p} {}: {} coalitions, smallest exposing coalition {:?} -> {}",
                    args.protocol,
                    r.cases.len(),
                    r.smallest_exposing_coalition(),
                    if ok { "ok" } else { "FAILED" }
                );
            }
        }
    }
    Ok(if all_ok { 0 } else { EXIT_ASSERTION })
}
