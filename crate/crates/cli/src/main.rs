//! `qlink`: simulate, lock, analyze and stream time-tag data.

mod config;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use qlink_core::bell::{BellReport, CoincidenceMatrix};
use qlink_core::sim::{generate_streams, SimOutput};
use qlink_core::sync::io::{
    read_coincidences, read_timeline, timeline, write_coincidences, write_timeline, TimelineRow,
};
use qlink_core::sync::online::OnlineCorrelator;
use qlink_core::sync::{
    acquire_lock, extract_coincidences, track, BlockRecord, CoincidenceEvent, CorrelatorConfig,
    LockState, SyncError,
};
use qlink_core::timetag::{Station, TagStream};
use qlink_core::transport::{send_stream, Receiver, SenderConfig};

use config::Config;

const EXIT_RUNTIME: u8 = 1;
const EXIT_NO_LOCK: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "qlink",
    version,
    about = "Coincidence recovery and CHSH analysis for independently clocked time taggers"
)]
struct Cli {
    /// Configuration file (sections: link, clock.alice, clock.bob, settings,
    /// polarization, correlator, transport).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Machine,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate tag files for both stations plus a truth sidecar.
    Simulate {
        /// Seconds of data to generate.
        #[arg(long, value_parser = positive_seconds)]
        duration: f64,
        #[arg(long)]
        out_a: PathBuf,
        #[arg(long)]
        out_b: PathBuf,
        /// Truth sidecar path [default: <out_b>.truth]
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Lock two tag files and extract coincidences.
    Lock {
        #[arg(long)]
        alice: PathBuf,
        #[arg(long)]
        bob: PathBuf,
        #[arg(long, default_value = "coincidences.csv")]
        coincidences: PathBuf,
        #[arg(long, default_value = "timeline.csv")]
        timeline: PathBuf,
        /// Override the lock threshold k.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Polarization correlations, S, QBER and visibility from a coincidence log.
    Bell {
        #[arg(long)]
        coincidences: PathBuf,
        /// Lock timeline, for the locked-seconds figure.
        #[arg(long)]
        timeline: Option<PathBuf>,
    },
    /// Receive Bob's tags over TCP and correlate them online against a local Alice file.
    Serve {
        #[arg(long)]
        alice: PathBuf,
        /// Listening port; 0 picks a free one [default: transport.port]
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value = "coincidences.csv")]
        coincidences: PathBuf,
        #[arg(long, default_value = "timeline.csv")]
        timeline: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Stream a Bob tag file, or freshly simulated Bob data, to a running `serve`.
    Send {
        #[arg(long, required_unless_present = "simulate")]
        bob: Option<PathBuf>,
        /// Simulate this many seconds with --seed and send Bob's stream.
        #[arg(long, conflicts_with = "bob", value_parser = positive_seconds)]
        simulate: Option<f64>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Pace transmission to this many tags per second.
        #[arg(long)]
        rate: Option<f64>,
        /// Drop the connection once after this many blocks (fault injection).
        #[arg(long, hide = true)]
        disconnect_after: Option<u64>,
    },
}

fn positive_seconds(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        Ok(v) => Err(format!("duration must be positive, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<SyncError>(), Some(SyncError::NoLock)) {
                ExitCode::from(EXIT_NO_LOCK)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env()?;
    let out = Output { format: cli.format };
    match &cli.command {
        Command::Simulate {
            duration,
            out_a,
            out_b,
            truth,
        } => {
            let truth = truth.clone().unwrap_or_else(|| sidecar_path(out_b));
            simulate(&cfg, *duration, cli.seed, out_a, out_b, &truth, out)
        }
        Command::Lock {
            alice,
            bob,
            coincidences,
            timeline,
            threshold,
        } => {
            let corr = correlator(&cfg, *threshold);
            lock(&corr, alice, bob, coincidences, timeline, out)
        }
        Command::Bell {
            coincidences,
            timeline,
        } => bell(&cfg, coincidences, timeline.as_deref(), out),
        Command::Serve {
            alice,
            port,
            bind,
            coincidences,
            timeline,
            threshold,
        } => {
            let corr = correlator(&cfg, *threshold);
            serve(
                &cfg,
                &corr,
                alice,
                (bind, port.unwrap_or(cfg.transport.port)),
                coincidences,
                timeline,
                out,
            )
        }
        Command::Send {
            bob,
            simulate,
            host,
            port,
            rate,
            disconnect_after,
        } => {
            let tags = match (bob, simulate) {
                (Some(path), _) => load(path)?,
                (None, Some(seconds)) => generate_streams(*seconds, &cfg.sim, cli.seed)?.bob,
                (None, None) => bail!("either --bob or --simulate is required"),
            };
            let host = host.clone().unwrap_or_else(|| cfg.transport.host.clone());
            let port = port.unwrap_or(cfg.transport.port);
            let rate = rate.unwrap_or(cfg.transport.rate_limit);
            let sender = SenderConfig {
                block_tags: cfg.transport.block_tags,
                station: tags.station,
                rate_limit: (rate > 0.0).then_some(rate),
                disconnect_after: *disconnect_after,
                ..SenderConfig::default()
            };
            let stats = send_stream((host.as_str(), port), tags.tags(), &sender)
                .with_context(|| format!("sending to {host}:{port}"))?;
            out.section(
                "sent",
                &[
                    ("blocks", stats.blocks_sent.to_string()),
                    ("tags", stats.tags_sent.to_string()),
                    ("bytes", stats.bytes_sent.to_string()),
                    ("retransmissions", stats.retransmissions.to_string()),
                    ("reconnects", stats.reconnects.to_string()),
                    ("seconds", format!("{:.3}", stats.elapsed.as_secs_f64())),
                    ("tags_per_second", format!("{:.0}", stats.tags_per_second)),
                    ("bytes_per_second", format!("{:.0}", stats.bytes_per_second)),
                ],
            );
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Output {
    format: Format,
}

impl Output {
    /// Text mode prints `title` and aligned fields; machine mode prints
    /// `key=value` lines.
    fn section(&self, title: &str, fields: &[(&str, String)]) {
        let mut s = String::new();
        match self.format {
            Format::Text => {
                let _ = writeln!(s, "{title}:");
                for (k, v) in fields {
                    let _ = writeln!(s, "  {k:<20} {v}");
                }
            }
            Format::Machine => {
                for (k, v) in fields {
                    let _ = writeln!(s, "{k}={v}");
                }
            }
        }
        emit(&s);
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(s: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(s.as_bytes()).and_then(|_| out.flush());
}

fn correlator(cfg: &Config, threshold: Option<f64>) -> CorrelatorConfig {
    let mut c = cfg.correlator.clone();
    if let Some(k) = threshold {
        c.lock_threshold = k;
    }
    c
}

fn sidecar_path(out_b: &Path) -> PathBuf {
    let mut p = out_b.as_os_str().to_owned();
    p.push(".truth");
    PathBuf::from(p)
}

fn load(path: &Path) -> Result<TagStream> {
    TagStream::load(path).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn simulate(
    cfg: &Config,
    duration: f64,
    seed: u64,
    out_a: &Path,
    out_b: &Path,
    truth_path: &Path,
    out: Output,
) -> Result<()> {
    let sim = generate_streams(duration, &cfg.sim, seed)?;
    sim.alice
        .save(out_a)
        .with_context(|| format!("writing {}", out_a.display()))?;
    sim.bob
        .save(out_b)
        .with_context(|| format!("writing {}", out_b.display()))?;
    let truth = truth_fields(&sim);
    let mut w = create(truth_path)?;
    for (k, v) in &truth {
        writeln!(w, "{k}={v}")?;
    }
    w.flush()?;
    out.section(
        "simulated",
        &[
            ("alice_tags", sim.alice.len().to_string()),
            ("bob_tags", sim.bob.len().to_string()),
            (
                "alice_singles_rate",
                format!("{:.1}", sim.alice.detector_count() as f64 / duration),
            ),
            (
                "bob_singles_rate",
                format!("{:.1}", sim.bob.detector_count() as f64 / duration),
            ),
            (
                "true_offset_ms",
                format!("{:.6}", sim.truth.offset_at(0.0) * 1e3),
            ),
            ("truth_file", truth_path.display().to_string()),
        ],
    );
    Ok(())
}

/// Sidecar contents: clock truth, singles rates and per-second Bob
/// efficiencies.
fn truth_fields(sim: &SimOutput) -> Vec<(&'static str, String)> {
    let t = &sim.truth;
    let eff: Vec<String> = t.bob_efficiency.iter().map(|e| format!("{e:.6}")).collect();
    vec![
        ("duration", t.duration.to_string()),
        ("seed", t.seed.to_string()),
        ("offset_at_alice_zero", t.offset_at(0.0).to_string()),
        ("relative_drift", t.relative_drift().to_string()),
        ("alice_start_offset", t.alice_clock.start_offset.to_string()),
        (
            "alice_drift_fraction",
            t.alice_clock.drift_fraction.to_string(),
        ),
        ("bob_start_offset", t.bob_clock.start_offset.to_string()),
        ("bob_drift_fraction", t.bob_clock.drift_fraction.to_string()),
        (
            "alice_singles_rate",
            (sim.alice.detector_count() as f64 / t.duration).to_string(),
        ),
        (
            "bob_singles_rate",
            (sim.bob.detector_count() as f64 / t.duration).to_string(),
        ),
        ("true_pairs", t.true_pairs.to_string()),
        ("bob_efficiency", eff.join(",")),
    ]
}

fn write_outputs(
    state: &LockState,
    events: &[CoincidenceEvent],
    coincidences: &Path,
    timeline_path: &Path,
) -> Result<()> {
    write_coincidences(create(coincidences)?, events)?;
    write_timeline(create(timeline_path)?, state)?;
    Ok(())
}

fn lock_summary(state: &LockState, events: usize, out: Output) {
    let first = state
        .locked_blocks()
        .next()
        .and_then(|b| b.estimate.map(|e| (b.t_start(), e)));
    let mut fields = vec![
        (
            "locked_seconds",
            format!("{:.3}", state.locked_seconds_total),
        ),
        ("span_seconds", format!("{:.3}", state.span())),
        (
            "locked_blocks",
            format!("{}", state.locked_blocks().count()),
        ),
        ("blocks", state.blocks.len().to_string()),
        ("coincidences", events.to_string()),
    ];
    if let Some((t, e)) = first {
        fields.push(("first_lock_at", format!("{t:.6}")));
        fields.push(("first_offset_ns", format!("{:.3}", e.offset * 1e9)));
        fields.push(("first_significance", format!("{:.2}", e.significance)));
    }
    if let Some(e) = state.locked_blocks().last().and_then(|b| b.estimate) {
        fields.push(("final_drift", format!("{:.4e}", e.drift_rate)));
    }
    out.section("lock", &fields);
}

fn lock(
    cfg: &CorrelatorConfig,
    alice: &Path,
    bob: &Path,
    coincidences: &Path,
    timeline_path: &Path,
    out: Output,
) -> Result<()> {
    let a = load(alice)?;
    let b = load(bob)?;
    let state = acquire_lock(a.tags(), b.tags(), cfg)?;
    let state = track(state, a.tags(), b.tags(), cfg);
    let events = extract_coincidences(a.tags(), b.tags(), &state, cfg);
    write_outputs(&state, &events, coincidences, timeline_path)?;
    lock_summary(&state, events.len(), out);
    Ok(())
}

fn locked_seconds(rows: &[TimelineRow]) -> f64 {
    rows.iter()
        .filter(|r| r.offset_ns.is_some())
        .map(|r| r.t_end - r.t_start)
        .sum()
}

fn print_report(matrix: CoincidenceMatrix, out: Output) -> Result<()> {
    let report = BellReport::from_matrix(matrix)?;
    match out.format {
        Format::Text => emit(&report.render_text()),
        Format::Machine => emit(&format!("{}\n", serde_json::to_string_pretty(&report)?)),
    }
    Ok(())
}

fn bell(
    cfg: &Config,
    coincidences: &Path,
    timeline_path: Option<&Path>,
    out: Output,
) -> Result<()> {
    let file =
        File::open(coincidences).with_context(|| format!("opening {}", coincidences.display()))?;
    let events = read_coincidences(BufReader::new(file))?;
    if events.is_empty() {
        bail!("{} contains no coincidences", coincidences.display());
    }
    let mut matrix = CoincidenceMatrix::accumulate(&events, cfg.sim.settings);
    if let Some(p) = timeline_path {
        let file = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        matrix.accumulation_span = locked_seconds(&read_timeline(BufReader::new(file))?);
    }
    print_report(matrix, out)
}

fn block_status(b: &BlockRecord, state: &LockState, out: Output) {
    let (offset, drift) = match b.estimate.filter(|_| b.is_locked()) {
        Some(e) => (
            format!("{:.3}", e.offset * 1e9),
            format!("{:.3e}", e.drift_rate),
        ),
        None => ("-".into(), "-".into()),
    };
    let mode = if b.is_locked() { "LOCKED" } else { "SEARCHING" };
    let line = match out.format {
        Format::Text => format!(
            "block {:>5} t={:>9.3}-{:<9.3} {:<9} offset_ns={:<16} drift={:<11} significance={:>6.2} locked_total={:.1}s",
            b.index,
            b.t_start(),
            b.t_end(),
            mode,
            offset,
            drift,
            b.significance,
            state.locked_seconds_total
        ),
        Format::Machine => format!(
            "block={} t_start={} t_end={} mode={mode} offset_ns={offset} drift={drift} significance={} locked_total={}",
            b.index,
            b.t_start(),
            b.t_end(),
            b.significance,
            state.locked_seconds_total
        ),
    };
    emit(&(line + "\n"));
}

fn serve(
    cfg: &Config,
    corr: &CorrelatorConfig,
    alice: &Path,
    addr: (&str, u16),
    coincidences: &Path,
    timeline_path: &Path,
    out: Output,
) -> Result<()> {
    let a = load(alice)?;
    let mut receiver =
        Receiver::bind(addr).with_context(|| format!("binding {}:{}", addr.0, addr.1))?;
    receiver.timeout = Duration::from_secs_f64(cfg.transport.timeout);
    let local = receiver.local_addr()?;
    out.section("serve", &[("listening", local.to_string())]);

    let mut online = OnlineCorrelator::new(a.into_tags(), corr.clone())?;
    let (handle, blocks) = receiver.spawn();
    for block in blocks {
        if block.station != Station::Bob {
            bail!("received a block from {:?}, expected Bob", block.station);
        }
        online.push_bob(&block.tags)?;
        for rec in online.poll() {
            block_status(&rec, online.state(), out);
        }
    }
    let stats = handle
        .join()
        .map_err(|_| anyhow::anyhow!("receiver thread panicked"))??;
    online.finish_bob();
    for rec in online.poll() {
        block_status(&rec, online.state(), out);
    }
    let (state, events) = online.finish();
    write_outputs(&state, &events, coincidences, timeline_path)?;
    out.section(
        "received",
        &[
            ("blocks", stats.blocks.to_string()),
            ("tags", stats.tags.to_string()),
            ("connections", stats.connections.to_string()),
            ("checksum_failures", stats.checksum_failures.to_string()),
        ],
    );
    if state.locked_blocks().next().is_none() {
        return Err(SyncError::NoLock.into());
    }
    lock_summary(&state, events.len(), out);
    let mut matrix = CoincidenceMatrix::accumulate(&events, cfg.sim.settings);
    matrix.accumulation_span = locked_seconds(&timeline(&state));
    print_report(matrix, out)
}
