//! `ncma`: command-line harness for sessions, sweeps and trace replays.

mod spec;
mod sweep;

use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ncma::channel::ChannelModel;
use ncma::demod::DEFAULT_ALPHA;
use ncma::phydec::SlotEvent;
use ncma::protocol::trace::Trace;
use ncma::protocol::{replay, run_session, MacMode, ReplayOverrides, SessionConfig, SessionStats, Variant};
use serde::Serialize;
use sha2::{Digest, Sha256};

use spec::ExperimentSpec;

/// Environment variable naming the default sweep configuration file.
const CONFIG_ENV: &str = "NCMA_CONFIG";

#[derive(Parser)]
#[command(name = "ncma", version, about = "Network-coded multiple access simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a parameter sweep described by a configuration file.
    Sweep(SweepArgs),
    /// Simulate one session and optionally record its trace.
    Run(RunArgs),
    /// Re-run MAC decoding over recorded traces with other MAC settings.
    Replay(ReplayArgs),
    /// Summarize the PHY events of a trace.
    Stats(StatsArgs),
}

#[derive(Args)]
struct SweepArgs {
    /// Configuration file; defaults to the file named by NCMA_CONFIG.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory for sweep.csv and sweep.json.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated variants, e.g. `NCMA-RMUD,SU`.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    snr_a: Option<String>,
    #[arg(long)]
    snr_b: Option<String>,
    #[arg(long)]
    l_a: Option<String>,
    #[arg(long)]
    l_b: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    channel: Option<String>,
    #[arg(long)]
    slots: Option<String>,
    #[arg(long)]
    repetitions: Option<String>,
    /// Extra `key=value` assignments applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "NCMA-RMUD")]
    variant: Variant,
    #[arg(long, default_value_t = 10.0)]
    snr_a: f64,
    /// Defaults to the SNR of node A.
    #[arg(long)]
    snr_b: Option<f64>,
    #[arg(long, default_value_t = 24)]
    l_a: usize,
    #[arg(long, default_value_t = 16)]
    l_b: usize,
    #[arg(long, default_value_t = 10_000)]
    slots: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value = "fixed-phase")]
    channel: ChannelModel,
    #[arg(long, default_value_t = SessionConfig::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0.0)]
    csi_error: f64,
    /// Write the JSON-lines trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the stats JSON here instead of standard output.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Trace files to replay.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Comma-separated MAC modes; by default the recorded mode, plus
    /// `mud-only` and `su-projection` for NCMA traces.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<MacMode>,
    /// Message length for the first node of every pair.
    #[arg(long)]
    l_a: Option<usize>,
    /// Message length for the second node of every pair.
    #[arg(long)]
    l_b: Option<usize>,
    /// Replay once per listed L_B, with L_A = ratio * L_B.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["l_a", "l_b"])]
    lb_sweep: Vec<usize>,
    #[arg(long, default_value_t = 1.5, requires = "lb_sweep")]
    ratio: f64,
    /// Write the CSV table here instead of standard output.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    trace: PathBuf,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Standard output, or a file when a path is given.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn load_trace(path: &Path) -> Result<Trace> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Trace::read_jsonl(BufReader::new(file)).with_context(|| format!("reading trace {}", path.display()))
}

fn mode_label(mode: MacMode) -> &'static str {
    match mode {
        MacMode::SingleUser => "single-user",
        MacMode::MudOnly => "mud-only",
        MacMode::Ncma => "ncma",
        MacMode::SuProjection => "su-projection",
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let path = match args.config {
        Some(p) => Some(p),
        None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
    };
    let mut spec = match &path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            ExperimentSpec::parse(&text).with_context(|| format!("in config {}", p.display()))?
        }
        None => ExperimentSpec::default(),
    };
    let flags = [
        ("seed", args.seed.map(|s| s.to_string())),
        ("variant", args.variant),
        ("snr_a", args.snr_a),
        ("snr_b", args.snr_b),
        ("l_a", args.l_a),
        ("l_b", args.l_b),
        ("alpha", args.alpha),
        ("channel", args.channel),
        ("slots", args.slots),
        ("repetitions", args.repetitions),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            spec.set(key, &v).with_context(|| format!("--{}", key.replace('_', "-")))?;
        }
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        spec.set(k.trim(), v)?;
    }
    let out_dir = args.out.or_else(|| spec.out.clone()).unwrap_or_else(|| PathBuf::from("results"));
    let table = sweep::run_sweep(&spec)?;
    let csv = sweep::write_outputs(&spec, &table, &out_dir)?;
    eprintln!("{} rows written to {} (config hash {})", table.len(), csv.display(), spec.hash());
    Ok(())
}

#[derive(Serialize)]
struct RunReport<'a> {
    config_hash: String,
    config: &'a SessionConfig,
    stats: &'a SessionStats,
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = SessionConfig::two_user(
        args.snr_a,
        args.snr_b.unwrap_or(args.snr_a),
        args.l_a,
        args.l_b,
        args.variant,
        args.slots,
        args.seed,
    );
    cfg.alpha = args.alpha;
    cfg.channel = args.channel;
    cfg.k = args.k;
    cfg.csi_error = args.csi_error;
    let (stats, trace) = run_session(&cfg)?;
    if let Some(path) = &args.trace {
        trace.write_jsonl(io::BufWriter::new(output(Some(path))?))?;
    }
    let report = RunReport { config_hash: sha256_json(&cfg)?, config: &cfg, stats: &stats };
    let mut w = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    Ok(())
}

#[derive(Serialize)]
struct ReplayRow {
    trace: String,
    mode: &'static str,
    l_a: usize,
    l_b: usize,
    slots: usize,
    th_a: Option<f64>,
    th_b: Option<f64>,
    th_total: f64,
    upper_bound: Option<f64>,
    long_enough: bool,
    config_hash: String,
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.traces {
        let trace = load_trace(path)?;
        let cfg = &trace.header.config;
        let recorded = cfg.variant.mac_mode();
        let modes = if !args.modes.is_empty() {
            args.modes.clone()
        } else if recorded == MacMode::Ncma {
            vec![MacMode::Ncma, MacMode::MudOnly, MacMode::SuProjection]
        } else {
            vec![recorded]
        };
        let lengths: Vec<(Option<usize>, Option<usize>)> = if args.lb_sweep.is_empty() {
            vec![(args.l_a, args.l_b)]
        } else {
            if !(args.ratio > 0.0) {
                bail!("--ratio must be positive");
            }
            args.lb_sweep.iter().map(|&lb| (Some((args.ratio * lb as f64).round() as usize), Some(lb))).collect()
        };
        let hash = sha256_json(cfg)?;
        for &(l_a, l_b) in &lengths {
            for &mode in &modes {
                let mut ov = ReplayOverrides::mode(mode);
                for pair in &cfg.pairs {
                    if let Some(l) = l_a {
                        ov = ov.with_length(pair[0], l);
                    }
                    if let Some(l) = l_b {
                        ov = ov.with_length(pair[1], l);
                    }
                }
                let stats = replay(&trace, &ov)
                    .with_context(|| format!("replaying {} as {}", path.display(), mode_label(mode)))?;
                let first = cfg.pairs[0];
                rows.push(ReplayRow {
                    trace: path.display().to_string(),
                    mode: mode_label(mode),
                    l_a: l_a.unwrap_or(cfg.nodes[first[0]].l),
                    l_b: l_b.unwrap_or(cfg.nodes[first[1]].l),
                    slots: stats.slots,
                    th_a: stats.nodes.get(first[0]).map(|n| n.throughput),
                    th_b: stats.nodes.get(first[1]).map(|n| n.throughput),
                    th_total: stats.throughput,
                    upper_bound: stats.upper_bound,
                    long_enough: stats.long_enough,
                    config_hash: hash.clone(),
                });
            }
        }
    }
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TraceSummary {
    config_hash: String,
    variant: Variant,
    slots: usize,
    records: usize,
    group_frequencies: Option<ncma::protocol::GroupFrequencies>,
    event_counts: std::collections::BTreeMap<String, usize>,
    upper_bound: Option<f64>,
    throughput: f64,
    long_enough: bool,
    undetected_errors: usize,
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let trace = load_trace(&args.trace)?;
    let stats = replay(&trace, &ReplayOverrides::default())?;
    let summary = TraceSummary {
        config_hash: sha256_json(&trace.header.config)?,
        variant: trace.header.config.variant,
        slots: stats.slots,
        records: trace.records.len(),
        group_frequencies: stats.group_frequencies(),
        event_counts: SlotEvent::ALL.iter().zip(stats.event_counts).map(|(e, c)| (e.to_string(), c)).collect(),
        upper_bound: stats.upper_bound,
        throughput: stats.throughput,
        long_enough: stats.long_enough,
        undetected_errors: stats.undetected_errors,
    };
    let mut w = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    writeln!(w)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sweep(a) => cmd_sweep(a),
        Command::Run(a) => cmd_run(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
