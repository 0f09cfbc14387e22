//! Benchmark CLI: runs the measurement suites either with an in-process
//! trio (`--role all`) or as one of three networked party processes.
//!
//! Connection rule for networked mode: every party listens for its
//! higher-indexed peers and connects to its lower-indexed peers, so
//! P0 only listens, P1 listens (for P2) and connects to P0, and P2 only
//! connects.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::Parser;

use plm::bench::{
    emit_report, run_bench, run_bench_role, BenchReport, BenchRow, BenchSpec, ProfileSpec, Suite,
    SCHEMA_VERSION,
};
use plm::model::ModelConfig;
use plm::transport::{establish_tcp_session, Role, TcpSessionConfig, Transcript};

#[derive(Parser, Debug)]
#[command(name = "plm", about = "Private transformer inference benchmarks")]
struct Args {
    /// Which party to run: p0, p1, p2, or all (in-process trio).
    #[arg(long, default_value = "all")]
    role: String,

    /// Address to listen on for higher-indexed peers (networked mode).
    #[arg(long)]
    listen: Option<String>,

    /// Lower-indexed peers to connect to, as comma-separated role=addr
    /// pairs, e.g. `p0=127.0.0.1:7100,p1=127.0.0.1:7101`.
    #[arg(long)]
    connect: Option<String>,

    /// Benchmark suite: nonlinear, argmax, layer, or generate.
    #[arg(long)]
    suite: String,

    /// Element count (nonlinear/argmax), hidden width d (layer), or
    /// generation steps (generate).
    #[arg(long)]
    size: Option<usize>,

    /// Prompt length for the generate suite.
    #[arg(long, default_value_t = 6)]
    prompt_len: usize,

    /// Emulated round-trip time in milliseconds (default 0).
    #[arg(long)]
    rtt_ms: Option<f64>,

    /// Emulated bandwidth in Mbit/s (default unlimited).
    #[arg(long)]
    bandwidth_mbps: Option<f64>,

    /// Repetitions for timing rows (rounds/bytes must not vary).
    #[arg(long, default_value_t = 3)]
    reps: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Model config file (key=value lines) for the generate suite.
    #[arg(long)]
    model: Option<PathBuf>,

    /// Override the sharing noise coefficient.
    #[arg(long)]
    k_scale: Option<f32>,

    /// Output format: json, csv, or table.
    #[arg(long, default_value = "table")]
    format: String,

    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Check suite-specific thresholds and exit 2 when violated.
    #[arg(long, default_value_t = false)]
    assert: bool,

    /// Shared session id for networked runs (must match on all parties).
    #[arg(long, default_value_t = 1)]
    session_id: u64,
}

fn parse_role(s: &str) -> anyhow::Result<Option<Role>> {
    match s {
        "all" => Ok(None),
        "p0" => Ok(Some(Role::P0)),
        "p1" => Ok(Some(Role::P1)),
        "p2" => Ok(Some(Role::P2)),
        other => bail!("unknown role {other} (expected p0, p1, p2, or all)"),
    }
}

fn build_spec(args: &Args) -> anyhow::Result<BenchSpec> {
    let suite: Suite = args.suite.parse()?;
    let size = args.size.unwrap_or(match suite {
        Suite::Nonlinear | Suite::Argmax => 1000,
        Suite::Layer => 4096,
        Suite::Generate => 20,
    });
    let mut spec = BenchSpec::new(suite, size);
    spec.prompt_len = args.prompt_len;
    spec.reps = args.reps;
    spec.seed = args.seed;
    spec.profile = match (args.rtt_ms, args.bandwidth_mbps) {
        (None, None) => ProfileSpec::Lan,
        (rtt, bw) => ProfileSpec::Custom {
            rtt_ms: rtt.unwrap_or(0.0),
            bandwidth_mbps: bw,
        },
    };
    if let Some(path) = &args.model {
        spec.model = ModelConfig::from_file(path)
            .with_context(|| format!("loading model config {}", path.display()))?;
    }
    if let Some(k) = args.k_scale {
        spec.model.k_scale = k;
    }
    spec.validate()?;
    Ok(spec)
}

/// Networked mode: establish the TCP session once, run every repetition
/// over it, and assemble the same report shape as the in-process path.
fn run_networked(args: &Args, spec: &BenchSpec, role: Role) -> anyhow::Result<BenchReport> {
    let mut connect = HashMap::new();
    if let Some(list) = &args.connect {
        for pair in list.split(',').filter(|s| !s.is_empty()) {
            let (r, addr) = pair
                .split_once('=')
                .with_context(|| format!("bad --connect entry {pair}"))?;
            let peer = parse_role(r)?.context("--connect needs a concrete role")?;
            connect.insert(peer, addr.to_string());
        }
    }
    let cfg = TcpSessionConfig {
        role,
        session_id: args.session_id as u128,
        listen: args.listen.clone(),
        connect,
        profile: spec.profile.link(),
        handshake_timeout: Duration::from_secs(30),
    };
    let mut sess = establish_tcp_session(&cfg)?;
    let mut report = BenchReport {
        schema_version: SCHEMA_VERSION.to_string(),
        suite: spec.suite.name().to_string(),
        profile: spec.profile.name(),
        reps: spec.reps,
        seed: spec.seed,
        rows: vec![],
        failure: None,
    };
    let mut walls: Vec<Vec<f64>> = vec![];
    for rep in 0..spec.reps {
        let rows: Vec<(String, Transcript)> = match run_bench_role(spec, role, &mut sess) {
            Ok(r) => r,
            Err(e) => {
                report.failure = Some(format!("repetition {rep}: {e}"));
                break;
            }
        };
        if rep == 0 {
            for (label, t) in &rows {
                report.rows.push(BenchRow {
                    label: label.clone(),
                    online_rounds: t.online.rounds,
                    online_bytes: t.online.bytes_total(),
                    offline_rounds: t.offline.rounds,
                    offline_bytes: t.offline.bytes_total(),
                    prep_rounds: t.preparation.rounds,
                    prep_bytes: t.preparation.bytes_total(),
                    wall_ms_mean: 0.0,
                    wall_ms_std: 0.0,
                });
                walls.push(vec![]);
            }
        }
        for (i, (_, t)) in rows.iter().enumerate() {
            if i < walls.len() {
                walls[i].push(t.online.wall_s * 1e3);
            }
        }
    }
    for (row, w) in report.rows.iter_mut().zip(&walls) {
        if w.is_empty() {
            continue;
        }
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        row.wall_ms_mean = mean;
        row.wall_ms_std = var.sqrt();
    }
    Ok(report)
}

/// Suite-specific `--assert` thresholds. Returns violations.
fn check_assertions(spec: &BenchSpec, report: &BenchReport) -> Vec<String> {
    let mut v = vec![];
    if let Some(f) = &report.failure {
        v.push(format!("partial report: {f}"));
        return v;
    }
    match spec.suite {
        Suite::Nonlinear => {
            for r in &report.rows {
                if r.online_rounds != 3 {
                    v.push(format!("nonlinear rounds {} != 3", r.online_rounds));
                }
            }
        }
        Suite::Argmax => {
            for r in &report.rows {
                if r.online_rounds != 4 {
                    v.push(format!("argmax rounds {} != 4", r.online_rounds));
                }
            }
        }
        Suite::Layer => {
            // Each token step is one embedding round plus the per-layer
            // composition, which must sit in [16, 24].
            for r in &report.rows {
                let layer_rounds = r.online_rounds.saturating_sub(1);
                if !(16..=24).contains(&layer_rounds) {
                    v.push(format!("layer rounds {layer_rounds} outside [16, 24]"));
                }
            }
        }
        Suite::Generate => {
            // Per-token bytes are near-constant after the first token.
            let steady: Vec<f64> = report.rows[1..]
                .iter()
                .map(|r| r.online_bytes as f64)
                .collect();
            if steady.len() >= 2 {
                let mean = steady.iter().sum::<f64>() / steady.len() as f64;
                let var =
                    steady.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / steady.len() as f64;
                let cv = var.sqrt() / mean;
                if cv >= 0.05 {
                    v.push(format!("per-token byte variation {cv:.4} >= 0.05"));
                }
            }
        }
    }
    v
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let spec = build_spec(&args)?;
    let role = parse_role(&args.role)?;
    let report = match role {
        None => run_bench(&spec),
        Some(r) => run_networked(&args, &spec, r)?,
    };
    let bytes = emit_report(&report, &args.format)?;
    match &args.out {
        Some(path) => std::fs::write(path, &bytes)
            .with_context(|| format!("writing {}", path.display()))?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
        }
    }
    let measuring = role.is_none() || role == Some(Role::P1);
    if let (Some(f), false) = (&report.failure, args.assert) {
        eprintln!("warning: partial report: {f}");
    }
    if args.assert && measuring {
        let violations = check_assertions(&spec, &report);
        if !violations.is_empty() {
            for v in &violations {
                eprintln!("assertion violated: {v}");
            }
            std::process::exit(2);
        }
    }
    Ok(())
}
