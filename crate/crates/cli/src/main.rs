mod args;

use std::io::Write;
use std::net::SocketAddr;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Parser;
use tokio_util::sync::CancellationToken;
use tpcbench_core::ca::{self, CertAuthority, HostCredential};
use tpcbench_core::endpoint::{self, EndpointConfig};
use tpcbench_core::http::HttpsClient;
use tpcbench_core::orchestrator::{CampaignStore, Harness, MeshConfig};
use tpcbench_core::report::{self, GridSelector, Thresholds};
use tpcbench_core::shaper::{start_relay, ShaperConfig};
use tpcbench_core::tls;
use tpcbench_core::transfer::{self, TransferSpec};

use args::*;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = cli
        .log
        .clone()
        .or_else(|| std::env::var("RUST_LOG").ok())
        .unwrap_or_else(|| "info".into());
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(filter))
        .with_writer(std::io::stderr)
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Prints a line to stdout right away, so a parent process can read it.
fn announce(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

/// Cancelled on Ctrl-C.
fn interrupt_token() -> CancellationToken {
    let token = CancellationToken::new();
    let t = token.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            tracing::info!("interrupted, shutting down");
            t.cancel();
        }
    });
    token
}

async fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Ca(cmd) => ca_command(cmd)?,
        Command::Endpoint(EndpointCommand::Serve(args)) => serve(args).await?,
        Command::Probe(cmd) => probe(cmd).await?,
        Command::Transfer(args) => return transfer_command(args).await,
        Command::Localbench(args) => {
            let gbps = transfer::local_copy_benchmark(args.concurrency, args.size, &args.backend).await?;
            println!("{gbps:.3} Gbps");
        }
        Command::Shaper(ShaperCommand::Run(args)) => shaper(args).await?,
        Command::Orchestrate(args) => orchestrate(args).await?,
        Command::Report(cmd) => report_command(cmd)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn ca_command(cmd: CaCommand) -> Result<()> {
    match cmd {
        CaCommand::Init { subject, days, out } => {
            let authority = ca::create_authority(&subject, days)?;
            authority.export(&out)?;
            println!("{}", out.join(ca::CA_CERT_FILE).display());
        }
        CaCommand::Issue {
            ca: dir,
            hosts,
            days,
            out,
        } => {
            let authority = CertAuthority::load(&dir)?;
            let credential = ca::issue_host_credential(&authority, &hosts, days)?;
            let (cert, key) = credential.export(&out)?;
            println!("{}\n{}", cert.display(), key.display());
        }
    }
    Ok(())
}

async fn serve(args: ServeArgs) -> Result<()> {
    if !(args.marker_period.is_finite() && args.marker_period > 0.0) {
        bail!("--marker-period must be a positive number of seconds");
    }
    let credential = HostCredential::load(&args.cert, &args.key)?;
    let trust = CertAuthority::load_trust(&args.ca)?;
    let mut config = EndpointConfig::new(SocketAddr::new(args.bind, args.port), credential, trust);
    config.storage = args.storage;
    config.require_client_cert = args.mutual_tls;
    config.marker_period = Duration::from_secs_f64(args.marker_period);
    config.max_sessions = args.max_sessions;
    let handle = endpoint::serve(config).await?;
    announce(&format!("endpoint listening on {}", handle.local_addr()));
    let probe = match args.probe_port {
        Some(port) => {
            let p = transfer::serve_probe(SocketAddr::new(args.bind, port)).await?;
            announce(&format!("probe listening on {}", p.local_addr()));
            Some(p)
        }
        None => None,
    };
    interrupt_token().cancelled().await;
    handle.shutdown().await;
    if let Some(p) = probe {
        p.shutdown().await;
    }
    Ok(())
}

async fn probe(cmd: ProbeCommand) -> Result<()> {
    match cmd {
        ProbeCommand::Rtt { peer, samples } => {
            let rtt = transfer::measure_rtt(&peer, samples).await?;
            println!("{rtt:.3} ms");
        }
        ProbeCommand::Throughput {
            peer,
            streams,
            seconds,
        } => {
            if !(seconds.is_finite() && seconds > 0.0) {
                bail!("--seconds must be positive");
            }
            let gbps =
                transfer::raw_throughput_probe(&peer, streams, Duration::from_secs_f64(seconds)).await?;
            println!("{gbps:.6} Gbps");
        }
        ProbeCommand::Serve { listen } => {
            let handle = transfer::serve_probe(listen).await?;
            announce(&format!("probe listening on {}", handle.local_addr()));
            interrupt_token().cancelled().await;
            handle.shutdown().await;
        }
    }
    Ok(())
}

fn https_client(tls_args: &TlsArgs) -> Result<HttpsClient> {
    let trust = CertAuthority::load_trust(&tls_args.ca)?;
    let identity = match (&tls_args.cert, &tls_args.key) {
        (Some(c), Some(k)) => Some(HostCredential::load(c, k)?),
        _ => None,
    };
    Ok(HttpsClient::new(tls::client_config(&trust, identity.as_ref())?))
}

async fn transfer_command(args: TransferArgs) -> Result<ExitCode> {
    if !(args.timeout_s.is_finite() && args.timeout_s > 0.0) {
        bail!("--timeout-s must be positive");
    }
    let client = https_client(&args.tls)?;
    let adapter = transfer::adapter_by_name(&args.adapter, client.clone())?;
    let (size, _) = transfer::head_object(&client, &args.source, false)
        .await
        .context("cannot size the source")?;
    let mut spec = TransferSpec::new(args.source, args.dest, args.streams, size);
    spec.verify_digest = args.verify;
    spec.timeout = Duration::from_secs_f64(args.timeout_s);
    let result = transfer::tpc_transfer(adapter.as_ref(), &spec).await?;
    let gbps =
        (result.duration_s > 0.0).then(|| result.bytes_transferred as f64 * 8.0 / result.duration_s / 1e9);
    let status = match &result.status {
        transfer::TransferStatus::Succeeded => "succeeded".to_string(),
        transfer::TransferStatus::Failed(why) => format!("failed: {why}"),
    };
    let summary = serde_json::json!({
        "adapter": adapter.name(),
        "source": spec.source_url,
        "dest": spec.dest_url,
        "streams": spec.stream_count,
        "bytes": result.bytes_transferred,
        "duration_s": result.duration_s,
        "throughput_gbps": gbps,
        "markers": result.markers.len(),
        "status": status,
    });
    println!("{summary}");
    Ok(if result.status.is_success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

async fn shaper(args: ShaperArgs) -> Result<()> {
    let mut config = ShaperConfig::new(args.listen, args.forward, args.rtt_ms);
    config.bandwidth_cap_bps = args.bw_bps;
    config.per_connection = args.per_connection;
    config.window_bytes = args.window_bytes;
    let relay = start_relay(config).await?;
    announce(&format!("relay listening on {}", relay.local_addr()));
    interrupt_token().cancelled().await;
    relay.shutdown().await;
    Ok(())
}

async fn orchestrate(args: OrchestrateArgs) -> Result<()> {
    let mut config = MeshConfig::load(&args.mesh)?;
    if let Some(hours) = args.interval_hours {
        config.interval_hours = hours;
    }
    let harness = Harness::from_config(&config)?;
    let summary = harness
        .schedule_campaign(&config, args.once, interrupt_token())
        .await?;
    tracing::info!(
        sweeps = summary.starts.len(),
        skipped = summary.skipped,
        results = %config.results_path.display(),
        "campaign finished"
    );
    Ok(())
}

fn report_command(cmd: ReportCommand) -> Result<()> {
    match cmd {
        ReportCommand::Grid {
            input,
            out,
            adapter,
            streams,
            good,
            warn,
            since,
            until,
        } => {
            if !(good.is_finite() && warn.is_finite() && good >= warn) {
                bail!("--good must be at least --warn");
            }
            let data = CampaignStore::read(&input)?;
            let selector = GridSelector {
                adapter,
                stream_count: streams,
                since,
                until,
            };
            let html = report::render_grid(
                &data,
                Thresholds {
                    good_gbps: good,
                    warn_gbps: warn,
                },
                selector,
            );
            std::fs::write(&out, html).with_context(|| format!("writing {}", out.display()))?;
        }
        ReportCommand::Latency {
            input,
            out,
            bucket_ms,
        } => {
            let data = CampaignStore::read(&input)?;
            let (_, csv) = report::latency_curve(&data, bucket_ms)?;
            std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
        }
        ReportCommand::Streams { input, adapter } => {
            let data = CampaignStore::read(&input)?;
            let c = report::compare_streams(&data, &adapter)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
    }
    Ok(())
}
