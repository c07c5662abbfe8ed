//! Acceptance suite. Runs each criterion in turn and prints one
//! PASS/FAIL line per criterion; exits non-zero if any fails.
//!
//! `cargo test -p tpcbench-core --test acceptance` runs everything;
//! numbers after `--` select criteria, e.g. `-- 5 6`.

// `!(x < tol)` is deliberate: NaN must fail a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::panic::AssertUnwindSafe;
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use bytes::Bytes;
use chrono::{TimeZone, Utc};
use common::*;
use futures_util::FutureExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpcbench_core::ca::{create_authority, issue_host_credential, verify_chain};
use tpcbench_core::endpoint::{self, EndpointHandle, SessionState};
use tpcbench_core::lab::{url_for, Lab};
use tpcbench_core::markers::{parse_perf_markers, Terminal};
use tpcbench_core::orchestrator::{
    aggregate, dest_path, latency_bucket, CampaignStore, EndpointSpec, GroupKey, Harness, HttpStaging,
    LatencyProbe, Measurement, MeshConfig, Staging,
};
use tpcbench_core::report::{latency_curve, render_grid, ColorClass, GridReport, GridSelector, Thresholds};
use tpcbench_core::shaper::{predict_throughput, start_relay, ShaperConfig};
use tpcbench_core::storage::{ObjectPath, StorageBackend};
use tpcbench_core::transfer::{
    measure_rtt, raw_throughput_probe, serve_probe, AdapterCapabilities, HttpsTpcAdapter, ProtocolAdapter,
    TransferResult, TransferSpec, TransferStatus,
};
use url::Url;

type Outcome = Result<String, String>;
type Criterion = fn() -> Pin<Box<dyn Future<Output = Outcome>>>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn relay_config(forward: std::net::SocketAddr, rtt_ms: f64) -> ShaperConfig {
    ShaperConfig::new("127.0.0.1:0".parse().unwrap(), forward.to_string(), rtt_ms)
}

async fn wait_for(mut cond: impl FnMut() -> bool, limit: Duration) -> bool {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    cond()
}

// 1. Integrity across sizes, stream counts and storage backends.
async fn integrity() -> Outcome {
    let started = Instant::now();
    let lab = Lab::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sizes = [1usize, 1024, 1 << 20, 64 << 20];
    let mut cases = 0;
    for (b, backend) in ["memory", "disk"].into_iter().enumerate() {
        let store = |side: &str| match backend {
            "memory" => StorageBackend::memory(),
            _ => StorageBackend::disk(dir.path().join(side)),
        };
        let src = lab.endpoint(store("src")).await.unwrap();
        let dst = lab.endpoint(store("dst")).await.unwrap();
        for (s, &size) in sizes.iter().enumerate() {
            let data = random_bytes(size, (b * 10 + s) as u64);
            let expected = oracle_adler32(&data);
            let path = format!("/integrity/{size}");
            src.storage()
                .put_bytes(&ObjectPath::parse(&path).unwrap(), Bytes::from(data))
                .await
                .unwrap();
            for streams in [1u32, 2, 8] {
                let dest = url_for(dst.local_addr(), &format!("/copy/{size}/{streams}"));
                let reply = copy(
                    &lab.client,
                    &dest,
                    &url_for(src.local_addr(), &path),
                    streams,
                    true,
                )
                .await;
                ensure!(
                    reply.text().ends_with("success: Created\n"),
                    "{backend} {size}B x{streams}: {}",
                    reply.text()
                );
                let stored = dst
                    .storage()
                    .read_all(&ObjectPath::parse(dest.path()).unwrap())
                    .await
                    .unwrap();
                ensure!(
                    oracle_adler32(&stored) == expected,
                    "{backend} {size}B x{streams}: digest mismatch"
                );
                ensure!(
                    reply.digest() == Some(expected),
                    "{backend} {size}B x{streams}: trailer digest mismatch"
                );
                cases += 1;
            }
        }
        src.shutdown().await;
        dst.shutdown().await;
    }
    let elapsed = started.elapsed();
    ensure!(cases == 24, "{cases} cases ran");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("24/24 cases in {:.1} s", elapsed.as_secs_f64()))
}

// 2. Ranged GETs at the source partition the object exactly.
async fn stripe_partition() -> Outcome {
    let lab = Lab::new().unwrap();
    let src = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let dst = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let adapter = HttpsTpcAdapter::new(lab.client.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..200u64 {
        let size: u64 = match case % 4 {
            0 => rng.gen_range(1..=40),
            _ => rng.gen_range(1..=3_000_000),
        };
        let streams: u32 = rng.gen_range(1..=16);
        let path = format!("/part/{case}");
        let object = ObjectPath::parse(&path).unwrap();
        src.storage()
            .generate_test_file(&object, size, case)
            .await
            .unwrap();
        src.clear_logs();
        let spec = TransferSpec::new(
            url_for(src.local_addr(), &path),
            url_for(dst.local_addr(), &format!("/out/{case}")),
            streams,
            size,
        );
        let result = adapter.transfer(&spec).await;
        ensure!(result.status.is_success(), "case {case}: {:?}", result.status);
        let mut ranges: Vec<(u64, u64)> = src
            .access_log()
            .into_iter()
            .filter(|r| r.method == "GET" && r.path == path && (r.status == 200 || r.status == 206))
            .map(|r| r.range.map_or((0, size), |(a, b)| (a, b + 1)))
            .collect();
        ranges.sort_unstable();
        let want = u64::from(streams).min(size) as usize;
        ensure!(
            ranges.len() == want,
            "case {case}: {} ranges for {want} stripes",
            ranges.len()
        );
        let mut next = 0;
        for &(start, end) in &ranges {
            ensure!(
                start == next,
                "case {case} (size {size}, {streams} streams): gap or overlap at {start}, expected {next}"
            );
            ensure!(end > start, "case {case}: empty range");
            next = end;
        }
        ensure!(next == size, "case {case}: ranges end at {next}, size {size}");
        src.storage().delete(&object).await.unwrap();
        dst.storage()
            .delete(&ObjectPath::parse(&format!("/out/{case}")).unwrap())
            .await
            .unwrap();
    }
    src.shutdown().await;
    dst.shutdown().await;
    Ok("200/200 pairs partition [0, size)".into())
}

// 3. Stored throughput against an independent recomputation.
struct ScriptedStaging;

#[async_trait]
impl Staging for ScriptedStaging {
    async fn stage_sources(
        &self,
        endpoint: &EndpointSpec,
        size: u64,
        count: usize,
    ) -> Result<Vec<Url>, String> {
        Ok((0..count)
            .map(|i| endpoint.object_url(&format!("/src/{size}/{i}")).unwrap())
            .collect())
    }
    async fn cleanup(&self, _urls: &[Url]) {}
    async fn reachable(&self, _endpoint: &EndpointSpec) -> bool {
        true
    }
}

struct FixedLatency(f64);

#[async_trait]
impl LatencyProbe for FixedLatency {
    async fn rtt_ms(&self, _s: &EndpointSpec, _d: &EndpointSpec) -> Result<f64, String> {
        Ok(self.0)
    }
}

/// Reports the scripted duration for the transfer at each index; `None`
/// is a failed transfer.
#[derive(Default)]
struct ScriptedAdapter {
    script: Mutex<Vec<Option<f64>>>,
}

#[async_trait]
impl ProtocolAdapter for ScriptedAdapter {
    fn name(&self) -> &str {
        "scripted"
    }
    fn capabilities(&self) -> AdapterCapabilities {
        AdapterCapabilities {
            multi_stream: true,
            third_party: true,
        }
    }
    async fn transfer(&self, spec: &TransferSpec) -> TransferResult {
        let index: usize = spec
            .dest_url
            .path()
            .rsplit("file-")
            .next()
            .unwrap()
            .parse()
            .unwrap();
        let scripted = self.script.lock().unwrap()[index];
        let now = Instant::now();
        let (status, bytes) = match scripted {
            Some(_) => (TransferStatus::Succeeded, spec.file_size_bytes),
            None => (TransferStatus::Failed("scripted failure".into()), 0),
        };
        TransferResult {
            spec: spec.clone(),
            bytes_transferred: bytes,
            started_at: now,
            ended_at: now,
            duration_s: scripted.unwrap_or(0.0),
            status,
            markers: Vec::new(),
        }
    }
}

fn spec_endpoint(name: &str) -> EndpointSpec {
    EndpointSpec {
        name: name.into(),
        base_url: Url::parse(&format!("https://{name}.invalid:1094/")).unwrap(),
        probe_address: format!("{name}.invalid:9"),
    }
}

async fn throughput_formula() -> Outcome {
    let adapter = Arc::new(ScriptedAdapter::default());
    let harness =
        Harness::new(Arc::new(ScriptedStaging), Arc::new(FixedLatency(12.5))).with_adapter(adapter.clone());
    let dir = tempfile::tempdir().unwrap();
    let store = CampaignStore::open(&dir.path().join("store.jsonl")).unwrap();
    let (a, b) = (spec_endpoint("a"), spec_endpoint("b"));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut scripts = Vec::new();
    for _ in 0..1000 {
        let n = rng.gen_range(1..=11usize);
        let mut script: Vec<Option<f64>> = (0..n)
            .map(|_| rng.gen_bool(0.9).then(|| 10f64.powf(rng.gen_range(-3.0..3.0))))
            .collect();
        if script.iter().all(Option::is_none) {
            script[0] = Some(rng.gen_range(0.5..5.0));
        }
        let size = rng.gen_range(1..=10_000_000_000u64);
        *adapter.script.lock().unwrap() = script.clone();
        let m = harness
            .run_measurement(&a, &b, "scripted", 8, n as u32, size)
            .await
            .map_err(|e| e.to_string())?;
        store.append(&m).unwrap();
        scripts.push((script, size));
    }
    let stored = store.load().unwrap();
    ensure!(stored.len() == 1000, "{} stored", stored.len());
    let mut worst = 0f64;
    for (m, (script, size)) in stored.iter().zip(&scripts) {
        // Independent route: n^2 * size * 8 / sum(d), in integer bits where possible.
        let ok: Vec<f64> = script.iter().flatten().copied().collect();
        let k = ok.len() as f64;
        let bits = (*size as f64) * 8.0;
        let total: f64 = ok.iter().rev().sum();
        let expected = k * k * bits / total / 1e9;
        let rel = ((m.throughput_gbps - expected) / expected).abs();
        worst = worst.max(rel);
        ensure!(rel < 5e-7, "stored {} vs oracle {expected}", m.throughput_gbps);
        ensure!(m.failures as usize == script.len() - ok.len(), "failure count");
        ensure!(m.transfer_durations_s.len() == ok.len(), "success durations");
    }
    Ok(format!(
        "1000/1000 within 6 significant digits (worst relative error {worst:.1e})"
    ))
}

// 4. Default methodology: 11 concurrent transfers per pair, 8 streams then 1.
async fn methodology_defaults() -> Outcome {
    let mut mesh = test_mesh(&["a", "b"], Some(20.0)).await;
    let defaults = MeshConfig::new(Vec::new(), "ca.crt");
    ensure!(
        defaults.concurrency == 11,
        "default concurrency {}",
        defaults.concurrency
    );
    ensure!(
        defaults.file_size_bytes == 1_000_000_000,
        "default size {}",
        defaults.file_size_bytes
    );
    ensure!(
        defaults.stream_settings == vec![8, 1],
        "default streams {:?}",
        defaults.stream_settings
    );
    ensure!(
        mesh.config.concurrency == 11 && mesh.config.stream_settings == vec![8, 1],
        "mesh config not default"
    );
    mesh.config.file_size_bytes = 2_000_000;
    let harness = Harness::from_config(&mesh.config).unwrap();
    let report = harness.run_mesh_sweep(&mesh.config, None).await.unwrap();
    ensure!(report.errors.is_empty(), "{:?}", report.errors);
    ensure!(
        report.measurements.len() == 4,
        "{} measurements",
        report.measurements.len()
    );
    for m in &report.measurements {
        ensure!(m.concurrency == 11 && m.transfer_durations_s.len() == 11, "{m:?}");
    }
    for node in &mesh.nodes {
        let sessions = node.endpoint.sessions();
        ensure!(sessions.len() == 22, "{}: {} sessions", node.name, sessions.len());
        for (batch, streams) in sessions.chunks(11).zip([8u32, 1]) {
            ensure!(
                batch
                    .iter()
                    .all(|s| s.requested_streams == streams && s.state == SessionState::Succeeded),
                "{}: batch not uniformly {streams} streams",
                node.name
            );
            let last_start = batch.iter().map(|s| s.started_at).max().unwrap();
            let first_end = batch.iter().filter_map(|s| s.ended_at).min().unwrap();
            ensure!(
                last_start < first_end,
                "{}: {streams}-stream batch not concurrent",
                node.name
            );
            let mut sources: Vec<&str> = batch.iter().map(|s| s.source_url.as_str()).collect();
            sources.sort_unstable();
            sources.dedup();
            ensure!(sources.len() == 11, "{}: source files not distinct", node.name);
        }
    }
    mesh.shutdown().await;
    Ok("per pair: 11 concurrent transfers with 8 streams, then 11 with 1".into())
}

// 5. Shaper cap and delay accuracy.
async fn shaper_accuracy() -> Outcome {
    let started = Instant::now();
    let probe = serve_probe("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let mut cfg = relay_config(probe.local_addr(), 0.0);
    cfg.bandwidth_cap_bps = Some(10_000_000);
    let relay = start_relay(cfg).await.unwrap();
    let gbps = raw_throughput_probe(&relay.local_addr().to_string(), 2, Duration::from_secs(10))
        .await
        .map_err(|e| e.to_string())?;
    relay.shutdown().await;
    let error = (gbps * 1e3 / 10.0 - 1.0) * 100.0;
    ensure!(error.abs() <= 15.0, "cap 10 Mbps measured {:.3} Mbps", gbps * 1e3);
    let mut rtts = Vec::new();
    for target in [50.0, 100.0] {
        let relay = start_relay(relay_config(probe.local_addr(), target))
            .await
            .unwrap();
        let rtt = measure_rtt(&relay.local_addr().to_string(), 5)
            .await
            .map_err(|e| e.to_string())?;
        relay.shutdown().await;
        ensure!(
            (rtt - target).abs() <= 10.0,
            "rtt {target} ms measured {rtt:.2} ms"
        );
        rtts.push(rtt);
    }
    probe.shutdown().await;
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "10 Mbps cap -> {:.3} Mbps ({error:+.1}%), rtt 50 -> {:.1} ms, rtt 100 -> {:.1} ms, {:.1} s",
        gbps * 1e3,
        rtts[0],
        rtts[1],
        elapsed.as_secs_f64()
    ))
}

// 6. Window-bound throughput falls with latency and recovers with streams.
async fn latency_sensitivity() -> Outcome {
    const WINDOW: u64 = 128 * 1024;
    let lab = Lab::new().unwrap();
    let src = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let dst = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let adapter = HttpsTpcAdapter::new(lab.client.clone());
    let mut points = Vec::new();
    for (streams, rtt) in [(1u32, 10.0), (1, 50.0), (1, 100.0), (8, 100.0)] {
        let predicted = predict_throughput(streams, rtt, WINDOW, None);
        // About 2.5 s of data at the predicted rate.
        let size = (predicted * 1e9 / 8.0 * 2.5) as u64;
        let path = format!("/lat/{streams}/{rtt}");
        src.storage()
            .generate_test_file(&ObjectPath::parse(&path).unwrap(), size, 6)
            .await
            .unwrap();
        let mut cfg = relay_config(src.local_addr(), rtt);
        cfg.window_bytes = Some(WINDOW);
        let relay = start_relay(cfg).await.unwrap();
        let spec = TransferSpec::new(
            url_for(relay.local_addr(), &path),
            url_for(dst.local_addr(), &format!("/lat-out/{streams}/{rtt}")),
            streams,
            size,
        );
        let result = adapter.transfer(&spec).await;
        relay.shutdown().await;
        ensure!(
            result.status.is_success(),
            "{streams} x {rtt} ms: {:?}",
            result.status
        );
        let measured = size as f64 * 8.0 / result.duration_s / 1e9;
        ensure!(
            measured <= 2.0 * predicted && measured >= predicted / 2.0,
            "{streams} stream(s) at {rtt} ms: {:.2} Mbps vs predicted {:.2} Mbps",
            measured * 1e3,
            predicted * 1e3
        );
        points.push((streams, rtt, measured, predicted));
    }
    src.shutdown().await;
    dst.shutdown().await;
    let summary = points
        .iter()
        .map(|(s, r, m, p)| format!("{s}x@{r}ms {:.1}/{:.1} Mbps", m * 1e3, p * 1e3))
        .collect::<Vec<_>>()
        .join(", ");
    ensure!(
        points[0].2 > points[1].2 && points[1].2 > points[2].2,
        "single-stream not strictly decreasing: {summary}"
    );
    ensure!(
        points[3].2 > points[2].2,
        "8 streams not faster at 100 ms: {summary}"
    );
    Ok(format!("measured/predicted: {summary}"))
}

// 7. Killing the source mid-transfer leaves nothing behind.
/// Sends the first staged source through a relay so it can be cut.
struct FaultyStaging {
    inner: HttpStaging,
    relay_port: u16,
}

#[async_trait]
impl Staging for FaultyStaging {
    async fn stage_sources(
        &self,
        endpoint: &EndpointSpec,
        size: u64,
        count: usize,
    ) -> Result<Vec<Url>, String> {
        let mut urls = self.inner.stage_sources(endpoint, size, count).await?;
        urls[0].set_port(Some(self.relay_port)).unwrap();
        Ok(urls)
    }
    async fn cleanup(&self, urls: &[Url]) {
        self.inner.cleanup(urls).await
    }
    async fn reachable(&self, endpoint: &EndpointSpec) -> bool {
        self.inner.reachable(endpoint).await
    }
}

async fn failure_atomicity() -> Outcome {
    // A single COPY cut mid-flight.
    let lab = Lab::new().unwrap();
    let src = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let dst = lab.endpoint(StorageBackend::memory()).await.unwrap();
    src.storage()
        .generate_test_file(&ObjectPath::parse("/big").unwrap(), 4_000_000, 7)
        .await
        .unwrap();
    let mut cfg = relay_config(src.local_addr(), 10.0);
    cfg.bandwidth_cap_bps = Some(4_000_000);
    let relay = start_relay(cfg).await.unwrap();
    let client = lab.client.clone();
    let (dest, source) = (
        url_for(dst.local_addr(), "/cut"),
        url_for(relay.local_addr(), "/big"),
    );
    let pending = tokio::spawn(async move { copy(&client, &dest, &source, 4, false).await });
    let flowing = wait_for(
        || {
            dst.sessions()
                .iter()
                .any(|s| s.stripe_bytes.iter().sum::<u64>() > 0)
        },
        Duration::from_secs(10),
    )
    .await;
    ensure!(flowing, "transfer never started moving bytes");
    relay.kill();
    let reply = pending.await.unwrap();
    let text = reply.text();
    ensure!(
        text.lines().last().is_some_and(|l| l.starts_with("failure:")),
        "no failure line: {text:?}"
    );
    ensure!(
        !dst.storage().exists(&ObjectPath::parse("/cut").unwrap()).await,
        "destination object exists"
    );
    ensure!(
        dst.storage().list().await.unwrap().is_empty(),
        "leftover objects at destination"
    );
    ensure!(
        matches!(dst.sessions()[0].state, SessionState::Failed(_)),
        "session not failed"
    );
    relay.shutdown().await;
    src.shutdown().await;
    dst.shutdown().await;
    let last = text.lines().last().unwrap_or_default().to_string();

    // One of three transfers in a measurement cut the same way.
    let mesh = test_mesh(&["a", "b"], None).await;
    let mut cfg = relay_config(mesh.node("a").endpoint.local_addr(), 10.0);
    cfg.bandwidth_cap_bps = Some(4_000_000);
    let relay = start_relay(cfg).await.unwrap();
    let harness = Harness::new(
        Arc::new(FaultyStaging {
            inner: HttpStaging::new(mesh.lab.client.clone()),
            relay_port: relay.local_addr().port(),
        }),
        Arc::new(FixedLatency(1.0)),
    )
    .with_adapter(Arc::new(HttpsTpcAdapter::new(mesh.lab.client.clone())));
    let (a, b) = (&mesh.config.endpoints[0], &mesh.config.endpoints[1]);
    let measuring = harness.run_measurement(a, b, "https-tpc", 2, 3, 2_000_000);
    let cutting = async {
        wait_for(|| relay.active_connections() > 0, Duration::from_secs(10)).await;
        tokio::time::sleep(Duration::from_millis(300)).await;
        relay.kill();
    };
    let (m, ()) = tokio::join!(measuring, cutting);
    let m = m.map_err(|e| e.to_string())?;
    ensure!(m.failures == 1, "failures {}", m.failures);
    ensure!(
        m.transfer_durations_s.len() == 2,
        "durations {:?}",
        m.transfer_durations_s
    );
    let b_sessions = mesh.node("b").endpoint.sessions();
    let failed: Vec<_> = b_sessions
        .iter()
        .filter(|s| matches!(s.state, SessionState::Failed(_)))
        .collect();
    ensure!(
        failed.len() == 1 && failed[0].dest_path.ends_with(&dest_path("a", 0)[1..]),
        "{b_sessions:?}"
    );
    relay.shutdown().await;
    mesh.shutdown().await;
    Ok(format!(
        "terminal {last:?}, no destination object, measurement failures = 1"
    ))
}

// 8. Credentials verify against their own CA only.
async fn ca_suite() -> Outcome {
    use x509_parser::pem::parse_x509_pem;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let name = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.gen_range(3..12))
            .map(|_| rng.gen_range(b'a'..=b'z') as char)
            .collect()
    };
    for trial in 0..50 {
        let own = create_authority(&format!("CN={} CA", name(&mut rng)), rng.gen_range(30..4000)).unwrap();
        let foreign =
            create_authority(&format!("CN={} CA", name(&mut rng)), rng.gen_range(30..4000)).unwrap();
        let mut hosts: Vec<String> = (0..rng.gen_range(1..4))
            .map(|_| format!("{}.{}.example", name(&mut rng), name(&mut rng)))
            .collect();
        if rng.gen_bool(0.5) {
            hosts.push(format!(
                "10.{}.{}.{}",
                rng.gen::<u8>(),
                rng.gen::<u8>(),
                rng.gen::<u8>()
            ));
        }
        let cred = issue_host_credential(&own, &hosts, rng.gen_range(1..30)).unwrap();
        ensure!(
            verify_chain(&cred, &own).unwrap(),
            "trial {trial}: rejected by its own CA"
        );
        ensure!(
            !verify_chain(&cred, &foreign).unwrap(),
            "trial {trial}: accepted by a foreign CA"
        );

        // Independent route: signature check with x509-parser.
        let (_, leaf_pem) = parse_x509_pem(cred.certificate.as_bytes()).unwrap();
        let (_, own_pem) = parse_x509_pem(own.certificate.as_bytes()).unwrap();
        let (_, foreign_pem) = parse_x509_pem(foreign.certificate.as_bytes()).unwrap();
        let leaf = leaf_pem.parse_x509().unwrap();
        let own_cert = own_pem.parse_x509().unwrap();
        let foreign_cert = foreign_pem.parse_x509().unwrap();
        ensure!(
            leaf.verify_signature(Some(own_cert.public_key())).is_ok(),
            "trial {trial}: oracle rejects own CA signature"
        );
        ensure!(
            leaf.verify_signature(Some(foreign_cert.public_key())).is_err(),
            "trial {trial}: oracle accepts foreign CA signature"
        );
        ensure!(
            leaf.issuer() == own_cert.subject(),
            "trial {trial}: issuer name mismatch"
        );
    }
    Ok("50/50 trials: own CA accepts, foreign CA rejects (two verifiers)".into())
}

// 9. Reports are deterministic and agree with aggregate().
fn synthetic_store(seed: u64) -> Vec<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["alpha", "beta", "gamma"];
    let mut out = Vec::new();
    for round in 0..4 {
        for src in names {
            for dst in names {
                if src == dst {
                    continue;
                }
                for adapter in ["https-tpc", "raw-stream"] {
                    for streams in [8u32, 1] {
                        let durations: Vec<f64> = (0..11).map(|_| rng.gen_range(0.5..20.0)).collect();
                        let mean = durations.iter().sum::<f64>() / 11.0;
                        out.push(Measurement {
                            source: src.into(),
                            destination: dst.into(),
                            adapter: adapter.into(),
                            stream_count: streams,
                            concurrency: 11,
                            file_size_bytes: 1_000_000_000,
                            throughput_gbps: 11.0 * 8.0 / mean,
                            rtt_ms: rng.gen_range(0.1..150.0),
                            transfer_durations_s: durations,
                            failures: 0,
                            timestamp: Utc.with_ymd_and_hms(2024, 3, 1 + round, 0, 0, 0).unwrap(),
                            wall_clock_gbps: 1.0,
                        });
                    }
                }
            }
        }
    }
    out
}

fn title_values(html: &str) -> BTreeMap<(String, String), Option<f64>> {
    let mut cells = BTreeMap::new();
    for line in html.lines().filter(|l| l.starts_with("<g class=\"cell")) {
        let title = line
            .split("<title>")
            .nth(1)
            .unwrap()
            .split("</title>")
            .next()
            .unwrap();
        let (pair, rest) = title.split_once(": ").unwrap();
        let (src, dst) = pair.split_once(" to ").unwrap();
        let value = (rest != "no data").then(|| rest.split(' ').next().unwrap().parse::<f64>().unwrap());
        cells.insert((src.to_string(), dst.to_string()), value);
    }
    cells
}

async fn reporting() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_store(9);
    let mut rendered = Vec::new();
    for copy in ["one.jsonl", "two.jsonl"] {
        let store = CampaignStore::open(&dir.path().join(copy)).unwrap();
        for m in &data {
            store.append(m).unwrap();
        }
        let loaded = store.load().unwrap();
        let selector = GridSelector {
            adapter: Some("https-tpc".into()),
            stream_count: Some(8),
            ..Default::default()
        };
        let html = render_grid(&loaded, Thresholds::default(), selector);
        let (_, csv) = latency_curve(&loaded, 10.0).unwrap();
        rendered.push((html, csv));
    }
    ensure!(
        rendered[0] == rendered[1],
        "identical stores rendered differently"
    );
    let (html, csv) = &rendered[0];

    // Grid cells: latest selected measurement per pair, equal to aggregate()
    // over that measurement.
    let selected: Vec<&Measurement> = data
        .iter()
        .filter(|m| m.adapter == "https-tpc" && m.stream_count == 8)
        .collect();
    let cells = title_values(html);
    ensure!(cells.len() == 9, "{} grid cells", cells.len());
    for ((src, dst), value) in &cells {
        let latest = selected
            .iter()
            .filter(|m| &m.source == src && &m.destination == dst)
            .max_by_key(|m| m.timestamp);
        match (latest, value) {
            (None, None) => {}
            (Some(m), Some(v)) => {
                let stats =
                    aggregate(&[(*m).clone()], &[GroupKey::Source, GroupKey::Destination], 10.0).unwrap();
                ensure!(
                    stats[0].mean_gbps == *v && m.throughput_gbps == *v,
                    "{src}->{dst}: {v}"
                );
            }
            _ => return Err(format!("{src}->{dst}: presence mismatch")),
        }
    }

    // CSV rows against aggregate() and a hand-rolled mean.
    let stats = aggregate(
        &data,
        &[GroupKey::Adapter, GroupKey::StreamCount, GroupKey::LatencyBucket],
        10.0,
    )
    .unwrap();
    let mut by_hand: HashMap<(String, u32, i64), (f64, usize)> = HashMap::new();
    for m in &data {
        let e = by_hand
            .entry((m.adapter.clone(), m.stream_count, latency_bucket(m.rtt_ms, 10.0)))
            .or_default();
        e.0 += m.throughput_gbps;
        e.1 += 1;
    }
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    ensure!(
        rows.len() == stats.len(),
        "{} rows vs {} groups",
        rows.len(),
        stats.len()
    );
    for (row, s) in rows.iter().zip(&stats) {
        let f: Vec<&str> = row.split(',').collect();
        let (label, bucket_ms, mean, count): (&str, f64, f64, usize) = (
            f[0],
            f[1].parse().unwrap(),
            f[2].parse().unwrap(),
            f[3].parse().unwrap(),
        );
        let (adapter, streams) = label.split_once('/').unwrap();
        let streams: u32 = streams.parse().unwrap();
        ensure!(mean == s.mean_gbps && count == s.count, "row {row} vs {s:?}");
        let bucket = (bucket_ms / 10.0).round() as i64;
        let (sum, n) = by_hand[&(adapter.to_string(), streams, bucket)];
        ensure!(
            n == count && ((sum / n as f64) - mean).abs() <= 1e-12 * mean,
            "row {row} vs hand mean"
        );
    }

    // A 3x3 mesh: six populated pairs and the three missing self-pairs.
    let grid = GridReport::build(&data, Thresholds::default(), GridSelector::default());
    let missing = grid
        .cells
        .iter()
        .flatten()
        .filter(|c| c.color_class == ColorClass::Missing)
        .count();
    ensure!(
        grid.populated() == 6 && missing == 3,
        "{} populated, {missing} missing",
        grid.populated()
    );
    let html_missing = cells.values().filter(|v| v.is_none()).count();
    ensure!(html_missing == 3, "{html_missing} missing cells in HTML");
    Ok(format!(
        "byte-identical output, {} CSV rows and 9 grid cells match aggregate()",
        rows.len()
    ))
}

// 10. Markers arrive during a slow transfer.
async fn marker_protocol() -> Outcome {
    let lab = Lab::new().unwrap();
    let src = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let mut config = lab.endpoint_config(StorageBackend::memory());
    config.marker_period = Duration::from_millis(200);
    let dst: EndpointHandle = endpoint::serve(config).await.unwrap();
    src.storage()
        .generate_test_file(&ObjectPath::parse("/slow").unwrap(), 2_000_000, 10)
        .await
        .unwrap();
    let mut cfg = relay_config(src.local_addr(), 10.0);
    cfg.bandwidth_cap_bps = Some(16_000_000);
    let relay = start_relay(cfg).await.unwrap();
    let started = Instant::now();
    let reply = copy(
        &lab.client,
        &url_for(dst.local_addr(), "/slow-copy"),
        &url_for(relay.local_addr(), "/slow"),
        4,
        false,
    )
    .await;
    let elapsed = started.elapsed();
    relay.shutdown().await;
    src.shutdown().await;
    dst.shutdown().await;
    ensure!(
        elapsed >= Duration::from_millis(600),
        "transfer took only {elapsed:?}"
    );
    let (markers, terminal) = parse_perf_markers(&reply.body).map_err(|e| e.to_string())?;
    ensure!(terminal == Terminal::Success, "terminal {terminal:?}");
    ensure!(markers.len() >= 2, "{} markers", markers.len());
    let mut last: HashMap<u32, u64> = HashMap::new();
    for m in &markers {
        let prev = last
            .insert(m.stripe_index, m.stripe_bytes_transferred)
            .unwrap_or(0);
        ensure!(
            m.stripe_bytes_transferred >= prev,
            "stripe {} went backwards",
            m.stripe_index
        );
    }
    Ok(format!(
        "{} markers over {:.2} s, per-stripe counts non-decreasing, success terminal",
        markers.len(),
        elapsed.as_secs_f64()
    ))
}

fn main() {
    let criteria: [(u32, &str, Criterion); 10] = [
        (1, "TPC integrity", || Box::pin(integrity())),
        (2, "stripe partition", || Box::pin(stripe_partition())),
        (3, "throughput formula", || Box::pin(throughput_formula())),
        (4, "methodology defaults", || Box::pin(methodology_defaults())),
        (5, "shaper accuracy", || Box::pin(shaper_accuracy())),
        (6, "latency sensitivity", || Box::pin(latency_sensitivity())),
        (7, "failure atomicity", || Box::pin(failure_atomicity())),
        (8, "CA suite", || Box::pin(ca_suite())),
        (9, "reporting", || Box::pin(reporting())),
        (10, "marker protocol", || Box::pin(marker_protocol())),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = runtime.block_on(async {
            match AssertUnwindSafe(run()).catch_unwind().await {
                Ok(outcome) => outcome,
                Err(panic) => Err(panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into())),
            }
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({why}) [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
