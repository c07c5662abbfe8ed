mod common;

use std::time::Duration;

use bytes::Bytes;
use common::*;
use hyper::{Method, Request, StatusCode};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tpcbench_core::endpoint::{self, SessionState, TOO_MANY_TRANSFERS};
use tpcbench_core::http::HttpsClient;
use tpcbench_core::lab::{url_for, Lab};
use tpcbench_core::markers::{parse_perf_markers, Terminal};
use tpcbench_core::shaper::{start_relay, ShaperConfig};
use tpcbench_core::storage::{ObjectPath, StorageBackend};
use tpcbench_core::tls;

#[tokio::test]
async fn get_returns_exact_bytes_and_ranges() {
    let lab = Lab::new().unwrap();
    let ep = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let data = random_bytes(1000, 1);
    ep.storage()
        .put_bytes(&ObjectPath::parse("/obj").unwrap(), Bytes::from(data.clone()))
        .await
        .unwrap();
    let url = url_for(ep.local_addr(), "/obj");

    let full = get(&lab.client, &url, None).await;
    assert_eq!(full.status, StatusCode::OK);
    assert_eq!(&full.body[..], &data[..]);

    let first = get(&lab.client, &url, Some("bytes=0-0")).await;
    assert_eq!(first.status, StatusCode::PARTIAL_CONTENT);
    assert_eq!(&first.body[..], &data[..1]);

    let mid = get(&lab.client, &url, Some("bytes=100-199")).await;
    assert_eq!(mid.status, StatusCode::PARTIAL_CONTENT);
    assert_eq!(&mid.body[..], &data[100..200]);
    assert_eq!(mid.headers["content-range"], "bytes 100-199/1000");

    let tail = get(&lab.client, &url, Some("bytes=990-5000")).await;
    assert_eq!(&tail.body[..], &data[990..]);

    let bad = get(&lab.client, &url, Some("bytes=1000-1001")).await;
    assert_eq!(bad.status, StatusCode::RANGE_NOT_SATISFIABLE);

    let missing = get(&lab.client, &url_for(ep.local_addr(), "/nope"), None).await;
    assert_eq!(missing.status, StatusCode::NOT_FOUND);
    ep.shutdown().await;
}

#[tokio::test]
async fn put_round_trip_and_digest() {
    let lab = Lab::new().unwrap();
    let ep = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let data = random_bytes(1_000_000, 2);
    let url = url_for(ep.local_addr(), "/up/load");
    let created = request(
        &lab.client,
        &url,
        Request::builder()
            .method(Method::PUT)
            .header("want-digest", "adler32"),
        Bytes::from(data.clone()),
    )
    .await;
    assert_eq!(created.status, StatusCode::CREATED);
    assert_eq!(created.digest(), Some(oracle_adler32(&data)));
    let back = get(&lab.client, &url, None).await;
    assert_eq!(oracle_adler32(&back.body), oracle_adler32(&data));

    let again = put(&lab.client, &url, Bytes::from_static(b"x")).await;
    assert_eq!(again.status, StatusCode::NO_CONTENT);
    ep.shutdown().await;
}

#[tokio::test]
async fn head_digest_matches_reference_on_both_backends() {
    let lab = Lab::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mem = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let disk = lab.endpoint(StorageBackend::disk(dir.path())).await.unwrap();
    let data = random_bytes(1 << 20, 3);
    let mut digests = Vec::new();
    for ep in [&mem, &disk] {
        let url = url_for(ep.local_addr(), "/d");
        put(&lab.client, &url, data.clone()).await;
        let head = request(
            &lab.client,
            &url,
            Request::builder()
                .method(Method::HEAD)
                .header("want-digest", "adler32"),
            Bytes::new(),
        )
        .await;
        assert_eq!(head.headers["content-length"], "1048576");
        digests.push(head.digest().unwrap());
    }
    assert_eq!(digests[0], digests[1]);
    assert_eq!(digests[0], oracle_adler32(&data));
    mem.shutdown().await;
    disk.shutdown().await;
}

#[tokio::test]
async fn path_escape_is_rejected_on_disk() {
    let lab = Lab::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let ep = lab.endpoint(StorageBackend::disk(&root)).await.unwrap();
    // Raw request target, since URL parsing would normalise the dots away.
    let mut sender = lab.client.connect(&url_for(ep.local_addr(), "/")).await.unwrap();
    let req = Request::builder()
        .method(Method::PUT)
        .uri("/../etc/x")
        .header("host", "127.0.0.1")
        .body(tpcbench_core::http::full("evil"))
        .unwrap();
    let resp = sender.send_request(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::FORBIDDEN);
    assert!(!dir.path().join("etc").exists());
    ep.shutdown().await;
}

#[tokio::test]
async fn concurrent_puts_never_mix() {
    let lab = Lab::new().unwrap();
    let ep = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let a = random_bytes(200_000, 10);
    let b = random_bytes(200_000, 11);
    let (da, db) = (oracle_adler32(&a), oracle_adler32(&b));
    let url = url_for(ep.local_addr(), "/contended");
    for _ in 0..100 {
        let (ra, rb) = tokio::join!(
            put(&lab.client, &url, a.clone()),
            put(&lab.client, &url, b.clone())
        );
        assert!(ra.status.is_success() && rb.status.is_success());
        let d = oracle_adler32(&get(&lab.client, &url, None).await.body);
        assert!(d == da || d == db);
    }
    ep.shutdown().await;
}

#[tokio::test]
async fn mutual_tls_rejects_anonymous_clients() {
    let lab = Lab::new().unwrap();
    let mut config = lab.endpoint_config(StorageBackend::memory());
    config.require_client_cert = true;
    let ep = endpoint::serve(config).await.unwrap();
    ep.storage()
        .put_bytes(&ObjectPath::parse("/o").unwrap(), Bytes::from_static(b"hi"))
        .await
        .unwrap();
    let url = url_for(ep.local_addr(), "/o");
    let anonymous = HttpsClient::new(tls::client_config(&lab.ca, None).unwrap());
    let attempt = anonymous
        .send(
            &url,
            Request::builder().method(Method::GET),
            tpcbench_core::http::empty(),
        )
        .await;
    assert!(attempt.is_err(), "anonymous client was served");
    assert_eq!(get(&lab.client, &url, None).await.body, Bytes::from_static(b"hi"));
    ep.shutdown().await;
}

#[tokio::test]
async fn plaintext_is_refused() {
    let lab = Lab::new().unwrap();
    let ep = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let mut tcp = tokio::net::TcpStream::connect(ep.local_addr()).await.unwrap();
    tcp.write_all(b"GET /x HTTP/1.1\r\nHost: a\r\n\r\n")
        .await
        .unwrap();
    let mut buf = Vec::new();
    let _ = tokio::time::timeout(Duration::from_secs(5), tcp.read_to_end(&mut buf)).await;
    assert!(!buf.starts_with(b"HTTP/"));
    ep.shutdown().await;
}

#[tokio::test]
async fn session_limit_refuses_the_extra_copy() {
    let lab = Lab::new().unwrap();
    let source = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let path = ObjectPath::parse("/slow").unwrap();
    source
        .storage()
        .generate_test_file(&path, 1_000_000, 1)
        .await
        .unwrap();
    // A slow link keeps the first sessions busy.
    let mut cfg = ShaperConfig::new(
        "127.0.0.1:0".parse().unwrap(),
        source.local_addr().to_string(),
        50.0,
    );
    cfg.bandwidth_cap_bps = Some(8_000_000);
    let relay = start_relay(cfg).await.unwrap();
    let src_url = url_for(relay.local_addr(), "/slow");

    let mut config = lab.endpoint_config(StorageBackend::memory());
    config.max_sessions = 2;
    let dest = endpoint::serve(config).await.unwrap();
    let client = lab.client.clone();
    let busy: Vec<_> = (0..2)
        .map(|i| {
            let (client, dest_url, src) = (
                client.clone(),
                url_for(dest.local_addr(), &format!("/c{i}")),
                src_url.clone(),
            );
            tokio::spawn(async move { copy(&client, &dest_url, &src, 1, false).await })
        })
        .collect();
    for _ in 0..200 {
        if dest.active_sessions() == 2 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(dest.active_sessions(), 2);
    let extra = copy(
        &lab.client,
        &url_for(dest.local_addr(), "/c2"),
        &src_url,
        1,
        false,
    )
    .await;
    assert_eq!(extra.status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(extra.text().contains(TOO_MANY_TRANSFERS));
    for task in busy {
        let reply = task.await.unwrap();
        assert!(reply.text().ends_with("success: Created\n"), "{}", reply.text());
    }
    relay.shutdown().await;
    dest.shutdown().await;
    source.shutdown().await;
}

#[tokio::test]
async fn copy_single_and_multi_stream_agree() {
    let lab = Lab::new().unwrap();
    let source = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let dest = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let path = ObjectPath::parse("/ten").unwrap();
    let expected = source
        .storage()
        .generate_test_file(&path, 10_000_000, 5)
        .await
        .unwrap();
    let src_url = url_for(source.local_addr(), "/ten");
    let mut digests = Vec::new();
    for streams in [1u32, 8] {
        let dest_url = url_for(dest.local_addr(), &format!("/copy{streams}"));
        let reply = copy(&lab.client, &dest_url, &src_url, streams, true).await;
        assert_eq!(reply.status, StatusCode::CREATED);
        assert_eq!(reply.headers["content-type"], "text/perf-marker-stream");
        let (markers, terminal) = parse_perf_markers(&reply.body).unwrap();
        assert_eq!(terminal, Terminal::Success);
        // The final block reports every stripe complete.
        let last: u64 = markers
            .iter()
            .rev()
            .take(streams as usize)
            .map(|m| m.stripe_bytes_transferred)
            .sum();
        assert_eq!(last, 10_000_000);
        assert_eq!(reply.digest(), Some(expected));
        let stored = dest
            .storage()
            .digest(&ObjectPath::parse(dest_url.path()).unwrap())
            .await
            .unwrap();
        digests.push(stored);
    }
    assert_eq!(digests, vec![expected, expected]);

    let sessions = dest.sessions();
    assert_eq!(sessions.len(), 2);
    assert_eq!(sessions[1].stream_count, 8);
    assert_eq!(sessions[1].stripe_bytes.len(), 8);
    assert_eq!(sessions[1].stripe_bytes.iter().sum::<u64>(), 10_000_000);
    assert_eq!(sessions[1].state, SessionState::Succeeded);
    // One plain GET for a single stream, eight ranged GETs otherwise.
    let gets: Vec<_> = source
        .access_log()
        .into_iter()
        .filter(|r| r.method == "GET")
        .collect();
    assert_eq!(gets.len(), 9);
    assert!(gets[0].range.is_none() && gets[1..].iter().all(|r| r.range.is_some()));
    source.shutdown().await;
    dest.shutdown().await;
}

#[tokio::test]
async fn copy_from_missing_source_fails_cleanly() {
    let lab = Lab::new().unwrap();
    let source = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let dest = lab.endpoint(StorageBackend::memory()).await.unwrap();
    let dest_url = url_for(dest.local_addr(), "/never");
    let reply = copy(
        &lab.client,
        &dest_url,
        &url_for(source.local_addr(), "/absent"),
        4,
        false,
    )
    .await;
    assert_eq!(reply.status, StatusCode::CREATED);
    let (_, terminal) = parse_perf_markers(&reply.body).unwrap();
    assert!(
        matches!(terminal, Terminal::Failure(ref r) if r.contains("404")),
        "{terminal:?}"
    );
    assert!(!dest.storage().exists(&ObjectPath::parse("/never").unwrap()).await);

    let bad = copy(
        &lab.client,
        &dest_url,
        &"http://127.0.0.1:1/x".parse().unwrap(),
        1,
        false,
    )
    .await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
    source.shutdown().await;
    dest.shutdown().await;
}

#[tokio::test]
async fn bad_config_is_rejected() {
    let lab = Lab::new().unwrap();
    let mut config = lab.endpoint_config(StorageBackend::memory());
    config.marker_period = Duration::ZERO;
    assert!(endpoint::serve(config).await.is_err());
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let mut config = lab.endpoint_config(StorageBackend::memory());
    config.listen = taken.local_addr().unwrap();
    assert!(matches!(
        endpoint::serve(config).await,
        Err(endpoint::EndpointError::Bind { .. })
    ));
}
