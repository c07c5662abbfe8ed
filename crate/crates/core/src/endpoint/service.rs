use std::convert::Infallible;
use std::sync::Arc;

use futures_util::TryStreamExt;
use http_body_util::{BodyExt, StreamBody};
use hyper::body::{Frame, Incoming};
use hyper::header::{self, HeaderMap, HeaderValue};
use hyper::{Method, Request, Response, StatusCode};
use tokio::io::AsyncReadExt;
use tokio_util::io::ReaderStream;

use super::{copy, EndpointState};
use crate::digest::{Adler32, Digest};
use crate::http::{self, Body, BoxError};
use crate::storage::{ObjectBody, ObjectPath, StorageError};

pub(super) const WANT_DIGEST: &str = "want-digest";
pub(super) const DIGEST: &str = "digest";
pub(super) const SOURCE: &str = "source";
pub(super) const STREAMS: &str = "x-number-of-streams";

pub(super) fn text(status: StatusCode, msg: impl Into<String>) -> Response<Body> {
    let mut msg = msg.into();
    msg.push('\n');
    let mut resp = Response::new(http::full(msg));
    *resp.status_mut() = status;
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("text/plain"));
    resp
}

fn storage_status(err: &StorageError) -> StatusCode {
    match err {
        StorageError::InvalidPath(_) => StatusCode::FORBIDDEN,
        StorageError::NotFound(_) => StatusCode::NOT_FOUND,
        StorageError::RangeNotSatisfiable { .. } => StatusCode::RANGE_NOT_SATISFIABLE,
        StorageError::CapacityExceeded { .. } => StatusCode::INSUFFICIENT_STORAGE,
        StorageError::EmptyObject | StorageError::Overrun => StatusCode::BAD_REQUEST,
        StorageError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub(super) fn wants_adler32(headers: &HeaderMap) -> bool {
    headers
        .get_all(WANT_DIGEST)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .any(|alg| {
            alg.split(';')
                .next()
                .is_some_and(|a| a.trim().eq_ignore_ascii_case("adler32"))
        })
}

#[derive(Debug, PartialEq, Eq)]
enum RangeSpec {
    FromTo(u64, u64),
    From(u64),
    Suffix(u64),
}

/// Single-range `bytes=` specs only.
fn parse_range(value: &str) -> Option<RangeSpec> {
    let spec = value.trim().strip_prefix("bytes=")?;
    if spec.contains(',') {
        return None;
    }
    let (a, b) = spec.split_once('-')?;
    let (a, b) = (a.trim(), b.trim());
    match (a.is_empty(), b.is_empty()) {
        (false, false) => Some(RangeSpec::FromTo(a.parse().ok()?, b.parse().ok()?)),
        (false, true) => Some(RangeSpec::From(a.parse().ok()?)),
        (true, false) => Some(RangeSpec::Suffix(b.parse().ok()?)),
        (true, true) => None,
    }
}

pub(super) async fn handle(
    state: Arc<EndpointState>,
    req: Request<Incoming>,
) -> Result<Response<Body>, Infallible> {
    let method = req.method().clone();
    let raw_path = req.uri().path().to_string();
    let path = match ObjectPath::parse(&raw_path) {
        Ok(p) => p,
        Err(e) => {
            state.log_access(method.as_str(), &raw_path, None, 403);
            return Ok(text(StatusCode::FORBIDDEN, e.to_string()));
        }
    };
    let response = match method.as_str() {
        "GET" => get(&state, &path, req.headers(), false).await,
        "HEAD" => get(&state, &path, req.headers(), true).await,
        "PUT" => put(&state, &path, req).await,
        "DELETE" => match state.storage.delete(&path).await {
            Ok(()) => {
                let mut r = Response::new(http::empty());
                *r.status_mut() = StatusCode::NO_CONTENT;
                r
            }
            Err(e) => text(storage_status(&e), e.to_string()),
        },
        "COPY" => copy::handle_copy(state.clone(), path.clone(), req.headers()).await,
        _ => {
            let mut r = text(StatusCode::METHOD_NOT_ALLOWED, "method not allowed");
            r.headers_mut().insert(
                header::ALLOW,
                HeaderValue::from_static("GET, HEAD, PUT, DELETE, COPY"),
            );
            r
        }
    };
    if method != Method::GET {
        state.log_access(
            method.as_str(),
            &path.to_string(),
            None,
            response.status().as_u16(),
        );
    }
    Ok(response)
}

async fn get(
    state: &EndpointState,
    path: &ObjectPath,
    headers: &HeaderMap,
    head_only: bool,
) -> Response<Body> {
    let size = match state.storage.size(path).await {
        Ok(size) => size,
        Err(e) => {
            if !head_only {
                state.log_access("GET", &path.to_string(), None, storage_status(&e).as_u16());
            }
            return text(storage_status(&e), e.to_string());
        }
    };
    let range_header = headers.get(header::RANGE).and_then(|v| v.to_str().ok());
    let range = match range_header.map(parse_range) {
        None => None,
        Some(None) => {
            return text(StatusCode::BAD_REQUEST, "unsupported Range header");
        }
        Some(Some(spec)) => {
            let resolved = match spec {
                RangeSpec::FromTo(a, b) => (a, b),
                RangeSpec::From(a) => (a, u64::MAX),
                RangeSpec::Suffix(n) => (size.saturating_sub(n), u64::MAX),
            };
            if size == 0 || resolved.0 >= size || resolved.1 < resolved.0 {
                if !head_only {
                    state.log_access("GET", &path.to_string(), None, 416);
                }
                let mut r = text(StatusCode::RANGE_NOT_SATISFIABLE, "range not satisfiable");
                r.headers_mut().insert(
                    header::CONTENT_RANGE,
                    HeaderValue::from_str(&format!("bytes */{size}")).unwrap(),
                );
                return r;
            }
            Some(resolved)
        }
    };

    let digest = if wants_adler32(headers) {
        match state.storage.digest(path).await {
            Ok(d) => Some(d),
            Err(e) => return text(storage_status(&e), e.to_string()),
        }
    } else {
        None
    };

    if head_only {
        let mut r = Response::new(http::empty());
        let h = r.headers_mut();
        h.insert(header::CONTENT_LENGTH, HeaderValue::from(size));
        h.insert(header::ACCEPT_RANGES, HeaderValue::from_static("bytes"));
        if let Some(d) = digest {
            h.insert(DIGEST, HeaderValue::from_str(&d.header_value()).unwrap());
        }
        return r;
    }

    let read = match state.storage.read(path, range).await {
        Ok(read) => read,
        Err(e) => {
            state.log_access("GET", &path.to_string(), None, storage_status(&e).as_u16());
            return text(storage_status(&e), e.to_string());
        }
    };
    let served = range.map(|_| (read.offset, read.offset + read.len - 1));
    let status = if served.is_some() {
        StatusCode::PARTIAL_CONTENT
    } else {
        StatusCode::OK
    };
    state.log_access("GET", &path.to_string(), served, status.as_u16());

    let body: Body = match read.body {
        ObjectBody::Memory(bytes) => http::full(bytes),
        ObjectBody::File { file, len } => {
            let stream = ReaderStream::with_capacity(file.take(len), 256 * 1024)
                .map_ok(Frame::data)
                .map_err(|e| Box::new(e) as BoxError);
            BodyExt::boxed(StreamBody::new(stream))
        }
    };
    let mut r = Response::new(body);
    *r.status_mut() = status;
    let h = r.headers_mut();
    h.insert(header::CONTENT_LENGTH, HeaderValue::from(read.len));
    h.insert(header::ACCEPT_RANGES, HeaderValue::from_static("bytes"));
    if let Some((a, b)) = served {
        h.insert(
            header::CONTENT_RANGE,
            HeaderValue::from_str(&format!("bytes {a}-{b}/{}", read.total_size)).unwrap(),
        );
    }
    if let Some(d) = digest {
        h.insert(DIGEST, HeaderValue::from_str(&d.header_value()).unwrap());
    }
    r
}

async fn put(state: &EndpointState, path: &ObjectPath, req: Request<Incoming>) -> Response<Body> {
    let want_digest = wants_adler32(req.headers());
    let existed = state.storage.exists(path).await;
    let staged = match state.storage.stage(path).await {
        Ok(s) => s,
        Err(e) => return text(storage_status(&e), e.to_string()),
    };
    let mut sink = match staged.sink(0, None).await {
        Ok(s) => s,
        Err(e) => return text(storage_status(&e), e.to_string()),
    };
    let mut digest = Adler32::new();
    let mut body = req.into_body();
    while let Some(frame) = body.frame().await {
        let frame = match frame {
            Ok(f) => f,
            Err(e) => return text(StatusCode::BAD_REQUEST, format!("request body: {e}")),
        };
        if let Ok(data) = frame.into_data() {
            digest.update(&data);
            if let Err(e) = sink.write(&data).await {
                return text(storage_status(&e), e.to_string());
            }
        }
    }
    let segment = match sink.finish().await {
        Ok(s) => s,
        Err(e) => return text(storage_status(&e), e.to_string()),
    };
    if let Err(e) = staged.commit(vec![segment]).await {
        return text(storage_status(&e), e.to_string());
    }
    let mut r = Response::new(http::empty());
    *r.status_mut() = if existed {
        StatusCode::NO_CONTENT
    } else {
        StatusCode::CREATED
    };
    if want_digest {
        r.headers_mut().insert(
            DIGEST,
            HeaderValue::from_str(&Digest(digest.value()).header_value()).unwrap(),
        );
    }
    r
}
