use async_trait::async_trait;
use futures_util::stream;
use http_body_util::{BodyExt, StreamBody};
use hyper::body::Frame;
use hyper::header;
use hyper::{Method, Request, StatusCode};
use url::Url;

use super::{EndpointSpec, Staging};
use crate::http::{self, BoxError, HttpsClient};
use crate::testdata::TestPattern;

fn path_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Path of the `index`-th source test file of `size` bytes. Seeded by
/// index, so every file in a measurement has distinct content.
pub fn source_path(size: u64, index: usize) -> String {
    format!("/tpcbench/source/{size}/file-{index:03}")
}

/// Destination path for the `index`-th copy from endpoint `source`.
pub fn dest_path(source: &str, index: usize) -> String {
    format!("/tpcbench/dest/{}/file-{index:03}", path_safe(source))
}

/// Stages test files by PUT over HTTPS and deletes copies afterwards.
pub struct HttpStaging {
    client: HttpsClient,
}

impl HttpStaging {
    pub fn new(client: HttpsClient) -> Self {
        Self { client }
    }

    async fn size_of(&self, url: &Url) -> Option<u64> {
        let resp = self
            .client
            .send(url, Request::builder().method(Method::HEAD), http::empty())
            .await
            .ok()?;
        if resp.status() != StatusCode::OK {
            return None;
        }
        resp.headers()
            .get(header::CONTENT_LENGTH)?
            .to_str()
            .ok()?
            .parse()
            .ok()
    }

    async fn upload(&self, url: &Url, size: u64, seed: u64) -> Result<(), String> {
        let frames =
            stream::iter(TestPattern::new(size, seed).map(|chunk| Ok::<_, BoxError>(Frame::data(chunk))));
        let req = Request::builder()
            .method(Method::PUT)
            .header(header::CONTENT_LENGTH, size);
        let resp = self
            .client
            .send(url, req, BodyExt::boxed(StreamBody::new(frames)))
            .await
            .map_err(|e| format!("PUT {url}: {e}"))?;
        if !resp.status().is_success() {
            return Err(format!("PUT {url} answered {}", resp.status()));
        }
        Ok(())
    }
}

#[async_trait]
impl Staging for HttpStaging {
    async fn stage_sources(
        &self,
        endpoint: &EndpointSpec,
        size: u64,
        count: usize,
    ) -> Result<Vec<Url>, String> {
        let mut urls = Vec::with_capacity(count);
        for index in 0..count {
            let url = endpoint
                .object_url(&source_path(size, index))
                .map_err(|e| e.to_string())?;
            // Files are deterministic per (size, index), so an object of the
            // right size is the one we would write.
            if self.size_of(&url).await != Some(size) {
                self.upload(&url, size, index as u64).await?;
            }
            urls.push(url);
        }
        Ok(urls)
    }

    async fn cleanup(&self, urls: &[Url]) {
        for url in urls {
            let req = Request::builder().method(Method::DELETE);
            if let Err(e) = self.client.send(url, req, http::empty()).await {
                tracing::debug!(%url, "cleanup failed: {e}");
            }
        }
    }

    async fn reachable(&self, endpoint: &EndpointSpec) -> bool {
        let req = Request::builder().method(Method::HEAD);
        self.client
            .send(&endpoint.base_url, req, http::empty())
            .await
            .is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_are_distinct_and_valid() {
        assert_eq!(source_path(1000, 3), "/tpcbench/source/1000/file-003");
        assert_eq!(dest_path("site a/b", 0), "/tpcbench/dest/site_a_b/file-000");
        assert_ne!(dest_path("a", 1), dest_path("a", 2));
        crate::storage::ObjectPath::parse(&dest_path("..", 0)).unwrap();
    }
}
