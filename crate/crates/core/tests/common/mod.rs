#![allow(dead_code)]

use std::collections::BTreeSet;

use tempfile::TempDir;
use tenebra::captcha::CaptchaPolicy;
use tenebra::config::{validate_config, CrawlConfig, MarketMetadata};
use tenebra::engine::{crawl, CrawlError, CrawlSummary};
use tenebra::experiment::{local_config, metadata_for};
use tenebra::extractor::{Outcome, PageRecord};
use tenebra::frontier::CanonicalUrl;
use tenebra::mockmarket::{MockServer, SiteSpec};

pub struct CrawlRun {
    pub result: Result<CrawlSummary, CrawlError>,
    pub server: MockServer,
    pub dir: TempDir,
}

impl CrawlRun {
    pub fn summary(&self) -> &CrawlSummary {
        self.result.as_ref().expect("crawl succeeded")
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let text = std::fs::read_to_string(self.dir.path().join("out/summary.json")).expect("summary.json");
        serde_json::from_str(&text).unwrap()
    }
}

/// Start a mock market for `spec`, crawl it and hand back everything.
pub async fn crawl_mock(
    spec: SiteSpec,
    policy: CaptchaPolicy,
    tweak_cfg: impl FnOnce(&mut CrawlConfig),
    tweak_meta: impl FnOnce(&mut MarketMetadata, &MockServer),
) -> CrawlRun {
    crawl_mock_with(spec, policy, |cfg, meta, server| {
        tweak_cfg(cfg);
        tweak_meta(meta, server);
    })
    .await
}

/// Like [`crawl_mock`], for settings that depend on the server address.
pub async fn crawl_mock_with(
    spec: SiteSpec,
    policy: CaptchaPolicy,
    tweak: impl FnOnce(&mut CrawlConfig, &mut MarketMetadata, &MockServer),
) -> CrawlRun {
    let server = MockServer::start(spec).await.expect("mock market");
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = local_config(dir.path().join("out"));
    let mut meta = metadata_for(&server);
    tweak(&mut cfg, &mut meta, &server);
    let cfg = validate_config(cfg).expect("valid config");
    let result = crawl(cfg, meta, policy).await;
    CrawlRun { result, server, dir }
}

pub fn urls_with(records: &[PageRecord], outcome: Outcome) -> BTreeSet<CanonicalUrl> {
    records.iter().filter(|r| r.outcome == outcome).map(|r| r.url.clone()).collect()
}

/// Page id from a `/p/<id>` path.
pub fn page_id(path: &str) -> Option<usize> {
    path.strip_prefix("/p/")?.parse().ok()
}
