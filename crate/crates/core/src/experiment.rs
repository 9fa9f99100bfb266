//! Repeated crawls of a mock market at several depth bounds, aggregated
//! into a depth-level report.

use std::path::{Path, PathBuf};
use std::time::Duration;

use indexmap::IndexMap;
use thiserror::Error;

use crate::captcha::CaptchaPolicy;
use crate::config::{validate_config, ConfigError, CrawlConfig, Credentials, MarketMetadata};
use crate::engine::{crawl, CrawlError, CrawlSummary};
use crate::metrics::{build_report, AggregateReport, LabeledRun, MetricsError};
use crate::mockmarket::{MockError, MockServer, SiteSpec, HOME_MARKER};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Mock(#[from] MockError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run {run} at depth {depth}: {source}")]
    Crawl {
        depth: u32,
        run: usize,
        #[source]
        source: CrawlError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Market metadata pointing at `server`'s home page, with the fixture
/// credentials when the site wants a login.
pub fn metadata_for(server: &MockServer) -> MarketMetadata {
    let spec = server.spec();
    MarketMetadata {
        market_name: "mockmarket".into(),
        starting_links: vec![server.page_url(0).to_string()],
        credentials: spec.login_required.then(|| Credentials {
            username: spec.username.clone(),
            password: spec.password.clone(),
            login_path: "/login".into(),
            username_field: "username".into(),
            password_field: "password".into(),
            extra_fields: IndexMap::new(),
        }),
        cookies: Vec::new(),
        captcha_hints: Vec::new(),
        expected_home_marker: HOME_MARKER.into(),
    }
}

/// Crawl settings suited to a local mock: no politeness delay, short
/// timeouts, fixed seed.
pub fn local_config(output_dir: impl Into<PathBuf>) -> CrawlConfig {
    CrawlConfig {
        output_dir: output_dir.into(),
        politeness_delay: Duration::ZERO,
        request_timeout: Duration::from_secs(10),
        retry_backoff: Duration::from_millis(10),
        ..CrawlConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct DepthSeries {
    pub site: SiteSpec,
    pub depths: Vec<u32>,
    pub runs: usize,
    /// Each run writes to `<output_root>/depth-<d>/run-<i>`.
    pub output_root: PathBuf,
    pub template: CrawlConfig,
}

impl DepthSeries {
    pub fn new(site: SiteSpec, depths: Vec<u32>, runs: usize, output_root: impl AsRef<Path>) -> Self {
        let output_root = output_root.as_ref().to_path_buf();
        Self {
            site,
            depths,
            runs,
            template: local_config(&output_root),
            output_root,
        }
    }
}

/// One crawl of a freshly started mock market at depth bound `depth`.
pub async fn single_run(
    site: &SiteSpec,
    mut cfg: CrawlConfig,
    depth: Option<u32>,
) -> Result<(CrawlSummary, MockServer), ExperimentError> {
    let server = MockServer::start(site.clone()).await?;
    cfg.max_depth = depth;
    let cfg = validate_config(cfg)?;
    let summary = crawl(cfg, metadata_for(&server), CaptchaPolicy::Fail)
        .await
        .map_err(|source| ExperimentError::Crawl {
            depth: depth.unwrap_or(0),
            run: 0,
            source,
        })?;
    Ok((summary, server))
}

/// Run the whole series. Every run gets its own mock server so that fault
/// counters and sessions start fresh.
pub async fn run_series(series: &DepthSeries) -> Result<(AggregateReport, Vec<LabeledRun>), ExperimentError> {
    let mut runs = Vec::new();
    for &depth in &series.depths {
        for run in 0..series.runs {
            let mut cfg = series.template.clone();
            cfg.output_dir = series
                .output_root
                .join(format!("depth-{depth}"))
                .join(format!("run-{run}"));
            let (summary, _server) = single_run(&series.site, cfg, Some(depth))
                .await
                .map_err(|e| match e {
                    ExperimentError::Crawl { source, .. } => ExperimentError::Crawl { depth, run, source },
                    other => other,
                })?;
            runs.push(LabeledRun {
                depth,
                metrics: summary.run_metrics,
            });
        }
    }
    Ok((build_report(&runs)?, runs))
}
