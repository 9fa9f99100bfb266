use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tenebra::api;
use tenebra::captcha::CaptchaPolicy;
use tenebra::config::{load_market_metadata, validate_config, CrawlConfig, ProxySpec};
use tenebra::engine::{CrawlError, Crawler};
use tenebra::experiment::{run_series, DepthSeries};
use tenebra::metrics::{build_report, render_report, LabeledRun, ReportFormat};
use tenebra::mockmarket::SiteSpec;

#[derive(Parser)]
#[command(name = "tenebra", version, about = "Breadth-first crawler for login-walled marketplaces")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Crawl a market.
    Crawl(CrawlArgs),
    /// Crawl a mock market repeatedly at several depths and report the metrics.
    Bench(BenchArgs),
    /// Re-render a report from saved per-run metrics.
    Report(ReportArgs),
}

#[derive(Args)]
struct CrawlArgs {
    /// Crawl configuration (JSON). Flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Market metadata (JSON): starting links, credentials, cookies.
    #[arg(long)]
    market_meta: PathBuf,
    #[arg(long)]
    max_depth: Option<u32>,
    #[arg(long)]
    max_links: Option<u64>,
    /// Seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    /// One target URL per line; the crawl stops once all are downloaded.
    #[arg(long)]
    targets_file: Option<PathBuf>,
    /// `socks5h://host:port` or `http://host:port`.
    #[arg(long)]
    proxy: Option<ProxySpec>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// interactive, abandon, fail or script:<file>
    #[arg(long, default_value = "interactive")]
    captcha_policy: CaptchaPolicy,
    /// Seconds to wait for a captcha solution.
    #[arg(long)]
    captcha_timeout: Option<f64>,
    /// Serve the control API on 127.0.0.1:<port> while crawling.
    #[arg(long)]
    api_port: Option<u16>,
}

#[derive(Args)]
struct BenchArgs {
    /// Mock market spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    depths: Vec<u32>,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long)]
    output_dir: PathBuf,
    /// json, csv or markdown
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
}

#[derive(Args)]
struct ReportArgs {
    /// `runs.json` written by `bench`.
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    /// Write here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn secs(v: f64) -> anyhow::Result<Duration> {
    Duration::try_from_secs_f64(v).map_err(|e| anyhow::anyhow!("bad duration {v}: {e}"))
}

fn read_targets(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

fn build_config(args: &CrawlArgs) -> anyhow::Result<CrawlConfig> {
    let mut cfg = match &args.config {
        Some(path) => CrawlConfig::load(path)?,
        None => CrawlConfig::default(),
    };
    if let Some(d) = args.max_depth {
        cfg.max_depth = Some(d);
    }
    if let Some(n) = args.max_links {
        cfg.max_links = Some(n);
    }
    if let Some(t) = args.time_limit {
        cfg.time_limit = Some(secs(t)?);
    }
    if let Some(path) = &args.targets_file {
        cfg.target_links = Some(read_targets(path)?);
    }
    if let Some(p) = &args.proxy {
        cfg.proxy = Some(p.clone());
    }
    if let Some(s) = args.seed {
        cfg.rng_seed = s;
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(t) = args.captcha_timeout {
        cfg.captcha_timeout = secs(t)?;
    }
    Ok(cfg)
}

async fn crawl(args: CrawlArgs) -> ExitCode {
    let prepared = build_config(&args).and_then(|cfg| {
        let meta = load_market_metadata(&args.market_meta)?;
        Ok((validate_config(cfg)?, meta))
    });
    let (cfg, meta) = match prepared {
        Ok(p) => p,
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let crawler = Crawler::new(cfg, meta, args.captcha_policy);
    let _api = match args.api_port {
        Some(port) => match api::serve(crawler.control(), port).await {
            Ok(server) => {
                eprintln!("control api on http://{}", server.addr());
                Some(server)
            }
            Err(e) => {
                eprintln!("cannot bind control api: {e}");
                return ExitCode::from(2);
            }
        },
        None => None,
    };
    let control = crawler.control();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("stopping");
            control.send(tenebra::engine::Command::Stop);
        }
    });
    match crawler.run().await {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            if let CrawlError::NoValidStartingLink(diagnoses) = &e {
                for d in diagnoses {
                    eprintln!("  {d}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

async fn bench(args: BenchArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let spec: SiteSpec = serde_json::from_str(&text).context("parsing mock market spec")?;
    let series = DepthSeries::new(spec, args.depths, args.runs, &args.output_dir);
    let (report, runs) = run_series(&series).await?;
    let runs_path = args.output_dir.join("runs.json");
    std::fs::write(&runs_path, serde_json::to_string_pretty(&runs)?)?;
    std::fs::write(
        args.output_dir.join("report.json"),
        render_report(&report, ReportFormat::Json)?,
    )?;
    print!("{}", render_report(&report, args.format)?);
    eprintln!("per-run metrics in {}", runs_path.display());
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.runs).with_context(|| format!("reading {}", args.runs.display()))?;
    let runs: Vec<LabeledRun> = serde_json::from_str(&text).context("parsing runs")?;
    let out = render_report(&build_report(&runs)?, args.format)?;
    match args.output {
        Some(path) => std::fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{out}"),
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Crawl(args) => return crawl(args).await,
        Cmd::Bench(args) => bench(args).await,
        Cmd::Report(args) => report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
