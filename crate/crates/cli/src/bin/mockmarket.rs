use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use tenebra::mockmarket::{generate_site, serve, SiteSpec};

/// Serve a deterministic mock market on localhost.
#[derive(Parser)]
#[command(name = "mockmarket", version)]
struct Args {
    /// Site spec (JSON): page_count, branching, seed, login_required,
    /// captcha_pages, fault_plan, cookie_ttl_requests, username, password.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    port: u16,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let text = std::fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let spec: SiteSpec = serde_json::from_str(&text).context("parsing spec")?;
    spec.validate()?;
    let site = generate_site(&spec);
    let server = serve(site, spec, args.port).await?;
    println!("{}", server.page_url(0));
    tokio::signal::ctrl_c().await?;
    server.shutdown();
    Ok(())
}
