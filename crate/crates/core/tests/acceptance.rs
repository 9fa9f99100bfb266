//! End-to-end acceptance checks against the mock market. Prints one
//! `PASS`/`FAIL` line per criterion and exits non-zero if any failed.

mod common;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::future::Future;
use std::pin::Pin;
use std::time::{Duration, Instant};

use chrono::Utc;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{crawl_mock, urls_with};
use tenebra::captcha::{CaptchaPolicy, ChallengeState};
use tenebra::config::CookieSpec;
use tenebra::engine::CrawlError;
use tenebra::experiment::DepthSeries;
use tenebra::extractor::{Outcome, PageRecord};
use tenebra::frontier::CanonicalUrl;
use tenebra::metrics::{build_report, compute_run_metrics, render_report, LabeledRun, ReportFormat, RunMetrics, Stat};
use tenebra::mockmarket::{oracle_reachable, reachable_ids, FaultBehavior, FaultRule, SiteGraph, SiteSpec};
use tenebra::session::CookieJar;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

async fn coverage() -> Check {
    let mut worst = Duration::ZERO;
    for pages in [100, 1000] {
        for depth in 1..=4 {
            let start = Instant::now();
            let run = crawl_mock(SiteSpec::new(pages, 3, 7), CaptchaPolicy::Fail, |c| c.max_depth = Some(depth), |_, _| {}).await;
            let took = start.elapsed();
            worst = worst.max(took);
            let summary = run.result.as_ref().map_err(|e| e.to_string())?;
            let expected = oracle_reachable(run.server.site(), Some(depth), &run.server.base_url());
            let got = urls_with(&summary.records, Outcome::Downloaded);
            ensure!(got == expected, "{pages} pages, depth {depth}: downloaded {} vs oracle {}", got.len(), expected.len());
            let m = &summary.run_metrics;
            ensure!(m.relative_coverage == 1.0, "{pages}/{depth}: coverage {}", m.relative_coverage);
            ensure!(m.failure_rate == 0.0, "{pages}/{depth}: failure rate {}", m.failure_rate);
            ensure!(took < Duration::from_secs(60), "{pages}/{depth}: took {took:?}");
        }
    }
    Ok(format!("8 crawls match the oracle, slowest {:.2}s", worst.as_secs_f64()))
}

async fn reproducibility() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let series = DepthSeries::new(SiteSpec::new(100, 3, 21), vec![1, 2, 3, 4], 10, root.path());
    let (report, runs) = tenebra::experiment::run_series(&series).await.map_err(|e| e.to_string())?;
    ensure!(runs.len() == 40, "{} runs", runs.len());
    for level in &report.depth_levels {
        let m = &level.metrics;
        ensure!(level.runs == 10, "depth {}: {} runs", level.depth, level.runs);
        for (name, stat) in [("identified", m.identified), ("downloaded", m.downloaded), ("failed", m.failed)] {
            ensure!(stat.std == 0.0, "depth {}: std of {name} is {}", level.depth, stat.std);
        }
    }
    let table = render_report(&report, ReportFormat::Markdown).map_err(|e| e.to_string())?;
    for depth in 1..=4 {
        ensure!(table.contains(&format!("**DEPTH {depth}** (10 runs)")), "table lacks depth {depth}");
    }
    ensure!(table.matches("| mean |").count() == 4 && table.matches("| std |").count() == 4, "table rows");
    Ok("4 depths x 10 runs, std 0 for identified/downloaded/failed".into())
}

/// Pick `count` pages to break such that every other page stays reachable
/// from the home page without passing through a broken one.
fn removable_pages(site: &SiteGraph, count: usize, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    let n = site.page_count();
    let reach_without = |broken: &BTreeSet<usize>| {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(p) = stack.pop() {
            if broken.contains(&p) {
                continue;
            }
            for &t in site.links(p) {
                if !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        seen.iter().all(|s| *s)
    };
    let mut candidates: Vec<usize> = (1..n).collect();
    candidates.shuffle(rng);
    let mut broken = BTreeSet::new();
    for c in candidates {
        if broken.len() == count {
            break;
        }
        broken.insert(c);
        if !reach_without(&broken) {
            broken.remove(&c);
        }
    }
    broken
}

async fn robustness() -> Check {
    let mut spec = SiteSpec::new(100, 3, 31);
    let site = tenebra::mockmarket::generate_site(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dead = removable_pages(&site, 10, &mut rng);
    ensure!(dead.len() == 10, "only {} removable pages", dead.len());
    let flaky: Vec<usize> = (1..100).filter(|p| !dead.contains(p)).collect::<Vec<_>>().choose_multiple(&mut rng, 10).copied().collect();
    spec.fault_plan = dead
        .iter()
        .map(|&page| FaultRule { page, behavior: FaultBehavior::Always404 })
        .chain(flaky.iter().map(|&page| FaultRule { page, behavior: FaultBehavior::NTimes503(1) }))
        .collect();
    let run = crawl_mock(spec, CaptchaPolicy::Fail, |c| {
        c.max_depth = Some(100);
        c.retries = 2;
    }, |_, _| {})
    .await;
    let summary = run.result.as_ref().map_err(|e| e.to_string())?;
    let m = &summary.run_metrics;
    ensure!(m.identified == 100, "identified {}", m.identified);
    ensure!(m.failure_rate == 0.1, "failure rate {}", m.failure_rate);
    let failed: BTreeSet<usize> = summary
        .records
        .iter()
        .filter(|r| r.outcome == Outcome::Failed)
        .map(|r| common::page_id(r.url.path()).unwrap())
        .collect();
    ensure!(failed == dead, "failed pages {failed:?} vs always404 {dead:?}");
    let manifest = std::fs::read_to_string(run.dir.path().join("out/manifest.jsonl")).map_err(|e| e.to_string())?;
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if v["outcome"] == "failed" {
            ensure!(v["reason"] == "not_found" && v["status"] == 404, "unattributed failure {line}");
        }
    }
    Ok("failure_rate 0.1 = always404 share, 503 pages recovered, reasons recorded".into())
}

async fn cookie_rotation() -> Check {
    let mut spec = SiteSpec::new(26, 3, 12);
    spec.login_required = true;
    spec.cookie_ttl_requests = Some(10);
    let run = crawl_mock(spec, CaptchaPolicy::Fail, |c| c.max_depth = Some(26), |meta, server| {
        meta.credentials = None;
        meta.cookies = (0..3)
            .map(|_| CookieSpec::new("session", server.issue_session(), server.base_url().host()))
            .collect();
    })
    .await;
    let summary = run.result.as_ref().map_err(|e| e.to_string())?;
    ensure!(summary.state.pages_downloaded == 26, "downloaded {}", summary.state.pages_downloaded);
    ensure!(summary.run_metrics.failure_rate == 0.0, "failure rate {}", summary.run_metrics.failure_rate);
    let log = run.server.access_log();
    let sessions: HashSet<_> = log.iter().filter_map(|r| r.cookie.clone()).collect();
    ensure!(sessions.len() >= 2, "{} distinct cookies", sessions.len());
    let bounced = log.iter().filter(|r| r.path.starts_with("/p/") && r.status == 302).count() as u64;
    ensure!(bounced >= 1, "no cookie ever expired");
    ensure!(
        summary.rotations.on_redirect == bounced,
        "{} redirects but {} redirect rotations",
        bounced,
        summary.rotations.on_redirect
    );
    Ok(format!("{} cookies used, {bounced} expiries each detected and rotated", sessions.len()))
}

async fn auto_login() -> Check {
    let mut spec = SiteSpec::new(50, 3, 14);
    spec.login_required = true;
    let run = crawl_mock(spec.clone(), CaptchaPolicy::Fail, |c| c.max_depth = Some(50), |_, _| {}).await;
    let summary = run.result.as_ref().map_err(|e| e.to_string())?;
    ensure!(summary.starting_link.as_ref() == Some(&run.server.page_url(0)), "starting link {:?}", summary.starting_link);
    let expected = oracle_reachable(run.server.site(), None, &run.server.base_url());
    ensure!(urls_with(&summary.records, Outcome::Downloaded) == expected, "login crawl incomplete");
    ensure!(run.server.access_log().iter().any(|r| r.method == "POST" && r.path == "/login"), "no login POST");

    let run = crawl_mock(spec, CaptchaPolicy::Fail, |c| c.max_depth = Some(50), |meta, _| {
        meta.credentials.as_mut().unwrap().password = "wrong".into();
    })
    .await;
    match &run.result {
        Err(e @ CrawlError::NoValidStartingLink(diag)) => {
            ensure!(e.exit_code() == 3, "exit code {}", e.exit_code());
            ensure!(diag.iter().any(|d| d.cause.contains("login-rejected")), "diagnosis {diag:?}");
        }
        other => return Err(format!("wrong credentials gave {:?}", other.as_ref().map(|s| s.state.stop_reason))),
    }
    Ok("login crawl complete; wrong password exits 3 with login-rejected".into())
}

async fn captcha_flow() -> Check {
    let mut spec = SiteSpec::new(200, 3, 15);
    spec.captcha_pages = [100, 150].into();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let script = dir.path().join("answers.txt");
    let lines: String = spec.captcha_pages.iter().map(|id| format!("/p/{id} answer={}\n", id % 97)).collect();
    std::fs::write(&script, lines).map_err(|e| e.to_string())?;
    let policy: CaptchaPolicy = format!("script:{}", script.display()).parse()?;
    let run = crawl_mock(spec.clone(), policy, |c| c.max_depth = Some(200), |_, _| {}).await;
    let summary = run.result.as_ref().map_err(|e| e.to_string())?;
    ensure!(summary.challenges.len() == 2, "{} challenges", summary.challenges.len());
    ensure!(summary.challenges.iter().all(|c| c.state == ChallengeState::Solved), "unsolved challenge");
    let downloaded = urls_with(&summary.records, Outcome::Downloaded);
    for id in [100, 150] {
        ensure!(downloaded.contains(&run.server.page_url(id)), "page {id} missing");
    }
    ensure!(summary.state.pages_failed == 0, "{} failures", summary.state.pages_failed);

    let fut = crawl_mock(spec, CaptchaPolicy::Abandon, |c| {
        c.max_depth = Some(200);
        c.captcha_timeout = Duration::from_secs(1);
    }, |_, _| {});
    let run = tokio::time::timeout(Duration::from_secs(60), fut).await.map_err(|_| "abandon run did not terminate")?;
    let summary = run.result.as_ref().map_err(|e| e.to_string())?;
    let failed: Vec<_> = summary.records.iter().filter(|r| r.outcome == Outcome::Failed).collect();
    ensure!(failed.len() == 2, "{} failed records", failed.len());
    ensure!(failed.iter().all(|r| r.reason.as_deref() == Some("captcha_abandoned")), "failure reasons");
    Ok("scripted answers solve both walls; abandon yields 2 failures and terminates".into())
}

async fn bfs_property() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..24 {
        let pages = rng.random_range(5..300);
        let branching = rng.random_range(1..6);
        let seed = rng.random();
        let workers = if i % 3 == 0 { 4 } else { 1 };
        let run = crawl_mock(SiteSpec::new(pages, branching, seed), CaptchaPolicy::Fail, |c| {
            c.max_depth = Some(pages as u32);
            c.workers = workers;
        }, |_, _| {})
        .await;
        let summary = run.result.as_ref().map_err(|e| e.to_string())?;
        let depths: Vec<u32> = summary.dequeue_trace.iter().map(|e| e.depth).collect();
        ensure!(depths.windows(2).all(|w| w[0] <= w[1]), "site seed {seed} ({pages} pages): {depths:?}");
        ensure!(
            depths.len() == reachable_ids(run.server.site(), None).len(),
            "site seed {seed}: trace covers {} pages",
            depths.len()
        );
    }
    Ok("24 random sites, dequeue depths non-decreasing".into())
}

async fn fisher_yates() -> Check {
    let trials = 24_000u64;
    let cookies: Vec<_> = (0..4).map(|i| CookieSpec::new("s", i.to_string(), "m.onion")).collect();
    let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
    for seed in 0..trials {
        let jar = CookieJar::new(cookies.clone(), seed);
        *counts.entry(jar.rotation_order().to_vec()).or_default() += 1;
    }
    ensure!(counts.len() == 24, "{} distinct permutations", counts.len());
    let p = 1.0 / 24.0;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    let worst = counts.values().map(|&c| (c as f64 - 1000.0).abs()).fold(0.0, f64::max);
    ensure!(worst <= 3.0 * sigma, "deviation {worst} > 3 sigma ({:.2})", 3.0 * sigma);
    Ok(format!("max deviation {worst} of 3 sigma {:.1}", 3.0 * sigma))
}

async fn metrics_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let outcomes = [Outcome::Downloaded, Outcome::Failed, Outcome::Duplicate, Outcome::Skipped];
    for case in 0..50 {
        let universe = rng.random_range(1..60);
        let url = |i: usize| CanonicalUrl::parse(&format!("http://m.onion/p/{i}")).unwrap();
        let mut ids: Vec<usize> = (0..universe).collect();
        ids.shuffle(&mut rng);
        let fetched = rng.random_range(0..=universe);
        let manifest: Vec<PageRecord> = ids[..fetched]
            .iter()
            .map(|&i| PageRecord {
                url: url(i),
                depth: 0,
                final_status: 200,
                outcome: outcomes[rng.random_range(0..4)],
                content_digest: None,
                stored_path: None,
                fetched_at: Utc::now(),
                elapsed_ms: 0,
                reason: None,
            })
            .collect();
        // Frontier leftovers, some overlapping the manifest.
        let enqueued: Vec<CanonicalUrl> = (0..rng.random_range(0..20)).map(|_| url(ids[rng.random_range(0..universe)])).collect();
        let secs = rng.random_range(1..600) as f64;
        let got = compute_run_metrics(&manifest, &enqueued, Duration::from_secs_f64(secs));

        let mut all: Vec<String> = manifest.iter().map(|r| r.url.to_string()).chain(enqueued.iter().map(|u| u.to_string())).collect();
        all.sort();
        all.dedup();
        let (mut down, mut fail) = (0u64, 0u64);
        for r in &manifest {
            match r.outcome {
                Outcome::Downloaded => down += 1,
                Outcome::Failed => fail += 1,
                _ => {}
            }
        }
        let ident = all.len() as u64;
        let want = RunMetrics {
            identified: ident,
            downloaded: down,
            failed: fail,
            relative_coverage: if ident == 0 { 0.0 } else { down as f64 / ident as f64 },
            failure_rate: if ident == 0 { 0.0 } else { fail as f64 / ident as f64 },
            execution_time_s: secs,
            pages_per_minute: down as f64 * 60.0 / secs,
        };
        ensure!(got.identified == want.identified && got.downloaded == want.downloaded && got.failed == want.failed, "case {case}: {got:?} vs {want:?}");
        for (a, b) in [
            (got.relative_coverage, want.relative_coverage),
            (got.failure_rate, want.failure_rate),
            (got.execution_time_s, want.execution_time_s),
            (got.pages_per_minute, want.pages_per_minute),
        ] {
            ensure!((a - b).abs() < 1e-9, "case {case}: {got:?} vs {want:?}");
        }
    }

    let s = Stat::of(&[1.0, 0.8]);
    ensure!((s.mean - 0.9).abs() < 1e-12 && (s.std - 0.1).abs() < 1e-12, "[1.0, 0.8] gave {s:?}");
    let runs = [(10, 10), (10, 8)].map(|(i, d)| LabeledRun {
        depth: 1,
        metrics: RunMetrics::from_counts(i, d, i - d, Duration::from_secs(60)),
    });
    let report = build_report(&runs).map_err(|e| e.to_string())?;
    let m = &report.depth_levels[0].metrics;
    ensure!((m.relative_coverage.mean - 0.9).abs() < 1e-12 && (m.relative_coverage.std - 0.1).abs() < 1e-12, "coverage {:?}", m.relative_coverage);
    ensure!((m.downloaded.mean - 9.0).abs() < 1e-12 && (m.downloaded.std - 1.0).abs() < 1e-12, "downloaded {:?}", m.downloaded);
    ensure!((m.failure_rate.mean - 0.1).abs() < 1e-12 && (m.failure_rate.std - 0.1).abs() < 1e-12, "failure rate {:?}", m.failure_rate);
    Ok("50 random manifests match a recount; [1.0, 0.8] -> 0.9 +/- 0.1".into())
}

async fn stop_criteria() -> Check {
    let stop_reason = |run: &common::CrawlRun| run.summary_json()["state"]["stop_reason"].clone();

    let run = crawl_mock(SiteSpec::new(100, 3, 40), CaptchaPolicy::Fail, |c| c.max_links = Some(5), |_, _| {}).await;
    let summary = run.result.as_ref().map_err(|e| e.to_string())?;
    ensure!(summary.state.pages_downloaded == 5, "max_links 5 downloaded {}", summary.state.pages_downloaded);
    ensure!(stop_reason(&run) == "MaxLinks", "max_links stop reason {}", stop_reason(&run));

    let run = crawl_mock(SiteSpec::new(100, 3, 40), CaptchaPolicy::Fail, |c| c.time_limit = Some(Duration::ZERO), |_, _| {}).await;
    let summary = run.result.as_ref().map_err(|e| e.to_string())?;
    ensure!(summary.state.pages_downloaded == 0, "time_limit 0 downloaded {}", summary.state.pages_downloaded);
    ensure!(stop_reason(&run) == "TimeLimit", "time limit stop reason {}", stop_reason(&run));

    let run = common::crawl_mock_with(SiteSpec::new(100, 3, 40), CaptchaPolicy::Fail, |cfg, _, server| {
        let near = reachable_ids(server.site(), Some(1));
        cfg.target_links = Some(near.iter().map(|&id| server.page_url(id).to_string()).collect());
    })
    .await;
    let summary = run.result.as_ref().map_err(|e| e.to_string())?;
    ensure!(stop_reason(&run) == "TargetsComplete", "targets stop reason {}", stop_reason(&run));
    let targets = reachable_ids(run.server.site(), Some(1)).len() as u64;
    ensure!(summary.state.pages_downloaded == targets, "downloaded {} for {targets} targets", summary.state.pages_downloaded);
    ensure!(summary.state.pages_identified > targets, "frontier was already exhausted");
    Ok("MaxLinks=5, TimeLimit=0, TargetsComplete all recorded in summary.json".into())
}

type Criterion = (&'static str, fn() -> Pin<Box<dyn Future<Output = Check> + Send>>);

macro_rules! criteria {
    ($($name:literal => $f:ident),* $(,)?) => {
        [$(($name, (|| Box::pin($f())) as fn() -> Pin<Box<dyn Future<Output = Check> + Send>>)),*]
    };
}

fn main() {
    let criteria: [Criterion; 10] = criteria![
        "coverage exactness" => coverage,
        "reproducibility" => reproducibility,
        "robustness under faults" => robustness,
        "cookie rotation" => cookie_rotation,
        "auto-login" => auto_login,
        "captcha flow" => captcha_flow,
        "bfs property" => bfs_property,
        "fisher-yates uniformity" => fisher_yates,
        "metrics oracle" => metrics_oracle,
        "stop criteria" => stop_criteria,
    ];
    let rt = tokio::runtime::Runtime::new().expect("runtime");
    let mut failures = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        // Spawned so a panic inside a check is reported as a failure.
        let outcome = rt.block_on(async { tokio::spawn(check()).await });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(Ok(detail)) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Ok(Err(why)) => {
                failures += 1;
                println!("FAIL {name} ({secs:.1}s): {why}");
            }
            Err(panic) => {
                failures += 1;
                println!("FAIL {name} ({secs:.1}s): panicked: {panic}");
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
