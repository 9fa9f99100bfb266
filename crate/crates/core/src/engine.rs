//! The crawl: starting-link selection, session setup, the breadth-first
//! fetch loop, stop criteria and the run summary.
//!
//! One control loop owns the frontier, the cookie jar, the user-agent
//! rotator and the counters. Fetches and captcha waits run as tasks that
//! hand their results back to the loop. With several workers, fetching of
//! depth `d + 1` starts only once nothing of depth `d` is outstanding, so the
//! dequeue order stays breadth-first.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{broadcast, mpsc};
use tokio::task::JoinSet;

use crate::captcha::{self, CaptchaChallenge, CaptchaPolicy, ChallengeRegistry, ChallengeSolution, PendingChallenge};
use crate::config::{ConfigError, CookieSource, CookieSpec, MarketMetadata, ValidatedConfig};
use crate::events::{self, CrawlEvent, EventKind, EventSender};
use crate::extractor::{extract_links, Disposition, FetchMeta, Outcome, PageRecord, PageStore, StorageError};
use crate::frontier::{is_internal, normalize_url, CanonicalUrl, Frontier, FrontierEntry};
use crate::metrics::{compute_run_metrics, RunMetrics};
use crate::session::{self, CookieCheck, CookieJar};
use crate::transport::{
    detect_unexpected_redirect, FetchResult, StatusClass, Transport, TransportError, TransportSettings,
    UserAgentRotator,
};

pub const SUMMARY_FILE: &str = "summary.json";

/// Consecutive failed re-logins after which the crawl stops trying.
const MAX_LOGIN_FAILURES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Kept for completeness: a depth bound shows up as frontier exhaustion
    /// because links past it are never queued.
    MaxDepth,
    MaxLinks,
    TimeLimit,
    TargetsComplete,
    FrontierExhausted,
    OperatorStop,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrawlState {
    pub started_at: DateTime<Utc>,
    pub pages_downloaded: u64,
    pub pages_identified: u64,
    pub pages_failed: u64,
    pub pages_duplicate: u64,
    pub pages_skipped: u64,
    pub current_depth_in_flight: u32,
    pub stop_reason: Option<StopReason>,
}

impl CrawlState {
    fn new() -> Self {
        Self {
            started_at: Utc::now(),
            pages_downloaded: 0,
            pages_identified: 0,
            pages_failed: 0,
            pages_duplicate: 0,
            pages_skipped: 0,
            current_depth_in_flight: 0,
            stop_reason: None,
        }
    }
}

/// The first satisfied stop criterion, checked in the order time limit,
/// link budget, target set, exhausted frontier. `targets_remaining` is the
/// number of target URLs not yet downloaded (`None` without a target set).
pub fn should_stop(
    state: &CrawlState,
    cfg: &ValidatedConfig,
    frontier: &Frontier,
    elapsed: Duration,
    targets_remaining: Option<usize>,
    in_flight: usize,
) -> Option<StopReason> {
    if cfg.time_limit.is_some_and(|limit| elapsed >= limit) {
        return Some(StopReason::TimeLimit);
    }
    if cfg.max_links.is_some_and(|max| state.pages_downloaded >= max) {
        return Some(StopReason::MaxLinks);
    }
    if targets_remaining == Some(0) {
        return Some(StopReason::TargetsComplete);
    }
    if frontier.is_empty() && in_flight == 0 {
        return Some(StopReason::FrontierExhausted);
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkDiagnosis {
    pub link: String,
    pub cause: String,
}

impl fmt::Display for LinkDiagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.link, self.cause)
    }
}

fn list(diagnoses: &[LinkDiagnosis]) -> String {
    diagnoses.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum CrawlError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no valid starting link ({})", list(.0))]
    NoValidStartingLink(Vec<LinkDiagnosis>),
    #[error("storage failure: {0}")]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

impl CrawlError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CrawlError::Config(_) | CrawlError::Transport(_) => 2,
            CrawlError::NoValidStartingLink(_) => 3,
            CrawlError::Storage(_) => 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RotationCounters {
    /// Moves to the next cookie after `rotate_every` successes.
    pub scheduled: u64,
    /// Moves forced by an unexpected redirect.
    pub on_redirect: u64,
    pub logins: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrawlSummary {
    pub state: CrawlState,
    pub run_metrics: RunMetrics,
    pub manifest_path: PathBuf,
    pub starting_link: Option<CanonicalUrl>,
    pub finished_at: DateTime<Utc>,
    pub elapsed_s: f64,
    pub rotations: RotationCounters,
    pub challenges: Vec<CaptchaChallenge>,
    /// Entries in the order they left the frontier.
    #[serde(skip)]
    pub dequeue_trace: Vec<FrontierEntry>,
    #[serde(skip)]
    pub records: Vec<PageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Idle,
    Starting,
    Running,
    Paused,
    Stopping,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Limits {
    pub max_depth: Option<u32>,
    pub max_links: Option<u64>,
    pub time_limit_s: Option<f64>,
    pub targets_total: Option<usize>,
    pub targets_done: usize,
}

/// Snapshot served by `GET /api/status`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusView {
    pub phase: Phase,
    pub pages_identified: u64,
    pub pages_downloaded: u64,
    pub pages_failed: u64,
    pub current_depth: u32,
    pub elapsed_s: f64,
    pub pending_challenges: usize,
    pub stop_reason: Option<StopReason>,
    pub limits: Limits,
}

impl StatusView {
    fn idle(cfg: &ValidatedConfig) -> Self {
        Self {
            phase: Phase::Idle,
            pages_identified: 0,
            pages_downloaded: 0,
            pages_failed: 0,
            current_depth: 0,
            elapsed_s: 0.0,
            pending_challenges: 0,
            stop_reason: None,
            limits: Limits {
                max_depth: cfg.max_depth,
                max_links: cfg.max_links,
                time_limit_s: cfg.time_limit.map(|d| d.as_secs_f64()),
                targets_total: cfg.targets().map(BTreeSet::len),
                targets_done: 0,
            },
        }
    }
}

#[derive(Debug)]
struct SharedStatus {
    view: StatusView,
    clock: Option<Instant>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Pause,
    Resume,
    Stop,
    AddCookie(CookieSpec),
}

/// Handle for observing and steering a crawl from outside the loop.
#[derive(Clone)]
pub struct CrawlControl {
    commands: mpsc::UnboundedSender<Command>,
    status: Arc<Mutex<SharedStatus>>,
    registry: Arc<ChallengeRegistry>,
    events: EventSender,
}

impl CrawlControl {
    pub fn send(&self, command: Command) {
        // The loop holds its own sender, so the channel outlives every handle.
        let _ = self.commands.send(command);
    }

    pub fn status(&self) -> StatusView {
        let shared = self.status.lock().expect("status lock");
        let mut view = shared.view.clone();
        if view.phase != Phase::Finished {
            if let Some(clock) = shared.clock {
                view.elapsed_s = clock.elapsed().as_secs_f64();
            }
        }
        view.pending_challenges = self.registry.pending_count();
        view
    }

    pub fn registry(&self) -> &Arc<ChallengeRegistry> {
        &self.registry
    }

    pub fn subscribe(&self) -> broadcast::Receiver<CrawlEvent> {
        self.events.subscribe()
    }
}

/// A configured crawl, not yet started.
pub struct Crawler {
    cfg: ValidatedConfig,
    meta: MarketMetadata,
    policy: CaptchaPolicy,
    control: CrawlControl,
    commands: mpsc::UnboundedReceiver<Command>,
}

impl Crawler {
    pub fn new(cfg: ValidatedConfig, meta: MarketMetadata, policy: CaptchaPolicy) -> Self {
        let (tx, rx) = mpsc::unbounded_channel();
        let events = events::channel();
        let control = CrawlControl {
            commands: tx,
            status: Arc::new(Mutex::new(SharedStatus {
                view: StatusView::idle(&cfg),
                clock: None,
            })),
            registry: Arc::new(ChallengeRegistry::new(Some(events.clone()))),
            events,
        };
        Self {
            cfg,
            meta,
            policy,
            control,
            commands: rx,
        }
    }

    pub fn control(&self) -> CrawlControl {
        self.control.clone()
    }

    pub async fn run(self) -> Result<CrawlSummary, CrawlError> {
        let run = Run::prepare(self)?;
        run.execute().await
    }
}

/// Crawl `meta`'s market under `cfg` and return the summary (also written to
/// `summary.json` in the output directory).
pub async fn crawl(cfg: ValidatedConfig, meta: MarketMetadata, policy: CaptchaPolicy) -> Result<CrawlSummary, CrawlError> {
    Crawler::new(cfg, meta, policy).run().await
}

#[derive(Debug, Clone)]
struct Job {
    entry: FrontierEntry,
    /// Jar index of the cookie sent, fixed when the job is dispatched.
    cookie: Option<usize>,
    session_attempt: u32,
    after_challenge: bool,
}

enum Done {
    Fetch {
        job: Job,
        result: Result<FetchResult, TransportError>,
    },
    Challenge {
        job: Job,
        outcome: ChallengeOutcome,
    },
}

// One per challenge and short-lived, so the size gap does not matter.
#[allow(clippy::large_enum_variant)]
enum ChallengeOutcome {
    Refetched {
        result: Result<FetchResult, TransportError>,
        cookie: Option<CookieSpec>,
    },
    Abandoned,
}

/// Wait for the operator (or script) and, when a solution arrives, deliver
/// it and fetch the page once more.
async fn resolve_challenge(
    registry: Arc<ChallengeRegistry>,
    transport: Transport,
    challenge: CaptchaChallenge,
    pending: PendingChallenge,
    timeout: Duration,
    cookies: Vec<CookieSpec>,
    user_agent: String,
) -> ChallengeOutcome {
    let Some(solution) = registry.await_solution(pending, timeout).await else {
        return ChallengeOutcome::Abandoned;
    };
    let ChallengeSolution { fields, cookie, .. } = solution;
    if let Some(cookie) = cookie {
        let result = transport
            .fetch_as(&challenge.url, std::slice::from_ref(&cookie), &user_agent)
            .await;
        return ChallengeOutcome::Refetched {
            result,
            cookie: Some(cookie),
        };
    }
    let fields: Vec<(String, String)> = fields.into_iter().collect();
    if let Err(e) = transport
        .post_form(&challenge.form_action, &fields, &cookies, &user_agent)
        .await
    {
        tracing::warn!(challenge = %challenge.id, error = %e, "could not submit captcha solution");
    }
    let result = transport.fetch_as(&challenge.url, &cookies, &user_agent).await;
    ChallengeOutcome::Refetched { result, cookie: None }
}

struct Run {
    cfg: ValidatedConfig,
    meta: MarketMetadata,
    policy: CaptchaPolicy,
    control: CrawlControl,
    commands: mpsc::UnboundedReceiver<Command>,
    events: Option<EventSender>,
    transport: Transport,
    rotator: UserAgentRotator,
    jar: CookieJar,
    frontier: Frontier,
    store: PageStore,
    records: Vec<PageRecord>,
    trace: Vec<FrontierEntry>,
    state: CrawlState,
    clock: Instant,
    scope: Option<CanonicalUrl>,
    rotations: RotationCounters,
    targets_left: Option<BTreeSet<CanonicalUrl>>,
    retries: VecDeque<Job>,
    in_flight_depths: BTreeMap<u32, usize>,
    fetches_in_flight: usize,
    challenges_in_flight: usize,
    last_dispatch: Option<Instant>,
    paused: bool,
    login_failures: u32,
}

impl Run {
    fn prepare(crawler: Crawler) -> Result<Self, CrawlError> {
        let Crawler {
            cfg,
            meta,
            policy,
            control,
            commands,
        } = crawler;
        meta.validate()?;
        if cfg.proxy.is_none() {
            if let Some(onion) = meta.starting_links.iter().find(|l| {
                normalize_url(l, None).map(|u| u.is_onion()).unwrap_or(false)
            }) {
                return Err(ConfigError::field(
                    "proxy",
                    format!("{onion} is an onion address; configure a socks5h or http proxy"),
                )
                .into());
            }
        }
        let transport = Transport::new(TransportSettings {
            proxy: cfg.proxy.clone(),
            request_timeout: cfg.request_timeout,
            retries: cfg.retries,
            retry_backoff: cfg.retry_backoff,
        })?;
        let rotator = UserAgentRotator::new(cfg.user_agents.clone(), cfg.rng_seed)?;
        let jar = CookieJar::new(meta.cookies.clone(), cfg.rng_seed.wrapping_add(1));
        let store = PageStore::create(&cfg.output_dir)?;
        Ok(Self {
            frontier: Frontier::new(cfg.max_depth),
            targets_left: cfg.targets().cloned(),
            events: Some(control.events.clone()),
            cfg,
            meta,
            policy,
            control,
            commands,
            transport,
            rotator,
            jar,
            store,
            records: Vec::new(),
            trace: Vec::new(),
            state: CrawlState::new(),
            clock: Instant::now(),
            scope: None,
            rotations: RotationCounters::default(),
            retries: VecDeque::new(),
            in_flight_depths: BTreeMap::new(),
            fetches_in_flight: 0,
            challenges_in_flight: 0,
            last_dispatch: None,
            paused: false,
            login_failures: 0,
        })
    }

    async fn execute(mut self) -> Result<CrawlSummary, CrawlError> {
        self.clock = Instant::now();
        self.state.started_at = Utc::now();
        self.control.status.lock().expect("status lock").clock = Some(self.clock);
        self.set_phase(Phase::Starting);

        if self.cfg.time_limit.is_some_and(|limit| limit.is_zero()) {
            self.finish(StopReason::TimeLimit);
            return self.summarize();
        }

        let (start, probe, cookie) = self.select_starting_link().await?;
        tracing::info!(start = %start, "starting link selected");
        self.scope = Some(start.clone());
        self.validate_other_cookies(&start, cookie).await;

        self.set_phase(Phase::Running);
        self.frontier.enqueue(start.clone(), 0);
        let root = self.frontier.dequeue().expect("root was just queued");
        self.trace.push(root.clone());
        let mut tasks: JoinSet<Done> = JoinSet::new();
        let job = Job {
            entry: root,
            cookie,
            session_attempt: 0,
            after_challenge: false,
        };
        self.handle_fetch(&mut tasks, job, Ok(probe)).await?;
        self.crawl_loop(&mut tasks).await?;
        self.summarize()
    }

    fn elapsed(&self) -> Duration {
        self.clock.elapsed()
    }

    fn in_flight(&self) -> usize {
        self.fetches_in_flight + self.challenges_in_flight
    }

    fn stop_check(&self) -> Option<StopReason> {
        should_stop(
            &self.state,
            &self.cfg,
            &self.frontier,
            self.elapsed(),
            self.targets_left.as_ref().map(BTreeSet::len),
            self.in_flight() + self.retries.len(),
        )
    }

    async fn crawl_loop(&mut self, tasks: &mut JoinSet<Done>) -> Result<(), CrawlError> {
        let deadline = self.cfg.time_limit.map(|limit| tokio::time::Instant::from_std(self.clock + limit));
        loop {
            while let Ok(command) = self.commands.try_recv() {
                self.apply(command).await;
            }
            if self.state.stop_reason.is_none() {
                if let Some(reason) = self.stop_check() {
                    self.finish(reason);
                }
            }
            if self.state.stop_reason.is_some() {
                self.flush_retries()?;
                if tasks.is_empty() {
                    return Ok(());
                }
            }

            let mut wake = deadline.filter(|_| self.state.stop_reason.is_none());
            if self.state.stop_reason.is_none() && !self.paused && self.can_dispatch() {
                let ready_at = self
                    .last_dispatch
                    .map(|t| t + self.cfg.politeness_delay)
                    .unwrap_or_else(Instant::now);
                if Instant::now() >= ready_at {
                    self.dispatch(tasks).await;
                    continue;
                }
                let ready_at = tokio::time::Instant::from_std(ready_at);
                wake = Some(wake.map_or(ready_at, |w| w.min(ready_at)));
            }
            let sleep = async {
                match wake {
                    Some(at) => tokio::time::sleep_until(at).await,
                    None => std::future::pending().await,
                }
            };
            tokio::select! {
                Some(joined) = tasks.join_next(), if !tasks.is_empty() => {
                    let done = match joined {
                        Ok(done) => done,
                        Err(e) if e.is_panic() => std::panic::resume_unwind(e.into_panic()),
                        Err(e) => panic!("crawl task cancelled: {e}"),
                    };
                    self.complete(tasks, done).await?;
                }
                Some(command) = self.commands.recv() => self.apply(command).await,
                _ = sleep => {}
            }
        }
    }

    fn next_candidate_depth(&self) -> Option<u32> {
        self.retries
            .front()
            .map(|j| j.entry.depth)
            .or_else(|| self.frontier.peek().map(|e| e.depth))
    }

    fn can_dispatch(&self) -> bool {
        if self.fetches_in_flight >= self.cfg.workers {
            return false;
        }
        let Some(depth) = self.next_candidate_depth() else {
            return false;
        };
        if self.in_flight_depths.keys().next().is_some_and(|&lowest| depth > lowest) {
            return false;
        }
        if let Some(max) = self.cfg.max_links {
            let fresh = self.retries.is_empty();
            if fresh && self.state.pages_downloaded + self.in_flight() as u64 >= max {
                return false;
            }
        }
        true
    }

    async fn dispatch(&mut self, tasks: &mut JoinSet<Done>) {
        let mut job = match self.retries.pop_front() {
            Some(job) => job,
            None => {
                let entry = self.frontier.dequeue().expect("can_dispatch saw an entry");
                self.trace.push(entry.clone());
                Job {
                    entry,
                    cookie: None,
                    session_attempt: 0,
                    after_challenge: false,
                }
            }
        };
        job.cookie = self.current_cookie().await;
        let cookies = self.snapshot(job.cookie);
        let ua = self.rotator.next_user_agent();
        self.last_dispatch = Some(Instant::now());
        self.state.current_depth_in_flight = job.entry.depth;
        *self.in_flight_depths.entry(job.entry.depth).or_default() += 1;
        self.fetches_in_flight += 1;
        let transport = self.transport.clone();
        tasks.spawn(async move {
            let result = transport.fetch_as(&job.entry.url, &cookies, &ua).await;
            Done::Fetch { job, result }
        });
        self.publish();
    }

    fn release(&mut self, depth: u32) {
        if let Some(n) = self.in_flight_depths.get_mut(&depth) {
            *n -= 1;
            if *n == 0 {
                self.in_flight_depths.remove(&depth);
            }
        }
    }

    async fn complete(&mut self, tasks: &mut JoinSet<Done>, done: Done) -> Result<(), CrawlError> {
        match done {
            Done::Fetch { job, result } => {
                self.fetches_in_flight -= 1;
                self.release(job.entry.depth);
                self.handle_fetch(tasks, job, result).await
            }
            Done::Challenge { mut job, outcome } => {
                self.challenges_in_flight -= 1;
                self.release(job.entry.depth);
                match outcome {
                    ChallengeOutcome::Abandoned => {
                        self.record(&job.entry, 200, 0, Disposition::Failed("captcha_abandoned".into()), &[])?;
                        Ok(())
                    }
                    ChallengeOutcome::Refetched { result, cookie } => {
                        if let Some(cookie) = cookie {
                            let idx = self.jar.insert(cookie);
                            self.jar.promote(idx);
                            job.cookie = Some(idx);
                        }
                        job.after_challenge = true;
                        self.handle_fetch(tasks, job, result).await
                    }
                }
            }
        }
    }

    async fn handle_fetch(
        &mut self,
        tasks: &mut JoinSet<Done>,
        job: Job,
        result: Result<FetchResult, TransportError>,
    ) -> Result<(), CrawlError> {
        let res = match result {
            Ok(res) => res,
            Err(e) => {
                self.record(&job.entry, 0, 0, Disposition::Failed(e.to_string()), &[])?;
                return Ok(());
            }
        };
        let elapsed_ms = res.elapsed.as_millis() as u64;
        if res.left_scope {
            self.record(&job.entry, res.final_status, elapsed_ms, Disposition::Skipped("offsite_redirect".into()), &[])?;
            return Ok(());
        }

        let login_path = self.meta.login_path().map(str::to_string);
        if detect_unexpected_redirect(&job.entry.url, &res.redirect_chain, login_path.as_deref(), &self.meta.captcha_hints) {
            let recoverable = job.cookie.is_some() || self.meta.credentials.is_some();
            if recoverable && self.state.stop_reason.is_none() && job.session_attempt <= self.jar.len() as u32 {
                // Only the first job to report a cookie's rejection moves the
                // rotation on.
                if job.cookie.is_none_or(|i| !self.jar.is_condemned(i)) {
                    if let Some(i) = job.cookie {
                        tracing::info!(cookie = i, url = %job.entry.url, "cookie rejected, rotating");
                        self.jar.condemn(i);
                    }
                    self.rotations.on_redirect += 1;
                    self.advance_cookie().await;
                }
                self.retries.push_back(Job {
                    session_attempt: job.session_attempt + 1,
                    cookie: None,
                    ..job
                });
                return Ok(());
            }
            self.record(&job.entry, res.final_status, elapsed_ms, Disposition::Failed("unexpected_redirect".into()), &[])?;
            return Ok(());
        }

        match res.status_class {
            StatusClass::Ok => {}
            StatusClass::NotFound => {
                self.record(&job.entry, res.final_status, elapsed_ms, Disposition::Failed("not_found".into()), &[])?;
                return Ok(());
            }
            StatusClass::Unavailable => {
                self.record(&job.entry, res.final_status, elapsed_ms, Disposition::Failed("unavailable".into()), &[])?;
                return Ok(());
            }
            StatusClass::OtherError => {
                let reason = res
                    .error
                    .clone()
                    .unwrap_or_else(|| format!("status_{}", res.final_status));
                self.record(&job.entry, res.final_status, elapsed_ms, Disposition::Failed(reason), &[])?;
                return Ok(());
            }
        }

        if let Some(challenge) = captcha::detect_captcha(&res.body, &job.entry.url, &self.meta.captcha_hints) {
            if job.after_challenge || self.state.stop_reason.is_some() {
                let reason = if job.after_challenge { "captcha_unsolved" } else { "captcha_abandoned" };
                self.record(&job.entry, res.final_status, elapsed_ms, Disposition::Failed(reason.into()), &[])?;
                return Ok(());
            }
            self.open_challenge(tasks, job, challenge);
            return Ok(());
        }

        if job.cookie.is_some() && self.jar.record_success(self.cfg.rotate_every) {
            self.rotations.scheduled += 1;
        }
        let links = if res.is_html() {
            extract_links(&res.body, res.final_url())
        } else {
            Vec::new()
        };
        self.record(&job.entry, res.final_status, elapsed_ms, Disposition::Fetched, &res.body)
            .map(|record| {
                if record.outcome == Outcome::Downloaded {
                    let scope = self.scope.clone().expect("scope set before crawling");
                    for link in links.into_iter().filter(|l| is_internal(l, &scope)) {
                        self.frontier.enqueue(link, job.entry.depth + 1);
                    }
                }
            })?;
        Ok(())
    }

    fn open_challenge(&mut self, tasks: &mut JoinSet<Done>, job: Job, challenge: CaptchaChallenge) {
        let registry = self.control.registry.clone();
        let (challenge, pending) = registry.open(challenge);
        tracing::info!(challenge = %challenge.id, url = %challenge.url, "captcha challenge opened");
        self.apply_policy(&challenge);
        let cookies = self.snapshot(job.cookie);
        let ua = self.rotator.next_user_agent();
        let transport = self.transport.clone();
        let timeout = self.cfg.captcha_timeout;
        *self.in_flight_depths.entry(job.entry.depth).or_default() += 1;
        self.challenges_in_flight += 1;
        tasks.spawn(async move {
            let outcome = resolve_challenge(registry, transport, challenge, pending, timeout, cookies, ua).await;
            Done::Challenge { job, outcome }
        });
    }

    fn apply_policy(&self, challenge: &CaptchaChallenge) {
        let registry = &self.control.registry;
        match &self.policy {
            CaptchaPolicy::Interactive => captcha::spawn_terminal_prompt(registry.clone(), challenge.clone()),
            CaptchaPolicy::Abandon => {}
            CaptchaPolicy::Fail => {
                registry.abandon(&challenge.id);
            }
            CaptchaPolicy::Script(script) => match script.solution_for(challenge) {
                Some(solution) => {
                    if let Err(e) = registry.submit(solution) {
                        tracing::warn!(challenge = %challenge.id, error = %e, "scripted solution refused");
                    }
                }
                None => tracing::warn!(url = %challenge.url, "no scripted answer for this challenge"),
            },
        }
    }

    /// Write the manifest record for a dequeued URL and update the counters.
    fn record(
        &mut self,
        entry: &FrontierEntry,
        final_status: u16,
        elapsed_ms: u64,
        disposition: Disposition,
        body: &[u8],
    ) -> Result<PageRecord, CrawlError> {
        let meta = FetchMeta {
            url: entry.url.clone(),
            depth: entry.depth,
            final_status,
            fetched_at: Utc::now(),
            elapsed_ms,
            disposition,
        };
        let record = self.store.store_page(body, meta)?;
        match record.outcome {
            Outcome::Downloaded => {
                self.state.pages_downloaded += 1;
                if let Some(targets) = &mut self.targets_left {
                    targets.remove(&record.url);
                }
            }
            Outcome::Failed => self.state.pages_failed += 1,
            Outcome::Duplicate => self.state.pages_duplicate += 1,
            Outcome::Skipped => self.state.pages_skipped += 1,
        }
        events::emit(&self.events, CrawlEvent::new(EventKind::Page, &record));
        self.records.push(record.clone());
        self.publish();
        Ok(record)
    }

    /// Retries queued for session recovery never got their record; give
    /// them one when the crawl is winding down.
    fn flush_retries(&mut self) -> Result<(), CrawlError> {
        while let Some(job) = self.retries.pop_front() {
            self.record(&job.entry, 0, 0, Disposition::Failed("unexpected_redirect".into()), &[])?;
        }
        Ok(())
    }

    async fn apply(&mut self, command: Command) {
        match command {
            Command::Pause if self.state.stop_reason.is_none() => {
                self.paused = true;
                self.set_phase(Phase::Paused);
            }
            Command::Resume if self.state.stop_reason.is_none() => {
                self.paused = false;
                self.set_phase(Phase::Running);
            }
            Command::Stop => {
                if self.state.stop_reason.is_none() {
                    self.finish(StopReason::OperatorStop);
                }
            }
            Command::AddCookie(cookie) => {
                let idx = self.jar.insert(cookie);
                if self.jar.next_valid().is_none_or(|cur| self.jar.is_condemned(cur)) {
                    self.jar.promote(idx);
                }
                tracing::info!(cookie = idx, "cookie added by operator");
            }
            Command::Pause | Command::Resume => {}
        }
    }

    fn finish(&mut self, reason: StopReason) {
        if self.state.stop_reason.is_some() {
            return;
        }
        tracing::info!(?reason, "stopping");
        self.state.stop_reason = Some(reason);
        for challenge in self.control.registry.pending() {
            self.control.registry.abandon(&challenge.id);
        }
        self.set_phase(Phase::Stopping);
    }

    fn snapshot(&self, idx: Option<usize>) -> Vec<CookieSpec> {
        idx.map(|i| vec![self.jar.cookies()[i].clone()]).unwrap_or_default()
    }

    /// Index of the cookie the next request should carry, rotating or
    /// logging in again when the order is used up.
    async fn current_cookie(&mut self) -> Option<usize> {
        if self.jar.is_empty() && self.meta.credentials.is_none() {
            return None;
        }
        self.advance_cookie().await;
        self.jar.next_valid()
    }

    async fn advance_cookie(&mut self) {
        if self.jar.next_valid().is_some() {
            return;
        }
        self.jar.shuffle_rotation();
        if self.meta.credentials.is_some() && self.login_failures < MAX_LOGIN_FAILURES {
            let _ = self.try_login().await;
        }
        let _ = self.jar.next_valid();
    }

    async fn try_login(&mut self) -> Result<usize, session::SessionError> {
        let base = self.scope.clone().expect("login needs a base url");
        let ua = self.rotator.next_user_agent();
        match session::login(&self.meta, &base, &self.transport, &ua).await {
            Ok(cookie) => {
                let idx = self.jar.insert(cookie);
                self.jar.promote(idx);
                self.rotations.logins += 1;
                self.login_failures = 0;
                Ok(idx)
            }
            Err(e) => {
                self.login_failures += 1;
                tracing::warn!(error = %e, "login failed");
                Err(e)
            }
        }
    }

    /// Probe the starting links in order; the first one that answers 200
    /// without sending us elsewhere wins.
    async fn select_starting_link(&mut self) -> Result<(CanonicalUrl, FetchResult, Option<usize>), CrawlError> {
        let mut diagnoses = Vec::new();
        for raw in self.meta.starting_links.clone() {
            let url = match normalize_url(&raw, None) {
                Ok(url) => url,
                Err(e) => {
                    diagnoses.push(LinkDiagnosis { link: raw, cause: e.to_string() });
                    continue;
                }
            };
            match self.probe_start(&url).await {
                Ok((result, cookie)) => return Ok((url, result, cookie)),
                Err(cause) => {
                    tracing::warn!(link = %url, %cause, "starting link rejected");
                    diagnoses.push(LinkDiagnosis { link: raw, cause });
                }
            }
        }
        Err(CrawlError::NoValidStartingLink(diagnoses))
    }

    async fn probe_start(&mut self, url: &CanonicalUrl) -> Result<(FetchResult, Option<usize>), String> {
        self.scope = Some(url.clone());
        let login_path = self.meta.login_path().map(str::to_string);
        let mut logged_in = false;
        let mut challenged = false;
        let mut carried: Option<(FetchResult, Option<usize>)> = None;
        loop {
            let (res, idx) = match carried.take() {
                Some(pair) => pair,
                None => {
                    let idx = self.jar.next_valid();
                    let ua = self.rotator.next_user_agent();
                    let res = self
                        .transport
                        .fetch_as(url, &self.snapshot(idx), &ua)
                        .await
                        .map_err(|e| e.to_string())?;
                    (res, idx)
                }
            };
            if res.left_scope {
                return Err(format!("redirected off-site to {}", res.final_url()));
            }
            if detect_unexpected_redirect(url, &res.redirect_chain, login_path.as_deref(), &self.meta.captcha_hints) {
                if let Some(i) = idx {
                    self.jar.condemn(i);
                    continue;
                }
                if self.meta.credentials.is_some() && !logged_in {
                    logged_in = true;
                    self.jar.shuffle_rotation();
                    self.try_login().await.map_err(|e| e.to_string())?;
                    continue;
                }
                return Err(format!("redirected to {}", res.final_url()));
            }
            match res.status_class {
                StatusClass::Ok => {}
                _ => {
                    return Err(match &res.error {
                        Some(e) => e.clone(),
                        None => format!("status {}", res.final_status),
                    })
                }
            }
            let Some(challenge) = captcha::detect_captcha(&res.body, url, &self.meta.captcha_hints) else {
                return Ok((res, idx));
            };
            if challenged {
                return Err("captcha wall still present after the solution".into());
            }
            challenged = true;
            let registry = self.control.registry.clone();
            let (challenge, pending) = registry.open(challenge);
            self.apply_policy(&challenge);
            let ua = self.rotator.next_user_agent();
            let outcome = resolve_challenge(
                registry,
                self.transport.clone(),
                challenge,
                pending,
                self.cfg.captcha_timeout,
                self.snapshot(idx),
                ua,
            )
            .await;
            match outcome {
                ChallengeOutcome::Abandoned => return Err("captcha challenge abandoned".into()),
                ChallengeOutcome::Refetched { result, cookie } => {
                    let idx = match cookie {
                        Some(cookie) => {
                            let i = self.jar.insert(cookie);
                            self.jar.promote(i);
                            Some(i)
                        }
                        None => idx,
                    };
                    carried = Some((result.map_err(|e| e.to_string())?, idx));
                }
            }
        }
    }

    /// Check the remaining manually supplied cookies against the starting
    /// link. Login cookies were verified when minted.
    async fn validate_other_cookies(&mut self, start: &CanonicalUrl, used: Option<usize>) {
        let login_path = self.meta.login_path().map(str::to_string);
        for idx in 0..self.jar.len() {
            if Some(idx) == used || self.jar.is_condemned(idx) {
                continue;
            }
            let cookie = self.jar.cookies()[idx].clone();
            if cookie.source == CookieSource::Login {
                continue;
            }
            let ua = self.rotator.next_user_agent();
            let check = session::validate_cookie(
                &cookie,
                start,
                login_path.as_deref(),
                &self.meta.captcha_hints,
                &self.transport,
                &ua,
            )
            .await;
            if check == CookieCheck::Rejected {
                tracing::info!(cookie = idx, "cookie failed validation");
                self.jar.condemn(idx);
            }
        }
    }

    fn set_phase(&mut self, phase: Phase) {
        {
            let mut shared = self.control.status.lock().expect("status lock");
            shared.view.phase = phase;
        }
        self.publish();
        events::emit(
            &self.events,
            CrawlEvent::new(
                EventKind::StateChange,
                serde_json::json!({ "phase": phase, "stop_reason": self.state.stop_reason }),
            ),
        );
    }

    fn publish(&mut self) {
        self.state.pages_identified = self.frontier.identified() as u64;
        let mut shared = self.control.status.lock().expect("status lock");
        let view = &mut shared.view;
        view.pages_identified = self.state.pages_identified;
        view.pages_downloaded = self.state.pages_downloaded;
        view.pages_failed = self.state.pages_failed;
        view.current_depth = self.state.current_depth_in_flight;
        view.stop_reason = self.state.stop_reason;
        if let (Some(total), Some(left)) = (view.limits.targets_total, &self.targets_left) {
            view.limits.targets_done = total - left.len();
        }
    }

    fn summarize(mut self) -> Result<CrawlSummary, CrawlError> {
        let elapsed = self.elapsed();
        self.publish();
        let summary = CrawlSummary {
            run_metrics: compute_run_metrics(&self.records, self.frontier.seen(), elapsed),
            state: self.state.clone(),
            manifest_path: self.store.manifest_path(),
            starting_link: self.scope.clone(),
            finished_at: Utc::now(),
            elapsed_s: elapsed.as_secs_f64(),
            rotations: self.rotations.clone(),
            challenges: self.control.registry.all(),
            dequeue_trace: std::mem::take(&mut self.trace),
            records: std::mem::take(&mut self.records),
        };
        let path = self.store.root().join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&path, text).map_err(|source| StorageError::Io { path, source })?;
        {
            let mut shared = self.control.status.lock().expect("status lock");
            shared.view.elapsed_s = summary.elapsed_s;
        }
        self.set_phase(Phase::Finished);
        Ok(summary)
    }
}
