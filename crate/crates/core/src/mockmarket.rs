//! A deterministic local marketplace used as the crawler's test oracle.
//!
//! Pages live at `/p/<id>`, page 0 being the home page. The site can sit
//! behind a login wall, put captcha walls in front of chosen pages, and
//! inject faults (404s, transient 503s, login redirects, mirrored content).
//! Every request is appended to an access log that tests inspect.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::task::JoinHandle;

use crate::frontier::CanonicalUrl;

/// Present on the home page of an authenticated session.
pub const HOME_MARKER: &str = "MOCKMARKET-HOME";
pub const SESSION_COOKIE: &str = "session";

#[derive(Debug, Error)]
pub enum MockError {
    #[error("invalid site spec: {0}")]
    Spec(String),
    #[error("cannot bind mock market: {0}")]
    Bind(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultBehavior {
    #[serde(rename = "always404")]
    Always404,
    /// Answer 503 to the first `n` requests, then serve normally.
    #[serde(rename = "n_times_503")]
    NTimes503(u32),
    #[serde(rename = "redirect_to_login")]
    RedirectToLogin,
    /// Serve the body of another page.
    #[serde(rename = "mirror_of")]
    MirrorOf(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRule {
    pub page: usize,
    pub behavior: FaultBehavior,
}

fn default_user() -> String {
    "user".into()
}

fn default_pass() -> String {
    "pass".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub page_count: usize,
    pub branching: usize,
    pub seed: u64,
    #[serde(default)]
    pub login_required: bool,
    #[serde(default)]
    pub captcha_pages: BTreeSet<usize>,
    #[serde(default)]
    pub fault_plan: Vec<FaultRule>,
    /// A session cookie stops working after this many page requests.
    #[serde(default)]
    pub cookie_ttl_requests: Option<u32>,
    #[serde(default = "default_user")]
    pub username: String,
    #[serde(default = "default_pass")]
    pub password: String,
}

impl SiteSpec {
    pub fn new(page_count: usize, branching: usize, seed: u64) -> Self {
        Self {
            page_count,
            branching,
            seed,
            login_required: false,
            captcha_pages: BTreeSet::new(),
            fault_plan: Vec::new(),
            cookie_ttl_requests: None,
            username: default_user(),
            password: default_pass(),
        }
    }

    pub fn validate(&self) -> Result<(), MockError> {
        if self.page_count == 0 {
            return Err(MockError::Spec("page_count must be ≥ 1".into()));
        }
        if self.page_count > 1 && self.branching == 0 {
            return Err(MockError::Spec("branching must be ≥ 1 for multi-page sites".into()));
        }
        let mut pages = HashSet::new();
        for rule in &self.fault_plan {
            if rule.page >= self.page_count {
                return Err(MockError::Spec(format!("fault rule for missing page {}", rule.page)));
            }
            if !pages.insert(rule.page) {
                return Err(MockError::Spec(format!("more than one fault rule for page {}", rule.page)));
            }
            if let FaultBehavior::MirrorOf(t) = rule.behavior {
                if t >= self.page_count {
                    return Err(MockError::Spec(format!("page {} mirrors missing page {t}", rule.page)));
                }
            }
        }
        if let Some(p) = self.captcha_pages.iter().find(|p| **p >= self.page_count) {
            return Err(MockError::Spec(format!("captcha on missing page {p}")));
        }
        Ok(())
    }

    pub fn fault_for(&self, page: usize) -> Option<FaultBehavior> {
        self.fault_plan.iter().find(|r| r.page == page).map(|r| r.behavior)
    }
}

/// The fixture answer to the captcha on page `id`.
pub fn captcha_answer(id: usize) -> usize {
    id % 97
}

/// Out-links of every page, page 0 being the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteGraph {
    seed: u64,
    links: Vec<Vec<usize>>,
}

const WORDS: [&str; 24] = [
    "amber", "basalt", "cedar", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "juniper", "kestrel",
    "lantern", "meadow", "nickel", "obsidian", "pepper", "quartz", "raven", "saffron", "timber", "umber",
    "velvet", "willow", "zephyr",
];

/// Build the page graph for `spec`.
///
/// Every page but the root first gets a parent chosen among earlier pages
/// that still have a free link slot, which keeps the graph connected from
/// page 0 with out-degree at most `branching`. Remaining slots are filled
/// with random distinct targets.
pub fn generate_site(spec: &SiteSpec) -> SiteGraph {
    let n = spec.page_count;
    let slots = spec.branching.min(n.saturating_sub(1));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); n];
    for page in 1..n {
        let open: Vec<usize> = (0..page).filter(|&p| links[p].len() < slots).collect();
        let parent = open[rng.random_range(0..open.len())];
        links[parent].push(page);
    }
    for (page, out) in links.iter_mut().enumerate() {
        while out.len() < slots {
            let target = rng.random_range(0..n);
            if target != page && !out.contains(&target) {
                out.push(target);
            }
        }
        out.shuffle(&mut rng);
    }
    SiteGraph { seed: spec.seed, links }
}

impl SiteGraph {
    pub fn page_count(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self, page: usize) -> &[usize] {
        &self.links[page]
    }

    /// Hand-built graph, for tests.
    pub fn from_links(links: Vec<Vec<usize>>) -> Self {
        Self { seed: 0, links }
    }

    /// HTML of page `id`. Hrefs are written in several equivalent spellings
    /// so that the crawler's canonicalization is exercised; one off-site link
    /// and one `mailto:` link are mixed in.
    pub fn body(&self, id: usize) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let blurb: Vec<&str> = (0..12).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
        let mut html = format!(
            "<!DOCTYPE html>\n<html><head><title>Listing {id}</title></head><body>\n<h1>Listing {id}</h1>\n"
        );
        if id == 0 {
            html.push_str(&format!("<p class=\"banner\">{HOME_MARKER}</p>\n"));
        }
        html.push_str(&format!("<p>Lot {id}: {}</p>\n<ul>\n", blurb.join(" ")));
        for (k, target) in self.links[id].iter().enumerate() {
            let href = match (id + k) % 4 {
                0 => format!("/p/{target}"),
                1 => format!("/p/{target}/"),
                2 => format!("/p/{target}#reviews"),
                _ => format!("{target}"),
            };
            html.push_str(&format!("<li><a href=\"{href}\">lot {target}</a></li>\n"));
        }
        html.push_str("</ul>\n");
        if id.is_multiple_of(5) {
            html.push_str("<p><a href=\"http://forum.elsewhere.example/thread/1\">forum</a> ");
            html.push_str("<a href=\"mailto:support@market.example\">support</a></p>\n");
        }
        html.push_str("</body></html>\n");
        html
    }
}

/// Page ids within `depth` hops of the root (`None` = unbounded), by a
/// plain reference BFS.
pub fn reachable_ids(site: &SiteGraph, depth: Option<u32>) -> BTreeSet<usize> {
    let mut dist: HashMap<usize, u32> = HashMap::from([(0, 0)]);
    let mut queue = VecDeque::from([0usize]);
    while let Some(page) = queue.pop_front() {
        let d = dist[&page];
        if depth.is_some_and(|max| d >= max) {
            continue;
        }
        for &next in site.links(page) {
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(next) {
                e.insert(d + 1);
                queue.push_back(next);
            }
        }
    }
    dist.into_keys().collect()
}

/// URL of page `id` on the market rooted at `base`.
pub fn page_url(base: &CanonicalUrl, id: usize) -> CanonicalUrl {
    base.join(&format!("/p/{id}")).expect("page paths are valid")
}

/// Canonical URLs of all pages within `depth` hops of the root.
pub fn oracle_reachable(site: &SiteGraph, depth: Option<u32>, base: &CanonicalUrl) -> BTreeSet<CanonicalUrl> {
    reachable_ids(site, depth).into_iter().map(|id| page_url(base, id)).collect()
}

/// One request as the server saw it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AccessRecord {
    pub method: String,
    pub path: String,
    pub host: Option<String>,
    /// The request line carried an absolute URL, i.e. came through an
    /// http proxy.
    pub absolute_form: bool,
    pub user_agent: Option<String>,
    pub cookie: Option<String>,
    pub accept: Option<String>,
    pub body: Option<String>,
    pub status: u16,
}

#[derive(Debug, Default)]
struct Session {
    uses: u32,
}

#[derive(Debug)]
struct MarketState {
    spec: SiteSpec,
    site: SiteGraph,
    served_503: Mutex<HashMap<usize, u32>>,
    sessions: Mutex<HashMap<String, Session>>,
    solved: Mutex<HashSet<usize>>,
    log: Mutex<Vec<AccessRecord>>,
    next_session: AtomicU64,
}

impl MarketState {
    fn issue_session(&self) -> String {
        let token = format!("s{:06}", self.next_session.fetch_add(1, Ordering::SeqCst) + 1);
        self.sessions.lock().expect("sessions").insert(token.clone(), Session::default());
        token
    }

    /// Consume one use of the session named in `cookie_header`. `false` if
    /// absent, unknown or expired.
    fn authorize(&self, cookie_header: Option<&str>) -> bool {
        let Some(token) = cookie_header.and_then(|h| cookie_value(h, SESSION_COOKIE)) else {
            return false;
        };
        let mut sessions = self.sessions.lock().expect("sessions");
        let Some(session) = sessions.get_mut(token) else {
            return false;
        };
        if self.spec.cookie_ttl_requests.is_some_and(|ttl| session.uses >= ttl) {
            return false;
        }
        session.uses += 1;
        true
    }
}

fn cookie_value<'a>(header: &'a str, name: &str) -> Option<&'a str> {
    header
        .split(';')
        .filter_map(|pair| pair.trim().split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v)
}

fn html(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "text/html; charset=utf-8")], body).into_response()
}

fn redirect_to_login() -> Response {
    (StatusCode::FOUND, [(header::LOCATION, "/login")], "").into_response()
}

fn login_form(note: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html><head><title>Sign in</title></head><body>\n<h1>Sign in</h1>\n<p>{note}</p>\n\
         <form method=\"post\" action=\"/login\">\n<input type=\"text\" name=\"username\">\n\
         <input type=\"password\" name=\"password\">\n<button type=\"submit\">Enter</button>\n</form>\n</body></html>\n"
    )
}

fn captcha_wall(id: usize) -> String {
    format!(
        "<!DOCTYPE html>\n<html><head><title>Verification</title></head><body>\n<h1>Captcha</h1>\n\
         <p>Solve the puzzle to continue to lot {id}.</p>\n<form method=\"post\" action=\"/captcha/{id}\">\n\
         <img src=\"/captcha.png\" alt=\"puzzle\">\n<input type=\"text\" name=\"answer\">\n\
         <button type=\"submit\">Verify</button>\n</form>\n</body></html>\n"
    )
}

const PNG_1X1: &[u8] = &[
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52, 0x00, 0x00, 0x00,
    0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00, 0x00, 0x1f, 0x15, 0xc4, 0x89, 0x00, 0x00, 0x00, 0x0d, 0x49,
    0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0x00, 0x01, 0x00, 0x00, 0x05, 0x00, 0x01, 0x0d, 0x0a, 0x2d, 0xb4, 0x00, 0x00,
    0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
];

fn form_field(body: &[u8], name: &str) -> Option<String> {
    url::form_urlencoded::parse(body)
        .find(|(k, _)| k == name)
        .map(|(_, v)| v.into_owned())
}

fn respond(state: &MarketState, method: &Method, path: &str, headers: &HeaderMap, body: &[u8]) -> Response {
    let cookie = headers.get(header::COOKIE).and_then(|v| v.to_str().ok());
    let segments: Vec<&str> = path.trim_start_matches('/').split('/').collect();
    match (method, segments.as_slice()) {
        (&Method::GET, ["login"]) => html(StatusCode::OK, login_form("Members only.")),
        (&Method::POST, ["login"]) => {
            let user = form_field(body, "username");
            let pass = form_field(body, "password");
            if user.as_deref() == Some(state.spec.username.as_str()) && pass.as_deref() == Some(state.spec.password.as_str()) {
                let token = state.issue_session();
                let mut resp = html(
                    StatusCode::OK,
                    "<!DOCTYPE html>\n<html><body><p>Welcome back.</p><a href=\"/p/0\">home</a></body></html>\n".into(),
                );
                let set = format!("{SESSION_COOKIE}={token}; Path=/; HttpOnly");
                resp.headers_mut().insert(header::SET_COOKIE, set.parse().expect("cookie header"));
                resp
            } else {
                html(StatusCode::OK, login_form("Wrong username or password."))
            }
        }
        (&Method::GET, ["captcha.png"]) => {
            (StatusCode::OK, [(header::CONTENT_TYPE, "image/png")], PNG_1X1).into_response()
        }
        (&Method::POST, ["captcha", id]) => {
            let Some(id) = id.parse::<usize>().ok().filter(|id| state.spec.captcha_pages.contains(id)) else {
                return html(StatusCode::NOT_FOUND, "<html><body>no such challenge</body></html>".into());
            };
            let expected = captcha_answer(id).to_string();
            if form_field(body, "answer").as_deref() == Some(expected.as_str()) {
                state.solved.lock().expect("solved").insert(id);
                html(StatusCode::OK, format!("<html><body><p>Verified. <a href=\"/p/{id}\">continue</a></p></body></html>"))
            } else {
                html(StatusCode::OK, captcha_wall(id))
            }
        }
        (&Method::GET, ["p", id]) => {
            let Some(id) = id.parse::<usize>().ok().filter(|id| *id < state.spec.page_count) else {
                return html(StatusCode::NOT_FOUND, "<html><body>not found</body></html>".into());
            };
            if state.spec.login_required && !state.authorize(cookie) {
                return redirect_to_login();
            }
            let mut page = id;
            match state.spec.fault_for(id) {
                Some(FaultBehavior::Always404) => {
                    return html(StatusCode::NOT_FOUND, "<html><body>listing removed</body></html>".into());
                }
                Some(FaultBehavior::NTimes503(n)) => {
                    let mut served = state.served_503.lock().expect("counters");
                    let count = served.entry(id).or_default();
                    if *count < n {
                        *count += 1;
                        return html(StatusCode::SERVICE_UNAVAILABLE, "<html><body>overloaded</body></html>".into());
                    }
                }
                Some(FaultBehavior::RedirectToLogin) => return redirect_to_login(),
                Some(FaultBehavior::MirrorOf(target)) => page = target,
                None => {}
            }
            if state.spec.captcha_pages.contains(&id) && !state.solved.lock().expect("solved").contains(&id) {
                return html(StatusCode::OK, captcha_wall(id));
            }
            html(StatusCode::OK, state.site.body(page))
        }
        _ => html(StatusCode::NOT_FOUND, "<html><body>not found</body></html>".into()),
    }
}

async fn handle(
    axum::extract::State(state): axum::extract::State<Arc<MarketState>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let response = respond(&state, &method, uri.path(), &headers, &body);
    let text = |name: header::HeaderName| headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
    let record = AccessRecord {
        method: method.to_string(),
        path: uri.path_and_query().map(|p| p.to_string()).unwrap_or_else(|| uri.path().to_string()),
        host: text(header::HOST).or_else(|| uri.authority().map(|a| a.to_string())),
        absolute_form: uri.scheme().is_some(),
        user_agent: text(header::USER_AGENT),
        cookie: text(header::COOKIE),
        accept: text(header::ACCEPT),
        body: (!body.is_empty()).then(|| String::from_utf8_lossy(&body).into_owned()),
        status: response.status().as_u16(),
    };
    state.log.lock().expect("access log").push(record);
    response
}

/// A running mock market. Stops when dropped.
#[derive(Debug)]
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MarketState>,
    task: JoinHandle<()>,
}

/// Bind to `127.0.0.1:port` (`0` for any free port) and start serving.
pub async fn serve(site: SiteGraph, spec: SiteSpec, port: u16) -> Result<MockServer, MockError> {
    spec.validate()?;
    if site.page_count() != spec.page_count {
        return Err(MockError::Spec("site graph does not match page_count".into()));
    }
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    let addr = listener.local_addr()?;
    let state = Arc::new(MarketState {
        spec,
        site,
        served_503: Mutex::default(),
        sessions: Mutex::default(),
        solved: Mutex::default(),
        log: Mutex::default(),
        next_session: AtomicU64::new(0),
    });
    let app = axum::Router::new().fallback(handle).with_state(state.clone());
    let task = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "mock market stopped");
        }
    });
    Ok(MockServer { addr, state, task })
}

impl MockServer {
    /// Generate the site for `spec` and serve it on a free port.
    pub async fn start(spec: SiteSpec) -> Result<Self, MockError> {
        spec.validate()?;
        let site = generate_site(&spec);
        serve(site, spec, 0).await
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> CanonicalUrl {
        CanonicalUrl::parse(&format!("http://{}/", self.addr)).expect("socket address forms a url")
    }

    pub fn page_url(&self, id: usize) -> CanonicalUrl {
        page_url(&self.base_url(), id)
    }

    pub fn site(&self) -> &SiteGraph {
        &self.state.site
    }

    pub fn spec(&self) -> &SiteSpec {
        &self.state.spec
    }

    /// Mint a fresh session as if the fixture credentials had logged in.
    pub fn issue_session(&self) -> String {
        self.state.issue_session()
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.state.log.lock().expect("access log").clone()
    }

    pub fn clear_access_log(&self) {
        self.state.log.lock().expect("access log").clear();
    }

    pub fn shutdown(self) {}
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}
