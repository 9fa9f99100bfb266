//! Proxied HTTP fetching, response classification and user-agent rotation.
//!
//! Redirects are followed by hand so that every hop lands in the
//! [`FetchResult::redirect_chain`]: the session layer inspects that chain to
//! decide whether a cookie is still accepted.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::header::{HeaderMap, ACCEPT, CONTENT_TYPE, COOKIE, LOCATION, SET_COOKIE, USER_AGENT};
use serde::Serialize;
use thiserror::Error;

use crate::config::{CookieSpec, ProxyProtocol, ProxySpec};
use crate::frontier::{is_internal, CanonicalUrl};

pub const REDIRECT_LIMIT: usize = 5;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{0} is an onion address but no proxy is configured")]
    OnionWithoutProxy(CanonicalUrl),
    #[error("cannot build http client: {0}")]
    Client(#[from] reqwest::Error),
    #[error("user agent list is empty")]
    NoUserAgents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum StatusClass {
    Ok,
    NotFound,
    Unavailable,
    OtherError,
}

pub fn classify_status(code: u16) -> StatusClass {
    match code {
        200 => StatusClass::Ok,
        404 => StatusClass::NotFound,
        503 => StatusClass::Unavailable,
        _ => StatusClass::OtherError,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RedirectHop {
    pub status: u16,
    pub location: CanonicalUrl,
}

#[derive(Debug, Clone)]
pub struct FetchResult {
    pub requested: CanonicalUrl,
    /// Last status received; `0` when no final response exists (transport
    /// failure, redirect loop, or an off-site redirect).
    pub final_status: u16,
    pub status_class: StatusClass,
    pub body: Vec<u8>,
    pub content_type: Option<String>,
    pub redirect_chain: Vec<RedirectHop>,
    pub elapsed: Duration,
    pub user_agent_used: String,
    pub attempt_count: u32,
    /// `name=value` pairs from every `Set-Cookie` seen along the chain.
    pub set_cookies: Vec<(String, String)>,
    /// The chain left the requested host; nothing past that hop was fetched.
    pub left_scope: bool,
    /// No response was obtained (connect failure, timeout, broken body).
    pub transport_failure: bool,
    pub error: Option<String>,
}

impl FetchResult {
    pub fn final_url(&self) -> &CanonicalUrl {
        self.redirect_chain
            .last()
            .map(|hop| &hop.location)
            .unwrap_or(&self.requested)
    }

    pub fn is_html(&self) -> bool {
        match &self.content_type {
            Some(ct) => {
                let ct = ct.to_ascii_lowercase();
                ct.contains("html") || ct.contains("xml")
            }
            None => true,
        }
    }
}

/// Random-per-request user-agent choice from a fixed list.
#[derive(Debug, Clone)]
pub struct UserAgentRotator {
    agents: Vec<String>,
    rng: ChaCha8Rng,
}

impl UserAgentRotator {
    pub fn new(agents: Vec<String>, seed: u64) -> Result<Self, TransportError> {
        if agents.is_empty() {
            return Err(TransportError::NoUserAgents);
        }
        Ok(Self {
            agents,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn agents(&self) -> &[String] {
        &self.agents
    }

    pub fn next_user_agent(&mut self) -> String {
        let idx = self.rng.random_range(0..self.agents.len());
        self.agents[idx].clone()
    }
}

#[derive(Debug, Clone)]
pub struct TransportSettings {
    pub proxy: Option<ProxySpec>,
    pub request_timeout: Duration,
    pub retries: u32,
    pub retry_backoff: Duration,
}

impl Default for TransportSettings {
    fn default() -> Self {
        Self {
            proxy: None,
            request_timeout: Duration::from_secs(30),
            retries: 2,
            retry_backoff: Duration::from_millis(250),
        }
    }
}

impl TransportSettings {
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.retry_backoff.saturating_mul(1u32 << attempt.min(16))
    }
}

/// Build the `Cookie` header value: `name=value` pairs joined by `"; "`.
pub fn cookie_header(cookies: &[CookieSpec]) -> Option<String> {
    if cookies.is_empty() {
        return None;
    }
    Some(cookies.iter().map(CookieSpec::pair).collect::<Vec<_>>().join("; "))
}

/// True when `chain` ends somewhere other than the page that was asked for.
/// A landing on the login page, or on anything mentioning a captcha hint, is
/// always unexpected.
pub fn detect_unexpected_redirect(
    requested: &CanonicalUrl,
    chain: &[RedirectHop],
    login_path: Option<&str>,
    captcha_hints: &[String],
) -> bool {
    let Some(last) = chain.last() else {
        return false;
    };
    let dest = &last.location;
    if let Some(login) = login_path {
        let login = login.trim_end_matches('/');
        let login = if login.is_empty() { "/" } else { login };
        if dest.path() == login {
            return true;
        }
    }
    let dest_lower = dest.path_and_query().to_ascii_lowercase();
    let captcha_like = dest_lower.contains("captcha")
        || captcha_hints
            .iter()
            .any(|hint| !hint.is_empty() && dest_lower.contains(&hint.to_ascii_lowercase()));
    if captcha_like {
        return true;
    }
    dest.host() != requested.host() || dest.path() != requested.path()
}

#[derive(Debug, Clone)]
pub struct Transport {
    client: reqwest::Client,
    settings: TransportSettings,
}

enum Method<'a> {
    Get,
    PostForm(&'a str),
}

impl Transport {
    pub fn new(settings: TransportSettings) -> Result<Self, TransportError> {
        let mut builder = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .timeout(settings.request_timeout)
            .connect_timeout(settings.request_timeout);
        builder = match &settings.proxy {
            Some(proxy) => {
                let url = match proxy.protocol {
                    ProxyProtocol::Socks5h => format!("socks5h://{}:{}", proxy.host, proxy.port),
                    ProxyProtocol::Http => format!("http://{}:{}", proxy.host, proxy.port),
                };
                builder.proxy(reqwest::Proxy::all(url)?)
            }
            // Ignore HTTP_PROXY and friends: traffic goes where configured.
            None => builder.no_proxy(),
        };
        Ok(Self {
            client: builder.build()?,
            settings,
        })
    }

    pub fn settings(&self) -> &TransportSettings {
        &self.settings
    }

    fn check_route(&self, url: &CanonicalUrl) -> Result<(), TransportError> {
        if url.is_onion() && self.settings.proxy.is_none() {
            return Err(TransportError::OnionWithoutProxy(url.clone()));
        }
        Ok(())
    }

    /// GET with a user agent drawn from `rotator`.
    pub async fn fetch(
        &self,
        url: &CanonicalUrl,
        cookies: &[CookieSpec],
        rotator: &mut UserAgentRotator,
    ) -> Result<FetchResult, TransportError> {
        let ua = rotator.next_user_agent();
        self.fetch_as(url, cookies, &ua).await
    }

    /// GET with retry on 503 and on transport failures, following same-host
    /// redirects.
    pub async fn fetch_as(
        &self,
        url: &CanonicalUrl,
        cookies: &[CookieSpec],
        user_agent: &str,
    ) -> Result<FetchResult, TransportError> {
        self.check_route(url)?;
        let started = Instant::now();
        let mut attempt = 0u32;
        loop {
            let mut result = self.run_chain(url, Method::Get, cookies, user_agent).await;
            attempt += 1;
            let retryable = result.final_status == 503 || result.transport_failure;
            if retryable && attempt <= self.settings.retries {
                tracing::debug!(url = %url, status = result.final_status, attempt, "retrying");
                tokio::time::sleep(self.settings.backoff(attempt - 1)).await;
                continue;
            }
            result.attempt_count = attempt;
            result.elapsed = started.elapsed();
            return Ok(result);
        }
    }

    /// Form-encoded POST (fields in the given order). Not retried.
    pub async fn post_form(
        &self,
        url: &CanonicalUrl,
        fields: &[(String, String)],
        cookies: &[CookieSpec],
        user_agent: &str,
    ) -> Result<FetchResult, TransportError> {
        self.check_route(url)?;
        let body = encode_form(fields);
        let started = Instant::now();
        let mut result = self
            .run_chain(url, Method::PostForm(&body), cookies, user_agent)
            .await;
        result.attempt_count = 1;
        result.elapsed = started.elapsed();
        Ok(result)
    }

    async fn run_chain(
        &self,
        url: &CanonicalUrl,
        method: Method<'_>,
        cookies: &[CookieSpec],
        user_agent: &str,
    ) -> FetchResult {
        let mut result = FetchResult {
            requested: url.clone(),
            final_status: 0,
            status_class: StatusClass::OtherError,
            body: Vec::new(),
            content_type: None,
            redirect_chain: Vec::new(),
            elapsed: Duration::ZERO,
            user_agent_used: user_agent.to_string(),
            attempt_count: 0,
            set_cookies: Vec::new(),
            left_scope: false,
            transport_failure: false,
            error: None,
        };
        let mut current = url.clone();
        let mut method = method;
        // Session cookies minted along the chain (e.g. by a login POST) are
        // carried to the following hops.
        let mut jar: Vec<CookieSpec> = cookies.to_vec();
        loop {
            let mut req = match method {
                Method::Get => self.client.get(current.to_url()),
                Method::PostForm(body) => self
                    .client
                    .post(current.to_url())
                    .header(CONTENT_TYPE, "application/x-www-form-urlencoded")
                    .body(body.to_string()),
            };
            req = req.header(USER_AGENT, user_agent).header(ACCEPT, "text/html");
            if let Some(cookie) = cookie_header(&jar) {
                req = req.header(COOKIE, cookie);
            }
            let response = match req.send().await {
                Ok(r) => r,
                Err(e) => {
                    result.transport_failure = true;
                    result.error = Some(describe_error(&e));
                    return result;
                }
            };
            let status = response.status().as_u16();
            let headers = response.headers().clone();
            for (name, value) in parse_set_cookies(&headers) {
                jar.retain(|c| c.name != name);
                jar.push(CookieSpec::new(name.clone(), value.clone(), current.host()));
                result.set_cookies.push((name, value));
            }

            if (300..400).contains(&status) {
                let Some(target) = headers
                    .get(LOCATION)
                    .and_then(|v| v.to_str().ok())
                    .and_then(|loc| current.join(loc).ok())
                else {
                    result.error = Some(format!("{status} without a usable Location"));
                    return result;
                };
                if result.redirect_chain.len() == REDIRECT_LIMIT {
                    result.error = Some("redirect limit exceeded".into());
                    return result;
                }
                result.redirect_chain.push(RedirectHop {
                    status,
                    location: target.clone(),
                });
                if !is_internal(&target, url) {
                    result.left_scope = true;
                    result.error = Some(format!("redirect leaves {} for {}", url.host(), target.host()));
                    return result;
                }
                // 307/308 preserve the method; everything else becomes GET.
                if !matches!(status, 307 | 308) {
                    method = Method::Get;
                }
                current = target;
                continue;
            }

            result.final_status = status;
            result.status_class = classify_status(status);
            result.content_type = headers
                .get(CONTENT_TYPE)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string);
            match response.bytes().await {
                Ok(bytes) => result.body = bytes.to_vec(),
                Err(e) => {
                    result.final_status = 0;
                    result.status_class = StatusClass::OtherError;
                    result.transport_failure = true;
                    result.error = Some(describe_error(&e));
                }
            }
            return result;
        }
    }
}

fn describe_error(e: &reqwest::Error) -> String {
    if e.is_timeout() {
        "timeout".to_string()
    } else if e.is_connect() {
        format!("connect: {e}")
    } else {
        e.to_string()
    }
}

pub fn encode_form(fields: &[(String, String)]) -> String {
    let mut ser = url::form_urlencoded::Serializer::new(String::new());
    for (k, v) in fields {
        ser.append_pair(k, v);
    }
    ser.finish()
}

fn parse_set_cookies(headers: &HeaderMap) -> Vec<(String, String)> {
    headers
        .get_all(SET_COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .filter_map(|raw| {
            let pair = raw.split(';').next()?.trim();
            let (name, value) = pair.split_once('=')?;
            let name = name.trim();
            (!name.is_empty()).then(|| (name.to_string(), value.trim().to_string()))
        })
        .collect()
}
