//! Session cookies: automated form login, Fisher-Yates rotation order and
//! validation by redirect inspection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::captcha;
use crate::config::{CookieSource, CookieSpec, MarketMetadata};
use crate::frontier::{is_internal, CanonicalUrl};
use crate::transport::{detect_unexpected_redirect, StatusClass, Transport, TransportError};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("no credentials configured")]
    NoCredentials,
    #[error("login page {0} is not on the market host")]
    ForeignLoginHost(CanonicalUrl),
    #[error("login-failed: {0}")]
    LoginFailed(String),
    #[error("login-rejected: {reason}")]
    LoginRejected { reason: String, captcha: bool },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Draw a uniformly random permutation of `0..n` by Fisher-Yates: walk `i`
/// from `n - 1` down to `1`, swapping slot `i` with a uniform `j` in `0..=i`.
pub fn fisher_yates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Pool of session cookies (manual and login-minted alike) served in a
/// shuffled order.
#[derive(Debug, Clone)]
pub struct CookieJar {
    cookies: Vec<CookieSpec>,
    condemned: Vec<bool>,
    rotation_order: Vec<usize>,
    cursor: usize,
    served_since_rotation: u32,
    rng: ChaCha8Rng,
}

impl CookieJar {
    /// Build a jar and shuffle its initial rotation order.
    pub fn new(cookies: Vec<CookieSpec>, seed: u64) -> Self {
        let mut jar = Self {
            condemned: vec![false; cookies.len()],
            cookies,
            rotation_order: Vec::new(),
            cursor: 0,
            served_since_rotation: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        jar.shuffle_rotation();
        jar
    }

    pub fn len(&self) -> usize {
        self.cookies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cookies.is_empty()
    }

    pub fn cookies(&self) -> &[CookieSpec] {
        &self.cookies
    }

    pub fn rotation_order(&self) -> &[usize] {
        &self.rotation_order
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn shuffle_rotation(&mut self) {
        self.rotation_order = fisher_yates(self.cookies.len(), &mut self.rng);
        self.cursor = 0;
        self.served_since_rotation = 0;
    }

    pub fn current_index(&self) -> Option<usize> {
        self.rotation_order.get(self.cursor).copied()
    }

    pub fn current_cookie(&self) -> Option<&CookieSpec> {
        self.current_index().map(|i| &self.cookies[i])
    }

    pub fn advance(&mut self) -> Option<&CookieSpec> {
        if self.cursor < self.rotation_order.len() {
            self.cursor += 1;
        }
        self.served_since_rotation = 0;
        self.current_cookie()
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor >= self.rotation_order.len()
    }

    /// Add a cookie and return its index. It joins the rotation at the next
    /// shuffle.
    pub fn insert(&mut self, cookie: CookieSpec) -> usize {
        if let Some(idx) = self.cookies.iter().position(|c| c.name == cookie.name && c.value == cookie.value) {
            self.condemned[idx] = false;
            return idx;
        }
        self.cookies.push(cookie);
        self.condemned.push(false);
        self.cookies.len() - 1
    }

    /// Make `idx` the current cookie, rebuilding the rotation so that it
    /// comes first.
    pub fn promote(&mut self, idx: usize) {
        self.shuffle_rotation();
        if let Some(pos) = self.rotation_order.iter().position(|&i| i == idx) {
            self.rotation_order.remove(pos);
            self.rotation_order.insert(0, idx);
        }
    }

    /// Mark a cookie as rejected by the server.
    pub fn condemn(&mut self, idx: usize) {
        if let Some(flag) = self.condemned.get_mut(idx) {
            *flag = true;
        }
    }

    pub fn is_condemned(&self, idx: usize) -> bool {
        self.condemned.get(idx).copied().unwrap_or(false)
    }

    pub fn has_valid(&self) -> bool {
        self.condemned.iter().any(|c| !c)
    }

    /// Move the cursor forward to the next cookie that has not been
    /// condemned. Returns `None` when the rotation order runs out.
    pub fn next_valid(&mut self) -> Option<usize> {
        loop {
            match self.current_index() {
                Some(i) if !self.condemned[i] => return Some(i),
                Some(_) => {
                    self.cursor += 1;
                }
                None => return None,
            }
        }
    }

    /// Count one successful request on the current cookie. Returns `true`
    /// when the count reached `every` and the cursor moved on.
    pub fn record_success(&mut self, every: u32) -> bool {
        self.served_since_rotation += 1;
        if self.served_since_rotation >= every {
            self.advance();
            true
        } else {
            false
        }
    }
}

/// Log in with the metadata credentials and return the session cookie.
///
/// The form goes to `base` joined with `login_path`. Success needs both a
/// `Set-Cookie` and the home marker on a follow-up GET of `base`.
pub async fn login(
    meta: &MarketMetadata,
    base: &CanonicalUrl,
    transport: &Transport,
    user_agent: &str,
) -> Result<CookieSpec, SessionError> {
    let creds = meta.credentials.as_ref().ok_or(SessionError::NoCredentials)?;
    let login_url = base
        .join(&creds.login_path)
        .map_err(|e| SessionError::LoginFailed(e.to_string()))?;
    if !is_internal(&login_url, base) {
        return Err(SessionError::ForeignLoginHost(login_url));
    }

    let mut fields = vec![
        (creds.username_field.clone(), creds.username.clone()),
        (creds.password_field.clone(), creds.password.clone()),
    ];
    fields.extend(creds.extra_fields.iter().map(|(k, v)| (k.clone(), v.clone())));

    let response = transport.post_form(&login_url, &fields, &[], user_agent).await?;
    let captcha_wall = captcha::detect_captcha(&response.body, &login_url, &meta.captcha_hints).is_some();

    let Some((name, value)) = response.set_cookies.last().cloned() else {
        let body = String::from_utf8_lossy(&response.body);
        let form_again = body.contains(&format!("name=\"{}\"", creds.password_field));
        if form_again || captcha_wall {
            return Err(SessionError::LoginRejected {
                reason: if captcha_wall {
                    "captcha wall on the login page".into()
                } else {
                    "login form served again (wrong credentials?)".into()
                },
                captcha: captcha_wall,
            });
        }
        return Err(SessionError::LoginFailed(format!(
            "no Set-Cookie in response (status {})",
            response.final_status
        )));
    };

    let cookie = CookieSpec::new(name, value, base.host()).with_source(CookieSource::Login);
    let home = transport
        .fetch_as(base, std::slice::from_ref(&cookie), user_agent)
        .await?;
    let body = String::from_utf8_lossy(&home.body);
    let redirected = detect_unexpected_redirect(base, &home.redirect_chain, meta.login_path(), &meta.captcha_hints);
    if home.status_class == StatusClass::Ok && !redirected && body.contains(&meta.expected_home_marker) {
        Ok(cookie)
    } else {
        let captcha = captcha::detect_captcha(&home.body, base, &meta.captcha_hints).is_some();
        Err(SessionError::LoginRejected {
            reason: format!(
                "home marker {:?} absent after login (status {})",
                meta.expected_home_marker, home.final_status
            ),
            captcha,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CookieCheck {
    Valid,
    /// The server redirected the probe away: the cookie is not accepted.
    Rejected,
    /// The probe could not be evaluated (503, timeout...). The cookie keeps
    /// its standing.
    Transient(String),
}

impl CookieCheck {
    pub fn is_valid(&self) -> bool {
        matches!(self, CookieCheck::Valid)
    }
}

/// Fetch `probe` carrying only `cookie` and judge the cookie by the outcome.
pub async fn validate_cookie(
    cookie: &CookieSpec,
    probe: &CanonicalUrl,
    login_path: Option<&str>,
    captcha_hints: &[String],
    transport: &Transport,
    user_agent: &str,
) -> CookieCheck {
    let result = match transport.fetch_as(probe, std::slice::from_ref(cookie), user_agent).await {
        Ok(r) => r,
        Err(e) => return CookieCheck::Transient(e.to_string()),
    };
    if detect_unexpected_redirect(probe, &result.redirect_chain, login_path, captcha_hints) {
        return CookieCheck::Rejected;
    }
    match result.status_class {
        StatusClass::Ok => CookieCheck::Valid,
        _ => {
            let cause = result
                .error
                .clone()
                .unwrap_or_else(|| format!("status {}", result.final_status));
            tracing::info!(cookie = %cookie.name, %cause, "cookie validation inconclusive");
            CookieCheck::Transient(cause)
        }
    }
}
