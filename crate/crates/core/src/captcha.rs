//! Captcha detection and the registry that brokers human (or scripted)
//! solutions back to the blocked fetch.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use scraper::{Html, Selector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::oneshot;

use crate::config::CookieSpec;
use crate::events::{self, CrawlEvent, EventKind, EventSender};
use crate::frontier::CanonicalUrl;

/// Patterns checked on every page in addition to the market's own hints.
pub const DEFAULT_PATTERNS: [&str; 3] = ["captcha", "are you human", "security check"];

const EXCERPT_BYTES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChallengeState {
    Pending,
    Solved,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaptchaChallenge {
    pub id: String,
    pub url: CanonicalUrl,
    pub matched_pattern: String,
    pub page_excerpt: String,
    pub image_refs: Vec<CanonicalUrl>,
    /// Where a field solution is posted.
    pub form_action: CanonicalUrl,
    pub created_at: DateTime<Utc>,
    pub state: ChallengeState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeSolution {
    pub challenge_id: String,
    pub fields: IndexMap<String, String>,
    pub cookie: Option<CookieSpec>,
}

impl ChallengeSolution {
    pub fn with_fields(challenge_id: impl Into<String>, fields: IndexMap<String, String>) -> Self {
        Self {
            challenge_id: challenge_id.into(),
            fields,
            cookie: None,
        }
    }

    pub fn with_cookie(challenge_id: impl Into<String>, cookie: CookieSpec) -> Self {
        Self {
            challenge_id: challenge_id.into(),
            fields: IndexMap::new(),
            cookie: Some(cookie),
        }
    }

    fn check(&self) -> Result<(), SolutionError> {
        match (self.fields.is_empty(), &self.cookie) {
            (false, None) | (true, Some(_)) => Ok(()),
            _ => Err(SolutionError::Invalid(
                "a solution carries either form fields or a cookie".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolutionError {
    #[error("unknown challenge {0}")]
    Unknown(String),
    #[error("challenge {0} is already {1:?}")]
    Closed(String, ChallengeState),
    #[error("invalid solution: {0}")]
    Invalid(String),
}

fn excerpt(body: &[u8]) -> String {
    let cut = &body[..body.len().min(EXCERPT_BYTES)];
    String::from_utf8_lossy(cut).into_owned()
}

fn challenge_id(url: &CanonicalUrl) -> String {
    let digest = Sha256::digest(url.to_string().as_bytes());
    format!("cap-{}", hex::encode(&digest[..6]))
}

/// Look for a captcha wall in `body`.
///
/// A page is a wall when a hint (or one of [`DEFAULT_PATTERNS`]) occurs in it,
/// case-insensitively, or when it has a form input whose name mentions
/// "captcha".
pub fn detect_captcha(body: &[u8], url: &CanonicalUrl, hints: &[String]) -> Option<CaptchaChallenge> {
    let text = String::from_utf8_lossy(body);
    let lower = text.to_lowercase();
    let mut matched = hints
        .iter()
        .map(String::as_str)
        .chain(DEFAULT_PATTERNS)
        .find(|p| !p.is_empty() && lower.contains(&p.to_lowercase()))
        .map(str::to_string);

    let doc = Html::parse_document(&text);
    let input_sel = Selector::parse("input[name]").expect("static selector");
    if matched.is_none() {
        matched = doc
            .select(&input_sel)
            .filter_map(|i| i.value().attr("name"))
            .find(|n| n.to_lowercase().contains("captcha"))
            .map(|_| "captcha".to_string());
    }
    let matched_pattern = matched?;

    let img_sel = Selector::parse("img[src]").expect("static selector");
    let mut image_refs: Vec<CanonicalUrl> = Vec::new();
    for src in doc.select(&img_sel).filter_map(|i| i.value().attr("src")) {
        if let Ok(u) = url.join(src) {
            if !image_refs.contains(&u) {
                image_refs.push(u);
            }
        }
    }

    let form_sel = Selector::parse("form").expect("static selector");
    let forms: Vec<_> = doc.select(&form_sel).collect();
    let form = forms
        .iter()
        .find(|f| {
            f.select(&input_sel).any(|i| {
                i.value()
                    .attr("name")
                    .is_some_and(|n| n.to_lowercase().contains("captcha") || n == "answer")
            })
        })
        .or(forms.first());
    let form_action = form
        .and_then(|f| f.value().attr("action"))
        .filter(|a| !a.trim().is_empty())
        .and_then(|a| url.join(a).ok())
        .unwrap_or_else(|| url.clone());

    Some(CaptchaChallenge {
        id: challenge_id(url),
        url: url.clone(),
        matched_pattern,
        page_excerpt: excerpt(body),
        image_refs,
        form_action,
        created_at: Utc::now(),
        state: ChallengeState::Pending,
    })
}

struct Slot {
    challenge: CaptchaChallenge,
    waiter: Option<oneshot::Sender<ChallengeSolution>>,
}

#[derive(Default)]
struct Inner {
    order: Vec<String>,
    slots: HashMap<String, Slot>,
}

/// Handle returned by [`ChallengeRegistry::open`]; consumed by
/// [`ChallengeRegistry::await_solution`].
#[derive(Debug)]
pub struct PendingChallenge {
    pub id: String,
    rx: oneshot::Receiver<ChallengeSolution>,
}

/// All challenges of one crawl. Shared between the crawl loop and the
/// control API.
#[derive(Default)]
pub struct ChallengeRegistry {
    inner: Mutex<Inner>,
    events: Option<EventSender>,
}

impl ChallengeRegistry {
    pub fn new(events: Option<EventSender>) -> Self {
        Self {
            inner: Mutex::default(),
            events,
        }
    }

    /// Register a pending challenge. Ids are made unique within the crawl.
    pub fn open(&self, mut challenge: CaptchaChallenge) -> (CaptchaChallenge, PendingChallenge) {
        let (tx, rx) = oneshot::channel();
        let mut inner = self.inner.lock().expect("registry lock");
        let base = challenge.id.clone();
        let mut n = 1;
        while inner.slots.contains_key(&challenge.id) {
            n += 1;
            challenge.id = format!("{base}-{n}");
        }
        challenge.state = ChallengeState::Pending;
        inner.order.push(challenge.id.clone());
        inner.slots.insert(
            challenge.id.clone(),
            Slot {
                challenge: challenge.clone(),
                waiter: Some(tx),
            },
        );
        drop(inner);
        events::emit(&self.events, CrawlEvent::new(EventKind::ChallengeOpened, &challenge));
        let pending = PendingChallenge {
            id: challenge.id.clone(),
            rx,
        };
        (challenge, pending)
    }

    pub fn submit(&self, solution: ChallengeSolution) -> Result<(), SolutionError> {
        let mut inner = self.inner.lock().expect("registry lock");
        let slot = inner
            .slots
            .get_mut(&solution.challenge_id)
            .ok_or_else(|| SolutionError::Unknown(solution.challenge_id.clone()))?;
        if slot.challenge.state != ChallengeState::Pending {
            return Err(SolutionError::Closed(solution.challenge_id.clone(), slot.challenge.state));
        }
        solution.check()?;
        slot.challenge.state = ChallengeState::Solved;
        let id = slot.challenge.id.clone();
        if let Some(tx) = slot.waiter.take() {
            let _ = tx.send(solution);
        }
        drop(inner);
        self.emit_closed(&id, ChallengeState::Solved);
        Ok(())
    }

    /// Mark a pending challenge abandoned. No-op for closed ones.
    pub fn abandon(&self, id: &str) -> bool {
        let mut inner = self.inner.lock().expect("registry lock");
        let Some(slot) = inner.slots.get_mut(id) else {
            return false;
        };
        if slot.challenge.state != ChallengeState::Pending {
            return false;
        }
        slot.challenge.state = ChallengeState::Abandoned;
        slot.waiter = None;
        drop(inner);
        self.emit_closed(id, ChallengeState::Abandoned);
        true
    }

    /// Wait until a solution arrives or `timeout` passes. `None` means the
    /// challenge was abandoned.
    pub async fn await_solution(&self, pending: PendingChallenge, timeout: Duration) -> Option<ChallengeSolution> {
        let PendingChallenge { id, mut rx } = pending;
        match tokio::time::timeout(timeout, &mut rx).await {
            Ok(Ok(solution)) => Some(solution),
            _ => {
                if self.abandon(&id) {
                    None
                } else {
                    // A solution slipped in between the timeout and the lock.
                    rx.try_recv().ok()
                }
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<CaptchaChallenge> {
        let inner = self.inner.lock().expect("registry lock");
        inner.slots.get(id).map(|s| s.challenge.clone())
    }

    pub fn pending(&self) -> Vec<CaptchaChallenge> {
        self.all()
            .into_iter()
            .filter(|c| c.state == ChallengeState::Pending)
            .collect()
    }

    pub fn pending_count(&self) -> usize {
        let inner = self.inner.lock().expect("registry lock");
        inner
            .slots
            .values()
            .filter(|s| s.challenge.state == ChallengeState::Pending)
            .count()
    }

    /// Every challenge in creation order.
    pub fn all(&self) -> Vec<CaptchaChallenge> {
        let inner = self.inner.lock().expect("registry lock");
        inner
            .order
            .iter()
            .filter_map(|id| inner.slots.get(id))
            .map(|s| s.challenge.clone())
            .collect()
    }

    fn emit_closed(&self, id: &str, state: ChallengeState) {
        events::emit(
            &self.events,
            CrawlEvent::new(
                EventKind::ChallengeClosed,
                serde_json::json!({ "id": id, "state": state }),
            ),
        );
    }
}

/// What to do when a captcha wall shows up.
#[derive(Debug, Clone, PartialEq)]
pub enum CaptchaPolicy {
    /// Ask on the terminal; the control API can answer as well.
    Interactive,
    /// Wait for a solution through the control API, give up after the
    /// captcha timeout.
    Abandon,
    /// Give up on the page at once.
    Fail,
    /// Answer from a prepared file.
    Script(ScriptedSolutions),
}

impl std::str::FromStr for CaptchaPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interactive" => Ok(Self::Interactive),
            "abandon" => Ok(Self::Abandon),
            "fail" => Ok(Self::Fail),
            _ => match s.strip_prefix("script:") {
                Some(path) => ScriptedSolutions::load(path).map(Self::Script).map_err(|e| e.to_string()),
                None => Err(format!(
                    "unknown captcha policy {s:?} (expected interactive, abandon, fail or script:<file>)"
                )),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ScriptedAnswer {
    Fields(IndexMap<String, String>),
    Cookie(String, String),
}

/// Prepared answers, one per line: `<url or path> <answer>` where the answer
/// is a form-encoded field list (`answer=17&x=y`) or `cookie:name=value`.
/// Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptedSolutions {
    answers: Vec<(String, ScriptedAnswer)>,
}

impl ScriptedSolutions {
    pub fn parse(text: &str) -> Result<Self, SolutionError> {
        let mut answers = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, answer) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| SolutionError::Invalid(format!("line {}: expected `<url> <answer>`", n + 1)))?;
            let answer = parse_answer(answer.trim())
                .ok_or_else(|| SolutionError::Invalid(format!("line {}: unreadable answer", n + 1)))?;
            answers.push((key.to_string(), answer));
        }
        Ok(Self { answers })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SolutionError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| SolutionError::Invalid(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    /// The scripted answer for `challenge`, matched by full URL first and
    /// then by path.
    pub fn solution_for(&self, challenge: &CaptchaChallenge) -> Option<ChallengeSolution> {
        let full = challenge.url.to_string();
        let path = challenge.url.path_and_query();
        let (_, answer) = self
            .answers
            .iter()
            .find(|(k, _)| *k == full)
            .or_else(|| self.answers.iter().find(|(k, _)| *k == path))?;
        Some(match answer {
            ScriptedAnswer::Fields(fields) => ChallengeSolution::with_fields(&challenge.id, fields.clone()),
            ScriptedAnswer::Cookie(name, value) => ChallengeSolution::with_cookie(
                &challenge.id,
                CookieSpec::new(name, value, challenge.url.host()),
            ),
        })
    }
}

fn parse_answer(raw: &str) -> Option<ScriptedAnswer> {
    if let Some(pair) = raw.strip_prefix("cookie:") {
        let (name, value) = pair.split_once('=')?;
        return (!name.is_empty()).then(|| ScriptedAnswer::Cookie(name.to_string(), value.to_string()));
    }
    let fields: IndexMap<String, String> = url::form_urlencoded::parse(raw.as_bytes()).into_owned().collect();
    (!fields.is_empty()).then_some(ScriptedAnswer::Fields(fields))
}

/// Turn operator input (one `field=value` per line, or a single
/// `cookie:name=value`) into a solution.
pub fn parse_prompt_lines<I, S>(challenge: &CaptchaChallenge, lines: I) -> Result<ChallengeSolution, SolutionError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut fields = IndexMap::new();
    let mut cookie = None;
    for line in lines {
        let line = line.as_ref().trim();
        if line.is_empty() {
            continue;
        }
        if let Some(pair) = line.strip_prefix("cookie:") {
            let (name, value) = pair
                .split_once('=')
                .ok_or_else(|| SolutionError::Invalid(format!("expected cookie:name=value, got {line:?}")))?;
            cookie = Some(CookieSpec::new(name.trim(), value.trim(), challenge.url.host()));
        } else {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SolutionError::Invalid(format!("expected field=value, got {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let solution = match cookie {
        Some(c) if fields.is_empty() => ChallengeSolution::with_cookie(&challenge.id, c),
        Some(_) => return Err(SolutionError::Invalid("give either fields or a cookie, not both".into())),
        None => ChallengeSolution::with_fields(&challenge.id, fields),
    };
    solution.check()?;
    Ok(solution)
}

static PROMPT_LOCK: Mutex<()> = Mutex::new(());

/// Ask the operator on the terminal and hand the answer to `registry`.
/// Challenges are prompted one at a time.
pub fn spawn_terminal_prompt(registry: Arc<ChallengeRegistry>, challenge: CaptchaChallenge) {
    tokio::task::spawn_blocking(move || {
        let _guard = PROMPT_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        if registry.get(&challenge.id).map(|c| c.state) != Some(ChallengeState::Pending) {
            return;
        }
        eprintln!("\n=== captcha challenge {} ===", challenge.id);
        eprintln!("url: {}", challenge.url);
        for img in &challenge.image_refs {
            eprintln!("image: {img}");
        }
        eprintln!("{}", challenge.page_excerpt);
        eprintln!("enter field=value lines (or cookie:name=value), then an empty line:");
        let stdin = std::io::stdin();
        let mut lines = Vec::new();
        for line in stdin.lock().lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                break;
            }
            lines.push(line);
        }
        match parse_prompt_lines(&challenge, &lines) {
            Ok(solution) => {
                if let Err(e) = registry.submit(solution) {
                    eprintln!("{e}");
                }
            }
            Err(e) => eprintln!("{e}; the challenge stays open for the control API"),
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn url(s: &str) -> CanonicalUrl {
        CanonicalUrl::parse(s).unwrap()
    }

    const WALL: &str = r#"<html><body><h1>Verify</h1>
        <form method="post" action="/captcha/12"><img src="/captcha.png">
        <input name="answer"><button>go</button></form></body></html>"#;

    #[test]
    fn captcha_input_is_detected() {
        let body = br#"<form><input name="captcha"></form>"#;
        let ch = detect_captcha(body, &url("http://m.onion/p/1"), &[]).unwrap();
        assert_eq!(ch.matched_pattern, "captcha");
        assert_eq!(ch.state, ChallengeState::Pending);
    }

    #[test]
    fn ordinary_page_is_not_a_wall() {
        let body = b"<html><body><a href='/p/2'>Listing 2</a></body></html>";
        assert!(detect_captcha(body, &url("http://m.onion/p/1"), &[]).is_none());
    }

    #[test]
    fn wall_collects_images_and_form_action() {
        let ch = detect_captcha(WALL.as_bytes(), &url("http://m.onion/p/12"), &[]).unwrap();
        assert_eq!(ch.image_refs, vec![url("http://m.onion/captcha.png")]);
        assert_eq!(ch.form_action, url("http://m.onion/captcha/12"));
        assert_eq!(ch.matched_pattern, "captcha");
    }

    #[test]
    fn market_hints_and_case() {
        let body = b"<p>Please complete the DDoS Guard challenge</p>";
        let hints = vec!["ddos guard".to_string()];
        let ch = detect_captcha(body, &url("http://m.onion/"), &hints).unwrap();
        assert_eq!(ch.matched_pattern, "ddos guard");
        assert!(detect_captcha(b"ARE YOU HUMAN?", &url("http://m.onion/"), &[]).is_some());
    }

    #[test]
    fn excerpt_is_bounded() {
        let body = format!("captcha{}", "x".repeat(10_000));
        let ch = detect_captcha(body.as_bytes(), &url("http://m.onion/"), &[]).unwrap();
        assert_eq!(ch.page_excerpt.len(), 4096);
    }

    fn challenge() -> CaptchaChallenge {
        detect_captcha(WALL.as_bytes(), &url("http://m.onion/p/12"), &[]).unwrap()
    }

    fn answer(id: &str) -> ChallengeSolution {
        let mut fields = IndexMap::new();
        fields.insert("answer".into(), "12".into());
        ChallengeSolution::with_fields(id, fields)
    }

    #[tokio::test]
    async fn solution_before_timeout() {
        let reg = Arc::new(ChallengeRegistry::new(None));
        let (ch, pending) = reg.open(challenge());
        let reg2 = reg.clone();
        let id = ch.id.clone();
        tokio::spawn(async move {
            tokio::time::sleep(Duration::from_millis(20)).await;
            reg2.submit(answer(&id)).unwrap();
        });
        let sol = reg.await_solution(pending, Duration::from_secs(5)).await.unwrap();
        assert_eq!(sol.fields["answer"], "12");
        assert_eq!(reg.get(&ch.id).unwrap().state, ChallengeState::Solved);
        // duplicate solution is rejected and the state stays solved
        assert!(matches!(reg.submit(answer(&ch.id)), Err(SolutionError::Closed(_, ChallengeState::Solved))));
        assert_eq!(reg.get(&ch.id).unwrap().state, ChallengeState::Solved);
    }

    #[tokio::test]
    async fn timeout_abandons() {
        let reg = ChallengeRegistry::new(None);
        let (ch, pending) = reg.open(challenge());
        assert_eq!(reg.pending_count(), 1);
        assert!(reg.await_solution(pending, Duration::from_millis(30)).await.is_none());
        assert_eq!(reg.get(&ch.id).unwrap().state, ChallengeState::Abandoned);
        assert!(matches!(reg.submit(answer(&ch.id)), Err(SolutionError::Closed(_, ChallengeState::Abandoned))));
        assert_eq!(reg.pending_count(), 0);
    }

    #[test]
    fn unknown_id() {
        let reg = ChallengeRegistry::new(None);
        let err = reg.submit(answer("nope")).unwrap_err();
        assert_eq!(err.to_string(), "unknown challenge nope");
    }

    #[test]
    fn ids_are_unique() {
        let reg = ChallengeRegistry::new(None);
        let (a, _) = reg.open(challenge());
        let (b, _) = reg.open(challenge());
        assert_ne!(a.id, b.id);
        assert_eq!(reg.all().len(), 2);
    }

    #[test]
    fn empty_solution_is_invalid() {
        let reg = ChallengeRegistry::new(None);
        let (ch, _p) = reg.open(challenge());
        let err = reg.submit(ChallengeSolution::with_fields(&ch.id, IndexMap::new())).unwrap_err();
        assert!(matches!(err, SolutionError::Invalid(_)));
        assert_eq!(reg.pending_count(), 1);
    }

    #[test]
    fn scripted_answers() {
        let script = ScriptedSolutions::parse("# answers\n/p/12 answer=12\nhttp://m.onion/p/40 cookie:session=abc\n").unwrap();
        let sol = script.solution_for(&challenge()).unwrap();
        assert_eq!(sol.fields["answer"], "12");
        let other = detect_captcha(WALL.as_bytes(), &url("http://m.onion/p/40"), &[]).unwrap();
        let sol = script.solution_for(&other).unwrap();
        assert_eq!(sol.cookie.unwrap().pair(), "session=abc");
        let none = detect_captcha(WALL.as_bytes(), &url("http://m.onion/p/41"), &[]).unwrap();
        assert!(script.solution_for(&none).is_none());
        assert!(ScriptedSolutions::parse("/p/1").is_err());
    }

    #[test]
    fn prompt_input() {
        let ch = challenge();
        let sol = parse_prompt_lines(&ch, ["answer=12", "", "token = x"]).unwrap();
        assert_eq!(sol.fields.len(), 2);
        let sol = parse_prompt_lines(&ch, ["cookie:session=zz"]).unwrap();
        assert_eq!(sol.cookie.unwrap().domain, "m.onion");
        assert!(parse_prompt_lines(&ch, Vec::<String>::new()).is_err());
        assert!(parse_prompt_lines(&ch, ["garbage"]).is_err());
    }

    #[test]
    fn policy_strings() {
        assert_eq!("abandon".parse::<CaptchaPolicy>().unwrap(), CaptchaPolicy::Abandon);
        assert_eq!("fail".parse::<CaptchaPolicy>().unwrap(), CaptchaPolicy::Fail);
        assert!("script:/does/not/exist".parse::<CaptchaPolicy>().is_err());
        assert!("solve".parse::<CaptchaPolicy>().is_err());
    }
}
