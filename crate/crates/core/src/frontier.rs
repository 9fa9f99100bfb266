//! URL canonicalization and the breadth-first download queue.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use url::Url;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UrlError {
    /// Not an error as far as the crawl is concerned: the link is ignored.
    #[error("unsupported scheme {0:?}")]
    Unsupported(String),
    #[error("unparseable url {raw:?}: {reason}")]
    Invalid { raw: String, reason: String },
}

impl UrlError {
    pub fn is_skip(&self) -> bool {
        matches!(self, UrlError::Unsupported(_))
    }
}

/// An absolute http(s) URL in normal form: lowercase host, no default port,
/// no dot segments, no fragment, no trailing slash except for the root path.
/// Query strings are kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalUrl {
    scheme: String,
    host: String,
    port: Option<u16>,
    path: String,
    query: Option<String>,
}

impl CanonicalUrl {
    pub fn parse(raw: &str) -> Result<Self, UrlError> {
        normalize_url(raw, None)
    }

    fn from_url(url: &Url) -> Result<Self, UrlError> {
        let scheme = url.scheme().to_ascii_lowercase();
        if scheme != "http" && scheme != "https" {
            return Err(UrlError::Unsupported(scheme));
        }
        let host = url
            .host_str()
            .filter(|h| !h.is_empty())
            .ok_or_else(|| UrlError::Invalid {
                raw: url.to_string(),
                reason: "missing host".into(),
            })?
            .to_ascii_lowercase();
        let mut path = url.path().to_string();
        while path.len() > 1 && path.ends_with('/') {
            path.pop();
        }
        if path.is_empty() {
            path.push('/');
        }
        Ok(Self {
            scheme,
            host,
            port: url.port(),
            path,
            query: url.query().map(str::to_string),
        })
    }

    pub fn scheme(&self) -> &str {
        &self.scheme
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn port(&self) -> Option<u16> {
        self.port
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn query(&self) -> Option<&str> {
        self.query.as_deref()
    }

    pub fn is_onion(&self) -> bool {
        self.host.ends_with(".onion")
    }

    /// Path plus query, as sent in a request line.
    pub fn path_and_query(&self) -> String {
        match &self.query {
            Some(q) => format!("{}?{}", self.path, q),
            None => self.path.clone(),
        }
    }

    pub fn to_url(&self) -> Url {
        Url::parse(&self.to_string()).expect("canonical urls always reparse")
    }

    /// Resolve `raw` relative to this URL.
    pub fn join(&self, raw: &str) -> Result<CanonicalUrl, UrlError> {
        normalize_url(raw, Some(self))
    }
}

impl fmt::Display for CanonicalUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}", self.scheme, self.host)?;
        if let Some(port) = self.port {
            write!(f, ":{port}")?;
        }
        f.write_str(&self.path)?;
        if let Some(q) = &self.query {
            write!(f, "?{q}")?;
        }
        Ok(())
    }
}

impl FromStr for CanonicalUrl {
    type Err = UrlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for CanonicalUrl {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CanonicalUrl {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Canonicalize `raw`, resolving it against `base` when it is relative.
///
/// Links with a non-http scheme (`mailto:`, `javascript:` ...) come back as
/// [`UrlError::Unsupported`], which callers treat as "skip this link".
pub fn normalize_url(raw: &str, base: Option<&CanonicalUrl>) -> Result<CanonicalUrl, UrlError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(UrlError::Invalid {
            raw: raw.to_string(),
            reason: "empty".into(),
        });
    }
    let parsed = match base {
        Some(base) => base.to_url().join(trimmed),
        None => Url::parse(trimmed),
    };
    let url = parsed.map_err(|e| {
        // A scheme we recognise but do not crawl is a skip, not a parse error.
        match trimmed.split_once(':') {
            Some((scheme, _)) if is_scheme(scheme) && !scheme.eq_ignore_ascii_case("http") && !scheme.eq_ignore_ascii_case("https") => {
                UrlError::Unsupported(scheme.to_ascii_lowercase())
            }
            _ => UrlError::Invalid {
                raw: raw.to_string(),
                reason: e.to_string(),
            },
        }
    })?;
    CanonicalUrl::from_url(&url)
}

fn is_scheme(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'))
}

/// A link is internal when its host is exactly the scope's host.
pub fn is_internal(url: &CanonicalUrl, scope: &CanonicalUrl) -> bool {
    url.host == scope.host
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontierEntry {
    pub url: CanonicalUrl,
    pub depth: u32,
}

/// FIFO download queue plus the visited set. Because every enqueue happens
/// at `parent depth + 1`, FIFO order is breadth-first order.
#[derive(Debug, Clone, Default)]
pub struct Frontier {
    queue: VecDeque<FrontierEntry>,
    seen: HashSet<CanonicalUrl>,
    content_digests: HashSet<String>,
    max_depth: Option<u32>,
    depth_rejections: u64,
}

impl Frontier {
    pub fn new(max_depth: Option<u32>) -> Self {
        Self {
            max_depth,
            ..Default::default()
        }
    }

    pub fn max_depth(&self) -> Option<u32> {
        self.max_depth
    }

    /// Queue `url` unless it was already seen or lies beyond the depth bound.
    pub fn enqueue(&mut self, url: CanonicalUrl, depth: u32) -> bool {
        if self.max_depth.is_some_and(|max| depth > max) {
            self.depth_rejections += 1;
            return false;
        }
        if self.seen.contains(&url) {
            return false;
        }
        self.seen.insert(url.clone());
        self.queue.push_back(FrontierEntry { url, depth });
        true
    }

    pub fn dequeue(&mut self) -> Option<FrontierEntry> {
        self.queue.pop_front()
    }

    pub fn peek(&self) -> Option<&FrontierEntry> {
        self.queue.front()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Unique URLs ever accepted into the queue.
    pub fn identified(&self) -> usize {
        self.seen.len()
    }

    pub fn seen(&self) -> impl Iterator<Item = &CanonicalUrl> {
        self.seen.iter()
    }

    pub fn has_seen(&self, url: &CanonicalUrl) -> bool {
        self.seen.contains(url)
    }

    /// Links dropped because they would exceed `max_depth`.
    pub fn depth_rejections(&self) -> u64 {
        self.depth_rejections
    }

    /// Remember a page body digest. Returns `false` when the digest was
    /// already stored, i.e. the page mirrors one fetched earlier.
    pub fn record_digest(&mut self, digest: &str) -> bool {
        self.content_digests.insert(digest.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn url(s: &str) -> CanonicalUrl {
        CanonicalUrl::parse(s).unwrap()
    }

    #[test]
    fn case_port_and_fragment() {
        let u = url("HTTP://EN.WIKIPEDIA.ORG:80/wiki/IOT#x");
        assert_eq!(u.scheme(), "http");
        assert_eq!(u.host(), "en.wikipedia.org");
        assert_eq!(u.port(), None);
        assert_eq!(u.path(), "/wiki/IOT");
        assert_eq!(u.to_string(), "http://en.wikipedia.org/wiki/IOT");
    }

    #[test]
    fn relative_resolution() {
        let base = url("http://en.wikipedia.org/wiki/IOT");
        let u = normalize_url("/wiki/Crawler", Some(&base)).unwrap();
        assert_eq!(u.to_string(), "http://en.wikipedia.org/wiki/Crawler");
        let u = normalize_url("Crawler", Some(&base)).unwrap();
        assert_eq!(u.to_string(), "http://en.wikipedia.org/wiki/Crawler");
    }

    #[test]
    fn unsupported_schemes_are_skips() {
        let base = url("http://x.onion/a");
        for raw in ["javascript:void(0)", "mailto:someone@example.org", "ftp://x.onion/f"] {
            let err = normalize_url(raw, Some(&base)).unwrap_err();
            assert!(err.is_skip(), "{raw}: {err:?}");
        }
        let err = normalize_url("http://", None).unwrap_err();
        assert!(!err.is_skip());
    }

    #[test]
    fn dot_segments_and_trailing_slash() {
        assert_eq!(url("http://h/a/./b/../c/").path(), "/a/c");
        assert_eq!(url("http://h/a/"), url("http://h/a"));
        assert_eq!(url("http://h").path(), "/");
        assert_eq!(url("http://h/").to_string(), "http://h/");
    }

    #[test]
    fn query_is_significant() {
        assert_ne!(url("http://h/a?x=1"), url("http://h/a?x=2"));
        assert_eq!(url("http://h/a?b=2&a=1").query(), Some("b=2&a=1"));
        assert_eq!(url("https://h:8443/a?q").to_string(), "https://h:8443/a?q");
        assert_eq!(url("https://h:443/a").port(), None);
    }

    #[test]
    fn internal_means_same_host() {
        assert!(is_internal(&url("https://en.wikipedia.org/wiki/IOT"), &url("https://en.wikipedia.org/wiki/Crawler")));
        assert!(!is_internal(&url("https://de.wikipedia.org/x"), &url("https://en.wikipedia.org/y")));
        assert!(is_internal(&url("http://x.onion/a"), &url("http://x.onion/b")));
    }

    #[test]
    fn enqueue_dedup_and_depth_bound() {
        let mut f = Frontier::new(Some(2));
        assert!(f.enqueue(url("http://h/a"), 0));
        assert_eq!(f.len(), 1);
        assert!(!f.enqueue(url("http://h/a/"), 1));
        assert_eq!(f.len(), 1);
        assert!(!f.enqueue(url("http://h/b"), 3));
        assert_eq!(f.depth_rejections(), 1);
        // a url rejected for depth is not marked seen
        assert!(f.enqueue(url("http://h/b"), 2));
    }

    #[test]
    fn fifo_order() {
        let mut f = Frontier::new(None);
        f.enqueue(url("http://h/a"), 0);
        f.enqueue(url("http://h/b"), 1);
        f.enqueue(url("http://h/c"), 1);
        let order: Vec<String> = std::iter::from_fn(|| f.dequeue()).map(|e| e.url.path().to_string()).collect();
        assert_eq!(order, ["/a", "/b", "/c"]);
        assert!(f.dequeue().is_none());
    }

    #[test]
    fn digests() {
        let mut f = Frontier::new(None);
        assert!(f.record_digest("ab"));
        assert!(!f.record_digest("ab"));
    }

    fn raw_url() -> impl Strategy<Value = String> {
        let scheme = prop_oneof![Just("http"), Just("HTTPS"), Just("Http")];
        let host = "[a-zA-Z][a-zA-Z0-9]{0,8}(\\.[a-zA-Z0-9]{1,6}){0,2}";
        let port = prop_oneof![Just(String::new()), Just(":80".to_string()), Just(":443".to_string()), (1u16..65535).prop_map(|p| format!(":{p}"))];
        let seg = prop_oneof![Just(".".to_string()), Just("..".to_string()), "[a-zA-Z0-9_~%-]{0,6}"];
        let path = proptest::collection::vec(seg, 0..5).prop_map(|s| s.join("/"));
        let query = prop_oneof![Just(String::new()), "\\?[a-z0-9=&]{0,8}"];
        let frag = prop_oneof![Just(String::new()), "#[a-z]{0,4}"];
        (scheme, host, port, path, query, frag)
            .prop_map(|(s, h, p, path, q, fr)| format!("{s}://{h}{p}/{path}{q}{fr}"))
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(raw in raw_url()) {
            if let Ok(once) = CanonicalUrl::parse(&raw) {
                let twice = CanonicalUrl::parse(&once.to_string()).unwrap();
                prop_assert_eq!(&once, &twice);
                prop_assert_eq!(once.host().to_ascii_lowercase(), once.host());
                prop_assert!(!once.path().split('/').any(|s| s == "." || s == ".."));
            }
        }

        #[test]
        fn relative_links_are_idempotent(rel in "[a-z0-9./?#=]{1,12}") {
            let base = url("http://market.onion/p/3");
            if let Ok(once) = normalize_url(&rel, Some(&base)) {
                prop_assert_eq!(normalize_url(&once.to_string(), Some(&base)).unwrap(), once);
            }
        }

        #[test]
        fn dequeue_matches_reference_fifo(ops in proptest::collection::vec((0u8..20, 1u32..3), 1..60)) {
            // Reference simulation: a plain Vec with linear dedup.
            let mut f = Frontier::new(None);
            let mut reference: Vec<(String, u32)> = Vec::new();
            f.enqueue(url("http://h/root"), 0);
            reference.push(("/root".into(), 0));
            let mut ops = ops;
            ops.sort_by_key(|(_, d)| *d);
            for (id, depth) in ops {
                let u = url(&format!("http://h/{id}"));
                let fresh = !reference.iter().any(|(p, _)| p == u.path());
                prop_assert_eq!(f.enqueue(u.clone(), depth), fresh);
                if fresh {
                    reference.push((u.path().to_string(), depth));
                }
            }
            let got: Vec<(String, u32)> = std::iter::from_fn(|| f.dequeue()).map(|e| (e.url.path().to_string(), e.depth)).collect();
            prop_assert_eq!(&got, &reference);
            prop_assert!(got.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }
}
