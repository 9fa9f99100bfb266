use std::time::Duration;

use tenebra::config::{CookieSource, CookieSpec, MarketMetadata};
use tenebra::experiment::metadata_for;
use tenebra::mockmarket::{FaultBehavior, FaultRule, MockServer, SiteSpec};
use tenebra::session::{login, validate_cookie, CookieCheck, SessionError};
use tenebra::transport::{Transport, TransportSettings};

fn transport() -> Transport {
    Transport::new(TransportSettings {
        proxy: None,
        request_timeout: Duration::from_secs(5),
        retries: 0,
        retry_backoff: Duration::from_millis(10),
    })
    .unwrap()
}

async fn walled_market(tweak: impl FnOnce(&mut SiteSpec)) -> (MockServer, MarketMetadata) {
    let mut spec = SiteSpec::new(8, 2, 3);
    spec.login_required = true;
    tweak(&mut spec);
    let server = MockServer::start(spec).await.unwrap();
    let meta = metadata_for(&server);
    (server, meta)
}

#[tokio::test]
async fn login_returns_a_working_session_cookie() {
    let (server, meta) = walled_market(|_| {}).await;
    let t = transport();
    let cookie = login(&meta, &server.page_url(0), &t, "ua").await.unwrap();
    assert_eq!(cookie.name, "session");
    assert_eq!(cookie.source, CookieSource::Login);
    assert_eq!(cookie.domain, server.base_url().host());

    let check = validate_cookie(&cookie, &server.page_url(3), Some("/login"), &[], &t, "ua").await;
    assert_eq!(check, CookieCheck::Valid);
}

#[tokio::test]
async fn login_posts_fields_in_declared_order() {
    let (server, mut meta) = walled_market(|_| {}).await;
    let creds = meta.credentials.as_mut().unwrap();
    creds.extra_fields.insert("remember".into(), "1".into());
    creds.extra_fields.insert("csrf".into(), "a b".into());
    login(&meta, &server.page_url(0), &transport(), "ua").await.unwrap();
    let post = server
        .access_log()
        .into_iter()
        .find(|r| r.method == "POST")
        .unwrap();
    assert_eq!(post.path, "/login");
    assert_eq!(post.body.as_deref(), Some("username=user&password=pass&remember=1&csrf=a+b"));
}

#[tokio::test]
async fn wrong_password_is_rejected() {
    let (server, mut meta) = walled_market(|_| {}).await;
    meta.credentials.as_mut().unwrap().password = "nope".into();
    let err = login(&meta, &server.page_url(0), &transport(), "ua").await.unwrap_err();
    assert!(matches!(err, SessionError::LoginRejected { captcha: false, .. }), "{err}");
    assert!(err.to_string().starts_with("login-rejected"));
}

#[tokio::test]
async fn login_without_credentials() {
    let (server, mut meta) = walled_market(|_| {}).await;
    meta.credentials = None;
    let err = login(&meta, &server.page_url(0), &transport(), "ua").await.unwrap_err();
    assert!(matches!(err, SessionError::NoCredentials));
}

#[tokio::test]
async fn login_path_on_another_host_is_refused() {
    let (server, mut meta) = walled_market(|_| {}).await;
    meta.credentials.as_mut().unwrap().login_path = "http://elsewhere.example/login".into();
    let err = login(&meta, &server.page_url(0), &transport(), "ua").await.unwrap_err();
    assert!(matches!(err, SessionError::ForeignLoginHost(_)));
    assert!(server.access_log().is_empty());
}

#[tokio::test]
async fn expired_cookie_is_rejected() {
    let (server, _) = walled_market(|s| s.cookie_ttl_requests = Some(1)).await;
    let t = transport();
    let cookie = CookieSpec::new("session", server.issue_session(), server.base_url().host());
    let probe = server.page_url(0);
    assert_eq!(validate_cookie(&cookie, &probe, Some("/login"), &[], &t, "ua").await, CookieCheck::Valid);
    assert_eq!(validate_cookie(&cookie, &probe, Some("/login"), &[], &t, "ua").await, CookieCheck::Rejected);
}

#[tokio::test]
async fn unknown_cookie_is_rejected() {
    let (server, _) = walled_market(|_| {}).await;
    let cookie = CookieSpec::new("session", "forged", server.base_url().host());
    let check = validate_cookie(&cookie, &server.page_url(0), Some("/login"), &[], &transport(), "ua").await;
    assert_eq!(check, CookieCheck::Rejected);
}

#[tokio::test]
async fn unavailable_probe_is_inconclusive() {
    let (server, _) = walled_market(|s| {
        s.fault_plan = vec![FaultRule { page: 0, behavior: FaultBehavior::NTimes503(5) }]
    })
    .await;
    let cookie = CookieSpec::new("session", server.issue_session(), server.base_url().host());
    let check = validate_cookie(&cookie, &server.page_url(0), Some("/login"), &[], &transport(), "ua").await;
    assert_eq!(check, CookieCheck::Transient("status 503".into()));
}
