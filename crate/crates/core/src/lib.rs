//! Breadth-first crawler for login-walled marketplaces, with session cookie
//! rotation, operator-assisted captcha solving, user-agent rotation and
//! SOCKS/HTTP proxying, plus the metrics pipeline used to evaluate crawls
//! and a deterministic mock market to run them against.

pub mod api;
pub mod captcha;
pub mod config;
pub mod engine;
pub mod events;
pub mod experiment;
pub mod extractor;
pub mod frontier;
pub mod metrics;
pub mod mockmarket;
pub mod session;
pub mod transport;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/quick-start.md")]
    mod quick_start {}
    #[doc = include_str!("../../../book/src/crawl-order.md")]
    mod crawl_order {}
    #[doc = include_str!("../../../book/src/sessions.md")]
    mod sessions {}
    #[doc = include_str!("../../../book/src/captcha.md")]
    mod captcha {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/mock-market.md")]
    mod mock_market {}
    #[doc = include_str!("../../../book/src/control-api.md")]
    mod control_api {}
}
