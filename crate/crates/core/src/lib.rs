//! Resumable HTTP transfers across network handoffs.
//!
//! A split connection keeps the browser's local leg open while disposable
//! remote legs come and go with the network. After a failure the proxy asks
//! the gateway for the resource again from the last delivered byte.

pub mod client_proxy;
pub mod gateway;
pub mod live;
pub mod policy;
pub mod protocol;
pub mod sensing;
pub mod simharness;
