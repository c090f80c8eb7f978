//! Fixed-network side of the split connection.
//!
//! The gateway keeps no per-session state. Each offset request is served
//! independently: fetch the origin resource (by range when the origin allows
//! it), discard anything before the requested offset, and relay the rest.

use std::collections::BTreeMap;
use std::io::{self, Read};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{parse_gateway_request, ProtocolError, ResponseHead};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("resource not found: {0}")]
    NotFound(String),
    #[error("offset {offset} is beyond the end of a {total}-byte resource")]
    OffsetBeyondEnd { offset: u64, total: u64 },
    #[error("origin error: {0}")]
    Origin(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Body of an origin response, starting at byte `start` of the resource.
pub struct OriginBody {
    pub head: ResponseHead,
    pub start: u64,
    pub total: Option<u64>,
    pub reader: Box<dyn Read + Send>,
}

/// Where the gateway fetches resources from.
pub trait Origin: Send + Sync {
    /// Fetches `url` from byte `offset`. Origins without range support may
    /// ignore the offset and start at 0; the gateway skips the prefix.
    fn fetch(&self, url: &str, offset: u64) -> Result<OriginBody, GatewayError>;
}

impl<O: Origin + ?Sized> Origin for Arc<O> {
    fn fetch(&self, url: &str, offset: u64) -> Result<OriginBody, GatewayError> {
        (**self).fetch(url, offset)
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic pseudo-random resource body; any byte can be computed
/// without materialising the prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticResource {
    pub seed: u64,
    pub key: u64,
    pub size: u64,
}

impl SyntheticResource {
    pub fn new(seed: u64, name: &str, size: u64) -> Self {
        // FNV-1a of the name keeps distinct resources distinct.
        let key = name
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        Self { seed, key, size }
    }

    fn word(&self, index: u64) -> u64 {
        mix(mix(self.seed ^ self.key.rotate_left(17)) ^ index)
    }

    pub fn byte_at(&self, pos: u64) -> u8 {
        self.word(pos / 8).to_le_bytes()[(pos % 8) as usize]
    }

    /// Fills `buf` with the bytes starting at `pos`.
    pub fn fill(&self, pos: u64, buf: &mut [u8]) {
        let mut p = pos;
        let mut i = 0;
        while i < buf.len() {
            let word = self.word(p / 8).to_le_bytes();
            let lane = (p % 8) as usize;
            let n = (8 - lane).min(buf.len() - i);
            buf[i..i + n].copy_from_slice(&word[lane..lane + n]);
            i += n;
            p += n as u64;
        }
    }

    pub fn to_vec(&self) -> Vec<u8> {
        let mut v = vec![0; self.size as usize];
        self.fill(0, &mut v);
        v
    }

    pub fn reader(&self, start: u64) -> SyntheticReader {
        SyntheticReader {
            resource: *self,
            pos: start.min(self.size),
        }
    }
}

pub struct SyntheticReader {
    resource: SyntheticResource,
    pos: u64,
}

impl Read for SyntheticReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = (self.resource.size - self.pos).min(buf.len() as u64) as usize;
        self.resource.fill(self.pos, &mut buf[..n]);
        self.pos += n as u64;
        Ok(n)
    }
}

#[derive(Debug, Clone)]
pub enum Resource {
    Bytes(Arc<[u8]>),
    Synthetic(SyntheticResource),
}

impl Resource {
    pub fn len(&self) -> u64 {
        match self {
            Self::Bytes(b) => b.len() as u64,
            Self::Synthetic(s) => s.size,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn reader(&self, start: u64) -> Box<dyn Read + Send> {
        match self {
            Self::Bytes(b) => {
                let mut c = io::Cursor::new(b.clone());
                c.set_position(start.min(b.len() as u64));
                Box::new(c)
            }
            Self::Synthetic(s) => Box::new(s.reader(start)),
        }
    }
}

/// In-memory origin keyed by absolute URL.
#[derive(Debug, Clone, Default)]
pub struct MemoryOrigin {
    resources: BTreeMap<String, Resource>,
    supports_ranges: bool,
}

impl MemoryOrigin {
    pub fn new(supports_ranges: bool) -> Self {
        Self {
            resources: BTreeMap::new(),
            supports_ranges,
        }
    }

    pub fn insert(&mut self, url: impl Into<String>, resource: Resource) {
        self.resources.insert(url.into(), resource);
    }

    pub fn with_bytes(mut self, url: impl Into<String>, body: impl Into<Vec<u8>>) -> Self {
        self.insert(url, Resource::Bytes(body.into().into()));
        self
    }

    pub fn resource(&self, url: &str) -> Option<&Resource> {
        self.resources.get(url)
    }
}

impl Origin for MemoryOrigin {
    fn fetch(&self, url: &str, offset: u64) -> Result<OriginBody, GatewayError> {
        let res = self
            .resources
            .get(url)
            .ok_or_else(|| GatewayError::NotFound(url.to_string()))?;
        let start = if self.supports_ranges { offset.min(res.len()) } else { 0 };
        let mut head = ResponseHead::new(if start > 0 { 206 } else { 200 }, "OK");
        head.set_header("Content-Length", (res.len() - start).to_string());
        head.set_header("Content-Type", "application/octet-stream");
        Ok(OriginBody {
            head,
            start,
            total: Some(res.len()),
            reader: res.reader(start),
        })
    }
}

#[derive(Debug, Default)]
pub struct GatewayMetrics {
    requests: AtomicU64,
    origin_bytes: AtomicU64,
    skipped_bytes: AtomicU64,
    relayed_bytes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub requests: u64,
    /// Bytes pulled from the origin, including skipped prefixes.
    pub origin_bytes: u64,
    pub skipped_bytes: u64,
    pub relayed_bytes: u64,
}

impl GatewayMetrics {
    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            requests: self.requests.load(Ordering::Relaxed),
            origin_bytes: self.origin_bytes.load(Ordering::Relaxed),
            skipped_bytes: self.skipped_bytes.load(Ordering::Relaxed),
            relayed_bytes: self.relayed_bytes.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub origin_url: String,
    pub session_offset: u64,
    /// Where the origin actually started sending.
    pub origin_start: u64,
}

pub struct Gateway<O> {
    origin: O,
    metrics: Arc<GatewayMetrics>,
    log: Mutex<Vec<DispatchRecord>>,
}

/// Relay response: head plus a body reader already positioned at the
/// requested offset.
pub struct Relay {
    pub head: ResponseHead,
    pub body: RelayBody,
}

pub struct RelayBody {
    inner: Box<dyn Read + Send>,
    to_skip: u64,
    consumed: u64,
    metrics: Arc<GatewayMetrics>,
}

impl RelayBody {
    /// Bytes this relay has pulled from the origin so far, skipped prefix
    /// included.
    pub fn origin_bytes(&self) -> u64 {
        self.consumed
    }

    fn skip_prefix(&mut self) -> io::Result<()> {
        let mut scratch = [0u8; 8192];
        while self.to_skip > 0 {
            let want = self.to_skip.min(scratch.len() as u64) as usize;
            let n = self.inner.read(&mut scratch[..want])?;
            if n == 0 {
                return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "origin ended before offset"));
            }
            self.to_skip -= n as u64;
            self.consumed += n as u64;
            self.metrics.origin_bytes.fetch_add(n as u64, Ordering::Relaxed);
            self.metrics.skipped_bytes.fetch_add(n as u64, Ordering::Relaxed);
        }
        Ok(())
    }
}

impl Read for RelayBody {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.skip_prefix()?;
        let n = self.inner.read(buf)?;
        self.consumed += n as u64;
        self.metrics.origin_bytes.fetch_add(n as u64, Ordering::Relaxed);
        self.metrics.relayed_bytes.fetch_add(n as u64, Ordering::Relaxed);
        Ok(n)
    }
}

impl<O: Origin> Gateway<O> {
    pub fn new(origin: O) -> Self {
        Self {
            origin,
            metrics: Arc::new(GatewayMetrics::default()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn origin(&self) -> &O {
        &self.origin
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }

    pub fn dispatch_log(&self) -> Vec<DispatchRecord> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Serves one offset request.
    pub fn dispatch(&self, raw_request: &str) -> Result<Relay, GatewayError> {
        let req = parse_gateway_request(raw_request)?;
        self.fetch_at_offset(&req.origin_url, req.session_offset)
    }

    pub fn fetch_at_offset(&self, url: &str, offset: u64) -> Result<Relay, GatewayError> {
        self.metrics.requests.fetch_add(1, Ordering::Relaxed);
        let body = self.origin.fetch(url, offset)?;
        if !body.head.is_success() {
            return Err(GatewayError::Origin(format!("{} {}", body.head.status, body.head.reason)));
        }
        if let Some(total) = body.total {
            if offset > total {
                return Err(GatewayError::OffsetBeyondEnd { offset, total });
            }
        }
        if body.start > offset {
            return Err(GatewayError::Origin(format!(
                "origin started at {} past requested offset {offset}",
                body.start
            )));
        }
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(DispatchRecord {
            origin_url: url.to_string(),
            session_offset: offset,
            origin_start: body.start,
        });

        let mut head = ResponseHead::new(200, "OK");
        for (name, value) in &body.head.headers {
            if !name.eq_ignore_ascii_case("content-length") && !name.eq_ignore_ascii_case("content-range") {
                head.headers.push((name.clone(), value.clone()));
            }
        }
        if let Some(total) = body.total {
            head.set_header("Content-Length", (total - offset).to_string());
        }
        Ok(Relay {
            head,
            body: RelayBody {
                inner: body.reader,
                to_skip: offset - body.start,
                consumed: 0,
                metrics: self.metrics.clone(),
            },
        })
    }

    /// Convenience: the whole relayed body from `offset`.
    pub fn read_at_offset(&self, url: &str, offset: u64) -> Result<Vec<u8>, GatewayError> {
        let mut relay = self.fetch_at_offset(url, offset)?;
        let mut out = Vec::new();
        relay.body.read_to_end(&mut out)?;
        Ok(out)
    }
}
