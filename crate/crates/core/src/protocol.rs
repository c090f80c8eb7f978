//! Resume protocol between the client-side proxy and the gateway.
//!
//! The proxy wraps every origin request into a gateway request that carries
//! the origin URL in the `url=` query parameter and the number of entity-body
//! bytes already delivered in a `Session-Offset` header. The gateway parses it
//! back, fetches the origin from that offset, and the proxy splices the
//! resulting fragments into one contiguous stream.

use std::fmt::Write as _;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensing::InterfaceId;

/// User agent the proxy stamps on every rewritten request.
pub const AGENT_TAG: &str = "Proxy/2.0";
/// Default dispatcher path on the gateway host.
pub const DEFAULT_DISPATCHER_PATH: &str = "/scripts/dis.dll";
/// Version token emitted on rewritten request lines.
pub const WIRE_VERSION: &str = "HTTP 1.0";

pub const SESSION_OFFSET_HEADER: &str = "Session-Offset";
pub const USER_AGENT_HEADER: &str = "User-Agent";

/// Characters escaped inside the `url=` parameter. Everything that could be
/// confused with query syntax or header framing is encoded, plus `%` itself
/// so decoding is exact.
const URL_PARAM: &AsciiSet = &CONTROLS
    .add(b' ')
    .add(b'"')
    .add(b'#')
    .add(b'%')
    .add(b'&')
    .add(b'+')
    .add(b'<')
    .add(b'>')
    .add(b'`')
    .add(b'{')
    .add(b'}')
    .add(b'|')
    .add(b'\\')
    .add(b'^');

/// Headers that describe the browser-to-proxy hop and are not forwarded.
const HOP_HEADERS: &[&str] = &[
    "host",
    "connection",
    "proxy-connection",
    "keep-alive",
    "user-agent",
    "session-offset",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("unsupported method `{0}`")]
    UnsupportedMethod(String),
    #[error("malformed request: {0}")]
    MalformedRequest(String),
    #[error("malformed session offset `{0}`")]
    MalformedOffset(String),
    #[error("gap detected: stream ends at byte {expected} but next fragment starts at {found}")]
    GapDetected { expected: u64, found: u64 },
    #[error("fragment at offset {0} has an empty payload")]
    EmptyFragment(u64),
    #[error("fragments are not sorted by start offset")]
    Unsorted,
    #[error("malformed response head: {0}")]
    MalformedResponse(String),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// A request as issued by the browser to the local proxy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginRequest {
    pub method: String,
    pub url: String,
    pub version: String,
    pub headers: Vec<(String, String)>,
}

impl OriginRequest {
    /// Plain `GET <url> HTTP 1.0` with no extra headers.
    pub fn get(url: impl Into<String>) -> Self {
        Self {
            method: "GET".to_string(),
            url: url.into(),
            version: WIRE_VERSION.to_string(),
            headers: Vec::new(),
        }
    }

    /// Parses a browser request header block.
    pub fn parse(raw: &str) -> Result<Self> {
        let head = HeaderBlock::parse(raw)?;
        let req = Self {
            method: head.method.to_string(),
            url: head.target.to_string(),
            version: head.version.to_string(),
            headers: head.headers,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if self.method != "GET" {
            return Err(ProtocolError::UnsupportedMethod(self.method.clone()));
        }
        require_absolute(&self.url)
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }
}

/// Gateway-bound request carrying the origin URL and the resume offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayRequest {
    pub gateway_base: String,
    pub origin_url: String,
    pub session_offset: u64,
    pub agent_tag: String,
    /// Origin headers forwarded verbatim after the two protocol headers.
    pub extra_headers: Vec<(String, String)>,
}

impl GatewayRequest {
    pub fn new(gateway_base: impl Into<String>, origin_url: impl Into<String>, offset: u64) -> Self {
        Self {
            gateway_base: gateway_base.into(),
            origin_url: origin_url.into(),
            session_offset: offset,
            agent_tag: AGENT_TAG.to_string(),
            extra_headers: Vec::new(),
        }
    }

    /// Serializes to the wire format: request line, `User-Agent`,
    /// `Session-Offset`, forwarded headers, blank line.
    pub fn to_wire(&self) -> String {
        let mut out = String::with_capacity(128 + self.origin_url.len());
        let encoded = utf8_percent_encode(&self.origin_url, URL_PARAM);
        let _ = write!(out, "GET {}?url={} {}\r\n", self.gateway_base, encoded, WIRE_VERSION);
        let _ = write!(out, "{}: {}\r\n", USER_AGENT_HEADER, self.agent_tag);
        let _ = write!(out, "{}: {}\r\n", SESSION_OFFSET_HEADER, self.session_offset);
        for (name, value) in &self.extra_headers {
            let _ = write!(out, "{name}: {value}\r\n");
        }
        out.push_str("\r\n");
        out
    }
}

/// Rewrites a browser request into the gateway wire format at `offset`.
pub fn rewrite_request(origin: &OriginRequest, gateway_base: &str, offset: u64) -> Result<String> {
    origin.validate()?;
    let mut req = GatewayRequest::new(gateway_base, origin.url.clone(), offset);
    req.extra_headers = origin
        .headers
        .iter()
        .filter(|(name, _)| !HOP_HEADERS.contains(&name.to_ascii_lowercase().as_str()))
        .cloned()
        .collect();
    Ok(req.to_wire())
}

/// Parses a gateway request block. A missing `Session-Offset` header means a
/// fresh download from byte 0.
pub fn parse_gateway_request(raw: &str) -> Result<GatewayRequest> {
    let head = HeaderBlock::parse(raw)?;
    if head.method != "GET" {
        return Err(ProtocolError::UnsupportedMethod(head.method.to_string()));
    }
    let (base, query) = head
        .target
        .split_once('?')
        .ok_or_else(|| ProtocolError::MalformedRequest("missing `url=` parameter".into()))?;
    let encoded = query
        .split('&')
        .find_map(|pair| pair.strip_prefix("url="))
        .ok_or_else(|| ProtocolError::MalformedRequest("missing `url=` parameter".into()))?;
    let origin_url = percent_decode_str(encoded)
        .decode_utf8()
        .map_err(|_| ProtocolError::MalformedRequest("origin url is not valid UTF-8".into()))?
        .into_owned();
    require_absolute(&origin_url)?;

    let session_offset = match find_header(&head.headers, SESSION_OFFSET_HEADER) {
        None => 0,
        Some(value) => value
            .parse::<u64>()
            .map_err(|_| ProtocolError::MalformedOffset(value.to_string()))?,
    };
    let agent_tag = find_header(&head.headers, USER_AGENT_HEADER).unwrap_or_default().to_string();
    let extra_headers = head
        .headers
        .iter()
        .filter(|(name, _)| {
            !name.eq_ignore_ascii_case(SESSION_OFFSET_HEADER) && !name.eq_ignore_ascii_case(USER_AGENT_HEADER)
        })
        .cloned()
        .collect();

    Ok(GatewayRequest {
        gateway_base: base.to_string(),
        origin_url,
        session_offset,
        agent_tag,
        extra_headers,
    })
}

fn require_absolute(url: &str) -> Result<()> {
    match url::Url::parse(url) {
        Ok(parsed) if parsed.has_host() => Ok(()),
        Ok(_) => Err(ProtocolError::MalformedRequest(format!("url `{url}` has no host"))),
        Err(_) => Err(ProtocolError::MalformedRequest(format!("url `{url}` is not absolute"))),
    }
}

fn find_header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

/// Borrowed view of a request header block.
struct HeaderBlock<'a> {
    method: &'a str,
    target: &'a str,
    version: &'a str,
    headers: Vec<(String, String)>,
}

impl<'a> HeaderBlock<'a> {
    fn parse(raw: &'a str) -> Result<Self> {
        let block = match raw.find("\r\n\r\n") {
            Some(end) => &raw[..end],
            None => match raw.find("\n\n") {
                Some(end) => &raw[..end],
                None => return Err(ProtocolError::MalformedRequest("incomplete header block".into())),
            },
        };
        let mut lines = block.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
        let request_line = lines
            .next()
            .filter(|l| !l.is_empty())
            .ok_or_else(|| ProtocolError::MalformedRequest("empty request line".into()))?;

        let (method, rest) = request_line
            .split_once(' ')
            .ok_or_else(|| ProtocolError::MalformedRequest(format!("bad request line `{request_line}`")))?;
        // Accept both `HTTP 1.0` and `HTTP/1.0`.
        let split = rest
            .rfind(" HTTP")
            .ok_or_else(|| ProtocolError::MalformedRequest(format!("missing version in `{request_line}`")))?;
        let target = rest[..split].trim();
        let version = rest[split + 1..].trim();
        if method.is_empty() || target.is_empty() || target.contains(' ') {
            return Err(ProtocolError::MalformedRequest(format!("bad request line `{request_line}`")));
        }

        let mut headers = Vec::new();
        for line in lines {
            let (name, value) = line
                .split_once(':')
                .ok_or_else(|| ProtocolError::MalformedRequest(format!("bad header line `{line}`")))?;
            headers.push((name.trim().to_string(), value.trim().to_string()));
        }
        Ok(Self {
            method,
            target,
            version,
            headers,
        })
    }
}

/// Status line and headers of a relayed response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseHead {
    pub status: u16,
    pub reason: String,
    pub headers: Vec<(String, String)>,
}

impl ResponseHead {
    pub fn new(status: u16, reason: impl Into<String>) -> Self {
        Self {
            status,
            reason: reason.into(),
            headers: Vec::new(),
        }
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn set_header(&mut self, name: &str, value: impl Into<String>) {
        let value = value.into();
        match self.headers.iter_mut().find(|(n, _)| n.eq_ignore_ascii_case(name)) {
            Some(slot) => slot.1 = value,
            None => self.headers.push((name.to_string(), value)),
        }
    }

    pub fn content_length(&self) -> Option<u64> {
        self.header("Content-Length").and_then(|v| v.parse().ok())
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn to_wire(&self) -> String {
        let mut out = format!("HTTP/1.0 {} {}\r\n", self.status, self.reason);
        for (name, value) in &self.headers {
            let _ = write!(out, "{name}: {value}\r\n");
        }
        out.push_str("\r\n");
        out
    }

    /// Parses a response head; returns the head and the number of bytes it
    /// occupied, or `None` when `buf` does not yet hold a complete head.
    pub fn parse(buf: &[u8]) -> Result<Option<(Self, usize)>> {
        let mut storage = [httparse::EMPTY_HEADER; 64];
        let mut resp = httparse::Response::new(&mut storage);
        match resp.parse(buf) {
            Ok(httparse::Status::Partial) => Ok(None),
            Ok(httparse::Status::Complete(len)) => {
                let headers = resp
                    .headers
                    .iter()
                    .map(|h| (h.name.to_string(), String::from_utf8_lossy(h.value).into_owned()))
                    .collect();
                Ok(Some((
                    Self {
                        status: resp.code.unwrap_or_default(),
                        reason: resp.reason.unwrap_or_default().to_string(),
                        headers,
                    },
                    len,
                )))
            }
            Err(e) => Err(ProtocolError::MalformedResponse(e.to_string())),
        }
    }
}

/// A contiguous slice of the origin body received over one attachment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub start_offset: u64,
    pub payload: Vec<u8>,
    pub source_interface: InterfaceId,
}

impl Fragment {
    pub fn new(start_offset: u64, payload: impl Into<Vec<u8>>, source: impl Into<InterfaceId>) -> Self {
        Self {
            start_offset,
            payload: payload.into(),
            source_interface: source.into(),
        }
    }

    pub fn end_offset(&self) -> u64 {
        self.start_offset + self.payload.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplicedStream {
    pub total_bytes: u64,
    pub content: Vec<u8>,
    /// Bytes dropped because an earlier fragment already covered them.
    pub duplicate_bytes: u64,
}

/// Result of pushing bytes into a [`Splicer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Accepted {
    /// Offset of the first new byte within the pushed slice.
    pub skip: usize,
    /// Number of new bytes appended.
    pub fresh: usize,
    /// Bytes already held and therefore dropped.
    pub duplicate: usize,
}

/// Incremental splicer. Keeps the earlier copy of any overlapping byte and
/// refuses gaps.
#[derive(Debug, Clone, Default)]
pub struct Splicer {
    end: u64,
    duplicates: u64,
    content: Option<Vec<u8>>,
}

impl Splicer {
    /// `retain` keeps the spliced bytes in memory; otherwise only offsets are
    /// tracked.
    pub fn new(retain: bool) -> Self {
        Self {
            end: 0,
            duplicates: 0,
            content: retain.then(Vec::new),
        }
    }

    /// Exclusive end of the contiguous prefix held so far.
    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn duplicate_bytes(&self) -> u64 {
        self.duplicates
    }

    pub fn content(&self) -> Option<&[u8]> {
        self.content.as_deref()
    }

    pub fn push(&mut self, start: u64, payload: &[u8]) -> Result<Accepted> {
        if start > self.end {
            return Err(ProtocolError::GapDetected {
                expected: self.end,
                found: start,
            });
        }
        let end = start + payload.len() as u64;
        let skip = (self.end - start).min(payload.len() as u64) as usize;
        let fresh = payload.len() - skip;
        if fresh > 0 {
            if let Some(buf) = self.content.as_mut() {
                buf.extend_from_slice(&payload[skip..]);
            }
            self.end = end;
        }
        self.duplicates += skip as u64;
        Ok(Accepted {
            skip,
            fresh,
            duplicate: skip,
        })
    }

    pub fn finish(self) -> SplicedStream {
        SplicedStream {
            total_bytes: self.end,
            content: self.content.unwrap_or_default(),
            duplicate_bytes: self.duplicates,
        }
    }
}

/// Pieces sorted fragments into one stream.
pub fn splice(fragments: &[Fragment]) -> Result<SplicedStream> {
    let mut splicer = Splicer::new(true);
    let mut last_start = 0;
    for fragment in fragments {
        if fragment.payload.is_empty() {
            return Err(ProtocolError::EmptyFragment(fragment.start_offset));
        }
        if fragment.start_offset < last_start {
            return Err(ProtocolError::Unsorted);
        }
        last_start = fragment.start_offset;
        splicer.push(fragment.start_offset, &fragment.payload)?;
    }
    Ok(splicer.finish())
}
