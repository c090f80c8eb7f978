//! Live loopback mode: the same proxy and gateway logic over real sockets.
//!
//! Meant for smoke tests and demos. There is no virtual clock here, so runs
//! are not reproducible.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, warn};

use crate::client_proxy::{
    run_session, LocalLeg, ProxyConfig, RemoteStream, RemoteTransport, SchedulingAction, SessionId, SessionManager,
};
use crate::gateway::{Gateway, GatewayError, Origin, OriginBody};
use crate::protocol::ResponseHead;
use crate::sensing::{spawn_poller, FailureCause, InterfaceDescriptor, InterfaceId, PollerHandle};

const MAX_HEAD: usize = 64 * 1024;

/// Reads up to and including the blank line ending an HTTP head.
fn read_head<R: BufRead>(r: &mut R) -> io::Result<Vec<u8>> {
    let mut head = Vec::new();
    loop {
        let n = r.read_until(b'\n', &mut head)?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed in head"));
        }
        if head.ends_with(b"\r\n\r\n") || head.ends_with(b"\n\n") {
            return Ok(head);
        }
        if head.len() > MAX_HEAD {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "head too large"));
        }
    }
}

fn parse_response_head<R: BufRead>(r: &mut R) -> io::Result<ResponseHead> {
    let raw = read_head(r)?;
    match ResponseHead::parse(&raw) {
        Ok(Some((head, _))) => Ok(head),
        Ok(None) => Err(io::Error::new(io::ErrorKind::InvalidData, "incomplete response head")),
        Err(e) => Err(io::Error::new(io::ErrorKind::InvalidData, e)),
    }
}

fn connect(host_port: &str, timeout: Duration) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {host_port}"));
    for addr in host_port.to_socket_addrs()? {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => {
                s.set_read_timeout(Some(timeout))?;
                s.set_write_timeout(Some(timeout))?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Origin reached over plain HTTP/1.0, asking for a byte range when resuming.
#[derive(Debug, Clone)]
pub struct HttpOrigin {
    pub timeout: Duration,
}

impl Default for HttpOrigin {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
        }
    }
}

fn content_range_start_total(v: &str) -> Option<(u64, Option<u64>)> {
    let rest = v.trim().strip_prefix("bytes")?.trim();
    let (range, total) = rest.split_once('/')?;
    let (start, _) = range.split_once('-')?;
    Some((start.trim().parse().ok()?, total.trim().parse().ok()))
}

impl Origin for HttpOrigin {
    fn fetch(&self, url: &str, offset: u64) -> Result<OriginBody, GatewayError> {
        let parsed = url::Url::parse(url).map_err(|e| GatewayError::Origin(e.to_string()))?;
        if parsed.scheme() != "http" {
            return Err(GatewayError::Origin(format!("unsupported scheme {}", parsed.scheme())));
        }
        let host = parsed.host_str().ok_or_else(|| GatewayError::Origin("no host".into()))?;
        let port = parsed.port_or_known_default().unwrap_or(80);
        let mut stream = connect(&format!("{host}:{port}"), self.timeout)?;
        let mut path = parsed.path().to_string();
        if let Some(q) = parsed.query() {
            path.push('?');
            path.push_str(q);
        }
        let mut req = format!("GET {path} HTTP/1.0\r\nHost: {host}\r\nConnection: close\r\n");
        if offset > 0 {
            req.push_str(&format!("Range: bytes={offset}-\r\n"));
        }
        req.push_str("\r\n");
        stream.write_all(req.as_bytes())?;

        let mut reader = BufReader::new(stream);
        let head = parse_response_head(&mut reader)?;
        let (start, total) = if head.status == 206 {
            let (start, total) = head
                .header("Content-Range")
                .and_then(content_range_start_total)
                .ok_or_else(|| GatewayError::Origin("206 without a usable Content-Range".into()))?;
            (start, total)
        } else {
            (0, head.content_length())
        };
        Ok(OriginBody {
            head,
            start,
            total,
            reader: Box::new(reader),
        })
    }
}

/// Threaded TCP front end for a [`Gateway`].
pub struct GatewayServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

fn error_response(status: u16, reason: &str, detail: &str) -> Vec<u8> {
    let mut head = ResponseHead::new(status, reason);
    head.set_header("Content-Length", detail.len().to_string());
    let mut out = head.to_wire().into_bytes();
    out.extend_from_slice(detail.as_bytes());
    out
}

fn serve_gateway_conn<O: Origin>(gateway: &Gateway<O>, stream: TcpStream) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut out = stream;
    let raw = read_head(&mut reader)?;
    let text = String::from_utf8_lossy(&raw);
    match gateway.dispatch(&text) {
        Ok(mut relay) => {
            out.write_all(relay.head.to_wire().as_bytes())?;
            io::copy(&mut relay.body, &mut out)?;
        }
        Err(GatewayError::Protocol(e)) => out.write_all(&error_response(400, "Bad Request", &e.to_string()))?,
        Err(GatewayError::NotFound(u)) => out.write_all(&error_response(404, "Not Found", &u))?,
        Err(GatewayError::OffsetBeyondEnd { .. }) => {
            out.write_all(&error_response(416, "Range Not Satisfiable", "offset beyond end"))?
        }
        Err(e) => out.write_all(&error_response(502, "Bad Gateway", &e.to_string()))?,
    }
    out.flush()
}

fn accept_loop(listener: TcpListener, stop: Arc<AtomicBool>, mut handle: impl FnMut(TcpStream)) {
    while !stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                handle(stream);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("accept failed: {e}");
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

impl GatewayServer {
    pub fn start<O: Origin + 'static>(listen: SocketAddr, gateway: Arc<Gateway<O>>) -> io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            accept_loop(listener, flag, |stream| {
                let gw = gateway.clone();
                std::thread::spawn(move || {
                    if let Err(e) = serve_gateway_conn(&gw, stream) {
                        debug!("gateway connection ended: {e}");
                    }
                });
            })
        });
        Ok(Self {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Dispatcher URL clients should use as their gateway base.
    pub fn base_url(&self) -> String {
        format!("http://{}{}", self.addr, crate::protocol::DEFAULT_DISPATCHER_PATH)
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for GatewayServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Remote legs over TCP to the gateway named in the request line.
#[derive(Debug, Clone)]
pub struct TcpTransport {
    pub timeout: Duration,
}

struct TcpRemote {
    reader: BufReader<TcpStream>,
}

impl RemoteStream for TcpRemote {
    fn read_chunk(&mut self, buf: &mut [u8]) -> Result<usize, FailureCause> {
        self.reader.read(buf).map_err(|e| FailureCause::from_io(&e))
    }
}

fn request_target_host(request: &str) -> Option<String> {
    let target = request.split_whitespace().nth(1)?;
    let url = url::Url::parse(target).ok()?;
    Some(format!("{}:{}", url.host_str()?, url.port_or_known_default()?))
}

impl RemoteTransport for TcpTransport {
    fn open(
        &mut self,
        _iface: &InterfaceDescriptor,
        request: &str,
    ) -> Result<(ResponseHead, Box<dyn RemoteStream + '_>), FailureCause> {
        let host = request_target_host(request).ok_or(FailureCause::NoRecovery)?;
        let mut stream = connect(&host, self.timeout).map_err(|e| FailureCause::from_io(&e))?;
        stream.write_all(request.as_bytes()).map_err(|e| FailureCause::from_io(&e))?;
        let mut reader = BufReader::new(stream);
        let head = parse_response_head(&mut reader).map_err(|e| FailureCause::from_io(&e))?;
        Ok((head, Box::new(TcpRemote { reader })))
    }
}

struct TcpLeg(TcpStream);

impl LocalLeg for TcpLeg {
    fn send_head(&mut self, head: &ResponseHead) -> io::Result<()> {
        self.0.write_all(head.to_wire().as_bytes())
    }

    fn send_body(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.write_all(bytes)
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub proxy: ProxyConfig,
    /// How often parked sessions are retried.
    pub poll_interval: Duration,
    pub io_timeout: Duration,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            proxy: ProxyConfig::default(),
            poll_interval: Duration::from_secs(10),
            io_timeout: Duration::from_secs(30),
        }
    }
}

struct Shared {
    manager: Mutex<SessionManager>,
    wake: Condvar,
    legs: Mutex<BTreeMap<SessionId, TcpLeg>>,
    stop: Arc<AtomicBool>,
}

/// Browser-facing proxy listening on a loopback address.
pub struct ProxyServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    poller: Option<PollerHandle>,
}

fn loopback_iface() -> InterfaceDescriptor {
    InterfaceDescriptor::ethernet(InterfaceId::from("lo"))
}

fn worker(shared: Arc<Shared>, timeout: Duration) {
    let iface = loopback_iface();
    let mut transport = TcpTransport { timeout };
    let started = Instant::now();
    let clock = move || started.elapsed().as_secs_f64();
    loop {
        let id = {
            let mut m = shared.manager.lock().unwrap_or_else(|e| e.into_inner());
            loop {
                if shared.stop.load(Ordering::Acquire) {
                    return;
                }
                if let Some(id) = m.next_runnable() {
                    break id;
                }
                m = shared
                    .wake
                    .wait_timeout(m, Duration::from_millis(50))
                    .unwrap_or_else(|e| e.into_inner())
                    .0;
            }
        };
        let Some(mut leg) = shared.legs.lock().unwrap_or_else(|e| e.into_inner()).remove(&id) else {
            continue;
        };
        let result = run_session(&shared.manager, id, &iface, &mut transport, &mut leg, |_| None, &clock);
        let mut m = shared.manager.lock().unwrap_or_else(|e| e.into_inner());
        let action = match result {
            Ok(outcome) => {
                debug!("{id} attempt ended: {outcome:?}");
                m.handle_outcome(id, &outcome, clock())
            }
            Err(e) => {
                warn!("{id}: {e}");
                m.abort(id).map(|_| SchedulingAction::Fail)
            }
        };
        match action {
            Ok(SchedulingAction::Requeue { .. }) | Ok(SchedulingAction::Continue) => {
                shared.legs.lock().unwrap_or_else(|e| e.into_inner()).insert(id, leg);
            }
            _ => {
                let _ = leg.0.flush();
                let _ = leg.0.shutdown(Shutdown::Both);
            }
        }
        shared.wake.notify_all();
    }
}

fn accept_browser(shared: &Shared, stream: TcpStream, timeout: Duration) -> io::Result<()> {
    stream.set_read_timeout(Some(timeout))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let raw = read_head(&mut reader)?;
    let text = String::from_utf8_lossy(&raw);
    let mut m = shared.manager.lock().unwrap_or_else(|e| e.into_inner());
    match m.accept_raw(&text, 0.0) {
        Ok(id) => {
            shared.legs.lock().unwrap_or_else(|e| e.into_inner()).insert(id, TcpLeg(stream));
            shared.wake.notify_all();
            Ok(())
        }
        Err(e) => {
            let mut s = stream;
            s.write_all(&error_response(400, "Bad Request", &e.to_string()))
        }
    }
}

impl ProxyServer {
    /// Starts listening; `listen` must be a loopback address.
    pub fn start(listen: SocketAddr, cfg: LiveConfig) -> io::Result<Self> {
        if !listen.ip().is_loopback() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "proxy listens on loopback only"));
        }
        let listener = TcpListener::bind(listen)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            manager: Mutex::new(SessionManager::new(cfg.proxy.clone())),
            wake: Condvar::new(),
            legs: Mutex::new(BTreeMap::new()),
            stop: Arc::new(AtomicBool::new(false)),
        });
        let mut threads = Vec::new();
        for _ in 0..cfg.proxy.workers.max(1) {
            let s = shared.clone();
            let timeout = cfg.io_timeout;
            threads.push(std::thread::spawn(move || worker(s, timeout)));
        }
        let s = shared.clone();
        let timeout = cfg.io_timeout;
        threads.push(std::thread::spawn(move || {
            accept_loop(listener, s.stop.clone(), |stream| {
                if let Err(e) = accept_browser(&s, stream, timeout) {
                    debug!("browser connection rejected: {e}");
                }
            });
        }));
        let s = shared.clone();
        let poller = spawn_poller(
            cfg.poll_interval,
            || [InterfaceId::from("lo")].into_iter().collect(),
            move |_events| {
                s.manager.lock().unwrap_or_else(|e| e.into_inner()).release_waiting();
                s.wake.notify_all();
            },
        );
        Ok(Self {
            addr,
            shared,
            threads,
            poller: Some(poller),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Runs `f` against the session table.
    pub fn with_sessions<R>(&self, f: impl FnOnce(&SessionManager) -> R) -> R {
        f(&self.shared.manager.lock().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        self.shared.wake.notify_all();
        if let Some(p) = self.poller.take() {
            p.stop();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ProxyServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Fetches `url` through a running proxy, returning the response head and
/// body as the browser would see them.
pub fn fetch_via_proxy(proxy: SocketAddr, url: &str, timeout: Duration) -> io::Result<(ResponseHead, Vec<u8>)> {
    let mut s = TcpStream::connect_timeout(&proxy, timeout)?;
    s.set_read_timeout(Some(timeout))?;
    s.write_all(format!("GET {url} HTTP/1.0\r\n\r\n").as_bytes())?;
    let mut reader = BufReader::new(s);
    let head = parse_response_head(&mut reader)?;
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    Ok((head, body))
}
