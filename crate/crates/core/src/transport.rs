//! Moving protocol lines between client and server.
//!
//! Two carriers share the same state machines:
//!
//! * [`InProcessChannel`] runs both sides on the calling thread. Taps can be
//!   attached to receive a copy of every line, which is how the
//!   eavesdropping experiments observe sessions.
//! * [`serve`] / [`connect`] speak the same newline-terminated grammar over
//!   TCP, one session per connection.
//!
//! There is no channel security layer; lines travel in the clear.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use rand::Rng;

use crate::authdb::SharedAuthDb;
use crate::protocol::{
    ChallengeSession, ClientOutcome, ClientRole, Message, ServerConfig, ServerMachine, Verdict,
    WireError, MAX_LINE_LEN,
};
use crate::rng::{entropy_seed, stream_rng};

/// Upper bound on messages in one session; the grammar needs six.
const MAX_EXCHANGES: usize = 16;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::ClientToServer => "C",
            Direction::ServerToClient => "S",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub line: String,
    /// Time since the carrying channel opened.
    pub elapsed: Duration,
}

/// Ordered record of the lines of one or more sessions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        Transcript { entries }
    }

    /// Drains whatever a tap has received so far.
    pub fn from_tap(tap: &Receiver<TranscriptEntry>) -> Self {
        Transcript {
            entries: tap.try_iter().collect(),
        }
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: TranscriptEntry) {
        self.entries.push(entry);
    }

    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.line.as_str())
    }

    /// `"C: ..."` / `"S: ..."` lines, without timestamps. Equal seeds give
    /// equal text.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}: {}\n", e.direction.label(), e.line))
            .collect()
    }

    /// Parses every line; lines that do not parse are skipped.
    pub fn messages(&self) -> impl Iterator<Item = (Direction, Message)> + '_ {
        self.entries
            .iter()
            .filter_map(|e| Message::parse(&e.line).ok().map(|m| (e.direction, m)))
    }
}

/// Both endpoints in one process, with optional read-only taps.
pub struct InProcessChannel {
    opened: Instant,
    taps: Vec<Sender<TranscriptEntry>>,
}

impl Default for InProcessChannel {
    fn default() -> Self {
        Self::new()
    }
}

impl InProcessChannel {
    pub fn new() -> Self {
        InProcessChannel {
            opened: Instant::now(),
            taps: Vec::new(),
        }
    }

    /// Attaches a new tap and returns its receiving end.
    pub fn tap(&mut self) -> Receiver<TranscriptEntry> {
        let (tx, rx) = mpsc::channel();
        self.taps.push(tx);
        rx
    }

    /// Attaches an existing sender, so one observer can follow many
    /// channels.
    pub fn attach(&mut self, tap: Sender<TranscriptEntry>) {
        self.taps.push(tap);
    }

    fn carry(&mut self, direction: Direction, msg: &Message, log: &mut Transcript) -> String {
        let entry = TranscriptEntry {
            direction,
            line: msg.to_string(),
            elapsed: self.opened.elapsed(),
        };
        // dropped receivers are fine
        self.taps.retain(|tap| tap.send(entry.clone()).is_ok());
        let line = entry.line.clone();
        log.push(entry);
        line
    }
}

#[derive(Clone, Debug)]
pub struct HandshakeReport {
    pub verdict: Verdict,
    pub client: ClientOutcome,
    pub transcript: Transcript,
    pub session: Option<ChallengeSession>,
}

impl HandshakeReport {
    pub fn accepted(&self) -> bool {
        self.verdict.is_success()
    }
}

/// Runs one complete session between `client` and `server` over `channel`.
///
/// Lines are formatted by the sender and parsed by the receiver, so the
/// wire grammar is exercised exactly as over a socket.
pub fn run_handshake<C, R>(
    client: &mut C,
    server: &mut ServerMachine<R>,
    channel: &mut InProcessChannel,
) -> HandshakeReport
where
    C: ClientRole + ?Sized,
    R: Rng,
{
    let mut transcript = Transcript::default();
    let mut outgoing = Some(client.open());
    for _ in 0..MAX_EXCHANGES {
        let Some(msg) = outgoing.take() else { break };
        let line = channel.carry(Direction::ClientToServer, &msg, &mut transcript);
        let Some(reply) = server.handle_line(&line) else {
            break;
        };
        let line = channel.carry(Direction::ServerToClient, &reply, &mut transcript);
        outgoing = client.handle_line(&line);
    }
    if !server.is_finished() {
        server.on_disconnect();
    }
    HandshakeReport {
        verdict: server.verdict().clone(),
        client: client.outcome(),
        transcript,
        session: server.session().cloned(),
    }
}

#[derive(Debug)]
enum ReadError {
    TooLong,
    NotUtf8,
    TimedOut,
    Io(io::Error),
}

/// Reads one `\n`-terminated line of at most [`MAX_LINE_LEN`] bytes.
/// `Ok(None)` means the peer closed the stream.
fn read_line<R: BufRead>(reader: &mut R) -> Result<Option<String>, ReadError> {
    let mut buf = Vec::new();
    let limit = (MAX_LINE_LEN + 1) as u64;
    match reader.by_ref().take(limit).read_until(b'\n', &mut buf) {
        Ok(0) => return Ok(None),
        Ok(_) => {}
        Err(e)
            if matches!(
                e.kind(),
                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
            ) =>
        {
            return Err(ReadError::TimedOut)
        }
        Err(e) => return Err(ReadError::Io(e)),
    }
    if buf.last() != Some(&b'\n') {
        if buf.len() > MAX_LINE_LEN {
            return Err(ReadError::TooLong);
        }
        // closed mid-line
        return Ok(None);
    }
    buf.pop();
    String::from_utf8(buf)
        .map(Some)
        .map_err(|_| ReadError::NotUtf8)
}

fn not_utf8() -> WireError {
    WireError::Malformed {
        command: "line",
        reason: "not valid UTF-8".into(),
    }
}

fn write_line(stream: &mut TcpStream, msg: &Message) -> io::Result<String> {
    let line = msg.to_string();
    let mut bytes = Vec::with_capacity(line.len() + 1);
    bytes.extend_from_slice(line.as_bytes());
    bytes.push(b'\n');
    stream.write_all(&bytes)?;
    stream.flush()?;
    Ok(line)
}

/// Settings for [`serve`].
#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub server: ServerConfig,
    /// With a seed, connection `n` (counting from 0) draws its randomness
    /// from stream `n` of that seed.
    pub seed: Option<u64>,
    /// Receives `(connection number, entry)` for every line of every
    /// session, as seen at the server.
    pub tap: Option<Sender<(u64, TranscriptEntry)>>,
}

impl ServiceConfig {
    pub fn new(server: ServerConfig) -> Self {
        ServiceConfig {
            server,
            seed: None,
            tap: None,
        }
    }
}

/// Completed session as reported by the service.
#[derive(Clone, Debug)]
pub struct SessionLog {
    pub connection: u64,
    pub peer: Option<SocketAddr>,
    pub verdict: Verdict,
}

/// A running TCP authentication service.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    live: Arc<Mutex<HashMap<u64, TcpStream>>>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
    sessions: Receiver<SessionLog>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Sessions completed so far.
    pub fn completed(&self) -> Vec<SessionLog> {
        self.sessions.try_iter().collect()
    }

    /// Waits for the next completed session.
    pub fn next_session(&self, timeout: Duration) -> Option<SessionLog> {
        self.sessions.recv_timeout(timeout).ok()
    }

    /// Stops accepting, closes open connections and waits for all
    /// handlers to finish.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT);
        if let Some(accept) = self.accept.take() {
            let _ = accept.join();
        }
        for stream in lock(&self.live).values() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        let workers: Vec<_> = lock(&self.workers).drain(..).collect();
        for worker in workers {
            let _ = worker.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Binds `addr` and serves one session per accepted connection, each on
/// its own thread.
pub fn serve(
    addr: impl ToSocketAddrs,
    db: SharedAuthDb,
    config: ServiceConfig,
) -> io::Result<ServiceHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let live: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::default();
    let workers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
    let (log_tx, log_rx) = mpsc::channel();
    let base_seed = config.seed.unwrap_or_else(entropy_seed);
    let counter = AtomicU64::new(0);

    let accept = {
        let stop = stop.clone();
        let live = live.clone();
        let workers = workers.clone();
        thread::Builder::new()
            .name("qmfa-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match conn {
                        Ok(s) => s,
                        Err(e) => {
                            warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    let n = counter.fetch_add(1, Ordering::SeqCst);
                    if let Ok(clone) = stream.try_clone() {
                        lock(&live).insert(n, clone);
                    }
                    let db = db.clone();
                    let config = config.clone();
                    let live = live.clone();
                    let log_tx = log_tx.clone();
                    let handle = thread::spawn(move || {
                        let peer = stream.peer_addr().ok();
                        let rng = stream_rng(base_seed, n);
                        let verdict = handle_connection(stream, db, &config, rng, n);
                        lock(&live).remove(&n);
                        let _ = log_tx.send(SessionLog {
                            connection: n,
                            peer,
                            verdict,
                        });
                    });
                    let mut workers = lock(&workers);
                    workers.retain(|w| !w.is_finished());
                    workers.push(handle);
                }
            })?
    };

    Ok(ServiceHandle {
        addr: local,
        stop,
        accept: Some(accept),
        live,
        workers,
        sessions: log_rx,
    })
}

fn handle_connection<R: Rng>(
    stream: TcpStream,
    db: SharedAuthDb,
    config: &ServiceConfig,
    rng: R,
    connection: u64,
) -> Verdict {
    let opened = Instant::now();
    let deadline = opened + config.server.timeout;
    let mut machine = ServerMachine::new(db, config.server, rng);
    let tap = |direction, line: &str| {
        if let Some(tap) = &config.tap {
            let _ = tap.send((
                connection,
                TranscriptEntry {
                    direction,
                    line: line.to_owned(),
                    elapsed: opened.elapsed(),
                },
            ));
        }
    };
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => {
            machine.on_disconnect();
            return machine.verdict().clone();
        }
    };
    let mut reader = BufReader::new(stream);

    while !machine.is_finished() {
        let remaining = deadline.saturating_duration_since(Instant::now());
        let read = if remaining.is_zero() {
            Err(ReadError::TimedOut)
        } else {
            let _ = reader.get_ref().set_read_timeout(Some(remaining));
            read_line(&mut reader)
        };
        let reply = match read {
            Ok(Some(line)) => {
                tap(Direction::ClientToServer, &line);
                machine.handle_line(&line)
            }
            Ok(None) => {
                machine.on_disconnect();
                None
            }
            Err(ReadError::TooLong) => machine.on_malformed(&WireError::TooLong),
            Err(ReadError::NotUtf8) => machine.on_malformed(&not_utf8()),
            Err(ReadError::TimedOut) => machine.on_timeout(),
            Err(ReadError::Io(e)) => {
                debug!("connection {connection}: {e}");
                machine.on_disconnect();
                None
            }
        };
        if let Some(reply) = reply {
            match write_line(&mut writer, &reply) {
                Ok(line) => tap(Direction::ServerToClient, &line),
                Err(_) => machine.on_disconnect(),
            }
        }
    }
    let _ = writer.shutdown(Shutdown::Both);
    machine.verdict().clone()
}

/// Client end of a TCP connection to the service.
pub struct SocketChannel {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    opened: Instant,
}

#[derive(Clone, Debug)]
pub struct ClientReport {
    pub outcome: ClientOutcome,
    pub transcript: Transcript,
}

/// Opens a connection, trying each resolved address in turn.
pub fn connect(addr: impl ToSocketAddrs) -> io::Result<SocketChannel> {
    let mut last = io::Error::new(io::ErrorKind::InvalidInput, "address resolved to nothing");
    for candidate in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&candidate, CONNECT_TIMEOUT) {
            Ok(stream) => {
                stream.set_read_timeout(Some(
                    crate::protocol::DEFAULT_SESSION_TIMEOUT + Duration::from_secs(5),
                ))?;
                let reader = BufReader::new(stream.try_clone()?);
                return Ok(SocketChannel {
                    writer: stream,
                    reader,
                    opened: Instant::now(),
                });
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

impl SocketChannel {
    /// Drives `client` through one session.
    pub fn run_client<C: ClientRole + ?Sized>(
        mut self,
        client: &mut C,
    ) -> io::Result<ClientReport> {
        let mut transcript = Transcript::default();
        let mut outgoing = Some(client.open());
        for _ in 0..MAX_EXCHANGES {
            let Some(msg) = outgoing.take() else { break };
            let line = match write_line(&mut self.writer, &msg) {
                Ok(line) => line,
                Err(_) => {
                    client.on_disconnect();
                    break;
                }
            };
            self.record(&mut transcript, Direction::ClientToServer, line);
            match read_line(&mut self.reader) {
                Ok(Some(line)) => {
                    outgoing = client.handle_line(&line);
                    self.record(&mut transcript, Direction::ServerToClient, line);
                }
                Ok(None) | Err(ReadError::Io(_)) | Err(ReadError::TimedOut) => {
                    client.on_disconnect();
                    break;
                }
                Err(ReadError::TooLong) => outgoing = client.on_malformed(&WireError::TooLong),
                Err(ReadError::NotUtf8) => outgoing = client.on_malformed(&not_utf8()),
            }
        }
        let _ = self.writer.shutdown(Shutdown::Both);
        Ok(ClientReport {
            outcome: client.outcome(),
            transcript,
        })
    }

    fn record(&self, transcript: &mut Transcript, direction: Direction, line: String) {
        transcript.push(TranscriptEntry {
            direction,
            line,
            elapsed: self.opened.elapsed(),
        });
    }
}
