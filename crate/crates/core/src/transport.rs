//! Round protocol over framed messages, with an in-process channel bus and a
//! TCP transport.
//!
//! A client first registers by sending an `Update` for round 0 with zero
//! deltas. Each round the server sends a `Broadcast`, every client answers
//! with an `Update`, and the server replies `Ack` (commit) or `Abort`
//! (discard) to all clients. Closing the connection ends the session.

use std::io::{self, Read};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};

use crate::client::{client_step, ClientState, SiteFactor};
use crate::error::{FedGviError, Result};
use crate::server::{check_convergence, ClientUpdate, ServerState};
use crate::wire::{decode, read_frame, write_frame, RoundMessage};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

pub enum Received {
    Message(RoundMessage),
    Closed,
    TimedOut,
}

pub trait Endpoint: Send {
    fn send(&mut self, msg: &RoundMessage) -> Result<()>;
    /// Waits for the next message; `None` waits indefinitely.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Received>;
}

/// One side of an in-process link. Frames travel encoded, as on a socket.
pub struct ChannelEndpoint {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn channel_pair() -> (ChannelEndpoint, ChannelEndpoint) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        ChannelEndpoint { tx: a_tx, rx: a_rx },
        ChannelEndpoint { tx: b_tx, rx: b_rx },
    )
}

impl Endpoint for ChannelEndpoint {
    fn send(&mut self, msg: &RoundMessage) -> Result<()> {
        let frame = crate::wire::encode(msg)?;
        self.tx
            .send(frame)
            .map_err(|_| FedGviError::Io(io::Error::new(io::ErrorKind::BrokenPipe, "peer closed")))
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Received> {
        let frame = match timeout {
            Some(t) => match self.rx.recv_timeout(t) {
                Ok(f) => f,
                Err(RecvTimeoutError::Timeout) => return Ok(Received::TimedOut),
                Err(RecvTimeoutError::Disconnected) => return Ok(Received::Closed),
            },
            None => match self.rx.recv() {
                Ok(f) => f,
                Err(_) => return Ok(Received::Closed),
            },
        };
        Ok(Received::Message(decode(&frame)?))
    }
}

pub struct TcpEndpoint {
    stream: TcpStream,
}

impl TcpEndpoint {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(TcpEndpoint { stream })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        TcpEndpoint::new(TcpStream::connect(addr)?)
    }
}

/// Reads into `buf` while remembering whether anything arrived, so a timeout
/// before the first byte is distinguishable from one mid-frame.
struct Probe<'a> {
    stream: &'a mut TcpStream,
    started: bool,
}

impl Read for Probe<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.stream.read(buf)?;
        if n > 0 && !self.started {
            self.started = true;
            // once a frame has begun, wait for the rest of it
            self.stream.set_read_timeout(None)?;
        }
        Ok(n)
    }
}

impl Endpoint for TcpEndpoint {
    fn send(&mut self, msg: &RoundMessage) -> Result<()> {
        write_frame(&mut self.stream, msg)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Received> {
        let timeout = timeout.map(|t| t.max(Duration::from_millis(1)));
        self.stream.set_read_timeout(timeout)?;
        let mut probe = Probe {
            stream: &mut self.stream,
            started: false,
        };
        match read_frame(&mut probe) {
            Ok(Some(m)) => Ok(Received::Message(m)),
            Ok(None) => Ok(Received::Closed),
            Err(FedGviError::Io(e))
                if !probe.started
                    && matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) =>
            {
                Ok(Received::TimedOut)
            }
            Err(FedGviError::Io(e))
                if matches!(
                    e.kind(),
                    io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted
                ) =>
            {
                Ok(Received::Closed)
            }
            Err(e) => Err(e),
        }
    }
}

/// Client side of the protocol. Returns the final state when the server
/// closes the connection.
pub fn run_client<E: Endpoint + ?Sized>(endpoint: &mut E, mut state: ClientState) -> Result<ClientState> {
    let dim = state.site.dim();
    let zero = SiteFactor::zero(dim, state.site.delta_precision.is_diagonal());
    endpoint.send(&RoundMessage::update(state.client_id, 0, &zero))?;
    loop {
        let msg = match endpoint.recv(None)? {
            Received::Message(m) => m,
            Received::Closed => return Ok(state),
            Received::TimedOut => continue,
        };
        match msg {
            RoundMessage::Broadcast { round, .. } => {
                let q_s = msg.posterior()?;
                let step = match client_step(&q_s, &state, round) {
                    Ok(s) => s,
                    Err(e) => {
                        endpoint.send(&RoundMessage::abort(format!(
                            "client {}: {e}",
                            state.client_id
                        )))?;
                        return Err(e);
                    }
                };
                endpoint.send(&step.message())?;
                match endpoint.recv(None)? {
                    Received::Message(RoundMessage::Ack) => state = step.state,
                    Received::Message(RoundMessage::Abort { reason }) => {
                        debug!("client {}: round {round} aborted: {reason}", state.client_id);
                    }
                    Received::Closed => return Ok(state),
                    Received::Message(other) => {
                        return Err(FedGviError::Protocol(format!(
                            "expected Ack or Abort, got {other:?}"
                        )))
                    }
                    Received::TimedOut => unreachable!("no timeout requested"),
                }
            }
            RoundMessage::Abort { reason } => {
                debug!("client {}: abort outside a round: {reason}", state.client_id);
            }
            other => {
                return Err(FedGviError::Protocol(format!(
                    "client received unexpected {other:?}"
                )))
            }
        }
    }
}

/// Server side of the protocol over a set of registered endpoints.
pub struct Coordinator {
    pub server: ServerState,
    endpoints: Vec<(u32, Box<dyn Endpoint>)>,
    pub timeout: Duration,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    pub round: u64,
    pub updates: Vec<ClientUpdate>,
    pub converged: bool,
}

impl Coordinator {
    /// Waits for every endpoint's registration message.
    pub fn register(
        server: ServerState,
        endpoints: Vec<Box<dyn Endpoint>>,
        timeout: Duration,
    ) -> Result<Self> {
        let mut registered: Vec<(u32, Box<dyn Endpoint>)> = Vec::with_capacity(endpoints.len());
        for mut ep in endpoints {
            match ep.recv(Some(timeout))? {
                Received::Message(RoundMessage::Update {
                    client_id,
                    round: 0,
                    delta_shift,
                    ..
                }) => {
                    if delta_shift.len() != server.prior.dim() {
                        return Err(FedGviError::DimensionMismatch {
                            expected: server.prior.dim(),
                            found: delta_shift.len(),
                        });
                    }
                    if registered.iter().any(|(id, _)| *id == client_id) {
                        return Err(FedGviError::DuplicateClient(client_id));
                    }
                    registered.push((client_id, ep));
                }
                Received::Message(other) => {
                    return Err(FedGviError::Protocol(format!(
                        "expected a registration, got {other:?}"
                    )))
                }
                Received::Closed => {
                    return Err(FedGviError::Protocol("client left before registering".into()))
                }
                Received::TimedOut => {
                    return Err(FedGviError::Protocol("registration timed out".into()))
                }
            }
        }
        registered.sort_by_key(|(id, _)| *id);
        Ok(Coordinator {
            server,
            endpoints: registered,
            timeout,
        })
    }

    pub fn client_ids(&self) -> Vec<u32> {
        self.endpoints.iter().map(|(id, _)| *id).collect()
    }

    fn abort_all(&mut self, reason: &str) {
        for (id, ep) in &mut self.endpoints {
            if let Err(e) = ep.send(&RoundMessage::abort(reason)) {
                warn!("could not notify client {id} of the abort: {e}");
            }
        }
    }

    /// Broadcast, collect, aggregate, optimise. On any failure every client
    /// is sent `Abort` and the server state is unchanged.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        if self.endpoints.is_empty() {
            return Ok(RoundReport {
                round: self.server.round,
                updates: Vec::new(),
                converged: true,
            });
        }
        let round = self.server.round + 1;
        let broadcast = RoundMessage::broadcast(round, &self.server.posterior);
        for (_, ep) in &mut self.endpoints {
            ep.send(&broadcast)?;
        }
        let deadline = Instant::now() + self.timeout;
        let mut updates = Vec::with_capacity(self.endpoints.len());
        let mut failure = None;
        for (id, ep) in &mut self.endpoints {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let got = match ep.recv(Some(remaining)) {
                Ok(r) => r,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            };
            let err = match got {
                Received::Message(msg @ RoundMessage::Update { .. }) => {
                    let RoundMessage::Update { client_id, round: r, .. } = msg else {
                        unreachable!()
                    };
                    if client_id != *id {
                        Some(FedGviError::Protocol(format!(
                            "update from client {client_id} on the connection of client {id}"
                        )))
                    } else if r != round {
                        Some(FedGviError::RoundMismatch {
                            expected: round,
                            found: r,
                        })
                    } else {
                        match msg.site_delta() {
                            Ok(delta) => {
                                updates.push(ClientUpdate {
                                    client_id,
                                    round,
                                    delta,
                                });
                                None
                            }
                            Err(e) => Some(e),
                        }
                    }
                }
                Received::Message(RoundMessage::Abort { reason }) => {
                    Some(FedGviError::Aborted(reason))
                }
                Received::Message(other) => Some(FedGviError::Protocol(format!(
                    "expected an Update, got {other:?}"
                ))),
                Received::Closed => Some(FedGviError::Protocol(format!(
                    "client {id} disconnected mid-round"
                ))),
                Received::TimedOut => Some(FedGviError::Timeout { client_id: *id }),
            };
            if let Some(e) = err {
                failure = Some(e);
                break;
            }
        }
        if let Some(e) = failure {
            self.abort_all(&e.to_string());
            return Err(e);
        }
        match self.server.step(&updates) {
            Ok(next) => {
                for (_, ep) in &mut self.endpoints {
                    ep.send(&RoundMessage::Ack)?;
                }
                let converged = check_convergence(&updates, self.server.config.tolerance);
                self.server = next;
                Ok(RoundReport {
                    round,
                    updates,
                    converged,
                })
            }
            Err(e) => {
                self.abort_all(&e.to_string());
                Err(e)
            }
        }
    }

    /// Runs rounds until convergence or `max_rounds`, then closes every
    /// connection and returns the final server state.
    pub fn run(mut self, max_rounds: u64) -> Result<ServerState> {
        for _ in 0..max_rounds {
            if self.run_round()?.converged {
                break;
            }
        }
        Ok(self.server)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    /// TCP on localhost; port 0 picks a free port.
    Socket { port: u16 },
}

impl std::str::FromStr for TransportKind {
    type Err = FedGviError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" | "in-process" => Ok(TransportKind::InProcess),
            _ => match s.strip_prefix("socket") {
                Some("") => Ok(TransportKind::Socket { port: 0 }),
                Some(rest) => rest
                    .strip_prefix(':')
                    .and_then(|p| p.parse().ok())
                    .map(|port| TransportKind::Socket { port })
                    .ok_or_else(|| FedGviError::Config(format!("bad transport {s:?}"))),
                None => Err(FedGviError::Config(format!(
                    "unknown transport {s:?} (expected inproc or socket:PORT)"
                ))),
            },
        }
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportKind::InProcess => write!(f, "inproc"),
            TransportKind::Socket { port } => write!(f, "socket:{port}"),
        }
    }
}

/// Final server and client states of a transported run.
pub struct TransportRun {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

/// Runs a whole federation over the chosen transport with every client on
/// its own thread.
pub fn run_federation(
    kind: &TransportKind,
    server: ServerState,
    clients: Vec<ClientState>,
    max_rounds: u64,
    timeout: Duration,
) -> Result<TransportRun> {
    let mut server_ends: Vec<Box<dyn Endpoint>> = Vec::new();
    let mut handles = Vec::new();
    match kind {
        TransportKind::InProcess => {
            for c in clients {
                let (s_end, mut c_end) = channel_pair();
                server_ends.push(Box::new(s_end));
                handles.push(thread::spawn(move || run_client(&mut c_end, c)));
            }
        }
        TransportKind::Socket { port } => {
            let listener = TcpListener::bind(("127.0.0.1", *port))?;
            let addr = listener.local_addr()?;
            for c in clients {
                handles.push(thread::spawn(move || {
                    let mut ep = TcpEndpoint::connect(addr)?;
                    run_client(&mut ep, c)
                }));
            }
            for _ in 0..handles.len() {
                let (stream, _) = listener.accept()?;
                server_ends.push(Box::new(TcpEndpoint::new(stream)?));
            }
        }
    }
    let result = Coordinator::register(server, server_ends, timeout).and_then(|c| c.run(max_rounds));
    // the coordinator is dropped by now, closing every link
    let mut finals = Vec::with_capacity(handles.len());
    let mut client_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(state)) => finals.push(state),
            Ok(Err(e)) => client_err = client_err.or(Some(e)),
            Err(_) => {
                client_err = client_err.or(Some(FedGviError::Protocol("client thread panicked".into())))
            }
        }
    }
    let server = result?;
    if let Some(e) = client_err {
        return Err(e);
    }
    finals.sort_by_key(|c| c.client_id);
    Ok(TransportRun {
        server,
        clients: finals,
    })
}

/// Accepts `clients` TCP connections on `listener` and coordinates a run.
pub fn serve(
    listener: &TcpListener,
    server: ServerState,
    clients: usize,
    max_rounds: u64,
    timeout: Duration,
) -> Result<ServerState> {
    let mut ends: Vec<Box<dyn Endpoint>> = Vec::with_capacity(clients);
    for _ in 0..clients {
        let (stream, peer) = listener.accept()?;
        debug!("client connected from {peer}");
        ends.push(Box::new(TcpEndpoint::new(stream)?));
    }
    Coordinator::register(server, ends, timeout)?.run(max_rounds)
}
