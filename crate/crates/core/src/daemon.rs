//! TCP front end to the watchdog.
//!
//! Newline-delimited ASCII, one reply line per request line:
//!
//! ```text
//! SESSION <card-id> <program-id> [<policy>]   -> OK
//! APDU <hex>                                  -> OK <response hex> | BLOCKED <reason>
//! RESET                                       -> OK
//! CLOSE                                       -> OK
//! anything malformed                          -> ERR <code> <token>
//! ```
//!
//! One session per connection. `APDU` accepts the same placeholders as
//! sequence files; `${PIN}` and `${PAYLOAD:n}` bind to the program's card
//! profile and `${RN}` to the card's latest challenge.

use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;
use tokio::sync::{watch, Semaphore};
use tokio::task::JoinSet;

use crate::catalog::{Catalog, CatalogError};
use crate::doc::{Document, SyntaxError};
use crate::hex::format_hex_compact;
use crate::template::{ApduTemplate, TemplateError};
use crate::watchdog::{Policy, Session, Watchdog, WatchdogError};

/// Longest accepted request line, excluding the newline.
pub const MAX_LINE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DaemonConfig {
    pub listen: String,
    pub port: u16,
    pub profiles_dir: Option<PathBuf>,
    pub programs_dir: Option<PathBuf>,
    pub policy: Policy,
    pub max_connections: usize,
    pub seed: u64,
    /// `(card id, profile id)`; empty means one `<profile>-0` per profile.
    pub cards: Vec<(String, String)>,
    pub audit_log: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("config {0}")]
    Config(#[from] SyntaxError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Watchdog(#[from] WatchdogError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl DaemonConfig {
    /// Parses a `[daemon]` document. Relative directories resolve against
    /// `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, SyntaxError> {
        let doc = Document::parse(text)?;
        doc.check_sections(&["daemon"])?;
        let s = doc.single("daemon")?;
        s.check_keys(&["listen", "port", "profiles", "programs", "policy", "max_connections", "seed", "cards", "audit"])?;
        let port_entry = s.require("port")?;
        let port = match port_entry.value.parse::<u16>() {
            Ok(p) if p >= 1 => p,
            _ => return Err(SyntaxError::new(port_entry.line, "port must be in 1..65535")),
        };
        let seed_entry = s.require("seed")?;
        let seed = seed_entry.value.parse().map_err(|_| SyntaxError::new(seed_entry.line, "seed must be an unsigned integer"))?;
        let max_connections = match s.get("max_connections") {
            None => 64,
            Some(e) => match e.value.parse::<usize>() {
                Ok(n) if n >= 1 => n,
                _ => return Err(SyntaxError::new(e.line, "max_connections must be at least 1")),
            },
        };
        let policy = match s.get("policy") {
            None => Policy::Strict,
            Some(e) => e.value.parse().map_err(|m: String| SyntaxError::new(e.line, m))?,
        };
        let mut cards = Vec::new();
        if let Some(e) = s.get("cards") {
            for item in e.value.split(',').map(str::trim).filter(|i| !i.is_empty()) {
                let (card, profile) = item
                    .split_once(':')
                    .filter(|(c, p)| !c.is_empty() && !p.is_empty())
                    .ok_or_else(|| SyntaxError::new(e.line, format!("card {item:?} is not <card-id>:<profile-id>")))?;
                cards.push((card.trim().to_string(), profile.trim().to_string()));
            }
        }
        let path = |key| s.value(key).map(|v| base.join(v));
        Ok(DaemonConfig {
            listen: s.value("listen").unwrap_or("127.0.0.1").to_string(),
            port,
            profiles_dir: path("profiles"),
            programs_dir: path("programs"),
            policy,
            max_connections,
            seed,
            cards,
            audit_log: path("audit"),
        })
    }

    pub fn load(path: &Path) -> Result<Self, DaemonError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DaemonError::Io { path: path.display().to_string(), source })?;
        Ok(Self::parse(&text, path.parent().unwrap_or(Path::new(".")))?)
    }

    pub fn address(&self) -> String {
        format!("{}:{}", self.listen, self.port)
    }
}

/// Shared state of a running daemon.
#[derive(Debug)]
pub struct Daemon {
    watchdog: Watchdog,
    policy: Policy,
    max_connections: usize,
    audit: Option<Mutex<File>>,
}

impl Daemon {
    /// Built-in catalog, extended (and overridden) by the configured
    /// directories.
    pub fn from_config(config: &DaemonConfig) -> Result<Self, DaemonError> {
        let mut catalog = Catalog::builtin();
        if let Some(dir) = &config.profiles_dir {
            catalog.load_profiles_dir(dir)?;
        }
        if let Some(dir) = &config.programs_dir {
            catalog.load_programs_dir(dir)?;
        }
        let cards = if config.cards.is_empty() {
            catalog.profiles().map(|p| (format!("{}-0", p.id), p.id.clone())).collect()
        } else {
            config.cards.clone()
        };
        let mut watchdog = Watchdog::new(Arc::new(catalog));
        for (card, profile) in &cards {
            watchdog.add_card(card, profile, config.seed)?;
        }
        let audit = match &config.audit_log {
            None => None,
            Some(path) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|source| DaemonError::Io { path: path.display().to_string(), source })?,
            )),
        };
        Ok(Daemon { watchdog, policy: config.policy, max_connections: config.max_connections, audit })
    }

    pub fn watchdog(&self) -> &Watchdog {
        &self.watchdog
    }

    fn audit(&self, line: String) {
        if let Some(file) = &self.audit {
            let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
            // The audit file is best effort; the card transcript is authoritative.
            let _ = writeln!(f, "{line}");
        }
    }
}

/// Binds the configured address.
pub async fn bind(config: &DaemonConfig) -> Result<TcpListener, DaemonError> {
    let addr = config.address();
    TcpListener::bind(&addr).await.map_err(|source| DaemonError::Bind { addr, source })
}

/// Accepts connections until `shutdown` resolves, then lets every
/// connection finish the request it is handling and returns.
pub async fn serve(listener: TcpListener, daemon: Arc<Daemon>, shutdown: impl Future<Output = ()>) {
    let permits = Arc::new(Semaphore::new(daemon.max_connections));
    let (stop_tx, stop_rx) = watch::channel(false);
    let mut connections = JoinSet::new();
    tokio::pin!(shutdown);
    loop {
        let permit = tokio::select! {
            _ = &mut shutdown => break,
            p = permits.clone().acquire_owned() => p.expect("semaphore is never closed"),
        };
        let (stream, peer) = tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => match accepted {
                Ok(a) => a,
                Err(_) => continue,
            },
        };
        // Replies are one small write per request.
        let _ = stream.set_nodelay(true);
        let daemon = daemon.clone();
        let stop = stop_rx.clone();
        connections.spawn(async move {
            let (r, w) = stream.into_split();
            handle_connection(r, w, daemon, peer, stop).await;
            drop(permit);
        });
        // Reap finished connections so the set does not grow without bound.
        while connections.try_join_next().is_some() {}
    }
    let _ = stop_tx.send(true);
    while connections.join_next().await.is_some() {}
}

enum Line {
    Text(Vec<u8>),
    TooLong,
    Eof,
}

async fn read_line<R: AsyncRead + Unpin>(reader: &mut BufReader<R>) -> std::io::Result<Line> {
    let mut buf = Vec::new();
    let mut too_long = false;
    loop {
        let chunk = reader.fill_buf().await?;
        if chunk.is_empty() {
            return Ok(match (too_long, buf.is_empty()) {
                (true, _) => Line::TooLong,
                (false, true) => Line::Eof,
                (false, false) => Line::Text(buf),
            });
        }
        let (take, done) = match chunk.iter().position(|&b| b == b'\n') {
            Some(i) => (i + 1, true),
            None => (chunk.len(), false),
        };
        if !too_long {
            buf.extend_from_slice(&chunk[..take]);
            if buf.len() > MAX_LINE + 2 {
                too_long = true;
                buf.clear();
            }
        }
        reader.consume(take);
        if done {
            return Ok(if too_long { Line::TooLong } else { Line::Text(buf) });
        }
    }
}

/// Serves one client on any byte stream.
pub async fn handle_connection<R, W>(reader: R, mut writer: W, daemon: Arc<Daemon>, peer: SocketAddr, mut stop: watch::Receiver<bool>)
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut reader = BufReader::new(reader);
    let mut conn = Connection { daemon, client: peer.to_string(), session: None };
    loop {
        let line = tokio::select! {
            biased;
            _ = stop.changed() => break,
            line = read_line(&mut reader) => line,
        };
        let reply = match line {
            Ok(Line::Text(bytes)) => conn.handle(&bytes),
            Ok(Line::TooLong) => err(413, "line-too-long"),
            Ok(Line::Eof) | Err(_) => break,
        };
        if writer.write_all(format!("{reply}\n").as_bytes()).await.is_err() {
            break;
        }
    }
    conn.close();
    let _ = writer.shutdown().await;
}

fn err(code: u16, token: &str) -> String {
    format!("ERR {code} {token}")
}

struct Connection {
    daemon: Arc<Daemon>,
    client: String,
    session: Option<Session>,
}

impl Connection {
    fn close(&mut self) {
        if let Some(mut s) = self.session.take() {
            let audit = self.daemon.watchdog.close_session(&mut s);
            self.daemon.audit(serde_json::json!({ "type": "session_closed", "audit": audit.to_json() }).to_string());
        }
    }

    /// Produces the reply to one raw request line.
    fn handle(&mut self, raw: &[u8]) -> String {
        let raw = raw.strip_suffix(b"\n").unwrap_or(raw);
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let Ok(line) = std::str::from_utf8(raw) else { return err(400, "bad-encoding") };
        if !line.is_ascii() {
            return err(400, "bad-encoding");
        }
        let line = line.trim();
        if line.is_empty() {
            return err(400, "empty");
        }
        let (verb, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let args: Vec<&str> = rest.split_whitespace().collect();
        match verb {
            "SESSION" => self.open(&args),
            "APDU" if rest.trim().is_empty() => err(400, "missing-apdu"),
            "APDU" => self.apdu(rest.trim()),
            "RESET" | "CLOSE" if !args.is_empty() => err(400, "unexpected-argument"),
            "RESET" => match &mut self.session {
                None => err(409, "no-session"),
                Some(s) => match self.daemon.watchdog.reset(s) {
                    Ok(()) => "OK".into(),
                    Err(_) => err(409, "session-closed"),
                },
            },
            "CLOSE" if self.session.is_none() => err(409, "no-session"),
            "CLOSE" => {
                self.close();
                "OK".into()
            }
            _ => err(400, "unknown-command"),
        }
    }

    fn open(&mut self, args: &[&str]) -> String {
        if self.session.is_some() {
            return err(409, "session-open");
        }
        let (card, program, policy) = match args {
            [card, program] => (card, program, Ok(self.daemon.policy)),
            [card, program, policy] => (card, program, policy.parse::<Policy>()),
            _ => return err(400, "bad-arguments"),
        };
        let Ok(policy) = policy else { return err(400, "bad-policy") };
        match self.daemon.watchdog.open_session(&self.client, card, program, policy, false) {
            Ok(s) => {
                self.session = Some(s);
                "OK".into()
            }
            Err(WatchdogError::UnknownCard(_)) => err(404, "unknown-card"),
            Err(WatchdogError::UnknownProgram(_)) => err(404, "unknown-program"),
            Err(WatchdogError::ProfileMismatch { .. }) => err(409, "profile-mismatch"),
            Err(_) => err(500, "internal"),
        }
    }

    fn apdu(&mut self, hex: &str) -> String {
        let Some(session) = &mut self.session else { return err(409, "no-session") };
        let template = match ApduTemplate::parse_wire(hex) {
            Ok(t) => t,
            Err(TemplateError::Hex(_)) => return err(400, "bad-hex"),
            Err(_) => return err(400, "bad-apdu"),
        };
        match self.daemon.watchdog.submit_template(session, &template) {
            Ok(outcome) => {
                if let Some(record) = session.log().last() {
                    self.daemon.audit(record.to_json().to_string());
                }
                if outcome.decision.forwarded() {
                    format!("OK {}", format_hex_compact(&outcome.response.to_bytes()))
                } else {
                    format!("BLOCKED {}", outcome.decision.reason)
                }
            }
            Err(WatchdogError::Template(TemplateError::MissingBinding(_))) => err(422, "unbound-placeholder"),
            Err(WatchdogError::Template(_)) => err(400, "bad-apdu"),
            Err(_) => err(409, "session-closed"),
        }
    }
}
