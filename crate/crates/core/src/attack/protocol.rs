//! Line-based oracle wire protocol.
//!
//! UTF-8 lines over the stdio of a spawned process or a TCP stream:
//!
//! ```text
//! client: HELLO <channels> <block_size>
//! server: READY                 | ERR <message>
//! client: EVAL <hex payload>    (packed MSB-first, as in the key file)
//! server: ACC <decimal in [0,1], at most 6 fraction digits> | ERR <message>
//! ```

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use super::oracle::{AccuracySource, Oracle, OracleError};
use crate::key::Key;

/// Per-query timeout. Each query may stand for a full test-set evaluation.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

const MAX_FRACTION_DIGITS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Shell command whose stdin/stdout speak the protocol.
    Exec(String),
    /// `host:port` of a listening server.
    Tcp(String),
}

impl Endpoint {
    /// Parses `exec <command>` or `tcp <host:port>`.
    pub fn parse(text: &str) -> Result<Self, OracleError> {
        let text = text.trim();
        let (kind, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
        let rest = rest.trim();
        if rest.is_empty() {
            return Err(OracleError::Parameter(format!("endpoint {text:?} has no target")));
        }
        match kind {
            "exec" => Ok(Endpoint::Exec(rest.to_string())),
            "tcp" => Ok(Endpoint::Tcp(rest.to_string())),
            _ => Err(OracleError::Parameter(format!("unknown endpoint kind {kind:?}"))),
        }
    }
}

pub fn format_hello(channels: usize, block_size: usize) -> String {
    format!("HELLO {channels} {block_size}\n")
}

pub fn format_eval(key: &Key) -> String {
    format!("EVAL {}\n", hex::encode(key.packed_bits()))
}

pub fn format_acc(accuracy: f64) -> String {
    format!("ACC {accuracy:.6}\n")
}

/// Parses a decimal in `[0, 1]` with at most six fraction digits.
pub fn parse_accuracy(text: &str) -> Result<f64, OracleError> {
    let bad = || OracleError::Protocol(format!("malformed accuracy {text:?}"));
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    if int.is_empty()
        || !int.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
        || frac.len() > MAX_FRACTION_DIGITS
        || (text.contains('.') && frac.is_empty())
    {
        return Err(bad());
    }
    let value: f64 = text.parse().map_err(|_| bad())?;
    if !(0.0..=1.0).contains(&value) {
        return Err(OracleError::Protocol(format!("accuracy {text} outside [0, 1]")));
    }
    Ok(value)
}

/// Interprets an `ACC`/`ERR` reply line (without the newline).
pub fn parse_reply(line: &str) -> Result<f64, OracleError> {
    if let Some(rest) = line.strip_prefix("ACC ") {
        parse_accuracy(rest)
    } else if let Some(msg) = line.strip_prefix("ERR") {
        Err(OracleError::Remote(msg.trim_start().to_string()))
    } else {
        Err(OracleError::Protocol(format!("unexpected reply {line:?}")))
    }
}

/// Synchronous request/response line channel with a read timeout.
struct LineClient {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    timeout: Duration,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl LineClient {
    fn new(reader: impl Read + Send + 'static, writer: Box<dyn Write + Send>, timeout: Duration) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let mut line = String::new();
                let res = reader.read_line(&mut line);
                let done = !matches!(res, Ok(n) if n > 0);
                if tx.send(res.map(|_| line)).is_err() || done {
                    break;
                }
            }
        });
        Self { writer, lines: rx, timeout, child: None, socket: None }
    }

    fn send(&mut self, line: &str) -> io::Result<()> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()
    }

    /// Next line without its terminator; `None` on end of stream.
    fn recv(&mut self) -> Result<Option<String>, OracleError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) if line.is_empty() => Ok(None),
            Ok(Ok(line)) => {
                let line = line.strip_suffix('\n').unwrap_or(&line);
                Ok(Some(line.strip_suffix('\r').unwrap_or(line).to_string()))
            }
            Ok(Err(e)) => Err(OracleError::Connection(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(OracleError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Ok(None),
        }
    }
}

impl Drop for LineClient {
    fn drop(&mut self) {
        // The reader thread holds its own handle; shut down so the peer sees EOF.
        if let Some(socket) = self.socket.as_ref() {
            let _ = socket.shutdown(Shutdown::Both);
        }
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<LineClient, OracleError> {
    match endpoint {
        Endpoint::Exec(cmd) => {
            let mut child = Command::new("sh")
                .arg("-c")
                .arg(cmd)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| OracleError::Connection(format!("spawn {cmd:?}: {e}")))?;
            let stdin = child.stdin.take().expect("stdin piped");
            let stdout = child.stdout.take().expect("stdout piped");
            let mut client = LineClient::new(stdout, Box::new(stdin), timeout);
            client.child = Some(child);
            Ok(client)
        }
        Endpoint::Tcp(addr) => {
            let addrs: Vec<_> = addr
                .to_socket_addrs()
                .map_err(|e| OracleError::Connection(format!("resolve {addr}: {e}")))?
                .collect();
            let mut last = None;
            for a in addrs {
                match TcpStream::connect_timeout(&a, timeout) {
                    Ok(stream) => {
                        let _ = stream.set_nodelay(true);
                        let clone = |s: &TcpStream| s.try_clone().map_err(|e| OracleError::Connection(e.to_string()));
                        let mut client = LineClient::new(clone(&stream)?, Box::new(clone(&stream)?), timeout);
                        client.socket = Some(stream);
                        return Ok(client);
                    }
                    Err(e) => last = Some(e),
                }
            }
            Err(OracleError::Connection(match last {
                Some(e) => format!("connect {addr}: {e}"),
                None => format!("{addr} resolved to no addresses"),
            }))
        }
    }
}

/// Accuracy source backed by a remote process or server.
pub struct ExternalAccuracy {
    client: LineClient,
    channels: usize,
    block_size: usize,
}

impl ExternalAccuracy {
    /// Connects and completes the handshake.
    pub fn connect(endpoint: &Endpoint, channels: usize, block_size: usize, timeout: Duration) -> Result<Self, OracleError> {
        let mut client = connect(endpoint, timeout)?;
        let closed = |e: io::Error| OracleError::Connection(format!("handshake: {e}"));
        client.send(&format_hello(channels, block_size)).map_err(closed)?;
        match client.recv()? {
            Some(line) if line == "READY" => Ok(Self { client, channels, block_size }),
            Some(line) => match line.strip_prefix("ERR") {
                Some(msg) => Err(OracleError::Connection(format!("handshake refused: {}", msg.trim_start()))),
                None => Err(OracleError::Protocol(format!("expected READY, got {line:?}"))),
            },
            None => Err(OracleError::Connection("endpoint closed before READY".into())),
        }
    }
}

impl AccuracySource for ExternalAccuracy {
    fn shape(&self) -> (usize, usize) {
        (self.channels, self.block_size)
    }

    fn accuracy(&mut self, key: &Key) -> Result<f64, OracleError> {
        self.client
            .send(&format_eval(key))
            .map_err(|e| OracleError::Connection(format!("send: {e}")))?;
        match self.client.recv()? {
            Some(line) => parse_reply(&line),
            None => Err(OracleError::Connection("endpoint closed".into())),
        }
    }
}

pub fn make_external_oracle(
    endpoint: &Endpoint,
    channels: usize,
    block_size: usize,
    budget: Option<usize>,
    timeout: Duration,
) -> Result<Oracle, OracleError> {
    if budget == Some(0) {
        return Err(OracleError::Parameter("budget must be at least 1".into()));
    }
    let source = ExternalAccuracy::connect(endpoint, channels, block_size, timeout)?;
    Oracle::new(Box::new(source), budget)
}

/// Server side of the protocol: answers queries with `score` until the
/// client disconnects.
///
/// `shape`, when given, is the only key shape the server accepts. Malformed
/// requests get an `ERR` line and the session continues.
pub fn serve<R, W, F>(reader: R, mut writer: W, shape: Option<(usize, usize)>, mut score: F) -> io::Result<()>
where
    R: BufRead,
    W: Write,
    F: FnMut(&Key) -> Result<f64, String>,
{
    let mut session: Option<(usize, usize)> = None;
    for line in reader.lines() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        let reply = match line.split_once(' ') {
            Some(("HELLO", args)) => match parse_hello(args) {
                Ok(s) if shape.is_none_or(|want| want == s) => {
                    session = Some(s);
                    "READY\n".to_string()
                }
                Ok((c, m)) => format!("ERR unsupported key shape {c}x{m}x{m}\n"),
                Err(e) => format!("ERR {e}\n"),
            },
            Some(("EVAL", payload)) => match session {
                None => "ERR EVAL before HELLO\n".to_string(),
                Some((c, m)) => match hex::decode(payload.trim())
                    .map_err(|e| e.to_string())
                    .and_then(|bytes| Key::from_packed(c, m, &bytes).map_err(|e| e.to_string()))
                    .and_then(|key| score(&key))
                {
                    Ok(acc) if (0.0..=1.0).contains(&acc) => format_acc(acc),
                    Ok(acc) => format!("ERR accuracy {acc} outside [0, 1]\n"),
                    Err(e) => format!("ERR {e}\n"),
                },
            },
            _ => format!("ERR unknown request {line:?}\n"),
        };
        writer.write_all(reply.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

fn parse_hello(args: &str) -> Result<(usize, usize), String> {
    let mut parts = args.split_whitespace().map(str::parse::<usize>);
    match (parts.next(), parts.next(), parts.next()) {
        (Some(Ok(c)), Some(Ok(m)), None) if c > 0 && m > 0 && c <= 255 && m <= 255 => Ok((c, m)),
        _ => Err(format!("malformed HELLO arguments {args:?}")),
    }
}
