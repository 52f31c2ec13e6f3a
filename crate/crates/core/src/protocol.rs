// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-delimited JSON protocol between the knockout drivers and a model
//! server. See `docs/protocol.md` for the grammar.
//!
//! Every message is one line: `{"version":1,"type":…,"payload":{…}}`. The
//! server greets each connection with `hello`, then answers each `eval` with
//! exactly one `result` or `error`. Unknown payload fields are ignored.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, TaloError};
use crate::harness::{score_outcomes, ItemOutcome, McqItem, Score, TaskSuite};
use crate::intervention::{apply_many, InterventionSpec};
use crate::model::LayerStackModel;
use crate::oracle::EvalOracle;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub layers: usize,
    pub model: String,
}

/// An item sent inline with its answer key, or referenced by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemRef {
    Inline(McqItem),
    Id { id: String },
}

impl ItemRef {
    pub fn id(&self) -> &str {
        match self {
            Self::Inline(item) => &item.id,
            Self::Id { id } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub request_id: u64,
    /// Intervention encodings, `kind:target:layer[:seed]`.
    #[serde(default)]
    pub interventions: Vec<String>,
    pub items: Vec<ItemRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub request_id: u64,
    pub per_item: Vec<ItemOutcome>,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello(Hello),
    Eval(EvalRequest),
    Result(EvalResponse),
    Error(ErrorReply),
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    version: u32,
    #[serde(rename = "type")]
    kind: String,
    payload: Value,
}

fn json_offset(err: &serde_json::Error) -> usize {
    if err.line() <= 1 {
        err.column().saturating_sub(1)
    } else {
        0
    }
}

/// One framed message, newline included.
pub fn encode_message(message: &Message) -> Vec<u8> {
    let (kind, payload) = match message {
        Message::Hello(p) => ("hello", serde_json::to_value(p)),
        Message::Eval(p) => ("eval", serde_json::to_value(p)),
        Message::Result(p) => ("result", serde_json::to_value(p)),
        Message::Error(p) => ("error", serde_json::to_value(p)),
    };
    let envelope = Envelope {
        version: PROTOCOL_VERSION,
        kind: kind.to_string(),
        payload: payload.expect("protocol payloads serialize"),
    };
    let mut bytes = serde_json::to_vec(&envelope).expect("envelope serializes");
    bytes.push(b'\n');
    bytes
}

pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    let trimmed = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let trimmed = trimmed.strip_suffix(b"\r").unwrap_or(trimmed);
    if trimmed.contains(&b'\n') {
        let at = trimmed.iter().position(|b| *b == b'\n').unwrap_or(0);
        return Err(TaloError::protocol(at, "embedded newline in message"));
    }
    let envelope: Envelope = serde_json::from_slice(trimmed).map_err(|e| {
        let offset = if e.is_eof() { trimmed.len() } else { json_offset(&e) };
        TaloError::protocol(offset, e.to_string())
    })?;
    if envelope.version != PROTOCOL_VERSION {
        return Err(TaloError::protocol(
            0,
            format!("unsupported protocol version {}", envelope.version),
        ));
    }
    fn payload<T: serde::de::DeserializeOwned>(v: Value) -> Result<T> {
        serde_json::from_value(v).map_err(|e| TaloError::protocol(0, format!("bad payload: {e}")))
    }
    match envelope.kind.as_str() {
        "hello" => Ok(Message::Hello(payload(envelope.payload)?)),
        "eval" => Ok(Message::Eval(payload(envelope.payload)?)),
        "result" => Ok(Message::Result(payload(envelope.payload)?)),
        "error" => Ok(Message::Error(payload(envelope.payload)?)),
        other => Err(TaloError::protocol(0, format!("unknown message type `{other}`"))),
    }
}

pub fn encode_request(request: &EvalRequest) -> Vec<u8> {
    encode_message(&Message::Eval(request.clone()))
}

pub fn decode_response(bytes: &[u8]) -> Result<EvalResponse> {
    match decode_message(bytes)? {
        Message::Result(r) => Ok(r),
        Message::Error(e) => Err(TaloError::Remote(e.message)),
        other => Err(TaloError::protocol(0, format!("expected a result, got {other:?}"))),
    }
}

/// Where a server listens or a client connects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Standard input/output of the current process (server side).
    Stdio,
    /// `tcp://host:port`.
    Tcp(String),
    /// `exec:<command line>`: spawn a server and talk over its stdio.
    Exec(String),
}

impl FromStr for Endpoint {
    type Err = TaloError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "stdio" || s == "-" {
            Ok(Self::Stdio)
        } else if let Some(addr) = s.strip_prefix("tcp://") {
            Ok(Self::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("exec:") {
            if cmd.trim().is_empty() {
                return Err(TaloError::InvalidInput("empty exec command".into()));
            }
            Ok(Self::Exec(cmd.to_string()))
        } else {
            Err(TaloError::InvalidInput(format!(
                "endpoint `{s}` is not stdio, tcp://host:port or exec:<command>"
            )))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Stdio => f.write_str("stdio"),
            Self::Tcp(addr) => write!(f, "tcp://{addr}"),
            Self::Exec(cmd) => write!(f, "exec:{cmd}"),
        }
    }
}

/// Request handler over an immutable built-in model.
#[derive(Debug)]
pub struct BuiltinService {
    model: LayerStackModel,
    items: HashMap<String, McqItem>,
    identity: String,
    // A private pool keeps an in-process server responsive while client
    // threads of the global pool block waiting for its replies.
    pool: Option<rayon::ThreadPool>,
}

impl BuiltinService {
    pub fn new(model: LayerStackModel, suites: &[TaskSuite]) -> Self {
        let c = model.config;
        let identity = format!(
            "builtin:L={},dim={},heads={},mlp={},vocab={},seed={}",
            c.num_layers, c.model_dim, c.num_heads, c.mlp_dim, c.vocab_size, c.seed
        );
        let items = suites
            .iter()
            .flat_map(|s| s.items.iter().map(|i| (i.id.clone(), i.clone())))
            .collect();
        Self {
            model,
            items,
            identity,
            pool: rayon::ThreadPoolBuilder::new().build().ok(),
        }
    }

    pub fn hello(&self) -> Hello {
        Hello {
            layers: self.model.num_layers(),
            model: self.identity.clone(),
        }
    }

    /// Answers one eval request.
    pub fn handle(&self, request: &EvalRequest) -> Result<EvalResponse> {
        if request.items.is_empty() {
            return Err(TaloError::InvalidInput("request has no items".into()));
        }
        let specs = request
            .interventions
            .iter()
            .map(|raw| raw.parse::<InterventionSpec>())
            .collect::<Result<Vec<_>>>()?;
        let items = request
            .items
            .iter()
            .map(|r| match r {
                ItemRef::Inline(item) => item.validate().map(|_| item.clone()),
                ItemRef::Id { id } => self
                    .items
                    .get(id)
                    .cloned()
                    .ok_or_else(|| TaloError::InvalidInput(format!("unknown item id `{id}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let view;
        let model = if specs.is_empty() {
            &self.model
        } else {
            view = apply_many(&self.model, &specs)?;
            &view
        };
        let evaluate = || crate::harness::evaluate_items(|item| model.predict_choice(item), &items);
        let per_item = match &self.pool {
            Some(pool) => pool.install(evaluate)?,
            None => evaluate()?,
        };
        let score = score_outcomes(&per_item)?;
        Ok(EvalResponse {
            request_id: request.request_id,
            per_item,
            correct: score.correct,
            total: score.total,
        })
    }

    fn reply(&self, line: &[u8], seen: &mut HashSet<u64>) -> Message {
        let request = match decode_message(line) {
            Ok(Message::Eval(req)) => req,
            Ok(other) => {
                return Message::Error(ErrorReply {
                    request_id: None,
                    message: format!("expected an eval message, got {other:?}"),
                })
            }
            Err(e) => {
                return Message::Error(ErrorReply {
                    request_id: None,
                    message: e.to_string(),
                })
            }
        };
        if !seen.insert(request.request_id) {
            return Message::Error(ErrorReply {
                request_id: Some(request.request_id),
                message: format!("duplicate request_id {}", request.request_id),
            });
        }
        match self.handle(&request) {
            Ok(resp) => Message::Result(resp),
            Err(e) => Message::Error(ErrorReply {
                request_id: Some(request.request_id),
                message: e.to_string(),
            }),
        }
    }
}

/// Serves one connection until the peer closes it.
pub fn serve_connection<R: BufRead, W: Write>(service: &BuiltinService, mut reader: R, mut writer: W) -> Result<()> {
    writer.write_all(&encode_message(&Message::Hello(service.hello())))?;
    writer.flush()?;
    let mut seen = HashSet::new();
    let mut line = Vec::new();
    loop {
        line.clear();
        if reader.read_until(b'\n', &mut line)? == 0 {
            return Ok(());
        }
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let reply = service.reply(&line, &mut seen);
        writer.write_all(&encode_message(&reply))?;
        writer.flush()?;
    }
}

/// TCP server over a built-in model; one thread per connection.
pub struct TcpServer {
    listener: TcpListener,
    service: Arc<BuiltinService>,
}

impl TcpServer {
    pub fn bind(service: BuiltinService, addr: &str) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Ok(Self {
            listener,
            service: Arc::new(service),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn endpoint(&self) -> Result<Endpoint> {
        Ok(Endpoint::Tcp(self.local_addr()?.to_string()))
    }

    /// Accepts connections forever.
    pub fn run(self) -> Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let service = Arc::clone(&self.service);
            std::thread::spawn(move || {
                let reader = match stream.try_clone() {
                    Ok(s) => BufReader::new(s),
                    Err(_) => return,
                };
                let _ = serve_connection(&service, reader, BufWriter::new(stream));
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> JoinHandle<Result<()>> {
        std::thread::spawn(move || self.run())
    }
}

/// Runs the built-in model server on `endpoint` until it shuts down.
pub fn serve_builtin(model: LayerStackModel, suites: &[TaskSuite], endpoint: &Endpoint) -> Result<()> {
    let service = BuiltinService::new(model, suites);
    match endpoint {
        Endpoint::Stdio => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            serve_connection(&service, stdin.lock(), stdout.lock())
        }
        Endpoint::Tcp(addr) => TcpServer::bind(service, addr)?.run(),
        Endpoint::Exec(_) => Err(TaloError::InvalidInput(
            "a server cannot listen on an exec endpoint".into(),
        )),
    }
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
    child: Option<Child>,
}

impl Connection {
    fn read_message(&mut self) -> Result<Message> {
        let mut line = Vec::new();
        if self.reader.read_until(b'\n', &mut line)? == 0 {
            return Err(TaloError::Remote("server closed the connection".into()));
        }
        decode_message(&line)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // closing stdin ends the server's read loop
            self.writer = Box::new(std::io::sink());
            let _ = child.wait();
        }
    }
}

/// How a [`RemoteOracle`] ships items to the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ItemMode {
    /// Full items with answer keys.
    #[default]
    Inline,
    /// Item ids only; the server must hold the suite.
    ById,
}

/// Client side of the protocol, usable anywhere an [`EvalOracle`] is.
pub struct RemoteOracle {
    conn: Mutex<Connection>,
    hello: Hello,
    mode: ItemMode,
}

impl fmt::Debug for RemoteOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteOracle")
            .field("hello", &self.hello)
            .field("mode", &self.mode)
            .finish()
    }
}

impl RemoteOracle {
    pub fn connect(endpoint: &Endpoint) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let addr = addr
                    .to_socket_addrs()?
                    .next()
                    .ok_or_else(|| TaloError::InvalidInput(format!("cannot resolve `{addr}`")))?;
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                let reader = BufReader::new(stream.try_clone()?);
                Self::handshake(Box::new(reader), Box::new(stream), None)
            }
            Endpoint::Exec(cmd) => {
                let mut parts = cmd.split_whitespace();
                let program = parts
                    .next()
                    .ok_or_else(|| TaloError::InvalidInput("empty exec command".into()))?;
                let mut child = Command::new(program)
                    .args(parts)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Self::handshake(Box::new(BufReader::new(stdout)), Box::new(stdin), Some(child))
            }
            Endpoint::Stdio => Err(TaloError::InvalidInput(
                "a client cannot connect to stdio; use exec:<command>".into(),
            )),
        }
    }

    /// Speaks the protocol over arbitrary streams; reads the greeting first.
    pub fn from_streams(reader: Box<dyn BufRead + Send>, writer: Box<dyn Write + Send>) -> Result<Self> {
        Self::handshake(reader, writer, None)
    }

    fn handshake(reader: Box<dyn BufRead + Send>, writer: Box<dyn Write + Send>, child: Option<Child>) -> Result<Self> {
        let mut conn = Connection {
            reader,
            writer,
            next_id: 1,
            child,
        };
        let hello = match conn.read_message()? {
            Message::Hello(h) => h,
            other => {
                return Err(TaloError::protocol(0, format!("expected hello, got {other:?}")));
            }
        };
        Ok(Self {
            conn: Mutex::new(conn),
            hello,
            mode: ItemMode::Inline,
        })
    }

    pub fn with_item_mode(mut self, mode: ItemMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }
}

impl EvalOracle for RemoteOracle {
    fn num_layers(&self) -> usize {
        self.hello.layers
    }

    fn evaluate(&self, interventions: &[InterventionSpec], items: &[McqItem]) -> Result<Vec<ItemOutcome>> {
        if items.is_empty() {
            return Err(TaloError::InvalidInput("no items to evaluate".into()));
        }
        let mut conn = self.conn.lock().map_err(|_| TaloError::Remote("connection poisoned".into()))?;
        let request_id = conn.next_id;
        conn.next_id += 1;
        let request = EvalRequest {
            request_id,
            interventions: interventions.iter().map(ToString::to_string).collect(),
            items: items
                .iter()
                .map(|item| match self.mode {
                    ItemMode::Inline => ItemRef::Inline(item.clone()),
                    ItemMode::ById => ItemRef::Id { id: item.id.clone() },
                })
                .collect(),
        };
        conn.writer.write_all(&encode_request(&request))?;
        conn.writer.flush()?;
        let response = match conn.read_message()? {
            Message::Result(r) => r,
            Message::Error(e) => return Err(TaloError::Remote(e.message)),
            other => return Err(TaloError::protocol(0, format!("expected a result, got {other:?}"))),
        };
        drop(conn);
        check_response(&request, &response, items)?;
        Ok(response.per_item)
    }
}

fn check_response(request: &EvalRequest, response: &EvalResponse, items: &[McqItem]) -> Result<()> {
    if response.request_id != request.request_id {
        return Err(TaloError::protocol(
            0,
            format!(
                "response id {} does not match request id {}",
                response.request_id, request.request_id
            ),
        ));
    }
    if response.per_item.len() != items.len() {
        return Err(TaloError::protocol(
            0,
            format!("{} outcomes for {} items", response.per_item.len(), items.len()),
        ));
    }
    for (outcome, item) in response.per_item.iter().zip(items) {
        if outcome.id != item.id {
            return Err(TaloError::protocol(
                0,
                format!("outcome for `{}` where `{}` was requested", outcome.id, item.id),
            ));
        }
        if outcome.correct != (outcome.predicted == item.answer_index) {
            return Err(TaloError::Remote(format!(
                "server and client disagree on correctness of `{}`",
                item.id
            )));
        }
    }
    let correct = response.per_item.iter().filter(|o| o.correct).count();
    if correct != response.correct || response.total != items.len() {
        return Err(TaloError::protocol(0, "count fields disagree with per-item outcomes"));
    }
    Ok(())
}

/// One-shot evaluation against `endpoint`.
pub fn evaluate_remote(
    endpoint: &Endpoint,
    interventions: &[InterventionSpec],
    items: &[McqItem],
) -> Result<(Score, Vec<ItemOutcome>)> {
    if items.is_empty() {
        return Err(TaloError::InvalidInput("no items to evaluate".into()));
    }
    let oracle = RemoteOracle::connect(endpoint)?;
    let outcomes = oracle.evaluate(interventions, items)?;
    Ok((score_outcomes(&outcomes)?, outcomes))
}
