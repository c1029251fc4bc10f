//! Newline-delimited JSON logit protocol.
//!
//! ```text
//! -> {"v":1,"op":"score","tokens":[3,5],"mask_positions":[0],"want_attention":false,"top_k":null}
//! <- {"v":1,"ok":true,"logits":[["0","-1.2345678901234567e-1"],...],"attention":null}
//! -> {"v":1,"op":"meta"}
//! <- {"v":1,"ok":true,"vocab_size":16,"mask_id":0,"stop_ids":[1],"max_positions":128}
//! <- {"v":1,"ok":false,"code":"bad_mask_index","message":"..."}
//! ```
//!
//! Reals travel as decimal strings with 17 significant digits, which
//! round-trips every `f64` exactly. Unknown fields are rejected.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::Serialize;
use serde_json::{Map, Value};

use super::{Backend, BackendMeta, Logits, ScoreRequest, Scored};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u64 = 1;

/// Format a real with 17 significant digits.
pub fn format_decimal(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_decimal(s: &str) -> Option<f64> {
    s.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Score {
        tokens: Vec<u32>,
        mask_positions: Vec<usize>,
        want_attention: bool,
        top_k: Option<usize>,
    },
    Meta,
}

/// A protocol-level rejection: `code` is machine-readable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolError {
    pub code: &'static str,
    pub message: String,
}

impl ProtocolError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        ProtocolError {
            code,
            message: message.into(),
        }
    }
}

fn bad_request(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::new("bad_request", msg)
}

impl Request {
    pub fn to_line(&self) -> String {
        #[derive(Serialize)]
        struct ScoreOut<'a> {
            v: u64,
            op: &'static str,
            tokens: &'a [u32],
            mask_positions: &'a [usize],
            want_attention: bool,
            top_k: Option<usize>,
        }
        #[derive(Serialize)]
        struct MetaOut {
            v: u64,
            op: &'static str,
        }
        match self {
            Request::Score {
                tokens,
                mask_positions,
                want_attention,
                top_k,
            } => serde_json::to_string(&ScoreOut {
                v: PROTOCOL_VERSION,
                op: "score",
                tokens,
                mask_positions,
                want_attention: *want_attention,
                top_k: *top_k,
            }),
            Request::Meta => serde_json::to_string(&MetaOut {
                v: PROTOCOL_VERSION,
                op: "meta",
            }),
        }
        .expect("request serialization is infallible")
    }

    pub fn parse(line: &str) -> std::result::Result<Request, ProtocolError> {
        let value: Value =
            serde_json::from_str(line).map_err(|e| bad_request(format!("invalid JSON: {e}")))?;
        let Value::Object(obj) = value else {
            return Err(bad_request("request must be a JSON object"));
        };
        match obj.get("v") {
            Some(v) if v.as_u64() == Some(PROTOCOL_VERSION) => {}
            Some(v) => {
                return Err(ProtocolError::new(
                    "unsupported_version",
                    format!("unsupported protocol version {v}"),
                ))
            }
            None => return Err(bad_request("missing field \"v\"")),
        }
        let op = obj
            .get("op")
            .and_then(Value::as_str)
            .ok_or_else(|| bad_request("missing or non-string field \"op\""))?;
        match op {
            "score" => {
                reject_unknown(
                    &obj,
                    &["v", "op", "tokens", "mask_positions", "want_attention", "top_k"],
                )?;
                let tokens = int_array(&obj, "tokens")?
                    .ok_or_else(|| bad_request("missing field \"tokens\""))?
                    .into_iter()
                    .map(|t| u32::try_from(t).map_err(|_| bad_request("token id out of range")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let mask_positions = int_array(&obj, "mask_positions")?
                    .unwrap_or_default()
                    .into_iter()
                    .map(|p| usize::try_from(p).map_err(|_| bad_request("mask index out of range")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let want_attention = match obj.get("want_attention") {
                    None | Some(Value::Null) => false,
                    Some(Value::Bool(b)) => *b,
                    Some(_) => return Err(bad_request("\"want_attention\" must be a boolean")),
                };
                let top_k = match obj.get("top_k") {
                    None | Some(Value::Null) => None,
                    Some(v) => Some(
                        v.as_u64()
                            .and_then(|k| usize::try_from(k).ok())
                            .ok_or_else(|| bad_request("\"top_k\" must be a nonnegative integer or null"))?,
                    ),
                };
                Ok(Request::Score {
                    tokens,
                    mask_positions,
                    want_attention,
                    top_k,
                })
            }
            "meta" => {
                reject_unknown(&obj, &["v", "op"])?;
                Ok(Request::Meta)
            }
            other => Err(ProtocolError::new(
                "unknown_op",
                format!("unknown op {other:?}"),
            )),
        }
    }
}

fn reject_unknown(obj: &Map<String, Value>, allowed: &[&str]) -> std::result::Result<(), ProtocolError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(bad_request(format!("unknown field {k:?}"))),
        None => Ok(()),
    }
}

fn int_array(obj: &Map<String, Value>, key: &str) -> std::result::Result<Option<Vec<u64>>, ProtocolError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_u64()
                    .ok_or_else(|| bad_request(format!("\"{key}\" must hold nonnegative integers")))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Some),
        Some(_) => Err(bad_request(format!("\"{key}\" must be an array"))),
    }
}

#[derive(Serialize)]
struct OkScore {
    v: u64,
    ok: bool,
    logits: Vec<(String, String)>,
    attention: Option<Vec<String>>,
}

#[derive(Serialize)]
struct OkMeta<'a> {
    v: u64,
    ok: bool,
    vocab_size: usize,
    mask_id: u32,
    stop_ids: &'a [u32],
    max_positions: usize,
}

#[derive(Serialize)]
struct ErrOut<'a> {
    v: u64,
    ok: bool,
    code: &'a str,
    message: &'a str,
}

pub fn score_response_line(scored: &Scored) -> String {
    let logits = scored
        .logits
        .pairs()
        .into_iter()
        .map(|(id, l)| (id.to_string(), format_decimal(l)))
        .collect();
    let attention = scored
        .attention
        .as_ref()
        .map(|row| row.iter().map(|&a| format_decimal(a)).collect());
    serde_json::to_string(&OkScore {
        v: PROTOCOL_VERSION,
        ok: true,
        logits,
        attention,
    })
    .expect("response serialization is infallible")
}

pub fn meta_response_line(meta: &BackendMeta) -> String {
    serde_json::to_string(&OkMeta {
        v: PROTOCOL_VERSION,
        ok: true,
        vocab_size: meta.vocab_size,
        mask_id: meta.mask_id,
        stop_ids: &meta.stop_ids,
        max_positions: meta.max_positions,
    })
    .expect("response serialization is infallible")
}

pub fn error_response_line(err: &ProtocolError) -> String {
    serde_json::to_string(&ErrOut {
        v: PROTOCOL_VERSION,
        ok: false,
        code: err.code,
        message: &err.message,
    })
    .expect("response serialization is infallible")
}

/// Validate a score request against backend limits, with protocol codes.
fn check_score(
    meta: &BackendMeta,
    tokens: &[u32],
    mask_positions: &[usize],
    top_k: Option<usize>,
) -> std::result::Result<(), ProtocolError> {
    if tokens.is_empty() {
        return Err(ProtocolError::new("empty_context", "tokens must be non-empty"));
    }
    if tokens.len() > meta.max_positions {
        return Err(ProtocolError::new(
            "context_too_long",
            format!(
                "context of {} tokens exceeds capacity {}",
                tokens.len(),
                meta.max_positions
            ),
        ));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= meta.vocab_size) {
        return Err(ProtocolError::new(
            "bad_token",
            format!("token id {t} outside vocabulary of {}", meta.vocab_size),
        ));
    }
    if let Some(p) = mask_positions.iter().find(|&&p| p >= tokens.len()) {
        return Err(ProtocolError::new(
            "bad_mask_index",
            format!("mask index {p} outside context of {} tokens", tokens.len()),
        ));
    }
    if let Some(k) = top_k {
        if k == 0 || k > meta.vocab_size {
            return Err(ProtocolError::new(
                "bad_top_k",
                format!("top_k must lie in 1..={}, got {k}", meta.vocab_size),
            ));
        }
    }
    Ok(())
}

/// Answer one request line. Never fails: every problem becomes an error
/// response.
pub fn handle_line(backend: &dyn Backend, line: &str) -> String {
    let request = match Request::parse(line) {
        Ok(r) => r,
        Err(e) => return error_response_line(&e),
    };
    match request {
        Request::Meta => meta_response_line(backend.meta()),
        Request::Score {
            tokens,
            mask_positions,
            want_attention,
            top_k,
        } => {
            if let Err(e) = check_score(backend.meta(), &tokens, &mask_positions, top_k) {
                return error_response_line(&e);
            }
            let req = ScoreRequest {
                tokens: &tokens,
                mask_positions: &mask_positions,
                want_attention,
                top_k,
            };
            match backend.score(&req) {
                Ok(scored) => score_response_line(&scored),
                Err(e) => error_response_line(&ProtocolError::new("internal", e.to_string())),
            }
        }
    }
}

/// Serve requests from `reader` until EOF, one response line per request line.
pub fn serve_stream<R: BufRead, W: Write>(backend: &dyn Backend, reader: R, mut writer: W) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut response = handle_line(backend, &line);
        response.push('\n');
        writer.write_all(response.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// A running TCP logit server. Dropping the handle stops accepting new
/// connections.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    /// Block until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock accept().
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept_thread.is_some() {
            self.stop_accepting();
        }
    }
}

/// Bind `endpoint` and serve the protocol, one thread per connection.
pub fn serve<A: ToSocketAddrs>(backend: Arc<dyn Backend>, endpoint: A) -> Result<ServerHandle> {
    let listener = TcpListener::bind(endpoint)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let accept_thread = thread::Builder::new()
        .name("logit-server".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                stream.set_nodelay(true).ok();
                let backend = Arc::clone(&backend);
                let _ = thread::Builder::new()
                    .name("logit-conn".into())
                    .spawn(move || {
                        let Ok(read_half) = stream.try_clone() else { return };
                        let _ = serve_stream(backend.as_ref(), BufReader::new(read_half), stream);
                    });
            }
        })
        .map_err(|e| Error::Environment(format!("cannot spawn server thread: {e}")))?;
    Ok(ServerHandle {
        addr,
        stop,
        accept_thread: Some(accept_thread),
    })
}

/// Decode a score response into logits and attention.
pub fn parse_score_response(line: &str, vocab_size: usize, truncated: bool) -> Result<Scored> {
    let raw = || Some(line.to_string());
    let value: Value = serde_json::from_str(line)
        .map_err(|e| Error::transport(format!("invalid JSON response: {e}"), raw()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::transport("response is not an object", raw()))?;
    check_ok(obj, line)?;
    let pairs = obj
        .get("logits")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::transport("response lacks \"logits\"", raw()))?;
    let mut parsed = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let entry = pair.as_array().filter(|a| a.len() == 2);
        let decoded = entry.and_then(|a| {
            let id = a[0].as_str()?.parse::<u32>().ok()?;
            let l = parse_decimal(a[1].as_str()?)?;
            Some((id, l))
        });
        parsed.push(decoded.ok_or_else(|| Error::transport("malformed logit pair", raw()))?);
    }
    let logits = if truncated {
        Logits::TopK(parsed)
    } else {
        let mut dense = vec![f64::NAN; vocab_size];
        let mut seen = vec![false; vocab_size];
        for (id, l) in parsed {
            let slot = id as usize;
            if slot >= vocab_size || seen[slot] {
                return Err(Error::transport(format!("unexpected logit id {id}"), raw()));
            }
            seen[slot] = true;
            dense[slot] = l;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::transport("response does not cover the vocabulary", raw()));
        }
        Logits::Dense(dense)
    };
    let attention = match obj.get("attention") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .map(|v| v.as_str().and_then(parse_decimal))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::transport("malformed attention row", raw()))?,
        ),
        Some(_) => return Err(Error::transport("malformed attention row", raw())),
    };
    Ok(Scored { logits, attention })
}

pub fn parse_meta_response(line: &str) -> Result<BackendMeta> {
    let value: Value = serde_json::from_str(line)
        .map_err(|e| Error::transport(format!("invalid JSON response: {e}"), Some(line.into())))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::transport("response is not an object", Some(line.into())))?;
    check_ok(obj, line)?;
    let mut fields = obj.clone();
    fields.remove("v");
    fields.remove("ok");
    serde_json::from_value(Value::Object(fields))
        .map_err(|e| Error::transport(format!("malformed meta response: {e}"), Some(line.into())))
}

fn check_ok(obj: &Map<String, Value>, line: &str) -> Result<()> {
    match obj.get("ok") {
        Some(Value::Bool(true)) => Ok(()),
        Some(Value::Bool(false)) => Err(Error::Remote {
            code: obj
                .get("code")
                .and_then(Value::as_str)
                .unwrap_or("unknown")
                .to_string(),
            message: obj
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
        }),
        _ => Err(Error::transport("response lacks \"ok\"", Some(line.into()))),
    }
}
