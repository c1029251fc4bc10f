use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::Mutex;

use super::wire::{self, Request};
use super::{Backend, BackendMeta, ScoreRequest, Scored, Vocabulary};
use crate::error::{Error, Result};

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    fn open(addr: SocketAddr) -> Result<Self> {
        let writer = TcpStream::connect(addr)
            .map_err(|e| Error::transport(format!("cannot connect to {addr}: {e}"), None))?;
        writer.set_nodelay(true).ok();
        let reader = BufReader::new(
            writer
                .try_clone()
                .map_err(|e| Error::transport(e.to_string(), None))?,
        );
        Ok(Connection { reader, writer })
    }

    fn round_trip(&mut self, line: &str) -> Result<String> {
        let io = |e: std::io::Error| Error::transport(format!("connection failed: {e}"), None);
        let mut framed = String::with_capacity(line.len() + 1);
        framed.push_str(line);
        framed.push('\n');
        self.writer.write_all(framed.as_bytes()).map_err(io)?;
        self.writer.flush().map_err(io)?;
        let mut response = String::new();
        let n = self.reader.read_line(&mut response).map_err(io)?;
        if n == 0 {
            return Err(Error::transport("server closed the connection", None));
        }
        Ok(response.trim_end().to_string())
    }
}

/// Client for a logit server. One persistent connection, serialized.
pub struct RemoteBackend {
    addr: SocketAddr,
    conn: Mutex<Option<Connection>>,
    meta: BackendMeta,
    vocab: Option<Vocabulary>,
}

impl RemoteBackend {
    pub fn connect<A: ToSocketAddrs>(endpoint: A) -> Result<Self> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| Error::transport(format!("cannot resolve endpoint: {e}"), None))?
            .next()
            .ok_or_else(|| Error::transport("endpoint resolves to no address", None))?;
        let mut conn = Connection::open(addr)?;
        let meta = wire::parse_meta_response(&conn.round_trip(&Request::Meta.to_line())?)?;
        // Remote servers do not ship surface strings; assume the default toy
        // layout when the id space matches it.
        let vocab = Vocabulary::toy(meta.vocab_size)
            .ok()
            .filter(|v| v.spec().mask_id == meta.mask_id && v.spec().stop_ids.iter().eq(meta.stop_ids.iter()));
        Ok(RemoteBackend {
            addr,
            conn: Mutex::new(Some(conn)),
            meta,
            vocab,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Backend for RemoteBackend {
    fn meta(&self) -> &BackendMeta {
        &self.meta
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<Scored> {
        let line = Request::Score {
            tokens: req.tokens.to_vec(),
            mask_positions: req.mask_positions.to_vec(),
            want_attention: req.want_attention,
            top_k: req.top_k,
        }
        .to_line();
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(Connection::open(self.addr)?);
        }
        let response = match guard.as_mut().expect("connection present").round_trip(&line) {
            Ok(r) => r,
            Err(e) => {
                // Drop the broken connection; the next call reconnects.
                *guard = None;
                return Err(e);
            }
        };
        drop(guard);
        wire::parse_score_response(&response, self.meta.vocab_size, req.top_k.is_some())
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        self.vocab.as_ref()
    }
}
