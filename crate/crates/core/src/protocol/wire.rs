//! Line-delimited JSON messages over a byte stream.
//!
//! The model side speaks first with `hello`; afterwards the engine sends one
//! request at a time and waits for the matching response.

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{ModelSession, SessionDims, SessionError};
use crate::decoder::TokenId;
use crate::negative_sample::VisualInput;
use crate::selection::AttentionVector;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        version: u32,
        n_tokens: usize,
        vocab_size: usize,
    },
    AttentionReq {
        id: u64,
        #[serde(default)]
        example: u64,
        instruction: String,
    },
    AttentionResp {
        id: u64,
        scores: Vec<f64>,
    },
    StepReq {
        id: u64,
        #[serde(default)]
        example: u64,
        #[serde(flatten)]
        visual: VisualInput,
        query: String,
        prefix: Vec<TokenId>,
    },
    StepResp {
        id: u64,
        logits: Vec<f64>,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        message: String,
    },
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    let line = serde_json::to_string(msg).map_err(io::Error::other)?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()
}

/// Reads the next message; `Ok(None)` on a clean end of stream.
pub fn read_message<R: BufRead>(r: &mut R) -> Result<Option<Message>, SessionError> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            break;
        }
    }
    serde_json::from_str(line.trim_end())
        .map(Some)
        .map_err(|e| SessionError::Protocol(format!("malformed message: {e}")))
}

/// Client side of the wire protocol.
pub struct RemoteSession {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    dims: SessionDims,
    example: u64,
    next_id: u64,
    timeout: Duration,
}

impl RemoteSession {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, SessionError> {
        let connect_err = |reason: String| SessionError::ConnectFailure {
            addr: addr.to_string(),
            reason,
        };
        let addrs: Vec<_> = addr
            .to_socket_addrs()
            .map_err(|e| connect_err(e.to_string()))?
            .collect();
        let mut last = String::from("address resolved to nothing");
        let mut stream = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = e.to_string(),
            }
        }
        let stream = stream.ok_or_else(|| connect_err(last))?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;

        let mut reader = BufReader::new(stream.try_clone()?);
        let writer = BufWriter::new(stream);
        let hello = read_message(&mut reader).map_err(|e| map_timeout(e, timeout))?;
        let dims = match hello {
            Some(Message::Hello {
                version,
                n_tokens,
                vocab_size,
            }) => {
                if version != PROTOCOL_VERSION {
                    return Err(SessionError::HandshakeMismatch {
                        expected: PROTOCOL_VERSION,
                        got: version,
                    });
                }
                SessionDims { n_tokens, vocab_size }
            }
            Some(other) => return Err(SessionError::Protocol(format!("expected hello, got {other:?}"))),
            None => return Err(SessionError::Protocol("peer closed before hello".into())),
        };
        debug!("connected to {addr}: {dims:?}");
        Ok(Self {
            reader,
            writer,
            dims,
            example: 0,
            next_id: 1,
            timeout,
        })
    }

    fn request(&mut self, msg: Message) -> Result<Message, SessionError> {
        let id = match &msg {
            Message::AttentionReq { id, .. } | Message::StepReq { id, .. } => *id,
            _ => unreachable!("only requests are sent"),
        };
        write_message(&mut self.writer, &msg).map_err(|e| map_timeout(e.into(), self.timeout))?;
        let reply = read_message(&mut self.reader)
            .map_err(|e| map_timeout(e, self.timeout))?
            .ok_or_else(|| SessionError::Protocol("peer closed the connection".into()))?;
        match reply {
            Message::Error { message, .. } => Err(SessionError::Remote(message)),
            Message::AttentionResp { id: rid, .. } | Message::StepResp { id: rid, .. } if rid != id => Err(
                SessionError::Protocol(format!("reply id {rid} does not match request id {id}")),
            ),
            other => Ok(other),
        }
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

fn map_timeout(e: SessionError, timeout: Duration) -> SessionError {
    match e {
        SessionError::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
            SessionError::Timeout(timeout)
        }
        other => other,
    }
}

impl ModelSession for RemoteSession {
    fn dims(&self) -> SessionDims {
        self.dims
    }

    fn select_example(&mut self, example: u64) -> Result<(), SessionError> {
        self.example = example;
        Ok(())
    }

    fn attention(&mut self, instruction: &str) -> Result<AttentionVector, SessionError> {
        let id = self.fresh_id();
        let req = Message::AttentionReq {
            id,
            example: self.example,
            instruction: instruction.to_string(),
        };
        match self.request(req)? {
            Message::AttentionResp { scores, .. } => Ok(AttentionVector::new(scores)?),
            other => Err(SessionError::Protocol(format!(
                "expected attention_resp, got {other:?}"
            ))),
        }
    }

    fn step(&mut self, visual: &VisualInput, query: &str, prefix: &[TokenId]) -> Result<Vec<f64>, SessionError> {
        let id = self.fresh_id();
        let req = Message::StepReq {
            id,
            example: self.example,
            visual: visual.clone(),
            query: query.to_string(),
            prefix: prefix.to_vec(),
        };
        match self.request(req)? {
            Message::StepResp { logits, .. } => Ok(logits),
            other => Err(SessionError::Protocol(format!("expected step_resp, got {other:?}"))),
        }
    }
}

/// Serves one connection with `backend` until the peer disconnects.
pub fn serve_connection(stream: TcpStream, backend: &mut dyn ModelSession) -> Result<(), SessionError> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let dims = backend.dims();
    write_message(
        &mut writer,
        &Message::Hello {
            version: PROTOCOL_VERSION,
            n_tokens: dims.n_tokens,
            vocab_size: dims.vocab_size,
        },
    )?;

    loop {
        let msg = match read_message(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(SessionError::Protocol(reason)) => {
                write_message(
                    &mut writer,
                    &Message::Error {
                        id: None,
                        message: reason,
                    },
                )?;
                continue;
            }
            Err(e) => return Err(e),
        };
        let reply = match msg {
            Message::AttentionReq {
                id,
                example,
                instruction,
            } => match backend
                .select_example(example)
                .and_then(|_| backend.attention(&instruction))
            {
                Ok(att) => Message::AttentionResp {
                    id,
                    scores: att.into_inner(),
                },
                Err(e) => Message::Error {
                    id: Some(id),
                    message: e.to_string(),
                },
            },
            Message::StepReq {
                id,
                example,
                visual,
                query,
                prefix,
            } => match backend
                .select_example(example)
                .and_then(|_| backend.step(&visual, &query, &prefix))
            {
                Ok(logits) => Message::StepResp { id, logits },
                Err(e) => Message::Error {
                    id: Some(id),
                    message: e.to_string(),
                },
            },
            other => Message::Error {
                id: None,
                message: format!("unexpected message: {other:?}"),
            },
        };
        write_message(&mut writer, &reply)?;
    }
}

/// Accept loop: one thread per connection, each with its own backend.
pub fn serve<F, S>(listener: TcpListener, mut make_backend: F) -> io::Result<()>
where
    F: FnMut() -> S,
    S: ModelSession + Send + 'static,
{
    for stream in listener.incoming() {
        let stream = stream?;
        let mut backend = make_backend();
        std::thread::spawn(move || {
            if let Err(e) = serve_connection(stream, &mut backend) {
                warn!("connection ended with error: {e}");
            }
        });
    }
    Ok(())
}
