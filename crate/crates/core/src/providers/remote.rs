use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::wire::{self, RequestHeader, ResponseHeader};
use super::{LogitProvider, ProviderError, Result, SessionInfo, ViewHandle, ViewInput, Vocabulary};
use crate::tensors::{encode_png, AttentionStack, LogitVector, TokenId};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// Environment variable holding the default `host:port` of a remote backend.
pub const ENDPOINT_ENV: &str = "OAVCD_ENDPOINT";

pub trait Duplex: Read + Write + Send {}
impl<T: Read + Write + Send> Duplex for T {}

/// Client side of the OAV1 protocol.
pub struct RemoteProvider {
    stream: Box<dyn Duplex>,
    endpoint: String,
    timeout: Duration,
    info: SessionInfo,
    closed: bool,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("endpoint", &self.endpoint)
            .field("session", &self.info.session_id)
            .finish()
    }
}

fn map_io(op: &str, timeout: Duration, e: io::Error) -> ProviderError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ProviderError::Timeout {
            op: op.to_string(),
            after: timeout,
        },
        _ => ProviderError::Io(e),
    }
}

fn map_err(op: &str, timeout: Duration, e: ProviderError) -> ProviderError {
    match e {
        ProviderError::Io(io) => map_io(op, timeout, io),
        other => other,
    }
}

impl RemoteProvider {
    /// Connect over TCP to `host:port` (an optional `tcp://` prefix is accepted).
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self> {
        let addr_text = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
        let conn_err = |source| ProviderError::Connection {
            endpoint: endpoint.to_string(),
            source,
        };
        let addrs: Vec<_> = addr_text.to_socket_addrs().map_err(conn_err)?.collect();
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    stream.set_nodelay(true)?;
                    return Self::handshake(Box::new(stream), endpoint, timeout);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(conn_err(last.unwrap_or_else(|| {
            io::Error::new(io::ErrorKind::NotFound, "no addresses resolved")
        })))
    }

    /// Run the protocol over an already-open byte stream (pipes, sockets).
    pub fn from_stream(stream: Box<dyn Duplex>, label: &str) -> Result<Self> {
        Self::handshake(stream, label, DEFAULT_TIMEOUT)
    }

    fn handshake(mut stream: Box<dyn Duplex>, endpoint: &str, timeout: Duration) -> Result<Self> {
        let io_err = |e| map_io("handshake", timeout, e);
        wire::write_magic(&mut stream).map_err(io_err)?;
        wire::expect_magic(&mut stream).map_err(|e| map_err("handshake", timeout, e))?;
        wire::write_message(
            &mut stream,
            &RequestHeader::Hello {
                version: wire::PROTOCOL_VERSION,
            },
            &[],
        )
        .map_err(io_err)?;
        let (header, _) = wire::read_message::<ResponseHeader>(&mut stream)
            .map_err(|e| map_err("handshake", timeout, e))?
            .ok_or_else(|| ProviderError::Handshake("connection closed during HELLO".into()))?;
        let info = match header {
            ResponseHeader::Hello {
                version,
                session_id,
                vocab_size,
                eos_token,
                vocab,
            } => {
                if version != wire::PROTOCOL_VERSION {
                    return Err(ProviderError::Handshake(format!(
                        "server speaks version {version}, client {}",
                        wire::PROTOCOL_VERSION
                    )));
                }
                if vocab.len() != vocab_size || eos_token as usize >= vocab_size {
                    return Err(ProviderError::Handshake(format!(
                        "inconsistent HELLO: vocab_size {vocab_size}, {} names, eos {eos_token}",
                        vocab.len()
                    )));
                }
                SessionInfo {
                    session_id,
                    vocab: Vocabulary::new(vocab)?,
                    eos_token,
                }
            }
            ResponseHeader::Error { message } => return Err(ProviderError::Handshake(message)),
            other => {
                return Err(ProviderError::Handshake(format!(
                    "unexpected reply to HELLO: {other:?}"
                )))
            }
        };
        Ok(Self {
            stream,
            endpoint: endpoint.to_string(),
            timeout,
            info,
            closed: false,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn call(&mut self, op: &str, header: &RequestHeader, payload: &[u8]) -> Result<(ResponseHeader, Vec<u8>)> {
        if self.closed {
            return Err(ProviderError::Closed);
        }
        let timeout = self.timeout;
        wire::write_message(&mut self.stream, header, payload).map_err(|e| map_io(op, timeout, e))?;
        let reply = wire::read_message::<ResponseHeader>(&mut self.stream)
            .map_err(|e| map_err(op, timeout, e))?
            .ok_or_else(|| ProviderError::Protocol(format!("connection closed during {op}")))?;
        if let ResponseHeader::Error { message } = &reply.0 {
            return Err(ProviderError::Remote(message.clone()));
        }
        Ok(reply)
    }
}

fn unexpected(op: &str, got: &ResponseHeader) -> ProviderError {
    ProviderError::Protocol(format!("unexpected reply to {op}: {got:?}"))
}

impl LogitProvider for RemoteProvider {
    fn info(&self) -> &SessionInfo {
        &self.info
    }

    fn register_view(&mut self, view: &ViewInput<'_>) -> Result<ViewHandle> {
        view.validate()?;
        let mut payload = encode_png(view.image)?;
        let png_bytes = payload.len();
        let mask_bytes = match view.mask {
            Some(m) => {
                payload.extend(m.bits().iter().map(|&b| u8::from(b)));
                m.bits().len()
            }
            None => 0,
        };
        let header = RequestHeader::RegisterView {
            height: view.image.height(),
            width: view.image.width(),
            image_id: view.image_id.map(str::to_string),
            png_bytes,
            mask_bytes,
        };
        match self.call("REGISTER_VIEW", &header, &payload)? {
            (ResponseHeader::View { handle }, _) => Ok(ViewHandle(handle)),
            (other, _) => Err(unexpected("REGISTER_VIEW", &other)),
        }
    }

    fn next_logits(
        &mut self,
        view: ViewHandle,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<LogitVector> {
        let header = RequestHeader::Logits {
            view: view.0,
            prompt: prompt.to_vec(),
            prefix: prefix.to_vec(),
        };
        match self.call("LOGITS", &header, &[])? {
            (ResponseHeader::Logits { vocab_size }, payload) => {
                if vocab_size != self.info.vocab_size() {
                    return Err(ProviderError::Protocol(format!(
                        "LOGITS for {vocab_size} tokens, session has {}",
                        self.info.vocab_size()
                    )));
                }
                let values = wire::parse_f32_payload(&payload, vocab_size)?;
                Ok(LogitVector::new(values.into_iter().map(f64::from).collect())?)
            }
            (other, _) => Err(unexpected("LOGITS", &other)),
        }
    }

    fn fetch_attention(&mut self, view: ViewHandle) -> Result<AttentionStack> {
        match self.call("ATTENTION", &RequestHeader::Attention { view: view.0 }, &[])? {
            (
                ResponseHeader::Attention {
                    heads,
                    grid_h,
                    grid_w,
                },
                payload,
            ) => {
                let n = heads
                    .checked_mul(grid_h)
                    .and_then(|v| v.checked_mul(grid_w))
                    .ok_or_else(|| ProviderError::Protocol("attention dims overflow".into()))?;
                let data = wire::parse_f32_payload(&payload, n)?;
                Ok(AttentionStack::new(heads, grid_h, grid_w, data)?)
            }
            (other, _) => Err(unexpected("ATTENTION", &other)),
        }
    }

    fn close(&mut self) -> Result<()> {
        if self.closed {
            return Ok(());
        }
        let reply = self.call("CLOSE", &RequestHeader::Close {}, &[]);
        self.closed = true;
        match reply? {
            (ResponseHeader::Bye {}, _) => Ok(()),
            (other, _) => Err(unexpected("CLOSE", &other)),
        }
    }
}

impl Drop for RemoteProvider {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.close();
        }
    }
}
