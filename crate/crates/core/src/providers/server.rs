use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use log::{debug, warn};

use super::wire::{self, RequestHeader, ResponseHeader};
use super::{LogitProvider, ProviderError, Result, ViewInput};
use crate::tensors::{decode_png, EvidenceMask};

/// Serve one OAV1 connection from `provider` until the client closes.
///
/// Provider failures are answered with `ERROR` and the session continues;
/// malformed frames are answered with `ERROR` and end the connection.
pub fn serve_connection<S: Read + Write>(
    mut stream: S,
    provider: &mut dyn LogitProvider,
) -> Result<()> {
    wire::expect_magic(&mut stream)?;
    wire::write_magic(&mut stream)?;
    match wire::read_message::<RequestHeader>(&mut stream)? {
        Some((RequestHeader::Hello { version }, _)) if version == wire::PROTOCOL_VERSION => {
            let info = provider.info();
            let hello = ResponseHeader::Hello {
                version: wire::PROTOCOL_VERSION,
                session_id: info.session_id.clone(),
                vocab_size: info.vocab_size(),
                eos_token: info.eos_token,
                vocab: info.vocab.tokens().to_vec(),
            };
            wire::write_message(&mut stream, &hello, &[])?;
        }
        Some((RequestHeader::Hello { version }, _)) => {
            let message = format!("unsupported protocol version {version}");
            wire::write_message(&mut stream, &ResponseHeader::Error { message: message.clone() }, &[])?;
            return Err(ProviderError::Handshake(message));
        }
        Some((other, _)) => {
            let message = format!("expected HELLO, got {other:?}");
            wire::write_message(&mut stream, &ResponseHeader::Error { message: message.clone() }, &[])?;
            return Err(ProviderError::Handshake(message));
        }
        None => return Err(ProviderError::Handshake("client left before HELLO".into())),
    }

    loop {
        let (request, payload) = match wire::read_message::<RequestHeader>(&mut stream) {
            Ok(Some(msg)) => msg,
            Ok(None) => return Ok(()),
            Err(ProviderError::Protocol(message)) => {
                let _ = wire::write_message(
                    &mut stream,
                    &ResponseHeader::Error { message: message.clone() },
                    &[],
                );
                return Err(ProviderError::Protocol(message));
            }
            Err(e) => return Err(e),
        };
        if matches!(request, RequestHeader::Close {}) {
            wire::write_message(&mut stream, &ResponseHeader::Bye {}, &[])?;
            return Ok(());
        }
        let (header, body) = match dispatch(provider, request, &payload) {
            Ok(reply) => reply,
            Err(e) => {
                debug!("request failed: {e}");
                (ResponseHeader::Error { message: e.to_string() }, Vec::new())
            }
        };
        wire::write_message(&mut stream, &header, &body)?;
    }
}

fn dispatch(
    provider: &mut dyn LogitProvider,
    request: RequestHeader,
    payload: &[u8],
) -> Result<(ResponseHeader, Vec<u8>)> {
    match request {
        RequestHeader::Hello { .. } => Err(ProviderError::Protocol("repeated HELLO".into())),
        RequestHeader::RegisterView {
            height,
            width,
            image_id,
            png_bytes,
            mask_bytes,
        } => {
            if png_bytes.checked_add(mask_bytes) != Some(payload.len()) {
                return Err(ProviderError::Protocol(format!(
                    "REGISTER_VIEW announces {png_bytes}+{mask_bytes} bytes, payload has {}",
                    payload.len()
                )));
            }
            let image = decode_png(&payload[..png_bytes])?;
            if (image.height(), image.width()) != (height, width) {
                return Err(ProviderError::View(format!(
                    "PNG is {}x{}, header says {height}x{width}",
                    image.height(),
                    image.width()
                )));
            }
            let mask = match mask_bytes {
                0 => None,
                _ => {
                    let raw = &payload[png_bytes..];
                    if raw.iter().any(|&b| b > 1) {
                        return Err(ProviderError::View("mask bytes must be 0 or 1".into()));
                    }
                    Some(EvidenceMask::new(height, width, raw.iter().map(|&b| b == 1).collect())?)
                }
            };
            let mut view = ViewInput::new(&image);
            if let Some(m) = &mask {
                view = view.with_mask(m);
            }
            if let Some(id) = &image_id {
                view = view.with_image_id(id);
            }
            let handle = provider.register_view(&view)?;
            Ok((ResponseHeader::View { handle: handle.0 }, Vec::new()))
        }
        RequestHeader::Logits { view, prompt, prefix } => {
            let logits = provider.next_logits(super::ViewHandle(view), &prompt, &prefix)?;
            let body = wire::f32_payload(logits.scores().iter().map(|&v| v as f32));
            Ok((ResponseHeader::Logits { vocab_size: logits.vocab_size() }, body))
        }
        RequestHeader::Attention { view } => {
            let attn = provider.fetch_attention(super::ViewHandle(view))?;
            let header = ResponseHeader::Attention {
                heads: attn.heads(),
                grid_h: attn.grid_h(),
                grid_w: attn.grid_w(),
            };
            Ok((header, wire::f32_payload(attn.data().iter().copied())))
        }
        RequestHeader::Close {} => unreachable!("handled by the connection loop"),
    }
}

/// Accept connections forever, one thread and one fresh provider each.
pub fn serve_tcp<F>(listener: TcpListener, factory: F) -> std::io::Result<()>
where
    F: Fn() -> Result<Box<dyn LogitProvider + Send>> + Send + Sync + 'static,
{
    let factory = Arc::new(factory);
    for conn in listener.incoming() {
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let factory = Arc::clone(&factory);
        thread::spawn(move || {
            let peer = stream
                .peer_addr()
                .map(|a| a.to_string())
                .unwrap_or_else(|_| "?".into());
            let mut provider = match factory() {
                Ok(p) => p,
                Err(e) => {
                    warn!("{peer}: cannot open provider: {e}");
                    return;
                }
            };
            match serve_connection(stream, &mut *provider) {
                Ok(()) => debug!("{peer}: session finished"),
                Err(e) => warn!("{peer}: {e}"),
            }
            let _ = provider.close();
        });
    }
    Ok(())
}
