//! Session transports.
//!
//! Whatever carries the bytes, a session is surfaced as a [`Link`]: an
//! outgoing and an incoming envelope channel. The incoming side closes when
//! the peer goes away. Delivery per link is FIFO.

use std::io;

use futures_util::{SinkExt, StreamExt};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpStream, ToSocketAddrs};
use tokio::sync::mpsc::{self, UnboundedReceiver, UnboundedSender};
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tokio_tungstenite::WebSocketStream;
use tracing::debug;

use crate::protocol::{decode_frame, decode_text, encode_frame, encode_text, DecodeError, Envelope, FRAME_PREFIX_LEN};

pub struct Link {
    pub tx: UnboundedSender<Envelope>,
    pub rx: UnboundedReceiver<Envelope>,
}

impl Link {
    /// Returns `false` once the peer has gone.
    pub fn send(&self, env: Envelope) -> bool {
        self.tx.send(env).is_ok()
    }

    pub async fn recv(&mut self) -> Option<Envelope> {
        self.rx.recv().await
    }
}

/// Two connected in-process ends.
pub fn link_pair() -> (Link, Link) {
    let (a_tx, b_rx) = mpsc::unbounded_channel();
    let (b_tx, a_rx) = mpsc::unbounded_channel();
    (Link { tx: a_tx, rx: a_rx }, Link { tx: b_tx, rx: b_rx })
}

/// Runs length-prefixed framing over a byte stream.
pub fn spawn_stream_link<S>(stream: S) -> Link
where
    S: AsyncRead + AsyncWrite + Send + 'static,
{
    let (mut rd, mut wr) = tokio::io::split(stream);
    let (local, remote) = link_pair();
    let Link { tx: in_tx, rx: mut out_rx } = remote;

    tokio::spawn(async move {
        while let Some(env) = out_rx.recv().await {
            let frame = match encode_frame(&env) {
                Ok(f) => f,
                Err(e) => {
                    debug!("dropping unencodable envelope: {e}");
                    continue;
                }
            };
            if wr.write_all(&frame).await.is_err() {
                break;
            }
        }
        let _ = wr.shutdown().await;
    });

    tokio::spawn(async move {
        if let Err(e) = read_frames(&mut rd, &in_tx).await {
            debug!("stream link closed: {e}");
        }
    });

    local
}

async fn read_frames<R: AsyncRead + Unpin>(rd: &mut R, tx: &UnboundedSender<Envelope>) -> io::Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(8192);
    let mut chunk = vec![0u8; 64 * 1024];
    loop {
        loop {
            match decode_frame(&buf) {
                Ok((env, used)) => {
                    buf.drain(..used);
                    if tx.send(env).is_err() {
                        return Ok(());
                    }
                }
                Err(DecodeError::NeedMoreBytes { needed, .. }) => {
                    buf.reserve(needed.saturating_sub(buf.len()).max(FRAME_PREFIX_LEN));
                    break;
                }
                Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e.to_string())),
            }
        }
        let n = rd.read(&mut chunk).await?;
        if n == 0 {
            return Ok(());
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

pub async fn dial_tcp<A: ToSocketAddrs>(addr: A) -> io::Result<Link> {
    let stream = TcpStream::connect(addr).await?;
    stream.set_nodelay(true)?;
    Ok(spawn_stream_link(stream))
}

/// One envelope per websocket text frame, no length prefix.
pub fn spawn_ws_link<S>(ws: WebSocketStream<S>) -> Link
where
    S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let (mut sink, mut stream) = ws.split();
    let (local, remote) = link_pair();
    let Link { tx: in_tx, rx: mut out_rx } = remote;

    tokio::spawn(async move {
        while let Some(env) = out_rx.recv().await {
            let Ok(text) = encode_text(&env) else { continue };
            if sink.send(WsMessage::text(text)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    tokio::spawn(async move {
        while let Some(Ok(msg)) = stream.next().await {
            match msg {
                WsMessage::Text(text) => match decode_text(text.as_str()) {
                    Ok(env) => {
                        if in_tx.send(env).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        debug!("websocket frame rejected: {e}");
                        break;
                    }
                },
                WsMessage::Close(_) => break,
                _ => {}
            }
        }
    });

    local
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{MsgType, ParticipantId};
    use serde_json::json;

    fn env(tick: u64) -> Envelope {
        Envelope::new(MsgType::Heartbeat, "", tick, ParticipantId::controller("c"), json!({"n": tick}))
    }

    #[tokio::test]
    async fn stream_link_round_trips_in_order() {
        let (a, b) = tokio::io::duplex(16); // tiny buffer forces partial reads
        let left = spawn_stream_link(a);
        let mut right = spawn_stream_link(b);
        for t in 0..50 {
            assert!(left.send(env(t)));
        }
        for t in 0..50 {
            assert_eq!(right.recv().await.unwrap(), env(t));
        }
        drop(left);
        assert!(right.recv().await.is_none());
    }

    #[tokio::test]
    async fn garbage_closes_the_link() {
        let (a, mut b) = tokio::io::duplex(1024);
        let mut link = spawn_stream_link(a);
        b.write_all(&3u32.to_be_bytes()).await.unwrap();
        b.write_all(b"{x}").await.unwrap();
        assert!(link.recv().await.is_none());
    }
}
