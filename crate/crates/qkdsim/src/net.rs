//! TCP transport for the session layer.
//!
//! One frame per wire message: a fixed 15-byte header carrying the
//! payload length, then the payload. The session layer owns all protocol
//! decisions; this module only shuttles complete frames and reports when
//! the peer hangs up.

use std::fmt;
use std::io::{Read, Write};
use std::net::TcpStream;

use qkdsim_core::netlink::{
    AliceSession, BobHooks, BobSession, Frame, SessionError, SessionOutcome, HEADER_LEN,
};
use qkdsim_core::simengine::RunConfig;

#[derive(Debug)]
pub enum NetError {
    Io(std::io::Error),
    Session(SessionError),
    /// The peer closed the connection before the session finished.
    Disconnected,
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::Io(e) => write!(f, "transport: {e}"),
            NetError::Session(e) => write!(f, "session: {e}"),
            NetError::Disconnected => write!(f, "peer disconnected mid-session"),
        }
    }
}

impl std::error::Error for NetError {}

impl From<std::io::Error> for NetError {
    fn from(e: std::io::Error) -> Self {
        NetError::Io(e)
    }
}

impl From<SessionError> for NetError {
    fn from(e: SessionError) -> Self {
        NetError::Session(e)
    }
}

/// Blocking frame reader/writer over one TCP connection.
pub struct FrameStream {
    stream: TcpStream,
}

impl FrameStream {
    pub fn new(stream: TcpStream) -> Result<Self, NetError> {
        stream.set_nodelay(true)?;
        Ok(FrameStream { stream })
    }

    /// Reads one complete frame; `None` on clean end-of-stream at a
    /// frame boundary.
    pub fn recv(&mut self) -> Result<Option<Vec<u8>>, NetError> {
        let mut header = [0u8; HEADER_LEN];
        let mut filled = 0;
        while filled < HEADER_LEN {
            let n = self.stream.read(&mut header[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(NetError::Disconnected);
            }
            filled += n;
        }
        let (_, _, payload_len) = Frame::decode_header(&header)
            .map_err(|e| NetError::Session(SessionError::Decode(e)))?;
        let mut raw = vec![0u8; HEADER_LEN + payload_len];
        raw[..HEADER_LEN].copy_from_slice(&header);
        self.stream
            .read_exact(&mut raw[HEADER_LEN..])
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => NetError::Disconnected,
                _ => NetError::Io(e),
            })?;
        Ok(Some(raw))
    }

    pub fn send_all(&mut self, frames: &[Vec<u8>]) -> Result<(), NetError> {
        for frame in frames {
            self.stream.write_all(frame)?;
        }
        if !frames.is_empty() {
            self.stream.flush()?;
        }
        Ok(())
    }
}

/// Runs the sender role over an established connection.
pub fn run_alice(
    stream: TcpStream,
    config: RunConfig,
    session_id: u64,
) -> Result<SessionOutcome, NetError> {
    let mut session = AliceSession::new(config, session_id)?;
    let mut stream = FrameStream::new(stream)?;
    let opening = session.start()?;
    stream.send_all(&opening)?;
    while !session.is_finished() {
        let raw = stream.recv()?.ok_or(NetError::Disconnected)?;
        let replies = session.handle(&raw)?;
        stream.send_all(&replies)?;
    }
    Ok(session.outcome().expect("finished session has an outcome").clone())
}

/// Runs the receiver role over an established connection.
pub fn run_bob(stream: TcpStream, hooks: BobHooks) -> Result<SessionOutcome, NetError> {
    let mut session = BobSession::new(hooks);
    let mut stream = FrameStream::new(stream)?;
    while !session.is_finished() {
        let raw = stream.recv()?.ok_or(NetError::Disconnected)?;
        let replies = session.handle(&raw)?;
        stream.send_all(&replies)?;
    }
    Ok(session.outcome().expect("finished session has an outcome").clone())
}
