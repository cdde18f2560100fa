//! SACT: a blocking request/response protocol that lets an out-of-process
//! model send one layer's activation per forward pass and receive the
//! tensor to substitute.
//!
//! Every message is `"SACT" | type: u8 | length: u64 LE | payload`.
//! A session is `HELLO → SPEC → (ACTIVATION → INJECTION)* → DONE`, with the
//! server answering HELLO, SPEC and DONE in kind. Tensors are float32
//! little-endian in C order with dims `[T, C, W, H]`. Anything unexpected
//! gets an ERROR reply carrying a UTF-8 message, after which the server
//! closes the session.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Mutex;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use steerlab_core::concepts::ConceptDirection;
use steerlab_core::steering::{Align, Mode, Renorm, SteeringConfig, SteeringInjector};
use steerlab_core::surrogate::Injector;
use steerlab_core::{Activation, Error as CoreError, LayerId};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SACT";
pub const HEADER_LEN: usize = 13;
/// Largest payload accepted (1 GiB).
pub const MAX_PAYLOAD: u64 = 1 << 30;
pub const DTYPE: &str = "f32le";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    Spec = 0x02,
    Activation = 0x03,
    Injection = 0x04,
    Done = 0x05,
    Error = 0x7F,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => Self::Hello,
            0x02 => Self::Spec,
            0x03 => Self::Activation,
            0x04 => Self::Injection,
            0x05 => Self::Done,
            0x7F => Self::Error,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub kind: MsgType,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(kind: MsgType, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            kind,
            payload: payload.into(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the limit")]
    TooLarge(u64),
    #[error("stream ended inside a message")]
    Truncated,
    #[error("expected {expected}, got {got:?}")]
    Unexpected { expected: &'static str, got: MsgType },
    #[error("spec rejected: {0}")]
    SpecMismatch(String),
    #[error("peer reported: {0}")]
    Remote(String),
    #[error("connection lost: {0}")]
    ConnectionLost(#[from] io::Error),
}

/// Parses one message from the front of `buf`, returning it and the number
/// of bytes consumed. `Ok(None)` means more bytes are needed.
pub fn parse_message(buf: &[u8]) -> Result<Option<(Message, usize)>, ProtocolError> {
    if buf.len() < HEADER_LEN {
        if buf.len() >= 4 && buf[..4] != MAGIC {
            return Err(ProtocolError::BadMagic(buf[..4].try_into().expect("4 bytes")));
        }
        return Ok(None);
    }
    let (kind, len) = parse_header(buf[..HEADER_LEN].try_into().expect("header"))?;
    let end = HEADER_LEN + len as usize;
    if buf.len() < end {
        return Ok(None);
    }
    Ok(Some((Message::new(kind, &buf[HEADER_LEN..end]), end)))
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(MsgType, u64), ProtocolError> {
    let magic: [u8; 4] = h[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let kind = MsgType::from_byte(h[4]).ok_or(ProtocolError::UnknownType(h[4]))?;
    let len = u64::from_le_bytes(h[5..].try_into().expect("8 bytes"));
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::TooLarge(len));
    }
    Ok((kind, len))
}

/// Reads one message. `Ok(None)` on a clean end of stream before the first
/// header byte.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, ProtocolError> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (kind, len) = parse_header(&h)?;
    let mut payload = Vec::new();
    let n = r.take(len).read_to_end(&mut payload)?;
    if n as u64 != len {
        return Err(ProtocolError::Truncated);
    }
    Ok(Some(Message { kind, payload }))
}

pub fn write_message<W: Write>(w: &mut W, m: &Message) -> io::Result<()> {
    w.write_all(&m.encode())?;
    w.flush()
}

/// SPEC payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub layer: String,
    /// `[T, C, W, H]`.
    pub dims: [usize; 4],
    pub dtype: String,
}

impl TensorSpec {
    pub fn new(layer: impl Into<String>, dims: [usize; 4]) -> Self {
        Self {
            layer: layer.into(),
            dims,
            dtype: DTYPE.into(),
        }
    }

    pub fn byte_len(&self) -> usize {
        self.dims.iter().product::<usize>() * 4
    }
}

pub fn f32s_to_bytes(v: impl IntoIterator<Item = f32>) -> Vec<u8> {
    v.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn bytes_to_f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

/// What the server does to each activation.
#[derive(Clone, Debug)]
pub enum ServeMode {
    /// Return the activation unchanged.
    Echo,
    Steer {
        direction: ConceptDirection<f32>,
        alpha: f64,
        mode: Mode,
        align: Align,
        renorm: Renorm,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub activations: usize,
    pub completed: bool,
}

fn reply_error<S: Write>(s: &mut S, msg: &str) -> io::Result<()> {
    write_message(s, &Message::new(MsgType::Error, msg.as_bytes()))
}

fn expect(m: Option<Message>, want: MsgType, name: &'static str) -> Result<Message, ProtocolError> {
    match m {
        None => Err(ProtocolError::Truncated),
        Some(m) if m.kind == want => Ok(m),
        Some(m) if m.kind == MsgType::Error => {
            Err(ProtocolError::Remote(String::from_utf8_lossy(&m.payload).into()))
        }
        Some(m) => Err(ProtocolError::Unexpected {
            expected: name,
            got: m.kind,
        }),
    }
}

fn steering_injector(mode: &ServeMode, spec: &TensorSpec) -> Result<Option<SteeringInjector<f32>>, String> {
    let layer: LayerId = spec.layer.parse().unwrap_or(LayerId(0));
    match mode {
        ServeMode::Echo => Ok(None),
        ServeMode::Steer {
            direction,
            alpha,
            mode,
            align,
            renorm,
        } => {
            let mut cfg = SteeringConfig::new(direction.clone(), *alpha, *mode);
            cfg.align = *align;
            cfg.renorm = *renorm;
            cfg.layer = layer;
            let delta = cfg.resolve(spec.dims).map_err(|e| e.to_string())?;
            Ok(Some(SteeringInjector {
                layer,
                delta,
                alpha: *alpha,
                renorm: *renorm,
            }))
        }
    }
}

/// Serves one session on `stream`. Protocol violations are answered with
/// an ERROR message and then returned.
pub fn serve_session<S: Read + Write>(stream: &mut S, mode: &ServeMode) -> Result<SessionStats, ProtocolError> {
    let mut stats = SessionStats::default();
    let result = (|| {
        let hello = expect(read_message(stream)?, MsgType::Hello, "HELLO")?;
        write_message(stream, &Message::new(MsgType::Hello, hello.payload))?;
        let spec_msg = expect(read_message(stream)?, MsgType::Spec, "SPEC")?;
        let spec: TensorSpec = serde_json::from_slice(&spec_msg.payload)
            .map_err(|e| ProtocolError::SpecMismatch(e.to_string()))?;
        if spec.dtype != DTYPE {
            return Err(ProtocolError::SpecMismatch(format!("dtype `{}` (only {DTYPE})", spec.dtype)));
        }
        if spec.dims.contains(&0) || spec.byte_len() as u64 > MAX_PAYLOAD {
            return Err(ProtocolError::SpecMismatch(format!("unusable dims {:?}", spec.dims)));
        }
        let injector = steering_injector(mode, &spec).map_err(ProtocolError::SpecMismatch)?;
        write_message(stream, &Message::new(MsgType::Spec, spec_msg.payload))?;
        loop {
            let m = read_message(stream)?.ok_or(ProtocolError::Truncated)?;
            match m.kind {
                MsgType::Activation => {
                    if m.payload.len() != spec.byte_len() {
                        return Err(ProtocolError::SpecMismatch(format!(
                            "activation has {} bytes, spec says {}",
                            m.payload.len(),
                            spec.byte_len()
                        )));
                    }
                    let reply = match &injector {
                        None => m.payload,
                        Some(inj) => {
                            let data = Array4::from_shape_vec(spec.dims, bytes_to_f32s(&m.payload))
                                .expect("length checked");
                            let a = Activation::new(data, inj.layer, "wire");
                            let out = inj.inject(&a).map_err(|e| ProtocolError::Remote(e.to_string()))?;
                            f32s_to_bytes(out.data.iter().copied())
                        }
                    };
                    write_message(stream, &Message::new(MsgType::Injection, reply))?;
                    stats.activations += 1;
                }
                MsgType::Done => {
                    write_message(stream, &Message::new(MsgType::Done, Vec::new()))?;
                    stats.completed = true;
                    return Ok(());
                }
                other => {
                    return Err(ProtocolError::Unexpected {
                        expected: "ACTIVATION or DONE",
                        got: other,
                    })
                }
            }
        }
    })();
    match result {
        Ok(()) => Ok(stats),
        Err(e) => {
            if !matches!(e, ProtocolError::ConnectionLost(_)) {
                let _ = reply_error(stream, &e.to_string());
            }
            Err(e)
        }
    }
}

/// Accepts connections one at a time; stops after `max_sessions` if given.
pub fn serve(listener: &TcpListener, mode: &ServeMode, max_sessions: Option<usize>) -> io::Result<()> {
    let mut served = 0;
    for stream in listener.incoming() {
        let mut stream = stream?;
        stream.set_nodelay(true)?;
        if let Err(e) = serve_session(&mut stream, mode) {
            eprintln!("session ended with error: {e}");
        }
        served += 1;
        if max_sessions.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}

/// Client side of a session.
pub struct Client<S: Read + Write> {
    stream: S,
    pub spec: TensorSpec,
    open: bool,
}

impl Client<TcpStream> {
    pub fn connect(addr: impl ToSocketAddrs, spec: TensorSpec) -> Result<Self, ProtocolError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Self::handshake(stream, spec)
    }
}

impl<S: Read + Write> Client<S> {
    pub fn handshake(mut stream: S, spec: TensorSpec) -> Result<Self, ProtocolError> {
        write_message(&mut stream, &Message::new(MsgType::Hello, b"steerlab".to_vec()))?;
        expect(read_message(&mut stream)?, MsgType::Hello, "HELLO")?;
        let doc = serde_json::to_vec(&spec).expect("spec serialises");
        write_message(&mut stream, &Message::new(MsgType::Spec, doc))?;
        expect(read_message(&mut stream)?, MsgType::Spec, "SPEC").map_err(|e| match e {
            ProtocolError::Remote(m) => ProtocolError::SpecMismatch(m),
            e => e,
        })?;
        Ok(Self {
            stream,
            spec,
            open: true,
        })
    }

    /// Sends one activation and blocks for its replacement.
    pub fn exchange(&mut self, activation: &[f32]) -> Result<Vec<f32>, ProtocolError> {
        let bytes = f32s_to_bytes(activation.iter().copied());
        if bytes.len() != self.spec.byte_len() {
            return Err(ProtocolError::SpecMismatch(format!(
                "activation has {} values, spec says {:?}",
                activation.len(),
                self.spec.dims
            )));
        }
        write_message(&mut self.stream, &Message::new(MsgType::Activation, bytes.clone()))?;
        let reply = expect(read_message(&mut self.stream)?, MsgType::Injection, "INJECTION")?;
        if reply.payload.len() != bytes.len() {
            return Err(ProtocolError::SpecMismatch(format!(
                "injection has {} bytes, sent {}",
                reply.payload.len(),
                bytes.len()
            )));
        }
        Ok(bytes_to_f32s(&reply.payload))
    }

    /// Sends DONE; a second call does nothing.
    pub fn finish(&mut self) -> Result<(), ProtocolError> {
        if !self.open {
            return Ok(());
        }
        self.open = false;
        write_message(&mut self.stream, &Message::new(MsgType::Done, Vec::new()))?;
        expect(read_message(&mut self.stream)?, MsgType::Done, "DONE")?;
        Ok(())
    }
}

/// Routes a surrogate's activation at one layer through a remote server.
pub struct RemoteInjector<S: Read + Write + Send> {
    pub layer: LayerId,
    client: Mutex<Client<S>>,
}

impl<S: Read + Write + Send> RemoteInjector<S> {
    pub fn new(layer: LayerId, client: Client<S>) -> Self {
        Self {
            layer,
            client: Mutex::new(client),
        }
    }

    pub fn into_client(self) -> Client<S> {
        self.client.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

impl<S: Read + Write + Send> Injector<f32> for RemoteInjector<S> {
    fn layer(&self) -> LayerId {
        self.layer
    }

    fn inject(&self, a: &Activation) -> steerlab_core::Result<Activation> {
        let mut client = self.client.lock().unwrap_or_else(|p| p.into_inner());
        if a.shape() != client.spec.dims {
            return Err(CoreError::ShapeMismatch {
                context: "remote activation".into(),
                expected: client.spec.dims.to_vec(),
                found: a.shape().to_vec(),
            });
        }
        let flat: Vec<f32> = a.data.iter().copied().collect();
        let out = client
            .exchange(&flat)
            .map_err(|e| CoreError::Io(io::Error::other(e.to_string())))?;
        let data = Array4::from_shape_vec(a.shape(), out).expect("length checked");
        Ok(a.with_data(data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_then_parse() {
        let m = Message::new(MsgType::Activation, vec![1, 2, 3]);
        let bytes = m.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 3);
        assert_eq!(parse_message(&bytes).unwrap(), Some((m, bytes.len())));
        assert_eq!(parse_message(&bytes[..bytes.len() - 1]).unwrap(), None);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(parse_message(b"SACX"), Err(ProtocolError::BadMagic(_))));
        let mut b = Message::new(MsgType::Done, vec![]).encode();
        b[4] = 0x42;
        assert!(matches!(parse_message(&b), Err(ProtocolError::UnknownType(0x42))));
        let mut b = Message::new(MsgType::Done, vec![]).encode();
        b[5..13].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(parse_message(&b), Err(ProtocolError::TooLarge(_))));
    }

    #[test]
    fn truncated_stream() {
        let b = Message::new(MsgType::Spec, vec![7; 10]).encode();
        let r = read_message(&mut &b[..15]);
        assert!(matches!(r, Err(ProtocolError::Truncated)));
        assert!(read_message(&mut &b[..0]).unwrap().is_none());
    }
}
