//! Framed binary messages exchanged between server and clients.
//!
//! Every message travels as one frame: `length:u32` BE covering the type
//! tag plus payload, then `type_tag:u8`, then the payload. Frames above
//! [`MAX_FRAME_BYTES`] are rejected before any payload allocation, on both
//! send and receive. The encoding has no optional fields and no versioned
//! extensions; a `Hello` carries a capabilities map for forward
//! compatibility instead.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc;
use std::time::Duration;

use thiserror::Error;

use crate::codec::{put_f64, put_u32, put_u64, ByteReader, CodecError};
use crate::config::{read_config, read_str, write_config, write_str, ConfigMap};
use crate::tensor::{read_parameters, write_parameters, Parameters};

/// Upper bound on `length` (type tag + payload), 64 MiB.
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

/// How long each side of the initial exchange waits for the peer.
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

const TAG_HELLO: u8 = 0x01;
const TAG_HELLO_ACK: u8 = 0x02;
const TAG_GET_PARAMETERS_INS: u8 = 0x10;
const TAG_GET_PARAMETERS_RES: u8 = 0x11;
const TAG_FIT_INS: u8 = 0x12;
const TAG_FIT_RES: u8 = 0x13;
const TAG_EVALUATE_INS: u8 = 0x14;
const TAG_EVALUATE_RES: u8 = 0x15;
const TAG_DISCONNECT: u8 = 0x20;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("transport failure: {0}")]
    Io(#[from] io::Error),
    /// End of stream at a frame boundary — the orderly way a peer vanishes.
    #[error("connection closed by peer")]
    ConnectionClosed,
    #[error("frame of {size} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")]
    Oversize { size: u64 },
    #[error("frame length zero leaves no room for a type tag")]
    EmptyFrame,
    #[error("unknown message type tag 0x{0:02x}")]
    UnknownTypeTag(u8),
    #[error("malformed {kind} payload: {source}")]
    MalformedPayload {
        kind: &'static str,
        source: CodecError,
    },
    #[error("expected {expected}, peer sent {got}")]
    UnexpectedMessage {
        expected: &'static str,
        got: &'static str,
    },
    #[error("peer refused the connection: {0}")]
    Rejected(DisconnectReason),
}

/// Why a `Disconnect` was sent; carried as a single payload byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisconnectReason {
    Shutdown,
    DuplicateClientId,
    ProtocolViolation,
}

impl DisconnectReason {
    pub fn code(self) -> u8 {
        match self {
            DisconnectReason::Shutdown => 0,
            DisconnectReason::DuplicateClientId => 1,
            DisconnectReason::ProtocolViolation => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DisconnectReason::Shutdown),
            1 => Some(DisconnectReason::DuplicateClientId),
            2 => Some(DisconnectReason::ProtocolViolation),
            _ => None,
        }
    }
}

impl std::fmt::Display for DisconnectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DisconnectReason::Shutdown => "server shutting down",
            DisconnectReason::DuplicateClientId => "client id already registered",
            DisconnectReason::ProtocolViolation => "protocol violation",
        })
    }
}

/// First message on a connection, client → server.
#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub client_id: String,
    pub capabilities: ConfigMap,
}

/// Training instruction: the current global model plus hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FitIns {
    pub parameters: Parameters,
    pub config: ConfigMap,
}

/// Training result: updated model, how many examples backed it, metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRes {
    pub parameters: Parameters,
    pub num_examples: u64,
    pub metrics: ConfigMap,
}

/// Evaluation instruction: the model to score plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateIns {
    pub parameters: Parameters,
    pub config: ConfigMap,
}

/// Evaluation result over the client's held-out examples.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateRes {
    pub loss: f64,
    pub num_examples: u64,
    pub metrics: ConfigMap,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    HelloAck,
    GetParametersIns,
    GetParametersRes(Parameters),
    FitIns(FitIns),
    FitRes(FitRes),
    EvaluateIns(EvaluateIns),
    EvaluateRes(EvaluateRes),
    Disconnect { reason: DisconnectReason },
}

impl Message {
    pub fn type_tag(&self) -> u8 {
        match self {
            Message::Hello(_) => TAG_HELLO,
            Message::HelloAck => TAG_HELLO_ACK,
            Message::GetParametersIns => TAG_GET_PARAMETERS_INS,
            Message::GetParametersRes(_) => TAG_GET_PARAMETERS_RES,
            Message::FitIns(_) => TAG_FIT_INS,
            Message::FitRes(_) => TAG_FIT_RES,
            Message::EvaluateIns(_) => TAG_EVALUATE_INS,
            Message::EvaluateRes(_) => TAG_EVALUATE_RES,
            Message::Disconnect { .. } => TAG_DISCONNECT,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::Hello(_) => "Hello",
            Message::HelloAck => "HelloAck",
            Message::GetParametersIns => "GetParametersIns",
            Message::GetParametersRes(_) => "GetParametersRes",
            Message::FitIns(_) => "FitIns",
            Message::FitRes(_) => "FitRes",
            Message::EvaluateIns(_) => "EvaluateIns",
            Message::EvaluateRes(_) => "EvaluateRes",
            Message::Disconnect { .. } => "Disconnect",
        }
    }
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Hello(h) => {
            write_str(&mut out, &h.client_id);
            write_config(&mut out, &h.capabilities);
        }
        Message::HelloAck | Message::GetParametersIns => {}
        Message::GetParametersRes(p) => write_parameters(&mut out, p),
        Message::FitIns(f) => {
            write_parameters(&mut out, &f.parameters);
            write_config(&mut out, &f.config);
        }
        Message::FitRes(f) => {
            write_parameters(&mut out, &f.parameters);
            put_u64(&mut out, f.num_examples);
            write_config(&mut out, &f.metrics);
        }
        Message::EvaluateIns(e) => {
            write_parameters(&mut out, &e.parameters);
            write_config(&mut out, &e.config);
        }
        Message::EvaluateRes(e) => {
            put_f64(&mut out, e.loss);
            put_u64(&mut out, e.num_examples);
            write_config(&mut out, &e.metrics);
        }
        Message::Disconnect { reason } => out.push(reason.code()),
    }
    out
}

fn decode_payload(tag: u8, bytes: &[u8]) -> Result<Message, ProtocolError> {
    fn parse<T>(
        kind: &'static str,
        bytes: &[u8],
        f: impl FnOnce(&mut ByteReader) -> Result<T, CodecError>,
    ) -> Result<T, ProtocolError> {
        let mut r = ByteReader::new(bytes);
        let value = f(&mut r)
            .and_then(|v| r.finish().map(|()| v))
            .map_err(|source| ProtocolError::MalformedPayload { kind, source })?;
        Ok(value)
    }

    match tag {
        TAG_HELLO => parse("Hello", bytes, |r| {
            Ok(Message::Hello(Hello {
                client_id: read_str(r)?,
                capabilities: read_config(r)?,
            }))
        }),
        TAG_HELLO_ACK => parse("HelloAck", bytes, |_| Ok(Message::HelloAck)),
        TAG_GET_PARAMETERS_INS => {
            parse("GetParametersIns", bytes, |_| Ok(Message::GetParametersIns))
        }
        TAG_GET_PARAMETERS_RES => parse("GetParametersRes", bytes, |r| {
            Ok(Message::GetParametersRes(read_parameters(r)?))
        }),
        TAG_FIT_INS => parse("FitIns", bytes, |r| {
            Ok(Message::FitIns(FitIns {
                parameters: read_parameters(r)?,
                config: read_config(r)?,
            }))
        }),
        TAG_FIT_RES => parse("FitRes", bytes, |r| {
            Ok(Message::FitRes(FitRes {
                parameters: read_parameters(r)?,
                num_examples: r.u64()?,
                metrics: read_config(r)?,
            }))
        }),
        TAG_EVALUATE_INS => parse("EvaluateIns", bytes, |r| {
            Ok(Message::EvaluateIns(EvaluateIns {
                parameters: read_parameters(r)?,
                config: read_config(r)?,
            }))
        }),
        TAG_EVALUATE_RES => parse("EvaluateRes", bytes, |r| {
            let loss = r.f64()?;
            if !loss.is_finite() {
                return Err(CodecError::NonFiniteValue { index: 0 });
            }
            Ok(Message::EvaluateRes(EvaluateRes {
                loss,
                num_examples: r.u64()?,
                metrics: read_config(r)?,
            }))
        }),
        TAG_DISCONNECT => parse("Disconnect", bytes, |r| {
            let code = r.u8()?;
            let reason = DisconnectReason::from_code(code).ok_or_else(|| {
                CodecError::MalformedEncoding(format!("disconnect reason 0x{code:02x}"))
            })?;
            Ok(Message::Disconnect { reason })
        }),
        t => Err(ProtocolError::UnknownTypeTag(t)),
    }
}

/// Serialize a complete frame, length prefix included.
pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    let payload = encode_payload(msg);
    let length = 1 + payload.len();
    if length > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize {
            size: length as u64,
        });
    }
    let mut out = Vec::with_capacity(4 + length);
    put_u32(&mut out, length as u32);
    out.push(msg.type_tag());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Write one frame and flush, so the peer never waits on a buffered tail.
pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<(), ProtocolError> {
    let frame = encode_frame(msg)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

/// Read one frame. End of stream before the first length byte is the
/// orderly [`ProtocolError::ConnectionClosed`]; end of stream anywhere
/// later is an I/O error, because the peer died mid-message.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Message, ProtocolError> {
    let mut len_buf = [0u8; 4];
    read_exact_or_closed(r, &mut len_buf)?;
    let length = u32::from_be_bytes(len_buf) as usize;
    if length == 0 {
        return Err(ProtocolError::EmptyFrame);
    }
    if length > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize {
            size: length as u64,
        });
    }
    let mut body = vec![0u8; length];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            "connection closed mid-frame",
        )),
        _ => ProtocolError::Io(e),
    })?;
    decode_payload(body[0], &body[1..])
}

fn read_exact_or_closed<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ProtocolError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Err(ProtocolError::ConnectionClosed),
            Ok(0) => {
                return Err(ProtocolError::Io(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "connection closed mid-frame",
                )))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Byte transport the protocol runs over: TCP between processes, or an
/// in-memory pair inside one. Read timeouts surface as `TimedOut` /
/// `WouldBlock` I/O errors from `read`.
pub trait ByteChannel: Read + Write + Send {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()>;
}

impl ByteChannel for TcpStream {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        TcpStream::set_read_timeout(self, timeout)
    }
}

/// One direction-pair of an in-memory duplex transport.
///
/// Writes become chunks on an unbounded queue; reads drain chunks byte by
/// byte, so partial reads and reassembly take the same code path TCP does.
pub struct DuplexChannel {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
    pending: std::collections::VecDeque<u8>,
    read_timeout: Option<Duration>,
}

/// Two connected ends: bytes written to one are read from the other.
pub fn duplex_pair() -> (DuplexChannel, DuplexChannel) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    let mk = |tx, rx| DuplexChannel {
        tx,
        rx,
        pending: std::collections::VecDeque::new(),
        read_timeout: None,
    };
    (mk(tx_a, rx_a), mk(tx_b, rx_b))
}

impl Read for DuplexChannel {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        while self.pending.is_empty() {
            let chunk = match self.read_timeout {
                None => self.rx.recv().ok(),
                Some(t) => match self.rx.recv_timeout(t) {
                    Ok(bytes) => Some(bytes),
                    Err(mpsc::RecvTimeoutError::Timeout) => {
                        return Err(io::Error::new(io::ErrorKind::TimedOut, "read timed out"))
                    }
                    Err(mpsc::RecvTimeoutError::Disconnected) => None,
                },
            };
            match chunk {
                Some(bytes) => self.pending.extend(bytes),
                // Peer dropped: everything already queued was drained above,
                // so this is a clean end of stream.
                None => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len());
        for slot in buf.iter_mut().take(n) {
            *slot = self.pending.pop_front().expect("pending non-empty");
        }
        Ok(n)
    }
}

impl Write for DuplexChannel {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer channel closed"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl ByteChannel for DuplexChannel {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.read_timeout = timeout;
        Ok(())
    }
}

/// Client side of the opening exchange: send `Hello`, wait for the ack.
pub fn handshake_client<C: ByteChannel>(
    ch: &mut C,
    client_id: &str,
    capabilities: ConfigMap,
) -> Result<(), ProtocolError> {
    write_frame(
        ch,
        &Message::Hello(Hello {
            client_id: client_id.to_owned(),
            capabilities,
        }),
    )?;
    ch.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let reply = read_frame(ch);
    ch.set_read_timeout(None)?;
    match reply? {
        Message::HelloAck => Ok(()),
        Message::Disconnect { reason } => Err(ProtocolError::Rejected(reason)),
        other => Err(ProtocolError::UnexpectedMessage {
            expected: "HelloAck",
            got: other.kind_name(),
        }),
    }
}

/// Server side of the opening exchange. `accept` inspects the `Hello`
/// (typically for an id collision); on `Ok` the client gets `HelloAck`,
/// on `Err(reason)` it gets `Disconnect` and this returns `Rejected`.
pub fn handshake_server<C: ByteChannel>(
    ch: &mut C,
    accept: impl FnOnce(&Hello) -> Result<(), DisconnectReason>,
) -> Result<Hello, ProtocolError> {
    ch.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let first = read_frame(ch);
    ch.set_read_timeout(None)?;
    let hello = match first? {
        Message::Hello(h) => h,
        other => {
            let got = other.kind_name();
            let _ = write_frame(
                ch,
                &Message::Disconnect {
                    reason: DisconnectReason::ProtocolViolation,
                },
            );
            return Err(ProtocolError::UnexpectedMessage {
                expected: "Hello",
                got,
            });
        }
    };
    match accept(&hello) {
        Ok(()) => {
            write_frame(ch, &Message::HelloAck)?;
            Ok(hello)
        }
        Err(reason) => {
            write_frame(ch, &Message::Disconnect { reason })?;
            Err(ProtocolError::Rejected(reason))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn frame(msg: &Message) -> Vec<u8> {
        encode_frame(msg).expect("encodable")
    }

    #[test]
    fn bodiless_messages_golden_frames() {
        assert_eq!(frame(&Message::GetParametersIns), [0, 0, 0, 1, 0x10]);
        assert_eq!(frame(&Message::HelloAck), [0, 0, 0, 1, 0x02]);
    }

    #[test]
    fn disconnect_golden_frame() {
        let msg = Message::Disconnect {
            reason: DisconnectReason::DuplicateClientId,
        };
        assert_eq!(frame(&msg), [0, 0, 0, 2, 0x20, 0x01]);
    }

    #[test]
    fn hello_golden_frame() {
        let msg = Message::Hello(Hello {
            client_id: "a".into(),
            capabilities: ConfigMap::new(),
        });
        assert_eq!(frame(&msg), [0, 0, 0, 8, 0x01, 0, 1, b'a', 0, 0, 0, 0]);
    }

    #[test]
    fn fit_res_golden_frame() {
        let msg = Message::FitRes(FitRes {
            parameters: Parameters::default(),
            num_examples: 3,
            metrics: ConfigMap::new(),
        });
        assert_eq!(
            frame(&msg),
            [0, 0, 0, 17, 0x13, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 3, 0, 0, 0, 0]
        );
    }

    fn sample_messages() -> Vec<Message> {
        let params = Parameters {
            tensors: vec![
                Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap(),
                Tensor::scalar(7.25),
            ],
        };
        let mut cfg = ConfigMap::new();
        cfg.insert_int("local_epochs", 5);
        cfg.insert_float("learning_rate", 0.01);
        let mut metrics = ConfigMap::new();
        metrics.insert_float("accuracy", 0.75);
        metrics.insert_bool("failed", false);
        vec![
            Message::Hello(Hello {
                client_id: "jetson-01".into(),
                capabilities: cfg.clone(),
            }),
            Message::HelloAck,
            Message::GetParametersIns,
            Message::GetParametersRes(params.clone()),
            Message::FitIns(FitIns {
                parameters: params.clone(),
                config: cfg.clone(),
            }),
            Message::FitRes(FitRes {
                parameters: params.clone(),
                num_examples: 400,
                metrics: metrics.clone(),
            }),
            Message::EvaluateIns(EvaluateIns {
                parameters: params,
                config: cfg,
            }),
            Message::EvaluateRes(EvaluateRes {
                loss: 0.42,
                num_examples: 100,
                metrics,
            }),
            Message::Disconnect {
                reason: DisconnectReason::Shutdown,
            },
        ]
    }

    #[test]
    fn every_variant_roundtrips() {
        for msg in sample_messages() {
            let bytes = frame(&msg);
            let decoded = read_frame(&mut Cursor::new(&bytes)).expect("decodes");
            assert_eq!(decoded, msg);
        }
    }

    #[test]
    fn frames_read_back_to_back() {
        let mut stream = Vec::new();
        for msg in sample_messages() {
            stream.extend_from_slice(&frame(&msg));
        }
        let mut cursor = Cursor::new(&stream);
        for expected in sample_messages() {
            assert_eq!(read_frame(&mut cursor).unwrap(), expected);
        }
        assert!(matches!(
            read_frame(&mut cursor),
            Err(ProtocolError::ConnectionClosed)
        ));
    }

    #[test]
    fn eof_at_boundary_is_closed_but_mid_frame_is_error() {
        let bytes = frame(&Message::GetParametersIns);
        for cut in 1..bytes.len() {
            let err = read_frame(&mut Cursor::new(&bytes[..cut])).unwrap_err();
            assert!(
                matches!(err, ProtocolError::Io(_)),
                "cut at {cut} gave {err:?}"
            );
        }
        assert!(matches!(
            read_frame(&mut Cursor::new(&[] as &[u8])),
            Err(ProtocolError::ConnectionClosed)
        ));
    }

    #[test]
    fn oversize_length_rejected_before_payload_read() {
        // Header only: if the length were trusted we would block on (or
        // allocate) 4 GiB. The error must come from the header alone.
        let bytes = [0xFF, 0xFF, 0xFF, 0xFF];
        match read_frame(&mut Cursor::new(&bytes)) {
            Err(ProtocolError::Oversize { size }) => assert_eq!(size, 0xFFFF_FFFF),
            other => panic!("expected oversize, got {other:?}"),
        }
    }

    #[test]
    fn zero_length_frame_rejected() {
        let bytes = [0, 0, 0, 0];
        assert!(matches!(
            read_frame(&mut Cursor::new(&bytes)),
            Err(ProtocolError::EmptyFrame)
        ));
    }

    #[test]
    fn unknown_tag_rejected() {
        let bytes = [0, 0, 0, 1, 0x7E];
        match read_frame(&mut Cursor::new(&bytes)) {
            Err(ProtocolError::UnknownTypeTag(0x7E)) => {}
            other => panic!("expected unknown tag, got {other:?}"),
        }
    }

    #[test]
    fn unknown_disconnect_reason_rejected() {
        let bytes = [0, 0, 0, 2, 0x20, 0x09];
        assert!(matches!(
            read_frame(&mut Cursor::new(&bytes)),
            Err(ProtocolError::MalformedPayload {
                kind: "Disconnect",
                ..
            })
        ));
    }

    #[test]
    fn trailing_payload_bytes_rejected() {
        let mut bytes = frame(&Message::HelloAck);
        bytes.push(0xAA);
        bytes[3] += 1; // keep the length honest
        assert!(matches!(
            read_frame(&mut Cursor::new(&bytes)),
            Err(ProtocolError::MalformedPayload {
                kind: "HelloAck",
                ..
            })
        ));
    }

    #[test]
    fn non_finite_loss_rejected() {
        let msg = Message::EvaluateRes(EvaluateRes {
            loss: f64::NAN,
            num_examples: 1,
            metrics: ConfigMap::new(),
        });
        let bytes = frame(&msg);
        assert!(matches!(
            read_frame(&mut Cursor::new(&bytes)),
            Err(ProtocolError::MalformedPayload {
                kind: "EvaluateRes",
                ..
            })
        ));
    }

    #[test]
    fn duplex_reassembles_byte_at_a_time_delivery() {
        let (mut a, mut b) = duplex_pair();
        let messages = sample_messages();
        let bytes: Vec<u8> = messages.iter().flat_map(frame).collect();
        let writer = std::thread::spawn(move || {
            for byte in bytes {
                a.write_all(&[byte]).unwrap();
            }
        });
        for expected in &messages {
            assert_eq!(&read_frame(&mut b).unwrap(), expected);
        }
        writer.join().unwrap();
        assert!(matches!(
            read_frame(&mut b),
            Err(ProtocolError::ConnectionClosed)
        ));
    }

    #[test]
    fn duplex_read_timeout_fires() {
        let (mut a, _b) = duplex_pair();
        a.set_read_timeout(Some(Duration::from_millis(20))).unwrap();
        match read_frame(&mut a) {
            Err(ProtocolError::Io(e)) => assert_eq!(e.kind(), io::ErrorKind::TimedOut),
            other => panic!("expected timeout, got {other:?}"),
        }
    }

    #[test]
    fn handshake_accepts_and_acks() {
        let (mut server, mut client) = duplex_pair();
        let t = std::thread::spawn(move || {
            handshake_client(&mut client, "pi-3", ConfigMap::new()).unwrap();
        });
        let hello = handshake_server(&mut server, |_| Ok(())).unwrap();
        assert_eq!(hello.client_id, "pi-3");
        t.join().unwrap();
    }

    #[test]
    fn handshake_rejection_reaches_client() {
        let (mut server, mut client) = duplex_pair();
        let t = std::thread::spawn(move || handshake_client(&mut client, "pi-3", ConfigMap::new()));
        let err = handshake_server(&mut server, |_| Err(DisconnectReason::DuplicateClientId))
            .unwrap_err();
        assert!(matches!(
            err,
            ProtocolError::Rejected(DisconnectReason::DuplicateClientId)
        ));
        match t.join().unwrap() {
            Err(ProtocolError::Rejected(DisconnectReason::DuplicateClientId)) => {}
            other => panic!("client saw {other:?}"),
        }
    }

    #[test]
    fn handshake_rejects_non_hello_opener() {
        let (mut server, mut client) = duplex_pair();
        write_frame(&mut client, &Message::GetParametersIns).unwrap();
        let err = handshake_server(&mut server, |_| Ok(())).unwrap_err();
        assert!(matches!(err, ProtocolError::UnexpectedMessage { .. }));
        match read_frame(&mut client).unwrap() {
            Message::Disconnect { reason } => {
                assert_eq!(reason, DisconnectReason::ProtocolViolation)
            }
            other => panic!("expected disconnect, got {other:?}"),
        }
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(0u32..4, 0..3).prop_flat_map(|shape| {
            let n = shape.iter().product::<u32>() as usize;
            proptest::collection::vec(-1e12f64..1e12, n..=n)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    fn arb_parameters() -> impl Strategy<Value = Parameters> {
        proptest::collection::vec(arb_tensor(), 0..4).prop_map(|tensors| Parameters { tensors })
    }

    fn arb_config() -> impl Strategy<Value = ConfigMap> {
        proptest::collection::vec(
            (
                "[a-z_]{1,10}",
                prop_oneof![
                    any::<bool>().prop_map(ConfigValue::Bool),
                    any::<i64>().prop_map(ConfigValue::Int),
                    (-1e15f64..1e15).prop_map(ConfigValue::Float),
                    "[ -~]{0,12}".prop_map(ConfigValue::Str),
                ],
            ),
            0..5,
        )
        .prop_map(|pairs| {
            let mut c = ConfigMap::new();
            for (k, v) in pairs {
                c.insert(k, v);
            }
            c
        })
    }

    use crate::config::ConfigValue;

    fn arb_message() -> impl Strategy<Value = Message> {
        prop_oneof![
            ("[a-z0-9-]{1,12}", arb_config()).prop_map(|(client_id, capabilities)| {
                Message::Hello(Hello {
                    client_id,
                    capabilities,
                })
            }),
            Just(Message::HelloAck),
            Just(Message::GetParametersIns),
            arb_parameters().prop_map(Message::GetParametersRes),
            (arb_parameters(), arb_config())
                .prop_map(|(parameters, config)| Message::FitIns(FitIns { parameters, config })),
            (arb_parameters(), any::<u64>(), arb_config()).prop_map(
                |(parameters, num_examples, metrics)| {
                    Message::FitRes(FitRes {
                        parameters,
                        num_examples,
                        metrics,
                    })
                }
            ),
            (arb_parameters(), arb_config()).prop_map(|(parameters, config)| {
                Message::EvaluateIns(EvaluateIns { parameters, config })
            }),
            ((-1e9f64..1e9), any::<u64>(), arb_config()).prop_map(
                |(loss, num_examples, metrics)| {
                    Message::EvaluateRes(EvaluateRes {
                        loss,
                        num_examples,
                        metrics,
                    })
                }
            ),
            prop_oneof![
                Just(DisconnectReason::Shutdown),
                Just(DisconnectReason::DuplicateClientId),
                Just(DisconnectReason::ProtocolViolation),
            ]
            .prop_map(|reason| Message::Disconnect { reason }),
        ]
    }

    proptest! {
        #[test]
        fn arbitrary_messages_roundtrip(msg in arb_message()) {
            let bytes = frame(&msg);
            let decoded = read_frame(&mut Cursor::new(&bytes)).expect("decodes");
            prop_assert_eq!(decoded, msg);
        }

        #[test]
        fn decoding_arbitrary_bytes_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let _ = read_frame(&mut Cursor::new(&bytes));
        }

        #[test]
        fn decoding_arbitrary_framed_payloads_never_panics(
            tag in any::<u8>(),
            payload in proptest::collection::vec(any::<u8>(), 0..96),
        ) {
            let mut bytes = Vec::new();
            put_u32(&mut bytes, 1 + payload.len() as u32);
            bytes.push(tag);
            bytes.extend_from_slice(&payload);
            let _ = read_frame(&mut Cursor::new(&bytes));
        }
    }
}
