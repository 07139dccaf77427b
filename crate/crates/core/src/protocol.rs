//! Binary wire protocol between the edge encoder and the server decoder.
//!
//! Every message is one frame: a fixed 42-byte little-endian header
//! followed by `payload_len` bytes. DATA frames carry packed bottleneck
//! symbols plus the side information (s, b, dims, sigma) the receiver
//! needs to dequantize; RESULT frames carry task outputs and server
//! timing; PERF_REPORT frames carry the per-configuration decoder times
//! used by the controller (an empty report is a request for one).
//!
//! The layout is bit-exact and guarded by golden fixture files; any
//! change here must be a new protocol version.

use std::collections::VecDeque;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SPLC";
pub const VERSION: u8 = 1;
/// Fixed wire size of every frame header.
pub const HEADER_LEN: usize = 42;
/// Upper bound on declared payload length (sanity cap, far above any
/// real frame).
pub const MAX_PAYLOAD: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Data = 0,
    Result = 1,
    PerfReport = 2,
}

impl MsgType {
    fn from_u8(v: u8) -> Result<Self, ProtocolError> {
        match v {
            0 => Ok(MsgType::Data),
            1 => Ok(MsgType::Result),
            2 => Ok(MsgType::PerfReport),
            other => Err(ProtocolError::InvariantViolation(format!(
                "unknown message type {other}"
            ))),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0} (this build speaks {VERSION})")]
    UnsupportedVersion(u8),
    /// Not enough bytes yet; the decoder can resume once `needed` total
    /// bytes are available.
    #[error("truncated frame: have {have} bytes, need {needed}")]
    Truncated { have: usize, needed: usize },
    #[error("protocol invariant violated: {0}")]
    InvariantViolation(String),
    #[error("transport closed mid-frame (last complete seq {last_seq:?})")]
    ClosedMidFrame { last_seq: Option<u32> },
    #[error("transport: {0}")]
    Transport(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// The fixed-size frame header. All multi-byte fields are little-endian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameHeader {
    pub msg_type: MsgType,
    pub seq: u32,
    pub s: u8,
    pub b: u8,
    pub dims: [u16; 3],
    pub sigma: f32,
    pub t_capture_us: u64,
    pub t_encode_done_us: u64,
    pub payload_len: u32,
}

/// ceil(C*H*W*b / 8): the packed-payload size law for DATA frames.
pub fn data_payload_len(dims: [u16; 3], b: u8) -> u32 {
    let numel = dims[0] as u64 * dims[1] as u64 * dims[2] as u64;
    ((numel * b as u64).div_ceil(8)) as u32
}

impl FrameHeader {
    pub fn data(
        seq: u32,
        s: u8,
        b: u8,
        dims: [u16; 3],
        sigma: f32,
        t_capture_us: u64,
        t_encode_done_us: u64,
    ) -> Self {
        FrameHeader {
            msg_type: MsgType::Data,
            seq,
            s,
            b,
            dims,
            sigma,
            t_capture_us,
            t_encode_done_us,
            payload_len: data_payload_len(dims, b),
        }
    }

    /// Header for a control-plane frame (RESULT / PERF_REPORT): the
    /// codec side-information fields are zeroed.
    pub fn control(msg_type: MsgType, seq: u32, payload_len: u32) -> Self {
        FrameHeader {
            msg_type,
            seq,
            s: 0,
            b: 0,
            dims: [0; 3],
            sigma: 0.0,
            t_capture_us: 0,
            t_encode_done_us: 0,
            payload_len,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.payload_len > MAX_PAYLOAD {
            return Err(ProtocolError::InvariantViolation(format!(
                "payload_len {} exceeds cap {MAX_PAYLOAD}",
                self.payload_len
            )));
        }
        if self.msg_type == MsgType::Data {
            if self.s < 1 {
                return Err(ProtocolError::InvariantViolation(
                    "DATA frame requires s >= 1".into(),
                ));
            }
            if !(1..=8).contains(&self.b) {
                return Err(ProtocolError::InvariantViolation(format!(
                    "DATA frame bits {} outside 1..=8",
                    self.b
                )));
            }
            let expect = data_payload_len(self.dims, self.b);
            if self.payload_len != expect {
                return Err(ProtocolError::InvariantViolation(format!(
                    "DATA payload_len {} != ceil(C*H*W*b/8) = {expect} for dims {:?} at {} bits",
                    self.payload_len, self.dims, self.b
                )));
            }
            if !self.sigma.is_finite() || self.sigma < 0.0 {
                return Err(ProtocolError::InvariantViolation(format!(
                    "DATA sigma {} must be finite and non-negative",
                    self.sigma
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5] = self.msg_type as u8;
        out[6..10].copy_from_slice(&self.seq.to_le_bytes());
        out[10] = self.s;
        out[11] = self.b;
        out[12..14].copy_from_slice(&self.dims[0].to_le_bytes());
        out[14..16].copy_from_slice(&self.dims[1].to_le_bytes());
        out[16..18].copy_from_slice(&self.dims[2].to_le_bytes());
        out[18..22].copy_from_slice(&self.sigma.to_le_bytes());
        out[22..30].copy_from_slice(&self.t_capture_us.to_le_bytes());
        out[30..38].copy_from_slice(&self.t_encode_done_us.to_le_bytes());
        out[38..42].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() < HEADER_LEN {
            return Err(ProtocolError::Truncated { have: bytes.len(), needed: HEADER_LEN });
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[0..4]);
        if magic != MAGIC {
            return Err(ProtocolError::BadMagic(magic));
        }
        if bytes[4] != VERSION {
            return Err(ProtocolError::UnsupportedVersion(bytes[4]));
        }
        let le16 = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let le32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let le64 = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let header = FrameHeader {
            msg_type: MsgType::from_u8(bytes[5])?,
            seq: le32(6),
            s: bytes[10],
            b: bytes[11],
            dims: [le16(12), le16(14), le16(16)],
            sigma: f32::from_le_bytes(bytes[18..22].try_into().expect("4 bytes")),
            t_capture_us: le64(22),
            t_encode_done_us: le64(30),
            payload_len: le32(38),
        };
        header.validate()?;
        Ok(header)
    }
}

/// Serialize one frame. The header's declared payload length must match
/// the payload handed in; nothing is written otherwise.
pub fn encode_frame(header: &FrameHeader, payload: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    header.validate()?;
    if header.payload_len as usize != payload.len() {
        return Err(ProtocolError::InvariantViolation(format!(
            "header declares {} payload bytes but {} were provided",
            header.payload_len,
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Parse one frame from the front of `bytes`. Returns the header, the
/// payload, and the number of bytes consumed (trailing bytes are left
/// for the caller).
pub fn decode_frame(bytes: &[u8]) -> Result<(FrameHeader, Vec<u8>, usize), ProtocolError> {
    let header = FrameHeader::decode(bytes)?;
    let total = HEADER_LEN + header.payload_len as usize;
    if bytes.len() < total {
        return Err(ProtocolError::Truncated { have: bytes.len(), needed: total });
    }
    Ok((header, bytes[HEADER_LEN..total].to_vec(), total))
}

/// Payload of a RESULT frame: server timing plus the task output vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultMessage {
    /// Echoes the seq of the DATA frame this result answers.
    pub seq: u32,
    pub t_server_recv_us: u64,
    pub t_decode_done_us: u64,
    pub decoder_time_us: u32,
    pub result: Vec<f32>,
}

impl ResultMessage {
    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let len = u16::try_from(self.result.len()).map_err(|_| {
            ProtocolError::InvariantViolation(format!(
                "result vector of {} values exceeds u16",
                self.result.len()
            ))
        })?;
        let mut out = Vec::with_capacity(4 + 8 + 8 + 4 + 2 + 4 * self.result.len());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.t_server_recv_us.to_le_bytes());
        out.extend_from_slice(&self.t_decode_done_us.to_le_bytes());
        out.extend_from_slice(&self.decoder_time_us.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        for v in &self.result {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        const FIXED: usize = 4 + 8 + 8 + 4 + 2;
        if bytes.len() < FIXED {
            return Err(ProtocolError::Truncated { have: bytes.len(), needed: FIXED });
        }
        let seq = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
        let t_server_recv_us = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let t_decode_done_us = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let decoder_time_us = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
        let n = u16::from_le_bytes([bytes[24], bytes[25]]) as usize;
        let needed = FIXED + 4 * n;
        if bytes.len() != needed {
            return Err(ProtocolError::InvariantViolation(format!(
                "RESULT payload is {} bytes, expected {needed} for {n} values",
                bytes.len()
            )));
        }
        let result = (0..n)
            .map(|i| {
                let o = FIXED + 4 * i;
                f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"))
            })
            .collect();
        Ok(ResultMessage { seq, t_server_recv_us, t_decode_done_us, decoder_time_us, result })
    }
}

/// One per-configuration decoder timing, as carried by PERF_REPORT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerfEntry {
    pub s: u8,
    pub b: u8,
    pub decoder_time_us: u32,
}

pub fn encode_perf_report(entries: &[PerfEntry]) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 * entries.len());
    for e in entries {
        out.push(e.s);
        out.push(e.b);
        out.extend_from_slice(&e.decoder_time_us.to_le_bytes());
    }
    out
}

pub fn decode_perf_report(bytes: &[u8]) -> Result<Vec<PerfEntry>, ProtocolError> {
    if bytes.len() % 6 != 0 {
        return Err(ProtocolError::InvariantViolation(format!(
            "PERF_REPORT payload of {} bytes is not a whole number of 6-byte entries",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(6)
        .map(|c| PerfEntry {
            s: c[0],
            b: c[1],
            decoder_time_us: u32::from_le_bytes([c[2], c[3], c[4], c[5]]),
        })
        .collect())
}

/// Ordered reliable byte pipe; the only thing a session needs from the
/// outside world. `recv` blocks for at least one byte and returns 0 only
/// on orderly close.
pub trait ByteTransport {
    fn send(&mut self, bytes: &[u8]) -> Result<(), ProtocolError>;
    fn recv(&mut self, buf: &mut [u8]) -> Result<usize, ProtocolError>;
}

/// Which half of the split this session speaks for. The edge emits DATA
/// (and perf-report requests); the server emits RESULT and PERF_REPORT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Edge,
    Server,
}

/// One fully parsed inbound message.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Data { header: FrameHeader, payload: Vec<u8> },
    Result(ResultMessage),
    PerfReport(Vec<PerfEntry>),
    /// An empty PERF_REPORT frame: the peer asks for a fresh report.
    PerfRequest,
}

/// Framing layer over a byte transport: assigns strictly increasing send
/// sequence numbers, reassembles arbitrarily fragmented reads, and
/// demultiplexes inbound frames by message type.
pub struct StreamSession<Tr> {
    transport: Tr,
    role: Role,
    recv_buf: VecDeque<u8>,
    next_send_seq: u32,
    last_recv_seq: Option<u32>,
}

impl<Tr: ByteTransport> StreamSession<Tr> {
    pub fn new(transport: Tr, role: Role) -> Self {
        StreamSession {
            transport,
            role,
            recv_buf: VecDeque::new(),
            next_send_seq: 0,
            last_recv_seq: None,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn transport_mut(&mut self) -> &mut Tr {
        &mut self.transport
    }

    fn next_seq(&mut self) -> u32 {
        let seq = self.next_send_seq;
        self.next_send_seq += 1;
        seq
    }

    fn require_role(&self, need: Role, what: &str) -> Result<(), ProtocolError> {
        if self.role != need {
            return Err(ProtocolError::InvariantViolation(format!(
                "{what} may only be sent by the {need:?} side"
            )));
        }
        Ok(())
    }

    /// Send one quantized bottleneck frame. Returns the assigned seq.
    #[allow(clippy::too_many_arguments)]
    pub fn send_data(
        &mut self,
        s: u8,
        b: u8,
        dims: [u16; 3],
        sigma: f32,
        t_capture_us: u64,
        t_encode_done_us: u64,
        payload: &[u8],
    ) -> Result<u32, ProtocolError> {
        self.require_role(Role::Edge, "DATA")?;
        let seq = self.next_seq();
        let header = FrameHeader::data(seq, s, b, dims, sigma, t_capture_us, t_encode_done_us);
        let bytes = encode_frame(&header, payload)?;
        self.transport.send(&bytes)?;
        Ok(seq)
    }

    pub fn send_result(&mut self, result: &ResultMessage) -> Result<u32, ProtocolError> {
        self.require_role(Role::Server, "RESULT")?;
        let payload = result.encode()?;
        let seq = self.next_seq();
        let header = FrameHeader::control(MsgType::Result, seq, payload.len() as u32);
        let bytes = encode_frame(&header, &payload)?;
        self.transport.send(&bytes)?;
        Ok(seq)
    }

    pub fn send_perf_report(&mut self, entries: &[PerfEntry]) -> Result<u32, ProtocolError> {
        self.require_role(Role::Server, "PERF_REPORT")?;
        if entries.is_empty() {
            // an empty report is the request form; see send_perf_request
            return Err(ProtocolError::InvariantViolation(
                "PERF_REPORT from the server must carry at least one entry".into(),
            ));
        }
        let payload = encode_perf_report(entries);
        let seq = self.next_seq();
        let header = FrameHeader::control(MsgType::PerfReport, seq, payload.len() as u32);
        let bytes = encode_frame(&header, &payload)?;
        self.transport.send(&bytes)?;
        Ok(seq)
    }

    /// Ask the server for a fresh PERF_REPORT (an empty report frame).
    pub fn send_perf_request(&mut self) -> Result<u32, ProtocolError> {
        self.require_role(Role::Edge, "PERF_REPORT request")?;
        let seq = self.next_seq();
        let header = FrameHeader::control(MsgType::PerfReport, seq, 0);
        let bytes = encode_frame(&header, &[])?;
        self.transport.send(&bytes)?;
        Ok(seq)
    }

    /// Block until one whole message arrives. `Ok(None)` is an orderly
    /// close on a frame boundary; closing mid-frame is an error carrying
    /// the last completely received seq.
    pub fn recv_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        loop {
            let frame = {
                self.recv_buf.make_contiguous();
                let (head, _) = self.recv_buf.as_slices();
                match decode_frame(head) {
                    Ok(parsed) => Some(parsed),
                    Err(ProtocolError::Truncated { .. }) => None,
                    Err(e) => return Err(e),
                }
            };
            if let Some((header, payload, consumed)) = frame {
                self.recv_buf.drain(..consumed);
                if let Some(last) = self.last_recv_seq {
                    if header.seq <= last {
                        return Err(ProtocolError::InvariantViolation(format!(
                            "inbound seq {} does not increase past {last}",
                            header.seq
                        )));
                    }
                }
                self.last_recv_seq = Some(header.seq);
                let message = match header.msg_type {
                    MsgType::Data => Message::Data { header, payload },
                    MsgType::Result => Message::Result(ResultMessage::decode(&payload)?),
                    MsgType::PerfReport if payload.is_empty() => Message::PerfRequest,
                    MsgType::PerfReport => Message::PerfReport(decode_perf_report(&payload)?),
                };
                return Ok(Some(message));
            }
            let mut chunk = [0u8; 4096];
            let n = self.transport.recv(&mut chunk)?;
            if n == 0 {
                if self.recv_buf.is_empty() {
                    return Ok(None);
                }
                return Err(ProtocolError::ClosedMidFrame { last_seq: self.last_recv_seq });
            }
            self.recv_buf.extend(&chunk[..n]);
        }
    }
}

/// In-memory bidirectional transport pair for tests and in-process runs.
pub mod loopback {
    use super::{ByteTransport, ProtocolError};
    use std::collections::VecDeque;
    use std::sync::{Arc, Condvar, Mutex};

    #[derive(Default)]
    struct Pipe {
        buf: Mutex<(VecDeque<u8>, bool)>, // bytes in flight, closed flag
        ready: Condvar,
    }

    /// One direction of a loopback pair.
    pub struct LoopbackTransport {
        tx: Arc<Pipe>,
        rx: Arc<Pipe>,
        /// Deliver at most this many bytes per recv call (fragmentation
        /// torture knob); 0 means unlimited.
        pub max_chunk: usize,
    }

    /// Two connected endpoints: bytes sent on one arrive at the other.
    pub fn pair() -> (LoopbackTransport, LoopbackTransport) {
        let a = Arc::new(Pipe::default());
        let b = Arc::new(Pipe::default());
        (
            LoopbackTransport { tx: a.clone(), rx: b.clone(), max_chunk: 0 },
            LoopbackTransport { tx: b, rx: a, max_chunk: 0 },
        )
    }

    impl LoopbackTransport {
        /// Signal orderly close to the peer.
        pub fn close(&mut self) {
            let mut guard = self.tx.buf.lock().expect("pipe lock");
            guard.1 = true;
            self.tx.ready.notify_all();
        }
    }

    impl ByteTransport for LoopbackTransport {
        fn send(&mut self, bytes: &[u8]) -> Result<(), ProtocolError> {
            let mut guard = self.tx.buf.lock().expect("pipe lock");
            if guard.1 {
                return Err(ProtocolError::Transport("send on closed loopback".into()));
            }
            guard.0.extend(bytes);
            self.tx.ready.notify_all();
            Ok(())
        }

        fn recv(&mut self, buf: &mut [u8]) -> Result<usize, ProtocolError> {
            let mut guard = self.rx.buf.lock().expect("pipe lock");
            loop {
                if !guard.0.is_empty() {
                    let limit = if self.max_chunk == 0 { buf.len() } else { self.max_chunk.min(buf.len()) };
                    let n = limit.min(guard.0.len());
                    for slot in buf.iter_mut().take(n) {
                        *slot = guard.0.pop_front().expect("n bounded by len");
                    }
                    return Ok(n);
                }
                if guard.1 {
                    return Ok(0);
                }
                guard = self.rx.ready.wait(guard).expect("pipe lock");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golden_header() -> FrameHeader {
        FrameHeader::data(7, 2, 2, [6, 16, 16], 1.0, 0, 0)
    }

    #[test]
    fn golden_data_header_bytes() {
        let header = golden_header();
        assert_eq!(header.payload_len, 384);
        let bytes = header.encode();
        let expect_prefix: [u8; 22] = [
            0x53, 0x50, 0x4C, 0x43, 0x01, 0x00, 0x07, 0x00, 0x00, 0x00, 0x02, 0x02, 0x06,
            0x00, 0x10, 0x00, 0x10, 0x00, 0x00, 0x00, 0x80, 0x3F,
        ];
        assert_eq!(&bytes[..22], &expect_prefix);
        assert_eq!(&bytes[22..38], &[0u8; 16]); // zero timestamps
        assert_eq!(&bytes[38..42], &384u32.to_le_bytes());
    }

    #[test]
    fn header_roundtrip_all_types() {
        let cases = [
            golden_header(),
            FrameHeader::data(u32::MAX, 4, 8, [6, 96, 96], 0.125, 123_456, 789_012),
            FrameHeader::control(MsgType::Result, 3, 30),
            FrameHeader::control(MsgType::PerfReport, 9, 96),
        ];
        for h in cases {
            let decoded = FrameHeader::decode(&h.encode()).unwrap();
            assert_eq!(decoded, h);
        }
    }

    #[test]
    fn frame_roundtrip_with_payload() {
        let payload: Vec<u8> = (0..384u32).map(|i| (i * 7 % 256) as u8).collect();
        let bytes = encode_frame(&golden_header(), &payload).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 384);
        let (h, p, consumed) = decode_frame(&bytes).unwrap();
        assert_eq!(h, golden_header());
        assert_eq!(p, payload);
        assert_eq!(consumed, bytes.len());
    }

    #[test]
    fn payload_law_violations_rejected_before_writing() {
        let mut h = golden_header();
        h.payload_len = 383;
        assert!(matches!(
            encode_frame(&h, &vec![0; 383]),
            Err(ProtocolError::InvariantViolation(_))
        ));
        // declared length differing from the actual payload also rejected
        assert!(matches!(
            encode_frame(&golden_header(), &[0; 10]),
            Err(ProtocolError::InvariantViolation(_))
        ));
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let good = encode_frame(&golden_header(), &[0u8; 384]).unwrap();

        let mut bad = good.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_frame(&bad), Err(ProtocolError::BadMagic(m)) if &m == b"XXXX"));

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode_frame(&v2), Err(ProtocolError::UnsupportedVersion(2))));

        match decode_frame(&good[..10]) {
            Err(ProtocolError::Truncated { have: 10, needed }) => assert_eq!(needed, HEADER_LEN),
            other => panic!("unexpected {other:?}"),
        }
        // header complete but payload short: needed reports the full frame
        match decode_frame(&good[..100]) {
            Err(ProtocolError::Truncated { have: 100, needed }) => {
                assert_eq!(needed, HEADER_LEN + 384)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn data_invariants_enforced() {
        let mut h = golden_header();
        h.s = 0;
        assert!(h.validate().is_err());
        let mut h = golden_header();
        h.b = 9;
        assert!(h.validate().is_err());
        let mut h = golden_header();
        h.sigma = f32::NAN;
        assert!(h.validate().is_err());
        // control frames are exempt from the payload-size law
        assert!(FrameHeader::control(MsgType::Result, 0, 10).validate().is_ok());
    }

    #[test]
    fn result_message_roundtrip() {
        let msg = ResultMessage {
            seq: 41,
            t_server_recv_us: 1_000_001,
            t_decode_done_us: 1_060_001,
            decoder_time_us: 60_000,
            result: vec![0.1, -2.5, 3.25, 0.0],
        };
        let bytes = msg.encode().unwrap();
        assert_eq!(bytes.len(), 26 + 16);
        assert_eq!(ResultMessage::decode(&bytes).unwrap(), msg);
        assert!(ResultMessage::decode(&bytes[..20]).is_err());
    }

    #[test]
    fn perf_report_roundtrip() {
        let entries: Vec<PerfEntry> = (1..=4u8)
            .flat_map(|s| {
                (1..=4u8).map(move |b| PerfEntry {
                    s,
                    b,
                    decoder_time_us: 1000 * s as u32 + b as u32,
                })
            })
            .collect();
        let bytes = encode_perf_report(&entries);
        assert_eq!(bytes.len(), 96);
        assert_eq!(decode_perf_report(&bytes).unwrap(), entries);
        assert!(decode_perf_report(&bytes[..95]).is_err());
    }

    #[test]
    fn loopback_session_delivers_in_order() {
        let (edge_tr, server_tr) = loopback::pair();
        let mut edge = StreamSession::new(edge_tr, Role::Edge);
        let mut server = StreamSession::new(server_tr, Role::Server);

        for i in 0..100u32 {
            let payload: Vec<u8> = (0..48).map(|k| (i as u8).wrapping_add(k)).collect();
            let seq = edge.send_data(1, 2, [6, 4, 8], 1.5, 10 * i as u64, 0, &payload).unwrap();
            assert_eq!(seq, i);
        }
        for i in 0..100u32 {
            match server.recv_message().unwrap().unwrap() {
                Message::Data { header, payload } => {
                    assert_eq!(header.seq, i);
                    assert_eq!(payload[0], i as u8);
                    assert_eq!(payload.len(), 48);
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn one_byte_fragmentation_reassembles() {
        let (edge_tr, mut server_tr) = loopback::pair();
        server_tr.max_chunk = 1;
        let mut edge = StreamSession::new(edge_tr, Role::Edge);
        let mut server = StreamSession::new(server_tr, Role::Server);

        let payload: Vec<u8> = (0..384u32).map(|i| (i % 251) as u8).collect();
        edge.send_data(2, 2, [6, 16, 16], 0.75, 1, 2, &payload).unwrap();
        match server.recv_message().unwrap().unwrap() {
            Message::Data { header, payload: got } => {
                assert_eq!(header.s, 2);
                assert_eq!(got, payload);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interleaved_messages_demultiplex() {
        let (edge_tr, server_tr) = loopback::pair();
        let mut edge = StreamSession::new(edge_tr, Role::Edge);
        let mut server = StreamSession::new(server_tr, Role::Server);

        let report = vec![PerfEntry { s: 1, b: 1, decoder_time_us: 777 }];
        server.send_perf_report(&report).unwrap();
        server
            .send_result(&ResultMessage {
                seq: 0,
                t_server_recv_us: 5,
                t_decode_done_us: 6,
                decoder_time_us: 1,
                result: vec![1.0],
            })
            .unwrap();
        server.send_perf_report(&[]).unwrap_err(); // empty report is a request: edge-only

        assert!(matches!(edge.recv_message().unwrap().unwrap(), Message::PerfReport(r) if r == report));
        assert!(matches!(edge.recv_message().unwrap().unwrap(), Message::Result(_)));

        edge.send_perf_request().unwrap();
        assert!(matches!(server.recv_message().unwrap().unwrap(), Message::PerfRequest));
    }

    #[test]
    fn close_mid_frame_reports_last_seq() {
        let (edge_tr, server_tr) = loopback::pair();
        let mut edge = StreamSession::new(edge_tr, Role::Edge);
        let mut server = StreamSession::new(server_tr, Role::Server);

        edge.send_data(1, 1, [1, 2, 2], 1.0, 0, 0, &[0xAA]).unwrap();
        // half a frame, then close
        let partial = encode_frame(
            &FrameHeader::data(1, 1, 1, [1, 2, 2], 1.0, 0, 0),
            &[0xBB],
        )
        .unwrap();
        edge.transport_mut().send(&partial[..20]).unwrap();
        edge.transport_mut().close();

        assert!(matches!(server.recv_message().unwrap().unwrap(), Message::Data { .. }));
        match server.recv_message() {
            Err(ProtocolError::ClosedMidFrame { last_seq: Some(0) }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn orderly_close_on_boundary_returns_none() {
        let (mut edge_tr, server_tr) = loopback::pair();
        edge_tr.close();
        let mut server = StreamSession::new(server_tr, Role::Server);
        assert!(server.recv_message().unwrap().is_none());
    }

    #[test]
    fn inbound_seq_must_increase() {
        let (edge_tr, server_tr) = loopback::pair();
        let mut server = StreamSession::new(server_tr, Role::Server);
        let mut raw_edge = edge_tr;
        let frame = encode_frame(&FrameHeader::data(5, 1, 1, [1, 2, 2], 1.0, 0, 0), &[0x01]).unwrap();
        raw_edge.send(&frame).unwrap();
        raw_edge.send(&frame).unwrap(); // replayed seq
        assert!(server.recv_message().is_ok());
        assert!(matches!(
            server.recv_message(),
            Err(ProtocolError::InvariantViolation(_))
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn data_frame_roundtrip(
                seq in proptest::num::u32::ANY,
                s in 1u8..=4,
                b in 1u8..=8,
                c in 1u16..=8,
                h in 1u16..=24,
                w in 1u16..=24,
                sigma in 0.0f32..100.0,
                t_cap in proptest::num::u64::ANY,
                t_enc in proptest::num::u64::ANY,
            ) {
                let header = FrameHeader::data(seq, s, b, [c, h, w], sigma, t_cap, t_enc);
                let payload: Vec<u8> =
                    (0..header.payload_len).map(|i| (i % 256) as u8).collect();
                let bytes = encode_frame(&header, &payload).unwrap();
                let (h2, p2, consumed) = decode_frame(&bytes).unwrap();
                prop_assert_eq!(h2, header);
                prop_assert_eq!(p2, payload);
                prop_assert_eq!(consumed, bytes.len());
            }

            #[test]
            fn every_truncation_is_resumable(cut in 0usize..100) {
                let header = FrameHeader::data(1, 1, 2, [2, 4, 5], 1.0, 9, 10);
                let bytes = encode_frame(&header, &vec![0xCD; header.payload_len as usize]).unwrap();
                prop_assume!(cut < bytes.len());
                match decode_frame(&bytes[..cut]) {
                    Err(ProtocolError::Truncated { have, needed }) => {
                        prop_assert_eq!(have, cut);
                        prop_assert!(needed <= bytes.len());
                        // feeding the full frame after a truncation succeeds
                        prop_assert!(decode_frame(&bytes).is_ok());
                    }
                    other => prop_assert!(false, "expected truncation, got {:?}", other),
                }
            }
        }
    }

    #[test]
    fn role_restrictions() {
        let (edge_tr, server_tr) = loopback::pair();
        let mut edge = StreamSession::new(edge_tr, Role::Edge);
        let mut server = StreamSession::new(server_tr, Role::Server);
        assert!(edge.send_result(&ResultMessage {
            seq: 0,
            t_server_recv_us: 0,
            t_decode_done_us: 0,
            decoder_time_us: 0,
            result: vec![],
        })
        .is_err());
        assert!(server.send_data(1, 1, [1, 1, 1], 1.0, 0, 0, &[0]).is_err());
    }
}
