//! Deterministic network simulation: rate/delay channel models, a
//! distance-to-bandwidth walk profile, and a virtual-clock transport
//! that plugs into [`StreamSession`](crate::protocol::StreamSession).
//!
//! Times are milliseconds (f64) in the models and microseconds (u64) on
//! the clock; rates are bytes per second. Simulations are cooperative
//! and single-threaded: receiving advances the shared virtual clock to
//! the arrival time of the next queued message.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::protocol::{ByteTransport, ProtocolError};

#[derive(Debug, Error)]
pub enum NetsimError {
    #[error("bad trace: {0}")]
    BadTrace(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("distance {0} m is negative")]
    NegativeDistance(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Link rate over time: fixed, or a step function given as
/// `(t_ms, rate_Bps)` breakpoints (each rate holds until the next
/// breakpoint; the last one holds forever).
#[derive(Debug, Clone)]
pub enum RateModel {
    Constant(f64),
    Trace(Vec<(f64, f64)>),
}

impl RateModel {
    fn validate(&self) -> Result<(), NetsimError> {
        match self {
            RateModel::Constant(r) => {
                if !r.is_finite() || *r <= 0.0 {
                    return Err(NetsimError::BadTrace(format!("rate {r} must be positive")));
                }
            }
            RateModel::Trace(points) => {
                if points.is_empty() {
                    return Err(NetsimError::BadTrace("empty trace".into()));
                }
                for window in points.windows(2) {
                    if window[1].0 <= window[0].0 {
                        return Err(NetsimError::BadTrace(format!(
                            "breakpoints not strictly increasing at t={}",
                            window[1].0
                        )));
                    }
                }
                for &(t, r) in points {
                    if !t.is_finite() || t < 0.0 || !r.is_finite() || r <= 0.0 {
                        return Err(NetsimError::BadTrace(format!(
                            "bad breakpoint ({t} ms, {r} B/s)"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Instantaneous rate at absolute time `t_ms`. Before the first
    /// breakpoint the first rate applies.
    pub fn rate_at(&self, t_ms: f64) -> f64 {
        match self {
            RateModel::Constant(r) => *r,
            RateModel::Trace(points) => points
                .iter()
                .take_while(|(t, _)| *t <= t_ms)
                .last()
                .unwrap_or(&points[0])
                .1,
        }
    }
}

/// A one-way link: serialization at the (possibly time-varying) rate,
/// then a fixed propagation delay. `jitter_pct` scales the
/// serialization term by `1 + U(-j/100, j/100)` per transfer.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub rate: RateModel,
    pub delay_ms: f64,
    pub jitter_pct: f64,
    pub seed: u64,
}

impl ChannelModel {
    pub fn constant(rate_bps: f64, delay_ms: f64) -> Self {
        ChannelModel { rate: RateModel::Constant(rate_bps), delay_ms, jitter_pct: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        self.rate.validate()?;
        if !self.delay_ms.is_finite() || self.delay_ms < 0.0 {
            return Err(NetsimError::BadTrace(format!(
                "delay {} ms must be non-negative",
                self.delay_ms
            )));
        }
        if !self.jitter_pct.is_finite() || self.jitter_pct < 0.0 || self.jitter_pct >= 100.0 {
            return Err(NetsimError::BadTrace(format!(
                "jitter {} % outside [0, 100)",
                self.jitter_pct
            )));
        }
        Ok(())
    }

    /// Time to drain `bytes` onto the link starting at `start_ms`,
    /// integrating exactly across trace breakpoints (jitter-free).
    pub fn serialization_ms(&self, bytes: usize, start_ms: f64) -> f64 {
        if bytes == 0 {
            return 0.0;
        }
        let mut remaining = bytes as f64;
        match &self.rate {
            RateModel::Constant(r) => remaining / r * 1000.0,
            RateModel::Trace(points) => {
                let mut t = start_ms;
                // future breakpoints, in order
                for &(bp_t, _) in points.iter().filter(|(bp_t, _)| *bp_t > start_ms) {
                    let rate = self.rate.rate_at(t);
                    let capacity = rate * (bp_t - t) / 1000.0;
                    if capacity >= remaining {
                        return t + remaining / rate * 1000.0 - start_ms;
                    }
                    remaining -= capacity;
                    t = bp_t;
                }
                t + remaining / self.rate.rate_at(t) * 1000.0 - start_ms
            }
        }
    }

    /// Arrival delay for `bytes` sent at `start_ms`: serialization plus
    /// propagation, jitter-free.
    pub fn transfer_time_ms(&self, bytes: usize, start_ms: f64) -> f64 {
        self.serialization_ms(bytes, start_ms) + self.delay_ms
    }
}

/// Stateful channel: the model plus the jitter stream.
#[derive(Debug)]
pub struct Channel {
    pub model: ChannelModel,
    rng: ChaCha8Rng,
}

impl Channel {
    pub fn new(model: ChannelModel) -> Result<Self, NetsimError> {
        model.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(model.seed);
        Ok(Channel { model, rng })
    }

    /// Like [`ChannelModel::transfer_time_ms`] but applies one draw of
    /// multiplicative jitter to the serialization term.
    pub fn transfer_time_ms(&mut self, bytes: usize, start_ms: f64) -> f64 {
        let mut ser = self.model.serialization_ms(bytes, start_ms);
        if self.model.jitter_pct > 0.0 {
            let j = self.model.jitter_pct / 100.0;
            ser *= 1.0 + self.rng.random_range(-j..j);
        }
        ser + self.model.delay_ms
    }
}

/// Bandwidth as a function of walking distance from the access point:
/// piecewise-linear between measured anchors, clamped at both ends.
pub const WALK_ANCHORS: [(f64, f64); 5] = [
    (1.0, 200_000.0),
    (3.0, 150_000.0),
    (5.0, 100_000.0),
    (7.0, 90_000.0),
    (9.0, 80_000.0),
];

pub fn walk_rate(distance_m: f64) -> Result<f64, NetsimError> {
    if !distance_m.is_finite() || distance_m < 0.0 {
        return Err(NetsimError::NegativeDistance(distance_m));
    }
    let anchors = &WALK_ANCHORS;
    if distance_m <= anchors[0].0 {
        return Ok(anchors[0].1);
    }
    for window in anchors.windows(2) {
        let ((d0, r0), (d1, r1)) = (window[0], window[1]);
        if distance_m <= d1 {
            return Ok(r0 + (r1 - r0) * (distance_m - d0) / (d1 - d0));
        }
    }
    Ok(anchors[anchors.len() - 1].1)
}

/// Convert a walk (`t_ms`, `distance_m`) into a rate trace by sampling
/// the profile at each point.
pub fn walk_to_rate_trace(walk: &[(f64, f64)]) -> Result<Vec<(f64, f64)>, NetsimError> {
    walk.iter().map(|&(t, d)| Ok((t, walk_rate(d)?))).collect()
}

pub fn parse_rate_trace_csv(text: &str) -> Result<Vec<(f64, f64)>, NetsimError> {
    parse_two_column_csv(text, "t_ms,rate_Bps")
}

pub fn write_rate_trace_csv(points: &[(f64, f64)]) -> String {
    write_two_column_csv(points, "t_ms,rate_Bps")
}

pub fn parse_walk_csv(text: &str) -> Result<Vec<(f64, f64)>, NetsimError> {
    parse_two_column_csv(text, "t_ms,distance_m")
}

pub fn write_walk_csv(points: &[(f64, f64)]) -> String {
    write_two_column_csv(points, "t_ms,distance_m")
}

fn parse_two_column_csv(text: &str, header: &str) -> Result<Vec<(f64, f64)>, NetsimError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(first) if first.trim() == header => {}
        Some(first) => {
            return Err(NetsimError::Csv(format!(
                "expected header '{header}', found '{}'",
                first.trim()
            )))
        }
        None => return Err(NetsimError::Csv("empty file".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut cols = line.split(',');
        let (a, b) = match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(NetsimError::Csv(format!(
                    "line {}: expected two columns, got '{line}'",
                    i + 2
                )))
            }
        };
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| NetsimError::Csv(format!("line {}: {e}: '{v}'", i + 2)))
        };
        out.push((parse(a)?, parse(b)?));
    }
    Ok(out)
}

fn write_two_column_csv(points: &[(f64, f64)], header: &str) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for (a, b) in points {
        out.push_str(&format!("{a},{b}\n"));
    }
    out
}

/// Shared simulated time in microseconds. Cheap to clone; all clones
/// observe the same instant.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock(Arc<AtomicU64>);

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_us(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    /// Move time forward by `us` (monotonic; models compute time).
    pub fn advance_us(&self, us: u64) {
        self.0.fetch_add(us, Ordering::SeqCst);
    }

    /// Jump to an absolute instant; never moves backwards.
    pub fn advance_to_us(&self, t_us: u64) {
        self.0.fetch_max(t_us, Ordering::SeqCst);
    }
}

fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

struct SimQueue {
    // (arrival_us, bytes) in send order; arrivals are non-decreasing
    messages: VecDeque<(u64, Vec<u8>)>,
    closed: bool,
    // when the link finishes draining the previous message (ms)
    free_at_ms: f64,
}

impl SimQueue {
    fn new() -> Self {
        SimQueue { messages: VecDeque::new(), closed: false, free_at_ms: 0.0 }
    }
}

/// One endpoint of a simulated bidirectional link. `send` enqueues the
/// bytes with an arrival time computed from the channel (FIFO: a
/// message's serialization starts only after the previous one drained);
/// `recv` advances the shared virtual clock to the next arrival.
pub struct SimTransport {
    clock: VirtualClock,
    channel: Channel,
    outgoing: Arc<Mutex<SimQueue>>,
    incoming: Arc<Mutex<SimQueue>>,
    pending: VecDeque<u8>,
}

/// Two connected endpoints sharing `clock`, each direction with its own
/// jitter stream over the same channel model.
pub fn sim_pair(
    model: &ChannelModel,
    clock: &VirtualClock,
) -> Result<(SimTransport, SimTransport), NetsimError> {
    let ab = Arc::new(Mutex::new(SimQueue::new()));
    let ba = Arc::new(Mutex::new(SimQueue::new()));
    let mut up = model.clone();
    up.seed ^= 0x7570; // "up"
    let mut down = model.clone();
    down.seed ^= 0x646e; // "dn"
    Ok((
        SimTransport {
            clock: clock.clone(),
            channel: Channel::new(up)?,
            outgoing: ab.clone(),
            incoming: ba.clone(),
            pending: VecDeque::new(),
        },
        SimTransport {
            clock: clock.clone(),
            channel: Channel::new(down)?,
            outgoing: ba,
            incoming: ab,
            pending: VecDeque::new(),
        },
    ))
}

impl SimTransport {
    pub fn close(&mut self) {
        self.outgoing.lock().expect("sim queue").closed = true;
    }

    /// Jitter-free transfer time the next `bytes`-sized send would see
    /// if the link were idle now (for RTT accounting in tests).
    pub fn idle_transfer_ms(&self, bytes: usize) -> f64 {
        let now_ms = self.clock.now_us() as f64 / 1000.0;
        self.channel.model.transfer_time_ms(bytes, now_ms)
    }
}

impl ByteTransport for SimTransport {
    fn send(&mut self, bytes: &[u8]) -> Result<(), ProtocolError> {
        let mut q = self.outgoing.lock().expect("sim queue");
        if q.closed {
            return Err(ProtocolError::Transport("send on closed sim link".into()));
        }
        let now_ms = self.clock.now_us() as f64 / 1000.0;
        let start_ms = now_ms.max(q.free_at_ms);
        let total_ms = self.channel.transfer_time_ms(bytes.len(), start_ms);
        // the link is busy until the last byte leaves; propagation overlaps
        q.free_at_ms = start_ms + (total_ms - self.channel.model.delay_ms);
        let arrival = ms_to_us(start_ms + total_ms);
        q.messages.push_back((arrival, bytes.to_vec()));
        Ok(())
    }

    fn recv(&mut self, buf: &mut [u8]) -> Result<usize, ProtocolError> {
        if self.pending.is_empty() {
            let mut q = self.incoming.lock().expect("sim queue");
            match q.messages.pop_front() {
                Some((arrival, bytes)) => {
                    drop(q);
                    self.clock.advance_to_us(arrival);
                    self.pending.extend(bytes);
                }
                None if q.closed => return Ok(0),
                None => {
                    return Err(ProtocolError::Transport(
                        "simulated recv would block forever (peer has sent nothing)".into(),
                    ))
                }
            }
        }
        let n = buf.len().min(self.pending.len());
        for slot in buf.iter_mut().take(n) {
            *slot = self.pending.pop_front().expect("n bounded");
        }
        Ok(n)
    }
}
