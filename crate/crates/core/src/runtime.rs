//! End-to-end wiring: edge and server pipelines over the wire protocol,
//! simulated runs on the virtual clock, and the training-grid harness.
//!
//! Three execution modes share the same protocol and controller code:
//!
//! * **Live loopback** — real model inference on both ends of an
//!   in-memory byte pipe; used to prove the networked path computes
//!   exactly what an in-process call of the full pipeline computes.
//! * **Modeled simulation** — no tensor math; per-config compute times
//!   come from a [`PerfTable`] profile, transfer times from the link
//!   simulator, and time from the shared virtual clock. This is the
//!   default for dynamic-adaptation and static-grid runs, where the
//!   subject under test is the control loop, not the model.
//! * **Real sockets** — TCP demo mode with wall-clock timing.
//!
//! Quantization side info crosses the wire as an f32. The edge rounds
//! sigma to f32 *before* quantizing so the symbols it sends and the
//! reconstruction the server computes are governed by the same bound;
//! the in-process reference applies the identical rounding, which is
//! what makes bit-exact equivalence between the two paths possible.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::codec::{
    self, pack_symbols, quantize_with_sigma, unpack_symbols, CodecError,
};
use crate::controller::{
    ChannelEstimate, ConfigPoint, Controller, ControllerError, DecisionRecord, PerfRow,
    PerfTable,
};
use crate::model::{ensemble_forward, ModelError, SlimModel, NUM_CLASSES};
use crate::netsim::{
    sim_pair, walk_to_rate_trace, ChannelModel, NetsimError, RateModel, VirtualClock,
};
use crate::protocol::{
    ByteTransport, FrameHeader, Message, PerfEntry, ProtocolError, ResultMessage, Role,
    StreamSession,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{Split, ToyDataset, TrainConfig, TrainError, Trainer};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("remote decode failed with code {0}")]
    RemoteDecode(u32),
    #[error("session closed before frame {0} completed")]
    SessionLost(usize),
}

// ---------------------------------------------------------------------------
// Raw image files
// ---------------------------------------------------------------------------

/// Magic prefix of the raw image format: `RIMG`, width u16 LE, height
/// u16 LE, then row-major interleaved 8-bit RGB.
pub const IMAGE_MAGIC: [u8; 4] = *b"RIMG";

/// Serialize a `[3, H, W]` tensor with values in [0, 1] to raw bytes.
pub fn encode_raw_image<T: Scalar>(x: &Tensor<T>) -> Result<Vec<u8>, RuntimeError> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(RuntimeError::Config(format!(
            "raw images are 3-channel; got shape {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(RuntimeError::Config(format!("image {w}x{h} exceeds u16 dims")));
    }
    let mut out = Vec::with_capacity(8 + 3 * h * w);
    out.extend_from_slice(&IMAGE_MAGIC);
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    let data = x.data();
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            let v = data[c * plane + i].as_f64().clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Parse the raw image format back into a `[3, H, W]` tensor in [0, 1].
pub fn decode_raw_image<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>, RuntimeError> {
    if bytes.len() < 8 {
        return Err(RuntimeError::Config("raw image shorter than its header".into()));
    }
    if bytes[..4] != IMAGE_MAGIC {
        return Err(RuntimeError::Config(format!(
            "bad raw image magic {:02x?}",
            &bytes[..4]
        )));
    }
    let w = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let expected = 8 + 3 * w * h;
    if bytes.len() != expected {
        return Err(RuntimeError::Config(format!(
            "raw image length {} != {expected} for {w}x{h}",
            bytes.len()
        )));
    }
    let plane = w * h;
    let mut data = vec![T::from_f64(0.0); 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = T::from_f64(bytes[8 + 3 * i + c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, h, w], data)
        .map_err(|e| RuntimeError::Config(format!("raw image tensor: {e}")))
}

pub fn write_raw_image<T: Scalar>(path: &Path, x: &Tensor<T>) -> Result<(), RuntimeError> {
    Ok(std::fs::write(path, encode_raw_image(x)?)?)
}

pub fn read_raw_image<T: Scalar>(path: &Path) -> Result<Tensor<T>, RuntimeError> {
    decode_raw_image(&std::fs::read(path)?)
}

/// Where edge frames come from: procedurally generated scenes or a
/// directory of raw image files (sorted by name, cycled when exhausted).
pub enum FrameSource {
    Procedural(ToyDataset),
    Directory(Vec<Tensor<f64>>),
}

impl FrameSource {
    pub fn procedural(seed: u64, len: usize, resolution: usize) -> Self {
        FrameSource::Procedural(ToyDataset::new(seed, Split::Val, len, resolution))
    }

    pub fn from_dir(dir: &Path) -> Result<Self, RuntimeError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(RuntimeError::Config(format!("no files in {}", dir.display())));
        }
        let images = paths
            .iter()
            .map(|p| read_raw_image(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FrameSource::Directory(images))
    }

    pub fn frame(&self, i: usize) -> Tensor<f64> {
        match self {
            FrameSource::Procedural(d) => d.sample::<f64>(i % d.len).0,
            FrameSource::Directory(images) => images[i % images.len()].clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Pipeline halves
// ---------------------------------------------------------------------------

/// Output of the edge half: everything the DATA frame carries besides
/// timestamps.
#[derive(Debug, Clone)]
pub struct EncodedFrame {
    pub s: u8,
    pub b: u8,
    pub dims: [u16; 3],
    pub sigma: f32,
    pub payload: Vec<u8>,
}

/// Encode + quantize + pack an input at operating point (s, b).
pub fn edge_encode<T: Scalar>(
    model: &SlimModel<T>,
    x: &Tensor<T>,
    s: u8,
    b: u8,
) -> Result<EncodedFrame, RuntimeError> {
    let z = ensemble_forward(&model.encoder, x, s as usize)?;
    let shape = z.shape();
    if shape.len() != 3 {
        return Err(RuntimeError::Config(format!(
            "bottleneck must be rank 3 for the wire, got {shape:?}"
        )));
    }
    let mut dims = [0u16; 3];
    for (d, &v) in dims.iter_mut().zip(shape) {
        *d = u16::try_from(v)
            .map_err(|_| RuntimeError::Config(format!("dim {v} exceeds u16")))?;
    }
    let sigma = codec::compute_sigma(&z)? as f32;
    let zq = quantize_with_sigma(&z, b, f64::from(sigma))?;
    let payload = pack_symbols(&zq)?;
    Ok(EncodedFrame { s, b, dims, sigma, payload })
}

/// Dequantize + decode a DATA frame into task-head output values, as
/// they appear on the wire (f32).
pub fn server_decode<T: Scalar>(
    model: &SlimModel<T>,
    header: &FrameHeader,
    payload: &[u8],
) -> Result<Vec<f32>, RuntimeError> {
    let shape: Vec<usize> = header.dims.iter().map(|&d| d as usize).collect();
    let mut zq = unpack_symbols(payload, &shape, header.b)?;
    zq.params.sigma = Some(f64::from(header.sigma));
    let z = codec::dequantize::<T>(&zq)?;
    let (_maps, logits) = model.decode_tensor(&z)?;
    Ok(logits.data().iter().map(|v| v.as_f64() as f32).collect())
}

/// The whole pipeline in one process: encode, quantize, pack, unpack,
/// dequantize, decode. Byte-for-byte the same arithmetic as the edge
/// and server halves chained over a transport, including the f32
/// rounding of sigma.
pub fn in_process<T: Scalar>(
    model: &SlimModel<T>,
    x: &Tensor<T>,
    s: u8,
    b: u8,
) -> Result<Vec<f32>, RuntimeError> {
    let frame = edge_encode(model, x, s, b)?;
    let header = FrameHeader::data(0, frame.s, frame.b, frame.dims, frame.sigma, 0, 0);
    server_decode(model, &header, &frame.payload)
}

/// Error result sent when a frame decodes structurally but the model
/// rejects it: a RESULT whose vector is the single value `-(code)`.
pub const RESULT_ERR_MODEL: u32 = 3;

fn error_result(seq: u32, code: u32, t_us: u64) -> ResultMessage {
    ResultMessage {
        seq,
        t_server_recv_us: t_us,
        t_decode_done_us: t_us,
        decoder_time_us: 0,
        result: vec![-(code as f32)],
    }
}

fn is_error_result(values: &[f32]) -> Option<u32> {
    match values {
        [v] if *v < 0.0 => Some(-*v as u32),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Run configuration and per-frame accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunRole {
    Edge,
    Server,
    LoopbackSim,
}

/// Bundle of everything a run needs; CLI flags map onto these fields.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub role: RunRole,
    /// Trained model to load; `None` builds a fresh seeded model.
    pub checkpoint: Option<PathBuf>,
    /// Ensemble capacity the controller's config grid assumes.
    pub model_n: usize,
    pub seed: u64,
    pub deadline_ms: f64,
    pub frames: usize,
    /// Raw image directory; `None` generates frames procedurally.
    pub input_dir: Option<PathBuf>,
    pub resolution: usize,
    /// host:port for the socket roles.
    pub endpoint: String,
    pub decision_log: Option<PathBuf>,
    pub breakdown_log: Option<PathBuf>,
    /// Performance profile CSV; `None` uses the modeled desk profile.
    pub perf_table: Option<PathBuf>,
    pub alpha: f64,
    pub initial_rate_bps: f64,
    /// Propagation delay the edge assumes when attributing RTT residue.
    pub assumed_delay_ms: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            role: RunRole::LoopbackSim,
            checkpoint: None,
            model_n: 4,
            seed: 1,
            deadline_ms: 400.0,
            frames: 100,
            input_dir: None,
            resolution: 64,
            endpoint: "127.0.0.1:9470".into(),
            decision_log: None,
            breakdown_log: None,
            perf_table: None,
            alpha: 0.5,
            initial_rate_bps: 250_000.0,
            assumed_delay_ms: 20.0,
        }
    }
}

impl RunConfig {
    /// The checkpoint's ensemble capacity must cover the config grid.
    pub fn load_model(&self) -> Result<SlimModel<f64>, RuntimeError> {
        let model = match &self.checkpoint {
            Some(path) => crate::model::load_checkpoint::<f64>(path)?,
            None => SlimModel::new(self.model_n, self.seed)?,
        };
        if model.n != self.model_n {
            return Err(RuntimeError::Config(format!(
                "checkpoint has ensemble capacity {} but the run expects {}",
                model.n, self.model_n
            )));
        }
        Ok(model)
    }

    pub fn frame_source(&self) -> Result<FrameSource, RuntimeError> {
        match &self.input_dir {
            Some(dir) => FrameSource::from_dir(dir),
            None => Ok(FrameSource::procedural(self.seed, 64, self.resolution)),
        }
    }
}

/// Per-frame timing decomposition. On the simulated transport the
/// components sum to `total_ms` exactly; the spec'd bookkeeping
/// tolerance is 1 ms.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RttBreakdown {
    pub seq: u32,
    pub s: u8,
    pub b: u8,
    pub encode_ms: f64,
    pub quantize_pack_ms: f64,
    pub uplink_ms: f64,
    pub decode_ms: f64,
    pub downlink_ms: f64,
    pub total_ms: f64,
    pub metric: f64,
}

pub const BREAKDOWN_CSV_HEADER: &str =
    "seq,s,b,encode_ms,quantize_pack_ms,uplink_ms,decode_ms,downlink_ms,total_ms,metric";

pub fn breakdown_csv(rows: &[RttBreakdown]) -> String {
    let mut out = String::from(BREAKDOWN_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{}\n",
            r.seq,
            r.s,
            r.b,
            r.encode_ms,
            r.quantize_pack_ms,
            r.uplink_ms,
            r.decode_ms,
            r.downlink_ms,
            r.total_ms,
            r.metric
        ));
    }
    out
}

pub fn decision_jsonl(records: &[DecisionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("decision records serialize"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Modeled performance profile
// ---------------------------------------------------------------------------

/// Reference metric column of the modeled profile, indexed `[s-1][b-1]`.
/// Values follow the measured profile the replay tests pin down: metric
/// rises steeply in b and only mildly in s.
const MODELED_METRICS: [[f64; 4]; 4] = [
    [14.5, 27.7, 32.0, 34.3],
    [16.5, 29.4, 34.1, 36.1],
    [16.4, 29.4, 34.2, 36.4],
    [16.6, 29.7, 34.6, 36.8],
];

/// Modeled desk profile: full-scale payloads, sub-millisecond
/// per-member encode deltas (the encoder is tiny), a fixed-cost
/// decoder, and the reference metric column. With a 400 ms deadline and
/// 20 ms propagation delays, (4,4) is feasible above ~118.0 kB/s,
/// (4,3) above ~88.6 kB/s and (4,2) above ~59.2 kB/s; the per-member
/// compute deltas are far too small to open feasibility windows for
/// smaller s, so a bandwidth drop degrades b, not s.
pub fn modeled_perf_table() -> PerfTable {
    let mut table = PerfTable::new();
    for s in 1..=4u8 {
        for b in 1..=4u8 {
            table.insert(
                ConfigPoint { s, b },
                PerfRow {
                    encode_time_ms: 3.0 + 0.5 * s as f64,
                    decode_time_ms: 120.0,
                    payload_bytes: 6912 * b as u32,
                    metric: MODELED_METRICS[s as usize - 1][b as usize - 1],
                },
            );
        }
    }
    table
}

/// Symbolic bottleneck dims matching the modeled payload column
/// (ceil(6*96*96*b/8) = 6912*b bytes).
pub const MODELED_DIMS: [u16; 3] = [6, 96, 96];

// ---------------------------------------------------------------------------
// Modeled simulation on the virtual clock
// ---------------------------------------------------------------------------

const MS_TO_US: f64 = 1000.0;

/// Server side of a modeled simulation: decode cost comes from the
/// profile, time from the shared virtual clock.
struct ModeledServer {
    session: StreamSession<crate::netsim::SimTransport>,
    clock: VirtualClock,
    table: PerfTable,
}

impl ModeledServer {
    /// Serve exactly one inbound message; `false` on orderly close.
    fn service_one(&mut self) -> Result<bool, RuntimeError> {
        match self.session.recv_message()? {
            None => Ok(false),
            Some(Message::Data { header, .. }) => {
                let t_recv = self.clock.now_us();
                let decode_ms = self
                    .table
                    .get(ConfigPoint { s: header.s, b: header.b })
                    .map(|r| r.decode_time_ms)
                    .unwrap_or(80.0);
                self.clock.advance_us((decode_ms * MS_TO_US).round() as u64);
                let t_done = self.clock.now_us();
                self.session.send_result(&ResultMessage {
                    seq: header.seq,
                    t_server_recv_us: t_recv,
                    t_decode_done_us: t_done,
                    decoder_time_us: (t_done - t_recv) as u32,
                    result: vec![0.0; NUM_CLASSES],
                })?;
                Ok(true)
            }
            Some(Message::PerfRequest) => {
                let entries: Vec<PerfEntry> = self
                    .table
                    .rows()
                    .map(|(cfg, row)| PerfEntry {
                        s: cfg.s,
                        b: cfg.b,
                        decoder_time_us: (row.decode_time_ms * MS_TO_US).round() as u32,
                    })
                    .collect();
                self.session.send_perf_report(&entries)?;
                Ok(true)
            }
            Some(other) => Err(RuntimeError::Config(format!(
                "modeled server got unexpected message {other:?}"
            ))),
        }
    }
}

/// Everything a modeled run produces.
#[derive(Debug)]
pub struct SimOutcome {
    pub decisions: Vec<DecisionRecord>,
    pub breakdowns: Vec<RttBreakdown>,
}

/// Scenario for [`run_dynamic`]: a walk schedule (time, distance) that
/// the link follows, plus the control loop's knobs.
#[derive(Debug, Clone)]
pub struct DynamicScenario {
    /// (t_ms, distance_m) step schedule; rates come from the standard
    /// distance anchors.
    pub walk: Vec<(f64, f64)>,
    pub deadline_ms: f64,
    pub frames: usize,
    pub delay_ms: f64,
    pub jitter_pct: f64,
    pub seed: u64,
    /// Channel-estimate EWMA weight. Dynamic scenarios default to 0.5:
    /// convergence within ~3 frames of a rate step matters more than
    /// smoothing, and each RTT sample is already a whole-payload
    /// average.
    pub alpha: f64,
    pub initial_rate_bps: f64,
}

impl DynamicScenario {
    /// Five even plateaus from 1 m to 9 m over `total_ms`, stepping the
    /// link rate 200 -> 150 -> 100 -> 90 -> 80 kB/s.
    pub fn standard_walk(total_ms: f64) -> Vec<(f64, f64)> {
        let span = total_ms / 5.0;
        (0..5).map(|i| (i as f64 * span, 1.0 + 2.0 * i as f64)).collect()
    }
}

impl Default for DynamicScenario {
    fn default() -> Self {
        DynamicScenario {
            walk: Self::standard_walk(70_000.0),
            deadline_ms: 400.0,
            frames: 220,
            delay_ms: 20.0,
            jitter_pct: 0.0,
            seed: 1,
            alpha: 0.5,
            initial_rate_bps: 250_000.0,
        }
    }
}

/// Closed-loop adaptation over a walk: per frame, select a config from
/// the profile, move modeled compute and real protocol bytes through
/// the simulated link, and fold the measured RTT back into the channel
/// estimate.
pub fn run_dynamic(scenario: &DynamicScenario) -> Result<SimOutcome, RuntimeError> {
    let table = modeled_perf_table();
    let trace = walk_to_rate_trace(&scenario.walk)?;
    let channel = ChannelModel {
        rate: RateModel::Trace(trace),
        delay_ms: scenario.delay_ms,
        jitter_pct: scenario.jitter_pct,
        seed: scenario.seed,
    };
    let est = ChannelEstimate::with_initial(
        scenario.alpha,
        scenario.initial_rate_bps,
        scenario.delay_ms,
    );
    let mut ctl = Controller::new(table, est, scenario.deadline_ms)?;
    run_modeled_loop(&mut ctl, &channel, scenario.frames, None)
}

/// Drive `frames` frames through a modeled edge/server pair. With
/// `fixed` set the controller is bypassed and every frame uses that
/// config (static-grid mode).
fn run_modeled_loop(
    ctl: &mut Controller,
    channel: &ChannelModel,
    frames: usize,
    fixed: Option<ConfigPoint>,
) -> Result<SimOutcome, RuntimeError> {
    let clock = VirtualClock::new();
    let (edge_t, server_t) = sim_pair(channel, &clock)?;
    let mut edge = StreamSession::new(edge_t, Role::Edge);
    let mut server = ModeledServer {
        session: StreamSession::new(server_t, Role::Server),
        clock: clock.clone(),
        table: ctl.table.clone(),
    };

    // Decode-time handshake: ask the server what its decoder costs.
    edge.send_perf_request()?;
    server.service_one()?;
    match edge.recv_message()? {
        Some(Message::PerfReport(entries)) => ctl.table.apply_decoder_times(&entries),
        other => {
            return Err(RuntimeError::Config(format!(
                "expected a perf report before the first frame, got {other:?}"
            )))
        }
    }
    // The report frame occupied the downlink; outstanding transfers on
    // a fresh clock would otherwise skew the first frame's accounting.
    // The RESULT wire cost below includes the frame header.
    ctl.result_bytes =
        (crate::protocol::HEADER_LEN + 26 + 4 * NUM_CLASSES) as u32;

    let mut decisions = Vec::with_capacity(frames);
    let mut breakdowns = Vec::with_capacity(frames);
    for frame in 0..frames {
        let t_capture = clock.now_us();
        let sel = match fixed {
            Some(cfg) => {
                let predicted = ctl.predict(cfg)?;
                ctl.current = Some(cfg);
                crate::controller::Selection {
                    config: cfg,
                    predicted_rtt_ms: predicted,
                    metric: ctl.table.get(cfg)?.metric,
                    feasible: predicted <= ctl.deadline_ms,
                }
            }
            None => ctl.select()?,
        };
        let row = *ctl.table.get(sel.config)?;

        clock.advance_us((row.encode_time_ms * MS_TO_US).round() as u64);
        let t_enc_done = clock.now_us();
        let payload = vec![0u8; row.payload_bytes as usize];
        let seq = edge.send_data(
            sel.config.s,
            sel.config.b,
            MODELED_DIMS,
            1.0,
            t_capture,
            t_enc_done,
            &payload,
        )?;

        if !server.service_one()? {
            return Err(RuntimeError::SessionLost(frame));
        }
        let result = match edge.recv_message()? {
            Some(Message::Result(r)) => r,
            _ => return Err(RuntimeError::SessionLost(frame)),
        };
        let t_end = clock.now_us();
        let measured_rtt = (t_end - t_capture) as f64 / MS_TO_US;

        ctl.observe_rtt(sel.config, measured_rtt)?;
        decisions.push(ctl.record(seq, &sel, Some(measured_rtt)));
        breakdowns.push(RttBreakdown {
            seq,
            s: sel.config.s,
            b: sel.config.b,
            encode_ms: (t_enc_done - t_capture) as f64 / MS_TO_US,
            quantize_pack_ms: 0.0,
            uplink_ms: (result.t_server_recv_us - t_enc_done) as f64 / MS_TO_US,
            decode_ms: (result.t_decode_done_us - result.t_server_recv_us) as f64
                / MS_TO_US,
            downlink_ms: (t_end - result.t_decode_done_us) as f64 / MS_TO_US,
            total_ms: measured_rtt,
            metric: sel.metric,
        });
    }
    Ok(SimOutcome { decisions, breakdowns })
}

/// One static-grid row: a config held fixed on an ideal channel.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StaticRow {
    pub rtt_ms: f64,
    pub metric: f64,
    pub s: u8,
    pub b: u8,
}

pub const STATIC_GRID_CSV_HEADER: &str = "rtt_ms,metric,s,b";

pub fn static_grid_csv(rows: &[StaticRow]) -> String {
    let mut out = String::from(STATIC_GRID_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:.1},{},{},{}\n", r.rtt_ms, r.metric, r.s, r.b));
    }
    out
}

/// Hold each of the 16 configs fixed for `frames_per_config` frames on
/// a constant channel and average the measured RTT. Rows come back
/// sorted by RTT, ascending.
pub fn run_static_grid(
    table: &PerfTable,
    channel: &ChannelModel,
    frames_per_config: usize,
) -> Result<Vec<StaticRow>, RuntimeError> {
    if frames_per_config == 0 {
        return Err(RuntimeError::Config("frames_per_config must be positive".into()));
    }
    let mut rows = Vec::with_capacity(table.len());
    for (cfg, row) in table.rows() {
        let est = ChannelEstimate::with_initial(0.5, 1.0, channel.delay_ms);
        let mut ctl = Controller::new(table.clone(), est, f64::INFINITY)?;
        let outcome = run_modeled_loop(&mut ctl, channel, frames_per_config, Some(cfg))?;
        let avg = outcome.breakdowns.iter().map(|b| b.total_ms).sum::<f64>()
            / outcome.breakdowns.len() as f64;
        rows.push(StaticRow { rtt_ms: avg, metric: row.metric, s: cfg.s, b: cfg.b });
    }
    rows.sort_by(|a, b| a.rtt_ms.total_cmp(&b.rtt_ms).then(a.s.cmp(&b.s)).then(a.b.cmp(&b.b)));
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Live loopback (real model over the byte protocol, no clock)
// ---------------------------------------------------------------------------

/// Push one frame through real edge and server halves connected by an
/// in-memory byte pipe, and return the result values off the wire.
///
/// Cooperative single-thread schedule: the DATA frame is fully queued
/// before the server reads, so neither side blocks.
pub fn loopback_result(
    model: &SlimModel<f64>,
    x: &Tensor<f64>,
    s: u8,
    b: u8,
) -> Result<Vec<f32>, RuntimeError> {
    let (et, st) = crate::protocol::loopback::pair();
    let mut edge = StreamSession::new(et, Role::Edge);
    let mut server = StreamSession::new(st, Role::Server);

    let frame = edge_encode(model, x, s, b)?;
    edge.send_data(frame.s, frame.b, frame.dims, frame.sigma, 0, 0, &frame.payload)?;
    match server.recv_message()? {
        Some(Message::Data { header, payload }) => {
            let values = match server_decode(model, &header, &payload) {
                Ok(v) => v,
                Err(RuntimeError::Model(_)) => {
                    server.send_result(&error_result(header.seq, RESULT_ERR_MODEL, 0))?;
                    return Err(RuntimeError::RemoteDecode(RESULT_ERR_MODEL));
                }
                Err(e) => return Err(e),
            };
            server.send_result(&ResultMessage {
                seq: header.seq,
                t_server_recv_us: 0,
                t_decode_done_us: 0,
                decoder_time_us: 1,
                result: values,
            })?;
        }
        other => return Err(RuntimeError::Config(format!("expected DATA, got {other:?}"))),
    }
    match edge.recv_message()? {
        Some(Message::Result(r)) => match is_error_result(&r.result) {
            Some(code) => Err(RuntimeError::RemoteDecode(code)),
            None => Ok(r.result),
        },
        other => Err(RuntimeError::Config(format!("expected RESULT, got {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Ablation grid (training harness)
// ---------------------------------------------------------------------------

/// Bit levels of the grid columns: unquantized, then 4..1 bits.
pub const ABLATION_BITS: [Option<u8>; 5] = [None, Some(4), Some(3), Some(2), Some(1)];

/// Desk-scale knobs for [`run_ablation_grid`]. The defaults fit a full
/// grid (two ensemble arms, two baseline arms) in a few CPU-minutes.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub seed: u64,
    pub resolution: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Desk-scale arms run cooler than the full-scale default (0.05):
    /// on the small model ADAM at 0.05 oscillates without converging.
    pub learning_rate: f64,
    pub ensemble_n: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seed: 1,
            resolution: 24,
            train_samples: 400,
            val_samples: 64,
            epochs: 6,
            batch_size: 8,
            learning_rate: 0.01,
            ensemble_n: 4,
        }
    }
}

impl AblationConfig {
    fn train_config(&self, n: usize, sizes_per_step: usize, regularize: bool) -> TrainConfig {
        TrainConfig {
            ensemble_size: n,
            sizes_per_step,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            lr_halving_period_epochs: None,
            batch_size: self.batch_size,
            seed: self.seed,
            regularize,
            hard_quant_bits: None,
        }
    }
}

/// Validation-metric grid over {single encoder, ensemble s=1..N} rows
/// and {regularized, unregularized} x {fp, 4, 3, 2, 1 bits} columns.
/// The metric is negative validation distillation MSE (higher is
/// better), so quantization damage and regularization gains read the
/// same way as any accuracy column.
#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// `values[row][col]`, row-major in `row_labels`/`col_labels` order.
    pub values: Vec<Vec<f64>>,
}

impl AblationGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn value(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.row_labels.iter().position(|l| l == row)?;
        let c = self.col_labels.iter().position(|l| l == col)?;
        Some(self.values[r][c])
    }
}

/// Train the four arms (ensemble/baseline x regularized/not) from
/// scratch at one seed and evaluate the full grid.
pub fn run_ablation_grid(cfg: &AblationConfig) -> Result<AblationGrid, RuntimeError> {
    let train = ToyDataset::new(cfg.seed, Split::Train, cfg.train_samples, cfg.resolution);
    let val = ToyDataset::new(cfg.seed, Split::Val, cfg.val_samples, cfg.resolution);
    let n = cfg.ensemble_n;

    let mut arms = Vec::new(); // (label prefix, model, rows it serves)
    for &regularize in &[true, false] {
        let mut ens = Trainer::<f64>::new(cfg.train_config(n, n.min(4), regularize))?;
        ens.run::<Vec<u8>>(&train, None)?;
        let mut base = Trainer::<f64>::new(cfg.train_config(1, 2, regularize))?;
        base.run::<Vec<u8>>(&train, None)?;
        arms.push((regularize, ens.model, base.model));
    }

    let mut row_labels = vec!["single".to_string()];
    row_labels.extend((1..=n).map(|s| format!("ensemble_s{s}")));
    let mut col_labels = Vec::new();
    for &(regularize, _, _) in &arms {
        let prefix = if regularize { "reg" } else { "noreg" };
        for bits in ABLATION_BITS {
            col_labels.push(match bits {
                None => format!("{prefix}_fp"),
                Some(b) => format!("{prefix}_b{b}"),
            });
        }
    }

    let mut values = vec![Vec::with_capacity(col_labels.len()); row_labels.len()];
    for &(_, ref ens, ref base) in &arms {
        for bits in ABLATION_BITS {
            let mse =
                crate::train::eval_distillation_mse(base, &val, 1, bits, cfg.val_samples)?;
            values[0].push(-mse);
            for s in 1..=n {
                let mse =
                    crate::train::eval_distillation_mse(ens, &val, s, bits, cfg.val_samples)?;
                values[s].push(-mse);
            }
        }
    }
    Ok(AblationGrid { row_labels, col_labels, values })
}

// ---------------------------------------------------------------------------
// Real sockets (demo mode)
// ---------------------------------------------------------------------------

/// TCP byte transport for the socket roles.
pub struct TcpTransport(pub TcpStream);

impl ByteTransport for TcpTransport {
    fn send(&mut self, bytes: &[u8]) -> Result<(), ProtocolError> {
        self.0.write_all(bytes).map_err(|e| ProtocolError::Transport(e.to_string()))
    }

    fn recv(&mut self, buf: &mut [u8]) -> Result<usize, ProtocolError> {
        self.0.read(buf).map_err(|e| ProtocolError::Transport(e.to_string()))
    }
}

/// Serve decode requests over TCP. Each connection gets its own thread
/// and session state; the model is shared read-only. With `max_conns`
/// set, returns after that many sessions complete (the CLI's one-shot
/// demo and the tests use this; pass `None` to serve forever).
pub fn serve(
    addr: &str,
    model: Arc<SlimModel<f64>>,
    max_conns: Option<usize>,
) -> Result<(), RuntimeError> {
    let listener = TcpListener::bind(addr)?;
    let mut handles = Vec::new();
    let mut served = 0usize;
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true).ok();
        let model = model.clone();
        handles.push(std::thread::spawn(move || {
            let session = StreamSession::new(TcpTransport(stream), Role::Server);
            serve_session(session, &model)
        }));
        served += 1;
        if max_conns.is_some_and(|m| served >= m) {
            break;
        }
    }
    for h in handles {
        h.join().map_err(|_| RuntimeError::Config("server thread panicked".into()))??;
    }
    Ok(())
}

/// One server session: decode DATA frames, answer perf requests.
/// Decode failures on a structurally valid frame produce an error
/// RESULT (negative code) and the session continues.
fn serve_session<Tr: ByteTransport>(
    mut session: StreamSession<Tr>,
    model: &SlimModel<f64>,
) -> Result<(), RuntimeError> {
    let epoch = Instant::now();
    let us = |at: Instant| at.duration_since(epoch).as_micros() as u64;
    loop {
        match session.recv_message()? {
            None => return Ok(()),
            Some(Message::Data { header, payload }) => {
                let t_recv = Instant::now();
                match server_decode(model, &header, &payload) {
                    Ok(values) => {
                        let t_done = Instant::now();
                        session.send_result(&ResultMessage {
                            seq: header.seq,
                            t_server_recv_us: us(t_recv),
                            t_decode_done_us: us(t_done),
                            decoder_time_us: t_done.duration_since(t_recv).as_micros()
                                as u32,
                            result: values,
                        })?;
                    }
                    Err(_) => {
                        session.send_result(&error_result(
                            header.seq,
                            RESULT_ERR_MODEL,
                            us(t_recv),
                        ))?;
                    }
                }
            }
            Some(Message::PerfRequest) => {
                // The decoder cost is config-independent (one shared
                // decoder); measure it once and report it for the grid.
                let z = Tensor::<f64>::zeros(&[6, 16, 16]);
                let t0 = Instant::now();
                model.decode_tensor(&z)?;
                let cost = t0.elapsed().as_micros().max(1) as u32;
                let entries: Vec<PerfEntry> = ConfigPoint::grid(4)
                    .into_iter()
                    .map(|cfg| PerfEntry { s: cfg.s, b: cfg.b, decoder_time_us: cost })
                    .collect();
                session.send_perf_report(&entries)?;
            }
            Some(other) => {
                return Err(RuntimeError::Config(format!(
                    "server got unexpected message {other:?}"
                )))
            }
        }
    }
}

/// Per-frame outcome of a live edge run.
#[derive(Debug)]
pub struct EdgeRunOutcome {
    pub decisions: Vec<DecisionRecord>,
    pub breakdowns: Vec<RttBreakdown>,
    pub results: Vec<Vec<f32>>,
}

/// Run the edge over a connected transport: perf handshake, then one
/// DATA/RESULT exchange per frame with adaptive config selection and
/// wall-clock timing. Edge and server clocks are unsynchronized, so the
/// transfer residue (RTT minus local compute minus reported decode) is
/// split across uplink/downlink in proportion to bytes moved.
pub fn edge_run<Tr: ByteTransport>(
    mut session: StreamSession<Tr>,
    model: &SlimModel<f64>,
    source: &FrameSource,
    mut ctl: Controller,
    frames: usize,
) -> Result<EdgeRunOutcome, RuntimeError> {
    let epoch = Instant::now();
    let us = |at: Instant| at.duration_since(epoch).as_micros() as u64;

    session.send_perf_request()?;
    match session.recv_message()? {
        Some(Message::PerfReport(entries)) => ctl.table.apply_decoder_times(&entries),
        other => {
            return Err(RuntimeError::Config(format!(
                "expected a perf report before the first frame, got {other:?}"
            )))
        }
    }
    ctl.result_bytes = (crate::protocol::HEADER_LEN + 26 + 4 * NUM_CLASSES) as u32;

    let mut outcome = EdgeRunOutcome {
        decisions: Vec::with_capacity(frames),
        breakdowns: Vec::with_capacity(frames),
        results: Vec::with_capacity(frames),
    };
    for i in 0..frames {
        let x = source.frame(i);
        let sel = ctl.select()?;

        let t_capture = Instant::now();
        let z = ensemble_forward(&model.encoder, &x, sel.config.s as usize)?;
        let t_encoded = Instant::now();
        let sigma = codec::compute_sigma(&z)? as f32;
        let zq = quantize_with_sigma(&z, sel.config.b, f64::from(sigma))?;
        let payload = pack_symbols(&zq)?;
        let mut dims = [0u16; 3];
        for (d, &v) in dims.iter_mut().zip(z.shape()) {
            *d = u16::try_from(v)
                .map_err(|_| RuntimeError::Config(format!("dim {v} exceeds u16")))?;
        }
        let t_packed = Instant::now();

        let seq = session.send_data(
            sel.config.s,
            sel.config.b,
            dims,
            sigma,
            us(t_capture),
            us(t_packed),
            &payload,
        )?;
        let result = match session.recv_message()? {
            Some(Message::Result(r)) => r,
            _ => return Err(RuntimeError::SessionLost(i)),
        };
        let t_end = Instant::now();
        if let Some(code) = is_error_result(&result.result) {
            return Err(RuntimeError::RemoteDecode(code));
        }

        let total_ms = t_end.duration_since(t_capture).as_secs_f64() * 1e3;
        let encode_ms = t_encoded.duration_since(t_capture).as_secs_f64() * 1e3;
        let pack_ms = t_packed.duration_since(t_encoded).as_secs_f64() * 1e3;
        let decode_ms = result.decoder_time_us as f64 / MS_TO_US;
        let transfer_ms = (total_ms - encode_ms - pack_ms - decode_ms).max(0.0);
        let up_bytes = (crate::protocol::HEADER_LEN + payload.len()) as f64;
        let down_bytes = ctl.result_bytes as f64;
        let up_frac = up_bytes / (up_bytes + down_bytes);

        let measured_rtt = total_ms;
        ctl.observe_rtt(sel.config, measured_rtt)?;
        outcome.decisions.push(ctl.record(seq, &sel, Some(measured_rtt)));
        outcome.breakdowns.push(RttBreakdown {
            seq,
            s: sel.config.s,
            b: sel.config.b,
            encode_ms,
            quantize_pack_ms: pack_ms,
            uplink_ms: transfer_ms * up_frac,
            decode_ms,
            downlink_ms: transfer_ms * (1.0 - up_frac),
            total_ms,
            metric: sel.metric,
        });
        outcome.results.push(result.result);
    }
    Ok(outcome)
}

/// Connect to a server and run the adaptive edge loop (demo mode).
pub fn edge_connect(run: &RunConfig) -> Result<EdgeRunOutcome, RuntimeError> {
    let model = run.load_model()?;
    let source = run.frame_source()?;
    let table = match &run.perf_table {
        Some(path) => PerfTable::from_csv(&std::fs::read_to_string(path)?)?,
        None => modeled_perf_table(),
    };
    let est =
        ChannelEstimate::with_initial(run.alpha, run.initial_rate_bps, run.assumed_delay_ms);
    let ctl = Controller::new(table, est, run.deadline_ms)?;

    let addr = run
        .endpoint
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| RuntimeError::Config(format!("cannot resolve {}", run.endpoint)))?;
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true).ok();
    let session = StreamSession::new(TcpTransport(stream), Role::Edge);
    let outcome = edge_run(session, &model, &source, ctl, run.frames)?;

    if let Some(path) = &run.decision_log {
        std::fs::write(path, decision_jsonl(&outcome.decisions))?;
    }
    if let Some(path) = &run.breakdown_log {
        std::fs::write(path, breakdown_csv(&outcome.breakdowns))?;
    }
    Ok(outcome)
}
