//! Deadline-driven configuration control.
//!
//! Per frame the edge picks the (s, b) operating point that maximizes
//! the task metric subject to a predicted round-trip deadline. The
//! prediction combines locally measured encode times, server-reported
//! decode times, the codec's payload-size law, and an EWMA channel
//! estimate; selection is a plain argmax with deterministic tie-breaks,
//! so a brute-force enumeration must agree with it exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("perf table is empty")]
    EmptyTable,
    #[error("perf table has no entry for (s={s}, b={b})")]
    MissingEntry { s: u8, b: u8 },
    #[error("bad perf table: {0}")]
    BadTable(String),
    #[error("bad observation: {0}")]
    BadObservation(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// One operating point of the split: ensemble size and symbol width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfigPoint {
    pub s: u8,
    pub b: u8,
}

impl ConfigPoint {
    /// All N·4 points in (s, b) lexicographic order.
    pub fn grid(n: u8) -> Vec<ConfigPoint> {
        (1..=n)
            .flat_map(|s| (1..=4).map(move |b| ConfigPoint { s, b }))
            .collect()
    }
}

/// Cost/quality profile of one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfRow {
    pub encode_time_ms: f64,
    pub decode_time_ms: f64,
    pub payload_bytes: u32,
    pub metric: f64,
}

/// Per-configuration profile table. Encode times come from local
/// measurement, decode times from the server's PERF_REPORT, payload
/// sizes from the codec law, and the metric column from evaluation (or
/// a loaded file) — the controller never interprets the metric beyond
/// "bigger is better".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerfTable {
    entries: BTreeMap<(u8, u8), PerfRow>,
}

pub const PERF_TABLE_CSV_HEADER: &str = "s,b,encode_ms,decode_ms,payload_bytes,metric";

impl PerfTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cfg: ConfigPoint, row: PerfRow) {
        self.entries.insert((cfg.s, cfg.b), row);
    }

    pub fn get(&self, cfg: ConfigPoint) -> Result<&PerfRow, ControllerError> {
        self.entries
            .get(&(cfg.s, cfg.b))
            .ok_or(ControllerError::MissingEntry { s: cfg.s, b: cfg.b })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn configs(&self) -> impl Iterator<Item = ConfigPoint> + '_ {
        self.entries.keys().map(|&(s, b)| ConfigPoint { s, b })
    }

    pub fn rows(&self) -> impl Iterator<Item = (ConfigPoint, &PerfRow)> + '_ {
        self.entries.iter().map(|(&(s, b), row)| (ConfigPoint { s, b }, row))
    }

    /// Overwrite decode times from a server report, leaving other
    /// columns untouched. Unknown configurations are ignored.
    pub fn apply_decoder_times(&mut self, entries: &[crate::protocol::PerfEntry]) {
        for e in entries {
            if let Some(row) = self.entries.get_mut(&(e.s, e.b)) {
                row.decode_time_ms = e.decoder_time_us as f64 / 1000.0;
            }
        }
    }

    /// Structural checks: payload size must be a function of b alone,
    /// metrics must be finite, and encode time must grow with s (10%
    /// measurement noise allowed).
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.entries.is_empty() {
            return Err(ControllerError::EmptyTable);
        }
        let mut payload_by_b: BTreeMap<u8, u32> = BTreeMap::new();
        for (&(s, b), row) in &self.entries {
            if !row.metric.is_finite() {
                return Err(ControllerError::BadTable(format!(
                    "metric for (s={s}, b={b}) is not finite"
                )));
            }
            if !(row.encode_time_ms >= 0.0) || !(row.decode_time_ms >= 0.0) {
                return Err(ControllerError::BadTable(format!(
                    "negative time for (s={s}, b={b})"
                )));
            }
            match payload_by_b.get(&b) {
                Some(&p) if p != row.payload_bytes => {
                    return Err(ControllerError::BadTable(format!(
                        "payload for b={b} is {} at s={s} but {p} elsewhere",
                        row.payload_bytes
                    )));
                }
                _ => {
                    payload_by_b.insert(b, row.payload_bytes);
                }
            }
        }
        for (&(s, b), row) in &self.entries {
            if let Some(next) = self.entries.get(&(s + 1, b)) {
                if next.encode_time_ms < row.encode_time_ms * 0.9 {
                    return Err(ControllerError::BadTable(format!(
                        "encode time drops from {} ms (s={s}) to {} ms (s={}) at b={b}",
                        row.encode_time_ms,
                        next.encode_time_ms,
                        s + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(PERF_TABLE_CSV_HEADER);
        out.push('\n');
        for (&(s, b), row) in &self.entries {
            out.push_str(&format!(
                "{s},{b},{},{},{},{}\n",
                row.encode_time_ms, row.decode_time_ms, row.payload_bytes, row.metric
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, ControllerError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == PERF_TABLE_CSV_HEADER => {}
            Some(h) => {
                return Err(ControllerError::Csv(format!(
                    "expected header '{PERF_TABLE_CSV_HEADER}', found '{}'",
                    h.trim()
                )))
            }
            None => return Err(ControllerError::Csv("empty file".into())),
        }
        let mut table = PerfTable::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 6 {
                return Err(ControllerError::Csv(format!(
                    "line {}: expected 6 columns, got {}",
                    i + 2,
                    cols.len()
                )));
            }
            let fail = |e: std::num::ParseFloatError| {
                ControllerError::Csv(format!("line {}: {e}", i + 2))
            };
            let faili = |e: std::num::ParseIntError| {
                ControllerError::Csv(format!("line {}: {e}", i + 2))
            };
            let cfg = ConfigPoint { s: cols[0].parse().map_err(faili)?, b: cols[1].parse().map_err(faili)? };
            table.insert(
                cfg,
                PerfRow {
                    encode_time_ms: cols[2].parse().map_err(fail)?,
                    decode_time_ms: cols[3].parse().map_err(fail)?,
                    payload_bytes: cols[4].parse().map_err(faili)?,
                    metric: cols[5].parse().map_err(fail)?,
                },
            );
        }
        Ok(table)
    }
}

/// EWMA view of the link. The first observation initializes the value
/// directly; later ones blend with weight `alpha`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelEstimate {
    pub rate_bps: f64,
    pub delay_ms: f64,
    pub alpha: f64,
    rate_seen: bool,
    delay_seen: bool,
}

pub const DEFAULT_EWMA_ALPHA: f64 = 0.2;

impl ChannelEstimate {
    pub fn new(alpha: f64) -> Self {
        ChannelEstimate { rate_bps: 0.0, delay_ms: 0.0, alpha, rate_seen: false, delay_seen: false }
    }

    pub fn with_initial(alpha: f64, rate_bps: f64, delay_ms: f64) -> Self {
        ChannelEstimate { rate_bps, delay_ms, alpha, rate_seen: true, delay_seen: true }
    }

    pub fn has_rate(&self) -> bool {
        self.rate_seen
    }

    /// Fold in one transfer: `bytes` drained in `serialization_ms`.
    pub fn observe_rate(&mut self, bytes: usize, serialization_ms: f64) -> Result<(), ControllerError> {
        if serialization_ms <= 0.0 || !serialization_ms.is_finite() {
            return Err(ControllerError::BadObservation(format!(
                "serialization time {serialization_ms} ms must be positive"
            )));
        }
        let observed = bytes as f64 / (serialization_ms / 1000.0);
        if self.rate_seen {
            self.rate_bps = self.alpha * observed + (1.0 - self.alpha) * self.rate_bps;
        } else {
            self.rate_bps = observed;
            self.rate_seen = true;
        }
        Ok(())
    }

    pub fn observe_delay(&mut self, delay_ms: f64) -> Result<(), ControllerError> {
        if delay_ms < 0.0 || !delay_ms.is_finite() {
            return Err(ControllerError::BadObservation(format!(
                "delay {delay_ms} ms must be non-negative"
            )));
        }
        if self.delay_seen {
            self.delay_ms = self.alpha * delay_ms + (1.0 - self.alpha) * self.delay_ms;
        } else {
            self.delay_ms = delay_ms;
            self.delay_seen = true;
        }
        Ok(())
    }
}

/// Round trip predicted for one configuration: encode, uplink transfer,
/// decode, and the result's return trip at the same rate and delay.
pub fn predict_rtt(
    row: &PerfRow,
    est: &ChannelEstimate,
    result_bytes: u32,
) -> Result<f64, ControllerError> {
    if !est.rate_seen || est.rate_bps <= 0.0 {
        return Err(ControllerError::BadObservation(
            "channel estimate has no rate yet".into(),
        ));
    }
    let up = row.payload_bytes as f64 / est.rate_bps * 1000.0 + est.delay_ms;
    let down = result_bytes as f64 / est.rate_bps * 1000.0 + est.delay_ms;
    Ok(row.encode_time_ms + up + row.decode_time_ms + down)
}

/// Outcome of one selection round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub config: ConfigPoint,
    pub predicted_rtt_ms: f64,
    pub metric: f64,
    /// False when nothing met the deadline and the min-RTT fallback was
    /// used instead.
    pub feasible: bool,
}

/// Pick from explicit (config, rtt, metric) candidates: the max-metric
/// config among those meeting the deadline, ties broken by smaller RTT,
/// then smaller s, then smaller b; min-RTT fallback when none fit.
pub fn select_among(
    candidates: impl IntoIterator<Item = (ConfigPoint, f64, f64)>,
    deadline_ms: f64,
) -> Result<Selection, ControllerError> {
    let mut best_feasible: Option<(ConfigPoint, f64, f64)> = None;
    let mut min_rtt: Option<(ConfigPoint, f64, f64)> = None;
    for (cfg, rtt, metric) in candidates {
        let better_fallback = match &min_rtt {
            None => true,
            Some((bc, brtt, _)) => {
                rtt < *brtt || (rtt == *brtt && (cfg.s, cfg.b) < (bc.s, bc.b))
            }
        };
        if better_fallback {
            min_rtt = Some((cfg, rtt, metric));
        }
        if rtt <= deadline_ms {
            let better = match &best_feasible {
                None => true,
                Some((bc, brtt, bm)) => {
                    metric > *bm
                        || (metric == *bm
                            && (rtt < *brtt || (rtt == *brtt && (cfg.s, cfg.b) < (bc.s, bc.b))))
                }
            };
            if better {
                best_feasible = Some((cfg, rtt, metric));
            }
        }
    }
    match (best_feasible, min_rtt) {
        (Some((config, rtt, metric)), _) => {
            Ok(Selection { config, predicted_rtt_ms: rtt, metric, feasible: true })
        }
        (None, Some((config, rtt, metric))) => {
            Ok(Selection { config, predicted_rtt_ms: rtt, metric, feasible: false })
        }
        (None, None) => Err(ControllerError::EmptyTable),
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub seq: u32,
    pub s: u8,
    pub b: u8,
    pub predicted_rtt_ms: f64,
    pub measured_rtt_ms: Option<f64>,
    #[serde(rename = "rate_est_Bps")]
    pub rate_est_bps: f64,
    pub deadline_ms: f64,
}

/// The per-frame adaptation state: profile table, channel estimate, and
/// the current operating point.
#[derive(Debug, Clone)]
pub struct Controller {
    pub table: PerfTable,
    pub est: ChannelEstimate,
    pub deadline_ms: f64,
    pub result_bytes: u32,
    /// Milliseconds added to the predicted RTT of any configuration
    /// other than the current one; 0 disables hysteresis.
    pub switch_penalty_ms: f64,
    /// Feasibility margin: predicted RTT is multiplied by this before
    /// the deadline comparison.
    pub margin: f64,
    pub current: Option<ConfigPoint>,
}

impl Controller {
    pub fn new(table: PerfTable, est: ChannelEstimate, deadline_ms: f64) -> Result<Self, ControllerError> {
        table.validate()?;
        Ok(Controller {
            table,
            est,
            deadline_ms,
            result_bytes: 64,
            switch_penalty_ms: 0.0,
            margin: 1.0,
            current: None,
        })
    }

    pub fn predict(&self, cfg: ConfigPoint) -> Result<f64, ControllerError> {
        predict_rtt(self.table.get(cfg)?, &self.est, self.result_bytes)
    }

    /// Select the next configuration and remember it as current.
    pub fn select(&mut self) -> Result<Selection, ControllerError> {
        if self.table.is_empty() {
            return Err(ControllerError::EmptyTable);
        }
        let mut candidates = Vec::with_capacity(self.table.len());
        for (cfg, row) in self.table.rows() {
            let mut rtt = predict_rtt(row, &self.est, self.result_bytes)? * self.margin;
            if self.switch_penalty_ms > 0.0 && self.current.is_some_and(|c| c != cfg) {
                rtt += self.switch_penalty_ms;
            }
            candidates.push((cfg, rtt, row.metric));
        }
        let sel = select_among(candidates, self.deadline_ms)?;
        self.current = Some(sel.config);
        Ok(sel)
    }

    /// Fold a completed frame back into the channel estimate: the
    /// transfer residue of the measured RTT (after subtracting the
    /// table's compute times and the estimated propagation delays) is
    /// attributed to serialization of the payload and result bytes.
    pub fn observe_rtt(&mut self, cfg: ConfigPoint, measured_rtt_ms: f64) -> Result<(), ControllerError> {
        let row = *self.table.get(cfg)?;
        let transfer = measured_rtt_ms - row.encode_time_ms - row.decode_time_ms;
        let serialization = transfer - 2.0 * self.est.delay_ms;
        if serialization > 0.0 {
            let bytes = row.payload_bytes as usize + self.result_bytes as usize;
            self.est.observe_rate(bytes, serialization)?;
        }
        Ok(())
    }

    pub fn record(
        &self,
        seq: u32,
        sel: &Selection,
        measured_rtt_ms: Option<f64>,
    ) -> DecisionRecord {
        DecisionRecord {
            seq,
            s: sel.config.s,
            b: sel.config.b,
            predicted_rtt_ms: sel.predicted_rtt_ms,
            measured_rtt_ms,
            rate_est_bps: self.est.rate_bps,
            deadline_ms: self.deadline_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example_row() -> PerfRow {
        PerfRow { encode_time_ms: 30.0, decode_time_ms: 60.0, payload_bytes: 192, metric: 1.0 }
    }

    fn example_est() -> ChannelEstimate {
        ChannelEstimate::with_initial(DEFAULT_EWMA_ALPHA, 80_000.0, 20.0)
    }

    /// Measured profile of the paper-scale system (RTT ms, metric, s, b)
    /// used as a direct RTT oracle in replay tests.
    const REPLAY_ROWS: [(f64, f64, u8, u8); 16] = [
        (211.2, 14.5, 1, 1),
        (253.8, 27.7, 1, 2),
        (289.9, 16.5, 2, 1),
        (294.7, 32.0, 1, 3),
        (330.8, 34.3, 1, 4),
        (331.4, 29.4, 2, 2),
        (361.7, 16.4, 3, 1),
        (369.4, 34.1, 2, 3),
        (399.8, 29.4, 3, 2),
        (410.7, 36.1, 2, 4),
        (438.2, 16.6, 4, 1),
        (439.3, 34.2, 3, 3),
        (476.8, 29.7, 4, 2),
        (482.6, 36.4, 3, 4),
        (515.3, 34.6, 4, 3),
        (553.8, 36.8, 4, 4),
    ];

    fn replay_candidates() -> Vec<(ConfigPoint, f64, f64)> {
        REPLAY_ROWS
            .iter()
            .map(|&(rtt, metric, s, b)| (ConfigPoint { s, b }, rtt, metric))
            .collect()
    }

    /// Independent reimplementation of the selection rule.
    fn brute_force(cands: &[(ConfigPoint, f64, f64)], deadline: f64) -> Option<Selection> {
        fn pick(
            set: Vec<(ConfigPoint, f64, f64)>,
            by_metric: bool,
        ) -> Option<(ConfigPoint, f64, f64)> {
            set.into_iter().min_by(|a, b| {
                let key = |x: &(ConfigPoint, f64, f64)| {
                    (if by_metric { -x.2 } else { 0.0 }, x.1, x.0.s, x.0.b)
                };
                key(a).partial_cmp(&key(b)).unwrap()
            })
        }
        let feasible: Vec<_> = cands.iter().filter(|(_, rtt, _)| *rtt <= deadline).copied().collect();
        if !feasible.is_empty() {
            let (cfg, rtt, m) = pick(feasible, true)?;
            Some(Selection { config: cfg, predicted_rtt_ms: rtt, metric: m, feasible: true })
        } else {
            let (cfg, rtt, m) = pick(cands.to_vec(), false)?;
            Some(Selection { config: cfg, predicted_rtt_ms: rtt, metric: m, feasible: false })
        }
    }

    #[test]
    fn predict_rtt_worked_example() {
        let rtt = predict_rtt(&example_row(), &example_est(), 64).unwrap();
        assert!((rtt - 133.2).abs() < 1e-9, "{rtt}");
    }

    #[test]
    fn predict_rtt_limit_cases() {
        let est = ChannelEstimate::with_initial(0.2, f64::INFINITY, 0.0);
        let rtt = predict_rtt(&example_row(), &est, 64).unwrap();
        assert_eq!(rtt, 90.0); // encode + decode exactly

        // doubling the payload adds payload/rate exactly
        let est = example_est();
        let mut big = example_row();
        big.payload_bytes *= 2;
        let d = predict_rtt(&big, &est, 64).unwrap() - predict_rtt(&example_row(), &est, 64).unwrap();
        assert!((d - 192.0 / 80_000.0 * 1000.0).abs() < 1e-12);

        let empty = ChannelEstimate::new(0.2);
        assert!(predict_rtt(&example_row(), &empty, 64).is_err());
    }

    #[test]
    fn replay_table_selections() {
        let sel = select_among(replay_candidates(), 300.0).unwrap();
        assert_eq!(sel.config, ConfigPoint { s: 1, b: 3 });
        assert_eq!(sel.metric, 32.0);
        assert!(sel.feasible);

        let sel = select_among(replay_candidates(), 600.0).unwrap();
        assert_eq!(sel.config, ConfigPoint { s: 4, b: 4 });
        assert_eq!(sel.metric, 36.8);
        assert_eq!(sel.predicted_rtt_ms, 553.8);

        let sel = select_among(replay_candidates(), 100.0).unwrap();
        assert_eq!(sel.config, ConfigPoint { s: 1, b: 1 });
        assert_eq!(sel.predicted_rtt_ms, 211.2);
        assert!(!sel.feasible);

        assert!(matches!(select_among(vec![], 100.0), Err(ControllerError::EmptyTable)));
    }

    #[test]
    fn replay_matches_brute_force_at_every_deadline() {
        let cands = replay_candidates();
        for deadline in (0..700).map(|d| d as f64) {
            let got = select_among(cands.clone(), deadline).unwrap();
            let want = brute_force(&cands, deadline).unwrap();
            assert_eq!(got, want, "deadline {deadline}");
        }
    }

    #[test]
    fn ewma_worked_examples() {
        let mut est = ChannelEstimate::new(0.2);
        est.observe_rate(1000, 10.0).unwrap();
        assert_eq!(est.rate_bps, 100_000.0); // first observation initializes

        let mut latest = ChannelEstimate::new(1.0);
        latest.observe_rate(1000, 10.0).unwrap();
        latest.observe_rate(500, 10.0).unwrap();
        assert_eq!(latest.rate_bps, 50_000.0); // alpha = 1 tracks the latest

        // alternating 80k/120k stays inside the band once warmed up
        let mut alt = ChannelEstimate::new(0.2);
        for i in 0..100 {
            let rate = if i % 2 == 0 { 80_000.0 } else { 120_000.0 };
            alt.observe_rate(rate as usize, 1000.0).unwrap();
            if i > 10 {
                assert!(alt.rate_bps >= 80_000.0 && alt.rate_bps <= 120_000.0, "{}", alt.rate_bps);
            }
        }

        assert!(est.observe_rate(100, 0.0).is_err());
        let mut d = ChannelEstimate::new(0.5);
        d.observe_delay(20.0).unwrap();
        d.observe_delay(40.0).unwrap();
        assert_eq!(d.delay_ms, 30.0);
        assert!(d.observe_delay(-1.0).is_err());
    }

    // The modeled desk profile (full-scale payloads, tiny encoder
    // deltas, fixed-cost decoder): with a 400 ms deadline and 20 ms
    // delays, (4,4) is feasible above ~118.0 kB/s and (4,3) above
    // ~88.6 kB/s, so a bandwidth drop degrades b, not s.
    fn desk_table() -> PerfTable {
        crate::runtime::modeled_perf_table()
    }

    #[test]
    fn table_validation_catches_structural_errors() {
        let table = desk_table();
        table.validate().unwrap();

        let mut bad = table.clone();
        bad.insert(
            ConfigPoint { s: 2, b: 1 },
            PerfRow { payload_bytes: 9999, ..*table.get(ConfigPoint { s: 2, b: 1 }).unwrap() },
        );
        assert!(matches!(bad.validate(), Err(ControllerError::BadTable(_))));

        let mut bad = table.clone();
        bad.insert(
            ConfigPoint { s: 3, b: 2 },
            PerfRow { metric: f64::NAN, ..*table.get(ConfigPoint { s: 3, b: 2 }).unwrap() },
        );
        assert!(matches!(bad.validate(), Err(ControllerError::BadTable(_))));

        // encode time falling by more than 10% with s is rejected
        let mut bad = table.clone();
        bad.insert(
            ConfigPoint { s: 4, b: 1 },
            PerfRow { encode_time_ms: 1.0, ..*table.get(ConfigPoint { s: 4, b: 1 }).unwrap() },
        );
        assert!(matches!(bad.validate(), Err(ControllerError::BadTable(_))));

        assert!(matches!(PerfTable::new().validate(), Err(ControllerError::EmptyTable)));
    }

    #[test]
    fn csv_roundtrip_and_strict_header() {
        let table = desk_table();
        let text = table.to_csv();
        assert!(text.starts_with("s,b,encode_ms,decode_ms,payload_bytes,metric\n"));
        assert_eq!(text.lines().count(), 17);
        let back = PerfTable::from_csv(&text).unwrap();
        assert_eq!(back, table);

        assert!(PerfTable::from_csv("nope\n1,1,1,1,1,1\n").is_err());
        assert!(PerfTable::from_csv("s,b,encode_ms,decode_ms,payload_bytes,metric\n1,1,x,1,1,1\n").is_err());
        assert!(PerfTable::from_csv("s,b,encode_ms,decode_ms,payload_bytes,metric\n1,1,1,1,1\n").is_err());
    }

    #[test]
    fn grid_is_complete() {
        let grid = ConfigPoint::grid(4);
        assert_eq!(grid.len(), 16);
        assert_eq!(grid[0], ConfigPoint { s: 1, b: 1 });
        assert_eq!(grid[15], ConfigPoint { s: 4, b: 4 });
        let table = desk_table();
        assert!(grid.iter().all(|&c| table.get(c).is_ok()));
    }

    #[test]
    fn controller_tracks_selection_and_updates() {
        let est = ChannelEstimate::with_initial(0.2, 200_000.0, 20.0);
        let mut ctl = Controller::new(desk_table(), est, 400.0).unwrap();
        let sel = ctl.select().unwrap();
        // fast channel: global max metric fits the deadline
        assert_eq!(sel.config, ConfigPoint { s: 4, b: 4 });
        assert!(sel.feasible);
        assert_eq!(ctl.current, Some(sel.config));

        // unconstrained deadline always returns the max-metric config
        ctl.deadline_ms = f64::INFINITY;
        assert_eq!(ctl.select().unwrap().config, ConfigPoint { s: 4, b: 4 });
        ctl.deadline_ms = 400.0;

        // a measured RTT consistent with a much slower link drags the
        // rate estimate down
        let before = ctl.est.rate_bps;
        let row = *ctl.table.get(ConfigPoint { s: 4, b: 4 }).unwrap();
        let slow_rtt = row.encode_time_ms
            + row.decode_time_ms
            + 2.0 * ctl.est.delay_ms
            + (row.payload_bytes + ctl.result_bytes) as f64 / 80_000.0 * 1000.0;
        ctl.observe_rtt(ConfigPoint { s: 4, b: 4 }, slow_rtt).unwrap();
        assert!(ctl.est.rate_bps < before);

        let rec = ctl.record(9, &sel, Some(slow_rtt));
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"seq\":9"));
        assert!(json.contains("\"rate_est_Bps\""));
        assert!(json.contains("\"deadline_ms\":400.0"));
    }

    #[test]
    fn constant_channel_does_not_oscillate() {
        let est = ChannelEstimate::with_initial(0.2, 150_000.0, 20.0);
        let mut ctl = Controller::new(desk_table(), est, 400.0).unwrap();
        let mut chosen = Vec::new();
        for _ in 0..50 {
            let sel = ctl.select().unwrap();
            chosen.push(sel.config);
            // measured RTT exactly matches the model of a 150 kB/s link
            let row = *ctl.table.get(sel.config).unwrap();
            let rtt = row.encode_time_ms
                + row.decode_time_ms
                + 2.0 * 20.0
                + (row.payload_bytes + 64) as f64 / 150_000.0 * 1000.0;
            ctl.observe_rtt(sel.config, rtt).unwrap();
        }
        assert!(chosen[5..].iter().all(|&c| c == chosen[5]), "{chosen:?}");
    }

    #[test]
    fn rate_step_switches_within_three_frames() {
        // (4,4) is feasible above ~118.0 kB/s; at alpha 0.5 the second
        // post-step estimate crosses that boundary
        let est = ChannelEstimate::with_initial(0.5, 200_000.0, 20.0);
        let mut ctl = Controller::new(desk_table(), est, 400.0).unwrap();
        let mut rate = 200_000.0;
        let mut configs = Vec::new();
        let mut step_frame = None;
        for frame in 0..30 {
            if frame == 10 {
                rate = 80_000.0;
                step_frame = Some(frame);
            }
            let sel = ctl.select().unwrap();
            configs.push(sel.config);
            let row = *ctl.table.get(sel.config).unwrap();
            let rtt = row.encode_time_ms
                + row.decode_time_ms
                + 2.0 * 20.0
                + (row.payload_bytes + 64) as f64 / rate * 1000.0;
            ctl.observe_rtt(sel.config, rtt).unwrap();
        }
        let step = step_frame.unwrap();
        assert_eq!(configs[step - 1], ConfigPoint { s: 4, b: 4 });
        let switched = (step..step + 4).find(|&i| configs[i] != configs[step - 1]);
        assert!(switched.is_some(), "no switch within 3 frames: {configs:?}");
        // and the post-step steady state drops b, not s
        let last = *configs.last().unwrap();
        assert_eq!(last.s, 4);
        assert!(last.b < 4);
    }

    #[test]
    fn monotone_sweep_switches_bandwidth_first() {
        let est = ChannelEstimate::with_initial(0.5, 200_000.0, 20.0);
        let mut ctl = Controller::new(desk_table(), est, 400.0).unwrap();
        let mut configs = Vec::new();
        for frame in 0..60 {
            // smooth monotone decline 200 -> 80 kB/s
            let rate = 200_000.0 - (120_000.0 * frame as f64 / 59.0);
            let sel = ctl.select().unwrap();
            configs.push(sel.config);
            let row = *ctl.table.get(sel.config).unwrap();
            let rtt = row.encode_time_ms
                + row.decode_time_ms
                + 2.0 * 20.0
                + (row.payload_bytes + 64) as f64 / rate * 1000.0;
            ctl.observe_rtt(sel.config, rtt).unwrap();
        }
        let mut b_changes = 0;
        let mut s_changes = 0;
        for w in configs.windows(2) {
            if w[1].b != w[0].b {
                b_changes += 1;
            }
            if w[1].s != w[0].s {
                s_changes += 1;
            }
        }
        assert!(b_changes >= 1);
        assert!(b_changes >= s_changes, "b {b_changes} vs s {s_changes}: {configs:?}");
    }

    #[test]
    fn switch_penalty_damps_oscillation() {
        // alternate the measured rate around a feasibility boundary;
        // with hysteresis the config must not flap every frame
        let run = |penalty: f64| {
            let est = ChannelEstimate::with_initial(0.9, 200_000.0, 20.0);
            let mut ctl = Controller::new(desk_table(), est, 400.0).unwrap();
            ctl.switch_penalty_ms = penalty;
            let mut switches = 0;
            let mut prev = None;
            for frame in 0..40 {
                // straddle the (4,4) feasibility boundary near 100.8 kB/s
                let rate = if frame % 2 == 0 { 108_000.0 } else { 96_000.0 };
                let sel = ctl.select().unwrap();
                if prev.is_some_and(|p| p != sel.config) {
                    switches += 1;
                }
                prev = Some(sel.config);
                let row = *ctl.table.get(sel.config).unwrap();
                let rtt = row.encode_time_ms
                    + row.decode_time_ms
                    + 2.0 * 20.0
                    + (row.payload_bytes + 64) as f64 / rate * 1000.0;
                ctl.observe_rtt(sel.config, rtt).unwrap();
            }
            switches
        };
        let with_penalty = run(30.0);
        let without = run(0.0);
        assert!(with_penalty <= without, "{with_penalty} vs {without}");
        assert!(with_penalty <= 2, "hysteresis failed: {with_penalty} switches");
    }

    prop_compose! {
        fn candidate_set()(
            rows in proptest::collection::vec(
                (1u8..=4, 1u8..=4, 0u32..40, 0u32..30),
                1..16,
            )
        ) -> Vec<(ConfigPoint, f64, f64)> {
            // coarse value pools force metric and RTT ties
            rows.into_iter()
                .map(|(s, b, rtt, metric)| {
                    (ConfigPoint { s, b }, rtt as f64 * 10.0, metric as f64 / 4.0)
                })
                .collect()
        }
    }

    proptest! {
        #[test]
        fn selection_equals_brute_force(cands in candidate_set(), deadline in 0.0f64..500.0) {
            let got = select_among(cands.clone(), deadline).unwrap();
            let want = brute_force(&cands, deadline).unwrap();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn selection_is_metric_scale_invariant(cands in candidate_set(), deadline in 0.0f64..500.0, scale in 0.001f64..1000.0) {
            let scaled: Vec<_> = cands.iter().map(|&(c, r, m)| (c, r, m * scale)).collect();
            let a = select_among(cands, deadline).unwrap();
            let b = select_among(scaled, deadline).unwrap();
            prop_assert_eq!(a.config, b.config);
        }
    }
}
