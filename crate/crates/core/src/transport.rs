//! In-process star network with exact framing and per-party accounting.
//!
//! Wire frame (all integers little-endian):
//!
//! ```text
//! tag (1) ‖ sender (2) ‖ receiver (2) ‖ epoch (4) ‖ round (4) ‖ payload_len (4) ‖ payload
//! ```
//!
//! Every byte of every frame is metered: at the sender when it is sent and
//! at the receiver when it is taken from the inbox.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER_LEN: usize = 17;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("unknown party {0}")]
    UnknownParty(u16),

    #[error("channel closed")]
    ChannelClosed,

    #[error("clients may only talk to the aggregator ({sender} -> {receiver})")]
    TopologyViolation { sender: u16, receiver: u16 },

    #[error("malformed frame: {0}")]
    Malformed(&'static str),

    #[error("no baseline run to compute overhead against")]
    MissingBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tag {
    PubKeyRequest = 1,
    PubKeySet = 2,
    PubKeyForward = 3,
    EncryptedBatch = 4,
    WeightSlice = 5,
    Labels = 6,
    MaskedActivation = 7,
    Delta = 8,
    MaskedGradient = 9,
    GradientForward = 10,
    Prediction = 11,
    Ack = 12,
}

impl Tag {
    pub const ALL: [Tag; 12] = [
        Tag::PubKeyRequest,
        Tag::PubKeySet,
        Tag::PubKeyForward,
        Tag::EncryptedBatch,
        Tag::WeightSlice,
        Tag::Labels,
        Tag::MaskedActivation,
        Tag::Delta,
        Tag::MaskedGradient,
        Tag::GradientForward,
        Tag::Prediction,
        Tag::Ack,
    ];

    pub fn from_u8(v: u8) -> Option<Tag> {
        Tag::ALL.iter().copied().find(|t| *t as u8 == v)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub tag: Tag,
    pub sender: u16,
    pub receiver: u16,
    pub epoch: u32,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(tag: Tag, sender: u16, receiver: u16, epoch: u32, round: u32, payload: Vec<u8>) -> Self {
        Envelope {
            tag,
            sender,
            receiver,
            epoch,
            round,
            payload,
        }
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.frame_len());
        out.push(self.tag as u8);
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.receiver.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(frame: &[u8]) -> Result<Envelope, TransportError> {
        if frame.len() < HEADER_LEN {
            return Err(TransportError::Malformed("short header"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([frame[i], frame[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(frame[i..i + 4].try_into().unwrap());
        let tag = Tag::from_u8(frame[0]).ok_or(TransportError::Malformed("unknown tag"))?;
        let len = u32_at(13) as usize;
        if frame.len() - HEADER_LEN != len {
            return Err(TransportError::Malformed("payload length mismatch"));
        }
        Ok(Envelope {
            tag,
            sender: u16_at(1),
            receiver: u16_at(3),
            epoch: u32_at(5),
            round: u32_at(9),
            payload: frame[HEADER_LEN..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartyKind {
    Active,
    Passive,
    Aggregator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Testing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dir {
    Sent,
    Received,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counter {
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrafficMeter {
    traffic: BTreeMap<(u16, Phase, Dir, Tag), Counter>,
    cpu: BTreeMap<(u16, Phase), Duration>,
}

impl TrafficMeter {
    fn record(&mut self, party: u16, phase: Phase, dir: Dir, tag: Tag, bytes: usize) {
        let c = self.traffic.entry((party, phase, dir, tag)).or_default();
        c.messages += 1;
        c.bytes += bytes as u64;
    }

    pub fn add_cpu(&mut self, party: u16, phase: Phase, d: Duration) {
        *self.cpu.entry((party, phase)).or_default() += d;
    }

    pub fn counter(&self, party: u16, phase: Phase, dir: Dir, tag: Tag) -> Counter {
        self.traffic.get(&(party, phase, dir, tag)).copied().unwrap_or_default()
    }

    fn sum_bytes(&self, pred: impl Fn(u16, Phase, Dir, Tag) -> bool) -> u64 {
        self.traffic
            .iter()
            .filter(|((p, ph, d, t), _)| pred(*p, *ph, *d, *t))
            .map(|(_, c)| c.bytes)
            .sum()
    }

    pub fn bytes(&self, party: u16, phase: Phase, dir: Dir) -> u64 {
        self.sum_bytes(|p, ph, d, _| p == party && ph == phase && d == dir)
    }

    /// Sent plus received bytes for `party` in `phase`.
    pub fn transmitted(&self, party: u16, phase: Phase) -> u64 {
        self.sum_bytes(|p, ph, _, _| p == party && ph == phase)
    }

    pub fn total(&self, dir: Dir) -> u64 {
        self.sum_bytes(|_, _, d, _| d == dir)
    }

    pub fn messages(&self, tag: Tag, dir: Dir) -> u64 {
        self.traffic
            .iter()
            .filter(|((_, _, d, t), _)| *d == dir && *t == tag)
            .map(|(_, c)| c.messages)
            .sum()
    }

    pub fn cpu(&self, party: u16, phase: Phase) -> Duration {
        self.cpu.get(&(party, phase)).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub bytes: usize,
}

struct NetState {
    kinds: BTreeMap<u16, PartyKind>,
    aggregator: u16,
    inboxes: BTreeMap<u16, VecDeque<Envelope>>,
    meter: TrafficMeter,
    log: Vec<Envelope>,
    capture: bool,
    closed: bool,
    phase: Phase,
    suppressed: Vec<(u16, Tag)>,
}

/// Reliable, ordered star network. Safe to share between sender threads;
/// each inbox is meant to have a single consumer.
pub struct Network {
    state: Mutex<NetState>,
}

impl Network {
    /// `parties` must contain exactly one aggregator.
    pub fn new(parties: &[(u16, PartyKind)]) -> Self {
        let aggregators: Vec<u16> = parties
            .iter()
            .filter(|(_, k)| *k == PartyKind::Aggregator)
            .map(|(i, _)| *i)
            .collect();
        assert_eq!(aggregators.len(), 1, "a star network has exactly one aggregator");
        Network {
            state: Mutex::new(NetState {
                kinds: parties.iter().copied().collect(),
                aggregator: aggregators[0],
                inboxes: parties.iter().map(|(i, _)| (*i, VecDeque::new())).collect(),
                meter: TrafficMeter::default(),
                log: Vec::new(),
                capture: false,
                closed: false,
                phase: Phase::Training,
                suppressed: Vec::new(),
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, NetState> {
        self.state.lock().expect("network mutex poisoned")
    }

    pub fn aggregator(&self) -> u16 {
        self.lock().aggregator
    }

    pub fn kind(&self, party: u16) -> Option<PartyKind> {
        self.lock().kinds.get(&party).copied()
    }

    pub fn parties(&self) -> Vec<(u16, PartyKind)> {
        self.lock().kinds.iter().map(|(i, k)| (*i, *k)).collect()
    }

    pub fn set_capture(&self, on: bool) {
        self.lock().capture = on;
    }

    pub fn set_phase(&self, phase: Phase) {
        self.lock().phase = phase;
    }

    pub fn phase(&self) -> Phase {
        self.lock().phase
    }

    /// Simulates a non-responsive party: matching messages are silently
    /// never sent.
    pub fn suppress(&self, sender: u16, tag: Tag) {
        self.lock().suppressed.push((sender, tag));
    }

    pub fn close(&self) {
        self.lock().closed = true;
    }

    pub fn send(&self, env: Envelope) -> Result<Receipt, TransportError> {
        let mut st = self.lock();
        if st.closed {
            return Err(TransportError::ChannelClosed);
        }
        for p in [env.sender, env.receiver] {
            if !st.kinds.contains_key(&p) {
                return Err(TransportError::UnknownParty(p));
            }
        }
        if env.sender != st.aggregator && env.receiver != st.aggregator {
            return Err(TransportError::TopologyViolation {
                sender: env.sender,
                receiver: env.receiver,
            });
        }
        let bytes = env.frame_len();
        if st.suppressed.contains(&(env.sender, env.tag)) {
            return Ok(Receipt { bytes });
        }
        let phase = st.phase;
        st.meter.record(env.sender, phase, Dir::Sent, env.tag, bytes);
        if st.capture {
            st.log.push(env.clone());
        }
        st.inboxes.get_mut(&env.receiver).unwrap().push_back(env);
        Ok(Receipt { bytes })
    }

    /// Takes the oldest envelope in `party`'s inbox matching `filter`.
    pub fn recv(
        &self,
        party: u16,
        filter: impl Fn(&Envelope) -> bool,
    ) -> Result<Option<Envelope>, TransportError> {
        let mut st = self.lock();
        if st.closed {
            return Err(TransportError::ChannelClosed);
        }
        let phase = st.phase;
        let inbox = st
            .inboxes
            .get_mut(&party)
            .ok_or(TransportError::UnknownParty(party))?;
        let Some(pos) = inbox.iter().position(filter) else {
            return Ok(None);
        };
        let env = inbox.remove(pos).unwrap();
        st.meter
            .record(party, phase, Dir::Received, env.tag, env.frame_len());
        Ok(Some(env))
    }

    pub fn recv_from(&self, party: u16, sender: u16, tag: Tag) -> Result<Option<Envelope>, TransportError> {
        self.recv(party, |e| e.sender == sender && e.tag == tag)
    }

    pub fn pending(&self, party: u16) -> usize {
        self.lock().inboxes.get(&party).map_or(0, VecDeque::len)
    }

    /// Runs `work` and charges its wall-clock time to `party` in the current phase.
    pub fn time<R>(&self, party: u16, work: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let out = work();
        let elapsed = start.elapsed();
        let mut st = self.lock();
        let phase = st.phase;
        st.meter.add_cpu(party, phase, elapsed);
        out
    }

    pub fn meter(&self) -> TrafficMeter {
        self.lock().meter.clone()
    }

    pub fn log(&self) -> Vec<Envelope> {
        self.lock().log.clone()
    }

    pub fn snapshot_metrics(&self) -> MetricsSnapshot {
        let st = self.lock();
        let mut rows = Vec::new();
        for (&party, &kind) in &st.kinds {
            for phase in [Phase::Training, Phase::Testing] {
                rows.push(PartyMetrics {
                    party,
                    kind,
                    phase,
                    bytes: st.meter.transmitted(party, phase),
                    cpu_ms: st.meter.cpu(party, phase).as_secs_f64() * 1e3,
                });
            }
        }
        MetricsSnapshot { rows }
    }
}

/// One JSON object per line; the payload is hex-encoded.
pub fn trace_jsonl(log: &[Envelope]) -> String {
    let mut out = String::new();
    for e in log {
        let line = serde_json::json!({
            "tag": e.tag,
            "sender": e.sender,
            "receiver": e.receiver,
            "epoch": e.epoch,
            "round": e.round,
            "payload_len": e.payload.len(),
            "payload": hex::encode(&e.payload),
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyMetrics {
    pub party: u16,
    pub kind: PartyKind,
    pub phase: Phase,
    pub bytes: u64,
    pub cpu_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsSnapshot {
    pub rows: Vec<PartyMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub party: u16,
    pub kind: PartyKind,
    pub train_bytes_total: u64,
    pub train_bytes_overhead: i64,
    pub test_bytes_total: u64,
    pub test_bytes_overhead: i64,
    pub train_cpu_ms_total: f64,
    pub train_cpu_ms_overhead: f64,
    pub test_cpu_ms_total: f64,
    pub test_cpu_ms_overhead: f64,
}

impl MetricsSnapshot {
    pub fn get(&self, party: u16, phase: Phase) -> Option<&PartyMetrics> {
        self.rows.iter().find(|r| r.party == party && r.phase == phase)
    }

    /// `self - baseline` for every party and phase.
    pub fn overhead(&self, baseline: Option<&MetricsSnapshot>) -> Result<Vec<OverheadRow>, TransportError> {
        let base = baseline.ok_or(TransportError::MissingBaseline)?;
        let mut parties: Vec<(u16, PartyKind)> = self.rows.iter().map(|r| (r.party, r.kind)).collect();
        parties.dedup();
        parties
            .into_iter()
            .map(|(party, kind)| {
                fn cell(s: &MetricsSnapshot, party: u16, ph: Phase) -> Result<&PartyMetrics, TransportError> {
                    s.get(party, ph).ok_or(TransportError::MissingBaseline)
                }
                let (tr, te) = (cell(self, party, Phase::Training)?, cell(self, party, Phase::Testing)?);
                let (btr, bte) = (cell(base, party, Phase::Training)?, cell(base, party, Phase::Testing)?);
                Ok(OverheadRow {
                    party,
                    kind,
                    train_bytes_total: tr.bytes,
                    train_bytes_overhead: tr.bytes as i64 - btr.bytes as i64,
                    test_bytes_total: te.bytes,
                    test_bytes_overhead: te.bytes as i64 - bte.bytes as i64,
                    train_cpu_ms_total: tr.cpu_ms,
                    train_cpu_ms_overhead: tr.cpu_ms - btr.cpu_ms,
                    test_cpu_ms_total: te.cpu_ms,
                    test_cpu_ms_overhead: te.cpu_ms - bte.cpu_ms,
                })
            })
            .collect()
    }
}

pub const OVERHEAD_CSV_HEADER: &str = "party,kind,train_bytes_total,train_bytes_overhead,test_bytes_total,test_bytes_overhead,train_cpu_ms_total,train_cpu_ms_overhead,test_cpu_ms_total,test_cpu_ms_overhead";

pub fn overhead_csv(rows: &[OverheadRow]) -> String {
    let mut out = String::from(OVERHEAD_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let kind = serde_json::to_value(r.kind).unwrap();
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.3},{:.3},{:.3},{:.3}\n",
            r.party,
            kind.as_str().unwrap(),
            r.train_bytes_total,
            r.train_bytes_overhead,
            r.test_bytes_total,
            r.test_bytes_overhead,
            r.train_cpu_ms_total,
            r.train_cpu_ms_overhead,
            r.test_cpu_ms_total,
            r.test_cpu_ms_overhead
        ));
    }
    out
}
