//! Frames, group selection, and the anchor/controller/mobile state machines
//! of the beacon round, plus the wakeup-period optimum.
//!
//! The state machines are pure: each `handle` call takes one event and
//! returns the actions the node wants performed, with delays relative to the
//! event. The simulator owns time, the medium, and energy.

use std::collections::BTreeSet;

use crc::{Crc, CRC_16_IBM_3740};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Codebooks, EncodedPayload, PAYLOAD_BYTES};
use crate::energy::PowerProfile;

pub const PREAMBLE: u8 = 0xAA;
/// Preamble, kind, flags, payload, CRC.
pub const FRAME_BYTES: usize = 3 + PAYLOAD_BYTES + 2;
pub const FLAG_REQUEST_AGAIN: u8 = 0x01;
/// Most IDs a sleep frame can carry.
pub const MAX_SLEEP_IDS: usize = (PAYLOAD_BYTES - 1) / 2;

const CRC16: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

pub fn crc16(bytes: &[u8]) -> u16 {
    CRC16.checksum(bytes)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("frame must be {FRAME_BYTES} bytes, got {0}")]
    FrameLength(usize),
    #[error("bad preamble {0:#04x}")]
    Preamble(u8),
    #[error("unknown packet kind {0}")]
    Kind(u8),
    #[error("crc mismatch: frame carries {carried:#06x}, computed {computed:#06x}")]
    Crc { carried: u16, computed: u16 },
    #[error("sleep list holds at most {MAX_SLEEP_IDS} ids, got {0}")]
    SleepListTooLong(usize),
    #[error("empty anchor table")]
    EmptyTable,
    #[error("unknown border anchor {0}")]
    UnknownBorder(u16),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum PacketKind {
    WakeupRequest = 1,
    WakeupReply = 2,
    BeaconRequest = 3,
    BeaconReply = 4,
    Sleep = 5,
}

impl PacketKind {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => Self::WakeupRequest,
            2 => Self::WakeupReply,
            3 => Self::BeaconRequest,
            4 => Self::BeaconReply,
            5 => Self::Sleep,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::WakeupRequest => "wakeup-request",
            Self::WakeupReply => "wakeup-reply",
            Self::BeaconRequest => "beacon-request",
            Self::BeaconReply => "beacon-reply",
            Self::Sleep => "sleep",
        }
    }
}

/// One frame on air.
///
/// Wire layout (35 bytes): preamble `0xAA`, kind tag, flags (bit 0 is
/// request-again), 30 payload bytes, then CRC-16/CCITT-FALSE over the first
/// 33 bytes, big-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Packet {
    pub kind: PacketKind,
    pub request_again: bool,
    pub payload: EncodedPayload,
}

impl Packet {
    fn with_prefix(kind: PacketKind, request_again: bool, prefix: &[u8]) -> Self {
        let mut bytes = [0u8; PAYLOAD_BYTES];
        bytes[..prefix.len()].copy_from_slice(prefix);
        Self { kind, request_again, payload: EncodedPayload::from_bytes(bytes) }
    }

    /// Carries the sender ID and, when present, its own harvested-power
    /// reading in watts (f64, big-endian) in bytes 2..10.
    pub fn wakeup_request(mono_id: u16, reading: Option<f64>, request_again: bool) -> Self {
        let mut prefix = mono_id.to_be_bytes().to_vec();
        if let Some(r) = reading {
            prefix.extend_from_slice(&r.to_be_bytes());
        }
        Self::with_prefix(PacketKind::WakeupRequest, request_again, &prefix)
    }

    pub fn wakeup_reply(esa_id: u16) -> Self {
        Self::with_prefix(PacketKind::WakeupReply, false, &esa_id.to_be_bytes())
    }

    pub fn beacon_request(mono_id: u16, request_again: bool) -> Self {
        Self::with_prefix(PacketKind::BeaconRequest, request_again, &mono_id.to_be_bytes())
    }

    pub fn beacon_reply(payload: EncodedPayload) -> Self {
        Self { kind: PacketKind::BeaconReply, request_again: false, payload }
    }

    /// Count byte followed by big-endian IDs.
    pub fn sleep(ids: &[u16]) -> Result<Self, ProtocolError> {
        if ids.len() > MAX_SLEEP_IDS {
            return Err(ProtocolError::SleepListTooLong(ids.len()));
        }
        let mut prefix = vec![ids.len() as u8];
        for id in ids {
            prefix.extend_from_slice(&id.to_be_bytes());
        }
        Ok(Self::with_prefix(PacketKind::Sleep, false, &prefix))
    }

    /// Sender ID in the first two payload bytes.
    pub fn source_id(&self) -> u16 {
        let b = self.payload.bytes();
        u16::from_be_bytes([b[0], b[1]])
    }

    pub fn reading(&self) -> Option<f64> {
        if self.kind != PacketKind::WakeupRequest {
            return None;
        }
        let b = self.payload.bytes();
        let v = f64::from_be_bytes(b[2..10].try_into().unwrap());
        (b[2..10].iter().any(|&x| x != 0)).then_some(v)
    }

    pub fn sleep_ids(&self) -> Vec<u16> {
        if self.kind != PacketKind::Sleep {
            return Vec::new();
        }
        let b = self.payload.bytes();
        let n = (b[0] as usize).min(MAX_SLEEP_IDS);
        (0..n).map(|i| u16::from_be_bytes([b[1 + 2 * i], b[2 + 2 * i]])).collect()
    }

    pub fn to_bytes(&self) -> [u8; FRAME_BYTES] {
        let mut out = [0u8; FRAME_BYTES];
        out[0] = PREAMBLE;
        out[1] = self.kind as u8;
        out[2] = if self.request_again { FLAG_REQUEST_AGAIN } else { 0 };
        out[3..3 + PAYLOAD_BYTES].copy_from_slice(self.payload.bytes());
        let crc = crc16(&out[..FRAME_BYTES - 2]);
        out[FRAME_BYTES - 2..].copy_from_slice(&crc.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() != FRAME_BYTES {
            return Err(ProtocolError::FrameLength(bytes.len()));
        }
        if bytes[0] != PREAMBLE {
            return Err(ProtocolError::Preamble(bytes[0]));
        }
        let carried = u16::from_be_bytes([bytes[FRAME_BYTES - 2], bytes[FRAME_BYTES - 1]]);
        let computed = crc16(&bytes[..FRAME_BYTES - 2]);
        if carried != computed {
            return Err(ProtocolError::Crc { carried, computed });
        }
        let kind = PacketKind::from_tag(bytes[1]).ok_or(ProtocolError::Kind(bytes[1]))?;
        let payload = EncodedPayload::from_slice(&bytes[3..3 + PAYLOAD_BYTES]).expect("fixed slice");
        Ok(Self { kind, request_again: bytes[2] & FLAG_REQUEST_AGAIN != 0, payload })
    }

    pub fn to_hex(&self) -> String {
        self.to_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Uncoded reply payload: ID then CRC-16 of the ID, both big-endian.
pub fn plain_reply_payload(id: u16) -> EncodedPayload {
    let idb = id.to_be_bytes();
    let crc = crc16(&idb).to_be_bytes();
    let mut bytes = [0u8; PAYLOAD_BYTES];
    bytes[..4].copy_from_slice(&[idb[0], idb[1], crc[0], crc[1]]);
    EncodedPayload::from_bytes(bytes)
}

pub fn parse_plain_reply(payload: &EncodedPayload) -> Option<u16> {
    let b = payload.bytes();
    let id = u16::from_be_bytes([b[0], b[1]]);
    let crc = u16::from_be_bytes([b[2], b[3]]);
    (crc == crc16(&b[..2]) && b[4..].iter().all(|&x| x == 0)).then_some(id)
}

/// Controller-side record of one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EhaEntry {
    pub id: u16,
    pub position: [f64; 2],
    /// Reported harvested power, W.
    pub mu: f64,
}

/// Splits anchors into the near group (`mu >= rho`) and the far group.
pub fn categorize_ranges(table: &[EhaEntry], rho: f64) -> Result<(Vec<u16>, Vec<u16>), ProtocolError> {
    if table.is_empty() {
        return Err(ProtocolError::EmptyTable);
    }
    let (near, far): (Vec<&EhaEntry>, Vec<&EhaEntry>) = table.iter().partition(|e| e.mu >= rho);
    Ok((near.iter().map(|e| e.id).collect(), far.iter().map(|e| e.id).collect()))
}

/// Reported power of the anchor in the geographic middle of the table,
/// ordering anchors by x then y.
pub fn default_rho(table: &[EhaEntry]) -> Result<f64, ProtocolError> {
    if table.is_empty() {
        return Err(ProtocolError::EmptyTable);
    }
    let mut sorted: Vec<&EhaEntry> = table.iter().collect();
    sorted.sort_by(|a, b| a.position[0].total_cmp(&b.position[0]).then(a.position[1].total_cmp(&b.position[1])));
    Ok(sorted[(sorted.len() - 1) / 2].mu)
}

/// First wave: anchors at least as strong as the border; second wave:
/// anchors at most as strong. The border belongs to both.
pub fn categorize_waves(table: &[EhaEntry], border: u16) -> Result<(Vec<u16>, Vec<u16>), ProtocolError> {
    let theta = table
        .iter()
        .find(|e| e.id == border)
        .ok_or(ProtocolError::UnknownBorder(border))?
        .mu;
    let first = table.iter().filter(|e| e.mu >= theta).map(|e| e.id).collect();
    let second = table.iter().filter(|e| e.mu <= theta).map(|e| e.id).collect();
    Ok((first, second))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Mode {
    WakeAll,
    RangeEstimation,
    TwoWave { border: u16 },
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::WakeAll => "wake-all",
            Mode::RangeEstimation => "range-estimation",
            Mode::TwoWave { .. } => "two-wave",
        }
    }
}

/// Round timing shared by all roles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    /// Frame airtime, s.
    pub airtime: f64,
    /// Anchor ADC poll period, s.
    pub t_c: f64,
    /// Transmitter-off duration of the wakeup signal, s.
    pub t_off: f64,
    /// Turnaround gap between consecutive frames, s.
    pub guard: f64,
}

impl Timing {
    /// How long an anchor listens after detecting the wakeup signal. It
    /// covers the latest possible beacon request after the earliest
    /// possible detection.
    pub fn listen_window(&self) -> f64 {
        self.t_c + 2.0 * self.airtime + self.guard
    }

    /// Delay from the end of the wakeup-reply listen window to sending the
    /// beacon request, leaving room for the sleep frame.
    pub fn request_delay(&self) -> f64 {
        self.t_c + self.airtime
    }

    /// Delay from the end of the wakeup-reply listen window to a repeated
    /// wakeup, once the transmitter is back on and anchors have re-armed.
    pub fn repeat_delay(&self) -> f64 {
        self.t_off + self.t_c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EsaEvent {
    Received(Packet),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EsaAction {
    Send { delay: f64, packet: Packet },
    Transmitter { delay: f64, on: bool },
}

/// Controller co-located with an energy transmitter.
#[derive(Debug, Clone)]
pub struct EsaState {
    pub id: u16,
    pub mode: Mode,
    pub table: Vec<EhaEntry>,
    pub rho: f64,
    pub transmitter_on: bool,
    timing: Timing,
    awakened: Vec<u16>,
    sleeping: Vec<u16>,
}

impl EsaState {
    pub fn new(id: u16, mode: Mode, table: Vec<EhaEntry>, rho: f64, timing: Timing) -> Result<Self, ProtocolError> {
        if table.is_empty() {
            return Err(ProtocolError::EmptyTable);
        }
        if let Mode::TwoWave { border } = mode {
            categorize_waves(&table, border)?;
        }
        Ok(Self { id, mode, table, rho, transmitter_on: true, timing, awakened: Vec::new(), sleeping: Vec::new() })
    }

    fn all_ids(&self) -> Vec<u16> {
        self.table.iter().map(|e| e.id).collect()
    }

    /// Sleep list and awakened set for the next wakeup.
    fn plan(&self, packet: &Packet) -> (Vec<u16>, Vec<u16>) {
        let all = self.all_ids();
        let minus = |a: &[u16], b: &[u16]| a.iter().copied().filter(|x| !b.contains(x)).collect::<Vec<_>>();
        match self.mode {
            Mode::WakeAll => (all, Vec::new()),
            Mode::RangeEstimation => {
                let (near, far) = categorize_ranges(&self.table, self.rho).expect("non-empty table");
                if packet.request_again {
                    let awake = minus(&all, &self.awakened);
                    let asleep = self.awakened.clone();
                    (awake, asleep)
                } else if packet.reading().is_some_and(|xi| xi > self.rho) {
                    (near, far)
                } else {
                    (far, near)
                }
            }
            Mode::TwoWave { border } => {
                let (first, second) = categorize_waves(&self.table, border).expect("border validated");
                if packet.request_again {
                    (second, minus(&first, &[border]))
                } else {
                    (first, minus(&second, &[border]))
                }
            }
        }
    }

    pub fn handle(&mut self, event: EsaEvent) -> Vec<EsaAction> {
        let EsaEvent::Received(packet) = event;
        if packet.kind != PacketKind::WakeupRequest {
            return Vec::new();
        }
        let (awake, asleep) = self.plan(&packet);
        self.awakened = awake;
        self.sleeping = asleep.clone();
        let air = self.timing.airtime;
        let mut actions = vec![
            EsaAction::Send { delay: 0.0, packet: Packet::wakeup_reply(self.id) },
            EsaAction::Transmitter { delay: air, on: false },
            EsaAction::Transmitter { delay: air + self.timing.t_off, on: true },
        ];
        if !asleep.is_empty() {
            for chunk in asleep.chunks(MAX_SLEEP_IDS) {
                actions.push(EsaAction::Send {
                    delay: air + self.timing.t_c,
                    packet: Packet::sleep(chunk).expect("chunked"),
                });
            }
        }
        actions
    }

    pub fn awakened(&self) -> &[u16] {
        &self.awakened
    }

    pub fn sleeping(&self) -> &[u16] {
        &self.sleeping
    }

    pub fn set_transmitter(&mut self, on: bool) {
        self.transmitter_on = on;
    }
}

/// Edge-triggered drop detector over a rolling window of ADC readings.
#[derive(Debug, Clone, PartialEq)]
pub struct DropDetector {
    window: std::collections::VecDeque<f64>,
    capacity: usize,
    ratio: f64,
    armed: bool,
}

impl DropDetector {
    pub fn new(capacity: usize, ratio: f64) -> Self {
        Self { window: Default::default(), capacity: capacity.max(1), ratio, armed: true }
    }

    pub fn average(&self) -> Option<f64> {
        (!self.window.is_empty()).then(|| self.window.iter().sum::<f64>() / self.window.len() as f64)
    }

    pub fn armed(&self) -> bool {
        self.armed
    }

    /// Feeds one reading; true when it falls below `ratio` of the rolling
    /// average while armed. Detection disarms until a reading recovers.
    pub fn observe(&mut self, reading: f64) -> bool {
        let mut fired = false;
        if let Some(avg) = self.average() {
            if reading < self.ratio * avg {
                if self.armed {
                    self.armed = false;
                    fired = true;
                }
            } else {
                self.armed = true;
            }
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(reading);
        fired
    }

    /// Feeds `count` identical readings; returns whether any fired.
    pub fn observe_repeated(&mut self, reading: f64, count: u64) -> bool {
        let mut fired = false;
        for _ in 0..count.min(self.capacity as u64 + 1) {
            fired |= self.observe(reading);
        }
        fired
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EhaMode {
    Sleep,
    Listening,
    Transmitting,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EhaEvent {
    AdcReading(f64),
    Received(Packet),
    ListenTimeout,
    TransmitDone,
    BrownOut,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EhaAction {
    StartListening { timeout: f64 },
    StopListening,
    Send(Packet),
}

/// Energy-harvesting anchor.
#[derive(Debug, Clone)]
pub struct EhaState {
    pub id: u16,
    pub mode: EhaMode,
    pub always_listening: bool,
    pub detector: DropDetector,
    reply: Packet,
    listen_window: f64,
}

impl EhaState {
    pub fn new(id: u16, reply_payload: EncodedPayload, timing: &Timing, always_listening: bool) -> Self {
        Self {
            id,
            mode: if always_listening { EhaMode::Listening } else { EhaMode::Sleep },
            always_listening,
            detector: DropDetector::new(8, 0.5),
            reply: Packet::beacon_reply(reply_payload),
            listen_window: timing.listen_window(),
        }
    }

    fn idle_mode(&self) -> EhaMode {
        if self.always_listening {
            EhaMode::Listening
        } else {
            EhaMode::Sleep
        }
    }

    pub fn handle(&mut self, event: EhaEvent) -> Vec<EhaAction> {
        match (self.mode, event) {
            (EhaMode::Sleep, EhaEvent::AdcReading(r)) => {
                if self.detector.observe(r) {
                    self.mode = EhaMode::Listening;
                    vec![EhaAction::StartListening { timeout: self.listen_window }]
                } else {
                    Vec::new()
                }
            }
            (EhaMode::Listening, EhaEvent::Received(p)) => match p.kind {
                PacketKind::Sleep if !self.always_listening && p.sleep_ids().contains(&self.id) => {
                    self.mode = EhaMode::Sleep;
                    vec![EhaAction::StopListening]
                }
                PacketKind::BeaconRequest => {
                    self.mode = EhaMode::Transmitting;
                    vec![EhaAction::Send(self.reply)]
                }
                _ => Vec::new(),
            },
            (EhaMode::Listening, EhaEvent::ListenTimeout) if !self.always_listening => {
                self.mode = EhaMode::Sleep;
                vec![EhaAction::StopListening]
            }
            (EhaMode::Transmitting, EhaEvent::TransmitDone) => {
                self.mode = self.idle_mode();
                Vec::new()
            }
            (_, EhaEvent::BrownOut) => {
                self.mode = self.idle_mode();
                Vec::new()
            }
            _ => Vec::new(),
        }
    }
}

/// Outcome of one beacon round as seen by the mobile node, before ground
/// truth is attached.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonoOutcome {
    pub requested: bool,
    pub decoded: BTreeSet<u16>,
    pub selected: Option<u16>,
    pub waves: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MonoEvent {
    /// Round start with the node's own harvested-power reading.
    Start { reading: f64 },
    /// Frame delivered while listening; `None` after a listen window with
    /// nothing decodable.
    Received(Option<Delivery>),
    Timer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub kind: PacketKind,
    pub payload: EncodedPayload,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MonoAction {
    Send { delay: f64, packet: Packet },
    /// Listen for one frame starting after `delay` for `duration`.
    Listen { delay: f64, duration: f64 },
    Timer { delay: f64 },
    Finish(MonoOutcome),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    AwaitWakeupReply,
    WaitPoll,
    AwaitBeaconReply,
    WaitRepeat,
}

/// How the mobile node turns a beacon-reply payload into IDs.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplyDecoder {
    Spread(Codebooks),
    Plain,
}

impl ReplyDecoder {
    /// Maps codebook indices back to anchor IDs via `ids`.
    pub fn decode(&self, payload: &EncodedPayload, ids: &[u16]) -> (BTreeSet<u16>, Option<u16>) {
        match self {
            ReplyDecoder::Spread(cb) => {
                let cands = cb.decode_scored(payload);
                let set = cands.iter().filter_map(|c| ids.get(c.id as usize).copied()).collect();
                let best = cands
                    .iter()
                    .max_by(|a, b| a.score.cmp(&b.score).then(b.id.cmp(&a.id)))
                    .and_then(|c| ids.get(c.id as usize).copied());
                (set, best)
            }
            ReplyDecoder::Plain => match parse_plain_reply(payload) {
                Some(id) if ids.contains(&id) => (BTreeSet::from([id]), Some(id)),
                _ => (BTreeSet::new(), None),
            },
        }
    }
}

/// Mobile node driving a beacon round.
#[derive(Debug, Clone)]
pub struct MonoState {
    pub id: u16,
    pub mode: Mode,
    timing: Timing,
    decoder: ReplyDecoder,
    anchor_ids: Vec<u16>,
    phase: Phase,
    repeated: bool,
    reading: f64,
    outcome: MonoOutcome,
}

impl MonoState {
    /// `anchor_ids[i]` is the anchor using codebook index `i`.
    pub fn new(id: u16, mode: Mode, timing: Timing, decoder: ReplyDecoder, anchor_ids: Vec<u16>) -> Self {
        Self {
            id,
            mode,
            timing,
            decoder,
            anchor_ids,
            phase: Phase::Idle,
            repeated: false,
            reading: 0.0,
            outcome: MonoOutcome::default(),
        }
    }

    pub fn busy(&self) -> bool {
        self.phase != Phase::Idle
    }

    /// Ends the round early (brown-out), keeping what was decoded so far.
    pub fn abort(&mut self) -> MonoOutcome {
        self.phase = Phase::Idle;
        std::mem::take(&mut self.outcome)
    }

    fn send_wakeup(&mut self) -> Vec<MonoAction> {
        self.phase = Phase::AwaitWakeupReply;
        let reading = matches!(self.mode, Mode::RangeEstimation).then_some(self.reading);
        let air = self.timing.airtime;
        vec![
            MonoAction::Send { delay: 0.0, packet: Packet::wakeup_request(self.id, reading, self.repeated) },
            MonoAction::Listen { delay: air, duration: air + self.timing.guard },
        ]
    }

    fn finish(&mut self) -> Vec<MonoAction> {
        self.phase = Phase::Idle;
        vec![MonoAction::Finish(std::mem::take(&mut self.outcome))]
    }

    pub fn handle(&mut self, event: MonoEvent) -> Vec<MonoAction> {
        let air = self.timing.airtime;
        match (self.phase, event) {
            (Phase::Idle, MonoEvent::Start { reading }) => {
                self.reading = reading;
                self.repeated = false;
                self.outcome = MonoOutcome { requested: true, ..Default::default() };
                self.send_wakeup()
            }
            (Phase::AwaitWakeupReply, MonoEvent::Received(Some(d))) if d.kind == PacketKind::WakeupReply => {
                self.phase = Phase::WaitPoll;
                self.outcome.waves += 1;
                vec![MonoAction::Timer { delay: self.timing.request_delay() }]
            }
            (Phase::AwaitWakeupReply, MonoEvent::Received(_)) => self.finish(),
            (Phase::WaitPoll, MonoEvent::Timer) => {
                self.phase = Phase::AwaitBeaconReply;
                vec![
                    MonoAction::Send { delay: 0.0, packet: Packet::beacon_request(self.id, self.repeated) },
                    MonoAction::Listen { delay: air, duration: air + self.timing.guard },
                ]
            }
            (Phase::AwaitBeaconReply, MonoEvent::Received(d)) => {
                let (decoded, selected) = match d {
                    Some(d) if d.kind == PacketKind::BeaconReply => self.decoder.decode(&d.payload, &self.anchor_ids),
                    _ => (BTreeSet::new(), None),
                };
                self.outcome.decoded = decoded;
                self.outcome.selected = selected;
                let repeat = !self.repeated
                    && match self.mode {
                        Mode::WakeAll => false,
                        Mode::RangeEstimation => selected.is_none(),
                        Mode::TwoWave { border } => selected == Some(border),
                    };
                if repeat {
                    self.repeated = true;
                    self.phase = Phase::WaitRepeat;
                    // Measured from the wakeup reply of this wave.
                    let elapsed = self.timing.request_delay() + 2.0 * air + self.timing.guard;
                    vec![MonoAction::Timer { delay: (self.timing.repeat_delay() - elapsed).max(0.0) }]
                } else {
                    self.finish()
                }
            }
            (Phase::WaitRepeat, MonoEvent::Timer) => self.send_wakeup(),
            _ => Vec::new(),
        }
    }
}

/// Poll period minimizing the expected per-period power, continuous
/// relaxation of the poll count.
pub fn optimal_tc(t_m: f64, t_d: f64, p_d: f64, p_rx: f64) -> Result<f64, ProtocolError> {
    if [t_m, t_d, p_d, p_rx].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(ProtocolError::Parameter("optimal_tc inputs must be positive".into()));
    }
    Ok((2.0 * t_m * t_d * p_d / p_rx).sqrt())
}

/// Average power over one beacon period of length `t_m` when the anchor
/// polls every `t_c`: half a poll period of expected listening, one reply,
/// `floor(t_m / t_c)` samples, sleep for the rest.
pub fn expected_power(t_c: f64, t_m: f64, profile: &PowerProfile, t_d: f64, t_tx: f64) -> Result<f64, ProtocolError> {
    if !(t_c > 0.0 && t_c < t_m) {
        return Err(ProtocolError::Parameter(format!("need 0 < t_c < t_m, got t_c={t_c} t_m={t_m}")));
    }
    let k_d = (t_m / t_c).floor();
    let t_rx = t_c / 2.0;
    let t_s = t_m - (k_d * t_d + t_rx + t_tx);
    Ok((profile.p_rx * t_rx + profile.p_tx * t_tx + k_d * profile.p_adc * t_d + profile.p_sleep * t_s) / t_m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(mus: &[f64]) -> Vec<EhaEntry> {
        mus.iter()
            .enumerate()
            .map(|(i, &mu)| EhaEntry { id: i as u16 + 1, position: [i as f64 + 0.5, 0.0], mu })
            .collect()
    }

    fn timing() -> Timing {
        Timing { airtime: 0.8e-3, t_c: 10e-3, t_off: 50e-3, guard: 0.1e-3 }
    }

    #[test]
    fn frame_layout() {
        let p = Packet::beacon_request(0x1234, true);
        let b = p.to_bytes();
        assert_eq!(b.len(), 35);
        assert_eq!(&b[..5], &[0xAA, 3, 1, 0x12, 0x34]);
        assert_eq!(u16::from_be_bytes([b[33], b[34]]), crc16(&b[..33]));
        assert_eq!(Packet::from_bytes(&b).unwrap(), p);
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc16(b"123456789"), 0x29B1);
    }

    #[test]
    fn frame_errors() {
        let mut b = Packet::wakeup_reply(9).to_bytes();
        assert_eq!(Packet::from_bytes(&b[..34]), Err(ProtocolError::FrameLength(34)));
        b[10] ^= 1;
        assert!(matches!(Packet::from_bytes(&b), Err(ProtocolError::Crc { .. })));
        b[10] ^= 1;
        b[0] = 0;
        assert_eq!(Packet::from_bytes(&b), Err(ProtocolError::Preamble(0)));
    }

    #[test]
    fn sleep_and_request_payloads() {
        let s = Packet::sleep(&[3, 4, 500]).unwrap();
        assert_eq!(s.sleep_ids(), vec![3, 4, 500]);
        assert!(Packet::sleep(&[0; 15]).is_err());
        let w = Packet::wakeup_request(7, Some(2.5e-3), false);
        assert_eq!(w.source_id(), 7);
        assert_eq!(w.reading(), Some(2.5e-3));
        assert_eq!(Packet::wakeup_request(7, None, false).reading(), None);
    }

    #[test]
    fn plain_payload_checks_crc() {
        let p = plain_reply_payload(42);
        assert_eq!(parse_plain_reply(&p), Some(42));
        let mut bad = p;
        bad.flip_bit(3);
        assert_eq!(parse_plain_reply(&bad), None);
    }

    #[test]
    fn range_partition() {
        let t = table(&[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(categorize_ranges(&t, 3.0).unwrap(), (vec![1, 2], vec![3, 4]));
        let flat = table(&[2.0, 2.0, 2.0]);
        assert_eq!(categorize_ranges(&flat, 2.0).unwrap(), (vec![1, 2, 3], vec![]));
        assert_eq!(categorize_ranges(&[], 1.0), Err(ProtocolError::EmptyTable));
        // 3.7 dBm expressed in watts.
        let rho = 10f64.powf(0.37) * 1e-3;
        let (near, far) = categorize_ranges(&table(&[3e-3, 2e-3]), rho).unwrap();
        assert_eq!((near, far), (vec![1], vec![2]));
        assert_eq!(default_rho(&t).unwrap(), 3.0);
    }

    #[test]
    fn wave_partition() {
        let t = table(&[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(categorize_waves(&t, 2).unwrap(), (vec![1, 2], vec![2, 3, 4]));
        assert_eq!(categorize_waves(&t, 4).unwrap().0, vec![1, 2, 3, 4]);
        assert_eq!(categorize_waves(&t, 1).unwrap().1, vec![1, 2, 3, 4]);
        assert_eq!(categorize_waves(&t, 9), Err(ProtocolError::UnknownBorder(9)));
    }

    fn sleep_list(actions: &[EsaAction]) -> Vec<u16> {
        actions
            .iter()
            .filter_map(|a| match a {
                EsaAction::Send { packet, .. } if packet.kind == PacketKind::Sleep => Some(packet.sleep_ids()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    #[test]
    fn esa_range_mode_flips_on_retry() {
        let t = table(&[4.0, 3.0, 2.0, 1.0]);
        let mut esa = EsaState::new(100, Mode::RangeEstimation, t, 3.0, timing()).unwrap();
        // Far mobile node: near group sleeps.
        let acts = esa.handle(EsaEvent::Received(Packet::wakeup_request(1, Some(2.0), false)));
        assert_eq!(sleep_list(&acts), vec![1, 2]);
        assert_eq!(esa.awakened(), &[3, 4]);
        let acts = esa.handle(EsaEvent::Received(Packet::wakeup_request(1, Some(2.0), true)));
        assert_eq!(sleep_list(&acts), vec![3, 4]);
        assert_eq!(esa.awakened(), &[1, 2]);
        let acts = esa.handle(EsaEvent::Received(Packet::wakeup_request(1, Some(3.5), false)));
        assert_eq!(sleep_list(&acts), vec![3, 4]);
    }

    #[test]
    fn esa_toggles_transmitter_and_replies() {
        let tm = timing();
        let mut esa = EsaState::new(100, Mode::WakeAll, table(&[2.0, 1.0]), 0.0, tm).unwrap();
        let acts = esa.handle(EsaEvent::Received(Packet::wakeup_request(1, None, false)));
        assert_eq!(acts[0], EsaAction::Send { delay: 0.0, packet: Packet::wakeup_reply(100) });
        assert_eq!(acts[1], EsaAction::Transmitter { delay: tm.airtime, on: false });
        assert_eq!(acts[2], EsaAction::Transmitter { delay: tm.airtime + tm.t_off, on: true });
        assert!(sleep_list(&acts).is_empty());
        assert!(esa.handle(EsaEvent::Received(Packet::beacon_request(1, false))).is_empty());
    }

    #[test]
    fn esa_two_wave_lists() {
        let t = table(&[4.0, 3.0, 2.0, 1.0]);
        let mut esa = EsaState::new(100, Mode::TwoWave { border: 2 }, t, 0.0, timing()).unwrap();
        let acts = esa.handle(EsaEvent::Received(Packet::wakeup_request(1, None, false)));
        assert_eq!(sleep_list(&acts), vec![3, 4]);
        let acts = esa.handle(EsaEvent::Received(Packet::wakeup_request(1, None, true)));
        assert_eq!(sleep_list(&acts), vec![1]);
        assert!(EsaState::new(1, Mode::TwoWave { border: 7 }, table(&[1.0]), 0.0, timing()).is_err());
    }

    #[test]
    fn eha_main_path_and_timeout() {
        let tm = timing();
        let mut eha = EhaState::new(3, EncodedPayload::zeroed(), &tm, false);
        for _ in 0..8 {
            assert!(eha.handle(EhaEvent::AdcReading(2e-3)).is_empty());
        }
        let acts = eha.handle(EhaEvent::AdcReading(0.0));
        assert_eq!(acts, vec![EhaAction::StartListening { timeout: tm.listen_window() }]);
        let acts = eha.handle(EhaEvent::Received(Packet::beacon_request(1, false)));
        assert!(matches!(acts[0], EhaAction::Send(p) if p.kind == PacketKind::BeaconReply));
        eha.handle(EhaEvent::TransmitDone);
        assert_eq!(eha.mode, EhaMode::Sleep);

        // Re-arm, detect, then time out silently.
        eha.handle(EhaEvent::AdcReading(2e-3));
        eha.handle(EhaEvent::AdcReading(0.0));
        assert_eq!(eha.mode, EhaMode::Listening);
        assert_eq!(eha.handle(EhaEvent::ListenTimeout), vec![EhaAction::StopListening]);
        assert_eq!(eha.mode, EhaMode::Sleep);
    }

    #[test]
    fn eha_obeys_sleep_list() {
        let tm = timing();
        let mut eha = EhaState::new(3, EncodedPayload::zeroed(), &tm, false);
        eha.handle(EhaEvent::AdcReading(1.0));
        eha.handle(EhaEvent::AdcReading(0.0));
        eha.handle(EhaEvent::Received(Packet::sleep(&[2]).unwrap()));
        assert_eq!(eha.mode, EhaMode::Listening);
        assert_eq!(eha.handle(EhaEvent::Received(Packet::sleep(&[3]).unwrap())), vec![EhaAction::StopListening]);
        assert!(eha.handle(EhaEvent::Received(Packet::beacon_request(1, false))).is_empty());
    }

    #[test]
    fn detector_is_edge_triggered() {
        let mut d = DropDetector::new(8, 0.5);
        assert!(!d.observe(1.0));
        assert!(d.observe(0.1));
        assert!(!d.observe(0.1));
        assert!(!d.observe(1.0));
        assert!(d.armed());
        assert!(d.observe(0.0));
    }

    fn mono(mode: Mode) -> MonoState {
        let cb = Codebooks::for_ids(4).unwrap();
        MonoState::new(1, mode, timing(), ReplyDecoder::Spread(cb), vec![1, 2, 3, 4])
    }

    fn reply_of(idx: u16) -> Option<Delivery> {
        let cb = Codebooks::for_ids(4).unwrap();
        Some(Delivery { kind: PacketKind::BeaconReply, payload: cb.encode(idx).unwrap() })
    }

    fn wakeup_reply() -> Option<Delivery> {
        Some(Delivery { kind: PacketKind::WakeupReply, payload: Packet::wakeup_reply(100).payload })
    }

    #[test]
    fn mono_single_wave() {
        let mut m = mono(Mode::WakeAll);
        let acts = m.handle(MonoEvent::Start { reading: 1e-3 });
        assert!(matches!(acts[0], MonoAction::Send { packet, .. } if packet.kind == PacketKind::WakeupRequest));
        m.handle(MonoEvent::Received(wakeup_reply()));
        let acts = m.handle(MonoEvent::Timer);
        assert!(matches!(acts[0], MonoAction::Send { packet, .. } if packet.kind == PacketKind::BeaconRequest));
        let acts = m.handle(MonoEvent::Received(reply_of(2)));
        let MonoAction::Finish(out) = &acts[0] else { panic!("{acts:?}") };
        assert_eq!(out.selected, Some(3));
        assert_eq!(out.waves, 1);
        assert!(!m.busy());
    }

    #[test]
    fn mono_no_wakeup_reply_fails() {
        let mut m = mono(Mode::WakeAll);
        m.handle(MonoEvent::Start { reading: 0.0 });
        let acts = m.handle(MonoEvent::Received(None));
        let MonoAction::Finish(out) = &acts[0] else { panic!() };
        assert!(out.requested && out.selected.is_none() && out.waves == 0);
    }

    #[test]
    fn mono_two_wave_on_border() {
        let mut m = mono(Mode::TwoWave { border: 2 });
        m.handle(MonoEvent::Start { reading: 0.0 });
        m.handle(MonoEvent::Received(wakeup_reply()));
        m.handle(MonoEvent::Timer);
        let acts = m.handle(MonoEvent::Received(reply_of(1)));
        assert!(matches!(acts[0], MonoAction::Timer { .. }));
        let acts = m.handle(MonoEvent::Timer);
        assert!(matches!(acts[0], MonoAction::Send { packet, .. } if packet.request_again));
        m.handle(MonoEvent::Received(wakeup_reply()));
        m.handle(MonoEvent::Timer);
        let acts = m.handle(MonoEvent::Received(reply_of(1)));
        let MonoAction::Finish(out) = &acts[0] else { panic!() };
        assert_eq!(out.waves, 2);
        assert_eq!(out.selected, Some(2));
    }

    #[test]
    fn mono_range_retries_once() {
        let mut m = mono(Mode::RangeEstimation);
        m.handle(MonoEvent::Start { reading: 1.0 });
        m.handle(MonoEvent::Received(wakeup_reply()));
        m.handle(MonoEvent::Timer);
        assert!(matches!(m.handle(MonoEvent::Received(None))[0], MonoAction::Timer { .. }));
        m.handle(MonoEvent::Timer);
        m.handle(MonoEvent::Received(wakeup_reply()));
        m.handle(MonoEvent::Timer);
        let acts = m.handle(MonoEvent::Received(None));
        let MonoAction::Finish(out) = &acts[0] else { panic!() };
        assert_eq!((out.waves, out.selected), (2, None));
    }

    #[test]
    fn optimal_tc_profilealues() {
        let tc = optimal_tc(1.0, 0.65e-3, 1.69e-3, 20.17e-3).unwrap();
        assert!((tc - 0.010437).abs() < 1e-5, "{tc}");
        let tc4 = optimal_tc(4.0, 0.65e-3, 1.69e-3, 20.17e-3).unwrap();
        assert!((tc4 / tc - 2.0).abs() < 1e-12);
        assert!(optimal_tc(0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn expected_power_properties() {
        let flat = PowerProfile { p_tx: 1e-3, p_rx: 1e-3, p_adc: 1e-3, p_sleep: 1e-3, ..Default::default() };
        for tc in [0.001, 0.01, 0.3] {
            let p = expected_power(tc, 1.0, &flat, 0.65e-3, 0.8e-3).unwrap();
            assert!((p - 1e-3).abs() < 1e-15);
        }
        let prof = PowerProfile::default();
        let base = expected_power(0.01, 1.0, &prof, prof.t_adc, prof.t_tx).unwrap();
        let doubled = PowerProfile { p_adc: 2.0 * prof.p_adc, ..prof };
        assert!(expected_power(0.01, 1.0, &doubled, prof.t_adc, prof.t_tx).unwrap() > base);
        assert!(expected_power(1.0, 1.0, &prof, prof.t_adc, prof.t_tx).is_err());
        // Interior minimum near the optimum.
        let tc = optimal_tc(1.0, prof.t_adc, prof.p_adc, prof.p_rx).unwrap();
        let at = |t: f64| expected_power(t, 1.0, &prof, prof.t_adc, prof.t_tx).unwrap();
        assert!(at(tc) < at(tc / 4.0) && at(tc) < at(tc * 4.0));
    }
}
