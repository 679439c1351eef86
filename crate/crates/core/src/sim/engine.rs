//! Discrete-event engine driving the protocol state machines over the
//! shared radio medium and per-node energy storage.
//!
//! Anchor ADC polls are not simulated one by one. Between field changes the
//! readings are constant, so polls are replayed in bulk when the field
//! changes and only the first poll after each change is a real event. Their
//! energy is booked as the average ADC draw while an anchor sleeps.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::config::{ConfigError, PathConfig, PowerSource, ScenarioConfig};
use super::metrics::{compute_metrics, Metrics, MetricsError, NodeReport, Role, RoundRecord};
use super::trace::TraceWriter;
use crate::codec::{build_fec_codebook, build_spreading_codebook_with, CodecError, Codebooks};
use crate::energy::{EnergyError, EnergyState, HarvestModel, OpClass, PowerProfile};
use crate::protocol::{
    default_rho, plain_reply_payload, Delivery, EhaAction, EhaEntry, EhaEvent, EhaMode, EhaState, EsaAction, EsaEvent,
    EsaState, MonoAction, MonoEvent, MonoOutcome, MonoState, Packet, PacketKind, ProtocolError, ReplyDecoder, Timing,
};
use crate::radio::{dbm_to_mw, resolve_reception, sample_rss, RadioParams, ReceptionKind, Transmission};

const EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("codebook: {0}")]
    Codec(#[from] CodecError),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("energy: {0}")]
    Energy(#[from] EnergyError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rounds: Vec<RoundRecord>,
    pub metrics: Metrics,
    pub nodes: Vec<NodeReport>,
    pub trace: Option<String>,
    pub t_c: f64,
    /// Range threshold in watts, range-estimation mode only.
    pub rho: Option<f64>,
    pub end_time: f64,
}

impl RunOutput {
    /// Largest relative energy-ledger residual over all nodes.
    pub fn energy_residual(&self) -> f64 {
        self.nodes.iter().map(NodeReport::relative_residual).fold(0.0, f64::max)
    }
}

/// Codebooks for the scenario's anchor count and optional dimensioning.
pub fn codebooks_for(cfg: &ScenarioConfig) -> Result<Codebooks, CodecError> {
    let n = cfg.eha.len();
    match (cfg.protocol.fec_length, cfg.protocol.chip_length) {
        (Some(f), Some(c)) => Codebooks::new(build_fec_codebook(n, f)?, build_spreading_codebook_with(n, c, n == c)?),
        _ => Codebooks::for_ids(n),
    }
}

/// Independent random stream per purpose and node pair.
pub fn stream(seed: u64, purpose: u64, a: u16, b: u16) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((purpose << 32) | (u64::from(a) << 16) | u64::from(b));
    r
}

const SHADOWING: u64 = 1;
const COLLISION: u64 = 2;
const SENSOR: u64 = 3;
const PHASE: u64 = 4;
const MOBILITY: u64 = 5;
const REPORT: u64 = 6;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Harvest lookup: clamped below the model range, extrapolated above it.
pub fn field_power(model: &HarvestModel, distance: f64) -> f64 {
    if distance < model.domain().0 {
        model.power_clamped(distance)
    } else {
        model.power_extrapolated(distance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum NodeRef {
    Esa(usize),
    Eha(usize),
    Mono,
}

#[derive(Debug)]
enum Ev {
    RoundStart(usize),
    MonoTimer(u64),
    MonoListenStart(u64, f64),
    MonoListenEnd(u64),
    MonoSend(u64, Packet),
    EsaSend(usize, Packet),
    Field(usize, bool),
    TxEnd(usize),
    Poll(usize),
    ListenTimeout(usize, u64),
}

struct Scheduled {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Min-heap on (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

struct Power {
    state: EnergyState,
    wired: bool,
    stored_start: f64,
    last: f64,
    p_in: f64,
    loads: Vec<(OpClass, f64)>,
}

impl Power {
    /// Returns the brown-out time if the output switched off.
    fn advance(&mut self, now: f64) -> Option<f64> {
        let dt = now - self.last;
        if dt <= 0.0 {
            return None;
        }
        self.last = now;
        if self.wired {
            self.state.supply(&self.loads, dt);
            None
        } else {
            self.state.advance(self.p_in, &self.loads, dt).map(|off| now - dt + off)
        }
    }

    fn enabled(&self) -> bool {
        self.wired || self.state.enabled()
    }

    fn report(&self, id: u16, role: Role) -> NodeReport {
        NodeReport {
            id,
            role,
            wired: self.wired,
            ledger: *self.state.ledger(),
            stored_start: self.stored_start,
            stored_end: self.state.stored(),
        }
    }
}

struct Esa {
    id: u16,
    pos: [f64; 2],
    tx_power: f64,
    sm: EsaState,
}

struct Eha {
    id: u16,
    pos: [f64; 2],
    tx_power: f64,
    sm: EhaState,
    power: Power,
    phase: f64,
    polled_until: f64,
    poll_at: Option<f64>,
    listen_since: Option<f64>,
    listen_gen: u64,
    nominal: f64,
    sensor: ChaCha8Rng,
    mark: f64,
    heard_request: bool,
}

struct Mono {
    id: u16,
    pos: [f64; 2],
    tx_power: f64,
    sm: MonoState,
    power: Power,
    listen: Option<(f64, f64)>,
    inbox: Option<Packet>,
    tx_until: f64,
    gen: u64,
    sensor: ChaCha8Rng,
    mobility: ChaCha8Rng,
}

struct ActiveTx {
    sender: NodeRef,
    packet: Packet,
    start: f64,
    end: f64,
    resolved: bool,
    dropped: bool,
}

struct RoundCtx {
    index: usize,
    start: f64,
    position_index: Option<usize>,
    position: [f64; 2],
    true_cell: usize,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    radio: RadioParams,
    harvest: HarvestModel,
    profile: PowerProfile,
    t_c: f64,
    now: f64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    esas: Vec<Esa>,
    ehas: Vec<Eha>,
    mono: Mono,
    txs: Vec<ActiveTx>,
    open: Vec<usize>,
    links: BTreeMap<(u16, u16), ChaCha8Rng>,
    collision: BTreeMap<u16, ChaCha8Rng>,
    trace: Option<TraceWriter>,
    rounds: Vec<RoundRecord>,
    round: Option<RoundCtx>,
}

/// Runs a validated scenario to completion.
pub fn run_scenario(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg, opts)?;
    let rho = sim.esas.first().map(|e| e.sm.rho).filter(|_| cfg.mode() == crate::protocol::Mode::RangeEstimation);
    let end = sim.run();
    let nodes = sim.reports();
    let metrics = compute_metrics(&sim.rounds)?;
    Ok(RunOutput {
        rounds: std::mem::take(&mut sim.rounds),
        metrics,
        nodes,
        trace: sim.trace.take().map(TraceWriter::finish),
        t_c: sim.t_c,
        rho,
        end_time: end,
    })
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig, opts: RunOptions) -> Result<Self, SimError> {
        let harvest = cfg.harvest_model().map_err(|e| ConfigError::Invalid(vec![e]))?;
        let profile = cfg.profile;
        let t_c = cfg.t_c();
        let timing = Timing { airtime: profile.t_tx, t_c, t_off: cfg.t_off, guard: cfg.guard };
        let seed = cfg.seed;
        let esa_pos: Vec<[f64; 2]> = cfg.esa.iter().map(|e| e.position.xy()).collect();
        let nominal = |p: [f64; 2]| esa_pos.iter().map(|&e| field_power(&harvest, dist(p, e))).sum::<f64>();
        let noise = |rng: &mut ChaCha8Rng| {
            if cfg.sensor_noise > 0.0 {
                Normal::new(0.0, cfg.sensor_noise).expect("validated").sample(rng)
            } else {
                0.0
            }
        };

        let table: Vec<EhaEntry> = cfg
            .eha
            .iter()
            .map(|e| {
                let pos = e.position.xy();
                let mut rng = stream(seed, REPORT, e.id, 0);
                EhaEntry { id: e.id, position: pos, mu: nominal(pos) + noise(&mut rng) }
            })
            .collect();
        let rho = match cfg.protocol.rho_dbm {
            Some(dbm) => dbm_to_mw(dbm) * 1e-3,
            None => default_rho(&table)?,
        };
        let mode = cfg.mode();
        let codebooks = if cfg.protocol.spreading { Some(codebooks_for(cfg)?) } else { None };
        let anchor_ids: Vec<u16> = cfg.eha.iter().map(|e| e.id).collect();

        let esas = cfg
            .esa
            .iter()
            .map(|e| {
                Ok(Esa {
                    id: e.id,
                    pos: e.position.xy(),
                    tx_power: e.tx_power_dbm,
                    sm: EsaState::new(e.id, mode, table.clone(), rho, timing)?,
                })
            })
            .collect::<Result<Vec<_>, ProtocolError>>()?;

        let make_power = |source: PowerSource, p_in: f64, loads: Vec<(OpClass, f64)>| -> Result<Power, EnergyError> {
            let wired = source == PowerSource::Wired;
            let state = EnergyState::new(cfg.storage)?;
            Ok(Power { stored_start: state.stored(), state, wired, last: 0.0, p_in: if wired { 0.0 } else { p_in }, loads })
        };

        let mut ehas = Vec::new();
        for (i, e) in cfg.eha.iter().enumerate() {
            let pos = e.position.xy();
            let payload = match &codebooks {
                Some(cb) => cb.encode(i as u16)?,
                None => plain_reply_payload(e.id),
            };
            let sm = EhaState::new(e.id, payload, &timing, e.always_listening);
            let mut phase_rng = stream(seed, PHASE, e.id, 0);
            let phase = phase_rng.random::<f64>() * t_c;
            let nominal = nominal(pos);
            let mut eha = Eha {
                id: e.id,
                pos,
                tx_power: e.tx_power_dbm,
                power: make_power(e.power, nominal, Vec::new())?,
                sm,
                phase,
                polled_until: 0.0,
                poll_at: None,
                listen_since: e.always_listening.then_some(0.0),
                listen_gen: 0,
                nominal,
                sensor: stream(seed, SENSOR, e.id, 0),
                mark: 0.0,
                heard_request: false,
            };
            eha.power.loads = eha_loads(&profile, t_c, eha.sm.mode);
            ehas.push(eha);
        }

        let m = &cfg.mono;
        let decoder = match codebooks {
            Some(cb) => ReplyDecoder::Spread(cb),
            None => ReplyDecoder::Plain,
        };
        let mono = Mono {
            id: m.id,
            pos: [0.0, 0.0],
            tx_power: m.tx_power_dbm,
            sm: MonoState::new(m.id, mode, timing, decoder, anchor_ids),
            power: make_power(m.power, 0.0, vec![(OpClass::Sleep, profile.p_sleep)])?,
            listen: None,
            inbox: None,
            tx_until: 0.0,
            gen: 0,
            sensor: stream(seed, SENSOR, m.id, 0),
            mobility: stream(seed, MOBILITY, m.id, 0),
        };

        let mut sim = Sim {
            cfg,
            radio: cfg.radio,
            harvest,
            profile,
            t_c,
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            esas,
            ehas,
            mono,
            txs: Vec::new(),
            open: Vec::new(),
            links: BTreeMap::new(),
            collision: BTreeMap::new(),
            trace: opts.trace.then(TraceWriter::new),
            rounds: Vec::new(),
            round: None,
        };
        sim.mono.pos = sim.path_position(0).1;
        sim.refresh_fields();
        for k in 0..cfg.rounds {
            sim.schedule(sim.round_time(k), Ev::RoundStart(k));
        }
        Ok(sim)
    }

    fn round_time(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.cfg.t_m
    }

    fn schedule(&mut self, time: f64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Scheduled { time, seq: self.seq, ev });
    }

    fn run(&mut self) -> f64 {
        let end = self.round_time(self.cfg.rounds);
        while let Some(s) = self.queue.pop() {
            if s.time > end {
                break;
            }
            self.now = s.time;
            self.dispatch(s.ev);
        }
        self.now = end;
        self.advance_all();
        if let Some(tr) = self.trace.as_mut() {
            let nodes = self.ehas.iter().map(|e| e.power.report(e.id, Role::Eha)).chain([self.mono.power.report(self.mono.id, Role::Mono)]);
            for n in nodes {
                let l = &n.ledger;
                tr.row(
                    end,
                    "energy",
                    None,
                    n.id,
                    &[
                        ("harvested", l.harvested.to_string()),
                        ("supplied", l.supplied.to_string()),
                        ("tx", l.tx.to_string()),
                        ("rx", l.rx.to_string()),
                        ("adc", l.adc.to_string()),
                        ("sleep", l.sleep.to_string()),
                        ("clamp", l.clamp_loss.to_string()),
                        ("stored_start", n.stored_start.to_string()),
                        ("stored_end", n.stored_end.to_string()),
                    ],
                );
            }
        }
        end
    }

    fn reports(&self) -> Vec<NodeReport> {
        self.ehas
            .iter()
            .map(|e| e.power.report(e.id, Role::Eha))
            .chain([self.mono.power.report(self.mono.id, Role::Mono)])
            .collect()
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::RoundStart(k) => self.round_start(k),
            Ev::MonoTimer(g) if g == self.mono.gen => {
                if self.advance_mono() {
                    let a = self.mono.sm.handle(MonoEvent::Timer);
                    self.apply_mono(a);
                }
            }
            Ev::MonoListenStart(g, dur) if g == self.mono.gen => {
                if self.advance_mono() {
                    self.mono.listen = Some((self.now, self.now + dur));
                    self.mono.inbox = None;
                    self.refresh_mono_loads();
                }
            }
            Ev::MonoListenEnd(g) if g == self.mono.gen => {
                if self.advance_mono() {
                    self.mono.listen = None;
                    self.refresh_mono_loads();
                    let d = self.mono.inbox.take().map(|p| Delivery { kind: p.kind, payload: p.payload });
                    let a = self.mono.sm.handle(MonoEvent::Received(d));
                    self.apply_mono(a);
                }
            }
            Ev::MonoSend(g, p) if g == self.mono.gen => {
                if self.advance_mono() {
                    self.start_tx(NodeRef::Mono, p);
                }
            }
            Ev::EsaSend(i, p) => self.start_tx(NodeRef::Esa(i), p),
            Ev::Field(i, on) => self.field_change(i, on),
            Ev::TxEnd(k) => self.tx_end(k),
            Ev::Poll(e) => self.poll(e),
            Ev::ListenTimeout(e, g) => {
                self.advance_eha(e);
                if self.ehas[e].listen_gen == g && self.ehas[e].sm.mode == EhaMode::Listening {
                    let a = self.ehas[e].sm.handle(EhaEvent::ListenTimeout);
                    self.apply_eha(e, a);
                }
            }
            _ => {}
        }
    }

    fn field_at(&self, p: [f64; 2]) -> f64 {
        self.esas
            .iter()
            .filter(|e| e.sm.transmitter_on)
            .map(|e| field_power(&self.harvest, dist(p, e.pos)))
            .sum()
    }

    fn refresh_fields(&mut self) {
        for i in 0..self.ehas.len() {
            let p = self.field_at(self.ehas[i].pos);
            if !self.ehas[i].power.wired {
                self.ehas[i].power.p_in = p;
            }
        }
        if !self.mono.power.wired {
            self.mono.power.p_in = self.field_at(self.mono.pos);
        }
    }

    fn advance_all(&mut self) {
        for e in 0..self.ehas.len() {
            self.advance_eha(e);
        }
        self.advance_mono();
    }

    fn sensor_noise(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.cfg.sensor_noise > 0.0 {
            Normal::new(0.0, self.cfg.sensor_noise).expect("validated").sample(rng)
        } else {
            0.0
        }
    }

    // ---- anchors ----

    fn advance_eha(&mut self, e: usize) {
        let now = self.now;
        let Some(off) = self.ehas[e].power.advance(now) else { return };
        let eha = &mut self.ehas[e];
        if let Some(tr) = self.trace.as_mut() {
            tr.row(now, "brownout", self.round.as_ref().map(|r| r.index), eha.id, &[("at", off.to_string())]);
        }
        eha.sm.handle(EhaEvent::BrownOut);
        eha.listen_since = eha.sm.always_listening.then_some(now);
        eha.listen_gen += 1;
        eha.polled_until = now;
        eha.power.loads = eha_loads(&self.profile, self.t_c, eha.sm.mode);
    }

    fn polls_between(&self, e: usize, a: f64, b: f64) -> u64 {
        let (phi, t_c) = (self.ehas[e].phase, self.t_c);
        let k = |t: f64| ((t - phi) / t_c).floor();
        (k(b) - k(a)).max(0.0) as u64
    }

    fn next_poll(&self, e: usize, after: f64) -> f64 {
        let (phi, t_c) = (self.ehas[e].phase, self.t_c);
        let mut t = phi + (((after - phi) / t_c).floor() + 1.0) * t_c;
        if t <= after {
            t += t_c;
        }
        t
    }

    /// Replays the polls in `(polled_until, until]` at a constant reading.
    fn catch_up(&mut self, e: usize, until: f64, reading: f64) {
        let n = self.polls_between(e, self.ehas[e].polled_until, until);
        self.ehas[e].sm.detector.observe_repeated(reading, n);
        self.ehas[e].polled_until = until;
    }

    fn poll(&mut self, e: usize) {
        if self.ehas[e].poll_at != Some(self.now) {
            return;
        }
        self.ehas[e].poll_at = None;
        self.advance_eha(e);
        let eha = &self.ehas[e];
        if eha.sm.mode != EhaMode::Sleep || !eha.power.enabled() {
            return;
        }
        let clean = self.field_at(eha.pos);
        let before = self.now - self.t_c * 0.5;
        if before > self.ehas[e].polled_until {
            self.catch_up(e, before, clean);
        }
        let mut rng = std::mem::replace(&mut self.ehas[e].sensor, ChaCha8Rng::seed_from_u64(0));
        let reading = clean + self.sensor_noise(&mut rng);
        self.ehas[e].sensor = rng;
        self.ehas[e].polled_until = self.now;
        let a = self.ehas[e].sm.handle(EhaEvent::AdcReading(reading));
        self.apply_eha(e, a);
    }

    fn apply_eha(&mut self, e: usize, actions: Vec<EhaAction>) {
        let round = self.round.as_ref().map(|r| r.index);
        for a in actions {
            match a {
                EhaAction::StartListening { timeout } => {
                    let eha = &mut self.ehas[e];
                    eha.listen_since = Some(self.now);
                    eha.listen_gen += 1;
                    let g = eha.listen_gen;
                    if let Some(tr) = self.trace.as_mut() {
                        tr.row(self.now, "listen", round, eha.id, &[("state", "start".into())]);
                    }
                    self.schedule(self.now + timeout, Ev::ListenTimeout(e, g));
                }
                EhaAction::StopListening => {
                    let eha = &mut self.ehas[e];
                    eha.listen_since = None;
                    eha.polled_until = self.now;
                    if let Some(tr) = self.trace.as_mut() {
                        tr.row(self.now, "listen", round, eha.id, &[("state", "stop".into())]);
                    }
                }
                EhaAction::Send(p) => self.start_tx(NodeRef::Eha(e), p),
            }
        }
        let eha = &mut self.ehas[e];
        if eha.sm.mode == EhaMode::Sleep {
            eha.listen_since = None;
        }
        eha.power.loads = eha_loads(&self.profile, self.t_c, eha.sm.mode);
    }

    fn field_change(&mut self, i: usize, on: bool) {
        for e in 0..self.ehas.len() {
            self.advance_eha(e);
            if self.ehas[e].sm.mode == EhaMode::Sleep && self.ehas[e].power.enabled() {
                let old = self.field_at(self.ehas[e].pos);
                self.catch_up(e, self.now, old);
            }
        }
        self.advance_mono();
        self.esas[i].sm.set_transmitter(on);
        self.refresh_fields();
        for e in 0..self.ehas.len() {
            if self.ehas[e].sm.always_listening {
                continue;
            }
            let t = self.next_poll(e, self.now);
            if self.ehas[e].poll_at.is_none_or(|p| p > t || p <= self.now) {
                self.ehas[e].poll_at = Some(t);
                self.schedule(t, Ev::Poll(e));
            }
        }
        if let Some(tr) = self.trace.as_mut() {
            let round = self.round.as_ref().map(|r| r.index);
            tr.row(self.now, "field", round, self.esas[i].id, &[("on", on.to_string())]);
        }
    }

    // ---- mobile node ----

    fn path_position(&mut self, k: usize) -> (Option<usize>, [f64; 2]) {
        match &self.cfg.mono.path {
            PathConfig::Fixed { positions, rounds_per_position } => {
                let i = (k / rounds_per_position) % positions.len();
                (Some(i), positions[i].xy())
            }
            PathConfig::Uniform { from, to } => {
                let (a, b) = (from.xy(), to.xy());
                let u: f64 = self.mono.mobility.random();
                (None, [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])])
            }
        }
    }

    /// Advances the mobile node's storage; on brown-out the running round
    /// ends. Returns whether the node is still powered.
    fn advance_mono(&mut self) -> bool {
        if let Some(off) = self.mono.power.advance(self.now) {
            if let Some(tr) = self.trace.as_mut() {
                tr.row(self.now, "brownout", self.round.as_ref().map(|r| r.index), self.mono.id, &[("at", off.to_string())]);
            }
            self.mono.listen = None;
            self.mono.inbox = None;
            if self.mono.sm.busy() {
                let o = self.mono.sm.abort();
                self.finish_round(o);
            }
            self.refresh_mono_loads();
        }
        self.mono.power.enabled()
    }

    fn refresh_mono_loads(&mut self) {
        let m = &mut self.mono;
        let (op, p) = if m.tx_until > self.now {
            (OpClass::Tx, self.profile.p_tx)
        } else if m.listen.is_some() {
            (OpClass::Rx, self.profile.p_rx)
        } else {
            (OpClass::Sleep, self.profile.p_sleep)
        };
        m.power.loads = vec![(op, p)];
    }

    fn round_start(&mut self, k: usize) {
        self.advance_all();
        if self.mono.sm.busy() {
            let o = self.mono.sm.abort();
            self.finish_round(o);
        }
        let (position_index, position) = self.path_position(k);
        self.mono.pos = position;
        self.refresh_fields();
        for e in &mut self.ehas {
            let l = e.power.state.ledger();
            e.mark = l.rx + l.tx;
            e.heard_request = false;
        }
        let true_cell = (0..self.ehas.len())
            .min_by(|&a, &b| dist(self.ehas[a].pos, position).total_cmp(&dist(self.ehas[b].pos, position)))
            .expect("anchors present");
        self.round = Some(RoundCtx { index: k, start: self.now, position_index, position, true_cell });
        let mut rng = std::mem::replace(&mut self.mono.sensor, ChaCha8Rng::seed_from_u64(0));
        let reading = self.field_at(position) + self.sensor_noise(&mut rng);
        self.mono.sensor = rng;
        let powered = self.mono.power.enabled()
            && (self.mono.power.wired
                || self.mono.power.state.consume_power(OpClass::Adc, self.profile.p_adc, self.profile.t_adc).is_ok());
        if !powered {
            self.finish_round(MonoOutcome::default());
            return;
        }
        let a = self.mono.sm.handle(MonoEvent::Start { reading });
        self.apply_mono(a);
    }

    fn apply_mono(&mut self, actions: Vec<MonoAction>) {
        let g = self.mono.gen;
        for a in actions {
            match a {
                MonoAction::Send { delay, packet } if delay <= 0.0 => self.start_tx(NodeRef::Mono, packet),
                MonoAction::Send { delay, packet } => self.schedule(self.now + delay, Ev::MonoSend(g, packet)),
                MonoAction::Listen { delay, duration } => {
                    self.schedule(self.now + delay, Ev::MonoListenStart(g, duration));
                    self.schedule(self.now + delay + duration, Ev::MonoListenEnd(g));
                }
                MonoAction::Timer { delay } => self.schedule(self.now + delay, Ev::MonoTimer(g)),
                MonoAction::Finish(o) => self.finish_round(o),
            }
        }
    }

    fn finish_round(&mut self, outcome: MonoOutcome) {
        let Some(ctx) = self.round.take() else { return };
        self.mono.gen += 1;
        self.mono.listen = None;
        self.mono.inbox = None;
        let mut anchor_cp = Vec::new();
        let kappa = self.cfg.cp_calibration;
        let e_adc = self.profile.p_adc * self.profile.t_adc;
        for e in 0..self.ehas.len() {
            if !self.ehas[e].heard_request {
                continue;
            }
            self.advance_eha(e);
            let eha = &self.ehas[e];
            let l = eha.power.state.ledger();
            let spent = l.rx + l.tx - eha.mark + e_adc;
            anchor_cp.push((eha.id, kappa * spent / eha.nominal));
        }
        let cp_s = anchor_cp.iter().map(|c| c.1).reduce(f64::max);
        let truth = &self.ehas[ctx.true_cell];
        let error_m = outcome.selected.map(|s| {
            let sel = self.ehas.iter().find(|e| e.id == s).expect("decoder maps to known ids");
            dist(sel.pos, truth.pos)
        });
        let rec = RoundRecord {
            round: ctx.index,
            time: ctx.start,
            position_index: ctx.position_index,
            position: ctx.position,
            requested: outcome.requested,
            decoded: outcome.decoded,
            selected: outcome.selected,
            true_cell: truth.id,
            error_m,
            waves: outcome.waves,
            cp_s,
            anchor_cp,
        };
        if let Some(tr) = self.trace.as_mut() {
            tr.round(self.now, self.mono.id, &rec);
        }
        self.rounds.push(rec);
    }

    // ---- medium ----

    fn node_id(&self, n: NodeRef) -> u16 {
        match n {
            NodeRef::Esa(i) => self.esas[i].id,
            NodeRef::Eha(i) => self.ehas[i].id,
            NodeRef::Mono => self.mono.id,
        }
    }

    fn node_pos(&self, n: NodeRef) -> [f64; 2] {
        match n {
            NodeRef::Esa(i) => self.esas[i].pos,
            NodeRef::Eha(i) => self.ehas[i].pos,
            NodeRef::Mono => self.mono.pos,
        }
    }

    fn tx_power(&self, n: NodeRef) -> f64 {
        match n {
            NodeRef::Esa(i) => self.esas[i].tx_power,
            NodeRef::Eha(i) => self.ehas[i].tx_power,
            NodeRef::Mono => self.mono.tx_power,
        }
    }

    fn start_tx(&mut self, sender: NodeRef, packet: Packet) {
        let air = self.profile.t_tx;
        let (start, end) = (self.now, self.now + air);
        match sender {
            NodeRef::Eha(e) => {
                self.advance_eha(e);
                if !self.ehas[e].power.enabled() {
                    let a = self.ehas[e].sm.handle(EhaEvent::BrownOut);
                    self.apply_eha(e, a);
                    return;
                }
                self.ehas[e].power.loads = vec![(OpClass::Tx, self.profile.p_tx)];
            }
            NodeRef::Mono => {
                if !self.advance_mono() {
                    return;
                }
                self.mono.tx_until = end;
                self.refresh_mono_loads();
            }
            NodeRef::Esa(_) => {}
        }
        if let Some(tr) = self.trace.as_mut() {
            let round = self.round.as_ref().map(|r| r.index);
            let id = match sender {
                NodeRef::Esa(i) => self.esas[i].id,
                NodeRef::Eha(i) => self.ehas[i].id,
                NodeRef::Mono => self.mono.id,
            };
            tr.row(
                start,
                "tx",
                round,
                id,
                &[
                    ("kind", packet.kind.name().into()),
                    ("again", packet.request_again.to_string()),
                    ("frame", packet.to_hex()),
                ],
            );
        }
        self.txs.push(ActiveTx { sender, packet, start, end, resolved: false, dropped: false });
        let k = self.txs.len() - 1;
        self.open.push(k);
        self.schedule(end, Ev::TxEnd(k));
    }

    fn tx_end(&mut self, k: usize) {
        let sender = self.txs[k].sender;
        match sender {
            NodeRef::Eha(e) => {
                self.advance_eha(e);
                if self.ehas[e].sm.mode != EhaMode::Transmitting {
                    // Browned out mid-frame.
                    self.txs[k].dropped = true;
                } else {
                    let a = self.ehas[e].sm.handle(EhaEvent::TransmitDone);
                    self.apply_eha(e, a);
                    self.ehas[e].polled_until = self.now;
                }
            }
            NodeRef::Mono => {
                if !self.advance_mono() {
                    self.txs[k].dropped = true;
                }
                self.refresh_mono_loads();
            }
            NodeRef::Esa(_) => {}
        }
        self.resolve_group(k);
    }

    /// Resolves the group of mutually overlapping frames containing `k`
    /// once the last of them has ended.
    fn resolve_group(&mut self, k: usize) {
        if self.txs[k].resolved {
            return;
        }
        let mut group = vec![k];
        let mut grew = true;
        while grew {
            grew = false;
            for &j in &self.open {
                if group.contains(&j) {
                    continue;
                }
                let tj = &self.txs[j];
                if group.iter().any(|&g| tj.start < self.txs[g].end && self.txs[g].start < tj.end) {
                    group.push(j);
                    grew = true;
                }
            }
        }
        if group.iter().any(|&j| self.txs[j].end > self.now + EPS) {
            return;
        }
        group.sort_unstable();
        for &j in &group {
            self.txs[j].resolved = true;
        }
        self.open.retain(|j| !group.contains(j));
        let first = group.iter().map(|&j| self.txs[j].start).fold(f64::INFINITY, f64::min);
        let senders: Vec<NodeRef> = group.iter().map(|&j| self.txs[j].sender).collect();
        let live: Vec<usize> = group.iter().copied().filter(|&j| !self.txs[j].dropped).collect();

        let mut receivers: Vec<NodeRef> = (0..self.esas.len()).map(NodeRef::Esa).collect();
        receivers.extend((0..self.ehas.len()).map(NodeRef::Eha));
        receivers.push(NodeRef::Mono);
        for rx in receivers {
            if senders.contains(&rx) || !self.can_receive(rx, first) {
                continue;
            }
            let delivered = self.receive(rx, &live);
            if let Some(p) = delivered {
                self.deliver(rx, p);
            }
        }
    }

    fn can_receive(&mut self, rx: NodeRef, first: f64) -> bool {
        match rx {
            NodeRef::Esa(_) => true,
            NodeRef::Eha(e) => {
                self.advance_eha(e);
                let eha = &self.ehas[e];
                eha.power.enabled()
                    && eha.sm.mode == EhaMode::Listening
                    && eha.listen_since.is_some_and(|s| s <= first + EPS)
            }
            NodeRef::Mono => {
                self.advance_mono()
                    && self.mono.listen.is_some_and(|(s, e)| s <= first + EPS && e + EPS >= self.now)
            }
        }
    }

    /// What `rx` decodes from the frames in `live`.
    fn receive(&mut self, rx: NodeRef, live: &[usize]) -> Option<Packet> {
        let rx_id = self.node_id(rx);
        let rx_pos = self.node_pos(rx);
        let seed = self.cfg.seed;
        let mut list = Vec::with_capacity(live.len());
        for (slot, &j) in live.iter().enumerate() {
            let t = &self.txs[j];
            let s = t.sender;
            let (s_id, d, params) = (self.node_id(s), dist(self.node_pos(s), rx_pos), self.radio.with_tx_power(self.tx_power(s)));
            let rng = self.links.entry((s_id, rx_id)).or_insert_with(|| stream(seed, SHADOWING, s_id, rx_id));
            let rss = sample_rss(d, &params, rng);
            list.push(Transmission { sender: slot as u32, payload: t.packet.payload, start_time: t.start, rss });
        }
        let rng = self.collision.entry(rx_id).or_insert_with(|| stream(seed, COLLISION, rx_id, 0));
        let out = resolve_reception(&list, &self.radio, rng);
        let heard: Vec<&Packet> =
            list.iter().filter(|t| t.rss >= self.radio.sensitivity).map(|t| &self.txs[live[t.sender as usize]].packet).collect();
        let delivered = match out.kind {
            ReceptionKind::Clean | ReceptionKind::Captured => out.winner.map(|w| self.txs[live[w as usize]].packet),
            ReceptionKind::CollidedCorrupted => {
                let kind = heard[0].kind;
                if heard.iter().any(|p| p.kind != kind) {
                    None
                } else if kind == PacketKind::BeaconReply {
                    out.payload.map(Packet::beacon_reply)
                } else if heard.iter().all(|p| *p == heard[0]) {
                    Some(*heard[0])
                } else {
                    None
                }
            }
            ReceptionKind::None => None,
        };
        if out.kind != ReceptionKind::None {
            if let Some(tr) = self.trace.as_mut() {
                let round = self.round.as_ref().map(|r| r.index);
                let senders = list.iter().map(|t| self.txs[live[t.sender as usize]].sender);
                let ids: Vec<String> = senders
                    .map(|s| match s {
                        NodeRef::Esa(i) => self.esas[i].id,
                        NodeRef::Eha(i) => self.ehas[i].id,
                        NodeRef::Mono => self.mono.id,
                    })
                    .map(|i| i.to_string())
                    .collect();
                let rss: Vec<String> = list.iter().map(|t| t.rss.to_string()).collect();
                tr.row(
                    self.now,
                    "rx",
                    round,
                    rx_id,
                    &[
                        ("outcome", out.kind.name().into()),
                        ("senders", ids.join("|")),
                        ("rss", rss.join("|")),
                        ("delivered", delivered.map(|p| p.kind.name()).unwrap_or("-").into()),
                    ],
                );
            }
        }
        delivered
    }

    fn deliver(&mut self, rx: NodeRef, p: Packet) {
        match rx {
            NodeRef::Esa(i) => {
                let actions = self.esas[i].sm.handle(EsaEvent::Received(p));
                for a in actions {
                    match a {
                        EsaAction::Send { delay, packet } if delay <= 0.0 => self.start_tx(NodeRef::Esa(i), packet),
                        EsaAction::Send { delay, packet } => self.schedule(self.now + delay, Ev::EsaSend(i, packet)),
                        EsaAction::Transmitter { delay, on } => self.schedule(self.now + delay, Ev::Field(i, on)),
                    }
                }
            }
            NodeRef::Eha(e) => {
                if p.kind == PacketKind::BeaconRequest && self.round.is_some() {
                    self.ehas[e].heard_request = true;
                }
                let a = self.ehas[e].sm.handle(EhaEvent::Received(p));
                self.apply_eha(e, a);
            }
            NodeRef::Mono => {
                if self.mono.inbox.is_none() {
                    self.mono.inbox = Some(p);
                }
            }
        }
    }
}

fn eha_loads(profile: &PowerProfile, t_c: f64, mode: EhaMode) -> Vec<(OpClass, f64)> {
    match mode {
        EhaMode::Sleep => vec![(OpClass::Sleep, profile.p_sleep), (OpClass::Adc, profile.p_adc * profile.t_adc / t_c)],
        EhaMode::Listening => vec![(OpClass::Rx, profile.p_rx)],
        EhaMode::Transmitting => vec![(OpClass::Tx, profile.p_tx)],
    }
}
