//! Per-round results and the metrics derived from them.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::energy::EnergyLedger;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no rounds to summarize")]
    Empty,
}

/// What happened in one beacon round, with ground truth attached.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub time: f64,
    /// Index into a fixed mobile-node path; `None` for random placement.
    pub position_index: Option<usize>,
    pub position: [f64; 2],
    pub requested: bool,
    pub decoded: BTreeSet<u16>,
    pub selected: Option<u16>,
    /// Anchor nearest to the mobile node.
    pub true_cell: u16,
    /// Distance between the selected and the true anchor.
    pub error_m: Option<f64>,
    pub waves: u8,
    /// Slowest recharge among anchors that had to answer, s.
    pub cp_s: Option<f64>,
    /// Recharge time per answering anchor, s.
    pub anchor_cp: Vec<(u16, f64)>,
}

impl RoundRecord {
    pub fn success(&self) -> bool {
        self.requested && self.selected.is_some()
    }

    pub fn correct(&self) -> bool {
        self.success() && self.selected == Some(self.true_cell)
    }
}

/// Aggregate over a set of rounds.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Summary {
    pub rounds: usize,
    pub requests: usize,
    pub successes: usize,
    pub correct: usize,
    /// Successes over requests; 0 when nothing was requested.
    pub prr: f64,
    /// Correct over successes; undefined without successes.
    pub pda: Option<f64>,
    /// Mean error distance over successes, m.
    pub le_m: Option<f64>,
    pub mean_cp_s: Option<f64>,
    pub waves_1: usize,
    pub waves_2: usize,
}

impl Summary {
    fn of<'a>(records: impl IntoIterator<Item = &'a RoundRecord>) -> Self {
        let mut s = Summary::default();
        let mut err = 0.0;
        let mut cp = (0usize, 0.0);
        for r in records {
            s.rounds += 1;
            s.requests += r.requested as usize;
            if r.success() {
                s.successes += 1;
                err += r.error_m.unwrap_or(0.0);
            }
            s.correct += r.correct() as usize;
            match r.waves {
                1 => s.waves_1 += 1,
                2 => s.waves_2 += 1,
                _ => {}
            }
            if let Some(c) = r.cp_s {
                cp.0 += 1;
                cp.1 += c;
            }
        }
        s.prr = if s.requests > 0 { s.successes as f64 / s.requests as f64 } else { 0.0 };
        if s.successes > 0 {
            s.pda = Some(s.correct as f64 / s.successes as f64);
            s.le_m = Some(err / s.successes as f64);
        }
        if cp.0 > 0 {
            s.mean_cp_s = Some(cp.1 / cp.0 as f64);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Metrics {
    pub summary: Summary,
    pub per_cell: BTreeMap<u16, Summary>,
    pub per_position: BTreeMap<usize, Summary>,
    /// `(rounds answered, mean recharge time)` per anchor.
    pub anchor_cp: BTreeMap<u16, (usize, f64)>,
}

pub fn compute_metrics(records: &[RoundRecord]) -> Result<Metrics, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cells: BTreeMap<u16, Vec<&RoundRecord>> = BTreeMap::new();
    let mut positions: BTreeMap<usize, Vec<&RoundRecord>> = BTreeMap::new();
    let mut cp: BTreeMap<u16, (usize, f64)> = BTreeMap::new();
    for r in records {
        cells.entry(r.true_cell).or_default().push(r);
        if let Some(p) = r.position_index {
            positions.entry(p).or_default().push(r);
        }
        for &(id, c) in &r.anchor_cp {
            let e = cp.entry(id).or_default();
            e.0 += 1;
            e.1 += c;
        }
    }
    for v in cp.values_mut() {
        v.1 /= v.0 as f64;
    }
    Ok(Metrics {
        summary: Summary::of(records),
        per_cell: cells.into_iter().map(|(k, v)| (k, Summary::of(v))).collect(),
        per_position: positions.into_iter().map(|(k, v)| (k, Summary::of(v))).collect(),
        anchor_cp: cp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Esa,
    Eha,
    Mono,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Esa => "esa",
            Role::Eha => "eha",
            Role::Mono => "mono",
        }
    }
}

/// End-of-run energy account of one node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReport {
    pub id: u16,
    pub role: Role,
    pub wired: bool,
    pub ledger: EnergyLedger,
    pub stored_start: f64,
    pub stored_end: f64,
}

impl NodeReport {
    /// Energy unaccounted for by the ledger, J.
    pub fn residual(&self) -> f64 {
        let l = &self.ledger;
        self.stored_start + l.harvested + l.supplied - l.consumed() - l.clamp_loss - self.stored_end
    }

    /// Residual relative to the largest flow through the node.
    pub fn relative_residual(&self) -> f64 {
        let l = &self.ledger;
        let scale = [self.stored_start, l.harvested, l.supplied, l.consumed(), self.stored_end]
            .into_iter()
            .fold(f64::MIN_POSITIVE, f64::max);
        self.residual().abs() / scale
    }
}

pub const METRICS_COLUMNS: [&str; 35] = [
    "record",
    "id",
    "rounds",
    "requests",
    "successes",
    "correct",
    "prr",
    "pda",
    "le_m",
    "mean_cp_s",
    "waves_1",
    "waves_2",
    "round",
    "time_s",
    "position_index",
    "x_m",
    "y_m",
    "requested",
    "success",
    "selected",
    "true_cell",
    "error_m",
    "waves",
    "cp_s",
    "decoded",
    "e_tx_j",
    "e_rx_j",
    "e_adc_j",
    "e_sleep_j",
    "e_harvested_j",
    "e_supplied_j",
    "e_clamp_j",
    "e_stored_start_j",
    "e_stored_end_j",
    "role",
];

struct Row(Vec<String>);

impl Row {
    fn new(record: &str) -> Self {
        let mut v = vec![String::new(); METRICS_COLUMNS.len()];
        v[0] = record.to_string();
        Row(v)
    }

    fn set(&mut self, col: &str, value: impl ToString) -> &mut Self {
        let i = METRICS_COLUMNS.iter().position(|c| *c == col).expect("known column");
        self.0[i] = value.to_string();
        self
    }

    fn opt<T: ToString>(&mut self, col: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.set(col, v);
        }
        self
    }

    fn summary(&mut self, s: &Summary) -> &mut Self {
        self.set("rounds", s.rounds)
            .set("requests", s.requests)
            .set("successes", s.successes)
            .set("correct", s.correct)
            .set("prr", s.prr)
            .opt("pda", s.pda)
            .opt("le_m", s.le_m)
            .opt("mean_cp_s", s.mean_cp_s)
            .set("waves_1", s.waves_1)
            .set("waves_2", s.waves_2)
    }
}

pub fn join_ids(ids: &BTreeSet<u16>) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("|")
}

/// One CSV with summary, per-cell, per-position, per-node and per-round rows
/// sharing a fixed column set; cells not meaningful for a row stay empty.
pub fn metrics_csv(metrics: &Metrics, rounds: &[RoundRecord], nodes: &[NodeReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_COLUMNS).expect("in-memory write");
    let mut rows = Vec::new();
    let mut r = Row::new("summary");
    r.summary(&metrics.summary);
    rows.push(r);
    for (id, s) in &metrics.per_cell {
        let mut r = Row::new("cell");
        r.set("id", id).summary(s);
        rows.push(r);
    }
    for (id, s) in &metrics.per_position {
        let mut r = Row::new("position");
        r.set("id", id).summary(s);
        rows.push(r);
    }
    for n in nodes {
        let mut r = Row::new("node");
        let l = &n.ledger;
        r.set("id", n.id)
            .set("role", n.role.name())
            .set("e_tx_j", l.tx)
            .set("e_rx_j", l.rx)
            .set("e_adc_j", l.adc)
            .set("e_sleep_j", l.sleep)
            .set("e_harvested_j", l.harvested)
            .set("e_supplied_j", l.supplied)
            .set("e_clamp_j", l.clamp_loss)
            .set("e_stored_start_j", n.stored_start)
            .set("e_stored_end_j", n.stored_end);
        if let Some((count, mean)) = metrics.anchor_cp.get(&n.id) {
            r.set("rounds", count).set("mean_cp_s", mean);
        }
        rows.push(r);
    }
    for rec in rounds {
        let mut r = Row::new("round");
        r.set("round", rec.round)
            .set("time_s", rec.time)
            .opt("position_index", rec.position_index)
            .set("x_m", rec.position[0])
            .set("y_m", rec.position[1])
            .set("requested", rec.requested)
            .set("success", rec.success())
            .opt("selected", rec.selected)
            .set("true_cell", rec.true_cell)
            .opt("error_m", rec.error_m)
            .set("waves", rec.waves)
            .opt("cp_s", rec.cp_s)
            .set("decoded", join_ids(&rec.decoded));
        rows.push(r);
    }
    for r in rows {
        w.write_record(&r.0).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
