//! Event trace: `time_s,record,round,node,detail`, where `detail` is a
//! `key=value;key=value` list. Round rows carry everything needed to
//! recompute the metrics.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::metrics::{join_ids, RoundRecord};

pub const TRACE_COLUMNS: [&str; 5] = ["time_s", "record", "round", "node", "detail"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace row {row}: {msg}")]
    Field { row: usize, msg: String },
}

pub struct TraceWriter {
    w: csv::Writer<Vec<u8>>,
}

impl Default for TraceWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl TraceWriter {
    pub fn new() -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TRACE_COLUMNS).expect("in-memory write");
        Self { w }
    }

    pub fn row(&mut self, time: f64, record: &str, round: Option<usize>, node: u16, detail: &[(&str, String)]) {
        let detail = detail.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
        let round = round.map(|r| r.to_string()).unwrap_or_default();
        self.w
            .write_record([time.to_string(), record.to_string(), round, node.to_string(), detail])
            .expect("in-memory write");
    }

    /// Writes a round row at `now`, the time the round closed.
    pub fn round(&mut self, now: f64, mono: u16, r: &RoundRecord) {
        let mut d = vec![
            ("start", r.time.to_string()),
            ("x_m", r.position[0].to_string()),
            ("y_m", r.position[1].to_string()),
            ("requested", r.requested.to_string()),
            ("true_cell", r.true_cell.to_string()),
            ("waves", r.waves.to_string()),
            ("decoded", join_ids(&r.decoded)),
        ];
        if let Some(p) = r.position_index {
            d.push(("position_index", p.to_string()));
        }
        if let Some(s) = r.selected {
            d.push(("selected", s.to_string()));
        }
        if let Some(e) = r.error_m {
            d.push(("error_m", e.to_string()));
        }
        if let Some(c) = r.cp_s {
            d.push(("cp_s", c.to_string()));
        }
        let cps = r.anchor_cp.iter().map(|(id, c)| format!("{id}:{c}")).collect::<Vec<_>>().join("|");
        d.push(("anchor_cp", cps));
        self.row(now, "round", Some(r.round), mono, &d);
    }

    pub fn finish(self) -> String {
        String::from_utf8(self.w.into_inner().expect("flush")).expect("utf-8")
    }
}

fn parse_detail(detail: &str) -> BTreeMap<&str, &str> {
    detail.split(';').filter(|s| !s.is_empty()).filter_map(|kv| kv.split_once('=')).collect()
}

fn parse<T: std::str::FromStr>(row: usize, key: &str, v: &str) -> Result<T, TraceError> {
    v.parse().map_err(|_| TraceError::Field { row, msg: format!("bad {key} value {v:?}") })
}

/// Rebuilds the round records from a trace.
pub fn rounds_from_trace(text: &str) -> Result<Vec<RoundRecord>, TraceError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        if &row[1] != "round" {
            continue;
        }
        let d = parse_detail(&row[4]);
        let get = |k: &str| d.get(k).copied().ok_or_else(|| TraceError::Field { row: i, msg: format!("missing {k}") });
        let opt = |k: &str| d.get(k).copied();
        let decoded: BTreeSet<u16> = get("decoded")?
            .split('|')
            .filter(|s| !s.is_empty())
            .map(|s| parse(i, "decoded", s))
            .collect::<Result<_, _>>()?;
        let mut anchor_cp = Vec::new();
        for pair in get("anchor_cp")?.split('|').filter(|s| !s.is_empty()) {
            let (id, c) = pair.split_once(':').ok_or_else(|| TraceError::Field { row: i, msg: "bad anchor_cp".into() })?;
            anchor_cp.push((parse(i, "anchor_cp", id)?, parse(i, "anchor_cp", c)?));
        }
        out.push(RoundRecord {
            round: parse(i, "round", &row[2])?,
            time: parse(i, "start", get("start")?)?,
            position_index: opt("position_index").map(|v| parse(i, "position_index", v)).transpose()?,
            position: [parse(i, "x_m", get("x_m")?)?, parse(i, "y_m", get("y_m")?)?],
            requested: parse(i, "requested", get("requested")?)?,
            decoded,
            selected: opt("selected").map(|v| parse(i, "selected", v)).transpose()?,
            true_cell: parse(i, "true_cell", get("true_cell")?)?,
            error_m: opt("error_m").map(|v| parse(i, "error_m", v)).transpose()?,
            waves: parse(i, "waves", get("waves")?)?,
            cp_s: opt("cp_s").map(|v| parse(i, "cp_s", v)).transpose()?,
            anchor_cp,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_rows_round_trip() {
        let r = RoundRecord {
            round: 7,
            time: 7.000123456789,
            position_index: None,
            position: [1.0 / 3.0, 0.0],
            requested: true,
            decoded: BTreeSet::from([2, 5]),
            selected: Some(5),
            true_cell: 2,
            error_m: Some(0.1 + 0.2),
            waves: 2,
            cp_s: Some(12.5),
            anchor_cp: vec![(2, 12.5), (5, 3.25)],
        };
        let mut t = TraceWriter::new();
        t.row(0.5, "field", None, 100, &[("on", "false".into())]);
        t.round(7.9, 200, &r);
        let back = rounds_from_trace(&t.finish()).unwrap();
        assert_eq!(back, vec![r]);
    }
}
