use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};

use crate::error::{Result, StsError};
use crate::features::AnomalyTensor;
use crate::graph::RegionGraph;
use crate::tensor::Tensor;

use super::SlotLayout;

pub const EVENTS_HEADER: &str = "timestamp,region_id,category,value";

/// Largest tolerated share of malformed records.
const MAX_FAILURE_RATIO: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub timestamp: DateTime<Utc>,
    pub region_id: String,
    pub category: String,
    pub value: f64,
}

/// What happened to the records of one ingest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub records: usize,
    pub accepted: usize,
    /// Well-formed records outside the slot range.
    pub dropped: usize,
    /// `(line, message)` for each rejected record.
    pub errors: Vec<(usize, String)>,
}

/// Accepts RFC 3339 with an offset, or a naive date/time taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc())
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%S%.fZ").to_string()
}

fn region_index(graph: &RegionGraph) -> HashMap<String, usize> {
    match graph.labels() {
        Some(labels) => labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect(),
        None => (0..graph.n_regions()).map(|i| (i.to_string(), i)).collect(),
    }
}

fn region_name(graph: &RegionGraph, r: usize) -> String {
    graph
        .labels()
        .map_or_else(|| r.to_string(), |l| l[r].clone())
}

/// Bins an event CSV into an anomaly tensor.
///
/// Slot `t` covers `[t0 + tΔ, t0 + (t+1)Δ)`. Region ids resolve against the
/// graph's labels, or against plain indices when it has none.
pub fn ingest(
    input: impl Read,
    graph: &RegionGraph,
    layout: &SlotLayout,
) -> Result<(AnomalyTensor, IngestReport)> {
    layout.validate()?;
    let (n, t_len, c_len) = (graph.n_regions(), layout.n_slots, layout.categories.len());
    let regions = region_index(graph);
    let categories: HashMap<&str, usize> = layout
        .categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| StsError::Data(format!("event csv header: {e}")))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != EVENTS_HEADER {
        return Err(StsError::Data(format!(
            "event csv header '{header}' (expected '{EVENTS_HEADER}')"
        )));
    }
    let slot_ms = layout.slot_seconds * 1000;
    let start_ms = layout.t0.timestamp_millis();
    let mut values = vec![0.0; n * t_len * c_len];
    let mut report = IngestReport::default();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        report.records += 1;
        let parsed = rec
            .map_err(|e| e.to_string())
            .and_then(|rec| {
                if rec.len() != 4 {
                    return Err(format!("expected 4 fields, found {}", rec.len()));
                }
                let ts = parse_timestamp(&rec[0]).ok_or_else(|| format!("bad timestamp '{}'", &rec[0]))?;
                let r = *regions
                    .get(&rec[1])
                    .ok_or_else(|| format!("unknown region '{}'", &rec[1]))?;
                let c = *categories
                    .get(&rec[2])
                    .ok_or_else(|| format!("unknown category '{}'", &rec[2]))?;
                let v: f64 = rec[3].parse().map_err(|_| format!("bad value '{}'", &rec[3]))?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(format!("value must be positive, got {v}"));
                }
                Ok((ts, r, c, v))
            });
        match parsed {
            Ok((ts, r, c, v)) => {
                let dt = ts.timestamp_millis() - start_ms;
                if dt < 0 || dt >= slot_ms * t_len as i64 {
                    report.dropped += 1;
                    continue;
                }
                let t = (dt / slot_ms) as usize;
                values[(r * t_len + t) * c_len + c] += v;
                report.accepted += 1;
            }
            Err(msg) => report.errors.push((line, msg)),
        }
    }
    if report.errors.len() as f64 > MAX_FAILURE_RATIO * report.records as f64 {
        let shown: Vec<String> = report
            .errors
            .iter()
            .take(5)
            .map(|(l, m)| format!("line {l}: {m}"))
            .collect();
        return Err(StsError::Data(format!(
            "{} of {} event records failed (limit 1%); first: {}",
            report.errors.len(),
            report.records,
            shown.join("; ")
        )));
    }
    let tensor = Tensor::new(vec![n, t_len, c_len], values)?;
    let x = AnomalyTensor::new(tensor, layout.slot_seconds, layout.categories.clone(), layout.t0)?;
    Ok((x, report))
}

/// Writes `x` as events stamped at slot starts. With `unit` set each whole
/// count becomes its own event of value 1, plus one event for any
/// fractional remainder; otherwise each nonzero cell is one event.
/// Returns the number of events written.
pub fn export_events(x: &AnomalyTensor, graph: &RegionGraph, unit: bool, mut out: impl Write) -> Result<usize> {
    if graph.n_regions() != x.n_regions() {
        return Err(StsError::Dimension(format!(
            "tensor has {} regions, graph has {}",
            x.n_regions(),
            graph.n_regions()
        )));
    }
    let io = |e| StsError::io("event output", e);
    writeln!(out, "{EVENTS_HEADER}").map_err(io)?;
    let mut written = 0;
    for t in 0..x.n_slots() {
        let stamp = format_timestamp(x.t0 + chrono::Duration::seconds(x.slot_duration * t as i64));
        for r in 0..x.n_regions() {
            let region = region_name(graph, r);
            for (c, name) in x.category_names.iter().enumerate() {
                let v = x.get(r, t, c);
                if v == 0.0 {
                    continue;
                }
                if unit {
                    let whole = v.floor();
                    for _ in 0..whole as u64 {
                        writeln!(out, "{stamp},{region},{name},1").map_err(io)?;
                        written += 1;
                    }
                    let rest = v - whole;
                    if rest > 0.0 {
                        writeln!(out, "{stamp},{region},{name},{rest:?}").map_err(io)?;
                        written += 1;
                    }
                } else {
                    writeln!(out, "{stamp},{region},{name},{v:?}").map_err(io)?;
                    written += 1;
                }
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(n_slots: usize) -> SlotLayout {
        SlotLayout {
            t0: parse_timestamp("2021-03-01T00:00:00Z").unwrap(),
            slot_seconds: 3600,
            n_slots,
            categories: vec!["theft".into(), "assault".into()],
        }
    }

    fn run(csv: &str, n_slots: usize) -> Result<(AnomalyTensor, IngestReport)> {
        let g = RegionGraph::grid(1, 2).unwrap();
        ingest(csv.as_bytes(), &g, &layout(n_slots))
    }

    #[test]
    fn accumulates_events_in_a_cell() {
        let csv = "timestamp,region_id,category,value\n\
                   2021-03-01T00:10:00Z,1,theft,1\n\
                   2021-03-01T00:50:00Z,1,theft,1\n";
        let (x, rep) = run(csv, 2).unwrap();
        assert_eq!(x.get(1, 0, 0), 2.0);
        assert_eq!(rep.accepted, 2);
    }

    #[test]
    fn boundary_goes_to_later_slot() {
        let csv = "timestamp,region_id,category,value\n2021-03-01T01:00:00Z,0,assault,1\n";
        let (x, _) = run(csv, 2).unwrap();
        assert_eq!(x.get(0, 0, 1), 0.0);
        assert_eq!(x.get(0, 1, 1), 1.0);
    }

    #[test]
    fn risk_values_sum() {
        let csv = "timestamp,region_id,category,value\n\
                   2021-03-01 00:00:00,0,theft,1\n\
                   2021-03-01T00:20:00+00:00,0,theft,2\n\
                   2021-03-01T00:59:59.999Z,0,theft,3\n";
        let (x, _) = run(csv, 1).unwrap();
        assert_eq!(x.get(0, 0, 0), 6.0);
    }

    #[test]
    fn out_of_range_is_dropped_and_reported() {
        let csv = "timestamp,region_id,category,value\n\
                   2021-02-28T23:59:59Z,0,theft,1\n\
                   2021-03-01T02:00:00Z,0,theft,1\n\
                   2021-03-01T01:59:59Z,0,theft,1\n";
        let (x, rep) = run(csv, 2).unwrap();
        assert_eq!(rep.dropped, 2);
        assert_eq!(x.values().sum(), 1.0);
    }

    #[test]
    fn bad_records_abort_above_one_percent() {
        let mut csv = String::from("timestamp,region_id,category,value\n");
        for _ in 0..99 {
            csv.push_str("2021-03-01T00:00:00Z,0,theft,1\n");
        }
        csv.push_str("2021-03-01T00:00:00Z,7,theft,1\n");
        let (_, rep) = run(&csv, 1).unwrap();
        assert_eq!(rep.errors.len(), 1);
        assert_eq!(rep.errors[0].0, 101);
        assert!(rep.errors[0].1.contains("unknown region"));

        csv.push_str("2021-03-01T00:00:00Z,0,arson,1\n");
        let err = run(&csv, 1).unwrap_err();
        assert!(matches!(err, StsError::Data(ref m) if m.contains("line 101")), "{err}");
    }

    #[test]
    fn header_is_required() {
        assert!(matches!(run("a,b,c,d\n", 1), Err(StsError::Data(_))));
    }

    #[test]
    fn labels_resolve_region_ids() {
        let g = RegionGraph::grid(1, 2)
            .unwrap()
            .with_labels(vec!["north".into(), "south".into()])
            .unwrap();
        let csv = "timestamp,region_id,category,value\n2021-03-01T00:00:00Z,south,theft,2.5\n";
        let (x, _) = ingest(csv.as_bytes(), &g, &layout(1)).unwrap();
        assert_eq!(x.get(1, 0, 0), 2.5);
    }
}
