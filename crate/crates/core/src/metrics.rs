//! Total time spent, relative queue balance and total time blocked.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulator::RunTrace;

const SECONDS_PER_HOUR: f64 = 3600.0;

/// `(x, x_b)` of every link at one time step.
type LinkValues = BTreeMap<usize, (f64, f64)>;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot read trace: {0}")]
    Trace(String),
    #[error("reports cover different horizons: {0}")]
    HorizonMismatch(String),
    #[error("at least two reports are needed, got {0}")]
    TooFewReports(usize),
    #[error("{0} links in the trace but {1} capacities")]
    DimensionMismatch(usize, usize),
}

/// Total time spent (veh·h), blocked vehicles included.
pub fn tts(x: &[DVector<f64>], x_b: &[DVector<f64>], tick: f64) -> f64 {
    let total: f64 = x.iter().zip(x_b).map(|(a, b)| a.sum() + b.sum()).sum();
    tick * total / SECONDS_PER_HOUR
}

/// Relative queue balance `sum_k sum_z x_z^2 / x_max_z` (veh).
pub fn rqb(x: &[DVector<f64>], x_max: &DVector<f64>) -> f64 {
    x.iter()
        .map(|xk| xk.iter().zip(x_max.iter()).map(|(v, m)| v * v / m).sum::<f64>())
        .sum()
}

/// Total time blocked (veh·h).
pub fn ttb(x_b: &[DVector<f64>], tick: f64) -> f64 {
    tick * x_b.iter().map(|b| b.sum()).sum::<f64>() / SECONDS_PER_HOUR
}

/// Occupancy and blocked-vehicle series sampled every `tick` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSeries {
    pub tick: f64,
    pub x: Vec<DVector<f64>>,
    pub x_b: Vec<DVector<f64>>,
}

impl TraceSeries {
    pub fn from_trace(trace: &RunTrace) -> Self {
        Self {
            tick: trace.tick,
            x: trace.x_series(),
            x_b: trace.x_b_series(),
        }
    }

    /// Parses a trace CSV (`time_s,link,x,x_b,...`).
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let err = |msg: String| MetricsError::Trace(msg);
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| err(e.to_string()))?.clone();
        let column = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| err(format!("missing column '{name}'")))
        };
        let (ct, cl, cx, cb) = (column("time_s")?, column("link")?, column("x")?, column("x_b")?);
        let mut rows: BTreeMap<u64, LinkValues> = BTreeMap::new();
        let mut times: BTreeMap<u64, f64> = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| err(e.to_string()))?;
            let field = |c: usize| -> Result<f64, MetricsError> {
                record
                    .get(c)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| err(format!("row {}: bad value in column {}", i + 2, c + 1)))
            };
            let t = field(ct)?;
            let link = record
                .get(cl)
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&l| l >= 1)
                .ok_or_else(|| err(format!("row {}: bad link id", i + 2)))?;
            times.insert(t.to_bits(), t);
            rows.entry(t.to_bits()).or_default().insert(link, (field(cx)?, field(cb)?));
        }
        let mut ordered: Vec<(f64, &LinkValues)> =
            rows.iter().map(|(k, v)| (times[k], v)).collect();
        ordered.sort_by(|a, b| a.0.total_cmp(&b.0));
        let links = ordered.first().map_or(0, |(_, r)| r.len());
        let mut x = Vec::with_capacity(ordered.len());
        let mut x_b = Vec::with_capacity(ordered.len());
        for (t, r) in &ordered {
            if r.len() != links || r.keys().next_back() != Some(&links) {
                return Err(err(format!("incomplete link set at time {t}")));
            }
            x.push(DVector::from_iterator(links, r.values().map(|v| v.0)));
            x_b.push(DVector::from_iterator(links, r.values().map(|v| v.1)));
        }
        let tick = match ordered.as_slice() {
            [a, b, ..] => b.0 - a.0,
            _ => return Err(err("a trace needs at least two time steps".into())),
        };
        if ordered.windows(2).any(|w| ((w[1].0 - w[0].0) - tick).abs() > 1e-9 * tick) {
            return Err(err("time steps are not uniform".into()));
        }
        Ok(Self { tick, x, x_b })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<String>,
    pub horizon_s: f64,
    pub tick_s: f64,
    /// veh·h
    pub tts: f64,
    /// veh
    pub rqb: f64,
    /// veh·h
    pub ttb: f64,
    /// Vehicles in the network, blocked ones included, at every tick.
    pub totals: Vec<f64>,
}

impl MetricsReport {
    pub fn from_series(series: &TraceSeries, x_max: &DVector<f64>, controller: Option<String>) -> Result<Self, MetricsError> {
        let links = series.x.first().map_or(x_max.len(), |x| x.len());
        if links != x_max.len() {
            return Err(MetricsError::DimensionMismatch(links, x_max.len()));
        }
        Ok(Self {
            controller,
            horizon_s: series.x.len() as f64 * series.tick,
            tick_s: series.tick,
            tts: tts(&series.x, &series.x_b, series.tick),
            rqb: rqb(&series.x, x_max),
            ttb: ttb(&series.x_b, series.tick),
            totals: series.x.iter().zip(&series.x_b).map(|(a, b)| a.sum() + b.sum()).collect(),
        })
    }

    pub fn from_trace(trace: &RunTrace, x_max: &DVector<f64>) -> Result<Self, MetricsError> {
        Self::from_series(
            &TraceSeries::from_trace(trace),
            x_max,
            Some(trace.variant.label().to_string()),
        )
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

/// Aligned table with one row per report, in input order.
pub fn compare_table(reports: &[(String, MetricsReport)]) -> Result<String, MetricsError> {
    if reports.len() < 2 {
        return Err(MetricsError::TooFewReports(reports.len()));
    }
    let horizon = reports[0].1.horizon_s;
    if let Some((name, r)) = reports.iter().find(|(_, r)| (r.horizon_s - horizon).abs() > 1e-9) {
        return Err(MetricsError::HorizonMismatch(format!(
            "{} covers {} s, {} covers {} s",
            reports[0].0, horizon, name, r.horizon_s
        )));
    }
    let header = ["Method", "TTS (veh·h)", "RQB x1e-3 (veh)", "TTB (veh·h)"];
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|(name, r)| {
            [
                name.clone(),
                format!("{:.2}", r.tts),
                format!("{:.3}", r.rqb / 1e3),
                format!("{:.2}", r.ttb),
            ]
        })
        .collect();
    let width = |c: usize| {
        rows.iter()
            .map(|r| r[c].chars().count())
            .chain(std::iter::once(header[c].chars().count()))
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..4).map(width).collect();
    let mut out = String::new();
    let mut line = |cells: [&str; 4]| {
        let mut s = format!("{:<w$}", cells[0], w = widths[0]);
        for c in 1..4 {
            let pad = widths[c] - cells[c].chars().count();
            s.push_str("  ");
            s.push_str(&" ".repeat(pad));
            s.push_str(cells[c]);
        }
        writeln!(out, "{}", s.trim_end()).expect("writing to a string");
    };
    line(header);
    for r in &rows {
        line([&r[0], &r[1], &r[2], &r[3]]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    #[test]
    fn tts_examples() {
        let x = vec![dvector![1.0], dvector![1.0]];
        let b = vec![dvector![0.0], dvector![0.0]];
        assert_relative_eq!(tts(&x, &b, 5.0), 10.0 / 3600.0);
        assert_eq!(tts(&[], &[], 5.0), 0.0);
        let b1 = vec![dvector![1.0], dvector![0.0]];
        assert_relative_eq!(tts(&x, &b1, 5.0) - tts(&x, &b, 5.0), 5.0 / 3600.0, epsilon = 1e-15);
    }

    #[test]
    fn rqb_examples() {
        assert_eq!(rqb(&[dvector![10.0]], &dvector![100.0]), 1.0);
        assert_eq!(rqb(&[dvector![0.0]], &dvector![100.0]), 0.0);
        let x = vec![dvector![3.0, 7.0], dvector![1.0, 2.0]];
        let doubled: Vec<_> = x.iter().map(|v| v * 2.0).collect();
        let m = dvector![50.0, 20.0];
        assert_relative_eq!(rqb(&doubled, &m), 4.0 * rqb(&x, &m), max_relative = 1e-15);
    }

    #[test]
    fn ttb_examples() {
        assert_eq!(ttb(&[dvector![0.0, 0.0]], 5.0), 0.0);
        assert_relative_eq!(ttb(&[dvector![1.0]], 5.0), 5.0 / 3600.0);
        let a = ttb(&[dvector![2.0, 0.0]], 5.0);
        let b = ttb(&[dvector![0.0, 3.0]], 5.0);
        assert_relative_eq!(ttb(&[dvector![2.0, 3.0]], 5.0), a + b, max_relative = 1e-15);
    }

    #[test]
    fn csv_round_trip_and_identity() {
        let text = "time_s,link,x,x_b,y,x_hat,e_hat,e_true\n\
                    0,1,1,0,1,1,0,0\n0,2,4,1,4,4,0,0\n\
                    5,1,2,0,2,2,0,0\n5,2,3,0.5,3,3,0,0\n";
        let s = TraceSeries::from_csv(text).unwrap();
        assert_eq!(s.tick, 5.0);
        assert_eq!(s.x, vec![dvector![1.0, 4.0], dvector![2.0, 3.0]]);
        let r = MetricsReport::from_series(&s, &dvector![10.0, 10.0], None).unwrap();
        assert_relative_eq!(r.tts, r.ttb + 5.0 * 10.0 / 3600.0, max_relative = 1e-14);
        assert_eq!(r.totals, vec![6.0, 5.5]);
        assert!(TraceSeries::from_csv("time_s,link,x\n0,1,1\n").is_err());
    }

    #[test]
    fn table_layout() {
        let r = MetricsReport {
            controller: None,
            horizon_s: 3600.0,
            tick_s: 5.0,
            tts: 360.0,
            rqb: 3140.0,
            ttb: 0.0,
            totals: vec![],
        };
        let reports = vec![("TUC ideal".to_string(), r.clone()), ("TUC-FF".to_string(), r.clone())];
        let table = compare_table(&reports).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("Method"));
        assert!(lines[0].contains("TTS") && lines[0].contains("RQB") && lines[0].contains("TTB"));
        assert!(lines[1].starts_with("TUC ideal"));
        assert_eq!(lines[1][9..], lines[2][9..]);
        let other = MetricsReport { horizon_s: 7200.0, ..r.clone() };
        assert!(compare_table(&[("a".into(), r.clone()), ("b".into(), other)]).is_err());
        assert!(compare_table(&[("a".into(), r)]).is_err());
    }
}
