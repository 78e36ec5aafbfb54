//! Training telemetry and graph visualization.
//!
//! Summary operations produce [`SummaryValue`]s; an [`EventWriter`] turns the
//! fetched values into JSONL records stamped with a step. [`export_dot`]
//! renders a graph as Graphviz text with name scopes folded into clusters.

mod dot;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use dot::{export_dot, quotient_edges, GroupKey};

/// Number of histogram buckets.
pub const HISTOGRAM_BUCKETS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryValue {
    pub tag: String,
    pub payload: SummaryPayload,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SummaryPayload {
    Scalar(f64),
    Histogram(Histogram),
}

impl SummaryValue {
    pub fn scalar(tag: &str, value: f64) -> SummaryValue {
        SummaryValue {
            tag: tag.to_string(),
            payload: SummaryPayload::Scalar(value),
        }
    }

    pub fn histogram(tag: &str, values: &[f64]) -> SummaryValue {
        SummaryValue {
            tag: tag.to_string(),
            payload: SummaryPayload::Histogram(Histogram::new(values)),
        }
    }

    /// Approximate in-memory footprint, used for live-byte accounting.
    pub fn encoded_len(&self) -> usize {
        let body = match &self.payload {
            SummaryPayload::Scalar(_) => 8,
            SummaryPayload::Histogram(h) => 8 * (h.edges.len() + h.counts.len() + 3),
        };
        self.tag.len() + body
    }
}

/// Counts over 30 buckets whose 31 edges are `-g14 .. -g0, 0, g0 .. g14`
/// with `g_i = m * 10^((i - 14) / 2)` and `m` the largest finite magnitude.
/// Bucket `j` covers `[edges[j], edges[j+1])`; the last one also holds `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    #[serde(with = "float_vec")]
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    #[serde(with = "float")]
    pub min: f64,
    #[serde(with = "float")]
    pub max: f64,
    #[serde(with = "float")]
    pub sum: f64,
}

impl Histogram {
    pub fn new(values: &[f64]) -> Histogram {
        let m = values
            .iter()
            .filter(|v| v.is_finite())
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        let m = if m > 0.0 { m } else { 1.0 };
        let half = HISTOGRAM_BUCKETS / 2;
        let positive: Vec<f64> = (0..half)
            .map(|i| m * 10f64.powf((i as f64 - (half - 1) as f64) / 2.0))
            .collect();
        let mut edges: Vec<f64> = positive.iter().rev().map(|g| -g).collect();
        edges.push(0.0);
        edges.extend(&positive);

        let mut counts = vec![0u64; HISTOGRAM_BUCKETS];
        for &v in values {
            counts[bucket_of(&edges, v)] += 1;
        }
        let (min, max, sum) = if values.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            (
                values.iter().copied().fold(f64::INFINITY, f64::min),
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                values.iter().sum(),
            )
        };
        Histogram {
            edges,
            counts,
            min,
            max,
            sum,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn bucket_of(edges: &[f64], v: f64) -> usize {
    let last = edges.len() - 2;
    if v.is_nan() {
        return edges.len() / 2;
    }
    let above = edges.partition_point(|&e| e <= v);
    above.saturating_sub(1).min(last)
}

/// One line of the event log. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub step: u64,
    pub time: f64,
    pub tag: String,
    pub kind: String,
    pub value: serde_json::Value,
}

impl EventRecord {
    pub fn from_summary(step: u64, time: f64, s: &SummaryValue) -> EventRecord {
        let (kind, value) = match &s.payload {
            SummaryPayload::Scalar(v) => ("scalar", float::encode(*v)),
            SummaryPayload::Histogram(h) => (
                "histogram",
                serde_json::to_value(h).expect("histograms are representable"),
            ),
        };
        EventRecord {
            step,
            time,
            tag: s.tag.clone(),
            kind: kind.to_string(),
            value,
        }
    }

    /// The scalar carried by a scalar record.
    pub fn scalar(&self) -> Option<f64> {
        if self.kind != "scalar" {
            return None;
        }
        float::decode(&self.value).ok()
    }

    pub fn histogram(&self) -> Option<Histogram> {
        if self.kind != "histogram" {
            return None;
        }
        serde_json::from_value(self.value.clone()).ok()
    }
}

/// Append-only JSONL sink.
pub struct EventWriter {
    out: BufWriter<File>,
}

impl EventWriter {
    pub fn create(path: &Path) -> io::Result<EventWriter> {
        Ok(EventWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    /// Opens an existing log for appending, creating it when absent.
    pub fn append(path: &Path) -> io::Result<EventWriter> {
        let file = File::options().create(true).append(true).open(path)?;
        Ok(EventWriter {
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &EventRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    /// Writes one record per summary value.
    pub fn write_summaries(&mut self, step: u64, time: f64, values: &[SummaryValue]) -> io::Result<usize> {
        for v in values {
            self.write(&EventRecord::from_summary(step, time, v))?;
        }
        Ok(values.len())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

impl Drop for EventWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_events(path: &Path) -> io::Result<Vec<EventRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(io::Error::other)?);
    }
    Ok(out)
}

/// JSON numbers with non-finite values spelled as strings.
mod float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::Value;

    pub fn encode(v: f64) -> Value {
        match serde_json::Number::from_f64(v) {
            Some(n) => Value::Number(n),
            None if v.is_nan() => "NaN".into(),
            None if v > 0.0 => "Infinity".into(),
            None => "-Infinity".into(),
        }
    }

    pub fn decode(v: &Value) -> Result<f64, String> {
        match v {
            Value::Number(n) => n.as_f64().ok_or_else(|| n.to_string()),
            Value::String(s) if s == "NaN" => Ok(f64::NAN),
            Value::String(s) if s == "Infinity" => Ok(f64::INFINITY),
            Value::String(s) if s == "-Infinity" => Ok(f64::NEG_INFINITY),
            other => Err(format!("not a number: {other}")),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        encode(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(&Value::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

mod float_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::Value;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| super::float::encode(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Value>::deserialize(d)?
            .iter()
            .map(super::float::decode)
            .collect::<Result<_, _>>()
            .map_err(serde::de::Error::custom)
    }
}
