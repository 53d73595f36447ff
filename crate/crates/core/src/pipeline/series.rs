use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};

use super::{DataError, CAPACITY_TOLERANCE};

/// Sampling interval of every series.
pub const STEP_MINUTES: i64 = 15;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Power readings of one PV station on a regular 15-minute grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSeries {
    pub station_id: String,
    pub capacity_kw: f64,
    pub timestamps: Vec<NaiveDateTime>,
    pub power: Vec<f64>,
    /// `true` where the value was filled in rather than observed.
    pub imputed: Vec<bool>,
}

impl StationSeries {
    pub fn len(&self) -> usize {
        self.power.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power.is_empty()
    }
}

/// Sidecar metadata entry: `{station_id: {"capacity_kw": ...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub capacity_kw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapPolicy {
    #[default]
    Reject,
    ForwardFill,
}

impl FromStr for GapPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reject" => Ok(GapPolicy::Reject),
            "forward-fill" => Ok(GapPolicy::ForwardFill),
            other => Err(format!("unknown gap policy {other:?} (expected reject|forward-fill)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    pub gap_policy: GapPolicy,
}

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    NaiveDateTime::from_str(raw)
        .ok()
        .or_else(|| DateTime::parse_from_rfc3339(raw).ok().map(|t| t.naive_utc()))
}

pub(crate) fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

fn read_metadata(path: &Path) -> Result<BTreeMap<String, StationMeta>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let meta: BTreeMap<String, StationMeta> =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| DataError::Metadata(e.to_string()))?;
    for (id, m) in &meta {
        if !(m.capacity_kw > 0.0 && m.capacity_kw.is_finite()) {
            return Err(DataError::Metadata(format!("station {id}: capacity_kw must be > 0")));
        }
    }
    Ok(meta)
}

/// Reads `timestamp,station_1,...,station_n` rows plus the capacity sidecar.
/// Row numbers in errors are 1-based file lines (the header is line 1).
pub fn ingest_csv(
    csv_path: impl AsRef<Path>,
    metadata_path: impl AsRef<Path>,
    options: CsvOptions,
) -> Result<Vec<StationSeries>, DataError> {
    let csv_path = csv_path.as_ref();
    let meta = read_metadata(metadata_path.as_ref())?;
    let file = File::open(csv_path).map_err(|e| DataError::io(csv_path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));

    let header = reader.headers()?.clone();
    if header.get(0) != Some("timestamp") {
        return Err(DataError::Header("first column must be \"timestamp\"".into()));
    }
    if header.len() < 2 {
        return Err(DataError::Header("no station columns".into()));
    }
    let mut series: Vec<StationSeries> = Vec::new();
    for id in header.iter().skip(1) {
        let m = meta
            .get(id)
            .ok_or_else(|| DataError::Metadata(format!("no capacity for station {id}")))?;
        if series.iter().any(|s| s.station_id == id) {
            return Err(DataError::Header(format!("duplicate station column {id}")));
        }
        series.push(StationSeries {
            station_id: id.to_owned(),
            capacity_kw: m.capacity_kw,
            timestamps: Vec::new(),
            power: Vec::new(),
            imputed: Vec::new(),
        });
    }

    let step = TimeDelta::minutes(STEP_MINUTES);
    let mut previous: Option<NaiveDateTime> = None;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let raw_ts = record.get(0).unwrap_or_default();
        let ts = parse_timestamp(raw_ts).ok_or_else(|| DataError::Timestamp {
            row,
            value: raw_ts.to_owned(),
        })?;
        let mut values = Vec::with_capacity(series.len());
        for (col, s) in series.iter().enumerate() {
            let raw = record.get(col + 1).unwrap_or_default();
            let value: f64 = raw.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| DataError::Value {
                row,
                station: s.station_id.clone(),
                value: raw.to_owned(),
            })?;
            if value < 0.0 {
                return Err(DataError::Negative {
                    station: s.station_id.clone(),
                    timestamp: format_timestamp(&ts),
                    value,
                });
            }
            if value > s.capacity_kw * (1.0 + CAPACITY_TOLERANCE) {
                return Err(DataError::ExceedsCapacity {
                    station: s.station_id.clone(),
                    timestamp: format_timestamp(&ts),
                    value,
                    capacity: s.capacity_kw,
                });
            }
            values.push(value);
        }

        if let Some(prev) = previous {
            let delta = ts - prev;
            if delta <= TimeDelta::zero() {
                return Err(DataError::NonMonotonic {
                    row,
                    timestamp: format_timestamp(&ts),
                });
            }
            let minutes = delta.num_minutes();
            if delta.num_seconds() % (STEP_MINUTES * 60) != 0 {
                return Err(DataError::Spacing { row, minutes });
            }
            let missing = minutes / STEP_MINUTES - 1;
            if missing > 0 {
                match options.gap_policy {
                    GapPolicy::Reject => {
                        return Err(DataError::Gap {
                            row,
                            missing,
                            timestamp: format_timestamp(&ts),
                        })
                    }
                    GapPolicy::ForwardFill => {
                        for m in 1..=missing {
                            for s in series.iter_mut() {
                                let last = *s.power.last().expect("previous row exists");
                                s.timestamps.push(prev + step * m as i32);
                                s.power.push(last);
                                s.imputed.push(true);
                            }
                        }
                    }
                }
            }
        }
        for (s, v) in series.iter_mut().zip(values) {
            s.timestamps.push(ts);
            s.power.push(v);
            s.imputed.push(false);
        }
        previous = Some(ts);
    }
    Ok(series)
}

/// Writes series sharing one timestamp grid as CSV plus capacity sidecar.
/// Values use Rust's shortest round-trip formatting, so ingestion
/// reproduces them exactly.
pub fn write_csv(
    series: &[StationSeries],
    csv_path: impl AsRef<Path>,
    metadata_path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let csv_path = csv_path.as_ref();
    let metadata_path = metadata_path.as_ref();
    let first = series.first().ok_or_else(|| DataError::Config("no series to write".into()))?;
    for s in series {
        if s.timestamps != first.timestamps || s.power.len() != s.timestamps.len() {
            return Err(DataError::Alignment(format!(
                "station {} does not share the grid of {}",
                s.station_id, first.station_id
            )));
        }
    }
    let mut writer = csv::Writer::from_path(csv_path)?;
    let mut header = vec!["timestamp".to_owned()];
    header.extend(series.iter().map(|s| s.station_id.clone()));
    writer.write_record(&header)?;
    for (t, ts) in first.timestamps.iter().enumerate() {
        let mut row = vec![format_timestamp(ts)];
        row.extend(series.iter().map(|s| s.power[t].to_string()));
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| DataError::io(csv_path, e))?;

    let meta: BTreeMap<&str, StationMeta> = series
        .iter()
        .map(|s| (s.station_id.as_str(), StationMeta { capacity_kw: s.capacity_kw }))
        .collect();
    let json = serde_json::to_string_pretty(&meta).map_err(|e| DataError::Metadata(e.to_string()))?;
    std::fs::write(metadata_path, json).map_err(|e| DataError::io(metadata_path, e))
}
