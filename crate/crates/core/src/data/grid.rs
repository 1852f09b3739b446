use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// How blocks of readings are combined when coarsening.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Levels such as congestion length or people counts.
    Mean,
    /// Counts such as taxi pick-ups.
    Sum,
}

impl AggregationMode {
    pub fn reduce(self, values: &[f64]) -> f64 {
        let s: f64 = values.iter().sum();
        match self {
            AggregationMode::Sum => s,
            AggregationMode::Mean => s / values.len() as f64,
        }
    }
}

/// Missing-cell policy applied at ingestion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillRule {
    /// Absent cells are zero (demand counts).
    Zero,
    /// Absent cells repeat the last reading; leading gaps take the first
    /// reading (level series).
    Forward,
}

/// Per-file ingestion options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub modality: String,
    pub fill: FillRule,
    /// Expected interval. Inferred from the timestamps when absent.
    #[serde(default)]
    pub interval_minutes: Option<u32>,
}

/// N locations by T timestamps of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesGrid {
    modality: String,
    location_ids: Vec<String>,
    centroids: Vec<(f64, f64)>,
    start: NaiveDateTime,
    interval_minutes: u32,
    values: Vec<Vec<f64>>,
}

pub fn valid_interval(r: u32) -> bool {
    r > 0 && (60 % r == 0 || r.is_multiple_of(60))
}

impl SeriesGrid {
    pub fn new(
        modality: impl Into<String>,
        location_ids: Vec<String>,
        centroids: Vec<(f64, f64)>,
        start: NaiveDateTime,
        interval_minutes: u32,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if !valid_interval(interval_minutes) {
            return Err(Error::Schema(format!(
                "interval {interval_minutes} min must divide 60 or be a multiple of 60"
            )));
        }
        let n = location_ids.len();
        if n == 0 || values.len() != n || centroids.len() != n {
            return Err(Error::Schema(format!(
                "{n} locations but {} value rows and {} centroids",
                values.len(),
                centroids.len()
            )));
        }
        let t = values[0].len();
        if t == 0 || values.iter().any(|r| r.len() != t) {
            return Err(Error::Schema("value rows must share one nonzero length".into()));
        }
        Ok(Self {
            modality: modality.into(),
            location_ids,
            centroids,
            start,
            interval_minutes,
            values,
        })
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn location_ids(&self) -> &[String] {
        &self.location_ids
    }

    pub fn centroids(&self) -> &[(f64, f64)] {
        &self.centroids
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n]
    }

    pub fn num_locations(&self) -> usize {
        self.location_ids.len()
    }

    pub fn num_steps(&self) -> usize {
        self.values[0].len()
    }

    pub fn timestamp(&self, step: usize) -> NaiveDateTime {
        self.start + Duration::minutes(self.interval_minutes as i64 * step as i64)
    }

    pub fn with_centroids(mut self, centroids: &HashMap<String, (f64, f64)>) -> Result<Self> {
        for (i, id) in self.location_ids.iter().enumerate() {
            self.centroids[i] = *centroids
                .get(id)
                .ok_or_else(|| Error::Schema(format!("no centroid for location {id}")))?;
        }
        Ok(self)
    }

    pub fn with_modality(mut self, modality: impl Into<String>) -> Self {
        self.modality = modality.into();
        self
    }

    /// Steps whose timestamps fall on dates `from ..= to`.
    pub fn slice_dates(&self, from: NaiveDate, to: NaiveDate) -> Result<Self> {
        let steps: Vec<usize> = (0..self.num_steps())
            .filter(|&s| {
                let d = self.timestamp(s).date();
                d >= from && d <= to
            })
            .collect();
        let (Some(&first), Some(&last)) = (steps.first(), steps.last()) else {
            return Err(Error::Config(format!(
                "date range {from}..={to} selects no steps of {}",
                self.modality
            )));
        };
        Ok(Self {
            start: self.timestamp(first),
            values: self
                .values
                .iter()
                .map(|r| r[first..=last].to_vec())
                .collect(),
            ..self.clone()
        })
    }

    /// Steps `from .. to`.
    pub fn slice_steps(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.num_steps() {
            return Err(Error::Config(format!(
                "step range {from}..{to} is empty or exceeds {} steps of {}",
                self.num_steps(),
                self.modality
            )));
        }
        Ok(Self {
            start: self.timestamp(from),
            values: self.values.iter().map(|r| r[from..to].to_vec()).collect(),
            ..self.clone()
        })
    }

    /// Writes the grid in the `location_id,timestamp,value` format.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["location_id", "timestamp", "value"])?;
        for (n, id) in self.location_ids.iter().enumerate() {
            for (s, v) in self.values[n].iter().enumerate() {
                let ts = self.timestamp(s).format(TIMESTAMP_FORMAT).to_string();
                w.write_record([id.as_str(), &ts, &v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_centroids_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["location_id", "lat", "lon"])?;
        for (id, (lat, lon)) in self.location_ids.iter().zip(&self.centroids) {
            w.write_record([id.as_str(), &lat.to_string(), &lon.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    let s = s.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Reads a `location_id,timestamp,value` file into a dense grid.
///
/// Locations keep their order of first appearance. Centroids default to
/// `(0, 0)` until attached with [`SeriesGrid::with_centroids`].
pub fn load_grid_csv(path: &Path, spec: &ColumnSpec) -> Result<SeriesGrid> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column {name}", path.display())))
    };
    let (c_loc, c_ts, c_val) = (col("location_id")?, col("timestamp")?, col("value")?);

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut readings: Vec<Vec<(NaiveDateTime, f64)>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let bad = |message: String| Error::Ingestion {
            path: path.to_path_buf(),
            line,
            message,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |c: usize| rec.get(c).ok_or_else(|| bad("missing field".into()));
        let loc = field(c_loc)?.to_string();
        let ts_raw = field(c_ts)?;
        let ts = parse_timestamp(ts_raw).ok_or_else(|| bad(format!("bad timestamp {ts_raw:?}")))?;
        let val_raw = field(c_val)?;
        let val: f64 = val_raw
            .parse()
            .map_err(|_| bad(format!("bad value {val_raw:?}")))?;
        if !val.is_finite() || val < 0.0 {
            return Err(bad(format!("value {val} must be finite and nonnegative")));
        }
        let n = *index.entry(loc.clone()).or_insert_with(|| {
            order.push(loc.clone());
            readings.push(Vec::new());
            order.len() - 1
        });
        if let Some((prev, _)) = readings[n].last() {
            if ts <= *prev {
                return Err(bad(format!("timestamps for {loc} are not increasing")));
            }
        }
        readings[n].push((ts, val));
    }
    if order.is_empty() {
        return Err(Error::Schema(format!("{}: no rows", path.display())));
    }

    let start = readings.iter().map(|r| r[0].0).min().unwrap();
    let end = readings.iter().map(|r| r.last().unwrap().0).max().unwrap();
    let mut step = 0i64;
    for r in &readings {
        for (ts, _) in r {
            step = gcd(step, (*ts - start).num_minutes());
        }
    }
    let interval = match (spec.interval_minutes, step) {
        (Some(r), 0) => r as i64,
        (Some(r), s) if s % r as i64 == 0 => r as i64,
        (Some(r), s) => {
            return Err(Error::Schema(format!(
                "{}: timestamps are spaced {s} min, inconsistent with interval {r}",
                path.display()
            )))
        }
        (None, 0) => {
            return Err(Error::Schema(format!(
                "{}: cannot infer interval from a single timestamp",
                path.display()
            )))
        }
        (None, s) => s,
    };
    let t = ((end - start).num_minutes() / interval) as usize + 1;

    let mut values = Vec::with_capacity(order.len());
    for r in &readings {
        let mut row = vec![f64::NAN; t];
        for (ts, v) in r {
            row[((*ts - start).num_minutes() / interval) as usize] = *v;
        }
        match spec.fill {
            FillRule::Zero => row.iter_mut().filter(|v| v.is_nan()).for_each(|v| *v = 0.0),
            FillRule::Forward => {
                let mut last = r[0].1;
                for v in row.iter_mut() {
                    if v.is_nan() {
                        *v = last;
                    } else {
                        last = *v;
                    }
                }
            }
        }
        values.push(row);
    }
    let n = order.len();
    SeriesGrid::new(
        spec.modality.clone(),
        order,
        vec![(0.0, 0.0); n],
        start,
        interval as u32,
        values,
    )
}

/// Reads the `location_id,lat,lon` sidecar.
pub fn load_centroids(path: &Path) -> Result<HashMap<String, (f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let bad = |message: String| Error::Ingestion {
            path: path.to_path_buf(),
            line: i + 2,
            message,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() < 3 {
            return Err(bad("expected location_id,lat,lon".into()));
        }
        let lat: f64 = rec[1].parse().map_err(|_| bad(format!("bad lat {:?}", &rec[1])))?;
        let lon: f64 = rec[2].parse().map_err(|_| bad(format!("bad lon {:?}", &rec[2])))?;
        out.insert(rec[0].to_string(), (lat, lon));
    }
    Ok(out)
}

/// Reads one ISO date per line; blank lines and `#` comments are skipped.
pub fn load_holidays(path: &Path) -> Result<super::HolidaySet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut set = super::HolidaySet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let d = NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| Error::Ingestion {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("bad date {s:?}"),
        })?;
        set.insert(d);
    }
    Ok(set)
}

pub fn write_holidays(path: &Path, holidays: &super::HolidaySet) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut days: Vec<_> = holidays.iter().collect();
    days.sort();
    for d in days {
        writeln!(f, "{d}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
