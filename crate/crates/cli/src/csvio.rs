//! Trip CSV: `trip_id,t,speed_mph,yaw_deg_s`, rows grouped by trip and
//! time-sorted within a trip.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RATE_HZ: f64 = 10.0;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("trip {trip_id}: time is not strictly increasing at line {line}")]
    NonMonotoneTime { trip_id: String, line: u64 },
    #[error("trip {trip_id}: rows are not contiguous (seen again at line {line})")]
    SplitTrip { trip_id: String, line: u64 },
    #[error("trip {trip_id}: {message}")]
    BadTrip { trip_id: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Row {
    trip_id: String,
    t: f64,
    speed_mph: f64,
    yaw_deg_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub id: String,
    pub t0: f64,
    pub rate_hz: f64,
    pub speed_mph: Vec<f64>,
    pub yaw_deg_s: Vec<f64>,
}

impl Trip {
    pub fn len(&self) -> usize {
        self.speed_mph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speed_mph.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 / self.rate_hz
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

struct Builder {
    id: String,
    times: Vec<f64>,
    speed: Vec<f64>,
    yaw: Vec<f64>,
}

impl Builder {
    fn finish(self) -> Result<Trip, CsvError> {
        let deltas: Vec<f64> = self.times.windows(2).map(|w| w[1] - w[0]).collect();
        let rate_hz = match median(deltas) {
            // snap away float noise from decimal timestamps
            Some(dt) => (1e6 / dt).round() / 1e6,
            None => DEFAULT_RATE_HZ,
        };
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(CsvError::BadTrip { trip_id: self.id, message: "cannot infer sample rate".into() });
        }
        Ok(Trip { id: self.id, t0: self.times[0], rate_hz, speed_mph: self.speed, yaw_deg_s: self.yaw })
    }
}

pub fn read_trips(reader: impl Read) -> Result<Vec<Trip>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut trips = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut current: Option<Builder> = None;
    let headers = rdr.headers()?.clone();
    for result in rdr.records() {
        let record = result.map_err(|e| CsvError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record
            .deserialize(Some(&headers))
            .map_err(|e| CsvError::Malformed { line, message: e.to_string() })?;
        for (name, v) in [("t", row.t), ("speed_mph", row.speed_mph), ("yaw_deg_s", row.yaw_deg_s)] {
            if !v.is_finite() {
                return Err(CsvError::Malformed { line, message: format!("{name} is not finite") });
            }
        }
        if row.speed_mph < 0.0 {
            return Err(CsvError::Malformed { line, message: "negative speed".into() });
        }
        match current.as_mut() {
            Some(b) if b.id == row.trip_id => {
                if row.t <= *b.times.last().expect("nonempty") {
                    return Err(CsvError::NonMonotoneTime { trip_id: row.trip_id, line });
                }
            }
            _ => {
                if seen.contains(&row.trip_id) {
                    return Err(CsvError::SplitTrip { trip_id: row.trip_id, line });
                }
                if let Some(done) = current.take() {
                    trips.push(done.finish()?);
                }
                seen.insert(row.trip_id.clone());
                current = Some(Builder { id: row.trip_id.clone(), times: vec![], speed: vec![], yaw: vec![] });
            }
        }
        let b = current.as_mut().expect("open trip");
        b.times.push(row.t);
        b.speed.push(row.speed_mph);
        b.yaw.push(row.yaw_deg_s);
    }
    if let Some(done) = current.take() {
        trips.push(done.finish()?);
    }
    Ok(trips)
}

/// Values go out at single precision, matching archive storage.
pub fn format_value(v: f64) -> String {
    (v as f32).to_string()
}

pub fn write_trips(writer: impl Write, trips: &[Trip]) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["trip_id", "t", "speed_mph", "yaw_deg_s"])?;
    for trip in trips {
        for k in 0..trip.len() {
            w.write_record([
                trip.id.as_str(),
                &trip.time(k).to_string(),
                &format_value(trip.speed_mph[k]),
                &format_value(trip.yaw_deg_s[k]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_infers_rate() {
        let text = "trip_id,t,speed_mph,yaw_deg_s\na,0,10,1\na,0.1,11,2\na,0.2,12,3\nb,5,1,0\n";
        let trips = read_trips(text.as_bytes()).unwrap();
        assert_eq!(trips.len(), 2);
        assert!((trips[0].rate_hz - 10.0).abs() < 1e-9);
        assert_eq!(trips[0].speed_mph, vec![10.0, 11.0, 12.0]);
        assert_eq!(trips[1].rate_hz, DEFAULT_RATE_HZ);
        assert_eq!(trips[1].t0, 5.0);
    }

    #[test]
    fn reports_line_of_bad_row() {
        let text = "trip_id,t,speed_mph,yaw_deg_s\na,0,10,1\na,0.1,fast,2\n";
        let err = read_trips(text.as_bytes()).unwrap_err();
        assert!(matches!(err, CsvError::Malformed { line: 3, .. }), "{err}");
    }

    #[test]
    fn rejects_non_monotone_time() {
        let text = "trip_id,t,speed_mph,yaw_deg_s\nx,0,10,1\nx,0.1,11,2\nx,0.1,12,3\n";
        match read_trips(text.as_bytes()).unwrap_err() {
            CsvError::NonMonotoneTime { trip_id, line } => {
                assert_eq!(trip_id, "x");
                assert_eq!(line, 4);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn rejects_split_trip() {
        let text = "trip_id,t,speed_mph,yaw_deg_s\na,0,1,1\nb,0,1,1\na,1,1,1\n";
        assert!(matches!(read_trips(text.as_bytes()).unwrap_err(), CsvError::SplitTrip { .. }));
    }

    #[test]
    fn round_trips_through_text() {
        let text = "trip_id,t,speed_mph,yaw_deg_s\na,0,10.5,-1.25\na,0.1,11.125,2\n";
        let trips = read_trips(text.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_trips(&mut out, &trips).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }
}
