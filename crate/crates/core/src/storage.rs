//! Line-delimited record store and CSV ingestion.
//!
//! A store file (`*.crb.jsonl`) holds one record per line. Every line is a JSON
//! object with exactly the keys `domain_category`, `item_id`, `start`, `end`,
//! `freq` and `target`, in that order. Reals are written as the shortest
//! decimal that parses back to the same `f64`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{self, RawSeries, SeriesWindow};

pub const STORE_EXTENSION: &str = "crb.jsonl";

pub const RECORD_KEYS: [&str; 6] = ["domain_category", "item_id", "start", "end", "freq", "target"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreRecord {
    pub domain_category: String,
    pub item_id: String,
    pub start: String,
    pub end: String,
    pub freq: String,
    pub target: Vec<f64>,
}

impl StoreRecord {
    /// Builds a record, deriving `end` from `start`, `freq` and the length of
    /// `target` when the frequency is regular.
    pub fn new(
        domain_category: impl Into<String>,
        item_id: impl Into<String>,
        start: impl Into<String>,
        freq: impl Into<String>,
        target: Vec<f64>,
    ) -> Self {
        let start = start.into();
        let freq = freq.into();
        let end = compute_end(&start, &freq, target.len()).unwrap_or_else(|| start.clone());
        Self {
            domain_category: domain_category.into(),
            item_id: item_id.into(),
            start,
            end,
            freq,
            target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain_category.is_empty() || self.item_id.is_empty() {
            return Err(Error::InvalidRecord(
                "domain_category and item_id must be non-empty".into(),
            ));
        }
        if self.target.is_empty() {
            return Err(Error::InvalidRecord(format!(
                "{} has an empty target",
                self.item_id
            )));
        }
        if self.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord(format!(
                "{} has non-finite target values",
                self.item_id
            )));
        }
        Ok(())
    }

    pub fn to_series(&self) -> Result<RawSeries> {
        RawSeries::new(
            self.item_id.clone(),
            self.domain_category.clone(),
            self.start.clone(),
            self.freq.clone(),
            vec![self.target.iter().copied().map(Some).collect()],
        )
    }

    pub fn windows(&self, window: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
        series::segment_windows(&self.to_series()?, window, stride)
    }
}

fn check_unique(records: &[StoreRecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert((r.domain_category.as_str(), r.item_id.as_str())) {
            return Err(Error::DuplicateRecord {
                domain: r.domain_category.clone(),
                item_id: r.item_id.clone(),
            });
        }
    }
    Ok(())
}

pub fn write_store(records: &[StoreRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for r in records {
        r.validate()?;
    }
    check_unique(records)?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidRecord(e.to_string()))?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<Vec<StoreRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let object = value
            .as_object()
            .ok_or_else(|| malformed("not a JSON object".into()))?;
        for key in RECORD_KEYS {
            if !object.contains_key(key) {
                return Err(Error::MissingKey {
                    path: path.to_path_buf(),
                    line: line_no,
                    key,
                });
            }
        }
        let record: StoreRecord =
            serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        record.validate().map_err(|e| malformed(e.to_string()))?;
        records.push(record);
    }
    check_unique(&records)?;
    Ok(records)
}

const TIMESTAMP_HEADERS: [&str; 6] = ["date", "time", "timestamp", "datetime", "ds", "start"];

fn parse_cell(cell: &str) -> std::result::Result<Option<f64>, ()> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    cell.parse::<f64>().map(Some).map_err(|_| ())
}

/// Reads a CSV with a header row into one record per numeric column.
///
/// The first column is treated as a timestamp when its header is a common
/// timestamp name or its first cell is not numeric. Empty and `NaN` cells are
/// missing and get linearly interpolated.
pub fn ingest_csv(path: impl AsRef<Path>, domain: &str, freq: &str) -> Result<Vec<StoreRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let rows: Vec<csv::StringRecord> = reader
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    if rows.is_empty() {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: "no data rows".into(),
        });
    }

    let first_header = headers.get(0).unwrap_or("").trim().to_ascii_lowercase();
    let has_timestamp = TIMESTAMP_HEADERS.contains(&first_header.as_str())
        || rows[0].get(0).map_or(false, |c| parse_cell(c).is_err());
    let first_data_col = usize::from(has_timestamp);
    if headers.len() <= first_data_col {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: "no numeric columns".into(),
        });
    }

    let mut data_rows = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let mut values = Vec::with_capacity(headers.len() - first_data_col);
        for c in first_data_col..headers.len() {
            let cell = row.get(c).unwrap_or("");
            let v = parse_cell(cell).map_err(|_| Error::NonNumericCell {
                path: path.to_path_buf(),
                // 1-based, counting the header as row 1
                row: r + 2,
                column: c + 1,
                cell: cell.to_string(),
            })?;
            values.push(v);
        }
        data_rows.push(values);
    }

    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.split('.').next().unwrap_or(n))
        .filter(|n| !n.is_empty())
        .unwrap_or("series");
    let (start, end) = if has_timestamp {
        let first = rows[0].get(0).unwrap_or("-").trim().to_string();
        let last = rows[rows.len() - 1].get(0).unwrap_or("-").trim().to_string();
        (first, Some(last))
    } else {
        ("-".to_string(), None)
    };

    let raw = RawSeries::from_rows(stem, domain, start.clone(), freq, &data_rows)?;
    series::split_channels(&raw)
        .into_iter()
        .map(|channel| {
            let values = series::interpolate_missing(channel.channel(0))?;
            let mut record = StoreRecord::new(domain, channel.item_id, start.clone(), freq, values);
            if let Some(end) = &end {
                record.end = end.clone();
            }
            Ok(record)
        })
        .collect()
}

/// Parses a sampling interval such as `Daily`, `Hourly`, `30 Min` or
/// `0.004 Sec`. Returns `None` for `-` and calendar-irregular intervals.
pub fn parse_freq(freq: &str) -> Option<TimeDelta> {
    let f = freq.trim().to_ascii_lowercase();
    match f.as_str() {
        "daily" | "day" | "d" | "1d" => return Some(TimeDelta::days(1)),
        "hourly" | "hour" | "h" | "1h" => return Some(TimeDelta::hours(1)),
        "weekly" | "week" | "w" | "1w" => return Some(TimeDelta::weeks(1)),
        "minutely" => return Some(TimeDelta::minutes(1)),
        _ => {}
    }
    let split = f
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(f.len());
    let (num, unit) = f.split_at(split);
    let num: f64 = num.trim().parse().ok()?;
    if !(num.is_finite() && num > 0.0) {
        return None;
    }
    let seconds_per_unit = match unit.trim() {
        "ms" | "msec" | "millisecond" | "milliseconds" => 1e-3,
        "s" | "sec" | "secs" | "second" | "seconds" => 1.0,
        "min" | "mins" | "minute" | "minutes" | "t" => 60.0,
        "h" | "hour" | "hours" => 3600.0,
        "d" | "day" | "days" => 86400.0,
        "w" | "week" | "weeks" => 604_800.0,
        _ => return None,
    };
    let nanos = (num * seconds_per_unit * 1e9).round();
    if nanos < 1.0 || nanos > i64::MAX as f64 {
        return None;
    }
    Some(TimeDelta::nanoseconds(nanos as i64))
}

const DATE_FORMATS: [&str; 3] = ["%Y%m%d", "%Y-%m-%d", "%Y/%m/%d"];
const DATETIME_FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M",
    "%Y/%m/%d %H:%M:%S%.f",
];

/// `start + (n - 1) * freq`, formatted like `start`. `None` when either the
/// timestamp or the interval cannot be parsed.
pub fn compute_end(start: &str, freq: &str, n: usize) -> Option<String> {
    let step = parse_freq(freq)?;
    let steps = i32::try_from(n.checked_sub(1)?).ok()?;
    let span = step.checked_mul(steps)?;
    let start = start.trim();

    for fmt in DATE_FORMATS {
        if let Ok(date) = NaiveDate::parse_from_str(start, fmt) {
            let end = date.and_hms_opt(0, 0, 0)?.checked_add_signed(span)?;
            return Some(if span.subsec_nanos() == 0 && span.num_seconds() % 86400 == 0 {
                end.format(fmt).to_string()
            } else {
                end.format("%Y-%m-%d %H:%M:%S%.f").to_string()
            });
        }
    }
    for fmt in DATETIME_FORMATS {
        if let Ok(ts) = NaiveDateTime::parse_from_str(start, fmt) {
            let end = ts.checked_add_signed(span)?;
            let out_fmt = if fmt.ends_with("%M") && span.num_seconds() % 60 == 0 && span.subsec_nanos() == 0 {
                fmt
            } else if fmt.contains('T') {
                "%Y-%m-%dT%H:%M:%S%.f"
            } else {
                "%Y-%m-%d %H:%M:%S%.f"
            };
            return Some(end.format(out_fmt).to_string());
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn table_record() -> StoreRecord {
        StoreRecord::new(
            "Nature",
            "us_births_dataset_0_0",
            "20000101",
            "Daily",
            vec![9083.0, 8006.0, 11136.0],
        )
    }

    #[test]
    fn empty_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.crb.jsonl");
        write_store(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert!(read_store(&path).unwrap().is_empty());
    }

    #[test]
    fn single_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.crb.jsonl");
        let rec = table_record();
        write_store(std::slice::from_ref(&rec), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"domain_category\":\"Nature\",\"item_id\":\"us_births_dataset_0_0\",\"start\":\"20000101\",\
             \"end\":\"20000103\",\"freq\":\"Daily\",\"target\":[9083.0,8006.0,11136.0]}\n"
        );
        assert_eq!(read_store(&path).unwrap(), vec![rec]);
    }

    #[test]
    fn missing_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.crb.jsonl");
        let good = serde_json::to_string(&table_record()).unwrap();
        let bad = r#"{"domain_category":"Web","item_id":"a","start":"-","end":"-","target":[1.0]}"#;
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match read_store(&path) {
            Err(Error::MissingKey { line, key, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(key, "freq");
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = read_store(&path).unwrap_err().to_string();
        assert!(msg.contains("freq") && msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.crb.jsonl");
        fs::write(&path, "{not json\n").unwrap();
        assert!(matches!(
            read_store(&path),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
    }

    #[test]
    fn irregular_freq_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("irr.crb.jsonl");
        let rec = StoreRecord::new("Health", "PigCVP_0", "-", "-", vec![1.0, 2.0]);
        assert_eq!(rec.end, "-");
        write_store(std::slice::from_ref(&rec), &path).unwrap();
        assert_eq!(read_store(&path).unwrap()[0].freq, "-");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.crb.jsonl");
        let rec = table_record();
        assert!(matches!(
            write_store(&[rec.clone(), rec], &path),
            Err(Error::DuplicateRecord { .. })
        ));
    }

    #[test]
    fn end_from_regular_freq() {
        // 2000 is a leap year: 366 days to 2001-01-01, then 146 more to May 27.
        assert_eq!(compute_end("20000101", "Daily", 513).as_deref(), Some("20010527"));
        assert_eq!(
            compute_end("2020-01-01 00:00:00", "30 Min", 5).as_deref(),
            Some("2020-01-01 02:00:00")
        );
        assert_eq!(
            compute_end("2020-01-01 00:00:00", "0.004 Sec", 3).as_deref(),
            Some("2020-01-01 00:00:00.008")
        );
        assert_eq!(compute_end("20000101", "-", 10), None);
        assert_eq!(compute_end("-", "Daily", 10), None);
    }

    #[test]
    fn ingest_two_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meter.csv");
        let mut text = String::from("a,b\n");
        for i in 0..10 {
            text.push_str(&format!("{},{}\n", i, 10 * i));
        }
        fs::write(&path, text).unwrap();
        let recs = ingest_csv(&path, "Energy", "Hourly").unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.target.len() == 10));
        assert_eq!(recs[0].item_id, "meter_0");
        assert_eq!(recs[1].item_id, "meter_1");
        assert_eq!(recs[1].target[3], 30.0);
    }

    #[test]
    fn ingest_interpolates_empty_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gap.csv");
        fs::write(&path, "v,u\n1,0\n,0\n3,0\nNaN,0\n7,0\n").unwrap();
        let recs = ingest_csv(&path, "IoT", "-").unwrap();
        assert_eq!(recs[0].target, vec![1.0, 2.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn ingest_captures_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ts.csv");
        fs::write(
            &path,
            "date,x\n2021-03-01,1.5\n2021-03-02,2.5\n2021-03-03,3.5\n",
        )
        .unwrap();
        let recs = ingest_csv(&path, "Web", "Daily").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].start, "2021-03-01");
        assert_eq!(recs[0].end, "2021-03-03");
        assert_eq!(recs[0].target, vec![1.5, 2.5, 3.5]);
    }

    #[test]
    fn ingest_rejects_non_numeric() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "a,b\n1,2\n3,oops\n").unwrap();
        match ingest_csv(&path, "Web", "-") {
            Err(Error::NonNumericCell { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = ingest_csv("/nonexistent/x.csv", "Web", "-").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.csv"));
    }
}
