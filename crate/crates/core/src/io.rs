//! CSV readers and writers for price paths, traces, Riccati solutions and
//! histograms. Floats are written with 17 significant digits so that every
//! value survives a round trip exactly.

use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MarketPath, TimeGrid};
use crate::riccati::{OdeState, RiccatiSolution, SolveStats};
use crate::simulation::{ExecutionTrace, Histogram};

/// Lossless decimal form of a double.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, line: u64, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("line {line}: column {col}: cannot parse '{s}' as a number")))
}

/// How the time column of a price file was interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeFormat {
    /// Numbers, taken as days.
    FractionalDays,
    /// ISO-8601 timestamps, converted to calendar days since the first row.
    Iso8601,
    /// Timestamps ignored; row `i` is at `i / bars_per_day` trading days.
    BarIndex,
}

/// Options for [`read_market_path`].
#[derive(Debug, Clone, Copy, Default)]
pub struct PathReadOptions {
    /// When set, the time column is replaced by trading time
    /// `row / bars_per_day`, which removes overnight gaps.
    pub bars_per_day: Option<f64>,
}

fn parse_iso(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// Reads `time,<name1>,...,<named>` rows. The time format is detected from
/// the first data row.
pub fn read_market_path<R: Read>(reader: R, opts: PathReadOptions) -> Result<(MarketPath, TimeFormat)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Parse("line 1: expected a time column and at least one price column".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let d = names.len();
    let mut raw_times: Vec<String> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != d + 1 {
            return Err(Error::Parse(format!(
                "line {line}: expected {} fields, found {}",
                d + 1,
                rec.len()
            )));
        }
        raw_times.push(rec[0].to_string());
        for (j, name) in names.iter().enumerate() {
            values.push(parse_f64(&rec[j + 1], line, name)?);
        }
    }
    if raw_times.is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    let n = raw_times.len();
    let (times, format) = if let Some(bpd) = opts.bars_per_day {
        if !(bpd > 0.0) {
            return Err(Error::validation("bars per day must be positive"));
        }
        ((0..n).map(|i| i as f64 / bpd).collect(), TimeFormat::BarIndex)
    } else if raw_times[0].trim().parse::<f64>().is_ok() {
        let t = raw_times
            .iter()
            .enumerate()
            .map(|(i, s)| parse_f64(s, i as u64 + 2, "time"))
            .collect::<Result<Vec<_>>>()?;
        (t, TimeFormat::FractionalDays)
    } else {
        let stamps = raw_times
            .iter()
            .enumerate()
            .map(|(i, s)| {
                parse_iso(s).ok_or_else(|| Error::Parse(format!("line {}: unrecognised timestamp '{s}'", i + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        let t0 = stamps[0];
        let t = stamps
            .iter()
            .map(|s| (*s - t0).num_microseconds().unwrap_or(i64::MAX) as f64 / 86_400e6)
            .collect();
        (t, TimeFormat::Iso8601)
    };
    let prices = DMatrix::from_row_slice(n, d, &values);
    Ok((MarketPath::new(times, prices, names)?, format))
}

pub fn write_market_path<W: Write>(w: W, path: &MarketPath) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["time".to_string()];
    header.extend(path.names.iter().cloned());
    wr.write_record(&header)?;
    for (k, t) in path.times.iter().enumerate() {
        let mut row = vec![fmt_f64(*t)];
        row.extend(path.prices.row(k).iter().map(|&x| fmt_f64(x)));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

fn indexed(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("{prefix}_{i}")).collect()
}

/// Columns `t, q_i, v_i, S_i, Stilde_i, X, pnl, X_fund`; the rate is blank
/// on the last row.
pub fn write_trace<W: Write>(w: W, tr: &ExecutionTrace) -> Result<()> {
    let d = tr.q.ncols();
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    for p in ["q", "v", "S", "Stilde"] {
        header.extend(indexed(p, d));
    }
    header.extend(["X", "pnl", "X_fund"].map(String::from));
    wr.write_record(&header)?;
    let n = tr.steps();
    for k in 0..=n {
        let mut row = vec![fmt_f64(tr.times[k])];
        row.extend(tr.q.row(k).iter().map(|&x| fmt_f64(x)));
        if k < n {
            row.extend(tr.v.row(k).iter().map(|&x| fmt_f64(x)));
        } else {
            row.extend(std::iter::repeat_n(String::new(), d));
        }
        row.extend(tr.s.row(k).iter().map(|&x| fmt_f64(x)));
        row.extend(tr.s_tilde.row(k).iter().map(|&x| fmt_f64(x)));
        row.push(fmt_f64(tr.x[k]));
        row.push(fmt_f64(tr.pnl[k]));
        row.push(fmt_f64(tr.x_fundamental[k]));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(r: R) -> Result<ExecutionTrace> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let cols = header.len();
    if cols < 4 || (cols - 4) % 4 != 0 {
        return Err(Error::Parse(format!("line 1: unexpected trace header with {cols} columns")));
    }
    let d = (cols - 4) / 4;
    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?);
    }
    let n1 = rows.len();
    if n1 < 2 {
        return Err(Error::Parse("trace needs at least two rows".into()));
    }
    let mut tr = ExecutionTrace {
        times: vec![0.0; n1],
        q: DMatrix::zeros(n1, d),
        v: DMatrix::zeros(n1 - 1, d),
        s: DMatrix::zeros(n1, d),
        s_tilde: DMatrix::zeros(n1, d),
        x: vec![0.0; n1],
        x_fundamental: vec![0.0; n1],
        pnl: vec![0.0; n1],
    };
    for (k, rec) in rows.iter().enumerate() {
        let line = rec.position().map_or(0, |p| p.line());
        let get = |c: usize| parse_f64(&rec[c], line, &header[c]);
        tr.times[k] = get(0)?;
        for i in 0..d {
            tr.q[(k, i)] = get(1 + i)?;
            if k + 1 < n1 {
                tr.v[(k, i)] = get(1 + d + i)?;
            }
            tr.s[(k, i)] = get(1 + 2 * d + i)?;
            tr.s_tilde[(k, i)] = get(1 + 3 * d + i)?;
        }
        tr.x[k] = get(1 + 4 * d)?;
        tr.pnl[k] = get(2 + 4 * d)?;
        tr.x_fundamental[k] = get(3 + 4 * d)?;
    }
    Ok(tr)
}

/// One row per node: `t`, `A_ij`, `B_ij`, `C_ij` (row-major), `D_i`, `E_i`, `F`.
pub fn write_riccati<W: Write>(w: W, sol: &RiccatiSolution) -> Result<()> {
    let d = sol.dim();
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    for m in ["A", "B", "C"] {
        for i in 1..=d {
            for j in 1..=d {
                header.push(format!("{m}_{i}{j}"));
            }
        }
    }
    header.extend(indexed("D", d));
    header.extend(indexed("E", d));
    header.push("F".into());
    wr.write_record(&header)?;
    for (k, s) in sol.states.iter().enumerate() {
        let mut row = vec![fmt_f64(sol.grid.time(k))];
        for m in [&s.a, &s.b, &s.c] {
            for i in 0..d {
                for j in 0..d {
                    row.push(fmt_f64(m[(i, j)]));
                }
            }
        }
        row.extend(s.d.iter().map(|&x| fmt_f64(x)));
        row.extend(s.e.iter().map(|&x| fmt_f64(x)));
        row.push(fmt_f64(s.f));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a solution written by [`write_riccati`]. The bound certificate is
/// not stored in the CSV and is left unset.
pub fn read_riccati<R: Read>(r: R) -> Result<RiccatiSolution> {
    let mut rdr = csv::Reader::from_reader(r);
    let cols = rdr.headers()?.len();
    // 1 + 3d² + 2d + 1 columns
    let d = (1..=10)
        .find(|&d| 3 * d * d + 2 * d + 2 == cols)
        .ok_or_else(|| Error::Parse(format!("line 1: {cols} columns do not match a Riccati dump")))?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals = rec
            .iter()
            .map(|s| parse_f64(s, line, "riccati"))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != cols {
            return Err(Error::Parse(format!("line {line}: expected {cols} fields")));
        }
        times.push(vals[0]);
        let mat = |off: usize| DMatrix::from_row_slice(d, d, &vals[off..off + d * d]);
        let base = 1 + 3 * d * d;
        states.push(OdeState {
            a: mat(1),
            b: mat(1 + d * d),
            c: mat(1 + 2 * d * d),
            d: DVector::from_column_slice(&vals[base..base + d]),
            e: DVector::from_column_slice(&vals[base + d..base + 2 * d]),
            f: vals[base + 2 * d],
        });
    }
    if times.len() < 3 {
        return Err(Error::Parse("Riccati dump needs at least three nodes".into()));
    }
    if times[0] != 0.0 {
        return Err(Error::Parse("Riccati dump must start at t = 0".into()));
    }
    let grid = TimeGrid::new(times[times.len() - 1], times.len() - 1)?;
    if let Some(k) = (0..times.len()).find(|&k| (times[k] - grid.time(k)).abs() > 1e-12 * grid.horizon()) {
        return Err(Error::Parse(format!("Riccati dump node {k} is off the uniform grid")));
    }
    Ok(RiccatiSolution {
        grid,
        states,
        bounds_ok: false,
        bounds_margin: f64::NAN,
        bounds_note: Some("not checked".into()),
        stats: SolveStats::default(),
    })
}

pub fn write_histogram<W: Write>(w: W, h: &Histogram) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["bin_left", "bin_right", "count"])?;
    for (i, c) in h.counts.iter().enumerate() {
        wr.write_record([fmt_f64(h.edges[i]), fmt_f64(h.edges[i + 1]), c.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_is_lossless() {
        for x in [0.1, 1.0 / 3.0, 79887.0, -2.5e-300, 123456789.123456789, f64::MAX] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn reads_fractional_and_iso_times() {
        let csv = "time,A,B\n0,1,2\n0.5,1.5,2.5\n1.0,2,3\n";
        let (p, f) = read_market_path(csv.as_bytes(), PathReadOptions::default()).unwrap();
        assert_eq!(f, TimeFormat::FractionalDays);
        assert_eq!(p.names, vec!["A", "B"]);
        assert_eq!(p.prices[(2, 1)], 3.0);

        let csv = "time,X\n2024-01-02T09:00:00,1\n2024-01-02T09:01:00,2\n2024-01-02T09:02:00,3\n";
        let (p, f) = read_market_path(csv.as_bytes(), PathReadOptions::default()).unwrap();
        assert_eq!(f, TimeFormat::Iso8601);
        assert!((p.times[2] - 2.0 / 1440.0).abs() < 1e-15);

        let (p, f) = read_market_path(csv.as_bytes(), PathReadOptions { bars_per_day: Some(840.0) }).unwrap();
        assert_eq!(f, TimeFormat::BarIndex);
        assert_eq!(p.times[1], 1.0 / 840.0);
    }

    #[test]
    fn malformed_row_cites_line() {
        let csv = "time,A\n0,1\n1,abc\n";
        let err = read_market_path(csv.as_bytes(), PathReadOptions::default()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let csv = "time,A\n0,1\n1,2,3\n";
        let err = read_market_path(csv.as_bytes(), PathReadOptions::default()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
