use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{validate_series, DailyRecord, DataError};

pub const CSV_HEADER: [&str; 4] = ["date", "rho_s", "sic", "albedo"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a `date,rho_s,sic,albedo` series and validates it.
pub fn read_csv(path: &Path) -> Result<Vec<DailyRecord>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_records(file)
}

pub(crate) fn read_records(input: impl std::io::Read) -> Result<Vec<DailyRecord>, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let expected = CSV_HEADER.join(",");
    let header = reader.headers()?.clone();
    if let Some(column) = CSV_HEADER.iter().find(|c| !header.iter().any(|h| h == **c)) {
        return Err(DataError::MissingColumn {
            column: column.to_string(),
            expected,
        });
    }
    if header.iter().ne(CSV_HEADER) {
        return Err(DataError::HeaderMismatch {
            expected,
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |k: usize| row.get(k).unwrap_or("");
        let number = |k: usize, name: &'static str| -> Result<f64, DataError> {
            let raw = field(k);
            raw.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    line,
                    field: name,
                    value: raw.to_string(),
                })
        };
        let date = NaiveDate::parse_from_str(field(0).trim(), "%Y-%m-%d").map_err(|_| {
            DataError::Parse {
                line,
                field: "date",
                value: field(0).to_string(),
            }
        })?;
        let record = DailyRecord {
            date,
            rho_s: number(1, "rho_s")?,
            sic: number(2, "sic")?,
            albedo: number(3, "albedo")?,
        };
        validate_series(std::slice::from_ref(&record), line)?;
        if let Some(prev) = records.last() {
            validate_series(&[*prev, record], line - 1)?;
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes a series with the fixed header and shortest round-trip decimals.
pub fn write_csv(path: &Path, records: &[DailyRecord]) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_records(&mut out, records).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub(crate) fn write_records(out: &mut impl Write, records: &[DailyRecord]) -> std::io::Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{}",
            r.date.format("%Y-%m-%d"),
            r.rho_s,
            r.sic,
            r.albedo
        )?;
    }
    Ok(())
}
