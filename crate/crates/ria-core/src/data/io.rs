//! Line-delimited log files: one JSON header, then one record per line.
//! Paths ending in `.gz` read and write the gzip-compressed variant.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ImpressionRecord;
use crate::error::{Result, RiaError};

pub const SCHEMA_NAME: &str = "ria-impression-log";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn write_impressions<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a ImpressionRecord>,
) -> Result<usize> {
    let file = File::create(path)?;
    let mut out: Box<dyn Write> = if is_gz(path) {
        Box::new(BufWriter::new(flate2::write::GzEncoder::new(
            file,
            flate2::Compression::default(),
        )))
    } else {
        Box::new(BufWriter::new(file))
    };
    let header = Header {
        schema: SCHEMA_NAME.to_string(),
        version: SCHEMA_VERSION,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    let mut count = 0;
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| RiaError::Parse {
            line: count + 2,
            detail: e.to_string(),
        })?;
        writeln!(out, "{line}")?;
        count += 1;
    }
    out.flush()?;
    Ok(count)
}

/// Load and validate a full log. Errors carry the 1-based line number of the
/// offending line; invariant violations name the record and rule.
pub fn load_impressions(path: &Path, expected_version: u32) -> Result<Vec<ImpressionRecord>> {
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if is_gz(path) {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut lines = BufReader::new(reader).lines();

    let header_line = lines
        .next()
        .ok_or_else(|| RiaError::Parse {
            line: 1,
            detail: "empty file, expected schema header".into(),
        })??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| RiaError::Parse {
        line: 1,
        detail: format!("bad header: {e}"),
    })?;
    if header.schema != SCHEMA_NAME || header.version != expected_version {
        return Err(RiaError::Parse {
            line: 1,
            detail: format!(
                "schema `{}` v{} does not match expected `{SCHEMA_NAME}` v{expected_version}",
                header.schema, header.version
            ),
        });
    }

    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImpressionRecord =
            serde_json::from_str(&line).map_err(|e| RiaError::Parse {
                line: lineno,
                detail: e.to_string(),
            })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}
