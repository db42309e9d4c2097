use std::fs;
use std::io::BufRead;
use std::path::Path;

use super::{DataError, Sample};

/// Reads newline-delimited JSON samples. Blank lines are ignored; line
/// numbers in errors are 1-based.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<Sample>, DataError> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| DataError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn parse_records(path: impl AsRef<Path>) -> Result<Vec<Sample>, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    read_records(std::io::BufReader::new(file))
}

/// One compact JSON object per line, each terminated by `\n`.
pub fn records_to_string(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("samples always serialize"));
        out.push('\n');
    }
    out
}

pub fn write_records(path: impl AsRef<Path>, samples: &[Sample]) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, records_to_string(samples)).map_err(|e| DataError::io(path, e))
}
