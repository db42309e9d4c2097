use std::io::Read;
use std::path::Path;

use super::{Comment, DataError, Sample};

const COLUMNS: [&str; 5] = ["Title", "Text", "Image", "Comment", "Likes"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRow {
    /// 1-based line of the row in the input file.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LegacyParse {
    pub samples: Vec<Sample>,
    pub rejected: Vec<RejectedRow>,
}

fn split_row(
    comment: &str,
    likes: &str,
    delimiter: &str,
) -> Result<Vec<Comment>, String> {
    if comment.is_empty() && likes.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<&str> = comment.split(delimiter).collect();
    let counts: Vec<&str> = likes.split(delimiter).collect();
    if texts.len() != counts.len() {
        return Err(format!(
            "{} comments but {} like counts",
            texts.len(),
            counts.len()
        ));
    }
    texts
        .into_iter()
        .zip(counts)
        .map(|(t, l)| {
            l.trim()
                .parse::<u64>()
                .map(|likes| Comment::new(t, likes))
                .map_err(|_| format!("malformed like count `{l}`"))
        })
        .collect()
}

/// Parses the legacy export whose `Comment` and `Likes` cells hold
/// delimiter-joined lists. Rows whose lists disagree in length or carry a
/// malformed count are skipped and reported; sample ids are the 1-based data
/// row numbers.
pub fn parse_legacy_reader<R: Read>(reader: R, delimiter: &str) -> Result<LegacyParse, DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))?;
    }

    let mut out = LegacyParse::default();
    for (n, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(idx[i]);
        let (Some(title), Some(text), Some(image), Some(comment), Some(likes)) =
            (field(0), field(1), field(2), field(3), field(4))
        else {
            out.rejected.push(RejectedRow {
                line,
                reason: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
            continue;
        };
        match split_row(comment, likes, delimiter) {
            Ok(comments) => out.samples.push(Sample {
                id: (n + 1).to_string(),
                title: title.to_string(),
                text: text.to_string(),
                image_ref: image.to_string(),
                comments,
            }),
            Err(reason) => out.rejected.push(RejectedRow { line, reason }),
        }
    }
    Ok(out)
}

pub fn parse_legacy_csv(path: impl AsRef<Path>, delimiter: &str) -> Result<LegacyParse, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_legacy_reader(file, delimiter)
}
