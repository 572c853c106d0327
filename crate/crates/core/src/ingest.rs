//! Canonical CSV reader/writer.
//!
//! Schema: `student_id,question_id,kc_ids,response,timestamp`, header
//! mandatory. `kc_ids` is `|`-joined; an empty cell means no KC info.
//! Empty `question_id`, `response` or `timestamp` cells load as missing
//! fields so that [`crate::preprocess::filter`] can drop them. Any other
//! response than `0`/`1` is a parse error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Interaction, StudentSequence};
use crate::error::{Error, Result};

pub const HEADER: [&str; 5] = ["student_id", "question_id", "kc_ids", "response", "timestamp"];
pub const KC_DELIMITER: char = '|';
/// Joins problem and step names into one question id (U+241F).
pub const QUESTION_SEPARATOR: char = '\u{241F}';
const ESCAPE: char = '\\';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalRow {
    pub student_id: String,
    pub question_id: String,
    pub kc_ids: String,
    pub response: String,
    pub timestamp: String,
}

pub fn parse_canonical(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_canonical_reader(file, path)
}

/// `origin` is only used for error messages.
pub fn parse_canonical_reader<R: Read>(reader: R, origin: &Path) -> Result<Dataset> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(parse_err(
            1,
            format!("expected header `{}`, found `{}`", HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }

    // Students in id order; rows within a student in file order until sorted.
    let mut by_student: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    let header = header.clone();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: CanonicalRow = record
            .deserialize(Some(&header))
            .map_err(|e| parse_err(line, e.to_string()))?;
        let (student, inter) = row_to_interaction(row).map_err(|msg| parse_err(line, msg))?;
        by_student.entry(student).or_default().push(inter);
    }

    let sequences = by_student
        .into_iter()
        .map(|(student_id, interactions)| {
            let mut seq = StudentSequence::new(student_id, interactions);
            seq.sort_chronologically();
            seq
        })
        .collect();
    let dataset = Dataset::new(sequences);
    for q in dataset.kc_conflicts() {
        log::warn!(
            "{}: question `{q}` appears with different KC sets; using their union",
            origin.display()
        );
    }
    Ok(dataset)
}

fn row_to_interaction(row: CanonicalRow) -> std::result::Result<(String, Interaction), String> {
    if row.student_id.is_empty() {
        return Err("empty student_id".into());
    }
    let response = match row.response.as_str() {
        "" => None,
        "0" => Some(0),
        "1" => Some(1),
        other => return Err(format!("response must be 0 or 1, got `{other}`")),
    };
    let timestamp = match row.timestamp.as_str() {
        "" => None,
        s => Some(
            s.parse::<i64>()
                .map_err(|_| format!("timestamp must be an integer, got `{s}`"))?,
        ),
    };
    let kc_ids = if row.kc_ids.is_empty() {
        Vec::new()
    } else {
        row.kc_ids.split(KC_DELIMITER).map(str::to_string).collect()
    };
    Ok((
        row.student_id,
        Interaction {
            question_id: row.question_id,
            kc_ids,
            response,
            timestamp,
        },
    ))
}

pub fn write_canonical(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_canonical_writer(dataset, file)
}

pub fn write_canonical_writer<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(HEADER)?;
    for seq in dataset.sequences() {
        for inter in &seq.interactions {
            let kcs = inter.kc_ids.join(&KC_DELIMITER.to_string());
            let response = inter.response.map(|r| r.to_string()).unwrap_or_default();
            let timestamp = inter.timestamp.map(|t| t.to_string()).unwrap_or_default();
            wtr.write_record([
                seq.student_id.as_str(),
                &inter.question_id,
                &kcs,
                &response,
                &timestamp,
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

fn escape_part(part: &str) -> String {
    let mut out = String::with_capacity(part.len());
    for ch in part.chars() {
        if ch == ESCAPE || ch == QUESTION_SEPARATOR {
            out.push(ESCAPE);
        }
        out.push(ch);
    }
    out
}

/// Builds a question id from a problem name and a step name (Statics-style
/// datasets). Separator and escape characters inside either part are
/// backslash-escaped, so distinct pairs always give distinct ids.
pub fn compose_question_id(problem_name: &str, step_name: &str) -> Result<String> {
    if problem_name.is_empty() || step_name.is_empty() {
        return Err(Error::invalid(
            "problem and step names must both be non-empty",
        ));
    }
    let mut id = escape_part(problem_name);
    id.push(QUESTION_SEPARATOR);
    id.push_str(&escape_part(step_name));
    Ok(id)
}

/// Inverse of [`compose_question_id`].
pub fn decompose_question_id(id: &str) -> Result<(String, String)> {
    let mut parts = vec![String::new()];
    let mut chars = id.chars();
    while let Some(ch) = chars.next() {
        match ch {
            ESCAPE => match chars.next() {
                Some(next) => parts.last_mut().unwrap().push(next),
                None => return Err(Error::invalid(format!("dangling escape in `{id}`"))),
            },
            QUESTION_SEPARATOR => parts.push(String::new()),
            c => parts.last_mut().unwrap().push(c),
        }
    }
    match <[String; 2]>::try_from(parts) {
        Ok([p, s]) if !p.is_empty() && !s.is_empty() => Ok((p, s)),
        _ => Err(Error::invalid(format!("`{id}` is not a composed question id"))),
    }
}
