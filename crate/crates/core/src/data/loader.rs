//! CSV interaction-log input and output.
//!
//! Expected header: `user_id,item_id,timestamp`. Users with fewer than five
//! interactions are filtered out on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Interaction;
use crate::error::{Error, Result};

pub const INTERACTIONS_HEADER: &str = "user_id,item_id,timestamp";
const MIN_INTERACTIONS_PER_USER: usize = 5;

/// Parse an interaction log, dropping users with fewer than five events.
/// Ordering is stable: surviving rows keep their file order.
pub fn read_interactions<R: Read>(reader: R) -> Result<Vec<Interaction>> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let header = match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, line)) => line?,
    };
    if header.trim() != INTERACTIONS_HEADER {
        return Err(Error::data(format!(
            "line 1: expected header {INTERACTIONS_HEADER:?}, got {:?}",
            header.trim()
        )));
    }

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let user_id: u64 = parse_field(fields.next(), line_no, "user_id")?;
        let item_id: u64 = parse_field(fields.next(), line_no, "item_id")?;
        let timestamp: i64 = parse_field(fields.next(), line_no, "timestamp")?;
        if fields.next().is_some() {
            return Err(Error::data(format!("line {line_no}: expected 3 fields")));
        }
        rows.push(Interaction {
            user_id,
            item_id: item_id as usize,
            timestamp,
        });
    }

    let mut counts: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
    for r in &rows {
        *counts.entry(r.user_id).or_insert(0) += 1;
    }
    Ok(rows
        .into_iter()
        .filter(|r| counts[&r.user_id] >= MIN_INTERACTIONS_PER_USER)
        .collect())
}

fn parse_field<T: std::str::FromStr>(
    field: Option<&str>,
    line_no: usize,
    name: &str,
) -> Result<T> {
    let raw = field
        .ok_or_else(|| Error::data(format!("line {line_no}: missing {name}")))?
        .trim();
    raw.parse().map_err(|_| {
        Error::data(format!("line {line_no}: cannot parse {name} from {raw:?}"))
    })
}

pub fn load_interactions(path: &Path) -> Result<Vec<Interaction>> {
    read_interactions(File::open(path)?)
}

/// Referential check against a known item-embedding table of `num_items`
/// rows.
pub fn validate_item_ids(interactions: &[Interaction], num_items: usize) -> Result<()> {
    if let Some(bad) = interactions.iter().find(|i| i.item_id >= num_items) {
        return Err(Error::data(format!(
            "unknown item {} for user {} (catalog holds {num_items} items)",
            bad.item_id, bad.user_id
        )));
    }
    Ok(())
}

pub fn save_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{INTERACTIONS_HEADER}")?;
    for it in interactions {
        writeln!(w, "{},{},{}", it.user_id, it.item_id, it.timestamp)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn users_below_five_interactions_are_dropped() {
        let csv = "user_id,item_id,timestamp\n\
                   1,10,0\n1,11,1\n1,12,2\n1,13,3\n1,14,4\n\
                   2,20,0\n2,21,1\n2,22,2\n2,23,3\n";
        let rows = read_interactions(csv.as_bytes()).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.user_id == 1));
    }

    #[test]
    fn empty_input_is_an_empty_dataset() {
        let rows = read_interactions("".as_bytes()).unwrap();
        assert!(rows.is_empty());
        let header_only = read_interactions("user_id,item_id,timestamp\n".as_bytes()).unwrap();
        assert!(header_only.is_empty());
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let csv = "user_id,item_id,timestamp\n1,10,0\n1,oops,1\n";
        let err = read_interactions(csv.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "got: {err}");
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let csv = "user_id,item_id,timestamp\n\
                   1,10,7\n1,11,7\n1,12,7\n1,13,7\n1,14,7\n";
        let rows = read_interactions(csv.as_bytes()).unwrap();
        let seqs = crate::data::build_sequences(&rows);
        assert_eq!(seqs[0].items, vec![10, 11, 12, 13, 14]);
    }

    #[test]
    fn unknown_item_is_a_referential_error() {
        let rows = vec![Interaction {
            user_id: 1,
            item_id: 99,
            timestamp: 0,
        }];
        assert!(validate_item_ids(&rows, 50).is_err());
        assert!(validate_item_ids(&rows, 100).is_ok());
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("interactions.csv");
        let rows: Vec<Interaction> = (0..10)
            .map(|i| Interaction {
                user_id: 3,
                item_id: i,
                timestamp: i as i64,
            })
            .collect();
        save_interactions(&path, &rows).unwrap();
        let loaded = load_interactions(&path).unwrap();
        assert_eq!(loaded, rows);
    }
}
