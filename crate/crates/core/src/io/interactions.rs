use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::InteractionRecord;
use crate::error::{Error, Result};

pub const HEADER: [&str; 5] = ["user_id", "video_id", "timestamp", "duration_s", "watch_time_s"];

/// Reads a comma-separated interaction log. Rows keep file order and watch
/// times are clamped to the duration.
pub fn load_interactions(path: &Path) -> Result<Vec<InteractionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(file, path)
}

pub fn parse_interactions<R: Read>(reader: R, path: &Path) -> Result<Vec<InteractionRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema {
                path: path.to_path_buf(),
                msg: format!("missing column `{name}`"),
            })?;
    }

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let field = |i: usize| row.get(cols[i]).unwrap_or("");
        let timestamp: i64 = field(2)
            .parse()
            .map_err(|_| err(format!("bad timestamp `{}`", field(2))))?;
        let duration: f64 = field(3)
            .parse()
            .map_err(|_| err(format!("bad duration_s `{}`", field(3))))?;
        let watch: f64 = field(4)
            .parse()
            .map_err(|_| err(format!("bad watch_time_s `{}`", field(4))))?;
        let rec = InteractionRecord::new(field(0), field(1), timestamp, duration, watch)
            .map_err(|e| err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let mut buf = String::with_capacity(records.len() * 40);
    buf.push_str(&HEADER.join(","));
    buf.push('\n');
    for r in records {
        buf.push_str(&format!(
            "{},{},{},{},{}\n",
            r.user_id, r.video_id, r.timestamp, r.duration_s, r.watch_time_s
        ));
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}
