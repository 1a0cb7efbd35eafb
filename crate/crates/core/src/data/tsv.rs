//! Canonical annotation format: one record per line,
//! `frame <TAB> agent_id <TAB> x <TAB> y <TAB> pan_deg`, positions in meters
//! and pan in degrees counterclockwise from `+x`. Blank lines and lines
//! starting with `#` are ignored.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use super::RawAnnotation;
use crate::error::{Error, Result};

pub const HEADER: &str = "# frame\tagent_id\tx\ty\tpan_deg";

pub fn parse_annotations(reader: impl BufRead) -> Result<Vec<RawAnnotation>> {
    let mut out = Vec::new();
    let mut seen: HashSet<(i64, u32)> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let bad = |what: &str, v: &str| Error::Parse {
            line: line_no,
            message: format!("invalid {what} `{v}`"),
        };
        let frame: i64 = fields[0].parse().map_err(|_| bad("frame", fields[0]))?;
        let agent_id: u32 = fields[1].parse().map_err(|_| bad("agent id", fields[1]))?;
        let x: f64 = fields[2].parse().map_err(|_| bad("x", fields[2]))?;
        let y: f64 = fields[3].parse().map_err(|_| bad("y", fields[3]))?;
        let mut pan_deg: f64 = fields[4].parse().map_err(|_| bad("pan", fields[4]))?;
        if !(x.is_finite() && y.is_finite() && pan_deg.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: "non-finite value".into(),
            });
        }
        if !(0.0..360.0).contains(&pan_deg) {
            let wrapped = pan_deg.rem_euclid(360.0);
            let wrapped = if wrapped >= 360.0 { 0.0 } else { wrapped };
            log::warn!("line {line_no}: pan {pan_deg} deg outside [0, 360), normalized to {wrapped}");
            pan_deg = wrapped;
        }
        if !seen.insert((frame, agent_id)) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate record for frame {frame}, agent {agent_id}"),
            });
        }
        out.push(RawAnnotation {
            frame,
            agent_id,
            x,
            y,
            pan_deg,
        });
    }
    Ok(out)
}

pub fn parse_annotations_str(text: &str) -> Result<Vec<RawAnnotation>> {
    parse_annotations(text.as_bytes())
}

/// Writes records with shortest round-trip float formatting, so parsing the
/// output gives back identical values.
pub fn write_annotations(mut writer: impl Write, records: &[RawAnnotation]) -> Result<()> {
    writeln!(writer, "{HEADER}")?;
    for r in records {
        writeln!(
            writer,
            "{}\t{}\t{}\t{}\t{}",
            r.frame, r.agent_id, r.x, r.y, r.pan_deg
        )?;
    }
    Ok(())
}

pub fn write_annotations_string(records: &[RawAnnotation]) -> String {
    let mut buf = Vec::new();
    write_annotations(&mut buf, records).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("output is ASCII")
}
