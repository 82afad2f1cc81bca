//! SVC-2004 text files.
//!
//! A file holds one signature. The first line is the point count; each
//! following line is `X Y Timestamp ButtonStatus` (Task 1) or
//! `X Y Timestamp ButtonStatus Azimuth Altitude Pressure` (Task 2).
//!
//! A task directory contains `U<user>S<sample>.TXT` files. Samples 1-20 are
//! genuine and 21-40 are skilled forgeries of the same user.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{Corpus, Label, PenState, Point, Provenance, RawSignature};
use crate::error::{Error, Result};

pub const SVC_SAMPLES_PER_USER: u32 = 40;
/// First sample index that holds a forgery.
pub const SVC_FORGED_FROM: u32 = 21;

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_int(field: &str, line: usize, what: &str) -> Result<i64> {
    field
        .parse::<i64>()
        .map_err(|_| parse_err(line, format!("{what} {field:?} is not an integer")))
}

/// Parses one signature file.
pub fn parse_svc_file(bytes: &[u8], label: Label, user_id: u32, sample_index: u32) -> Result<RawSignature> {
    let mut lines = bytes.split(|&b| b == b'\n').enumerate().map(|(i, raw)| {
        let text = std::str::from_utf8(raw).map_err(|_| parse_err(i + 1, "invalid UTF-8"))?;
        Ok::<_, Error>((i + 1, text.trim()))
    });

    let mut header = None;
    for entry in lines.by_ref() {
        let (n, text) = entry?;
        if !text.is_empty() {
            header = Some((n, text));
            break;
        }
    }
    let (header_line, header) = header.ok_or_else(|| parse_err(1, "empty file"))?;
    let declared: usize = header.parse().map_err(|_| {
        parse_err(header_line, format!("point count {header:?} is not a non-negative integer"))
    })?;
    if declared < 2 {
        return Err(parse_err(
            header_line,
            format!("signature needs at least 2 points, declared {declared}"),
        ));
    }

    let mut points = Vec::with_capacity(declared.min(1 << 16));
    let mut last_line = header_line;
    for entry in lines {
        let (n, text) = entry?;
        last_line = n;
        if text.is_empty() {
            continue;
        }
        if points.len() == declared {
            return Err(parse_err(n, format!("more points than the declared {declared}")));
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 4 && fields.len() != 7 {
            return Err(parse_err(n, format!("expected 4 or 7 fields, found {}", fields.len())));
        }
        let button = parse_int(fields[3], n, "button status")?;
        if button != 0 && button != 1 {
            return Err(parse_err(n, format!("button status must be 0 or 1, got {button}")));
        }
        let pen = if fields.len() == 7 {
            Some(PenState {
                azimuth: parse_int(fields[4], n, "azimuth")?,
                altitude: parse_int(fields[5], n, "altitude")?,
                pressure: parse_int(fields[6], n, "pressure")?,
            })
        } else {
            None
        };
        points.push(Point {
            x: parse_int(fields[0], n, "x")?,
            y: parse_int(fields[1], n, "y")?,
            timestamp: parse_int(fields[2], n, "timestamp")?,
            button: button as u8,
            pen,
        });
    }
    if points.len() != declared {
        return Err(parse_err(
            last_line,
            format!("declared {declared} points but found {}", points.len()),
        ));
    }
    Ok(RawSignature {
        user_id,
        sample_index,
        label,
        points,
    })
}

/// Writes a signature back in the file format `parse_svc_file` reads.
pub fn to_svc_text(sig: &RawSignature) -> String {
    let mut out = format!("{}\n", sig.points.len());
    for p in &sig.points {
        out.push_str(&format!("{} {} {} {}", p.x, p.y, p.timestamp, p.button));
        if let Some(pen) = p.pen {
            out.push_str(&format!(" {} {} {}", pen.azimuth, pen.altitude, pen.pressure));
        }
        out.push('\n');
    }
    out
}

/// A loaded task directory plus notes about anything missing or skipped.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub warnings: Vec<String>,
}

// `U12S7.TXT` -> (12, 7)
fn parse_file_name(name: &str) -> Option<(u32, u32)> {
    let stem = name
        .strip_suffix(".TXT")
        .or_else(|| name.strip_suffix(".txt"))?;
    let rest = stem.strip_prefix('U').or_else(|| stem.strip_prefix('u'))?;
    let split = rest.find(['S', 's'])?;
    let user = rest[..split].parse().ok()?;
    let sample = rest[split + 1..].parse().ok()?;
    Some((user, sample))
}

/// Loads every `U*S*.TXT` file of an SVC-2004 task directory.
pub fn load_corpus(dir: &Path, task: u8) -> Result<LoadedCorpus> {
    let provenance = match task {
        1 => Provenance::SvcTask1,
        2 => Provenance::SvcTask2,
        other => return Err(Error::Config(format!("SVC task must be 1 or 2, got {other}"))),
    };
    let mut warnings = Vec::new();
    let mut files: Vec<(u32, u32, PathBuf)> = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::Io(e).in_file(dir))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io(e).in_file(dir))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        match parse_file_name(&name) {
            Some((user, sample)) if (1..=SVC_SAMPLES_PER_USER).contains(&sample) => files.push((user, sample, path)),
            Some(_) => warnings.push(format!("skipped {name}: sample index outside 1-{SVC_SAMPLES_PER_USER}")),
            None => warnings.push(format!("skipped {name}: not a U<user>S<sample>.TXT file")),
        }
    }
    if files.is_empty() {
        return Err(Error::Dataset(format!("no signature files in {}", dir.display())));
    }
    files.sort();

    let signatures = files
        .par_iter()
        .map(|(user, sample, path)| {
            let label = if *sample >= SVC_FORGED_FROM {
                Label::Forged
            } else {
                Label::Genuine
            };
            let bytes = fs::read(path).map_err(|e| Error::Io(e).in_file(path))?;
            parse_svc_file(&bytes, label, *user, *sample).map_err(|e| e.in_file(path))
        })
        .collect::<Result<Vec<_>>>()?;

    let corpus = Corpus::new(signatures, vec![provenance]);
    for (user, counts) in corpus.user_counts() {
        let expected = (SVC_FORGED_FROM - 1) as usize;
        if counts.genuine != expected || counts.forged != expected {
            warnings.push(format!(
                "user {user}: {} genuine and {} forged samples, expected {expected} of each",
                counts.genuine, counts.forged
            ));
        }
    }
    for w in &warnings {
        log::warn!("{}: {w}", dir.display());
    }
    Ok(LoadedCorpus { corpus, warnings })
}
