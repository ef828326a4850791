//! Caption JSONL: one `{"video_id", "time_s", "text"}` object per line.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::CaptionTrack;

/// Grid spacing assumed for a track with a single caption.
pub const DEFAULT_CAPTION_INTERVAL_S: f64 = 10.0;

const GAP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionLine {
    video_id: String,
    time_s: f64,
    text: String,
}

struct Pending {
    entries: Vec<(f64, String)>,
    first_line: usize,
}

/// Groups lines by video, in file order within each video. `path` only labels
/// errors.
pub fn parse_captions(text: &str, path: &Path) -> Result<BTreeMap<String, CaptionTrack>> {
    let line_err = |line: usize, reason: String| Error::Line {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut groups: BTreeMap<String, Pending> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let rec: CaptionLine = serde_json::from_str(raw).map_err(|e| line_err(line, e.to_string()))?;
        if rec.video_id.is_empty() {
            return Err(line_err(line, "empty video_id".into()));
        }
        if !(rec.time_s >= 0.0) {
            return Err(line_err(line, format!("time_s must be >= 0, got {}", rec.time_s)));
        }
        let group = groups.entry(rec.video_id.clone()).or_insert_with(|| Pending {
            entries: Vec::new(),
            first_line: line,
        });
        if let Some(&(prev, _)) = group.entries.last() {
            if rec.time_s <= prev {
                return Err(line_err(
                    line,
                    format!("timestamps for {} not increasing ({} after {prev})", rec.video_id, rec.time_s),
                ));
            }
            if group.entries.len() >= 2 {
                let interval = group.entries[1].0 - group.entries[0].0;
                let gap = rec.time_s - prev;
                if (gap - interval).abs() > GAP_TOLERANCE {
                    return Err(line_err(
                        line,
                        format!("caption gap {gap} for {} differs from its interval {interval}", rec.video_id),
                    ));
                }
            }
        }
        group.entries.push((rec.time_s, rec.text));
    }

    groups
        .into_iter()
        .map(|(video_id, g)| {
            let interval = match g.entries.as_slice() {
                [a, b, ..] => b.0 - a.0,
                _ => DEFAULT_CAPTION_INTERVAL_S,
            };
            let track = CaptionTrack::new(video_id.clone(), g.entries, interval)
                .map_err(|e| line_err(g.first_line, e.to_string()))?;
            Ok((video_id, track))
        })
        .collect()
}

pub fn read_captions(path: &Path) -> Result<BTreeMap<String, CaptionTrack>> {
    parse_captions(&super::read_text(path)?, path)
}

pub fn encode_captions<'a>(tracks: impl IntoIterator<Item = &'a CaptionTrack>) -> Result<String> {
    let mut out = String::new();
    for track in tracks {
        for e in track.entries() {
            let rec = CaptionLine {
                video_id: track.video_id().to_string(),
                time_s: e.time_s,
                text: e.text.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::invalid("captions", e.to_string()))?);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_captions<'a>(path: &Path, tracks: impl IntoIterator<Item = &'a CaptionTrack>) -> Result<()> {
    super::write_atomic(path, encode_captions(tracks)?.as_bytes())
}
