//! Dataset manifest and the directory layout around it.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/captions.jsonl
//! <dir>/features/<video_id>.eivc
//! ```
//!
//! Paths inside the manifest are relative to the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::{CaptionTrack, GroundingSample, Interval, VideoMeta};

use super::binary::{decode_matrix, encode_matrix};
use super::captions::{encode_captions, read_captions};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const FEATURE_DIR: &str = "features";
pub const FEATURE_EXT: &str = "eivc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub video_id: String,
    pub query_id: String,
    pub query: String,
    pub gt_start_s: f64,
    pub gt_end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub videos: Vec<VideoMeta>,
    pub samples: Vec<ManifestSample>,
    pub caption_file: String,
    pub feature_dir: String,
}

/// Video ids double as file names, so they are restricted to a portable set.
fn check_id(kind: &str, id: &str) -> std::result::Result<(), String> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(format!("{kind} `{id}` must be non-empty ASCII [A-Za-z0-9_.-] and not start with '.'"))
    }
}

fn check_relative(what: &str, p: &str) -> std::result::Result<(), String> {
    let path = Path::new(p);
    if p.is_empty() || path.is_absolute() || path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(format!("{what} `{p}` must be a relative path inside the dataset directory"));
    }
    Ok(())
}

impl Manifest {
    /// Builds a manifest for samples laid out with the default file names.
    pub fn from_samples(samples: &[GroundingSample]) -> Result<Self> {
        let mut videos: Vec<VideoMeta> = Vec::new();
        let mut seen: BTreeMap<&str, &VideoMeta> = BTreeMap::new();
        for s in samples {
            match seen.get(s.video.video_id.as_str()) {
                Some(v) if **v != s.video => {
                    return Err(Error::invalid(
                        "samples",
                        format!("video {} appears with differing metadata", s.video.video_id),
                    ))
                }
                Some(_) => {}
                None => {
                    seen.insert(&s.video.video_id, &s.video);
                    videos.push(s.video.clone());
                }
            }
        }
        let manifest = Self {
            version: MANIFEST_VERSION,
            videos,
            samples: samples
                .iter()
                .map(|s| ManifestSample {
                    video_id: s.video.video_id.clone(),
                    query_id: s.query_id.clone(),
                    query: s.query.clone(),
                    gt_start_s: s.gt.start(),
                    gt_end_s: s.gt.end(),
                })
                .collect(),
            caption_file: CAPTIONS_FILE.into(),
            feature_dir: FEATURE_DIR.into(),
        };
        manifest.validate(Path::new(MANIFEST_FILE))?;
        Ok(manifest)
    }

    /// Structural checks plus referential integrity between samples and
    /// videos. `path` only labels errors.
    pub fn validate(&self, path: &Path) -> Result<()> {
        let err = |reason: String| Error::format(path, reason);
        if self.version != MANIFEST_VERSION {
            return Err(err(format!("unsupported manifest version {}", self.version)));
        }
        check_relative("caption_file", &self.caption_file).map_err(err)?;
        check_relative("feature_dir", &self.feature_dir).map_err(err)?;
        let mut videos = HashSet::new();
        for v in &self.videos {
            check_id("video_id", &v.video_id).map_err(err)?;
            v.validate().map_err(|e| err(format!("video {}: {e}", v.video_id)))?;
            if !videos.insert(v.video_id.as_str()) {
                return Err(err(format!("duplicate video {}", v.video_id)));
            }
        }
        let mut queries = HashSet::new();
        for s in &self.samples {
            if s.query_id.is_empty() {
                return Err(err("empty query_id".into()));
            }
            if !queries.insert(s.query_id.as_str()) {
                return Err(err(format!("duplicate query {}", s.query_id)));
            }
            let Some(video) = self.videos.iter().find(|v| v.video_id == s.video_id) else {
                return Err(err(format!("query {} references unknown video {}", s.query_id, s.video_id)));
            };
            let gt = Interval::seconds(s.gt_start_s, s.gt_end_s).map_err(|e| err(format!("query {}: {e}", s.query_id)))?;
            if gt.start() < 0.0 || gt.end() > video.duration_s {
                return Err(err(format!(
                    "query {}: ground truth [{}, {}] outside [0, {}]",
                    s.query_id, s.gt_start_s, s.gt_end_s, video.duration_s
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
    m.validate(path)?;
    Ok(m)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    parse_manifest(&super::read_text(path)?, path)
}

pub fn encode_manifest(m: &Manifest) -> Result<String> {
    m.validate(Path::new(MANIFEST_FILE))?;
    let mut s = serde_json::to_string_pretty(m).map_err(|e| Error::invalid("manifest", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn feature_path(base: &Path, m: &Manifest, video_id: &str) -> PathBuf {
    base.join(&m.feature_dir).join(format!("{video_id}.{FEATURE_EXT}"))
}

fn base_dir(manifest_path: &Path) -> &Path {
    manifest_path.parent().unwrap_or(Path::new(""))
}

/// Loads every sample of a manifest, checking that each video has a caption
/// track and a feature matrix with one row per frame.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<GroundingSample>> {
    let manifest = read_manifest(manifest_path)?;
    let base = base_dir(manifest_path);
    let caption_path = base.join(&manifest.caption_file);
    let mut tracks = read_captions(&caption_path)?;
    let known: HashSet<&str> = manifest.videos.iter().map(|v| v.video_id.as_str()).collect();
    if let Some(extra) = tracks.keys().find(|id| !known.contains(id.as_str())) {
        return Err(Error::format(&caption_path, format!("captions for unknown video {extra}")));
    }

    let mut d_v = None;
    let mut per_video: BTreeMap<&str, (VideoMeta, CaptionTrack, crate::numerics::Matrix)> = BTreeMap::new();
    for v in &manifest.videos {
        let track = tracks
            .remove(&v.video_id)
            .ok_or_else(|| Error::format(manifest_path, format!("video {} has no captions", v.video_id)))?;
        let fpath = feature_path(base, &manifest, &v.video_id);
        let features = decode_matrix(&super::read_bytes(&fpath)?, &fpath)?;
        if features.rows() != v.frame_count {
            return Err(Error::format(
                &fpath,
                format!("{} feature rows for {} frames", features.rows(), v.frame_count),
            ));
        }
        match d_v {
            None => d_v = Some(features.cols()),
            Some(d) if d != features.cols() => {
                return Err(Error::format(&fpath, format!("feature width {} differs from {d}", features.cols())))
            }
            _ => {}
        }
        per_video.insert(&v.video_id, (v.clone(), track, features));
    }

    manifest
        .samples
        .iter()
        .map(|s| {
            let (video, track, features) = &per_video[s.video_id.as_str()];
            GroundingSample::new(
                s.query_id.clone(),
                video.clone(),
                track.clone(),
                s.query.clone(),
                Interval::seconds(s.gt_start_s, s.gt_end_s)?,
                features.clone(),
            )
            .map_err(|e| Error::format(manifest_path, format!("query {}: {e}", s.query_id)))
        })
        .collect()
}

/// Writes `manifest.json`, `captions.jsonl` and one feature file per video
/// into `dir`, which must exist.
pub fn write_dataset(dir: &Path, samples: &[GroundingSample]) -> Result<()> {
    let manifest = Manifest::from_samples(samples)?;
    let mut tracks: Vec<&CaptionTrack> = Vec::new();
    let mut written = HashSet::new();
    std::fs::create_dir_all(dir.join(&manifest.feature_dir))?;
    for s in samples {
        if !written.insert(s.video.video_id.as_str()) {
            continue;
        }
        tracks.push(&s.captions);
        let fpath = feature_path(dir, &manifest, &s.video.video_id);
        super::write_atomic(&fpath, &encode_matrix(&s.video_features)?)?;
    }
    tracks.sort_by(|a, b| a.video_id().cmp(b.video_id()));
    super::write_atomic(&dir.join(&manifest.caption_file), encode_captions(tracks)?.as_bytes())?;
    super::write_atomic(&dir.join(MANIFEST_FILE), encode_manifest(&manifest)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn small() -> Vec<GroundingSample> {
        generate(&SynthConfig {
            n_videos: 3,
            d_v: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let samples = small();
        write_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[1].query, samples[1].query);
        assert_eq!(loaded[1].captions, samples[1].captions);

        let again = tempfile::tempdir().unwrap();
        write_dataset(again.path(), &loaded).unwrap();
        for f in [MANIFEST_FILE, CAPTIONS_FILE, "features/vid00002.eivc"] {
            let a = std::fs::read(dir.path().join(f)).unwrap();
            let b = std::fs::read(again.path().join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
    }

    #[test]
    fn referential_integrity_is_checked_at_load() {
        let mut m = Manifest::from_samples(&small()).unwrap();
        m.samples[0].video_id = "nope".into();
        assert!(m.validate(Path::new("m")).is_err());

        let mut dup = Manifest::from_samples(&small()).unwrap();
        dup.samples[1].query_id = dup.samples[0].query_id.clone();
        assert!(dup.validate(Path::new("m")).is_err());

        let mut escape = Manifest::from_samples(&small()).unwrap();
        escape.feature_dir = "../elsewhere".into();
        assert!(escape.validate(Path::new("m")).is_err());

        let mut bad_id = Manifest::from_samples(&small()).unwrap();
        bad_id.videos[0].video_id = "a/b".into();
        assert!(bad_id.validate(Path::new("m")).is_err());

        let mut gt = Manifest::from_samples(&small()).unwrap();
        gt.samples[0].gt_end_s = 1e6;
        assert!(gt.validate(Path::new("m")).is_err());
    }

    #[test]
    fn missing_captions_or_features_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small()).unwrap();
        let manifest = dir.path().join(MANIFEST_FILE);

        let captions = std::fs::read_to_string(dir.path().join(CAPTIONS_FILE)).unwrap();
        let kept: String = captions.lines().filter(|l| !l.contains("vid00001")).map(|l| format!("{l}\n")).collect();
        std::fs::write(dir.path().join(CAPTIONS_FILE), kept).unwrap();
        assert!(load_dataset(&manifest).is_err());
        std::fs::write(dir.path().join(CAPTIONS_FILE), captions).unwrap();
        load_dataset(&manifest).unwrap();

        std::fs::remove_file(dir.path().join("features/vid00000.eivc")).unwrap();
        assert!(load_dataset(&manifest).is_err());
    }

    #[test]
    fn unknown_manifest_fields_are_rejected() {
        let text = encode_manifest(&Manifest::from_samples(&small()).unwrap()).unwrap();
        let mutated = text.replacen("\"version\": 1", "\"version\": 1,\n  \"extra\": 0", 1);
        assert!(parse_manifest(&mutated, Path::new("m")).is_err());
        let wrong_version = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(parse_manifest(&wrong_version, Path::new("m")).is_err());
        parse_manifest(&text, Path::new("m")).unwrap();
    }
}
