//! Session directories (`session_<id>/`) and the corpus manifest.
//!
//! ```text
//! session_<id>/
//!   fixations.csv      t_start_ms,t_end_ms,x_norm,y_norm
//!   transcript.jsonl   {"sentence_id", "word", "t_start_ms", "t_end_ms"}
//!   image.pgm          8-bit grayscale
//!   labels.csv         14 comma-separated 0/1 values
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, FixationEvent, TranscriptWord};
use crate::{Labels, NUM_LABELS};

pub const FIXATIONS_FILE: &str = "fixations.csv";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const IMAGE_FILE: &str = "image.pgm";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const SESSION_PREFIX: &str = "session_";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Session {
    pub id: String,
    pub fixations: Vec<FixationEvent>,
    pub words: Vec<TranscriptWord>,
    pub image: GrayImage,
    pub labels: Labels,
}

pub fn session_dir_name(id: &str) -> String {
    format!("{SESSION_PREFIX}{id}")
}

/// Session id from a `session_<id>` directory path.
pub fn session_id_of(dir: &Path) -> Option<String> {
    dir.file_name()?
        .to_str()?
        .strip_prefix(SESSION_PREFIX)
        .map(str::to_string)
}

/// All `session_*` subdirectories, sorted by name.
pub fn list_sessions(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && session_id_of(&path).is_some() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn parse_labels(path: impl AsRef<Path>) -> Result<Labels> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg,
    };
    let fields: Vec<&str> = text.trim().split(',').map(str::trim).collect();
    if fields.len() != NUM_LABELS {
        return Err(parse_err(format!(
            "expected {NUM_LABELS} labels, found {}",
            fields.len()
        )));
    }
    let mut labels = [0u8; NUM_LABELS];
    for (dst, f) in labels.iter_mut().zip(fields) {
        *dst = match f {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(format!("label must be 0 or 1, found `{other}`"))),
        };
    }
    Ok(labels)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.into_luma8())
}

pub fn load_session(dir: impl AsRef<Path>) -> Result<Session> {
    let dir = dir.as_ref();
    let id = session_id_of(dir)
        .ok_or_else(|| Error::Validation(format!("{} is not a session_<id> directory", dir.display())))?;
    Ok(Session {
        id,
        fixations: ingest::parse_fixations(dir.join(FIXATIONS_FILE))?,
        words: ingest::parse_transcript(dir.join(TRANSCRIPT_FILE))?,
        image: load_image(dir.join(IMAGE_FILE))?,
        labels: parse_labels(dir.join(LABELS_FILE))?,
    })
}

/// Writes `session` into `root/session_<id>/`.
pub fn write_session(root: impl AsRef<Path>, session: &Session) -> Result<PathBuf> {
    let dir = root.as_ref().join(session_dir_name(&session.id));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let path = dir.join(FIXATIONS_FILE);
    let mut out = String::from("t_start_ms,t_end_ms,x_norm,y_norm\n");
    for f in &session.fixations {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            f.t_start_ms, f.t_end_ms, f.x_norm, f.y_norm
        ));
    }
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(TRANSCRIPT_FILE);
    let mut out = Vec::new();
    for w in &session.words {
        serde_json::to_writer(&mut out, w)?;
        out.push(b'\n');
    }
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(IMAGE_FILE);
    session
        .image
        .save_with_format(&path, image::ImageFormat::Pnm)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&path, io),
            other => Error::Image(other),
        })?;

    let path = dir.join(LABELS_FILE);
    let labels: Vec<String> = session.labels.iter().map(u8::to_string).collect();
    fs::write(&path, format!("{}\n", labels.join(","))).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub dir: String,
    pub split: Split,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        fs::write(&p, "1,0,0,0,0,0,0,0,0,0,0,0,0,1\n").unwrap();
        let l = parse_labels(&p).unwrap();
        assert_eq!(l[0], 1);
        assert_eq!(l[13], 1);
        fs::write(&p, "1,0,0\n").unwrap();
        assert!(parse_labels(&p).is_err());
        fs::write(&p, "1,0,0,0,0,0,0,0,0,0,0,0,0,2\n").unwrap();
        assert!(parse_labels(&p).is_err());
    }

    #[test]
    fn session_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut labels = [0u8; NUM_LABELS];
        labels[3] = 1;
        let session = Session {
            id: "0007".into(),
            fixations: vec![FixationEvent::new(0, 100, 0.25, 0.75)],
            words: vec![TranscriptWord {
                sentence_id: 0,
                word: "clear".into(),
                t_start_ms: 0,
                t_end_ms: 200,
            }],
            image: GrayImage::from_fn(8, 8, |x, y| image::Luma([(x * 8 + y) as u8])),
            labels,
        };
        let path = write_session(dir.path(), &session).unwrap();
        assert_eq!(path.file_name().unwrap(), "session_0007");
        assert_eq!(load_session(&path).unwrap(), session);
        assert_eq!(list_sessions(dir.path()).unwrap(), vec![path]);
    }
}
