//! Turns session directories plus a supervision file into model samples.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::GrayImage;
use log::warn;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::session::{self, load_session, read_manifest, Session, Split, MANIFEST_FILE};
use crate::supervision::{build_supervision, read_supervision_file, SupervisionParams, SupervisionRecord};

/// Pixels scaled to `[0, 1]`.
pub fn image_to_array(img: &GrayImage) -> Array2<f64> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        f64::from(img.get_pixel(c as u32, r as u32).0[0]) / 255.0
    })
}

pub fn sample_from_session(s: &Session, record: Option<&SupervisionRecord>) -> Result<Sample> {
    let supervision = match record {
        Some(r) => {
            if r.labels.as_slice() != s.labels.as_slice() {
                return Err(Error::Validation(format!(
                    "supervision record for `{}` disagrees with the session labels",
                    s.id
                )));
            }
            Some(r.supervision()?)
        }
        None => None,
    };
    Ok(Sample::new(
        s.id.clone(),
        image_to_array(&s.image),
        s.labels,
        supervision,
    ))
}

/// Session directories under `root`, restricted to one split when given.
/// Split selection requires `root/manifest.jsonl`.
pub fn session_dirs(root: impl AsRef<Path>, split: Option<Split>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    match split {
        None => session::list_sessions(root),
        Some(split) => {
            let entries = read_manifest(root.join(MANIFEST_FILE))?;
            Ok(entries
                .into_iter()
                .filter(|e| e.split == split)
                .map(|e| root.join(e.dir))
                .collect())
        }
    }
}

/// Loads samples, attaching supervision from `supervision_file` when given.
/// A record whose grid differs from `grid_side` is a configuration error;
/// sessions without a record get no supervision.
pub fn load_samples(
    root: impl AsRef<Path>,
    split: Option<Split>,
    supervision_file: Option<&Path>,
    grid_side: usize,
) -> Result<Vec<Sample>> {
    let records: BTreeMap<String, SupervisionRecord> = match supervision_file {
        Some(path) => read_supervision_file(path)?
            .into_iter()
            .map(|r| (r.sample_id.clone(), r))
            .collect(),
        None => BTreeMap::new(),
    };
    if let Some(r) = records.values().find(|r| r.grid_g != grid_side) {
        return Err(Error::Config(format!(
            "supervision for `{}` uses grid {} but the model grid is {grid_side}",
            r.sample_id, r.grid_g
        )));
    }
    let dirs = session_dirs(root, split)?;
    let mut out = Vec::with_capacity(dirs.len());
    let mut missing = 0;
    for dir in dirs {
        let s = load_session(&dir)?;
        let rec = records.get(&s.id);
        if rec.is_none() && supervision_file.is_some() {
            missing += 1;
        }
        out.push(sample_from_session(&s, rec)?);
    }
    if missing > 0 {
        warn!("{missing} sessions have no supervision record");
    }
    Ok(out)
}

pub fn supervision_record(s: &Session, params: &SupervisionParams) -> Result<SupervisionRecord> {
    let sup = build_supervision(s, params)?;
    Ok(SupervisionRecord {
        sample_id: s.id.clone(),
        labels: s.labels.to_vec(),
        gaze_tokens: sup.token_targets.to_vec(),
        grid_g: params.grid.side(),
        k: params.k,
        sigma_norm: params.sigma_norm,
    })
}

/// Result of preprocessing a directory of sessions.
#[derive(Debug)]
pub struct PreprocessOutcome {
    pub records: Vec<SupervisionRecord>,
    pub failures: Vec<(PathBuf, Error)>,
}

/// Builds one supervision record per session directory under `root`, in
/// directory-name order. Sessions that fail to load are collected rather
/// than aborting the run.
pub fn preprocess_dir(root: impl AsRef<Path>, params: &SupervisionParams) -> Result<PreprocessOutcome> {
    let root = root.as_ref();
    let dirs = session::list_sessions(root)?;
    if dirs.is_empty() {
        return Err(Error::Validation(format!(
            "no session_<id> directories under {}",
            root.display()
        )));
    }
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for dir in dirs {
        match load_session(&dir).and_then(|s| supervision_record(&s, params)) {
            Ok(r) => records.push(r),
            Err(e) => failures.push((dir, e)),
        }
    }
    Ok(PreprocessOutcome { records, failures })
}
