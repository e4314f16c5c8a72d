//! Synthetic reading sessions with controllable structure.
//!
//! Every session has four phases of roughly two seconds, one spoken
//! sentence per phase, and fixations that stay on whatever the phase is
//! about. The scenarios differ in what the image shows and how the labels
//! are defined:
//!
//! * `separable`: 14 fixed label sites; a positive label draws a bright
//!   blob on its site. Phase `q` looks at the positive sites in image
//!   quadrant `q` (or a fixed landmark when there are none).
//! * `order_sensitive`: four fixed regions, one per quadrant, visited in a
//!   random order; each is drawn dimmer than the one visited before it.
//!   Labels encode the order.
//! * `dropout_heavy`: `separable` with the fixations removed from a large
//!   share of the spoken words.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::GrayImage;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{FixationEvent, TranscriptWord};
use crate::session::{write_manifest, write_session, ManifestEntry, Session, Split, MANIFEST_FILE};
use crate::train::derive_seed;
use crate::{Labels, NUM_GAZE_TOKENS, NUM_LABELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Separable,
    OrderSensitive,
    DropoutHeavy,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Separable => "separable",
            ScenarioKind::OrderSensitive => "order_sensitive",
            ScenarioKind::DropoutHeavy => "dropout_heavy",
        })
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(ScenarioKind::Separable),
            "order_sensitive" => Ok(ScenarioKind::OrderSensitive),
            "dropout_heavy" => Ok(ScenarioKind::DropoutHeavy),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    /// Patch grid side; label sites and regions are placed on this grid.
    pub grid_side: usize,
    /// Image side in pixels; a multiple of `grid_side`.
    pub image_side: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Probability that each separable label is positive.
    pub positive_rate: f64,
    /// Standard deviation of additive pixel noise (intensity units).
    pub pixel_noise: f64,
    /// Standard deviation of fixation scatter around a target, in patches.
    pub gaze_jitter: f64,
    /// Probability that a fixation lands on a random location instead.
    pub distractor_rate: f64,
    /// Share of spoken words whose fixations are removed (`dropout_heavy`).
    pub dropout_rate: f64,
    /// Peak intensity of the brightest blob; later ranks step down by
    /// `brightness_step` (`order_sensitive`).
    pub peak_brightness: f64,
    pub brightness_step: f64,
    /// Half-width of the uniform per-session shift of the peak
    /// (`order_sensitive`), so that a rank is only visible relative to the
    /// other regions.
    pub peak_jitter: f64,
}

impl Scenario {
    pub fn new(kind: ScenarioKind, n_samples: usize, seed: u64) -> Self {
        Self {
            kind,
            grid_side: 8,
            image_side: 32,
            n_samples,
            seed,
            positive_rate: 0.5,
            pixel_noise: if kind == ScenarioKind::OrderSensitive {
                0.06
            } else {
                0.04
            },
            gaze_jitter: 0.25,
            distractor_rate: 0.05,
            dropout_rate: if kind == ScenarioKind::DropoutHeavy { 0.4 } else { 0.0 },
            peak_brightness: 0.9,
            brightness_step: if kind == ScenarioKind::OrderSensitive { 0.1 } else { 0.2 },
            peak_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 4 || !self.grid_side.is_multiple_of(2) {
            return Err(Error::Config("synthetic grid_side must be even and at least 4".into()));
        }
        if self.image_side == 0 || !self.image_side.is_multiple_of(self.grid_side) {
            return Err(Error::Config(format!(
                "image_side {} must be a positive multiple of grid_side {}",
                self.image_side, self.grid_side
            )));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.positive_rate) || !unit(self.distractor_rate) || !unit(self.dropout_rate) {
            return Err(Error::Config("rates must lie in [0, 1]".into()));
        }
        if self.pixel_noise < 0.0 || self.gaze_jitter < 0.0 || self.peak_jitter < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Patch `(row, col)` of each separable label site; quadrants hold
    /// 4, 4, 3 and 3 sites.
    pub fn label_sites(&self) -> [(usize, usize); NUM_LABELS] {
        let h = self.grid_side / 2;
        let a = h / 4;
        let b = (3 * h) / 4;
        let m = h / 2;
        let mut out = [(0, 0); NUM_LABELS];
        let mut i = 0;
        for q in 0..4 {
            let (r0, c0) = quadrant_origin(q, h);
            let local: &[(usize, usize)] = if q < 2 {
                &[(a, a), (a, b), (b, a), (b, b)]
            } else {
                &[(a, a), (a, b), (b, m)]
            };
            for &(r, c) in local {
                out[i] = (r0 + r, c0 + c);
                i += 1;
            }
        }
        out
    }

    /// Fixation target of a quadrant with no positive sites.
    pub fn landmark(&self, quadrant: usize) -> (usize, usize) {
        let h = self.grid_side / 2;
        let (r0, c0) = quadrant_origin(quadrant, h);
        (r0 + h / 2, c0 + h / 2)
    }

    /// Patch of each of the four order-sensitive regions, one per quadrant.
    pub fn regions(&self) -> [(usize, usize); 4] {
        let h = self.grid_side / 2;
        std::array::from_fn(|q| {
            let (r0, c0) = quadrant_origin(q, h);
            (r0 + h / 2, c0 + h / 2)
        })
    }
}

fn quadrant_origin(q: usize, half: usize) -> (usize, usize) {
    ((q / 2) * half, (q % 2) * half)
}

/// Labels of the order-sensitive scenario for a visiting order
/// (`order[k]` = region visited k-th): `y[0]` = region 0 visited before
/// region 1; `y[1 + j]`, `y[5 + j]`, `y[9 + j]` = region `j` visited first,
/// second, third; `y[13]` = region 0 visited last.
pub fn order_labels(order: [usize; 4]) -> Labels {
    let mut rank = [0usize; 4];
    for (k, &r) in order.iter().enumerate() {
        rank[r] = k;
    }
    let mut y = [0u8; NUM_LABELS];
    y[0] = u8::from(rank[0] < rank[1]);
    for step in 0..3 {
        y[1 + 4 * step + order[step]] = 1;
    }
    y[13] = u8::from(order[3] == 0);
    y
}

const PHASE_MS: i64 = 2000;
const PHASE_JITTER_MS: i64 = 150;

struct Canvas {
    side: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(side: usize, background: f64) -> Self {
        Self {
            side,
            px: vec![background; side * side],
        }
    }

    /// Adds a Gaussian blob of peak `amp` centred on `(cx, cy)` pixels.
    fn blob(&mut self, cx: f64, cy: f64, sigma: f64, amp: f64) {
        let inv = 1.0 / (2.0 * sigma * sigma);
        for r in 0..self.side {
            for c in 0..self.side {
                let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                self.px[r * self.side + c] += amp * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }

    fn into_image(self, noise: f64, rng: &mut ChaCha8Rng) -> GrayImage {
        let dist = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
        let side = self.side as u32;
        let mut img = GrayImage::new(side, side);
        for (i, v) in self.px.into_iter().enumerate() {
            let n = if noise > 0.0 { dist.sample(rng) } else { 0.0 };
            let q = ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(i as u32 % side, i as u32 / side, image::Luma([q]));
        }
        img
    }
}

fn patch_center_norm(patch: (usize, usize), g: usize) -> (f64, f64) {
    ((patch.1 as f64 + 0.5) / g as f64, (patch.0 as f64 + 0.5) / g as f64)
}

const WORDS: [&str; 12] = [
    "there", "is", "a", "subtle", "opacity", "near", "the", "left", "right", "base", "no", "change",
];

/// Fills one phase with contiguous words of one sentence and fixations on
/// `targets` (cycled), returning the phase end.
#[allow(clippy::too_many_arguments)]
fn emit_phase(
    sc: &Scenario,
    rng: &mut ChaCha8Rng,
    phase: usize,
    t0: i64,
    targets: &[(usize, usize)],
    words: &mut Vec<TranscriptWord>,
    fixations: &mut Vec<FixationEvent>,
) -> i64 {
    let len = PHASE_MS + rng.gen_range(-PHASE_JITTER_MS..=PHASE_JITTER_MS);
    let t1 = t0 + len;

    let n_words = rng.gen_range(4..=6);
    let mut cuts: Vec<i64> = (1..n_words)
        .map(|i| t0 + len * i / n_words + rng.gen_range(-40..=40))
        .collect();
    cuts.insert(0, t0);
    cuts.push(t1);
    for w in cuts.windows(2) {
        words.push(TranscriptWord {
            sentence_id: phase as u32,
            word: WORDS[rng.gen_range(0..WORDS.len())].to_string(),
            t_start_ms: w[0],
            t_end_ms: w[1],
        });
    }

    let g = sc.grid_side;
    let jitter = Normal::new(0.0, sc.gaze_jitter / g as f64).expect("finite jitter");
    let mut t = t0 + rng.gen_range(0..40);
    let mut k = rng.gen_range(0..targets.len().max(1));
    loop {
        let dur = rng.gen_range(150..=350);
        if t + dur > t1 {
            break;
        }
        let (x, y) = if targets.is_empty() || rng.gen_bool(sc.distractor_rate) {
            (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))
        } else {
            let (cx, cy) = patch_center_norm(targets[k % targets.len()], g);
            k += 1;
            (cx + jitter.sample(rng), cy + jitter.sample(rng))
        };
        fixations.push(FixationEvent::new(t, t + dur, x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)));
        t += dur + rng.gen_range(20..=60);
    }
    t1
}

/// Removes every fixation whose midpoint falls in one of `ceil(rate · n)`
/// randomly chosen words.
fn drop_word_gaze(rng: &mut ChaCha8Rng, rate: f64, words: &[TranscriptWord], fixations: &mut Vec<FixationEvent>) {
    let n = words.len();
    let k = ((rate * n as f64).ceil() as usize).min(n);
    let chosen: Vec<&TranscriptWord> = index::sample(rng, n, k).into_iter().map(|i| &words[i]).collect();
    fixations.retain(|f| {
        let mid2 = f.t_start_ms + f.t_end_ms;
        !chosen.iter().any(|w| 2 * w.t_start_ms <= mid2 && mid2 < 2 * w.t_end_ms)
    });
}

/// Identifier of the `index`-th session of a scenario.
pub fn session_id(kind: ScenarioKind, index: usize) -> String {
    format!("{kind}_{index:05}")
}

/// One session drawn from `rng`.
pub fn generate_session(sc: &Scenario, id: &str, rng: &mut ChaCha8Rng) -> Session {
    let g = sc.grid_side;
    let px_per_patch = (sc.image_side / g) as f64;
    let sigma = 0.6 * px_per_patch;
    let mut canvas = Canvas::new(sc.image_side, 0.1);
    let center_px = |p: (usize, usize)| ((p.1 as f64 + 0.5) * px_per_patch, (p.0 as f64 + 0.5) * px_per_patch);

    let mut targets: [Vec<(usize, usize)>; NUM_GAZE_TOKENS] = Default::default();
    let labels = match sc.kind {
        ScenarioKind::Separable | ScenarioKind::DropoutHeavy => {
            let sites = sc.label_sites();
            let mut y = [0u8; NUM_LABELS];
            let mut q_of = 0;
            for (j, &site) in sites.iter().enumerate() {
                // Sites are listed quadrant by quadrant: 4, 4, 3, 3.
                q_of = match j {
                    0..=3 => 0,
                    4..=7 => 1,
                    8..=10 => 2,
                    _ => 3,
                };
                if rng.gen_bool(sc.positive_rate) {
                    y[j] = 1;
                    let (cx, cy) = center_px(site);
                    canvas.blob(cx, cy, sigma, sc.peak_brightness - 0.1);
                    targets[q_of].push(site);
                }
            }
            debug_assert_eq!(q_of, 3);
            for (q, t) in targets.iter_mut().enumerate() {
                if t.is_empty() {
                    t.push(sc.landmark(q));
                }
            }
            y
        }
        ScenarioKind::OrderSensitive => {
            let regions = sc.regions();
            let mut order = [0usize, 1, 2, 3];
            order.shuffle(rng);
            let peak = sc.peak_brightness + sc.peak_jitter * rng.gen_range(-1.0..=1.0);
            for (rank, &r) in order.iter().enumerate() {
                let (cx, cy) = center_px(regions[r]);
                let amp = peak - sc.brightness_step * rank as f64 - 0.1;
                canvas.blob(cx, cy, sigma, amp.max(0.0));
                targets[rank].push(regions[r]);
            }
            order_labels(order)
        }
    };

    let mut words = Vec::new();
    let mut fixations = Vec::new();
    let mut t = rng.gen_range(0..500);
    for (phase, tg) in targets.iter().enumerate() {
        t = emit_phase(sc, rng, phase, t, tg, &mut words, &mut fixations);
    }
    if sc.dropout_rate > 0.0 {
        drop_word_gaze(rng, sc.dropout_rate, &words, &mut fixations);
    }
    Session {
        id: id.to_string(),
        fixations,
        words,
        image: canvas.into_image(sc.pixel_noise, rng),
        labels,
    }
}

/// All sessions of a scenario, in index order. Each session draws from its
/// own rng stream seeded by `(seed, id)`.
pub fn generate_sessions(sc: &Scenario) -> Result<Vec<Session>> {
    sc.validate()?;
    Ok((0..sc.n_samples)
        .map(|i| {
            let id = session_id(sc.kind, i);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sc.seed, &id));
            generate_session(sc, &id, &mut rng)
        })
        .collect())
}

/// 80/10/10 split by the SHA-256 order of the ids. Returned in input order.
pub fn assign_splits(ids: &[String]) -> Vec<Split> {
    let n = ids.len();
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let mut order: Vec<(Vec<u8>, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (Sha256::digest(id.as_bytes()).to_vec(), i))
        .collect();
    order.sort();
    let mut out = vec![Split::Test; n];
    for (rank, (_, i)) in order.into_iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Writes every session of `sc` under `out_dir` plus `manifest.jsonl`.
pub fn generate_corpus(sc: &Scenario, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    if sc.n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sessions = generate_sessions(sc)?;
    let ids: Vec<String> = sessions.iter().map(|s| s.id.clone()).collect();
    let splits = assign_splits(&ids);
    let mut entries = Vec::with_capacity(sessions.len());
    for (s, split) in sessions.iter().zip(splits) {
        let dir = write_session(out_dir, s)?;
        let dir = dir.file_name().expect("session dir").to_string_lossy().into_owned();
        entries.push(ManifestEntry {
            sample_id: s.id.clone(),
            dir,
            split,
        });
    }
    write_manifest(out_dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}
