//! Gaze heatmaps on the visual patch grid, four-way temporal segmentation
//! and per-token top-k patch targets, plus the random / shuffled ablations.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, FixationEvent, SentenceGazeGroup};
use crate::session::Session;
use crate::NUM_GAZE_TOKENS;

/// Square grid of image patches, indexed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    side: usize,
}

impl PatchGrid {
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::Config("patch grid side must be positive".into()));
        }
        Ok(Self { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_patches(&self) -> usize {
        self.side * self.side
    }

    pub fn patch_id(&self, row: usize, col: usize) -> usize {
        row * self.side + col
    }

    /// Patch center in normalized image coordinates `(x, y)`.
    pub fn center(&self, patch_id: usize) -> (f64, f64) {
        let (row, col) = (patch_id / self.side, patch_id % self.side);
        let g = self.side as f64;
        ((col as f64 + 0.5) / g, (row as f64 + 0.5) / g)
    }

    /// Patch containing the normalized point `(x, y)`.
    pub fn patch_at(&self, x: f64, y: f64) -> usize {
        let cell = |v: f64| ((v * self.side as f64).floor().max(0.0) as usize).min(self.side - 1);
        self.patch_id(cell(y), cell(x))
    }
}

/// Gaze attention over patches; either all zeros or normalized to sum 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn argmax(&self) -> Option<usize> {
        topk_patches(self, 1).first().copied()
    }
}

/// Four temporally ordered lists of target patch ids, one per gaze token.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GazeSupervision {
    pub token_targets: [Vec<usize>; NUM_GAZE_TOKENS],
}

impl GazeSupervision {
    pub fn new(token_targets: [Vec<usize>; NUM_GAZE_TOKENS]) -> Self {
        Self { token_targets }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// List sizes `K_1..K_4`.
    pub fn sizes(&self) -> [usize; NUM_GAZE_TOKENS] {
        std::array::from_fn(|i| self.token_targets[i].len())
    }

    pub fn is_empty(&self) -> bool {
        self.token_targets.iter().all(Vec::is_empty)
    }

    pub fn validate(&self, num_patches: usize) -> Result<()> {
        for (i, list) in self.token_targets.iter().enumerate() {
            for (j, &id) in list.iter().enumerate() {
                if id >= num_patches {
                    return Err(Error::PatchIndex { index: id, num_patches });
                }
                if list[..j].contains(&id) {
                    return Err(Error::Validation(format!(
                        "gaze token {}: duplicate patch id {id}",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the gaze-to-patch conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisionParams {
    pub grid: PatchGrid,
    pub sigma_norm: f64,
    pub k: usize,
    pub duration_weighted: bool,
    /// Pool fixations outside every word span into the bin containing them.
    pub include_unattributed: bool,
}

impl SupervisionParams {
    /// σ of one patch width, top-5, duration weighting on.
    pub fn with_grid(side: usize) -> Result<Self> {
        Ok(Self {
            grid: PatchGrid::new(side)?,
            sigma_norm: 1.0 / side as f64,
            k: 5,
            duration_weighted: true,
            include_unattributed: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_norm > 0.0 && self.sigma_norm.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_norm must be positive, got {}",
                self.sigma_norm
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for SupervisionParams {
    fn default() -> Self {
        Self::with_grid(16).expect("16 is a valid grid side")
    }
}

/// Sums an isotropic Gaussian per fixation at every patch center.
pub fn rasterize_heatmap(
    samples: &[FixationEvent],
    grid: PatchGrid,
    sigma_norm: f64,
    duration_weighted: bool,
) -> Heatmap {
    let two_sigma_sq = 2.0 * sigma_norm * sigma_norm;
    let mut values = vec![0.0; grid.num_patches()];
    for s in samples {
        let w = if duration_weighted { s.duration_ms() as f64 } else { 1.0 };
        if w == 0.0 {
            continue;
        }
        for (p, v) in values.iter_mut().enumerate() {
            let (cx, cy) = grid.center(p);
            let d2 = (cx - s.x_norm).powi(2) + (cy - s.y_norm).powi(2);
            *v += w * (-d2 / two_sigma_sq).exp();
        }
    }
    let total: f64 = values.iter().sum();
    if total > 0.0 {
        values.iter_mut().for_each(|v| *v /= total);
    }
    Heatmap { values }
}

/// Splits `[t0, t1)` into `n_bins` equal half-open bins and assigns each group
/// by its midpoint. Midpoints outside the span fall into the nearest end bin.
pub fn segment_scanpath(
    groups: &[SentenceGazeGroup],
    span: (i64, i64),
    n_bins: usize,
) -> Result<Vec<Vec<SentenceGazeGroup>>> {
    let (t0, t1) = span;
    if t1 <= t0 {
        return Err(Error::Validation(format!("empty session span [{t0}, {t1})")));
    }
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be positive".into()));
    }
    let width = i128::from(t1 - t0);
    let mut bins = vec![Vec::new(); n_bins];
    for g in groups {
        let offset = i128::from(g.t_mid_ms - t0);
        let bin = (offset * n_bins as i128).div_euclid(width).clamp(0, n_bins as i128 - 1);
        bins[bin as usize].push(g.clone());
    }
    Ok(bins)
}

/// Up to `k` patch ids with the largest positive mass, descending, ties by id.
pub fn topk_patches(h: &Heatmap, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..h.values.len()).filter(|&p| h.values[p] > 0.0).collect();
    ids.sort_by(|&a, &b| h.values[b].total_cmp(&h.values[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Start of the earliest and end of the latest timed event in the session.
pub fn session_span(session: &Session) -> Option<(i64, i64)> {
    let starts = session
        .fixations
        .iter()
        .map(|f| f.t_start_ms)
        .chain(session.words.iter().map(|w| w.t_start_ms));
    let ends = session
        .fixations
        .iter()
        .map(|f| f.t_end_ms)
        .chain(session.words.iter().map(|w| w.t_end_ms));
    let t0 = starts.min()?;
    let t1 = ends.max()?;
    (t1 > t0).then_some((t0, t1))
}

/// Fixations pooled per temporal bin, the input to each bin's heatmap.
pub fn binned_fixations(
    session: &Session,
    params: &SupervisionParams,
) -> Result<[Vec<FixationEvent>; NUM_GAZE_TOKENS]> {
    let mut pooled: [Vec<FixationEvent>; NUM_GAZE_TOKENS] = Default::default();
    let Some(span) = session_span(session) else {
        return Ok(pooled);
    };
    let alignment = ingest::align_words(&session.fixations, &session.words);
    let mut groups = ingest::aggregate_sentences(&alignment);
    if params.include_unattributed {
        groups.extend(alignment.unattributed.iter().map(|f| SentenceGazeGroup {
            sentence_id: u32::MAX,
            t_mid_ms: (f.t_start_ms + f.t_end_ms).div_euclid(2),
            samples: vec![*f],
        }));
    }
    let bins = segment_scanpath(&groups, span, NUM_GAZE_TOKENS)?;
    for (slot, bin) in pooled.iter_mut().zip(bins) {
        slot.extend(bin.into_iter().flat_map(|g| g.samples));
        slot.sort_by_key(|f| (f.t_start_ms, f.t_end_ms));
    }
    Ok(pooled)
}

/// Temporal bins → pooled heatmap per bin → top-k patch ids per gaze token.
pub fn build_supervision(session: &Session, params: &SupervisionParams) -> Result<GazeSupervision> {
    params.validate()?;
    let pooled = binned_fixations(session, params)?;
    let token_targets = pooled.map(|samples| {
        let h = rasterize_heatmap(&samples, params.grid, params.sigma_norm, params.duration_weighted);
        topk_patches(&h, params.k)
    });
    Ok(GazeSupervision { token_targets })
}

/// Replaces every list by the same number of distinct, uniformly drawn ids.
pub fn ablate_random(s: &GazeSupervision, grid: PatchGrid, seed: u64) -> Result<GazeSupervision> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = grid.num_patches();
    let mut out = GazeSupervision::empty();
    for (dst, src) in out.token_targets.iter_mut().zip(&s.token_targets) {
        if src.len() > p {
            return Err(Error::Validation(format!(
                "cannot draw {} distinct ids from {p} patches",
                src.len()
            )));
        }
        *dst = rand::seq::index::sample(&mut rng, p, src.len()).into_vec();
    }
    Ok(out)
}

/// Reassigns the four lists to token slots by a random permutation.
///
/// When at least two distinct non-empty lists exist, permutations that leave
/// the slot assignment unchanged are redrawn. `within_lists` additionally
/// shuffles the ids inside each list.
pub fn ablate_shuffle(s: &GazeSupervision, seed: u64, within_lists: bool) -> GazeSupervision {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distinct: Vec<&Vec<usize>> = s.token_targets.iter().filter(|l| !l.is_empty()).collect();
    distinct.sort();
    distinct.dedup();
    let must_move = distinct.len() >= 2;

    let mut perm: [usize; NUM_GAZE_TOKENS] = std::array::from_fn(|i| i);
    let mut out = loop {
        perm.shuffle(&mut rng);
        let candidate = GazeSupervision::new(perm.map(|src| s.token_targets[src].clone()));
        if !must_move || candidate != *s {
            break candidate;
        }
    };
    if within_lists {
        for list in out.token_targets.iter_mut() {
            list.shuffle(&mut rng);
        }
    }
    out
}

/// Applies the permutation `perm` (slot i receives list `perm[i]`).
pub fn permute_slots(s: &GazeSupervision, perm: [usize; NUM_GAZE_TOKENS]) -> GazeSupervision {
    GazeSupervision::new(perm.map(|src| s.token_targets[src].clone()))
}

/// One line of the supervision file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRecord {
    pub sample_id: String,
    pub labels: Vec<u8>,
    pub gaze_tokens: Vec<Vec<usize>>,
    #[serde(rename = "grid_G")]
    pub grid_g: usize,
    pub k: usize,
    pub sigma_norm: f64,
}

impl SupervisionRecord {
    pub fn supervision(&self) -> Result<GazeSupervision> {
        let lists: [Vec<usize>; NUM_GAZE_TOKENS] = self.gaze_tokens.clone().try_into().map_err(|v: Vec<_>| {
            Error::Validation(format!(
                "sample {}: expected {NUM_GAZE_TOKENS} gaze token lists, found {}",
                self.sample_id,
                v.len()
            ))
        })?;
        let s = GazeSupervision::new(lists);
        s.validate(self.grid_g * self.grid_g)?;
        Ok(s)
    }
}

pub fn write_supervision_file(path: impl AsRef<Path>, records: &[SupervisionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_supervision_file(path: impl AsRef<Path>) -> Result<Vec<SupervisionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SupervisionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::TranscriptWord;
    use proptest::prelude::*;

    fn group(t_mid_ms: i64) -> SentenceGazeGroup {
        SentenceGazeGroup {
            sentence_id: t_mid_ms as u32,
            t_mid_ms,
            samples: vec![],
        }
    }

    fn heat(values: Vec<f64>) -> Heatmap {
        Heatmap { values }
    }

    #[test]
    fn empty_samples_give_zero_heatmap() {
        let h = rasterize_heatmap(&[], PatchGrid::new(4).unwrap(), 0.1, true);
        assert!(h.is_empty());
        assert_eq!(h.values.len(), 16);
    }

    #[test]
    fn single_fixation_peaks_at_its_patch() {
        let grid = PatchGrid::new(16).unwrap();
        let (x, y) = grid.center(0);
        let h = rasterize_heatmap(&[FixationEvent::new(0, 100, x, y)], grid, 0.01, true);
        assert_eq!(h.argmax(), Some(0));
        let total: f64 = h.values.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    /// Scalar-loop evaluation of the weighted Gaussian sum, kept independent
    /// of the vectorised implementation.
    fn heat_oracle(fix: &[(i64, f64, f64)], g: usize, sigma: f64, patch: usize) -> f64 {
        let (row, col) = (patch / g, patch % g);
        let cx = (col as f64 + 0.5) / g as f64;
        let cy = (row as f64 + 0.5) / g as f64;
        let mut v = 0.0;
        for &(dur, x, y) in fix {
            let dx = cx - x;
            let dy = cy - y;
            v += dur as f64 * f64::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
        v
    }

    #[test]
    fn duration_weighting_ratio() {
        let grid = PatchGrid::new(16).unwrap();
        let (x0, y0) = grid.center(0);
        let (x5, y5) = grid.center(5);
        let fix = [FixationEvent::new(0, 100, x0, y0), FixationEvent::new(100, 400, x5, y5)];
        let sigma = 0.01;
        let h = rasterize_heatmap(&fix, grid, sigma, true);
        let raw = [(100, x0, y0), (300, x5, y5)];
        let expected = heat_oracle(&raw, 16, sigma, 5) / heat_oracle(&raw, 16, sigma, 0);
        assert!((expected - 3.0).abs() < 1e-6);
        assert!((h.values[5] / h.values[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn unweighted_ignores_duration() {
        let grid = PatchGrid::new(8).unwrap();
        let (x0, y0) = grid.center(0);
        let (x9, y9) = grid.center(9);
        let fix = [FixationEvent::new(0, 10, x0, y0), FixationEvent::new(10, 1000, x9, y9)];
        let h = rasterize_heatmap(&fix, grid, 0.02, false);
        assert!((h.values[0] - h.values[9]).abs() < 1e-12);
    }

    #[test]
    fn equal_quartiles() {
        let groups: Vec<_> = [500, 1500, 2500, 3500].into_iter().map(group).collect();
        let bins = segment_scanpath(&groups, (0, 4000), 4).unwrap();
        for (i, bin) in bins.iter().enumerate() {
            assert_eq!(bin.len(), 1);
            assert_eq!(bin[0].t_mid_ms, 500 + 1000 * i as i64);
        }
    }

    #[test]
    fn all_in_first_quartile() {
        let groups: Vec<_> = [10, 200, 900].into_iter().map(group).collect();
        let bins = segment_scanpath(&groups, (0, 4000), 4).unwrap();
        assert_eq!(bins[0].len(), 3);
        assert!(bins[1..].iter().all(Vec::is_empty));
    }

    #[test]
    fn boundary_goes_to_later_bin() {
        let bins = segment_scanpath(&[group(1000)], (0, 4000), 4).unwrap();
        assert_eq!(bins[1].len(), 1);
        assert!(bins[0].is_empty());
    }

    #[test]
    fn empty_span_rejected() {
        assert!(segment_scanpath(&[], (10, 10), 4).is_err());
    }

    #[test]
    fn topk_examples() {
        assert!(topk_patches(&heat(vec![0.0; 8]), 5).is_empty());
        let mut v = vec![0.0; 8];
        v[3] = 0.5;
        v[7] = 0.3;
        v[1] = 0.2;
        assert_eq!(topk_patches(&heat(v), 2), vec![3, 7]);
        let mut v = vec![0.0; 10];
        v[4] = 0.5;
        v[9] = 0.5;
        assert_eq!(topk_patches(&heat(v), 1), vec![4]);
    }

    #[test]
    fn topk_never_returns_zero_mass() {
        let mut v = vec![0.0; 16];
        v[2] = 1.0;
        assert_eq!(topk_patches(&heat(v), 5), vec![2]);
    }

    fn words_for(spans: &[(u32, i64, i64)]) -> Vec<TranscriptWord> {
        spans
            .iter()
            .map(|&(sid, a, b)| TranscriptWord {
                sentence_id: sid,
                word: "w".into(),
                t_start_ms: a,
                t_end_ms: b,
            })
            .collect()
    }

    #[test]
    fn no_fixations_gives_empty_supervision() {
        let session = Session {
            words: words_for(&[(0, 0, 500), (1, 500, 1000)]),
            ..Session::default()
        };
        let s = build_supervision(&session, &SupervisionParams::default()).unwrap();
        assert!(s.is_empty());
    }

    /// One sentence per quartile, each fixating a distinct patch center.
    fn quartile_session(grid: PatchGrid, patches: [Option<usize>; 4]) -> Session {
        let mut fixations = Vec::new();
        let mut spans = Vec::new();
        for (q, patch) in patches.iter().enumerate() {
            let t0 = q as i64 * 1000;
            spans.push((q as u32, t0 + 100, t0 + 900));
            if let Some(p) = patch {
                let (x, y) = grid.center(*p);
                fixations.push(FixationEvent::new(t0 + 200, t0 + 500, x, y));
            }
        }
        Session {
            fixations,
            words: words_for(&spans),
            ..Session::default()
        }
    }

    #[test]
    fn quartiles_follow_visitation_order() {
        let params = SupervisionParams::with_grid(8).unwrap();
        let order = [27, 3, 60, 12];
        let session = quartile_session(params.grid, order.map(Some));
        let s = build_supervision(&session, &SupervisionParams { k: 1, ..params }).unwrap();
        assert_eq!(s.token_targets, order.map(|p| vec![p]));
    }

    #[test]
    fn missing_quartiles_have_no_targets() {
        let params = SupervisionParams::with_grid(8).unwrap();
        let session = quartile_session(params.grid, [Some(9), None, Some(40), None]);
        let s = build_supervision(&session, &params).unwrap();
        assert_eq!(s.sizes()[1], 0);
        assert_eq!(s.sizes()[3], 0);
        assert_eq!(s.token_targets[0][0], 9);
        assert_eq!(s.token_targets[2][0], 40);
    }

    #[test]
    fn random_ablation_preserves_sizes() {
        let grid = PatchGrid::new(8).unwrap();
        let s = GazeSupervision::new([vec![1, 2, 3, 4, 5], vec![], vec![7, 8, 9], vec![10, 11]]);
        let r = ablate_random(&s, grid, 7).unwrap();
        assert_eq!(r.sizes(), [5, 0, 3, 2]);
        r.validate(64).unwrap();
        assert_eq!(r, ablate_random(&s, grid, 7).unwrap());
        assert_eq!(
            ablate_random(&GazeSupervision::empty(), grid, 7).unwrap(),
            GazeSupervision::empty()
        );
    }

    #[test]
    fn permutation_application() {
        let s = GazeSupervision::new([vec![1], vec![2], vec![3], vec![4]]);
        // slot i takes list perm[i]; (2,3,4,1) in 1-based terms
        let p = permute_slots(&s, [1, 2, 3, 0]);
        assert_eq!(p.token_targets, [vec![2], vec![3], vec![4], vec![1]]);
    }

    #[test]
    fn shuffle_of_empty_is_identity() {
        assert_eq!(
            ablate_shuffle(&GazeSupervision::empty(), 3, false),
            GazeSupervision::empty()
        );
    }

    #[test]
    fn shuffle_never_returns_input_when_lists_differ() {
        let s = GazeSupervision::new([vec![1, 2], vec![3], vec![], vec![]]);
        for seed in 0..200 {
            assert_ne!(ablate_shuffle(&s, seed, false), s);
        }
    }

    fn supervision_strategy() -> impl Strategy<Value = GazeSupervision> {
        proptest::array::uniform4(proptest::collection::btree_set(0usize..64, 0..6))
            .prop_map(|sets| GazeSupervision::new(sets.map(|s| s.into_iter().collect())))
    }

    proptest! {
        #[test]
        fn shuffle_preserves_contents(s in supervision_strategy(), seed in any::<u64>(), within in any::<bool>()) {
            let out = ablate_shuffle(&s, seed, within);
            let mut before: Vec<usize> = s.token_targets.iter().flatten().copied().collect();
            let mut after: Vec<usize> = out.token_targets.iter().flatten().copied().collect();
            before.sort_unstable();
            after.sort_unstable();
            prop_assert_eq!(before, after);
            let mut ks = s.sizes();
            let mut ko = out.sizes();
            ks.sort_unstable();
            ko.sort_unstable();
            prop_assert_eq!(ks, ko);
        }

        #[test]
        fn random_preserves_sizes(s in supervision_strategy(), seed in any::<u64>()) {
            let out = ablate_random(&s, PatchGrid::new(8).unwrap(), seed).unwrap();
            prop_assert_eq!(out.sizes(), s.sizes());
            prop_assert!(out.validate(64).is_ok());
        }

        #[test]
        fn heatmap_normalized(
            fix in proptest::collection::vec((0i64..500, 0.0f64..=1.0, 0.0f64..=1.0), 1..20),
            g in 2usize..12,
            sigma in 0.02f64..0.5,
        ) {
            let mut t = 0;
            let events: Vec<_> = fix.iter().map(|&(d, x, y)| {
                let e = FixationEvent::new(t, t + d + 1, x, y);
                t += d + 1;
                e
            }).collect();
            let h = rasterize_heatmap(&events, PatchGrid::new(g).unwrap(), sigma, true);
            let total: f64 = h.values.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(h.values.iter().all(|&v| v >= 0.0));
        }
    }
}
