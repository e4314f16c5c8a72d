//! Two-stage optimization: gaze tokens first, then the classifier jointly
//! with language modeling. Also hosts the finite-difference gradient check.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Manifest, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::heads::{self, LossBundle};
use crate::model::{build_sequence, forward_traced, ModelConfig, ModelState, ParamGroup, ParamView, Sample, Stage};
use crate::supervision::{ablate_random, ablate_shuffle, GazeSupervision, PatchGrid};
use crate::NUM_GAZE_TOKENS;

/// Which gaze supervision the gaze tokens are trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Original,
    Random,
    Shuffled,
    None,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Original => "original",
            Variant::Random => "random",
            Variant::Shuffled => "shuffled",
            Variant::None => "none",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Variant::Original),
            "random" => Ok(Variant::Random),
            "shuffled" => Ok(Variant::Shuffled),
            "none" => Ok(Variant::None),
            other => Err(Error::Config(format!(
                "unknown supervision variant `{other}` (expected original, random, shuffled or none)"
            ))),
        }
    }
}

/// Stable 64-bit seed from a base seed and a string tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Supervision actually used for `sample_id` under `variant`. Ablations are
/// re-seeded per sample from `(seed, sample_id)`.
pub fn apply_variant(
    sup: &GazeSupervision,
    variant: Variant,
    grid: PatchGrid,
    seed: u64,
    sample_id: &str,
) -> Result<Option<GazeSupervision>> {
    let s = derive_seed(seed, sample_id);
    Ok(match variant {
        Variant::Original => Some(sup.clone()),
        Variant::Random => Some(ablate_random(sup, grid, s)?),
        Variant::Shuffled => Some(ablate_shuffle(sup, s, false)),
        Variant::None => None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub lambda: f64,
    /// Defaults to 1e-3 in stage 1 and 3e-4 in stage 2.
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Weight of an optional gaze term added to the stage-2 objective.
    pub beta_gaze: f64,
    /// Intermediate checkpoint period in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            lambda: 0.7,
            lr: None,
            batch_size: 8,
            steps: 500,
            seed: 0,
            variant: Variant::Original,
            beta_gaze: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn stage(&self) -> Result<Stage> {
        Stage::from_number(self.stage)
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(if self.stage == 1 { 1e-3 } else { 3e-4 })
    }

    pub fn validate(&self) -> Result<()> {
        let stage = self.stage()?;
        heads::check_lambda(self.lambda)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(self.beta_gaze.is_finite() && self.beta_gaze >= 0.0) {
            return Err(Error::Config("beta_gaze must be non-negative".into()));
        }
        if stage == Stage::Gaze && self.variant == Variant::None {
            return Err(Error::Config("supervision variant `none` cannot train stage 1".into()));
        }
        Ok(())
    }
}

/// Reads a flat `key = value` file. Keys naming a [`ModelConfig`] field
/// override the model defaults; every other key must be a [`TrainConfig`]
/// field.
pub fn load_config_file(path: impl AsRef<Path>) -> Result<(TrainConfig, ModelConfig)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<(TrainConfig, ModelConfig)> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut model = toml::Table::try_from(ModelConfig::default()).map_err(|e| Error::Internal(e.to_string()))?;
    let mut train = toml::Table::new();
    for (k, v) in table {
        if v.is_table() || v.is_array() {
            return Err(Error::Config(format!("key `{k}`: only flat scalar values are allowed")));
        }
        if model.contains_key(&k) {
            let v = match (&model[&k], v) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            model.insert(k, v);
        } else {
            train.insert(k, v);
        }
    }
    let train: TrainConfig = train
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let model: ModelConfig = model
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    train.validate()?;
    model.validate()?;
    Ok((train, model))
}

/// Scalar objective evaluated on one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Gaze,
    Cls,
    Lm,
    /// `(1 - λ)·L_lm + λ·L_cls + β·L_gaze`.
    Combined {
        lambda: f64,
        beta_gaze: f64,
    },
}

/// Destination for gradients: only groups in `view` are written.
pub struct GradSink<'a> {
    pub view: &'a ParamView,
    pub grads: &'a mut ModelState,
}

/// Loss of `objective` on one sample; accumulates gradients into `sink`
/// when given.
pub fn sample_objective(
    state: &ModelState,
    sample: &Sample,
    sup: Option<&GazeSupervision>,
    objective: Objective,
    mut sink: Option<&mut GradSink<'_>>,
) -> Result<LossBundle> {
    let (mut tokens, layout) = build_sequence(sample, &state.config)?;
    let (w_gaze, w_lm, w_cls, lambda) = match objective {
        Objective::Gaze => (1.0, 0.0, 0.0, None),
        Objective::Cls => (0.0, 0.0, 1.0, None),
        Objective::Lm => (0.0, 1.0, 0.0, None),
        Objective::Combined { lambda, beta_gaze } => {
            heads::check_lambda(lambda)?;
            (beta_gaze, 1.0 - lambda, lambda, Some(lambda))
        }
    };
    let gaze_only = objective == Objective::Gaze;
    if gaze_only {
        // Causality: nothing after the last placeholder affects its row.
        tokens.truncate(layout.gaze_positions[NUM_GAZE_TOKENS - 1] + 1);
    }
    let with_lm = !gaze_only && objective != Objective::Cls;
    let trace = forward_traced(&tokens, &sample.image, state, with_lm)?;
    let h = trace.hidden.view();
    let mut dh = Array2::zeros(h.raw_dim());
    let mut bundle = LossBundle {
        lambda,
        ..LossBundle::default()
    };

    if gaze_only || w_gaze > 0.0 {
        let sup = sup.ok_or_else(|| Error::Config(format!("sample `{}` has no gaze supervision", sample.id)))?;
        let hg = heads::gaze_hidden(h, &layout);
        let logits = hg.dot(&state.gaze_head.w.t()) + &state.gaze_head.b;
        let (l, dz) = heads::loss_gaze_grad(logits.view(), sup)?;
        bundle.l_gaze = Some(l);
        if let Some(s) = sink.as_deref_mut() {
            let dz = dz * w_gaze;
            if s.view.contains(ParamGroup::GazeHead) {
                s.grads.gaze_head.w += &dz.t().dot(&hg);
                s.grads.gaze_head.b += &dz.sum_axis(Axis(0));
            }
            if s.view.needs_block_grads() {
                let dhg = dz.dot(&state.gaze_head.w);
                for (r, &p) in layout.gaze_positions.iter().enumerate() {
                    let mut row = dh.row_mut(p);
                    row += &dhg.row(r);
                }
            }
        }
    }

    if !gaze_only && objective != Objective::Lm {
        let h_dec = h.row(layout.decision_index);
        let z = heads::cls_logits(h_dec, &state.cls_head);
        let (l, dz) = heads::loss_cls_grad(z.view(), &sample.labels);
        bundle.l_cls = Some(l);
        if let Some(s) = sink.as_deref_mut().filter(|_| w_cls != 0.0) {
            let dz = dz * w_cls;
            if s.view.contains(ParamGroup::ClsHead) {
                s.grads.cls_head.w += &dz.view().insert_axis(Axis(1)).dot(&h_dec.insert_axis(Axis(0)));
                s.grads.cls_head.b += &dz;
            }
            if s.view.needs_block_grads() {
                let mut row = dh.row_mut(layout.decision_index);
                row += &state.cls_head.w.t().dot(&dz);
            }
        }
    }

    let mut d_logits = None;
    if let Some(logits) = &trace.lm_logits {
        let (l, dl) = heads::loss_lm_grad(logits.view(), &tokens, &layout);
        bundle.l_lm = Some(l);
        if w_lm != 0.0 {
            d_logits = Some(dl * w_lm);
        }
    }

    bundle.l_combined = match objective {
        Objective::Gaze => bundle.l_gaze.expect("computed"),
        Objective::Cls => bundle.l_cls.expect("computed"),
        Objective::Lm => bundle.l_lm.expect("computed"),
        Objective::Combined { lambda, beta_gaze } => {
            let base = heads::loss_combined(bundle.l_lm.expect("computed"), bundle.l_cls.expect("computed"), lambda)?;
            if beta_gaze > 0.0 {
                base + beta_gaze * bundle.l_gaze.expect("computed")
            } else {
                base
            }
        }
    };

    if let Some(s) = sink {
        trace.backward(state, dh, d_logits.as_ref(), s.view, s.grads);
    }
    Ok(bundle)
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

/// Denominator floor for the relative error, so that entries whose true
/// gradient is (near) zero compare on an absolute scale. Central differences
/// at step 1e-5 on losses of order 1 carry roundoff near 1e-10.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Compares the analytic gradient of `objective` with central differences
/// on every parameter in `view`, using step `1e-5 · max(1, |θ|)`.
pub fn grad_check(
    state: &ModelState,
    sample: &Sample,
    objective: Objective,
    view: &ParamView,
) -> Result<GradCheckReport> {
    let sup = sample.supervision.as_ref();
    let mut grads = state.zeros_like();
    sample_objective(
        state,
        sample,
        sup,
        objective,
        Some(&mut GradSink {
            view,
            grads: &mut grads,
        }),
    )?;
    let analytic: Vec<(String, bool, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|t| (t.name, view.contains(t.group), t.data.to_vec()))
        .collect();

    let mut work = state.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        n_checked: 0,
        max_abs_analytic: 0.0,
        max_abs_numeric: 0.0,
    };
    let set = |work: &mut ModelState, ti: usize, j: usize, v: f64| {
        work.tensors_mut().swap_remove(ti).data[j] = v;
    };
    for (ti, (name, trainable, grad)) in analytic.iter().enumerate() {
        if !*trainable {
            continue;
        }
        for (j, &a) in grad.iter().enumerate() {
            let orig = state.tensors()[ti].data[j];
            let h = 1e-5 * orig.abs().max(1.0);
            set(&mut work, ti, j, orig + h);
            let plus = sample_objective(&work, sample, sup, objective, None)?.l_combined;
            set(&mut work, ti, j, orig - h);
            let minus = sample_objective(&work, sample, sup, objective, None)?.l_combined;
            set(&mut work, ti, j, orig);
            let n = (plus - minus) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR);
            report.n_checked += 1;
            report.max_abs_analytic = report.max_abs_analytic.max(a.abs());
            report.max_abs_numeric = report.max_abs_numeric.max(n.abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}

/// Overwrites every tensor of the given groups with `N(0, std²)` draws.
/// Used to move heads and adapter factors off their zero initialization.
pub fn randomize_groups(state: &mut ModelState, groups: &[ParamGroup], std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("finite std");
    for t in state.tensors_mut() {
        if groups.contains(&t.group) {
            for v in t.data.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: u8,
    pub l_gaze: Option<f64>,
    pub l_lm: Option<f64>,
    pub l_cls: Option<f64>,
    pub l_combined: f64,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(state: &ModelState, view: &ParamView, lr: f64) -> Self {
        let sizes: Vec<usize> = state
            .tensors()
            .iter()
            .map(|t| if view.contains(t.group) { t.data.len() } else { 0 })
            .collect();
        Self {
            lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step(&mut self, state: &mut ModelState, grads: &ModelState, view: &ParamView) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let params = state.tensors_mut();
        let grads = grads.tensors();
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if !view.contains(p.group) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Endless stream of sample indices, reshuffled each epoch from a seeded rng.
struct Order {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl Order {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        Self { rng, perm, pos: 0 }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.perm[self.pos - 1]
    }
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty() && v.len() == values.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn run_stage(
    data: &[Sample],
    sups: &[Option<GazeSupervision>],
    cfg: &TrainConfig,
    mut state: ModelState,
    objective: Objective,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    let stage = cfg.stage()?;
    let view = state.trainable_view(stage)?;
    let mut adam = Adam::new(&state, &view, cfg.learning_rate());
    let mut order = Order::new(
        data.len(),
        derive_seed(cfg.seed, &format!("order/stage{}", stage.number())),
    );
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("metrics_stage{}.jsonl", stage.number()));
            Some((
                BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?),
                path,
            ))
        }
        None => None,
    };
    let manifest = |step: usize, state: &ModelState| Manifest {
        format_version: FORMAT_VERSION,
        stage: stage.number(),
        step,
        seed: cfg.seed,
        variant: cfg.variant,
        lambda: (stage == Stage::Classify).then_some(cfg.lambda),
        git_describe: crate::GIT_DESCRIBE.to_string(),
        model: state.config.clone(),
    };
    let inv_b = 1.0 / cfg.batch_size as f64;
    let mut grads = state.zeros_like();

    for step in 1..=cfg.steps {
        grads.fill(0.0);
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = order.next();
            let mut sink = GradSink {
                view: &view,
                grads: &mut grads,
            };
            losses.push(sample_objective(
                &state,
                &data[i],
                sups[i].as_ref(),
                objective,
                Some(&mut sink),
            )?);
        }
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= inv_b);
        }
        adam.step(&mut state, &grads, &view);

        let col = |f: fn(&LossBundle) -> Option<f64>| mean_opt(&losses.iter().map(f).collect::<Vec<_>>());
        let m = StepMetrics {
            step,
            stage: stage.number(),
            l_gaze: col(|b| b.l_gaze),
            l_lm: col(|b| b.l_lm),
            l_cls: col(|b| b.l_cls),
            l_combined: losses.iter().map(|b| b.l_combined).sum::<f64>() * inv_b,
        };
        if step % 50 == 0 || step == cfg.steps {
            debug!("stage {} step {step}: {:.5}", stage.number(), m.l_combined);
        }
        if let Some((w, path)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
        }
        metrics.push(m);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                Checkpoint {
                    manifest: manifest(step, &state),
                    state: state.clone(),
                }
                .save(dir.join(format!("stage{}_step{step}.gzck", stage.number())))?;
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let checkpoint = Checkpoint {
        manifest: manifest(cfg.steps, &state),
        state,
    };
    if let Some(dir) = out_dir {
        checkpoint.save(dir.join(format!("stage{}.gzck", stage.number())))?;
    }
    info!(
        "stage {} finished after {} steps, final loss {:?}",
        stage.number(),
        cfg.steps,
        metrics.last().map(|m| m.l_combined)
    );
    Ok(TrainOutput { checkpoint, metrics })
}

fn check_dataset(data: &[Sample], config: &ModelConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for s in data {
        if let Some(sup) = &s.supervision {
            sup.validate(config.num_patches())?;
        }
    }
    Ok(())
}

/// Stage 1: adapters and gaze head on the gaze loss. Every sample must carry
/// supervision (possibly empty).
pub fn train_stage1(
    data: &[Sample],
    cfg: &TrainConfig,
    state: ModelState,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.stage()? != Stage::Gaze {
        return Err(Error::Config(format!("train_stage1 called with stage = {}", cfg.stage)));
    }
    check_dataset(data, &state.config)?;
    let grid = PatchGrid::new(state.config.grid_side)?;
    let sups = data
        .iter()
        .map(|s| {
            let sup = s.supervision.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "sample `{}` has no gaze supervision; run preprocess first",
                    s.id
                ))
            })?;
            apply_variant(sup, cfg.variant, grid, cfg.seed, &s.id)
        })
        .collect::<Result<Vec<_>>>()?;
    run_stage(data, &sups, cfg, state, Objective::Gaze, out_dir)
}

/// Stage 2: adapters, classifier head and LM head on the combined loss,
/// starting from a stage-1 checkpoint.
pub fn train_stage2(
    data: &[Sample],
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.stage()? != Stage::Classify {
        return Err(Error::Config(format!("train_stage2 called with stage = {}", cfg.stage)));
    }
    let init = init.ok_or_else(|| Error::StageOrder("stage 2 requires a stage-1 checkpoint to start from".into()))?;
    if init.manifest.stage != 1 {
        return Err(Error::StageOrder(format!(
            "stage 2 must start from a stage-1 checkpoint, got a stage-{} checkpoint",
            init.manifest.stage
        )));
    }
    if init.manifest.variant != cfg.variant {
        return Err(Error::VariantMismatch {
            checkpoint: init.manifest.variant.to_string(),
            requested: cfg.variant.to_string(),
        });
    }
    check_dataset(data, &init.state.config)?;
    let grid = PatchGrid::new(init.state.config.grid_side)?;
    let sups = if cfg.beta_gaze > 0.0 {
        data.iter()
            .map(|s| match &s.supervision {
                Some(sup) => apply_variant(sup, cfg.variant, grid, cfg.seed, &s.id),
                None => Err(Error::Config(format!(
                    "beta_gaze > 0 but sample `{}` has no supervision",
                    s.id
                ))),
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![None; data.len()]
    };
    let objective = Objective::Combined {
        lambda: cfg.lambda,
        beta_gaze: cfg.beta_gaze,
    };
    run_stage(data, &sups, cfg, init.state.clone(), objective, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_sample(seed: u64) -> Sample {
        let cfg = ModelConfig::toy();
        let n = cfg.image_side();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = rand_distr::Uniform::new(0.0, 1.0);
        let img = Array2::from_shape_simple_fn((n, n), || dist.sample(&mut rng));
        let mut y = [0u8; 14];
        y[0] = 1;
        y[5] = 1;
        let sup = GazeSupervision::new([vec![0, 2], vec![1], vec![], vec![3, 0, 1]]);
        Sample::new(format!("s{seed}"), img, y, Some(sup))
    }

    fn perturbed_state() -> ModelState {
        let mut st = ModelState::init(&ModelConfig::toy(), 11).unwrap();
        for (i, g) in [ParamGroup::GazeHead, ParamGroup::ClsHead].into_iter().enumerate() {
            randomize_groups(&mut st, &[g], 0.5, 100 + i as u64);
        }
        // Only the `b` factors start at zero; randomize them so the `a`
        // gradients are not trivially zero.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dist = Normal::new(0.0, 0.3).unwrap();
        for ad in st.adapters.iter_mut() {
            for pair in [&mut ad.q, &mut ad.k, &mut ad.v, &mut ad.o] {
                pair.b.mapv_inplace(|_| dist.sample(&mut rng));
            }
        }
        st
    }

    #[test]
    fn variant_parse_and_display() {
        for v in [Variant::Original, Variant::Random, Variant::Shuffled, Variant::None] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("sorted".parse::<Variant>().is_err());
    }

    #[test]
    fn config_file_parsing() {
        let (t, m) = parse_config("stage = 2\nlambda = 0.5\nd_model = 32\nn_heads = 4\nadapter_alpha = 8\n").unwrap();
        assert_eq!(t.stage, 2);
        assert_eq!(t.lambda, 0.5);
        assert_eq!(m.d_model, 32);
        assert_eq!(m.adapter_alpha, 8.0);
        assert!((t.learning_rate() - 3e-4).abs() < 1e-15);
        assert!(parse_config("lambda = 1.5").is_err());
        assert!(parse_config("bogus = 1").is_err());
        assert!(parse_config("stage = 1\nvariant = \"none\"").is_err());
        assert!(parse_config("stage = 2\nvariant = \"none\"").is_ok());
    }

    #[test]
    fn grad_check_full_view() {
        let st = perturbed_state();
        let s = toy_sample(1);
        for obj in [
            Objective::Gaze,
            Objective::Cls,
            Objective::Lm,
            Objective::Combined {
                lambda: 0.7,
                beta_gaze: 0.3,
            },
        ] {
            let r = grad_check(&st, &s, obj, &ParamView::all()).unwrap();
            assert!(r.max_rel_error < 1e-4, "{obj:?}: {r:?}");
            assert!(r.max_abs_analytic > 0.0);
        }
    }

    #[test]
    fn stage_one_loss_independent_of_truncation() {
        let st = perturbed_state();
        let s = toy_sample(2);
        let full = {
            let (tokens, layout) = build_sequence(&s, &st.config).unwrap();
            let tr = forward_traced(&tokens, &s.image, &st, false).unwrap();
            let logits = heads::gaze_logits(tr.hidden.view(), &layout, &st.gaze_head);
            heads::loss_gaze(logits.view(), s.supervision.as_ref().unwrap()).unwrap()
        };
        let b = sample_objective(&st, &s, s.supervision.as_ref(), Objective::Gaze, None).unwrap();
        assert!((b.l_gaze.unwrap() - full).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_gives_zero_lm_head_gradient() {
        let st = perturbed_state();
        let s = toy_sample(3);
        let view = st.trainable_view(Stage::Classify).unwrap();
        let mut g = st.zeros_like();
        let b = sample_objective(
            &st,
            &s,
            None,
            Objective::Combined {
                lambda: 1.0,
                beta_gaze: 0.0,
            },
            Some(&mut GradSink {
                view: &view,
                grads: &mut g,
            }),
        )
        .unwrap();
        assert!(b.l_lm.unwrap() > 0.0);
        assert!(g.backbone.lm_head.w.iter().all(|&v| v == 0.0));
        assert!(g.backbone.lm_head.b.iter().all(|&v| v == 0.0));
        assert!(g.cls_head.w.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stage_one_zero_steps_is_identity_and_deterministic() {
        let st = ModelState::init(&ModelConfig::toy(), 4).unwrap();
        let data: Vec<Sample> = (0..3).map(toy_sample).collect();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train_stage1(&data, &cfg, st.clone(), None).unwrap();
        assert_eq!(out.checkpoint.state, st);

        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let a = train_stage1(&data, &cfg, st.clone(), None).unwrap();
        let b = train_stage1(&data, &cfg, st.clone(), None).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(a.checkpoint.state.backbone, st.backbone);
        assert_eq!(a.checkpoint.state.cls_head, st.cls_head);
        assert_ne!(a.checkpoint.state.gaze_head, st.gaze_head);
    }

    #[test]
    fn stage_two_requires_stage_one() {
        let data: Vec<Sample> = (0..2).map(toy_sample).collect();
        let cfg = TrainConfig {
            stage: 2,
            steps: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_stage2(&data, &cfg, None, None),
            Err(Error::StageOrder(_))
        ));
    }

    #[test]
    fn stage_one_requires_supervision() {
        let st = ModelState::init(&ModelConfig::toy(), 4).unwrap();
        let mut s = toy_sample(0);
        s.supervision = None;
        let r = train_stage1(&[s], &TrainConfig::default(), st, None);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
