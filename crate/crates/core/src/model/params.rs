//! Parameter containers, deterministic initialization and trainable views.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::{ClsHead, GazeHead};

/// `y = x·w + b` with `w` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Low-rank update `scale · (x·a)·b` added to a frozen projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `in × r`
    pub a: Array2<f64>,
    /// `r × out`, zero at initialization.
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapters {
    pub q: LoraPair,
    pub k: LoraPair,
    pub v: LoraPair,
    pub o: LoraPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    /// Flattened patch (`patch_side²`) to `d_model`.
    pub patch: Linear,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub lm_head: Linear,
}

/// Which optimizer-facing group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    LmHead,
    Adapter,
    GazeHead,
    ClsHead,
}

/// The set of parameter groups that receive gradients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamView {
    groups: BTreeSet<ParamGroup>,
}

impl ParamView {
    pub fn new(groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        Self {
            groups: groups.into_iter().collect(),
        }
    }

    pub fn all() -> Self {
        Self::new([
            ParamGroup::Backbone,
            ParamGroup::LmHead,
            ParamGroup::Adapter,
            ParamGroup::GazeHead,
            ParamGroup::ClsHead,
        ])
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        self.groups.contains(&g)
    }

    pub fn groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.groups.iter().copied()
    }

    /// True when gradients must flow through the transformer blocks.
    pub fn needs_block_grads(&self) -> bool {
        self.contains(ParamGroup::Adapter) || self.contains(ParamGroup::Backbone)
    }
}

/// Training stages and their trainable parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Adapters + gaze head on the gaze loss.
    Gaze = 1,
    /// Adapters + classifier head + LM head on the combined loss.
    Classify = 2,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Gaze),
            2 => Ok(Stage::Classify),
            other => Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }
}

pub struct TensorRef<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a mut [f64],
}

/// Backbone, adapters and both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub backbone: Backbone,
    /// One entry per block; empty when `adapter_rank == 0`.
    pub adapters: Vec<BlockAdapters>,
    pub gaze_head: GazeHead,
    pub cls_head: ClsHead,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: (usize, usize), std: f64) -> Array2<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Array2::from_shape_simple_fn(shape, || dist.sample(&mut self.rng))
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        Linear {
            w: self.normal((fan_in, fan_out), gain / (fan_in as f64).sqrt()),
            b: Array1::zeros(fan_out),
        }
    }

    fn lora(&mut self, fan_in: usize, fan_out: usize, rank: usize) -> LoraPair {
        LoraPair {
            a: self.normal((fan_in, rank), 1.0 / (fan_in as f64).sqrt()),
            b: Array2::zeros((rank, fan_out)),
        }
    }
}

fn layer_norm(d: usize) -> LayerNorm {
    LayerNorm {
        gamma: Array1::ones(d),
        beta: Array1::zeros(d),
    }
}

impl ModelState {
    /// Seeded initialization; heads start at zero and adapter `b` factors at
    /// zero so the adapted model equals the base model.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.d_model;
        let residual_gain = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let patch = init.linear(config.patch_side * config.patch_side, d, 1.0);
        let tok_emb = init.normal((config.vocab_size, d), 1.0);
        let pos_emb = init.normal((config.max_seq_len, d), 0.5);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: layer_norm(d),
                q: init.linear(d, d, 1.0),
                k: init.linear(d, d, 1.0),
                v: init.linear(d, d, 1.0),
                o: init.linear(d, d, residual_gain),
                ln2: layer_norm(d),
                ff1: init.linear(d, config.d_ff, 1.0),
                ff2: init.linear(config.d_ff, d, residual_gain),
            })
            .collect();
        let lm_head = init.linear(d, config.vocab_size, 1.0);
        let r = config.adapter_rank;
        let adapters = if r == 0 {
            Vec::new()
        } else {
            (0..config.n_layers)
                .map(|_| BlockAdapters {
                    q: init.lora(d, d, r),
                    k: init.lora(d, d, r),
                    v: init.lora(d, d, r),
                    o: init.lora(d, d, r),
                })
                .collect()
        };
        Ok(Self {
            config: config.clone(),
            backbone: Backbone {
                patch,
                tok_emb,
                pos_emb,
                blocks,
                ln_f: layer_norm(d),
                lm_head,
            },
            adapters,
            gaze_head: GazeHead::zeros(config.num_patches(), d),
            cls_head: ClsHead::zeros(d),
        })
    }

    /// Same shapes, every value zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.data.fill(value);
        }
    }

    /// Parameters updated in `stage`. Fails when the stage trains adapters
    /// but the model has none.
    pub fn trainable_view(&self, stage: Stage) -> Result<ParamView> {
        if self.adapters.is_empty() {
            return Err(Error::Config(
                "trainable view requests adapters but adapter_rank is 0".into(),
            ));
        }
        Ok(match stage {
            Stage::Gaze => ParamView::new([ParamGroup::Adapter, ParamGroup::GazeHead]),
            Stage::Classify => ParamView::new([ParamGroup::Adapter, ParamGroup::ClsHead, ParamGroup::LmHead]),
        })
    }

    pub fn parameter_count(&self, view: &ParamView) -> usize {
        self.tensors()
            .iter()
            .filter(|t| view.contains(t.group))
            .map(|t| t.data.len())
            .sum()
    }

    /// Every tensor, sorted by name; the order matches [`Self::tensors_mut`].
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut ones: Vec<(String, ParamGroup, &Array1<f64>)> = Vec::new();
        let mut twos: Vec<(String, ParamGroup, &Array2<f64>)> = Vec::new();
        let bb = &self.backbone;
        ones.push(("patch.b".into(), ParamGroup::Backbone, &bb.patch.b));
        twos.push(("patch.w".into(), ParamGroup::Backbone, &bb.patch.w));
        twos.push(("tok_emb".into(), ParamGroup::Backbone, &bb.tok_emb));
        twos.push(("pos_emb".into(), ParamGroup::Backbone, &bb.pos_emb));
        for (i, blk) in bb.blocks.iter().enumerate() {
            for (n, ln) in [("ln1", &blk.ln1), ("ln2", &blk.ln2)] {
                ones.push((format!("blocks.{i}.{n}.gamma"), ParamGroup::Backbone, &ln.gamma));
                ones.push((format!("blocks.{i}.{n}.beta"), ParamGroup::Backbone, &ln.beta));
            }
            for (n, lin) in [
                ("q", &blk.q),
                ("k", &blk.k),
                ("v", &blk.v),
                ("o", &blk.o),
                ("ff1", &blk.ff1),
                ("ff2", &blk.ff2),
            ] {
                ones.push((format!("blocks.{i}.{n}.b"), ParamGroup::Backbone, &lin.b));
                twos.push((format!("blocks.{i}.{n}.w"), ParamGroup::Backbone, &lin.w));
            }
        }
        ones.push(("ln_f.gamma".into(), ParamGroup::Backbone, &bb.ln_f.gamma));
        ones.push(("ln_f.beta".into(), ParamGroup::Backbone, &bb.ln_f.beta));
        ones.push(("lm_head.b".into(), ParamGroup::LmHead, &bb.lm_head.b));
        twos.push(("lm_head.w".into(), ParamGroup::LmHead, &bb.lm_head.w));
        for (i, ad) in self.adapters.iter().enumerate() {
            for (n, pair) in [("q", &ad.q), ("k", &ad.k), ("v", &ad.v), ("o", &ad.o)] {
                twos.push((format!("adapters.{i}.{n}.a"), ParamGroup::Adapter, &pair.a));
                twos.push((format!("adapters.{i}.{n}.b"), ParamGroup::Adapter, &pair.b));
            }
        }
        ones.push(("gaze_head.b".into(), ParamGroup::GazeHead, &self.gaze_head.b));
        twos.push(("gaze_head.w".into(), ParamGroup::GazeHead, &self.gaze_head.w));
        ones.push(("cls_head.b".into(), ParamGroup::ClsHead, &self.cls_head.b));
        twos.push(("cls_head.w".into(), ParamGroup::ClsHead, &self.cls_head.w));

        let mut out: Vec<TensorRef<'_>> = ones
            .into_iter()
            .map(|(name, group, a)| TensorRef {
                name,
                group,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            })
            .chain(twos.into_iter().map(|(name, group, a)| TensorRef {
                name,
                group,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }))
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    /// Mutable twin of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut ones: Vec<(String, ParamGroup, &mut Array1<f64>)> = Vec::new();
        let mut twos: Vec<(String, ParamGroup, &mut Array2<f64>)> = Vec::new();
        let bb = &mut self.backbone;
        ones.push(("patch.b".into(), ParamGroup::Backbone, &mut bb.patch.b));
        twos.push(("patch.w".into(), ParamGroup::Backbone, &mut bb.patch.w));
        twos.push(("tok_emb".into(), ParamGroup::Backbone, &mut bb.tok_emb));
        twos.push(("pos_emb".into(), ParamGroup::Backbone, &mut bb.pos_emb));
        for (i, blk) in bb.blocks.iter_mut().enumerate() {
            let Block {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                ff1,
                ff2,
            } = blk;
            for (n, ln) in [("ln1", ln1), ("ln2", ln2)] {
                ones.push((format!("blocks.{i}.{n}.gamma"), ParamGroup::Backbone, &mut ln.gamma));
                ones.push((format!("blocks.{i}.{n}.beta"), ParamGroup::Backbone, &mut ln.beta));
            }
            for (n, lin) in [("q", q), ("k", k), ("v", v), ("o", o), ("ff1", ff1), ("ff2", ff2)] {
                ones.push((format!("blocks.{i}.{n}.b"), ParamGroup::Backbone, &mut lin.b));
                twos.push((format!("blocks.{i}.{n}.w"), ParamGroup::Backbone, &mut lin.w));
            }
        }
        ones.push(("ln_f.gamma".into(), ParamGroup::Backbone, &mut bb.ln_f.gamma));
        ones.push(("ln_f.beta".into(), ParamGroup::Backbone, &mut bb.ln_f.beta));
        ones.push(("lm_head.b".into(), ParamGroup::LmHead, &mut bb.lm_head.b));
        twos.push(("lm_head.w".into(), ParamGroup::LmHead, &mut bb.lm_head.w));
        for (i, ad) in self.adapters.iter_mut().enumerate() {
            let BlockAdapters { q, k, v, o } = ad;
            for (n, pair) in [("q", q), ("k", k), ("v", v), ("o", o)] {
                twos.push((format!("adapters.{i}.{n}.a"), ParamGroup::Adapter, &mut pair.a));
                twos.push((format!("adapters.{i}.{n}.b"), ParamGroup::Adapter, &mut pair.b));
            }
        }
        ones.push(("gaze_head.b".into(), ParamGroup::GazeHead, &mut self.gaze_head.b));
        twos.push(("gaze_head.w".into(), ParamGroup::GazeHead, &mut self.gaze_head.w));
        ones.push(("cls_head.b".into(), ParamGroup::ClsHead, &mut self.cls_head.b));
        twos.push(("cls_head.w".into(), ParamGroup::ClsHead, &mut self.cls_head.w));

        let mut out: Vec<TensorMut<'_>> = ones
            .into_iter()
            .map(|(name, group, a)| TensorMut {
                name,
                group,
                data: a.as_slice_mut().expect("standard layout"),
            })
            .chain(twos.into_iter().map(|(name, group, a)| TensorMut {
                name,
                group,
                data: a.as_slice_mut().expect("standard layout"),
            }))
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }
}
