//! Episodic training, evaluation, and prediction.
//!
//! Per-step randomness (episode choice, augmentation) is derived from
//! `(config.seed, step)` through a splitmix hash rather than a long-lived
//! stream, so a run resumed from a checkpoint continues the exact trace of
//! an uninterrupted one.

pub mod adam;
pub mod checkpoint;
pub mod config;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;

use crate::episodes::{sample_episode, Episode, EpisodeSource, FoldSplit, Role};
use crate::error::{Error, Result};
use crate::metrics::{score_image, MetricsReport, ReportRecord};
use crate::model::Model;
use crate::purpose::SupportSample;
use crate::tensor::{kernels, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One line of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    pub loss: f32,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// The per-step generator; identical whether or not the run was resumed.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(step)))
}

/// Trainer state: model, optimizer, config, step counter.
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model_config(), config.seed);
        let shapes: Vec<Vec<usize>> = model
            .params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let adam = Adam::new(config.learning_rate, &shapes);
        Ok(Trainer {
            model,
            adam,
            config,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, adam) = ck.restore()?;
        Ok(Trainer {
            model,
            adam,
            config: ck.config.clone(),
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.adam, &self.config, self.step)
    }

    /// Episode seed the next sampled step will use.
    pub fn next_episode_seed(&self) -> u64 {
        step_rng(self.config.seed, self.step + 1).gen()
    }

    /// One optimizer step over the given episode. Augmentation draws come
    /// from the step generator after the episode-seed draw, so sampled and
    /// externally supplied episodes share the same stream discipline.
    pub fn train_step(&mut self, episode: &Episode<f32>) -> Result<TraceEntry> {
        self.step += 1;
        let mut rng = step_rng(self.config.seed, self.step);
        let _episode_seed: u64 = rng.gen();
        let episode = augment(episode, &self.config, &mut rng);

        let tape = Tape::new();
        let vars = self.model.bind(&tape, true);
        let (loss, _) = vars.forward_loss(&episode.support, &episode.queries, &episode.gt_masks)?;
        let loss_value = loss.scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step: self.step });
        }
        let mut grads = tape.backward(loss)?;
        let grad_list: Vec<Option<Tensor<f32>>> = vars
            .param_vars()
            .iter()
            .map(|&v| grads.take(v))
            .collect();
        let mut params = self.model.params_mut();
        self.adam.step(&mut params, &grad_list);
        Ok(TraceEntry {
            step: self.step,
            loss: loss_value,
        })
    }

    /// Runs `steps` sampled training steps on the fold's train role.
    pub fn run<S: EpisodeSource + ?Sized>(
        &mut self,
        source: &S,
        split: &FoldSplit,
        steps: u64,
    ) -> Result<Vec<TraceEntry>> {
        let mut trace = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let episode = sample_episode(
                source,
                split,
                self.config.fold_id,
                Role::Train,
                self.config.n_queries,
                self.next_episode_seed(),
            )?;
            trace.push(self.train_step(&episode)?);
        }
        Ok(trace)
    }
}

/// Random crop-and-resize (input -> 7/8 of input -> input) plus horizontal
/// flip, applied identically to each query image and its mask. The support
/// sample passes through untouched (its boxes stay valid).
pub fn augment(episode: &Episode<f32>, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Episode<f32> {
    if !config.random_crop && !config.horizontal_flip {
        return episode.clone();
    }
    let mut out = episode.clone();
    for (q, m) in out.queries.iter_mut().zip(out.gt_masks.iter_mut()) {
        let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        if config.random_crop {
            let (ch_, cw) = (h * 7 / 8, w * 7 / 8);
            let oy = rng.gen_range(0..=h - ch_);
            let ox = rng.gen_range(0..=w - cw);
            *q = crop_resize(q, c, oy, ox, ch_, cw, h, w);
            let resized = crop_resize(m, 1, oy, ox, ch_, cw, h, w);
            *m = resized.map(|v| f32::from(v > 0.5));
        }
        if config.horizontal_flip && rng.gen_bool(0.5) {
            *q = flip_h(q);
            *m = flip_h(m);
        }
    }
    out
}

fn crop_resize(
    t: &Tensor<f32>,
    c: usize,
    oy: usize,
    ox: usize,
    ch_: usize,
    cw: usize,
    h: usize,
    w: usize,
) -> Tensor<f32> {
    let mut crop = vec![0.0f32; c * ch_ * cw];
    for ci in 0..c {
        for y in 0..ch_ {
            for x in 0..cw {
                crop[(ci * ch_ + y) * cw + x] = t.data()[(ci * h + oy + y) * w + ox + x];
            }
        }
    }
    Tensor::new(
        vec![c, h, w],
        kernels::bilinear_resize(&crop, c, ch_, cw, h, w),
    )
}

fn flip_h(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0f32; t.numel()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci * h + y) * w + x] = t.data()[(ci * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Evaluation options.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub fold_id: usize,
    pub episodes: usize,
    pub n_queries: usize,
    pub seed: u64,
}

/// Scores the model on seeded test-fold episodes. Episodes may evaluate in
/// parallel; records keep the seeded order so aggregation is fixed. The
/// model is never mutated.
pub fn evaluate<S: EpisodeSource + Sync + ?Sized>(
    model: &Model<f32>,
    source: &S,
    split: &FoldSplit,
    opts: &EvalOptions,
) -> Result<(Vec<ReportRecord>, MetricsReport)> {
    let indices: Vec<u64> = (0..opts.episodes as u64).collect();
    let per_episode: Vec<Result<Vec<ReportRecord>>> = kernels::par_map(&indices, |&idx| {
        let episode = sample_episode(
            source,
            split,
            opts.fold_id,
            Role::Test,
            opts.n_queries,
            splitmix(opts.seed ^ splitmix(idx)),
        )?;
        let tape = Tape::new();
        let vars = model.bind(&tape, false);
        let fwd = vars.forward_episode(&episode.support, &episode.queries)?;
        let mut records = Vec::with_capacity(episode.queries.len());
        for (k, (stack, gt)) in fwd.stacks.iter().zip(&episode.gt_masks).enumerate() {
            let pred = stack.final_prediction().value();
            let scores = score_image(&pred, gt)?;
            records.push(ReportRecord {
                fold: opts.fold_id,
                episode_id: idx,
                image_id: format!("{idx}_{k}"),
                iou: scores.iou,
                mae: scores.mae,
                e_phi: scores.e_phi,
                cc: scores.cc,
                flags: scores.flags,
            });
        }
        Ok(records)
    });
    let mut records = Vec::new();
    for r in per_episode {
        records.extend(r?);
    }
    let aggregate = MetricsReport::aggregate(opts.fold_id, &records);
    Ok((records, aggregate))
}

/// Frozen forward pass returning the final prediction map per query.
pub fn predict_maps(
    model: &Model<f32>,
    support: &SupportSample<f32>,
    queries: &[Tensor<f32>],
) -> Result<Vec<Tensor<f32>>> {
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    let fwd = vars.forward_episode(support, queries)?;
    Ok(fwd
        .stacks
        .iter()
        .map(|s| s.final_prediction().value())
        .collect())
}

/// Writes the loss trace as line-delimited JSON.
pub fn write_trace(path: impl AsRef<Path>, trace: &[TraceEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for t in trace {
        text.push_str(&serde_json::to_string(t).expect("serializable"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
