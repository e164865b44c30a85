//! Joint micro-action and emotion recognition.
//!
//! A face branch and a body branch each run the backbone frame by frame and
//! pool over space only, giving `[T, C]` features that are projected to a
//! common width `d`. The body tokens pass through a temporal transformer
//! encoder. The action head reads the temporal mean of the body tokens; the
//! emotion head reads the temporal mean of the concatenated face and body
//! tokens. Training minimizes `bce(actions) + beta * ce(emotion)`.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attention::{EncoderConfig, EncoderLayerCache, TemporalEncoder};
use crate::backbone::{Backbone, BackboneCache, ModelConfig};
use crate::checkpoint;
use crate::datagen::{crop_clip, preprocess_clip, segment_indices, BoxXywh, Clip, Dataset, ManifestRow};
use crate::error::{Error, Result};
use crate::metrics::{emotion_metrics, MetricsReport, Scale};
use crate::nn::{init_rng, sigmoid, Grads, Linear, ParamBuilder, ParamStore};
use crate::objective::{bce_multilabel, cross_entropy, softmax};
use crate::taxonomy::{Split, DEFAULT_NUM_EMOTIONS};
use crate::tensor::Tensor;
use crate::trainer::{step_lr, Sgd};

pub const CHECKPOINT_KIND: &str = "manet-emotion";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmotionConfig {
    /// Architecture of both branches; `num_fine_classes` is the action count.
    pub backbone: ModelConfig,
    /// Use one backbone for both branches instead of two independent ones.
    pub share_backbone: bool,
    /// Common token width `d`.
    pub feature_dim: usize,
    pub encoder: EncoderConfig,
    pub num_emotions: usize,
    pub beta: f64,
    pub num_frames: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    /// Sidecar JSONL of per-frame face boxes; overrides manifest boxes.
    pub face_boxes: Option<PathBuf>,
}

impl Default for EmotionConfig {
    fn default() -> Self {
        EmotionConfig {
            backbone: ModelConfig::default(),
            share_backbone: false,
            feature_dim: 256,
            encoder: EncoderConfig::default(),
            num_emotions: DEFAULT_NUM_EMOTIONS,
            beta: 0.03,
            num_frames: 16,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 3,
            epochs: 80,
            lr_drop_epochs: vec![30, 60],
            lr_drop_factor: 0.1,
            seed: 0,
            face_boxes: None,
        }
    }
}

impl EmotionConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.feature_dim == 0 || self.encoder.heads == 0 || !self.feature_dim.is_multiple_of(self.encoder.heads) {
            return bad(format!(
                "feature_dim {} must be a positive multiple of {} heads",
                self.feature_dim, self.encoder.heads
            ));
        }
        if self.num_emotions == 0 || self.num_frames == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("num_emotions, num_frames, batch_size and epochs must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be positive and momentum in [0, 1)".into());
        }
        Ok(())
    }
}

/// `bce_multilabel + beta * cross_entropy`.
pub fn multitask_loss(l_act: f64, l_emo: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
    }
    Ok(l_act + beta * l_emo)
}

/// Mean over space of a `[T, h, w, C]` map: `[T, C]`.
pub fn spatial_pool(map: &Tensor) -> Result<Vec<f64>> {
    let (t, h, w, c) = map.dims4()?;
    let mut out = vec![0.0; t * c];
    let per = h * w;
    for (i, px) in map.data().chunks_exact(c).enumerate() {
        let f = i / per;
        for (o, v) in out[f * c..(f + 1) * c].iter_mut().zip(px) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= per as f64);
    Ok(out)
}

fn spatial_pool_backward(shape: &[usize], d: &[f64]) -> Tensor {
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    let per = h * w;
    let mut out = Tensor::zeros(shape);
    for (i, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
        let f = i / per;
        for (o, g) in px.iter_mut().zip(&d[f * c..(f + 1) * c]) {
            *o = g / per as f64;
        }
    }
    out
}

/// Mean over rows of a `[T, d]` matrix.
pub fn temporal_mean(x: &[f64], d: usize) -> Vec<f64> {
    let t = x.len() / d;
    let mut out = vec![0.0; d];
    for row in x.chunks_exact(d) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= t as f64);
    out
}

fn temporal_mean_backward(d_mean: &[f64], t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * d_mean.len());
    for _ in 0..t {
        out.extend(d_mean.iter().map(|g| g / t as f64));
    }
    out
}

/// `A = FC(mean_t x_act)`.
pub fn action_head(head: &Linear, ps: &ParamStore, x_act: &[f64]) -> Vec<f64> {
    head.forward(ps, &temporal_mean(x_act, head.in_dim), 1)
}

/// `E = FC(mean_t [x_face; x_act])`.
pub fn emotion_head(head: &Linear, ps: &ParamStore, x_face: &[f64], x_act: &[f64]) -> Result<Vec<f64>> {
    let d = head.in_dim / 2;
    if x_face.len() != x_act.len() || x_face.is_empty() || !x_face.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "face and body tokens differ: {} vs {} values",
            x_face.len(),
            x_act.len()
        )));
    }
    let mut pooled = temporal_mean(x_face, d);
    pooled.extend(temporal_mean(x_act, d));
    Ok(head.forward(ps, &pooled, 1))
}

#[derive(Clone, Debug)]
pub struct EmotionModel {
    pub config: EmotionConfig,
    pub store: ParamStore,
    pub face_backbone: Backbone,
    /// `None` when the branches share the face backbone.
    pub body_backbone: Option<Backbone>,
    pub face_proj: Linear,
    pub body_proj: Linear,
    pub encoder: TemporalEncoder,
    pub action_head: Linear,
    pub emotion_head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionOutput {
    pub x_face: Vec<f64>,
    pub x_act: Vec<f64>,
    pub action_logits: Vec<f64>,
    pub emotion_logits: Vec<f64>,
}

pub struct EmotionCache {
    face: BackboneCache,
    body: BackboneCache,
    face_pooled: Vec<f64>,
    body_pooled: Vec<f64>,
    encoder: Vec<EncoderLayerCache>,
    act_mean: Vec<f64>,
    joint_mean: Vec<f64>,
    frames: usize,
}

impl EmotionCache {
    pub fn encoder_layers(&self) -> &[EncoderLayerCache] {
        &self.encoder
    }
}

impl EmotionModel {
    pub fn new(config: EmotionConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = init_rng(config.backbone.init_seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let c = config.backbone.feature_dim();
        let d = config.feature_dim;
        let face_backbone = Backbone::new(&mut pb.pp("face.backbone"), &config.backbone)?;
        let body_backbone = if config.share_backbone {
            None
        } else {
            Some(Backbone::new(&mut pb.pp("body.backbone"), &config.backbone)?)
        };
        let face_proj = Linear::new(&mut pb.pp("face.proj"), c, d, 1.0);
        let body_proj = Linear::new(&mut pb.pp("body.proj"), c, d, 1.0);
        let encoder = TemporalEncoder::new(&mut pb.pp("encoder"), d, &config.encoder)?;
        let action_head = Linear::new(&mut pb.pp("action_head"), d, config.backbone.num_fine_classes, 1.0);
        let emotion_head = Linear::new(&mut pb.pp("emotion_head"), 2 * d, config.num_emotions, 1.0);
        Ok(EmotionModel {
            config,
            store,
            face_backbone,
            body_backbone,
            face_proj,
            body_proj,
            encoder,
            action_head,
            emotion_head,
        })
    }

    fn body(&self) -> &Backbone {
        self.body_backbone.as_ref().unwrap_or(&self.face_backbone)
    }

    /// `face` and `body` are preprocessed `[T, side, side, 3]` clips.
    pub fn forward(&self, face: &Tensor, body: &Tensor) -> Result<(EmotionOutput, EmotionCache)> {
        let t = face.dims4()?.0;
        if body.dims4()?.0 != t {
            return Err(Error::Shape("face and body clips differ in frame count".into()));
        }
        let ps = &self.store;
        let d = self.config.feature_dim;
        let (face_out, body_out) = rayon::join(
            || self.face_backbone.forward(ps, face, t),
            || self.body().forward(ps, body, t),
        );
        let ((face_map, face_cache), (body_map, body_cache)) = (face_out?, body_out?);
        let face_pooled = spatial_pool(&face_map)?;
        let body_pooled = spatial_pool(&body_map)?;
        let x_face = self.face_proj.forward(ps, &face_pooled, t);
        let tokens = self.body_proj.forward(ps, &body_pooled, t);
        let (x_act, encoder) = self.encoder.forward(ps, &tokens)?;
        let act_mean = temporal_mean(&x_act, d);
        let action_logits = self.action_head.forward(ps, &act_mean, 1);
        let mut joint_mean = temporal_mean(&x_face, d);
        joint_mean.extend_from_slice(&act_mean);
        let emotion_logits = self.emotion_head.forward(ps, &joint_mean, 1);
        Ok((
            EmotionOutput {
                x_face,
                x_act,
                action_logits,
                emotion_logits,
            },
            EmotionCache {
                face: face_cache,
                body: body_cache,
                face_pooled,
                body_pooled,
                encoder,
                act_mean,
                joint_mean,
                frames: t,
            },
        ))
    }

    pub fn backward(&self, cache: &EmotionCache, d_action: &[f64], d_emotion: &[f64], grads: &mut Grads) -> Result<()> {
        let ps = &self.store;
        let d = self.config.feature_dim;
        let t = cache.frames;
        let d_joint = self.emotion_head.backward(ps, &cache.joint_mean, d_emotion, 1, grads);
        let mut d_act_mean = self.action_head.backward(ps, &cache.act_mean, d_action, 1, grads);
        d_act_mean.iter_mut().zip(&d_joint[d..]).for_each(|(a, b)| *a += b);
        let dx_face = temporal_mean_backward(&d_joint[..d], t);
        let dx_act = temporal_mean_backward(&d_act_mean, t);
        let d_tokens = self.encoder.backward(ps, &cache.encoder, &dx_act, grads);
        let d_body_pooled = self.body_proj.backward(ps, &cache.body_pooled, &d_tokens, t, grads);
        let d_face_pooled = self.face_proj.backward(ps, &cache.face_pooled, &dx_face, t, grads);
        let d_body_map = spatial_pool_backward(cache.body.out_shape(), &d_body_pooled);
        let d_face_map = spatial_pool_backward(cache.face.out_shape(), &d_face_pooled);
        self.body().backward(ps, &cache.body, &d_body_map, t, grads)?;
        self.face_backbone.backward(ps, &cache.face, &d_face_map, t, grads)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Data

/// Sidecar row: one box per raw frame (or a single box for all frames).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBoxRow {
    pub clip_id: String,
    pub boxes: Vec<BoxXywh>,
}

#[derive(Clone, Debug)]
pub struct EmotionSample {
    pub clip_id: String,
    pub actions: BTreeSet<usize>,
    pub emotion: usize,
    pub raw: Clip,
    /// One box, or one per raw frame.
    pub boxes: Vec<BoxXywh>,
}

pub fn load_emotion_split(data: &Dataset, split: Split, sidecar: Option<&Path>) -> Result<Vec<EmotionSample>> {
    let side: HashMap<String, Vec<BoxXywh>> = match sidecar {
        Some(p) => crate::io::read_jsonl::<FaceBoxRow>(p)?
            .into_iter()
            .map(|r| (r.clip_id, r.boxes))
            .collect(),
        None => HashMap::new(),
    };
    data.split(split)
        .into_par_iter()
        .map(|row: &ManifestRow| {
            let emotion = row
                .emotion_id
                .ok_or_else(|| Error::Dataset(format!("clip {} lacks an emotion label", row.clip_id)))?;
            let boxes = match (side.get(&row.clip_id), row.face_box) {
                (Some(b), _) => b.clone(),
                (None, Some(b)) => vec![b],
                (None, None) => {
                    return Err(Error::Dataset(format!("clip {} lacks a face box", row.clip_id)));
                }
            };
            if boxes.is_empty() || (boxes.len() != 1 && boxes.len() != row.num_frames) {
                return Err(Error::Dataset(format!(
                    "clip {}: {} face boxes for {} frames",
                    row.clip_id,
                    boxes.len(),
                    row.num_frames
                )));
            }
            if row.fine_ids.is_empty() {
                return Err(Error::Dataset(format!("clip {} has no action labels", row.clip_id)));
            }
            Ok(EmotionSample {
                clip_id: row.clip_id.clone(),
                actions: row.fine_ids.clone(),
                emotion,
                raw: data.load_clip(row)?,
                boxes,
            })
        })
        .collect()
}

/// Face and body inputs for one sample.
pub fn emotion_inputs(s: &EmotionSample, frames: usize, side: usize, rng: Option<&mut ChaCha8Rng>) -> Result<(Tensor, Tensor)> {
    let idx = segment_indices(s.raw.num_frames(), frames, rng);
    let clip = s.raw.select(&idx)?;
    let boxes: Vec<BoxXywh> = if s.boxes.len() == 1 {
        s.boxes.clone()
    } else {
        idx.iter().map(|&i| s.boxes[i]).collect()
    };
    let face = crop_clip(&clip, &boxes)?;
    Ok((preprocess_clip(&face, side)?, preprocess_clip(&clip, side)?))
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_act: f64,
    pub l_emo: f64,
    pub val_acc: f64,
    pub val_map: f64,
}

pub struct EmotionOutcome {
    pub model: EmotionModel,
    pub best_epoch: usize,
    /// Mean of validation emotion accuracy and action mAP at the best epoch.
    pub best_val_score: f64,
    pub epochs: Vec<EmotionEpochLog>,
}

struct ClipGrad {
    grads: Grads,
    l_act: f64,
    l_emo: f64,
}

fn sample_rng(seed: u64, epoch: usize, clip: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe3071);
    rng.set_stream(((epoch as u64) << 32) | clip as u64);
    rng
}

/// Trains on `train`, keeps the epoch with the best mean of validation
/// emotion accuracy and action mAP, and writes `log.jsonl` and `best.ckpt`
/// into `out_dir` when given.
pub fn train_emotion(config: &EmotionConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<EmotionOutcome> {
    config.validate()?;
    if config.backbone.num_fine_classes != data.taxonomy.num_fine() {
        return Err(Error::Config(format!(
            "model has {} action classes, dataset taxonomy {}",
            config.backbone.num_fine_classes,
            data.taxonomy.num_fine()
        )));
    }
    let sidecar = config.face_boxes.as_deref();
    let train_set = load_emotion_split(data, Split::Train, sidecar)?;
    let val_set = load_emotion_split(data, Split::Val, sidecar)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("train and val splits must be non-empty".into()));
    }
    train_emotion_on(config, &train_set, &val_set, out_dir)
}

pub fn train_emotion_on(
    config: &EmotionConfig,
    train_set: &[EmotionSample],
    val_set: &[EmotionSample],
    out_dir: Option<&Path>,
) -> Result<EmotionOutcome> {
    config.validate()?;
    let mut log = Vec::new();
    let mut model = EmotionModel::new(config.clone())?;
    let mut opt = Sgd::new(&model.store, config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let side = config.backbone.input_side;

    for epoch in 0..config.epochs {
        let lr = step_lr(config.lr, &config.lr_drop_epochs, config.lr_drop_factor, epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut sum_act, mut sum_emo) = (0.0, 0.0);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<ClipGrad> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let mut rng = sample_rng(config.seed, epoch, i);
                    let (face, body) = emotion_inputs(s, config.num_frames, side, Some(&mut rng))?;
                    let (out, cache) = model.forward(&face, &body)?;
                    let (l_act, d_act) = bce_multilabel(&out.action_logits, &s.actions)?;
                    let (l_emo, mut d_emo) = cross_entropy(&out.emotion_logits, s.emotion)?;
                    d_emo.iter_mut().for_each(|g| *g *= config.beta);
                    let mut grads = Grads::zeros_like(&model.store);
                    model.backward(&cache, &d_act, &d_emo, &mut grads)?;
                    Ok(ClipGrad { grads, l_act, l_emo })
                })
                .collect::<Result<_>>()?;
            let n = results.len() as f64;
            let mut grads = Grads::zeros_like(&model.store);
            let (mut l_act, mut l_emo) = (0.0, 0.0);
            for r in &results {
                grads.add_assign(&r.grads);
                l_act += r.l_act;
                l_emo += r.l_emo;
            }
            grads.scale(1.0 / n);
            let total = multitask_loss(l_act / n, l_emo / n, config.beta)?;
            if !total.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("l_act={} l_emo={}", l_act / n, l_emo / n),
                });
            }
            opt.step(&mut model.store, &grads, lr);
            sum_act += l_act;
            sum_emo += l_emo;
        }
        let m = train_set.len() as f64;
        let val = evaluate_emotion_samples(&model, val_set)?;
        let e = val.report.emotion.as_ref().expect("emotion block");
        let entry = EmotionEpochLog {
            epoch,
            lr,
            loss: (sum_act + config.beta * sum_emo) / m,
            l_act: sum_act / m,
            l_emo: sum_emo / m,
            val_acc: e.acc,
            val_map: e.map,
        };
        let score = (e.acc + e.map) / 2.0;
        if best.as_ref().is_none_or(|(_, b, _)| score > *b) {
            best = Some((epoch, score, model.store.clone()));
            if let Some(dir) = out_dir {
                save_emotion_model(&dir.join("best.ckpt"), &model, json!({ "epoch": epoch, "val_score": score }))?;
            }
        }
        log.push(entry);
        if let Some(dir) = out_dir {
            crate::io::write_jsonl(&dir.join("log.jsonl"), &log)?;
        }
    }
    let (best_epoch, best_val_score, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(EmotionOutcome {
        model,
        best_epoch,
        best_val_score,
        epochs: log,
    })
}

pub fn save_emotion_model(path: &Path, model: &EmotionModel, meta: serde_json::Value) -> Result<()> {
    checkpoint::save(path, CHECKPOINT_KIND, &model.config, meta, &model.store)
}

pub fn load_emotion_model(path: &Path) -> Result<EmotionModel> {
    let ck = checkpoint::load(path)?;
    if ck.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {CHECKPOINT_KIND} checkpoint, found {}",
            ck.kind
        )));
    }
    let mut model = EmotionModel::new(ck.config_as()?)?;
    ck.restore(&mut model.store)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionPredictionRow {
    pub clip_id: String,
    pub emotion_probs: Vec<f64>,
    pub action_scores: Vec<f64>,
}

pub struct EmotionEvaluation {
    pub report: MetricsReport,
    pub predictions: Vec<EmotionPredictionRow>,
}

pub fn evaluate_emotion(model: &EmotionModel, data: &Dataset, split: Split) -> Result<EmotionEvaluation> {
    let samples = load_emotion_split(data, split, model.config.face_boxes.as_deref())?;
    evaluate_emotion_samples(model, &samples)
}

pub fn evaluate_emotion_samples(model: &EmotionModel, samples: &[EmotionSample]) -> Result<EmotionEvaluation> {
    if samples.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let cfg = &model.config;
    let predictions: Vec<EmotionPredictionRow> = samples
        .par_iter()
        .map(|s| {
            let (face, body) = emotion_inputs(s, cfg.num_frames, cfg.backbone.input_side, None)?;
            let (out, _) = model.forward(&face, &body)?;
            Ok(EmotionPredictionRow {
                clip_id: s.clip_id.clone(),
                emotion_probs: softmax(&out.emotion_logits),
                action_scores: out.action_logits.iter().map(|&v| sigmoid(v)).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let emotion_probs: Vec<Vec<f64>> = predictions.iter().map(|p| p.emotion_probs.clone()).collect();
    let action_scores: Vec<Vec<f64>> = predictions.iter().map(|p| p.action_scores.clone()).collect();
    let emotions: Vec<usize> = samples.iter().map(|s| s.emotion).collect();
    let actions: Vec<BTreeSet<usize>> = samples.iter().map(|s| s.actions.clone()).collect();
    let metrics = emotion_metrics(&emotion_probs, &emotions, cfg.num_emotions, &action_scores, &actions)?;
    Ok(EmotionEvaluation {
        report: MetricsReport {
            scale: Scale::Unit,
            num_samples: samples.len(),
            recognition: None,
            emotion: Some(metrics),
        },
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multitask_loss_arithmetic() {
        assert!((multitask_loss(0.5, 2.0, 0.03).unwrap() - 0.56).abs() < 1e-15);
        assert_eq!(multitask_loss(0.7, 9.0, 0.0).unwrap(), 0.7);
        assert!(multitask_loss(0.7, 9.0, -0.1).is_err());
    }

    #[test]
    fn pooling_helpers() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(temporal_mean(&x, 2), vec![3.0, 4.0]);
        let map = Tensor::from_vec(&[2, 1, 2, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(spatial_pool(&map).unwrap(), vec![2.0, 6.0]);
    }
}
