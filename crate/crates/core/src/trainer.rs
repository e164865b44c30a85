//! Training, evaluation and prediction for the single-label recognizer.
//!
//! Optimization is mini-batch SGD with momentum and L2 weight decay
//! (`v = mu*v + g + wd*w; w -= lr*v`) under a step schedule. Clips of a
//! batch are processed in parallel, each into its own gradient buffer;
//! buffers are summed in batch order so results do not depend on the
//! thread count.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{Manet, ModelConfig};
use crate::checkpoint;
use crate::datagen::{preprocess_clip, sample_frames, Clip, Dataset, ManifestRow};
use crate::embedding::{label_embeddings, OovPolicy, WordVectorTable};
use crate::error::{Error, Result};
use crate::metrics::{argmax, recognition_metrics, MetricsReport, Scale};
use crate::nn::{Grads, ParamStore};
use crate::objective::{cross_entropy, embedding_loss, softmax, total_loss, LossBundle};
use crate::taxonomy::{LabelTaxonomy, Split};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "manet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// 0-based epochs at which the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    /// Weight of the embedding loss.
    pub alpha: f64,
    /// Frames sampled per clip.
    pub num_frames: usize,
    pub seed: u64,
    /// Word vector file (`word v1 .. vD` per line); hashed vectors when absent.
    pub word_vectors: Option<PathBuf>,
    pub oov: OovPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 10,
            epochs: 80,
            lr_drop_epochs: vec![30, 60],
            lr_drop_factor: 0.1,
            alpha: 5.0,
            num_frames: 8,
            seed: 0,
            word_vectors: None,
            oov: OovPolicy::Zero,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_drop_factor > 0.0) {
            return bad("weight_decay must be >= 0 and lr_drop_factor > 0".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.num_frames == 0 {
            return bad("batch_size, epochs and num_frames must be positive".into());
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.lr, &self.lr_drop_epochs, self.lr_drop_factor, epoch)
    }

    pub fn word_table(&self) -> Result<WordVectorTable> {
        match &self.word_vectors {
            Some(p) => WordVectorTable::load(p, self.oov),
            None => Ok(WordVectorTable::hashed(self.seed)),
        }
    }
}

/// Step schedule: `lr * factor^(number of drop epochs <= epoch)`.
pub fn step_lr(lr: f64, drops: &[usize], factor: f64, epoch: usize) -> f64 {
    let n = drops.iter().filter(|&&d| epoch >= d).count();
    lr * factor.powi(n as i32)
}

/// SGD with momentum and coupled weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.values().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        for ((w, g), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads.values())
            .zip(&mut self.velocity)
        {
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// One clip ready for the network.
#[derive(Clone, Debug)]
pub struct Sample {
    pub clip_id: String,
    pub label: usize,
    pub raw: Clip,
}

/// Loads every single-label clip of `split` into memory.
pub fn load_split(data: &Dataset, split: Split) -> Result<Vec<Sample>> {
    data.split(split)
        .into_par_iter()
        .map(|row: &ManifestRow| {
            Ok(Sample {
                clip_id: row.clip_id.clone(),
                label: row.single_label()?,
                raw: data.load_clip(row)?,
            })
        })
        .collect()
}

fn clip_input(raw: &Clip, frames: usize, side: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    preprocess_clip(&sample_frames(raw, frames, rng)?, side)
}

/// Per-(seed, epoch, clip) stream for training-time frame jitter.
fn sample_rng(seed: u64, epoch: usize, clip: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f4a3);
    rng.set_stream(((epoch as u64) << 32) | clip as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_cls: f64,
    pub l_emb: f64,
    pub train_acc: f64,
    pub val_f1_mean: f64,
    pub val_acc_top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBundle,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Manet,
    pub best_epoch: usize,
    pub best_val_f1_mean: f64,
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchLog>,
}

struct ClipGrad {
    grads: Grads,
    l_cls: f64,
    l_emb: f64,
    correct: bool,
}

fn clip_gradient(model: &Manet, input: &Tensor, label: usize, target: &[f64], alpha: f64) -> Result<ClipGrad> {
    let (out, cache) = model.forward(input)?;
    let (l_cls, dlogits) = cross_entropy(&out.logits, label)?;
    let (l_emb, mut demb) = embedding_loss(target, &out.embedding)?;
    let mut grads = Grads::zeros_like(&model.store);
    let emb_grad = if alpha > 0.0 {
        demb.iter_mut().for_each(|g| *g *= alpha);
        Some(demb.as_slice())
    } else {
        None
    };
    model.backward(&cache, &dlogits, emb_grad, &mut grads)?;
    Ok(ClipGrad {
        grads,
        l_cls,
        l_emb,
        correct: argmax(&out.logits) == label,
    })
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

impl TrainOutput {
    pub fn best_checkpoint(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("best.ckpt"))
    }
}

/// Trains on the `train` split, selects the epoch with the best validation
/// F1_mean, and writes `log.jsonl` plus `best.ckpt` when an output directory
/// is given.
pub fn train(config: &TrainConfig, data: &Dataset, output: &TrainOutput) -> Result<TrainOutcome> {
    config.validate()?;
    if config.model.num_fine_classes != data.taxonomy.num_fine() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset taxonomy {}",
            config.model.num_fine_classes,
            data.taxonomy.num_fine()
        )));
    }
    let train_set = load_split(data, Split::Train)?;
    let val_set = load_split(data, Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("train and val splits must be non-empty".into()));
    }
    train_on(config, &data.taxonomy, &train_set, &val_set, output)
}

pub fn train_on(
    config: &TrainConfig,
    taxonomy: &LabelTaxonomy,
    train_set: &[Sample],
    val_set: &[Sample],
    output: &TrainOutput,
) -> Result<TrainOutcome> {
    config.validate()?;
    let targets: Vec<Vec<f64>> = label_embeddings(taxonomy, &config.word_table()?)?
        .into_iter()
        .map(|e| e.as_slice().to_vec())
        .collect();
    if targets.iter().any(|t| t.len() != config.model.embed_dim) {
        return Err(Error::Config("word vector dimension differs from embed_dim".into()));
    }

    let mut log_file = match &output.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("log.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let mut model = Manet::new(config.model.clone())?;
    let mut opt = Sgd::new(&model.store, config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epochs = Vec::new();
    let mut batches = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut sum_cls, mut sum_emb, mut correct) = (0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<ClipGrad> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let mut rng = sample_rng(config.seed, epoch, i);
                    let input = clip_input(&s.raw, config.num_frames, config.model.input_side, Some(&mut rng))?;
                    clip_gradient(&model, &input, s.label, &targets[s.label], config.alpha)
                })
                .collect::<Result<_>>()?;
            let n = results.len() as f64;
            let mut grads = Grads::zeros_like(&model.store);
            let (mut l_cls, mut l_emb) = (0.0, 0.0);
            for r in &results {
                grads.add_assign(&r.grads);
                l_cls += r.l_cls;
                l_emb += r.l_emb;
                correct += r.correct as usize;
            }
            grads.scale(1.0 / n);
            let bundle = total_loss(l_cls / n, l_emb / n, config.alpha)?;
            if !bundle.total.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("l_cls={} l_emb={}", bundle.l_cls, bundle.l_emb),
                });
            }
            opt.step(&mut model.store, &grads, lr);
            sum_cls += l_cls;
            sum_emb += l_emb;
            batches.push(BatchLog { epoch, step, loss: bundle });
        }
        let m = train_set.len() as f64;
        let (probs, labels) = predict_samples(&model, val_set, config.num_frames)?;
        let val = recognition_metrics(&probs, &labels, taxonomy)?;
        let entry = EpochLog {
            epoch,
            lr,
            loss: (sum_cls + config.alpha * sum_emb) / m,
            l_cls: sum_cls / m,
            l_emb: sum_emb / m,
            train_acc: correct as f64 / m,
            val_f1_mean: val.f1_mean,
            val_acc_top1: val.acc_top1_fine,
        };
        if let Some((f, p)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
        }
        if best.as_ref().is_none_or(|(_, b, _)| val.f1_mean > *b) {
            best = Some((epoch, val.f1_mean, model.store.clone()));
            if let Some(path) = output.best_checkpoint() {
                save_model(&path, &model, json!({ "epoch": epoch, "val_f1_mean": val.f1_mean }))?;
            }
        }
        epochs.push(entry);
    }

    let (best_epoch, best_val_f1_mean, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_f1_mean,
        epochs,
        batches,
    })
}

pub fn save_model(path: &Path, model: &Manet, meta: serde_json::Value) -> Result<()> {
    checkpoint::save(path, CHECKPOINT_KIND, &model.config, meta, &model.store)
}

pub fn load_model(path: &Path) -> Result<Manet> {
    let ck = checkpoint::load(path)?;
    if ck.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {CHECKPOINT_KIND} checkpoint, found {}",
            ck.kind
        )));
    }
    let mut model = Manet::new(ck.config_as()?)?;
    ck.restore(&mut model.store)?;
    Ok(model)
}

/// Class probabilities for one raw clip under evaluation-mode sampling.
pub fn clip_probabilities(model: &Manet, raw: &Clip, frames: usize) -> Result<Vec<f64>> {
    let input = clip_input(raw, frames, model.config.input_side, None)?;
    Ok(softmax(&model.logits(&input)?))
}

fn predict_samples(model: &Manet, samples: &[Sample], frames: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let probs = samples
        .par_iter()
        .map(|s| clip_probabilities(model, &s.raw, frames))
        .collect::<Result<Vec<_>>>()?;
    Ok((probs, samples.iter().map(|s| s.label).collect()))
}

/// One row of a prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub clip_id: String,
    pub probs: Vec<f64>,
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<PredictionRow>,
}

pub fn evaluate(model: &Manet, data: &Dataset, split: Split, frames: usize) -> Result<Evaluation> {
    let samples = load_split(data, split)?;
    evaluate_samples(model, &data.taxonomy, &samples, frames)
}

pub fn evaluate_samples(
    model: &Manet,
    taxonomy: &LabelTaxonomy,
    samples: &[Sample],
    frames: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let (probs, labels) = predict_samples(model, samples, frames)?;
    let recognition = recognition_metrics(&probs, &labels, taxonomy)?;
    Ok(Evaluation {
        report: MetricsReport {
            scale: Scale::Unit,
            num_samples: samples.len(),
            recognition: Some(recognition),
            emotion: None,
        },
        predictions: samples
            .iter()
            .zip(probs)
            .map(|(s, probs)| PredictionRow {
                clip_id: s.clip_id.clone(),
                probs,
            })
            .collect(),
    })
}

/// Offline metrics from a prediction dump and ground-truth manifest rows.
/// Predictions are matched to rows by clip id; rows without a prediction
/// are an error.
pub fn metrics_from_dump(
    predictions: &[PredictionRow],
    rows: &[ManifestRow],
    taxonomy: &LabelTaxonomy,
) -> Result<MetricsReport> {
    let by_id: std::collections::HashMap<&str, &ManifestRow> =
        rows.iter().map(|r| (r.clip_id.as_str(), r)).collect();
    let mut probs = Vec::with_capacity(predictions.len());
    let mut labels = Vec::with_capacity(predictions.len());
    for p in predictions {
        let row = by_id
            .get(p.clip_id.as_str())
            .ok_or_else(|| Error::Dataset(format!("no ground truth for clip {}", p.clip_id)))?;
        probs.push(p.probs.clone());
        labels.push(row.single_label()?);
    }
    if probs.is_empty() {
        return Err(Error::Dataset("empty prediction file".into()));
    }
    Ok(MetricsReport {
        scale: Scale::Unit,
        num_samples: probs.len(),
        recognition: Some(recognition_metrics(&probs, &labels, taxonomy)?),
        emotion: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub fine_id: usize,
    pub name: String,
    pub coarse_id: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub ranked: Vec<RankedClass>,
    /// Coarse group of the top fine class.
    pub coarse_id: usize,
    pub coarse_name: String,
}

/// Classes ranked by probability (ties to the lower id), top `k` kept.
pub fn predict(model: &Manet, taxonomy: &LabelTaxonomy, raw: &Clip, frames: usize, k: usize) -> Result<Prediction> {
    let probs = clip_probabilities(model, raw, frames)?;
    if probs.len() != taxonomy.num_fine() {
        return Err(Error::Config("model and taxonomy disagree on class count".into()));
    }
    let ranked: Vec<RankedClass> = crate::metrics::top_k(&probs, k.min(probs.len()))
        .into_iter()
        .map(|id| {
            let f = &taxonomy.fine()[id];
            RankedClass {
                fine_id: id,
                name: f.name.clone(),
                coarse_id: f.coarse_id,
                prob: probs[id],
            }
        })
        .collect();
    let coarse_id = taxonomy.coarse_of(argmax(&probs))?;
    Ok(Prediction {
        clip_id: raw.clip_id.clone(),
        ranked,
        coarse_id,
        coarse_name: taxonomy.coarse()[coarse_id].name.clone(),
    })
}

/// One line of an alpha sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub best_epoch: usize,
    pub val_f1_mean: f64,
    pub test_f1_mean: f64,
    pub test_acc_top1_fine: f64,
    pub test_acc_top1_coarse: f64,
}

/// Trains once per `alpha` with otherwise identical settings and reports
/// test-split metrics of each best-validation model.
pub fn alpha_sweep(config: &TrainConfig, data: &Dataset, alphas: &[f64]) -> Result<Vec<SweepRow>> {
    let train_set = load_split(data, Split::Train)?;
    let val_set = load_split(data, Split::Val)?;
    let test_set = load_split(data, Split::Test)?;
    alphas
        .iter()
        .map(|&alpha| {
            let cfg = TrainConfig { alpha, ..config.clone() };
            let out = train_on(&cfg, &data.taxonomy, &train_set, &val_set, &TrainOutput::default())?;
            let eval = evaluate_samples(&out.model, &data.taxonomy, &test_set, cfg.num_frames)?;
            let r = eval.report.recognition.expect("recognition metrics");
            Ok(SweepRow {
                alpha,
                best_epoch: out.best_epoch,
                val_f1_mean: out.best_val_f1_mean,
                test_f1_mean: r.f1_mean,
                test_acc_top1_fine: r.acc_top1_fine,
                test_acc_top1_coarse: r.acc_top1_coarse,
            })
        })
        .collect()
}

/// Fixed-width text table of sweep rows.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>6}  {:>10}  {:>11}  {:>12}  {:>13}  {:>12}\n",
        "alpha", "best_epoch", "val_F1mean", "test_F1mean", "test_top1_fine", "test_top1_crs"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>6}  {:>10}  {:>11.4}  {:>12.4}  {:>13.4}  {:>12.4}\n",
            r.alpha, r.best_epoch, r.val_f1_mean, r.test_f1_mean, r.test_acc_top1_fine, r.test_acc_top1_coarse
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_steps() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.001);
        assert_eq!(c.lr_at(29), 0.001);
        assert!((c.lr_at(30) - 1e-4).abs() < 1e-18);
        assert!((c.lr_at(79) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut store = ParamStore::new();
        let id = store.add("w".into(), Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let mut g = Grads::zeros_like(&store);
        g.get_mut(id).copy_from_slice(&[0.5, 0.25]);
        let mut opt = Sgd::new(&store, 0.9, 0.1);
        opt.step(&mut store, &g, 0.1);
        // v = g + wd*w = [0.6, 0.05]
        assert_eq!(store.get(id).data(), &[1.0 - 0.1 * 0.6, -2.0 - 0.1 * 0.05]);
        opt.step(&mut store, &g, 0.1);
        let w0 = 1.0 - 0.1 * 0.6;
        let v = 0.9 * 0.6 + 0.5 + 0.1 * w0;
        assert!((store.get(id).data()[0] - (w0 - 0.1 * v)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
