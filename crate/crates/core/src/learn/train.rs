//! Supervised and two-view contrastive training, and linear probing.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{forward, prepare, Backbone, CastInput, ModelConfig};
use crate::rng::Stream;
use crate::tensorcore::nn::{cross_entropy, init_linear, linear};
use crate::tensorcore::{Graph, ParamGrads, ParamStore, Tensor, Var};

use super::augment::augment;
use super::optim::{cosine_schedule, OptState};

/// A prepared input with its class label.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: CastInput,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_frac: f64,
    /// Rescale the averaged gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    /// Stop after the first epoch whose metric reaches this value.
    pub stop_at: Option<f64>,
    /// Where to save parameters if the loss stops being finite.
    pub divergence_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            warmup_frac: 0.1,
            clip_norm: Some(1.0),
            stop_at: None,
            divergence_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss,metric\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.step, r.loss, r.metric);
        }
        s
    }

    pub fn last_metric(&self) -> Option<f64> {
        self.rows.last().map(|r| r.metric)
    }
}

fn diverged(store: &ParamStore, tc: &TrainConfig, step: usize, loss: f64) -> Error {
    if let Some(path) = &tc.divergence_checkpoint {
        // best effort: the divergence is the error worth reporting
        let _ = store.save(path);
    }
    Error::DivergenceDetected { step, loss }
}

fn finish_step(store: &mut ParamStore, opt: &mut OptState, grads: &mut ParamGrads, tc: &TrainConfig, lr_scale: f64) {
    if let Some(max) = tc.clip_norm {
        let norm = grads.global_norm();
        if norm > max {
            grads.scale(max / norm);
        }
    }
    opt.apply(store, grads, lr_scale);
}

/// Top-1 accuracy of the model's head.
pub fn accuracy(store: &ParamStore, cfg: &ModelConfig, backbone: Backbone, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut rng = Stream::new(0, "eval.forward");
    let mut correct = 0;
    for ex in data {
        let mut g = Graph::new();
        let out = forward(&mut g, store, cfg, backbone, &ex.input, &mut rng)?;
        correct += usize::from(crate::graphpool::argmax(g.value(out.logits).row(0)) == ex.label);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mini-batch cross-entropy training of the classifier head on the class
/// token. The logged metric is validation accuracy, or training accuracy
/// when `val` is empty.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    backbone: Backbone,
    train: &[Example],
    val: &[Example],
    tc: &TrainConfig,
    opt: &mut OptState,
    seed: u64,
) -> Result<TrainLog> {
    let mut order_rng = Stream::new(seed, "train.order");
    let mut fwd_rng = Stream::new(seed, "train.forward");
    let bs = tc.batch_size.max(1);
    let per_epoch = train.len().div_ceil(bs);
    let total = per_epoch * tc.epochs;
    let warmup = (tc.warmup_frac * total as f64).round() as usize;
    let mut log = TrainLog::default();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..tc.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(bs) {
            let mut grads = ParamGrads::zeros_like(store);
            for &i in batch {
                let ex = &train[i];
                let mut g = Graph::new();
                let out = forward(&mut g, store, cfg, backbone, &ex.input, &mut fwd_rng)?;
                correct += usize::from(crate::graphpool::argmax(g.value(out.logits).row(0)) == ex.label);
                let loss = cross_entropy(&mut g, out.logits, &[ex.label])?;
                let l = g.value(loss).item();
                if !l.is_finite() {
                    return Err(diverged(store, tc, step, l));
                }
                loss_sum += l;
                let gr = g.backward(loss)?;
                grads.accumulate(&gr.params(&g, store));
            }
            grads.scale(1.0 / batch.len() as f64);
            finish_step(store, opt, &mut grads, tc, cosine_schedule(step, total, warmup));
            step += 1;
        }
        let loss = loss_sum / train.len().max(1) as f64;
        if !loss.is_finite() {
            return Err(diverged(store, tc, step, loss));
        }
        let metric = if val.is_empty() {
            correct as f64 / train.len().max(1) as f64
        } else {
            accuracy(store, cfg, backbone, val)?
        };
        log.rows.push(LogRow { epoch, step, loss, metric });
        if tc.stop_at.is_some_and(|t| metric >= t) {
            break;
        }
    }
    Ok(log)
}

pub const CONTRASTIVE_TEMPERATURE: f64 = 0.2;

pub fn init_projection_head(store: &mut ParamStore, d: usize, seed: u64) {
    let mut rng = Stream::new(seed, "init.proj");
    for l in 1..=3 {
        init_linear(store, &format!("proj.fc{l}"), d, d, &mut rng);
    }
}

fn project(g: &mut Graph, store: &ParamStore, e: Var) -> Result<Var> {
    let h = linear(g, store, "proj.fc1", e)?;
    let h = g.gelu(h)?;
    let h = linear(g, store, "proj.fc2", h)?;
    let h = g.gelu(h)?;
    linear(g, store, "proj.fc3", h)
}

/// Symmetric in-batch InfoNCE between matching rows of `a` and `b`.
pub fn info_nce(g: &mut Graph, a: Var, b: Var, temperature: f64) -> Result<Var> {
    let n = g.value(a).rows();
    let targets: Vec<usize> = (0..n).collect();
    let an = g.row_normalize(a)?;
    let bn = g.row_normalize(b)?;
    let ab = g.matmul_nt(an, bn)?;
    let ab = g.scale(ab, 1.0 / temperature)?;
    let ba = g.transpose(ab)?;
    let l1 = cross_entropy(g, ab, &targets)?;
    let l2 = cross_entropy(g, ba, &targets)?;
    let s = g.add(l1, l2)?;
    g.scale(s, 0.5)
}

/// Precomputed augmented views of each image.
pub fn make_views(examples: &[Example], cfg: &ModelConfig, per_image: usize, seed: u64) -> Result<Vec<Vec<CastInput>>> {
    let mut rng = Stream::new(seed, "contrastive.views");
    examples
        .iter()
        .map(|ex| (0..per_image).map(|_| prepare(&augment(&ex.input.image, &mut rng), cfg)).collect())
        .collect()
}

/// Two-view contrastive training of the backbone with a projection head
/// (`proj.*`, created if absent). Each epoch draws two distinct views of
/// every image from `views`. The logged metric is the mean loss.
#[allow(clippy::too_many_arguments)]
pub fn train_contrastive(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    backbone: Backbone,
    views: &[Vec<CastInput>],
    tc: &TrainConfig,
    opt: &mut OptState,
    seed: u64,
) -> Result<TrainLog> {
    if store.get("proj.fc1.w").is_none() {
        init_projection_head(store, cfg.channels, seed);
    }
    if views.iter().any(|v| v.len() < 2) {
        return Err(Error::InvalidConfig("contrastive training needs two views per image".into()));
    }
    let mut order_rng = Stream::new(seed, "contrastive.order");
    let mut fwd_rng = Stream::new(seed, "contrastive.forward");
    let bs = tc.batch_size.max(2);
    let per_epoch = views.len().div_ceil(bs);
    let total = per_epoch * tc.epochs;
    let warmup = (tc.warmup_frac * total as f64).round() as usize;
    let mut log = TrainLog::default();
    let mut step = 0;
    let mut order: Vec<usize> = (0..views.len()).collect();
    for epoch in 0..tc.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(bs) {
            if batch.len() < 2 {
                continue;
            }
            let mut graphs = Vec::with_capacity(2 * batch.len());
            for side in 0..2 {
                for &i in batch {
                    let vi = order_rng.below(views[i].len() - 1);
                    let pick =
                        if side == 0 { vi } else { (vi + 1 + order_rng.below(views[i].len() - 1)) % views[i].len() };
                    let mut g = Graph::new();
                    let out = forward(&mut g, store, cfg, backbone, &views[i][pick], &mut fwd_rng)?;
                    let z = project(&mut g, store, out.embedding)?;
                    graphs.push((g, z));
                }
            }
            let rows: Vec<Vec<f64>> = graphs.iter().map(|(g, z)| g.value(*z).data().to_vec()).collect();
            let nb = batch.len();
            let mut lg = Graph::new();
            let a = lg.constant(Tensor::from_rows(&rows[..nb])?)?;
            let b = lg.constant(Tensor::from_rows(&rows[nb..])?)?;
            let loss = info_nce(&mut lg, a, b, CONTRASTIVE_TEMPERATURE)?;
            let l = lg.value(loss).item();
            if !l.is_finite() {
                return Err(diverged(store, tc, step, l));
            }
            loss_sum += l;
            batches += 1;
            let lgr = lg.backward(loss)?;
            let (ga, gb) = (lgr.wrt(a).unwrap(), lgr.wrt(b).unwrap());
            let mut grads = ParamGrads::zeros_like(store);
            for (k, (g, z)) in graphs.iter().enumerate() {
                let src = if k < nb { ga.row(k) } else { gb.row(k - nb) };
                let seed_grad = Tensor::matrix(1, src.len(), src.to_vec())?;
                let gr = g.backward_with(&[(*z, seed_grad)])?;
                grads.accumulate(&gr.params(g, store));
            }
            finish_step(store, opt, &mut grads, tc, cosine_schedule(step, total, warmup));
            step += 1;
        }
        let loss = loss_sum / batches.max(1) as f64;
        log.rows.push(LogRow { epoch, step, loss, metric: loss });
    }
    Ok(log)
}

/// Frozen embeddings, one row per example.
pub fn embeddings(
    store: &ParamStore,
    cfg: &ModelConfig,
    backbone: Backbone,
    data: &[Example],
) -> Result<Vec<Vec<f64>>> {
    let mut rng = Stream::new(0, "eval.forward");
    data.iter()
        .map(|ex| {
            let mut g = Graph::new();
            let out = forward(&mut g, store, cfg, backbone, &ex.input, &mut rng)?;
            Ok(g.value(out.embedding).data().to_vec())
        })
        .collect()
}

/// Trains a linear classifier on frozen features and reports held-out
/// top-1 accuracy.
pub fn linear_probe(
    train: (&[Vec<f64>], &[usize]),
    test: (&[Vec<f64>], &[usize]),
    n_classes: usize,
    seed: u64,
) -> Result<f64> {
    let (xs, ys) = train;
    if xs.is_empty() || xs.len() != ys.len() || test.0.len() != test.1.len() {
        return Err(Error::ShapeMismatch("probe features and labels".into()));
    }
    let d = xs[0].len();
    let mut store = ParamStore::new();
    init_linear(&mut store, "probe", d, n_classes, &mut Stream::new(seed, "init.probe"));
    let x = Tensor::from_rows(xs)?;
    let mut opt = OptState::adam(0.05)?;
    for _ in 0..300 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let logits = linear(&mut g, &store, "probe", xv)?;
        let loss = cross_entropy(&mut g, logits, ys)?;
        let gr = g.backward(loss)?;
        let pg = gr.params(&g, &store);
        opt.apply(&mut store, &pg, 1.0);
    }
    if test.0.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let xv = g.constant(Tensor::from_rows(test.0)?)?;
    let logits = linear(&mut g, &store, "probe", xv)?;
    let l = g.value(logits);
    let correct = (0..l.rows()).filter(|&r| crate::graphpool::argmax(l.row(r)) == test.1[r]).count();
    Ok(correct as f64 / l.rows() as f64)
}
