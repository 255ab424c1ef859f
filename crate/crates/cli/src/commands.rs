use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cast_core::eval::{
    boundary_fscore, default_boundary_tolerance, hierarchical_prf, majority_foreground_miou, metrics_summary,
    region_miou, write_metrics_csv, MetricRow,
};
use cast_core::graphpool::argmax;
use cast_core::learn::tta::{changed_params, TTA_LEARNING_RATE};
use cast_core::learn::{
    accuracy, embeddings, linear_probe, make_views, prototypes, synth_dataset, train_contrastive, train_supervised,
    tta_step, Example, OptState, SynthSample, TrainConfig,
};
use cast_core::model::{
    extra_pool, forward_cast, forward_vit, init_params, kmeans_fine_to_coarse, patch_labels_to_map, prepare, Backbone,
    ModelConfig,
};
use cast_core::pixelio::{load_image, load_label_map, render_hierarchy_overlay, save_image, save_label_map};
use cast_core::rng::Stream;
use cast_core::tensorcore::nn::cross_entropy;
use cast_core::tensorcore::{grad_check, GradCheckConfig};
use cast_core::{Error, Graph, ParamStore, Tensor};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::{BackboneArg, Common, ConfigError, Objective};

/// Cluster counts of the patch-token k-means baseline.
const KMEANS_COUNTS: [usize; 3] = [32, 16, 8];

fn setup(common: &Common) -> anyhow::Result<PipelineConfig> {
    let cfg = PipelineConfig::load(common.config.as_deref(), &common.overrides)?;
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn write_manifest(
    common: &Common,
    command: &str,
    cfg: &PipelineConfig,
    inputs: serde_json::Value,
) -> anyhow::Result<()> {
    let manifest = json!({
        "command": command,
        "seed": common.seed,
        "config_sha256": cfg.sha256(),
        "config": cfg,
        "inputs": inputs,
        "versions": { "cast": env!("CARGO_PKG_VERSION"), "checkpoint_format": 1 },
    });
    std::fs::write(common.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn write_json(path: PathBuf, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Loads a checkpoint and checks it carries every parameter the config
/// implies, with matching shapes.
fn load_checkpoint(path: &Path, model: &ModelConfig) -> anyhow::Result<(ParamStore, Backbone)> {
    if !path.exists() {
        return Err(Error::ConfigMismatch(format!("checkpoint {} not found", path.display())).into());
    }
    let store = ParamStore::load(path)?;
    let backbone = if store.get("vit.patch.w").is_some() { Backbone::Vit } else { Backbone::Cast };
    let expected = init_params(model, backbone, 0);
    for (name, t) in expected.iter() {
        match store.get(name) {
            Some(v) if v.shape() == t.shape() => {}
            Some(v) => {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: checkpoint {:?}, config {:?}",
                    v.shape(),
                    t.shape()
                ))
                .into())
            }
            None => return Err(Error::ConfigMismatch(format!("checkpoint lacks {name}")).into()),
        }
    }
    Ok((store, backbone))
}

fn dataset(cfg: &PipelineConfig, seed: u64, n: usize) -> anyhow::Result<(Vec<Example>, Vec<SynthSample>)> {
    let samples = synth_dataset(seed, n, cfg.data.size)?;
    let examples = samples
        .iter()
        .map(|s| Ok(Example { input: prepare(&s.image, &cfg.model)?, label: s.class_label }))
        .collect::<cast_core::Result<Vec<_>>>()?;
    Ok((examples, samples))
}

/// Dataset seeds per split, derived from the run seed.
fn split_seed(seed: u64, split: &str) -> u64 {
    Stream::new(seed, split).next_u64()
}

pub fn synth(common: &Common, n: usize) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let samples = synth_dataset(common.seed, n, cfg.data.size)?;
    let mut labels = String::from("index,class\n");
    for (i, s) in samples.iter().enumerate() {
        save_image(&s.image, common.out.join(format!("sample_{i:03}.ppm")))?;
        save_label_map(&s.gt_mask, common.out.join(format!("sample_{i:03}_parts.pgm")))?;
        writeln!(labels, "{i},{}", s.class_label)?;
    }
    std::fs::write(common.out.join("labels.csv"), labels)?;
    write_manifest(common, "synth", &cfg, json!({ "n": n }))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn segment(common: &Common, image: &Path, checkpoint: &Path, extra: Option<usize>) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let (store, backbone) = load_checkpoint(checkpoint, &cfg.model)?;
    if backbone != Backbone::Cast {
        return Err(Error::ConfigMismatch("segmentation needs a segment-token checkpoint".into()).into());
    }
    let img = load_image(image)?;
    let input = prepare(&img, &cfg.model)?;
    let mut g = Graph::new();
    let mut rng = Stream::new(common.seed, "segment.forward");
    let fwd = forward_cast(&mut g, &store, &cfg.model, &input, &mut rng)?;
    let h = &fwd.hierarchy;
    h.export(&common.out)?;
    let top = h.n_levels() - 1;
    let levels: Vec<_> = (top.saturating_sub(2)..=top).rev().map(|l| h.chained(l)).collect();
    save_image(&render_hierarchy_overlay(&img, &levels)?, common.out.join("overlay.ppm"))?;
    if let Some(n) = extra {
        let ext = extra_pool(&mut g, &store, &cfg.model, &fwd, n, &mut rng)?;
        save_label_map(&ext.chained(ext.n_levels() - 1), common.out.join(format!("level_extra{n}.pgm")))?;
    }
    let probs = softmax(g.value(fwd.logits).row(0));
    let class = argmax(&probs);
    println!("class {class} confidence {:.4}", probs[class]);
    write_json(common.out.join("prediction.json"), &json!({ "class": class, "probabilities": probs }))?;
    write_manifest(
        common,
        "segment",
        &cfg,
        json!({ "image": path_str(image), "checkpoint": path_str(checkpoint), "extra_pool": extra }),
    )
}

pub fn train(
    common: &Common,
    epochs: Option<usize>,
    objective: Objective,
    backbone: BackboneArg,
) -> anyhow::Result<()> {
    let mut cfg = setup(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let backbone = match backbone {
        BackboneArg::Cast => Backbone::Cast,
        BackboneArg::Vit => Backbone::Vit,
    };
    let (train, _) = dataset(&cfg, split_seed(common.seed, "data.train"), cfg.data.n_train)?;
    let mut store = init_params(&cfg.model, backbone, common.seed);
    let t = &cfg.train;
    let tc = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        clip_norm: Some(t.clip_norm),
        stop_at: t.stop_at,
        divergence_checkpoint: Some(common.out.join("diverged.bin")),
        ..Default::default()
    };
    let log = match objective {
        Objective::Supervised => {
            let (val, _) = dataset(&cfg, split_seed(common.seed, "data.val"), cfg.data.n_val)?;
            let mut opt = OptState::sgd(t.learning_rate, t.momentum)?;
            train_supervised(&mut store, &cfg.model, backbone, &train, &val, &tc, &mut opt, common.seed)?
        }
        Objective::Contrastive => {
            let views = make_views(&train, &cfg.model, t.contrastive_views, common.seed)?;
            let mut opt = OptState::adam(t.contrastive_learning_rate)?;
            train_contrastive(&mut store, &cfg.model, backbone, &views, &tc, &mut opt, common.seed)?
        }
    };
    store.save(common.out.join("checkpoint.bin"))?;
    std::fs::write(common.out.join("train_log.csv"), log.to_csv())?;
    if let Some(r) = log.rows.last() {
        println!("epoch {} loss {:.4} metric {:.4}", r.epoch, r.loss, r.metric);
    }
    let objective = format!("{objective:?}").to_lowercase();
    write_manifest(common, "train", &cfg, json!({ "objective": objective, "backbone": backbone }))
}

pub fn probe(common: &Common, checkpoint: &Path) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let (store, backbone) = load_checkpoint(checkpoint, &cfg.model)?;
    let (train, _) = dataset(&cfg, split_seed(common.seed, "data.train"), cfg.data.n_train)?;
    let (test, _) = dataset(&cfg, split_seed(common.seed, "data.test"), cfg.data.n_test)?;
    let ftr = embeddings(&store, &cfg.model, backbone, &train)?;
    let fte = embeddings(&store, &cfg.model, backbone, &test)?;
    let ytr: Vec<usize> = train.iter().map(|e| e.label).collect();
    let yte: Vec<usize> = test.iter().map(|e| e.label).collect();
    let acc = linear_probe((&ftr, &ytr), (&fte, &yte), cfg.model.n_classes, common.seed)?;
    println!("probe accuracy {acc:.4}");
    write_json(common.out.join("probe.json"), &json!({ "accuracy": acc, "n_train": ytr.len(), "n_test": yte.len() }))?;
    write_manifest(common, "probe", &cfg, json!({ "checkpoint": path_str(checkpoint) }))
}

fn finish_metrics(common: &Common, rows: &[MetricRow]) -> anyhow::Result<()> {
    write_metrics_csv(rows, common.out.join("metrics.csv"))?;
    write_json(common.out.join("summary.json"), &metrics_summary(rows))
}

fn row(metric: &str, class: &str, value: f64) -> MetricRow {
    MetricRow { metric: metric.into(), class: class.into(), value }
}

pub fn eval(common: &Common, maps: Option<(PathBuf, PathBuf)>, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let mut rows = Vec::new();
    if let Some((pred_path, gt_path)) = &maps {
        let pred = load_label_map(pred_path)?;
        let gt = load_label_map(gt_path)?;
        let n_classes = pred.n_segments.max(gt.n_segments);
        rows.extend(region_miou(&pred, &gt, n_classes)?.rows());
        rows.extend(boundary_fscore(&pred, &gt, default_boundary_tolerance(gt.height, gt.width))?.rows());
        for r in hierarchical_prf(&[pred], &[gt])? {
            rows.extend(r.rows());
        }
        finish_metrics(common, &rows)?;
        return write_manifest(common, "eval", &cfg, json!({ "pred": path_str(pred_path), "gt": path_str(gt_path) }));
    }
    let Some(checkpoint) = checkpoint else {
        bail!(ConfigError("eval needs --pred/--gt or --checkpoint".into()));
    };
    let (store, backbone) = load_checkpoint(checkpoint, &cfg.model)?;
    let (test, samples) = dataset(&cfg, split_seed(common.seed, "data.test"), cfg.data.n_test)?;
    rows.push(row("accuracy", "all", accuracy(&store, &cfg.model, backbone, &test)?));
    let n = test.len().max(1) as f64;
    match backbone {
        Backbone::Cast => {
            let levels = cfg.model.n_levels();
            let mut fg = vec![0.0; levels];
            let mut bf = vec![0.0; levels];
            let mut nest = vec![0.0; levels.saturating_sub(1)];
            let mut rng = Stream::new(0, "eval.forward");
            for (ex, s) in test.iter().zip(&samples) {
                let mut g = Graph::new();
                let fwd = forward_cast(&mut g, &store, &cfg.model, &ex.input, &mut rng)?;
                let tol = default_boundary_tolerance(s.gt_mask.height, s.gt_mask.width);
                for l in 0..levels {
                    let map = fwd.hierarchy.hardened(l)?;
                    fg[l] += majority_foreground_miou(&map, &s.object_mask())? / n;
                    bf[l] += boundary_fscore(&map, &s.gt_mask, tol)?.fscore / n;
                }
                for (l, v) in nest.iter_mut().enumerate() {
                    *v += fwd.hierarchy.nestedness(l)?.fraction() / n;
                }
            }
            for l in 0..levels {
                rows.push(row("foreground_miou", &format!("level{l}"), fg[l]));
                rows.push(row("boundary_f", &format!("level{l}"), bf[l]));
            }
            for (l, v) in nest.iter().enumerate() {
                rows.push(row("nestedness", &format!("level{l}"), *v));
            }
        }
        Backbone::Vit => {
            let mut fg = vec![0.0; KMEANS_COUNTS.len()];
            for (ex, s) in test.iter().zip(&samples) {
                let mut g = Graph::new();
                let fwd = forward_vit(&mut g, &store, &cfg.model, &ex.input.image)?;
                let tk = g.value(fwd.tokens);
                let patches = Tensor::matrix(tk.rows() - 1, tk.cols(), tk.data()[tk.cols()..].to_vec())?;
                let levels = kmeans_fine_to_coarse(&patches, &KMEANS_COUNTS, common.seed)?;
                for (acc, labels) in fg.iter_mut().zip(&levels) {
                    let map = patch_labels_to_map(labels, fwd.grid.0, fwd.grid.1, cfg.model.vit_patch);
                    *acc += majority_foreground_miou(&map, &s.object_mask())? / n;
                }
            }
            for (k, v) in KMEANS_COUNTS.iter().zip(fg) {
                rows.push(row("foreground_miou", &format!("kmeans{k}"), v));
            }
        }
    }
    finish_metrics(common, &rows)?;
    write_manifest(common, "eval", &cfg, json!({ "checkpoint": path_str(checkpoint) }))
}

pub fn tta(common: &Common, checkpoint: &Path, n_samples: usize) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let (store, backbone) = load_checkpoint(checkpoint, &cfg.model)?;
    let (train, _) = dataset(&cfg, split_seed(common.seed, "data.train"), cfg.data.n_train)?;
    let (test, samples) = dataset(&cfg, split_seed(common.seed, "data.test"), n_samples)?;
    let protos = prototypes(&store, &cfg.model, backbone, &train)?;
    let mut csv = String::from("sample,entropy_before,entropy_after,miou_before,miou_after,changed_params\n");
    for (i, (ex, s)) in test.iter().zip(&samples).enumerate() {
        let rec = tta_step(&store, &cfg.model, backbone, &ex.input, &protos, TTA_LEARNING_RATE)?;
        let miou = |h: &Option<cast_core::graphpool::Hierarchy>| -> anyhow::Result<f64> {
            Ok(match h {
                // figure/ground readout at the coarsest level
                Some(h) => majority_foreground_miou(&h.hardened(h.n_levels() - 1)?, &s.object_mask())?,
                None => f64::NAN,
            })
        };
        writeln!(
            csv,
            "{i},{},{},{},{},{}",
            rec.before.entropy,
            rec.after.entropy,
            miou(&rec.before.hierarchy)?,
            miou(&rec.after.hierarchy)?,
            changed_params(&store, &rec.adapted).len()
        )?;
    }
    std::fs::write(common.out.join("tta.csv"), csv)?;
    write_manifest(
        common,
        "tta",
        &cfg,
        json!({ "checkpoint": path_str(checkpoint), "samples": n_samples, "level": cfg.model.n_levels() - 1 }),
    )
}

pub fn gradcheck(common: &Common, entries_per_param: usize) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let model = &cfg.model;
    let store = init_params(model, Backbone::Cast, common.seed);
    let sample = &synth_dataset(common.seed, 1, cfg.data.size)?[0];
    let input = prepare(&sample.image, model)?;
    let label = sample.class_label;
    let gc = GradCheckConfig {
        tol: 1e-3,
        max_entries_per_param: Some(entries_per_param),
        seed: common.seed,
        ..Default::default()
    };
    let report = grad_check(
        &store,
        |g, st| {
            let fwd = forward_cast(g, st, model, &input, &mut Stream::new(0, "gradcheck.forward"))?;
            let ce = cross_entropy(g, fwd.logits, &[label])?;
            let sq = g.mul(fwd.f_seg, fwd.f_seg)?;
            let reg = g.mean(sq)?;
            g.add(ce, reg)
        },
        &gc,
    )?;
    println!(
        "max relative error {:.3e} over {} entries: {}",
        report.max_rel_error,
        report.n_checked,
        if report.passed { "pass" } else { "FAIL" }
    );
    write_json(
        common.out.join("gradcheck.json"),
        &json!({
            "max_rel_error": report.max_rel_error,
            "tol": report.tol,
            "n_checked": report.n_checked,
            "worst": report.worst,
            "passed": report.passed,
        }),
    )?;
    write_manifest(common, "gradcheck", &cfg, json!({ "entries_per_param": entries_per_param }))?;
    if !report.passed {
        bail!("gradient check failed: max relative error {:.3e}", report.max_rel_error);
    }
    Ok(())
}
