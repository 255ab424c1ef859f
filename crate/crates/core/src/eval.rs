//! Segmentation and recognition metrics.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pixelio::LabelMap;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub name: String,
    /// `(class id, value)` for every scored class.
    pub per_class: Vec<(usize, f64)>,
    /// Unweighted average of `per_class`.
    pub mean: f64,
    /// Pixel count of each scored class in the reference map.
    pub support: Vec<usize>,
}

impl MetricReport {
    fn new(name: &str, per_class: Vec<(usize, f64)>, support: Vec<usize>) -> Self {
        let mean = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64
        };
        MetricReport { name: name.to_string(), per_class, mean, support }
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows: Vec<MetricRow> = self
            .per_class
            .iter()
            .map(|&(c, v)| MetricRow { metric: self.name.clone(), class: c.to_string(), value: v })
            .collect();
        rows.push(MetricRow { metric: self.name.clone(), class: "mean".into(), value: self.mean });
        rows
    }
}

fn same_dims(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::DimMismatch(format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    Ok(())
}

/// Per-class intersection over union. Labels `>= n_classes` are void.
/// The mean runs over classes that occur in either map, which keeps the
/// metric symmetric in its arguments.
pub fn region_miou(pred: &LabelMap, gt: &LabelMap, n_classes: usize) -> Result<MetricReport> {
    same_dims(pred, gt)?;
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (p, g) = (p as usize, g as usize);
        if g < n_classes {
            support[g] += 1;
        }
        if p == g && p < n_classes {
            inter[p] += 1;
            union[p] += 1;
        } else {
            if p < n_classes {
                union[p] += 1;
            }
            if g < n_classes {
                union[g] += 1;
            }
        }
    }
    let per_class: Vec<(usize, f64)> =
        (0..n_classes).filter(|&c| union[c] > 0).map(|c| (c, inter[c] as f64 / union[c] as f64)).collect();
    let support = per_class.iter().map(|&(c, _)| support[c]).collect();
    Ok(MetricReport::new("miou", per_class, support))
}

/// Squared Euclidean distance to the nearest `true` cell, exact
/// (separable lower-envelope transform).
pub fn squared_distance_transform(h: usize, w: usize, sites: &[bool]) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut f: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { INF }).collect();
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    // columns
    for x in 0..w {
        for y in 0..h {
            buf[y] = f[y * w + x];
        }
        dt_1d(&buf[..h], &mut out[..h]);
        for y in 0..h {
            f[y * w + x] = out[y];
        }
    }
    // rows
    for y in 0..h {
        buf[..w].copy_from_slice(&f[y * w..(y + 1) * w]);
        dt_1d(&buf[..w], &mut out[..w]);
        f[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    f
}

fn dt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: replace the only parabola
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = (q as f64 - p as f64).powi(2) + f[p];
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

impl BoundaryScore {
    pub fn rows(&self) -> Vec<MetricRow> {
        [("precision", self.precision), ("recall", self.recall), ("fscore", self.fscore)]
            .iter()
            .map(|&(k, v)| MetricRow { metric: "boundary".into(), class: k.into(), value: v })
            .collect()
    }
}

/// Default matching tolerance: 0.75% of the image diagonal.
pub fn default_boundary_tolerance(h: usize, w: usize) -> f64 {
    0.0075 * ((h * h + w * w) as f64).sqrt()
}

/// Fraction of `from` boundary pixels within `tol` (Euclidean) of a `to`
/// boundary pixel; 1 when `from` has no boundary.
fn matched_fraction(from: &[bool], to_dist2: &[f64], tol: f64) -> f64 {
    let total = from.iter().filter(|&&b| b).count();
    if total == 0 {
        return 1.0;
    }
    let hit = from.iter().zip(to_dist2).filter(|(&b, &d)| b && d <= tol * tol + 1e-9).count();
    hit as f64 / total as f64
}

/// Boundary precision/recall/F-score with distance tolerance `tol` pixels.
/// Boundaries are 4-neighbour label transitions.
pub fn boundary_fscore(pred: &LabelMap, gt: &LabelMap, tol: f64) -> Result<BoundaryScore> {
    same_dims(pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    let pb = pred.boundary_mask();
    let gb = gt.boundary_mask();
    let precision = matched_fraction(&pb, &squared_distance_transform(h, w, &gb), tol);
    let recall = matched_fraction(&gb, &squared_distance_transform(h, w, &pb), tol);
    let fscore = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(BoundaryScore { precision, recall, fscore })
}

/// Recall of `gt` boundaries by `pred` boundaries.
pub fn boundary_recall(pred: &LabelMap, gt: &LabelMap, tol: f64) -> Result<f64> {
    same_dims(pred, gt)?;
    let pd = squared_distance_transform(pred.height, pred.width, &pred.boundary_mask());
    Ok(matched_fraction(&gt.boundary_mask(), &pd, tol))
}

/// Assigns each predicted segment the reference label with the largest
/// pixel overlap (ties to the smaller label). Returns the per-pixel class map.
pub fn majority_relabel(pred: &LabelMap, gt: &LabelMap) -> Result<LabelMap> {
    same_dims(pred, gt)?;
    let nc = gt.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let mut counts = vec![0usize; pred.n_segments * nc];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        counts[p as usize * nc + g as usize] += 1;
    }
    let seg_class: Vec<u32> = (0..pred.n_segments)
        .map(|s| {
            let row = &counts[s * nc..(s + 1) * nc];
            let mut best = 0;
            for c in 1..nc {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    let labels = pred.labels.iter().map(|&p| seg_class[p as usize]).collect();
    Ok(LabelMap { height: pred.height, width: pred.width, labels, n_segments: nc })
}

/// Figure/ground mIoU of a segmentation whose segments take the majority
/// label of `gt_binary` (0 = background, 1 = object).
pub fn majority_foreground_miou(segmentation: &LabelMap, gt_binary: &LabelMap) -> Result<f64> {
    let relabeled = majority_relabel(segmentation, gt_binary)?;
    Ok(region_miou(&relabeled, gt_binary, 2)?.mean)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrfReport {
    pub level: usize,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    /// `(class, precision, recall, fscore)`.
    pub per_class: Vec<(usize, f64, f64, f64)>,
}

impl PrfReport {
    pub fn rows(&self) -> Vec<MetricRow> {
        let metric = format!("level{}", self.level);
        let mut rows = Vec::new();
        for &(c, p, r, f) in &self.per_class {
            for (k, v) in [("p", p), ("r", r), ("f", f)] {
                rows.push(MetricRow { metric: format!("{metric}_{k}"), class: c.to_string(), value: v });
            }
        }
        for (k, v) in [("p", self.precision), ("r", self.recall), ("f", self.fscore)] {
            rows.push(MetricRow { metric: format!("{metric}_{k}"), class: "mean".into(), value: v });
        }
        rows
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Per-level precision/recall/F of a predicted hierarchy against reference
/// maps. Each predicted segment takes the reference class of largest
/// overlap; pixel P/R/F are computed per class and averaged over classes.
/// Reference label 0 is background and is not scored.
pub fn hierarchical_prf(pred_levels: &[LabelMap], gt_levels: &[LabelMap]) -> Result<Vec<PrfReport>> {
    if pred_levels.len() != gt_levels.len() {
        return Err(Error::DimMismatch(format!(
            "{} predicted levels vs {} reference levels",
            pred_levels.len(),
            gt_levels.len()
        )));
    }
    let mut out = Vec::with_capacity(pred_levels.len());
    for (level, (pred, gt)) in pred_levels.iter().zip(gt_levels).enumerate() {
        let cls = majority_relabel(pred, gt)?;
        let nc = cls.n_segments;
        let mut tp = vec![0usize; nc];
        let mut npred = vec![0usize; nc];
        let mut ngt = vec![0usize; nc];
        for (&p, &g) in cls.labels.iter().zip(&gt.labels) {
            npred[p as usize] += 1;
            ngt[g as usize] += 1;
            if p == g {
                tp[p as usize] += 1;
            }
        }
        let per_class: Vec<(usize, f64, f64, f64)> = (1..nc)
            .filter(|&c| npred[c] + ngt[c] > 0)
            .map(|c| {
                let p = if npred[c] > 0 { tp[c] as f64 / npred[c] as f64 } else { 0.0 };
                let r = if ngt[c] > 0 { tp[c] as f64 / ngt[c] as f64 } else { 0.0 };
                (c, p, r, harmonic(p, r))
            })
            .collect();
        let k = per_class.len().max(1) as f64;
        let avg = |f: fn(&(usize, f64, f64, f64)) -> f64| per_class.iter().map(f).sum::<f64>() / k;
        out.push(PrfReport { level, precision: avg(|t| t.1), recall: avg(|t| t.2), fscore: avg(|t| t.3), per_class });
    }
    Ok(out)
}

/// Labelled feature vectors (rows assumed unit-norm).
pub struct LabeledFeatures<'a> {
    pub features: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

/// Predicted label of each query by cosine k-nearest-neighbour majority
/// vote. Ties in the vote go to the tied label whose best-ranked neighbour
/// is nearest.
pub fn knn_predict(query: &LabeledFeatures, gallery: &LabeledFeatures, k: usize) -> Result<Vec<usize>> {
    if gallery.features.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let k = k.clamp(1, gallery.features.len());
    let mut preds = Vec::with_capacity(query.features.len());
    for q in query.features {
        let mut sims: Vec<(f64, usize)> = gallery
            .features
            .iter()
            .enumerate()
            .map(|(i, g)| (q.iter().zip(g).map(|(a, b)| a * b).sum::<f64>(), i))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes: Vec<(usize, usize, usize)> = Vec::new(); // (label, count, first rank)
        for (rank, &(_, i)) in sims.iter().take(k).enumerate() {
            let l = gallery.labels[i];
            match votes.iter_mut().find(|v| v.0 == l) {
                Some(v) => v.1 += 1,
                None => votes.push((l, 1, rank)),
            }
        }
        let best = votes.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2))).unwrap();
        preds.push(best.0);
    }
    Ok(preds)
}

/// Segment retrieval accuracy: fraction of query segments whose k-NN
/// majority label matches their own, optionally weighted per segment.
pub fn segment_retrieval(
    query: &LabeledFeatures,
    gallery: &LabeledFeatures,
    k: usize,
    weights: Option<&[f64]>,
) -> Result<f64> {
    let preds = knn_predict(query, gallery, k)?;
    let mut hit = 0.0;
    let mut total = 0.0;
    for (i, (&p, &t)) in preds.iter().zip(query.labels).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        total += w;
        if p == t {
            hit += w;
        }
    }
    Ok(if total > 0.0 { hit / total } else { 0.0 })
}

pub const DEFAULT_RETRIEVAL_K: usize = 20;
pub const DEFAULT_ATTENTION_MASS: f64 = 0.6;

/// Indices of the smallest set of highest-attention segments holding at
/// least `mass` of the row's total attention.
pub fn attention_prefix(row: &[f64], mass: f64) -> Vec<usize> {
    let total: f64 = row.iter().sum();
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut kept = Vec::new();
    for i in order {
        kept.push(i);
        acc += row[i];
        if acc >= mass * total - 1e-12 {
            break;
        }
    }
    kept
}

pub struct FigureGround {
    /// One binary map (1 = figure) per head.
    pub per_head: Vec<LabelMap>,
    pub union: LabelMap,
}

/// Thresholds class-token attention over segments so that each head keeps
/// `mass` of its attention, and paints the kept segments as figure.
pub fn attention_figure_ground(attention: &[Vec<f64>], partition: &LabelMap, mass: f64) -> Result<FigureGround> {
    if !(mass > 0.0 && mass < 1.0) {
        return Err(Error::InvalidConfig(format!("attention mass {mass} outside (0, 1)")));
    }
    let mut union_seg = vec![false; partition.n_segments];
    let mut per_head = Vec::with_capacity(attention.len());
    for row in attention {
        if row.len() != partition.n_segments {
            return Err(Error::ShapeMismatch(format!(
                "attention over {} segments, partition has {}",
                row.len(),
                partition.n_segments
            )));
        }
        let mut keep = vec![false; row.len()];
        for i in attention_prefix(row, mass) {
            keep[i] = true;
            union_seg[i] = true;
        }
        per_head.push(paint(partition, &keep));
    }
    Ok(FigureGround { per_head, union: paint(partition, &union_seg) })
}

fn paint(partition: &LabelMap, keep: &[bool]) -> LabelMap {
    LabelMap {
        height: partition.height,
        width: partition.width,
        labels: partition.labels.iter().map(|&l| keep[l as usize] as u32).collect(),
        n_segments: 2,
    }
}

/// One line of a metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub class: String,
    pub value: f64,
}

pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("metric,class,value\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.metric, r.class, r.value).unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// JSON summary: `{ metric: { class: value } }`.
pub fn metrics_summary(rows: &[MetricRow]) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for r in rows {
        let entry = map.entry(r.metric.clone()).or_insert_with(|| serde_json::Value::Object(Default::default()));
        entry.as_object_mut().unwrap().insert(r.class.clone(), serde_json::json!(r.value));
    }
    serde_json::Value::Object(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> u32) -> LabelMap {
        let labels = (0..h * w).map(|i| f(i / w, i % w)).collect();
        let n = (0..h * w).map(|i| f(i / w, i % w) as usize + 1).max().unwrap();
        LabelMap { height: h, width: w, labels, n_segments: n }
    }

    #[test]
    fn miou_fixtures() {
        let gt = map(8, 8, |y, x| ((x + y) % 3) as u32);
        assert_eq!(region_miou(&gt, &gt, 3).unwrap().mean, 1.0);
        let a = map(8, 8, |_, _| 0);
        let b = map(8, 8, |_, _| 1);
        assert_eq!(region_miou(&a, &b, 2).unwrap().mean, 0.0);
        // left half labelled, right half void
        let half = map(8, 8, |_, x| if x < 4 { 0 } else { 1 });
        let full = map(8, 8, |_, _| 0);
        assert_eq!(region_miou(&half, &full, 1).unwrap().mean, 0.5);
    }

    #[test]
    fn boundary_fixtures() {
        let gt = map(16, 16, |_, x| (x >= 8) as u32);
        let same = boundary_fscore(&gt, &gt, 1.0).unwrap();
        assert_eq!(same.fscore, 1.0);
        let flat = map(16, 16, |_, _| 0);
        let s = boundary_fscore(&flat, &gt, 1.0).unwrap();
        assert_eq!((s.recall, s.fscore), (0.0, 0.0));
    }

    #[test]
    fn boundary_tolerance_edges() {
        let tol = 3.0;
        let gt = map(32, 32, |_, x| (x >= 12) as u32);
        let near = map(32, 32, |_, x| (x >= 12 + 2) as u32);
        let far = map(32, 32, |_, x| (x >= 12 + 4) as u32);
        assert_eq!(boundary_fscore(&near, &gt, tol).unwrap().fscore, 1.0);
        assert_eq!(boundary_fscore(&far, &gt, tol).unwrap().fscore, 0.0);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = crate::rng::Stream::new(8, "edt");
        let (h, w) = (13, 17);
        for _ in 0..20 {
            let sites: Vec<bool> = (0..h * w).map(|_| rng.uniform() < 0.05).collect();
            let fast = squared_distance_transform(h, w, &sites);
            for y in 0..h {
                for x in 0..w {
                    let mut best = 1e20f64;
                    for (i, &s) in sites.iter().enumerate() {
                        if s {
                            let (sy, sx) = ((i / w) as f64, (i % w) as f64);
                            best = best.min((sy - y as f64).powi(2) + (sx - x as f64).powi(2));
                        }
                    }
                    assert_eq!(fast[y * w + x], best);
                }
            }
        }
    }

    #[test]
    fn prf_whole_level_fixture() {
        // gt object: columns 0..8 of 16; pred object: columns 0..4
        let gt = map(16, 16, |_, x| (x < 8) as u32);
        let pred = map(16, 16, |_, x| (x >= 4) as u32);
        let r = &hierarchical_prf(&[pred], std::slice::from_ref(&gt)).unwrap()[0];
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.5);
        assert!((r.fscore - 2.0 / 3.0).abs() < 1e-15);
        let r = &hierarchical_prf(std::slice::from_ref(&gt), std::slice::from_ref(&gt)).unwrap()[0];
        assert_eq!((r.precision, r.recall, r.fscore), (1.0, 1.0, 1.0));
    }

    #[test]
    fn retrieval_fixtures() {
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let a = i as f64 * 0.9;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let labels = vec![0, 1, 2, 0, 1, 2];
        let set = LabeledFeatures { features: &feats, labels: &labels };
        assert_eq!(segment_retrieval(&set, &set, 1, None).unwrap(), 1.0);
        let empty = LabeledFeatures { features: &[], labels: &[] };
        assert!(matches!(segment_retrieval(&set, &empty, 20, None), Err(Error::EmptyGallery)));
    }

    #[test]
    fn attention_prefix_fixtures() {
        assert_eq!(attention_prefix(&[0.25; 4], 0.6).len(), 3);
        assert_eq!(attention_prefix(&[0.0, 1.0, 0.0], 0.99), vec![1]);
        assert_eq!(attention_prefix(&[0.0, 1.0, 0.0], 0.01), vec![1]);
        let part = map(2, 2, |y, x| (y * 2 + x) as u32);
        let fg = attention_figure_ground(&[vec![0.1, 0.6, 0.2, 0.1]], &part, 0.6).unwrap();
        assert_eq!(fg.union.labels, vec![0, 1, 0, 0]);
        assert!(attention_figure_ground(&[vec![0.5, 0.5]], &part, 0.6).is_err());
    }

    #[test]
    fn csv_and_summary() {
        let rows = vec![
            MetricRow { metric: "miou".into(), class: "0".into(), value: 0.5 },
            MetricRow { metric: "miou".into(), class: "mean".into(), value: 0.5 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics_csv(&rows, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "metric,class,value\nmiou,0,0.5\nmiou,mean,0.5\n");
        assert_eq!(metrics_summary(&rows)["miou"]["mean"], 0.5);
    }
}
