//! Model assembly: the segment-token recognizer with graph pooling between
//! stages, a flat patch-token baseline, and the k-means baseline hierarchy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphpool::{graph_pool, init_graph_pool, CentroidSelector, Hierarchy, PoolOutput};
use crate::pixelio::{Image, LabelMap};
use crate::rng::Stream;
use crate::superpixel::{superpixels, SuperpixelConfig};
use crate::tensorcore::nn::{
    init_layer_norm, init_linear, init_mlp, init_msa, layer_norm, linear, mlp, multi_head_self_attention,
};
use crate::tensorcore::{Graph, Im2ColSpec, ParamStore, Tensor, Var};
use crate::tokenizer::{
    aggregate_tokens, conv_stem, downsample_partition, image_tensor, init_class_token, init_stem, positional_encoding,
    DownsampledPartition, STEM_STRIDE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `(blocks, tokens)` per stage; pooling runs between stages.
    pub depth_schedule: Vec<(usize, usize)>,
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub level0_count: usize,
    /// Algorithm and iteration settings; the segment count is `level0_count`.
    pub superpixel: SuperpixelConfig,
    pub selector: CentroidSelector,
    pub vit_patch: usize,
    pub vit_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth_schedule: vec![(3, 49), (3, 16), (3, 8), (2, 4)],
            channels: 32,
            heads: 2,
            mlp_ratio: 2,
            n_classes: 3,
            level0_count: 49,
            superpixel: SuperpixelConfig::default(),
            selector: CentroidSelector::Fps,
            vit_patch: 8,
            vit_blocks: 11,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.depth_schedule.is_empty() {
            return bad("depth_schedule is empty");
        }
        if self.depth_schedule[0].1 != self.level0_count {
            return bad("first stage token count must equal level0_count");
        }
        if self.depth_schedule.windows(2).any(|w| w[1].1 >= w[0].1) {
            return bad("token counts must strictly decrease");
        }
        if self.depth_schedule.iter().any(|s| s.1 == 0) {
            return bad("token counts must be positive");
        }
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return bad("channels must be a positive multiple of 4");
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad("heads must divide channels");
        }
        if self.mlp_ratio == 0 || self.n_classes < 2 || self.vit_patch == 0 {
            return bad("mlp_ratio, vit_patch must be positive and n_classes at least 2");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_levels(&self) -> usize {
        self.depth_schedule.len()
    }

    pub fn superpixel_config(&self) -> SuperpixelConfig {
        SuperpixelConfig { target_count: self.level0_count, ..self.superpixel.clone() }
    }

    fn hidden(&self) -> usize {
        self.channels * self.mlp_ratio
    }
}

pub fn init_encoder_block(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut Stream) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_msa(store, &format!("{prefix}.attn"), d, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_mlp(store, &format!("{prefix}.mlp"), d, hidden, d, rng);
}

/// Pre-norm transformer block. Returns the output tokens and the per-head
/// attention probabilities.
pub fn encoder_block(g: &mut Graph, store: &ParamStore, prefix: &str, z: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let h = layer_norm(g, store, &format!("{prefix}.ln1"), z)?;
    let attn = multi_head_self_attention(g, store, &format!("{prefix}.attn"), h, heads)?;
    let z = g.add(z, attn.out)?;
    let h = layer_norm(g, store, &format!("{prefix}.ln2"), z)?;
    let h = mlp(g, store, &format!("{prefix}.mlp"), h)?;
    Ok((g.add(z, h)?, attn.probs))
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

pub fn pool_prefix(level: usize) -> String {
    format!("pool{level}")
}

/// Parameters of the segment-token model, deterministic in `seed`.
pub fn init_cast(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let d = cfg.channels;
    let mut store = ParamStore::new();
    let mut rng = Stream::new(seed, "init.cast");
    init_stem(&mut store, d, &mut rng);
    init_class_token(&mut store, "cls_token", d, &mut rng);
    for (s, &(blocks, _)) in cfg.depth_schedule.iter().enumerate() {
        if s > 0 {
            init_graph_pool(&mut store, &pool_prefix(s), d, cfg.hidden(), &mut rng);
        }
        for b in 0..blocks {
            init_encoder_block(&mut store, &block_prefix(s, b), d, cfg.hidden(), &mut rng);
        }
    }
    init_layer_norm(&mut store, "norm", d);
    init_linear(&mut store, "head", d, cfg.n_classes, &mut rng);
    init_linear(&mut store, "fuse", cfg.n_levels() * d, d, &mut rng);
    store
}

/// An image with its level-0 partition at pixel and cell resolution.
#[derive(Clone, Debug)]
pub struct CastInput {
    pub image: Image,
    pub partition: DownsampledPartition,
}

pub fn prepare(image: &Image, cfg: &ModelConfig) -> Result<CastInput> {
    let map = superpixels(image, &cfg.superpixel_config())?;
    let partition = downsample_partition(&map, STEM_STRIDE)?;
    Ok(CastInput { image: image.clone(), partition })
}

pub struct CastForward {
    /// Final class token, `1 x d`.
    pub f_class: Var,
    /// Normalized class token fed to classifiers.
    pub embedding: Var,
    pub logits: Var,
    /// Per level-0 segment fused multi-level features, `n0 x d`.
    pub f_seg: Var,
    /// Tokens after each stage's encoder blocks, class token first.
    pub levels: Vec<Var>,
    pub pools: Vec<PoolOutput>,
    /// Per stage, the attention of the last block (one matrix per head).
    pub attention: Vec<Vec<Var>>,
    pub hierarchy: Hierarchy,
}

/// Class logits from a final class token through the final norm and head.
pub fn classify(g: &mut Graph, store: &ParamStore, f_class: Var, prefix: &str) -> Result<(Var, Var)> {
    let e = layer_norm(g, store, &format!("{prefix}norm"), f_class)?;
    let logits = linear(g, store, &format!("{prefix}head"), e)?;
    Ok((e, logits))
}

pub fn forward_cast(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    input: &CastInput,
    rng: &mut Stream,
) -> Result<CastForward> {
    let grid = conv_stem(g, store, &input.image)?;
    let mut z = aggregate_tokens(g, store, &grid, &input.partition.cells)?.tokens;
    let mut levels = Vec::new();
    let mut pools: Vec<PoolOutput> = Vec::new();
    let mut attention = Vec::new();
    for (s, &(blocks, tokens)) in cfg.depth_schedule.iter().enumerate() {
        if s > 0 {
            let out = graph_pool(g, store, &pool_prefix(s), z, tokens, cfg.heads, cfg.selector, rng)?;
            z = out.tokens;
            pools.push(out);
        }
        let mut last = Vec::new();
        for b in 0..blocks {
            let (next, probs) = encoder_block(g, store, &block_prefix(s, b), z, cfg.heads)?;
            z = next;
            last = probs;
        }
        levels.push(z);
        attention.push(last);
    }
    let f_class = g.slice_rows(z, 0, 1)?;
    let (embedding, logits) = classify(g, store, f_class, "")?;

    let assignments: Vec<Tensor> = pools.iter().map(|p| g.value(p.assignment).clone()).collect();
    let hierarchy = Hierarchy { base: input.partition.pixels.clone(), assignments };
    let mut parts = Vec::with_capacity(levels.len());
    for (l, &zl) in levels.iter().enumerate() {
        let n = g.value(zl).rows() - 1;
        let seg = g.slice_rows(zl, 1, n)?;
        parts.push(if l == 0 { seg } else { g.gather_rows(seg, &hierarchy.chain_index(l))? });
    }
    let cat = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
    let f_seg = linear(g, store, "fuse", cat)?;
    Ok(CastForward { f_class, embedding, logits, f_seg, levels, pools, attention, hierarchy })
}

/// One more inference-time pooling to `count` segments. Pools the tokens of
/// the coarsest level that still has more than `count` segments, with the
/// trained parameters of the transition out of that level (or of the last
/// transition when it is the final level). Returns the extended hierarchy,
/// whose last level has `count` columns.
pub fn extra_pool(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    fwd: &CastForward,
    count: usize,
    rng: &mut Stream,
) -> Result<Hierarchy> {
    let sizes: Vec<usize> = fwd.levels.iter().map(|&z| g.value(z).rows() - 1).collect();
    let src = sizes.iter().rposition(|&n| n > count).ok_or(Error::MNotSmaller { m: count, n: sizes[0] })?;
    if cfg.n_levels() < 2 {
        return Err(Error::InvalidConfig("extra pooling needs at least one trained pooling stage".into()));
    }
    let prefix = pool_prefix((src + 1).min(cfg.n_levels() - 1));
    let out = graph_pool(g, store, &prefix, fwd.levels[src], count, cfg.heads, cfg.selector, rng)?;
    let mut assignments = fwd.hierarchy.assignments[..src].to_vec();
    assignments.push(g.value(out.assignment).clone());
    Ok(Hierarchy { base: fwd.hierarchy.base.clone(), assignments })
}

pub fn vit_block_prefix(block: usize) -> String {
    format!("vit.block{block}")
}

pub fn init_vit(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let d = cfg.channels;
    let mut store = ParamStore::new();
    let mut rng = Stream::new(seed, "init.vit");
    init_linear(&mut store, "vit.patch", 3 * cfg.vit_patch * cfg.vit_patch, d, &mut rng);
    init_class_token(&mut store, "vit.cls_token", d, &mut rng);
    for b in 0..cfg.vit_blocks {
        init_encoder_block(&mut store, &vit_block_prefix(b), d, cfg.hidden(), &mut rng);
    }
    init_layer_norm(&mut store, "vit.norm", d);
    init_linear(&mut store, "vit.head", d, cfg.n_classes, &mut rng);
    store
}

pub struct VitForward {
    pub f_class: Var,
    pub embedding: Var,
    pub logits: Var,
    /// Final tokens, class token first.
    pub tokens: Var,
    pub grid: (usize, usize),
}

/// Patch embedding of non-overlapping square patches plus positional
/// encodings, without the class token.
pub fn patch_embed(g: &mut Graph, store: &ParamStore, image: &Image, patch: usize) -> Result<(Var, usize, usize)> {
    let (h, w) = (image.height, image.width);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::ShapeMismatch(format!("image {h}x{w} not divisible by patch {patch}")));
    }
    let x = g.constant(image_tensor(image))?;
    let spec = Im2ColSpec { height: h, width: w, channels: 3, kernel: patch, stride: patch, pad: 0 };
    let cols = g.im2col(x, spec)?;
    let e = linear(g, store, "vit.patch", cols)?;
    let (gh, gw) = (h / patch, w / patch);
    let d = g.value(e).cols();
    let pos = g.constant(positional_encoding(gh, gw, d))?;
    Ok((g.add(e, pos)?, gh, gw))
}

pub fn forward_vit(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, image: &Image) -> Result<VitForward> {
    let (patches, gh, gw) = patch_embed(g, store, image, cfg.vit_patch)?;
    let cls = g.param(store, "vit.cls_token")?;
    let mut z = g.concat_rows(&[cls, patches])?;
    for b in 0..cfg.vit_blocks {
        z = encoder_block(g, store, &vit_block_prefix(b), z, cfg.heads)?.0;
    }
    let f_class = g.slice_rows(z, 0, 1)?;
    let (embedding, logits) = classify(g, store, f_class, "vit.")?;
    Ok(VitForward { f_class, embedding, logits, tokens: z, grid: (gh, gw) })
}

/// Which backbone a parameter store belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Cast,
    Vit,
}

pub fn init_params(cfg: &ModelConfig, backbone: Backbone, seed: u64) -> ParamStore {
    match backbone {
        Backbone::Cast => init_cast(cfg, seed),
        Backbone::Vit => init_vit(cfg, seed),
    }
}

pub struct ModelOutput {
    pub embedding: Var,
    pub logits: Var,
    pub cast: Option<CastForward>,
}

pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    backbone: Backbone,
    input: &CastInput,
    rng: &mut Stream,
) -> Result<ModelOutput> {
    match backbone {
        Backbone::Cast => {
            let f = forward_cast(g, store, cfg, input, rng)?;
            Ok(ModelOutput { embedding: f.embedding, logits: f.logits, cast: Some(f) })
        }
        Backbone::Vit => {
            let f = forward_vit(g, store, cfg, &input.image)?;
            Ok(ModelOutput { embedding: f.embedding, logits: f.logits, cast: None })
        }
    }
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;
pub const KMEANS_MAX_RESTARTS: usize = 5;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn unit_rows(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| {
            let n = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            p.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Greedy k-means++ seeding: each new center is the best of a few
/// D^2-weighted candidates.
fn kmeanspp(points: &[Vec<f64>], k: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = vec![points[rng.below(n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize)> = None;
        for _ in 0..trials {
            let cand = if total <= 0.0 {
                rng.below(n)
            } else {
                let mut t = rng.uniform() * total;
                let mut pick = n - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if t < d {
                        pick = i;
                        break;
                    }
                    t -= d;
                }
                pick
            };
            let pot: f64 = points.iter().zip(&d2).map(|(p, &d)| d.min(sq_dist(p, &points[cand]))).sum();
            if best.is_none_or(|b| pot < b.0) {
                best = Some((pot, cand));
            }
        }
        let c = best.unwrap().1;
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[c]));
        }
        centers.push(points[c].clone());
    }
    centers
}

/// Lloyd's algorithm; `None` when a cluster empties.
fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> Option<(Vec<usize>, Vec<Vec<f64>>)> {
    let k = centers.len();
    let dim = points[0].len();
    let mut prev = f64::INFINITY;
    let mut assign = vec![0; points.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut inertia = 0.0;
        for (a, p) in assign.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centers);
            *a = c;
            inertia += d;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        centers = sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| v / c as f64).collect()).collect();
        if prev.is_finite() && (prev - inertia).abs() <= KMEANS_TOL * prev.max(1e-300) {
            break;
        }
        prev = inertia;
    }
    for (a, p) in assign.iter_mut().zip(points) {
        *a = nearest(p, &centers).0;
    }
    Some((assign, centers))
}

/// Spherical k-means with restarts on empty clusters.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut Stream) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if k == 0 || k > points.len() {
        return Err(Error::KOutOfRange { k, n: points.len() });
    }
    let unit = unit_rows(points);
    for _ in 0..=KMEANS_MAX_RESTARTS {
        let init = kmeanspp(&unit, k, rng);
        if let Some((assign, centers)) = lloyd(&unit, init) {
            return Ok((assign, centers));
        }
    }
    Err(Error::EmptyCluster { restarts: KMEANS_MAX_RESTARTS })
}

/// Nested clusterings of token rows: k-means at `counts[0]`, then each
/// level clusters the previous level's centroids. Returns per-level labels
/// of every row.
pub fn kmeans_fine_to_coarse(tokens: &Tensor, counts: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    if counts.is_empty() || counts.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidConfig("cluster counts must strictly decrease".into()));
    }
    let mut rng = Stream::new(seed, "kmeans.fine_to_coarse");
    let mut points: Vec<Vec<f64>> = (0..tokens.rows()).map(|r| tokens.row(r).to_vec()).collect();
    let mut labels: Vec<usize> = (0..points.len()).collect();
    let mut out = Vec::with_capacity(counts.len());
    for &k in counts {
        let (assign, centers) = kmeans(&points, k, &mut rng)?;
        for l in labels.iter_mut() {
            *l = assign[*l];
        }
        out.push(labels.clone());
        points = centers;
    }
    Ok(out)
}

/// Paints per-patch labels onto pixels.
pub fn patch_labels_to_map(labels: &[usize], grid_h: usize, grid_w: usize, patch: usize) -> LabelMap {
    let raw: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let (cells, _) = LabelMap::compacted(grid_h, grid_w, &raw);
    cells.upsample(patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphpool::check_row_stochastic;
    use crate::learn::synth_dataset;
    use crate::tensorcore::nn::cross_entropy;
    use crate::tensorcore::{grad_check, GradCheckConfig};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            channels: 16,
            depth_schedule: vec![(1, 49), (1, 16), (1, 8), (1, 4)],
            vit_blocks: 1,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let large = r#"{"depth_schedule": [[3, 196], [3, 64], [3, 32], [2, 16]], "level0_count": 196, "channels": 384, "heads": 6, "mlp_ratio": 4, "n_classes": 100}"#;
        let cfg = ModelConfig::from_json(large).unwrap();
        assert_eq!(cfg.depth_schedule[1], (3, 64));
        let mut bad = ModelConfig::default();
        bad.depth_schedule[2].1 = 16;
        assert!(bad.validate().is_err());
        bad = ModelConfig { level0_count: 50, ..Default::default() };
        assert!(bad.validate().is_err());
        let round = serde_json::to_string(&ModelConfig::default()).unwrap();
        assert_eq!(ModelConfig::from_json(&round).unwrap(), ModelConfig::default());
    }

    #[test]
    fn zero_block_is_identity() {
        let mut store = ParamStore::new();
        init_encoder_block(&mut store, "b", 8, 16, &mut Stream::new(0, "b"));
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let mut rng = Stream::new(1, "z");
        let z = Tensor::matrix(5, 8, (0..40).map(|_| rng.normal()).collect()).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z.clone()).unwrap();
        let (out, _) = encoder_block(&mut g, &store, "b", zv, 2).unwrap();
        assert_eq!(g.value(out), &z);
    }

    /// Independent per-element evaluation of a pre-norm block.
    fn block_oracle(store: &ParamStore, z: &Tensor, heads: usize) -> Tensor {
        let p = |n: &str| store.get(&format!("b.{n}")).unwrap();
        let (n, d) = (z.rows(), z.cols());
        let ln = |x: &Tensor, pre: &str| {
            let mut out = vec![0.0; n * d];
            for r in 0..n {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                for c in 0..d {
                    out[r * d + c] = (row[c] - mean) / (var + 1e-6).sqrt() * p(&format!("{pre}.gamma")).data()[c]
                        + p(&format!("{pre}.beta")).data()[c];
                }
            }
            Tensor::matrix(n, d, out).unwrap()
        };
        let lin = |x: &Tensor, pre: &str| {
            let (w, b) = (p(&format!("{pre}.w")), p(&format!("{pre}.b")));
            let m = w.cols();
            let mut out = vec![0.0; x.rows() * m];
            for r in 0..x.rows() {
                for c in 0..m {
                    let mut acc = b.data()[c];
                    for k in 0..x.cols() {
                        acc += x.get(r, k) * w.get(k, c);
                    }
                    out[r * m + c] = acc;
                }
            }
            Tensor::matrix(x.rows(), m, out).unwrap()
        };
        let h = ln(z, "ln1");
        let (q, k, v) = (lin(&h, "attn.q"), lin(&h, "attn.k"), lin(&h, "attn.v"));
        let dh = d / heads;
        let mut cat = vec![0.0; n * d];
        for hd in 0..heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh).map(|c| q.get(i, hd * dh + c) * k.get(j, hd * dh + c)).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                for c in 0..dh {
                    cat[i * d + hd * dh + c] = (0..n).map(|j| e[j] / tot * v.get(j, hd * dh + c)).sum();
                }
            }
        }
        let a = lin(&Tensor::matrix(n, d, cat).unwrap(), "attn.o");
        let z1 = Tensor::matrix(n, d, z.data().iter().zip(a.data()).map(|(x, y)| x + y).collect()).unwrap();
        let h = ln(&z1, "ln2");
        let h = lin(&h, "mlp.fc1").map(crate::tensorcore::gelu_scalar);
        let h = lin(&h, "mlp.fc2");
        Tensor::matrix(n, d, z1.data().iter().zip(h.data()).map(|(x, y)| x + y).collect()).unwrap()
    }

    #[test]
    fn block_matches_oracle() {
        let mut store = ParamStore::new();
        let mut rng = Stream::new(2, "b");
        init_encoder_block(&mut store, "b", 8, 16, &mut rng);
        for n in ["b.ln1.gamma", "b.ln1.beta", "b.ln2.beta", "b.attn.q.b", "b.mlp.fc1.b"] {
            let t = store.get_mut(n).unwrap();
            for v in t.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        let z = Tensor::matrix(5, 8, (0..40).map(|_| rng.normal()).collect()).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z.clone()).unwrap();
        let (out, _) = encoder_block(&mut g, &store, "b", zv, 2).unwrap();
        let want = block_oracle(&store, &z, 2);
        for (a, b) in g.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_block_uses_value_path() {
        let mut store = ParamStore::new();
        let mut rng = Stream::new(3, "b");
        init_encoder_block(&mut store, "b", 4, 8, &mut rng);
        let z = Tensor::from_rows(&[[0.3, -1.0, 2.0, 0.5]]).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z.clone()).unwrap();
        let (out, probs) = encoder_block(&mut g, &store, "b", zv, 2).unwrap();
        assert!(probs.iter().all(|&p| g.value(p).data() == [1.0]));
        let want = block_oracle(&store, &z, 2);
        for (a, b) in g.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn desk_forward_shapes_and_invariants() {
        let cfg = ModelConfig::default();
        let store = init_cast(&cfg, 0);
        let sample = &synth_dataset(1, 1, 64).unwrap()[0];
        let input = prepare(&sample.image, &cfg).unwrap();
        let mut g = Graph::new();
        let fwd = forward_cast(&mut g, &store, &cfg, &input, &mut Stream::new(0, "fwd")).unwrap();
        let n0 = input.partition.cells.n_segments;
        assert_eq!(g.value(fwd.f_class).shape(), &[1, 32]);
        assert_eq!(g.value(fwd.f_seg).shape(), &[n0, 32]);
        let counts: Vec<usize> = fwd.hierarchy.assignments.iter().map(|p| p.cols()).collect();
        assert_eq!(counts, vec![16, 8, 4]);
        for (l, &z) in fwd.levels.iter().enumerate() {
            assert_eq!(g.value(z).rows() - 1, if l == 0 { n0 } else { counts[l - 1] });
        }
        for l in 0..4 {
            assert!(check_row_stochastic(&fwd.hierarchy.soft(l).unwrap(), 1e-9));
            let hard = fwd.hierarchy.hardened(l).unwrap();
            assert!(hard.n_segments <= if l == 0 { n0 } else { counts[l - 1] });
        }
        let ext = extra_pool(&mut g, &store, &cfg, &fwd, 8, &mut Stream::new(0, "x")).unwrap();
        // at desk scale the 8-way extra level reproduces level 2
        assert_eq!(ext.assignments.len(), 2);
        assert_eq!(ext.assignments[1], fwd.hierarchy.assignments[1]);
        let ext = extra_pool(&mut g, &store, &cfg, &fwd, 2, &mut Stream::new(0, "x")).unwrap();
        assert_eq!(ext.assignments.len(), 4);
        assert_eq!(ext.assignments[3].cols(), 2);
    }

    #[test]
    fn single_stage_reduces_to_fused_level0() {
        let cfg = ModelConfig { depth_schedule: vec![(1, 49)], ..small_cfg() };
        let store = init_cast(&cfg, 1);
        let sample = &synth_dataset(2, 1, 64).unwrap()[0];
        let input = prepare(&sample.image, &cfg).unwrap();
        let mut g = Graph::new();
        let fwd = forward_cast(&mut g, &store, &cfg, &input, &mut Stream::new(0, "fwd")).unwrap();
        assert!(fwd.hierarchy.assignments.is_empty());
        let z0 = g.value(fwd.levels[0]).clone();
        let seg = Tensor::matrix(z0.rows() - 1, 16, z0.data()[16..].to_vec()).unwrap();
        let mut want = seg.matmul(store.get("fuse.w").unwrap()).unwrap();
        want.add_assign(
            &Tensor::matrix(want.rows(), 16, store.get("fuse.b").unwrap().data().repeat(want.rows())).unwrap(),
        );
        for (a, b) in g.value(fwd.f_seg).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vit_shapes_and_zero_image() {
        let cfg = small_cfg();
        let mut store = init_vit(&cfg, 0);
        let img = Image::filled(64, 64, [0, 0, 0]);
        let mut g = Graph::new();
        let fwd = forward_vit(&mut g, &store, &cfg, &img).unwrap();
        assert_eq!(g.value(fwd.tokens).shape(), &[65, 16]);
        let (e, _, _) = patch_embed(&mut g, &store, &img, 8).unwrap();
        let pe = positional_encoding(8, 8, 16);
        // zero pixels and zero bias leave only the positional encoding
        assert_eq!(g.value(e), &pe);
        assert!(forward_vit(&mut g, &store, &cfg, &Image::filled(60, 64, [0, 0, 0])).is_err());
        // one block equals the shared encoder block on the patch tokens
        let mut rng = Stream::new(9, "img");
        let mut img = Image::filled(64, 64, [0, 0, 0]);
        for v in img.data.iter_mut() {
            *v = rng.below(256) as u8;
        }
        let b = store.get_mut("vit.patch.b").unwrap();
        *b = Tensor::filled(b.shape(), 0.1);
        let mut g = Graph::new();
        let fwd = forward_vit(&mut g, &store, &cfg, &img).unwrap();
        let (e, _, _) = patch_embed(&mut g, &store, &img, 8).unwrap();
        let cls = g.param(&store, "vit.cls_token").unwrap();
        let z = g.concat_rows(&[cls, e]).unwrap();
        let (out, _) = encoder_block(&mut g, &store, "vit.block0", z, cfg.heads).unwrap();
        assert_eq!(g.value(out), g.value(fwd.tokens));
    }

    #[test]
    fn kmeans_identical_points_fail_to_split() {
        let t = Tensor::from_rows(&[[1.0, 2.0]; 6]).unwrap();
        assert!(matches!(kmeans_fine_to_coarse(&t, &[2, 1], 0), Err(Error::EmptyCluster { restarts: 5 })));
    }

    #[test]
    fn kmeans_recovers_blobs_then_merges_nearest_pairs() {
        let mut rng = Stream::new(4, "blobs");
        let angles = [0.0f64, 25.0, 180.0, 205.0];
        let mut rows = Vec::new();
        for a in angles {
            for _ in 0..4 {
                let t = (a + rng.range(-2.0, 2.0)).to_radians();
                rows.push(vec![t.cos(), t.sin()]);
            }
        }
        let t = Tensor::from_rows(&rows).unwrap();
        let levels = kmeans_fine_to_coarse(&t, &[4, 2], 7).unwrap();
        for b in 0..4 {
            let l = levels[0][4 * b];
            assert!((0..4).all(|i| levels[0][4 * b + i] == l));
            assert!((0..4).filter(|&o| o != b).all(|o| levels[0][4 * o] != l));
        }
        assert_eq!(levels[1][0], levels[1][4]);
        assert_eq!(levels[1][8], levels[1][12]);
        assert_ne!(levels[1][0], levels[1][8]);
    }

    #[test]
    fn kmeans_levels_nest() {
        for seed in 0..5 {
            let mut rng = Stream::new(seed, "tok");
            let t = Tensor::matrix(40, 6, (0..240).map(|_| rng.normal()).collect()).unwrap();
            let levels = kmeans_fine_to_coarse(&t, &[8, 4, 2], seed).unwrap();
            for l in 1..3 {
                let mut parent = std::collections::HashMap::new();
                for (&fine, &coarse) in levels[l - 1].iter().zip(&levels[l]) {
                    assert_eq!(*parent.entry(fine).or_insert(coarse), coarse);
                }
            }
            assert_eq!(levels, kmeans_fine_to_coarse(&t, &[8, 4, 2], seed).unwrap());
        }
    }

    #[test]
    fn small_model_gradients_check() {
        let cfg = small_cfg();
        let store = init_cast(&cfg, 3);
        let sample = &synth_dataset(3, 1, 64).unwrap()[0];
        let input = prepare(&sample.image, &cfg).unwrap();
        let label = sample.class_label;
        let gc = GradCheckConfig { tol: 1e-3, max_entries_per_param: Some(1), ..Default::default() };
        let report = grad_check(
            &store,
            |g, st| {
                let fwd = forward_cast(g, st, &cfg, &input, &mut Stream::new(0, "fwd"))?;
                let ce = cross_entropy(g, fwd.logits, &[label])?;
                let sq = g.mul(fwd.f_seg, fwd.f_seg)?;
                let reg = g.mean(sq)?;
                g.add(ce, reg)
            },
            &gc,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
