//! Graph pooling: centroid selection, soft assignment of tokens to
//! centroids, and the hierarchy bookkeeping built on the assignments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pixelio::{save_label_map, LabelMap};
use crate::rng::Stream;
use crate::tensorcore::nn::{init_mlp, init_msa, mlp, multi_head_self_attention};
use crate::tensorcore::{Graph, ParamStore, Tensor, Var};

/// Initial value of the learnable similarity temperature.
pub const INITIAL_KAPPA: f64 = 10.0;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest point sampling over the rows of `points`, starting from row
/// `start`. Ties go to the smallest index.
pub fn fps(points: &Tensor, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if k == 0 || k > n || start >= n {
        return Err(Error::KOutOfRange { k, n });
    }
    let mut chosen = vec![start];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(start))).collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..n {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(best)));
        }
    }
    Ok(chosen)
}

/// How pooling picks its `m` centroid tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidSelector {
    Fps,
    Random,
    KMeans,
    KMedoids,
    /// The `m` tokens farthest from the token mean.
    Significance,
}

impl CentroidSelector {
    pub fn select(self, points: &Tensor, m: usize, rng: &mut Stream) -> Result<Vec<usize>> {
        let n = points.rows();
        if m == 0 || m > n {
            return Err(Error::KOutOfRange { k: m, n });
        }
        match self {
            CentroidSelector::Fps => fps(points, m, 0),
            CentroidSelector::Random => {
                let mut idx: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut idx);
                idx.truncate(m);
                Ok(idx)
            }
            CentroidSelector::KMeans => {
                let centers = kmeans_centers(points, m, 20, rng);
                Ok(nearest_distinct(points, &centers))
            }
            CentroidSelector::KMedoids => Ok(kmedoids(points, m, 20)),
            CentroidSelector::Significance => {
                let mean = column_mean(points);
                let mut idx: Vec<usize> = (0..n).collect();
                let score: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &mean)).collect();
                idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
                idx.truncate(m);
                Ok(idx)
            }
        }
    }
}

fn column_mean(points: &Tensor) -> Vec<f64> {
    let (n, d) = (points.rows(), points.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(points.row(i)) {
            *m += v / n as f64;
        }
    }
    mean
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < bd {
            bd = d;
            best = c;
        }
    }
    best
}

/// Lloyd iterations from a farthest-point initialization.
fn kmeans_centers(points: &Tensor, m: usize, iters: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
    let n = points.rows();
    let start = rng.below(n);
    let mut centers: Vec<Vec<f64>> = fps(points, m, start).unwrap().iter().map(|&i| points.row(i).to_vec()).collect();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; points.cols()]; m];
        let mut counts = vec![0usize; m];
        for i in 0..n {
            let c = nearest(points.row(i), &centers);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers
}

/// For each center, the closest not-yet-taken row.
fn nearest_distinct(points: &Tensor, centers: &[Vec<f64>]) -> Vec<usize> {
    let mut taken = vec![false; points.rows()];
    centers
        .iter()
        .map(|c| {
            let i = (0..points.rows())
                .filter(|&i| !taken[i])
                .min_by(|&a, &b| sq_dist(points.row(a), c).total_cmp(&sq_dist(points.row(b), c)))
                .unwrap();
            taken[i] = true;
            i
        })
        .collect()
}

/// Alternating k-medoids from a farthest-point initialization.
fn kmedoids(points: &Tensor, m: usize, iters: usize) -> Vec<usize> {
    let n = points.rows();
    let mut medoids = fps(points, m, 0).unwrap();
    for _ in 0..iters {
        let centers: Vec<Vec<f64>> = medoids.iter().map(|&i| points.row(i).to_vec()).collect();
        let assign: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centers)).collect();
        let mut next = medoids.clone();
        for (c, slot) in next.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            let cost = |j: usize| members.iter().map(|&i| sq_dist(points.row(i), points.row(j)).sqrt()).sum::<f64>();
            if let Some(best) = members.iter().copied().min_by(|&a, &b| cost(a).total_cmp(&cost(b))) {
                *slot = best;
            }
        }
        if next == medoids {
            break;
        }
        medoids = next;
    }
    medoids
}

pub fn init_graph_pool(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut Stream) {
    init_msa(store, &format!("{prefix}.attn"), d, rng);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, d]));
    init_mlp(store, &format!("{prefix}.mlp"), d, hidden, d, rng);
    store.insert(format!("{prefix}.kappa"), Tensor::scalar(INITIAL_KAPPA));
}

#[derive(Clone, Debug)]
pub struct PoolOutput {
    /// `(m + 1) x d`, class token first.
    pub tokens: Var,
    /// `n x m` row-stochastic assignment of input segments to centroids.
    pub assignment: Var,
    pub centroids: Vec<usize>,
}

/// Pools the `n` segment rows of `z` (row 0 is the class token, which is
/// passed through) into `m` segments.
#[allow(clippy::too_many_arguments)]
pub fn graph_pool(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    z: Var,
    m: usize,
    heads: usize,
    selector: CentroidSelector,
    rng: &mut Stream,
) -> Result<PoolOutput> {
    let n = g.value(z).rows().saturating_sub(1);
    if m == 0 || m >= n {
        return Err(Error::MNotSmaller { m, n });
    }
    let cls = g.slice_rows(z, 0, 1)?;
    let seg = g.slice_rows(z, 1, n)?;
    let centroids = selector.select(g.value(seg), m, rng)?;

    let attn = multi_head_self_attention(g, store, &format!("{prefix}.attn"), seg, heads)?;
    let u = g.add(attn.out, seg)?;
    let mu = g.mean_rows(u)?;
    let u = g.sub(u, mu)?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    let u = g.add(u, bias)?;
    let v = g.gather_rows(u, &centroids)?;
    let un = g.row_normalize(u)?;
    let vn = g.row_normalize(v)?;
    let cos = g.matmul_nt(un, vn)?;
    let kappa = g.param(store, &format!("{prefix}.kappa"))?;
    let logits = g.mul(cos, kappa)?;
    let p = g.softmax_rows(logits)?;

    let zp = mlp(g, store, &format!("{prefix}.mlp"), seg)?;
    let pt = g.transpose(p)?;
    let summed = g.matmul(pt, zp)?;
    let mass = g.sum_rows(p)?;
    let mass = g.transpose(mass)?;
    let mass = g.clamp_min(mass, 1e-12)?;
    let pooled = g.div(summed, mass)?;
    let picked = g.gather_rows(seg, &centroids)?;
    let y = g.add(picked, pooled)?;
    let tokens = g.concat_rows(&[cls, y])?;
    Ok(PoolOutput { tokens, assignment: p, centroids })
}

/// Checks every row is a probability vector.
pub fn check_row_stochastic(p: &Tensor, tol: f64) -> bool {
    (0..p.rows()).all(|r| {
        let row = p.row(r);
        row.iter().all(|&v| v >= -tol) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
    })
}

/// Chains a level's soft segmentation with the next assignment matrix.
pub fn compose(s_prev: &Tensor, p: &Tensor) -> Result<Tensor> {
    s_prev.matmul(p)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Hard labels from a soft segmentation: per-row argmax (ties to the
/// smallest column), compacted in column order.
#[derive(Clone, Debug, PartialEq)]
pub struct Hardened {
    pub labels: Vec<u32>,
    pub n_segments: usize,
    /// Column index to compact label, `None` for columns no row picked.
    pub column_label: Vec<Option<u32>>,
}

pub fn harden(s: &Tensor) -> Hardened {
    let raw: Vec<u32> = (0..s.rows()).map(|r| argmax(s.row(r)) as u32).collect();
    let mut column_label = vec![None; s.cols()];
    for &c in &raw {
        column_label[c as usize] = Some(0);
    }
    let mut next = 0;
    for slot in column_label.iter_mut().flatten() {
        *slot = next;
        next += 1;
    }
    let labels = raw.iter().map(|&c| column_label[c as usize].unwrap()).collect();
    Hardened { labels, n_segments: next as usize, column_label }
}

/// Coarse row picked by each fine row's largest assignment.
pub fn unpool_index(p: &Tensor) -> Vec<usize> {
    (0..p.rows()).map(|r| argmax(p.row(r))).collect()
}

/// Copies each coarse token back to the fine segments assigned to it.
pub fn unpool(coarse: &Tensor, p: &Tensor) -> Tensor {
    coarse.gather_rows(&unpool_index(p))
}

/// Units with a smaller fine-level argmax margin are excluded from the
/// nestedness check.
pub const NESTEDNESS_MARGIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Nestedness {
    pub agree: usize,
    pub degenerate: usize,
    pub total: usize,
}

impl Nestedness {
    /// Agreement among units with a clear fine-level argmax.
    pub fn fraction(&self) -> f64 {
        let eligible = self.total - self.degenerate;
        if eligible == 0 {
            1.0
        } else {
            self.agree as f64 / eligible as f64
        }
    }

    pub fn degenerate_fraction(&self) -> f64 {
        self.degenerate as f64 / self.total.max(1) as f64
    }
}

/// Assignment matrices and hardened maps of one image.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    /// Level-0 partition at pixel resolution.
    pub base: LabelMap,
    /// `assignments[l]` maps level `l` tokens to level `l + 1` tokens.
    pub assignments: Vec<Tensor>,
}

impl Hierarchy {
    pub fn n_levels(&self) -> usize {
        self.assignments.len() + 1
    }

    /// Soft segmentation of level-0 segments into level `level` segments.
    pub fn soft(&self, level: usize) -> Result<Tensor> {
        let mut s = Tensor::identity(self.base.n_segments);
        for p in &self.assignments[..level] {
            s = compose(&s, p)?;
        }
        Ok(s)
    }

    fn paint(&self, per_segment: &[u32], n: usize) -> LabelMap {
        let labels = self.base.labels.iter().map(|&l| per_segment[l as usize]).collect();
        LabelMap { height: self.base.height, width: self.base.width, labels, n_segments: n }
    }

    /// Pixel map of the argmax of the composed soft segmentation.
    pub fn hardened(&self, level: usize) -> Result<LabelMap> {
        let h = harden(&self.soft(level)?);
        Ok(self.paint(&h.labels, h.n_segments))
    }

    /// Level-0 segment to token index at `level`, following the argmax of
    /// each assignment in turn. Nested by construction.
    pub fn chain_index(&self, level: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.base.n_segments).collect();
        for p in &self.assignments[..level] {
            let up = unpool_index(p);
            for i in idx.iter_mut() {
                *i = up[*i];
            }
        }
        idx
    }

    /// Compacted pixel map of the argmax chain; levels nest exactly.
    pub fn chained(&self, level: usize) -> LabelMap {
        let raw: Vec<u32> = self.chain_index(level).iter().map(|&i| i as u32).collect();
        let (seg, _) = LabelMap::compacted(1, raw.len(), &raw);
        self.paint(&seg.labels, seg.n_segments)
    }

    /// Checks, per pixel, that the hardened label at `level + 1` is the
    /// parent (argmax of the next assignment) of its hardened label at
    /// `level`. Pixels whose fine-level argmax margin is at most
    /// [`NESTEDNESS_MARGIN`] are counted as degenerate and skipped.
    pub fn nestedness(&self, level: usize) -> Result<Nestedness> {
        let fine_soft = self.soft(level)?;
        let fine = harden(&fine_soft);
        let coarse = harden(&self.soft(level + 1)?);
        let parent = unpool_index(&self.assignments[level]);
        let mut report = Nestedness::default();
        for &l0 in &self.base.labels {
            let row = fine_soft.row(l0 as usize);
            let f = argmax(row);
            let runner_up =
                row.iter().enumerate().filter(|&(i, _)| i != f).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
            report.total += 1;
            if row[f] - runner_up <= NESTEDNESS_MARGIN {
                report.degenerate += 1;
                continue;
            }
            debug_assert_eq!(fine.column_label[f], Some(fine.labels[l0 as usize]));
            report.agree += usize::from(coarse.column_label[parent[f]] == Some(coarse.labels[l0 as usize]));
        }
        Ok(report)
    }

    /// Writes `level_<l>.pgm` for every level and `parents.csv` with one
    /// row per segment and its parent at the next level.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from("level,child_id,parent_id,assignment_prob\n");
        let mut prev_col: Vec<Option<u32>> = (0..self.base.n_segments as u32).map(Some).collect();
        save_label_map(&self.base, dir.join("level_0.pgm"))?;
        for l in 1..self.n_levels() {
            let map = self.chained(l);
            save_label_map(&map, dir.join(format!("level_{l}.pgm")))?;
            // token column at level l -> compact id, consistent with `chained`
            let idx = self.chain_index(l);
            let mut col_id = vec![None; self.assignments[l - 1].cols()];
            let mut seen: Vec<usize> = idx.clone();
            seen.sort_unstable();
            seen.dedup();
            for (k, &c) in seen.iter().enumerate() {
                col_id[c] = Some(k as u32);
            }
            let p = &self.assignments[l - 1];
            for (row, child) in prev_col.iter().enumerate() {
                if let Some(child) = child {
                    let parent = argmax(p.row(row));
                    let _ = writeln!(csv, "{l},{child},{},{}", col_id[parent].unwrap(), p.get(row, parent));
                }
            }
            prev_col = col_id;
        }
        std::fs::write(dir.join("parents.csv"), csv)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{grad_check, GradCheckConfig};
    use proptest::prelude::*;

    fn pool_store(d: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_graph_pool(&mut s, "pool", d, 2 * d, &mut Stream::new(seed, "pool"));
        s
    }

    fn zero_store(d: usize) -> ParamStore {
        let mut s = pool_store(d, 0);
        let names: Vec<String> = s.names().map(String::from).collect();
        for n in names {
            if !n.ends_with("kappa") {
                let t = s.get_mut(&n).unwrap();
                *t = Tensor::zeros(t.shape());
            }
        }
        s
    }

    /// Exhaustive oracle: the greedy max-min sequence recomputed from scratch
    /// at every step.
    fn fps_oracle(pts: &[Vec<f64>], k: usize, start: usize) -> Vec<usize> {
        let mut out = vec![start];
        while out.len() < k {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..pts.len() {
                let d = out.iter().map(|&c| sq_dist(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            out.push(best.1);
        }
        out
    }

    #[test]
    fn fps_on_a_line() {
        let t = Tensor::from_rows(&[[0.0], [1.0], [5.0], [9.0], [10.0]]).unwrap();
        assert_eq!(fps(&t, 3, 0).unwrap(), vec![0, 4, 2]);
        assert!(matches!(fps(&t, 6, 0), Err(Error::KOutOfRange { k: 6, n: 5 })));
        assert!(fps(&t, 0, 0).is_err());
        // duplicates: ties resolve to the smallest index
        let t = Tensor::from_rows(&[[0.0], [2.0], [2.0], [-2.0]]).unwrap();
        assert_eq!(fps(&t, 2, 0).unwrap(), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn fps_matches_oracle(pts in prop::collection::vec(prop::collection::vec(-3i32..4, 2), 2..14), k in 1usize..14) {
            let pts: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
            let k = k.min(pts.len());
            let t = Tensor::from_rows(&pts).unwrap();
            prop_assert_eq!(fps(&t, k, 0).unwrap(), fps_oracle(&pts, k, 0));
        }

        #[test]
        fn assignments_are_stochastic_and_hierarchy_nests(seed in 0u64..1000, n in 4usize..12) {
            let d = 4;
            let s = pool_store(d, seed);
            let mut rng = Stream::new(seed, "pts");
            let z = Tensor::matrix(n + 1, d, (0..(n + 1) * d).map(|_| rng.normal()).collect()).unwrap();
            let mut g = Graph::new();
            let zv = g.constant(z).unwrap();
            let m1 = n / 2;
            let o1 = graph_pool(&mut g, &s, "pool", zv, m1, 2, CentroidSelector::Fps, &mut rng).unwrap();
            let o2 = graph_pool(&mut g, &s, "pool", o1.tokens, 1.max(m1 / 2), 2, CentroidSelector::Fps, &mut rng);
            let p1 = g.value(o1.assignment).clone();
            prop_assert!(check_row_stochastic(&p1, 1e-9));
            if let Ok(o2) = o2 {
                let p2 = g.value(o2.assignment).clone();
                prop_assert!(check_row_stochastic(&p2, 1e-9));
                let base = LabelMap::new(1, n, (0..n as u32).collect()).unwrap();
                let h = Hierarchy { base, assignments: vec![p1, p2] };
                for l in 0..3 {
                    prop_assert!(check_row_stochastic(&h.soft(l).unwrap(), 1e-9));
                    // the chained maps are nested level over level
                    if l > 0 {
                        prop_assert!(crate::pixelio::parent_table(&h.chained(l), &h.chained(l - 1), l).is_ok());
                    }
                }
            }
        }
    }

    /// Three 2-D tokens, two centroids, zero attention and MLP: the pooled
    /// output is the hand-computed cosine-softmax combination.
    #[test]
    fn hand_computed_pool() {
        let s = zero_store(2);
        // class row, then segments a, b, c; the row mean is zero so
        // normalization leaves U = Z
        let z = Tensor::from_rows(&[[9.0, 9.0], [1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z.clone()).unwrap();
        let out = graph_pool(&mut g, &s, "pool", zv, 2, 1, CentroidSelector::Fps, &mut Stream::new(0, "x")).unwrap();
        // fps from a: |a-b|^2 = 2, |a-c|^2 = 5 -> c
        assert_eq!(out.centroids, vec![0, 2]);
        let k = INITIAL_KAPPA;
        let cos_ac = -1.0 / 2f64.sqrt();
        let cos_bc = -1.0 / 2f64.sqrt();
        let row = |ca: f64, cc: f64| {
            let (ea, ec) = ((k * ca).exp(), (k * cc).exp());
            [ea / (ea + ec), ec / (ea + ec)]
        };
        let want = [row(1.0, cos_ac), row(0.0, cos_bc), row(cos_ac, 1.0)];
        let p = g.value(out.assignment);
        for (r, row) in want.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                assert!((p.get(r, c) - w).abs() < 1e-9);
            }
        }
        // MLP output is zero, so pooled tokens are the centroid rows
        let y = g.value(out.tokens);
        assert_eq!(y.row(0), &[9.0, 9.0]);
        assert_eq!(y.row(1), &[1.0, 0.0]);
        assert_eq!(y.row(2), &[-1.0, -1.0]);
    }

    #[test]
    fn huge_kappa_gives_one_hot_assignment() {
        let mut s = zero_store(2);
        *s.get_mut("pool.kappa").unwrap() = Tensor::scalar(1e6);
        let z = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.1], [0.1, 1.0], [-1.0, -1.0], [0.9, -0.1]]).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z).unwrap();
        let out = graph_pool(&mut g, &s, "pool", zv, 3, 1, CentroidSelector::Fps, &mut Stream::new(0, "x")).unwrap();
        let p = g.value(out.assignment);
        for r in 0..4 {
            let mx = p.row(r).iter().cloned().fold(0.0, f64::max);
            assert!((mx - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn m_must_shrink() {
        let s = pool_store(2, 1);
        let mut g = Graph::new();
        let zv = g.constant(Tensor::zeros(&[4, 2])).unwrap();
        let r = graph_pool(&mut g, &s, "pool", zv, 3, 1, CentroidSelector::Fps, &mut Stream::new(0, "x"));
        assert!(matches!(r, Err(Error::MNotSmaller { m: 3, n: 3 })));
    }

    #[test]
    fn selectors_return_distinct_indices() {
        let mut rng = Stream::new(3, "sel");
        let t = Tensor::matrix(20, 3, (0..60).map(|_| rng.normal()).collect()).unwrap();
        for sel in [
            CentroidSelector::Fps,
            CentroidSelector::Random,
            CentroidSelector::KMeans,
            CentroidSelector::KMedoids,
            CentroidSelector::Significance,
        ] {
            let mut idx = sel.select(&t, 6, &mut rng).unwrap();
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), 6, "{sel:?}");
            assert!(idx.iter().all(|&i| i < 20));
        }
    }

    #[test]
    fn pool_gradients_check() {
        let s = pool_store(4, 7);
        let mut rng = Stream::new(7, "z");
        let z = Tensor::matrix(7, 4, (0..28).map(|_| rng.normal()).collect()).unwrap();
        let report = grad_check(
            &s,
            |g, st| {
                let zv = g.constant(z.clone())?;
                let out = graph_pool(g, st, "pool", zv, 3, 2, CentroidSelector::Fps, &mut Stream::new(0, "x"))?;
                let sq = g.mul(out.tokens, out.tokens)?;
                g.sum(sq)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn harden_ties_and_compaction() {
        let s = Tensor::from_rows(&[[0.5, 0.5, 0.0], [0.1, 0.2, 0.7], [0.4, 0.3, 0.3]]).unwrap();
        let h = harden(&s);
        assert_eq!(h.labels, vec![0, 1, 0]);
        assert_eq!(h.column_label, vec![Some(0), None, Some(1)]);
        assert_eq!(h.n_segments, 2);
    }

    #[test]
    fn unpool_copies_by_argmax() {
        let p = Tensor::from_rows(&[[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]).unwrap();
        let coarse = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let u = unpool(&coarse, &p);
        assert_eq!(u.data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn export_writes_consistent_tables() {
        let base = LabelMap::new(2, 3, vec![0, 1, 2, 0, 3, 3]).unwrap();
        let p1 = Tensor::from_rows(&[[0.1, 0.8, 0.1], [0.7, 0.2, 0.1], [0.6, 0.3, 0.1], [0.2, 0.2, 0.6]]).unwrap();
        let p2 = Tensor::from_rows(&[[0.9, 0.1], [0.3, 0.7], [0.8, 0.2]]).unwrap();
        let h = Hierarchy { base, assignments: vec![p1, p2] };
        let dir = tempfile::tempdir().unwrap();
        h.export(dir.path()).unwrap();
        let l1 = crate::pixelio::load_label_map(dir.path().join("level_1.pgm")).unwrap();
        let l2 = crate::pixelio::load_label_map(dir.path().join("level_2.pgm")).unwrap();
        // chain: 0->1, 1->0, 2->0, 3->2; then 1->1, 0->0, 2->0
        assert_eq!(l1.labels, vec![1, 0, 0, 1, 2, 2]);
        assert_eq!(l2.labels, vec![1, 0, 0, 1, 0, 0]);
        let csv = std::fs::read_to_string(dir.path().join("parents.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "level,child_id,parent_id,assignment_prob");
        assert_eq!(rows[1], "1,0,1,0.8");
        assert_eq!(rows.len(), 1 + 4 + 3);
        // every csv parent agrees with the maps
        for r in &rows[5..] {
            let f: Vec<&str> = r.split(',').collect();
            let (child, parent): (u32, u32) = (f[1].parse().unwrap(), f[2].parse().unwrap());
            for i in 0..6 {
                if l1.labels[i] == child {
                    assert_eq!(l2.labels[i], parent);
                }
            }
        }
        assert_eq!(h.nestedness(0).unwrap().fraction(), 1.0);
    }
}
