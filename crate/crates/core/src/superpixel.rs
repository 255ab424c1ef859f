//! Level-0 partitions: SEEDS (default) and SLIC superpixels.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixelio::{Image, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuperpixelAlgorithm {
    Seeds,
    Slic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuperpixelConfig {
    pub target_count: usize,
    pub algorithm: SuperpixelAlgorithm,
    /// Sweeps per block level (SEEDS) or assignment rounds (SLIC).
    pub iterations: usize,
    pub seeds_histogram_bins: usize,
    pub slic_compactness: f64,
}

impl Default for SuperpixelConfig {
    fn default() -> Self {
        SuperpixelConfig {
            target_count: 49,
            algorithm: SuperpixelAlgorithm::Seeds,
            iterations: 4,
            seeds_histogram_bins: 5,
            slic_compactness: 10.0,
        }
    }
}

impl SuperpixelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_count < 2 {
            return Err(Error::InvalidConfig("superpixel target_count must be >= 2".into()));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("superpixel iterations must be >= 1".into()));
        }
        if !(2..=16).contains(&self.seeds_histogram_bins) {
            return Err(Error::InvalidConfig("histogram bins must be in [2, 16]".into()));
        }
        if self.slic_compactness.is_nan() || self.slic_compactness <= 0.0 {
            return Err(Error::InvalidConfig("slic_compactness must be positive".into()));
        }
        Ok(())
    }
}

/// Runs the configured algorithm.
pub fn superpixels(image: &Image, cfg: &SuperpixelConfig) -> Result<LabelMap> {
    match cfg.algorithm {
        SuperpixelAlgorithm::Seeds => seeds_superpixels(image, cfg),
        SuperpixelAlgorithm::Slic => slic_superpixels(image, cfg),
    }
}

fn check_size(image: &Image, cfg: &SuperpixelConfig) -> Result<()> {
    cfg.validate()?;
    let (h, w) = (image.height, image.width);
    if h < 8 || w < 8 {
        return Err(Error::ImageTooSmall { height: h, width: w, reason: "sides must be >= 8".into() });
    }
    if cfg.target_count > h * w / 4 {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            reason: format!("{} superpixels need at least 4 pixels each", cfg.target_count),
        });
    }
    Ok(())
}

/// Grid shape (rows, cols) closest to `target` cells with square-ish cells.
fn grid_shape(h: usize, w: usize, target: usize) -> (usize, usize) {
    let gy = ((target as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let gx = ((target as f64 / gy as f64).round() as usize).clamp(1, w);
    (gy, gx)
}

fn grid_labels(h: usize, w: usize, gy: usize, gx: usize) -> Vec<u32> {
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            labels.push(((y * gy / h) * gx + x * gx / w) as u32);
        }
    }
    labels
}

const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbors(h: usize, w: usize, i: usize) -> impl Iterator<Item = usize> {
    let (y, x) = ((i / w) as isize, (i % w) as isize);
    NEIGHBORS.iter().filter_map(move |&(dy, dx)| {
        let (ny, nx) = (y + dy, x + dx);
        (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then(|| ny as usize * w + nx as usize)
    })
}

struct SeedsState {
    h: usize,
    w: usize,
    labels: Vec<u32>,
    bin_of: Vec<usize>,
    nbins: usize,
    /// Per-segment histogram, `n_segments x nbins`.
    hist: Vec<u32>,
    size: Vec<u32>,
    /// Scratch for connectivity checks.
    mark: Vec<u32>,
    stamp: u32,
}

impl SeedsState {
    fn intersection(&self, block_hist: &[(usize, u32)], block_size: u32, seg: usize, minus_block: bool) -> f64 {
        let seg_size = self.size[seg] - if minus_block { block_size } else { 0 };
        if seg_size == 0 {
            return 0.0;
        }
        let row = &self.hist[seg * self.nbins..(seg + 1) * self.nbins];
        block_hist
            .iter()
            .map(|&(b, c)| {
                let s = row[b] - if minus_block { c } else { 0 };
                (c as f64 / block_size as f64).min(s as f64 / seg_size as f64)
            })
            .sum()
    }

    /// Whether segment `seg` stays 4-connected once `block` (marked with the
    /// current stamp in `mark`) is removed.
    fn stays_connected(&mut self, seg: u32, block: &[usize], remaining: u32) -> bool {
        // find a start pixel adjacent to the block but outside it
        let start = block
            .iter()
            .flat_map(|&p| neighbors(self.h, self.w, p))
            .find(|&q| self.labels[q] == seg && self.mark[q] != self.stamp);
        let Some(start) = start else { return false };
        self.stamp += 1;
        let visit = self.stamp;
        let block_stamp = visit - 1;
        let mut queue = VecDeque::from([start]);
        self.mark[start] = visit;
        let mut count = 1;
        while let Some(p) = queue.pop_front() {
            for q in neighbors(self.h, self.w, p) {
                if self.labels[q] == seg && self.mark[q] != visit && self.mark[q] != block_stamp {
                    self.mark[q] = visit;
                    count += 1;
                    queue.push_back(q);
                }
            }
        }
        count == remaining
    }

    fn move_block(&mut self, block: &[usize], from: usize, to: usize) {
        for &p in block {
            let b = self.bin_of[p];
            self.hist[from * self.nbins + b] -= 1;
            self.hist[to * self.nbins + b] += 1;
            self.labels[p] = to as u32;
        }
        self.size[from] -= block.len() as u32;
        self.size[to] += block.len() as u32;
    }

    /// One sweep over all blocks of side `s`; returns the number of moves.
    fn sweep(&mut self, s: usize) -> usize {
        let (h, w) = (self.h, self.w);
        let mut moves = 0;
        let mut block = Vec::with_capacity(s * s);
        let mut in_cell = vec![false; s * s];
        for cy in (0..h).step_by(s) {
            for cx in (0..w).step_by(s) {
                let (y1, x1) = ((cy + s).min(h), (cx + s).min(w));
                in_cell.iter_mut().for_each(|v| *v = false);
                for y in cy..y1 {
                    for x in cx..x1 {
                        if in_cell[(y - cy) * s + (x - cx)] {
                            continue;
                        }
                        // flood the component of (y, x) inside this cell
                        let seg = self.labels[y * w + x];
                        block.clear();
                        block.push(y * w + x);
                        in_cell[(y - cy) * s + (x - cx)] = true;
                        let mut k = 0;
                        while k < block.len() {
                            let p = block[k];
                            k += 1;
                            for q in neighbors(h, w, p) {
                                let (qy, qx) = (q / w, q % w);
                                if qy < cy || qy >= y1 || qx < cx || qx >= x1 {
                                    continue;
                                }
                                let ci = (qy - cy) * s + (qx - cx);
                                if !in_cell[ci] && self.labels[q] == seg {
                                    in_cell[ci] = true;
                                    block.push(q);
                                }
                            }
                        }
                        if self.try_move(&block, seg) {
                            moves += 1;
                        }
                    }
                }
            }
        }
        moves
    }

    fn try_move(&mut self, block: &[usize], seg: u32) -> bool {
        let bsize = block.len() as u32;
        if self.size[seg as usize] <= bsize {
            return false;
        }
        let mut cands: Vec<u32> = Vec::new();
        for &p in block {
            for q in neighbors(self.h, self.w, p) {
                let l = self.labels[q];
                if l != seg && !cands.contains(&l) {
                    cands.push(l);
                }
            }
        }
        if cands.is_empty() {
            return false;
        }
        let mut bh: Vec<(usize, u32)> = Vec::new();
        for &p in block {
            let b = self.bin_of[p];
            match bh.iter_mut().find(|(bb, _)| *bb == b) {
                Some(e) => e.1 += 1,
                None => bh.push((b, 1)),
            }
        }
        let own = self.intersection(&bh, bsize, seg as usize, true);
        cands.sort_unstable();
        let mut best = None;
        let mut best_score = own + 1e-12;
        for &c in &cands {
            let sc = self.intersection(&bh, bsize, c as usize, false);
            if sc > best_score {
                best_score = sc;
                best = Some(c);
            }
        }
        let Some(to) = best else { return false };
        self.stamp += 1;
        for &p in block {
            self.mark[p] = self.stamp;
        }
        let remaining = self.size[seg as usize] - bsize;
        if !self.stays_connected(seg, block, remaining) {
            return false;
        }
        self.move_block(block, seg as usize, to as usize);
        true
    }
}

/// SEEDS superpixels: a regular grid refined by hill-climbing block moves
/// from coarse blocks down to single pixels. A block moves to a neighbouring
/// segment when its colour histogram intersects that segment's histogram
/// more than it intersects the rest of its own segment.
pub fn seeds_superpixels(image: &Image, cfg: &SuperpixelConfig) -> Result<LabelMap> {
    check_size(image, cfg)?;
    let (h, w) = (image.height, image.width);
    let (gy, gx) = grid_shape(h, w, cfg.target_count);
    let labels = grid_labels(h, w, gy, gx);
    let n = gy * gx;
    let bins = cfg.seeds_histogram_bins;
    let nbins = bins * bins * bins;
    let bin_of: Vec<usize> = image
        .data
        .chunks_exact(3)
        .map(|c| {
            let q = |v: u8| (v as usize * bins) / 256;
            (q(c[0]) * bins + q(c[1])) * bins + q(c[2])
        })
        .collect();
    let mut hist = vec![0u32; n * nbins];
    let mut size = vec![0u32; n];
    for (p, &l) in labels.iter().enumerate() {
        hist[l as usize * nbins + bin_of[p]] += 1;
        size[l as usize] += 1;
    }
    let mut st = SeedsState { h, w, labels, bin_of, nbins, hist, size, mark: vec![0; h * w], stamp: 0 };

    // block sides: powers of two below the initial cell size, down to pixels
    let cell = (h / gy).min(w / gx).max(1);
    let mut sides = Vec::new();
    let mut s = 1;
    while s * 2 < cell {
        s *= 2;
    }
    while s >= 1 {
        sides.push(s);
        s /= 2;
    }
    for &s in &sides {
        for _ in 0..cfg.iterations {
            if st.sweep(s) == 0 {
                break;
            }
        }
    }
    let (map, _) = LabelMap::compacted(h, w, &st.labels);
    Ok(map)
}

fn srgb_to_lab(c: [u8; 3]) -> [f64; 3] {
    let lin = |v: u8| {
        let v = v as f64 / 255.0;
        if v <= 0.04045 {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    };
    let (r, g, b) = (lin(c[0]), lin(c[1]), lin(c[2]));
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = (0.019_333_9 * r + 0.119_192 * g + 0.950_304_1 * b) / 1.088_83;
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// SLIC superpixels: k-means in (L, a, b, x, y) with spatial distances
/// weighted by `compactness / step`, then connectivity enforcement.
pub fn slic_superpixels(image: &Image, cfg: &SuperpixelConfig) -> Result<LabelMap> {
    check_size(image, cfg)?;
    let (h, w) = (image.height, image.width);
    let (gy, gx) = grid_shape(h, w, cfg.target_count);
    let lab: Vec<[f64; 3]> = image.data.chunks_exact(3).map(|c| srgb_to_lab([c[0], c[1], c[2]])).collect();
    let step = ((h * w) as f64 / (gy * gx) as f64).sqrt();
    let m = cfg.slic_compactness;
    let spatial_w = (m / step).powi(2);
    // centers: [L, a, b, y, x]
    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(gy * gx);
    for i in 0..gy {
        for j in 0..gx {
            let cy = (i as f64 + 0.5) * h as f64 / gy as f64 - 0.5;
            let cx = (j as f64 + 0.5) * w as f64 / gx as f64 - 0.5;
            let p = lab[(cy.round() as usize).min(h - 1) * w + (cx.round() as usize).min(w - 1)];
            centers.push([p[0], p[1], p[2], cy, cx]);
        }
    }
    let mut labels = grid_labels(h, w, gy, gx);
    let mut dist = vec![f64::INFINITY; h * w];
    let reach = (2.0 * step).ceil() as isize;
    for _ in 0..cfg.iterations {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cy, cx) = (c[3].round() as isize, c[4].round() as isize);
            for y in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
                for x in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                    let i = y as usize * w + x as usize;
                    let p = lab[i];
                    let dc = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                    let ds = (y as f64 - c[3]).powi(2) + (x as f64 - c[4]).powi(2);
                    let d = dc + ds * spatial_w;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let a = &mut acc[l as usize];
            let p = lab[i];
            a[0] += p[0];
            a[1] += p[1];
            a[2] += p[2];
            a[3] += (i / w) as f64;
            a[4] += (i % w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                for d in 0..5 {
                    c[d] = a[d] / a[5];
                }
            }
        }
    }
    Ok(enforce_connectivity(h, w, &labels))
}

/// 4-connected components; returns (component id per pixel, component count).
pub fn connected_components(h: usize, w: usize, labels: &[u32]) -> (Vec<u32>, usize) {
    let mut comp = vec![u32::MAX; h * w];
    let mut n = 0u32;
    let mut queue = VecDeque::new();
    for s in 0..h * w {
        if comp[s] != u32::MAX {
            continue;
        }
        comp[s] = n;
        queue.push_back(s);
        while let Some(p) = queue.pop_front() {
            for q in neighbors(h, w, p) {
                if comp[q] == u32::MAX && labels[q] == labels[s] {
                    comp[q] = n;
                    queue.push_back(q);
                }
            }
        }
        n += 1;
    }
    (comp, n as usize)
}

/// Keeps the largest component of every label; every other component is
/// absorbed by the largest segment adjacent to it. Labels are compacted.
pub fn enforce_connectivity(h: usize, w: usize, labels: &[u32]) -> LabelMap {
    let mut labels = labels.to_vec();
    loop {
        let (comp, nc) = connected_components(h, w, &labels);
        let mut comp_size = vec![0usize; nc];
        let mut comp_label = vec![0u32; nc];
        for (p, &c) in comp.iter().enumerate() {
            comp_size[c as usize] += 1;
            comp_label[c as usize] = labels[p];
        }
        let nl = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        // largest component per label (ties to the lowest component id)
        let mut keeper = vec![usize::MAX; nl];
        for c in 0..nc {
            let l = comp_label[c] as usize;
            if keeper[l] == usize::MAX || comp_size[c] > comp_size[keeper[l]] {
                keeper[l] = c;
            }
        }
        let mut label_size = vec![0usize; nl];
        for &l in &labels {
            label_size[l as usize] += 1;
        }
        let orphans: Vec<usize> = (0..nc).filter(|&c| keeper[comp_label[c] as usize] != c).collect();
        if orphans.is_empty() {
            break;
        }
        // pick absorbing labels from the current state, then relabel all at once
        let mut target = vec![None; nc];
        for (p, &c) in comp.iter().enumerate() {
            let c = c as usize;
            if keeper[comp_label[c] as usize] == c {
                continue;
            }
            for q in neighbors(h, w, p) {
                let l = labels[q];
                if l == comp_label[c] {
                    continue;
                }
                let better = match target[c] {
                    None => true,
                    Some(t) => {
                        let t: u32 = t;
                        (label_size[l as usize], std::cmp::Reverse(l)) > (label_size[t as usize], std::cmp::Reverse(t))
                    }
                };
                if better {
                    target[c] = Some(l);
                }
            }
        }
        for (p, &c) in comp.iter().enumerate() {
            if let Some(t) = target[c as usize] {
                labels[p] = t;
            }
        }
    }
    LabelMap::compacted(h, w, &labels).0
}

/// Outcome of [`validate_partition`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartitionReport {
    /// Every pixel carries a label below `n_segments`.
    pub coverage: bool,
    /// Labels that never occur.
    pub missing_labels: Vec<u32>,
    /// Segments split into more than one 4-connected island.
    pub disconnected_segments: Vec<u32>,
}

impl PartitionReport {
    pub fn compact(&self) -> bool {
        self.missing_labels.is_empty()
    }

    pub fn connected(&self) -> bool {
        self.disconnected_segments.is_empty()
    }

    pub fn passed(&self) -> bool {
        self.coverage && self.compact() && self.connected()
    }
}

pub fn validate_partition(map: &LabelMap) -> PartitionReport {
    let (h, w) = (map.height, map.width);
    let coverage = map.labels.len() == h * w && map.labels.iter().all(|&l| (l as usize) < map.n_segments);
    if !coverage {
        return PartitionReport { coverage, ..Default::default() };
    }
    let mut seen = vec![false; map.n_segments];
    for &l in &map.labels {
        seen[l as usize] = true;
    }
    let missing_labels = (0..map.n_segments as u32).filter(|&l| !seen[l as usize]).collect();
    let (comp, nc) = connected_components(h, w, &map.labels);
    let mut islands = vec![0usize; map.n_segments];
    let mut counted = vec![false; nc];
    for (p, &c) in comp.iter().enumerate() {
        if !counted[c as usize] {
            counted[c as usize] = true;
            islands[map.labels[p] as usize] += 1;
        }
    }
    let disconnected_segments = (0..map.n_segments as u32).filter(|&l| islands[l as usize] > 1).collect();
    PartitionReport { coverage, missing_labels, disconnected_segments }
}
