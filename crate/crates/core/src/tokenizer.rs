//! Initial segment tokens: a convolutional stem, superpixel average
//! pooling of its features and of fixed positional encodings, and a class
//! token.

use crate::error::{Error, Result};
use crate::pixelio::{Image, LabelMap};
use crate::rng::Stream;
use crate::tensorcore::nn::init_linear;
use crate::tensorcore::{Graph, Im2ColSpec, ParamStore, Tensor, Var};

/// Pixels per feature-grid cell.
pub const STEM_STRIDE: usize = 4;

/// Stem output: `(grid_h * grid_w) x channels`, row-major over cells.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub stride: usize,
    pub data: Var,
}

/// Segment tokens of one hierarchy level; row 0 is the class token.
#[derive(Clone, Copy, Debug)]
pub struct TokenSet {
    pub tokens: Var,
    pub level: usize,
    pub n_segments: usize,
}

pub fn init_stem(store: &mut ParamStore, d: usize, rng: &mut Stream) {
    let c1 = (d / 2).max(1);
    init_linear(store, "stem.conv1", 9 * 3, c1, rng);
    init_linear(store, "stem.conv2", 9 * c1, d, rng);
    init_linear(store, "stem.proj", d, d, rng);
}

/// Pixels scaled to `[0, 1]` as an `(h * w) x 3` constant.
pub fn image_tensor(image: &Image) -> Tensor {
    let data = image.data.iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::matrix(image.height * image.width, 3, data).unwrap()
}

fn conv3x3_s2(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    h: usize,
    w: usize,
    c: usize,
) -> Result<(Var, usize, usize)> {
    let spec = Im2ColSpec { height: h, width: w, channels: c, kernel: 3, stride: 2, pad: 1 };
    let cols = g.im2col(x, spec)?;
    let y = crate::tensorcore::nn::linear(g, store, prefix, cols)?;
    Ok((y, spec.out_height(), spec.out_width()))
}

/// Two 3x3 stride-2 convolutions with GELU activations followed by a 1x1
/// projection; the grid is 4x coarser than the image.
pub fn conv_stem(g: &mut Graph, store: &ParamStore, image: &Image) -> Result<FeatureGrid> {
    let (h, w) = (image.height, image.width);
    if h % STEM_STRIDE != 0 || w % STEM_STRIDE != 0 {
        return Err(Error::ShapeMismatch(format!("image {h}x{w} not divisible by stem stride {STEM_STRIDE}")));
    }
    let x = g.constant(image_tensor(image))?;
    let (y, h1, w1) = conv3x3_s2(g, store, "stem.conv1", x, h, w, 3)?;
    let y = g.gelu(y)?;
    let c1 = g.value(y).cols();
    let (y, h2, w2) = conv3x3_s2(g, store, "stem.conv2", y, h1, w1, c1)?;
    let y = g.gelu(y)?;
    let y = crate::tensorcore::nn::linear(g, store, "stem.proj", y)?;
    let channels = g.value(y).cols();
    Ok(FeatureGrid { grid_h: h2, grid_w: w2, channels, stride: STEM_STRIDE, data: y })
}

/// A level-0 partition at pixel and feature-cell resolution with matching
/// labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DownsampledPartition {
    pub cells: LabelMap,
    /// Pixel map relabeled to agree with `cells`; pixels of segments lost
    /// at cell resolution take the label of their cell.
    pub pixels: LabelMap,
}

/// Majority label per `stride x stride` block (ties to the smallest label).
/// Segments that vanish are dropped and the remaining ids compacted in order.
pub fn downsample_partition(map: &LabelMap, stride: usize) -> Result<DownsampledPartition> {
    let (h, w) = (map.height, map.width);
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::ShapeMismatch(format!("stride {stride} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / stride, w / stride);
    let mut raw = Vec::with_capacity(gh * gw);
    let mut counts: Vec<(u32, usize)> = Vec::with_capacity(stride * stride);
    for cy in 0..gh {
        for cx in 0..gw {
            counts.clear();
            for y in cy * stride..(cy + 1) * stride {
                for x in cx * stride..(cx + 1) * stride {
                    let l = map.at(y, x);
                    match counts.iter_mut().find(|c| c.0 == l) {
                        Some(c) => c.1 += 1,
                        None => counts.push((l, 1)),
                    }
                }
            }
            let best = counts.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).unwrap();
            raw.push(best.0);
        }
    }
    let (cells, _) = LabelMap::compacted(gh, gw, &raw);
    // the compaction table over original ids
    let mut table = vec![None; map.n_segments];
    for (&r, &c) in raw.iter().zip(&cells.labels) {
        table[r as usize] = Some(c);
    }
    let labels = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            table[map.labels[i] as usize].unwrap_or_else(|| cells.at(y / stride, x / stride))
        })
        .collect();
    let pixels = LabelMap { height: h, width: w, labels, n_segments: cells.n_segments };
    Ok(DownsampledPartition { cells, pixels })
}

/// Fixed 2-D sinusoidal encodings, `(grid_h * grid_w) x d`. Even channels
/// encode the row, odd channels the column.
pub fn positional_encoding(grid_h: usize, grid_w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let axis = |pos: usize, k: usize| -> f64 {
        let i = k / 2;
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / half.max(1) as f64);
        if k.is_multiple_of(2) {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    let mut data = Vec::with_capacity(grid_h * grid_w * d);
    for y in 0..grid_h {
        for x in 0..grid_w {
            for c in 0..d {
                data.push(if c % 2 == 0 { axis(y, c / 2) } else { axis(x, c / 2) });
            }
        }
    }
    Tensor::matrix(grid_h * grid_w, d, data).unwrap()
}

/// Row-stochastic `n_segments x cells` averaging matrix.
pub fn averaging_matrix(cell_map: &LabelMap) -> Result<Tensor> {
    let n = cell_map.n_segments;
    let cells = cell_map.labels.len();
    let mut sizes = vec![0usize; n];
    for &l in &cell_map.labels {
        sizes[l as usize] += 1;
    }
    if let Some(segment) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptySegmentAtCellResolution { segment });
    }
    let mut a = vec![0.0; n * cells];
    for (c, &l) in cell_map.labels.iter().enumerate() {
        a[l as usize * cells + c] = 1.0 / sizes[l as usize] as f64;
    }
    Tensor::matrix(n, cells, a)
}

pub fn init_class_token(store: &mut ParamStore, name: &str, d: usize, rng: &mut Stream) {
    let v = (0..d).map(|_| 0.02 * rng.normal()).collect();
    store.insert(name, Tensor::matrix(1, d, v).unwrap());
}

/// Segment tokens: per-segment means of stem features plus per-segment
/// means of positional encodings, with the class token prepended.
pub fn aggregate_tokens(
    g: &mut Graph,
    store: &ParamStore,
    grid: &FeatureGrid,
    cell_map: &LabelMap,
) -> Result<TokenSet> {
    if (cell_map.height, cell_map.width) != (grid.grid_h, grid.grid_w) {
        return Err(Error::ShapeMismatch(format!(
            "cell map {}x{} vs grid {}x{}",
            cell_map.height, cell_map.width, grid.grid_h, grid.grid_w
        )));
    }
    let avg = averaging_matrix(cell_map)?;
    let pos = avg.matmul(&positional_encoding(grid.grid_h, grid.grid_w, grid.channels))?;
    let a = g.constant(avg)?;
    let xs = g.matmul(a, grid.data)?;
    let e = g.constant(pos)?;
    let seg = g.add(xs, e)?;
    let cls = g.param(store, "cls_token")?;
    let tokens = g.concat_rows(&[cls, seg])?;
    Ok(TokenSet { tokens, level: 0, n_segments: cell_map.n_segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{grad_check, GradCheckConfig};

    fn stem_store(d: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = Stream::new(seed, "stem");
        init_stem(&mut s, d, &mut rng);
        init_class_token(&mut s, "cls_token", d, &mut rng);
        s
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let s = stem_store(8, 1);
        let mut g = Graph::new();
        let grid = conv_stem(&mut g, &s, &Image::filled(16, 16, [0, 0, 0])).unwrap();
        assert!(g.value(grid.data).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stem_shape() {
        let s = stem_store(32, 2);
        let mut g = Graph::new();
        let grid = conv_stem(&mut g, &s, &Image::filled(64, 64, [10, 20, 30])).unwrap();
        assert_eq!((grid.grid_h, grid.grid_w, grid.channels), (16, 16, 32));
        assert_eq!(g.value(grid.data).shape(), &[256, 32]);
        let mut g = Graph::new();
        assert!(conv_stem(&mut g, &s, &Image::filled(30, 32, [0, 0, 0])).is_err());
    }

    /// Brute-force perturbation: flip one pixel, see which input pixels can
    /// influence the touched cells.
    #[test]
    fn receptive_field_is_at_most_seven_pixels() {
        let mut s = stem_store(8, 3);
        for name in ["stem.conv1.b", "stem.conv2.b", "stem.proj.b"] {
            let t = s.get_mut(name).unwrap();
            let n = t.len();
            *t = Tensor::matrix(1, n, vec![0.1; n]).unwrap();
        }
        let base = Image::filled(32, 32, [0, 0, 0]);
        let run = |img: &Image| {
            let mut g = Graph::new();
            let grid = conv_stem(&mut g, &s, img).unwrap();
            g.value(grid.data).clone()
        };
        let f0 = run(&base);
        for &(py, px) in &[(13usize, 17usize), (0, 0), (31, 5)] {
            let mut img = base.clone();
            img.set_pixel(py, px, [255, 255, 255]);
            let f1 = run(&img);
            for cell in 0..64 {
                let changed = f0.row(cell).iter().zip(f1.row(cell)).any(|(a, b)| a != b);
                if changed {
                    // the cell's receptive field is the 7x7 pixel window whose
                    // top-left corner is (4cy - 3, 4cx - 3)
                    let (cy, cx) = ((cell / 8) as isize, (cell % 8) as isize);
                    let (dy, dx) = (py as isize - (4 * cy - 3), px as isize - (4 * cx - 3));
                    assert!((0..7).contains(&dy) && (0..7).contains(&dx), "cell {cell} pixel {py},{px}");
                }
            }
        }
    }

    #[test]
    fn downsample_block_map() {
        let labels = (0..64).map(|i| (((i / 8) / 2) * 4 + (i % 8) / 2) as u32).collect();
        let m = LabelMap::new(8, 8, labels).unwrap();
        let d = downsample_partition(&m, 2).unwrap();
        assert_eq!(d.cells.labels, (0..16).collect::<Vec<u32>>());
        assert_eq!(d.pixels, m);
        let u = downsample_partition(&LabelMap::uniform(8, 8), 4).unwrap();
        assert_eq!(u.cells, LabelMap::uniform(2, 2));
    }

    #[test]
    fn downsample_ties_and_vanishing_segments() {
        // one 2x2 block split 2/2 between labels 3 and 1 -> 1 wins; label 2
        // holds one pixel of the other block
        let labels = vec![3, 1, 0, 0, 3, 1, 2, 0];
        let m = LabelMap::new(2, 4, labels).unwrap();
        let d = downsample_partition(&m, 2).unwrap();
        assert_eq!(d.cells.labels, vec![1, 0]);
        assert_eq!(d.cells.n_segments, 2);
        // 3 loses the tie and 2 is outvoted: both vanish and their pixels
        // join the label of their cell
        assert_eq!(d.pixels.labels, vec![1, 1, 0, 0, 1, 1, 0, 0]);
        assert_eq!(d.pixels.n_segments, 2);
    }

    #[test]
    fn single_segment_token_is_global_mean() {
        let s = stem_store(8, 4);
        let mut g = Graph::new();
        let mut img = Image::filled(16, 16, [0, 0, 0]);
        img.set_pixel(3, 4, [200, 10, 90]);
        let grid = conv_stem(&mut g, &s, &img).unwrap();
        let ts = aggregate_tokens(&mut g, &s, &grid, &LabelMap::uniform(4, 4)).unwrap();
        let t = g.value(ts.tokens);
        assert_eq!(t.rows(), 2);
        let feats = g.value(grid.data);
        let pe = positional_encoding(4, 4, 8);
        for c in 0..8 {
            let mf: f64 = (0..16).map(|r| feats.get(r, c)).sum::<f64>() / 16.0;
            let mp: f64 = (0..16).map(|r| pe.get(r, c)).sum::<f64>() / 16.0;
            assert!((t.get(1, c) - (mf + mp)).abs() < 1e-12);
        }
        assert_eq!(t.row(0), s.get("cls_token").unwrap().data());
    }

    #[test]
    fn empty_segment_is_an_error() {
        let m = LabelMap { height: 2, width: 2, labels: vec![0, 0, 2, 2], n_segments: 3 };
        assert!(matches!(averaging_matrix(&m), Err(Error::EmptySegmentAtCellResolution { segment: 1 })));
    }

    #[test]
    fn aggregation_gradients_check() {
        let s = stem_store(8, 5);
        let mut img = Image::filled(16, 16, [0, 0, 0]);
        let mut rng = Stream::new(5, "img");
        for v in img.data.iter_mut() {
            *v = rng.below(256) as u8;
        }
        let cells = LabelMap::new(4, 4, (0..16).map(|i| ((i % 4) / 2 + 2 * (i / 8)) as u32).collect()).unwrap();
        let report = grad_check(
            &s,
            |g, st| {
                let grid = conv_stem(g, st, &img)?;
                let ts = aggregate_tokens(g, st, &grid, &cells)?;
                let sq = g.mul(ts.tokens, ts.tokens)?;
                g.sum(sq)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
