//! Deterministic synthetic shapes with part-level ground truth.
//!
//! Three classes: a disk with two arms, a T, and a ring split into two
//! halves. Every part has its own colour (hues drawn from a class-biased
//! window), objects sit at a random pose and scale on a low-saturation
//! striped and noisy background.

use crate::error::{Error, Result};
use crate::pixelio::{hsv_to_rgb, Image, LabelMap};
use crate::rng::Stream;

pub const N_SHAPE_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub class_label: usize,
    /// 0 = background, 1.. = object parts.
    pub gt_mask: LabelMap,
}

impl SynthSample {
    /// Binary figure/ground map (1 = object).
    pub fn object_mask(&self) -> LabelMap {
        let labels = self.gt_mask.labels.iter().map(|&l| (l > 0) as u32).collect();
        LabelMap { height: self.gt_mask.height, width: self.gt_mask.width, labels, n_segments: 2 }
    }

    pub fn n_parts(&self) -> usize {
        self.gt_mask.n_segments - 1
    }
}

/// Part id (0 for background) at object-frame coordinates.
fn part_at(class: usize, u: f64, v: f64) -> u32 {
    match class {
        0 => {
            if u * u + v * v <= 1.0 {
                1
            } else if v.abs() <= 0.25 && (0.8..=1.5).contains(&u) {
                2
            } else if v.abs() <= 0.25 && (-1.5..=-0.8).contains(&u) {
                3
            } else {
                0
            }
        }
        1 => {
            if u.abs() <= 1.2 && (-1.1..=-0.5).contains(&v) {
                1
            } else if u.abs() <= 0.3 && v > -0.5 && v <= 1.1 {
                2
            } else {
                0
            }
        }
        _ => {
            let r = (u * u + v * v).sqrt();
            if (0.6..=1.2).contains(&r) {
                if v < 0.0 {
                    1
                } else {
                    2
                }
            } else {
                0
            }
        }
    }
}

fn render(class: usize, size: usize, rng: &mut Stream) -> (Image, Vec<u32>) {
    let scale = rng.range(10.0, 14.0) * size as f64 / 64.0;
    let lo = 24.0 * size as f64 / 64.0;
    let hi = 40.0 * size as f64 / 64.0;
    let (cy, cx) = (rng.range(lo, hi), rng.range(lo, hi));
    let theta = rng.range(0.0, std::f64::consts::TAU);
    let (st, ct) = theta.sin_cos();

    let bg_level = rng.range(60.0, 190.0);
    let tint = [rng.range(-12.0, 12.0), rng.range(-12.0, 12.0), rng.range(-12.0, 12.0)];
    let freq = rng.range(0.15, 0.45);
    let phi = rng.range(0.0, std::f64::consts::PI);
    let (sp, cp) = phi.sin_cos();

    let center_hue = class as f64 * 120.0;
    let mut hues: Vec<f64> = Vec::new();
    while hues.len() < 3 {
        let h = center_hue + rng.range(-60.0, 60.0);
        if hues.iter().all(|&o| {
            let d = (h - o).rem_euclid(360.0);
            d.min(360.0 - d) >= 25.0
        }) {
            hues.push(h);
        }
    }
    let part_rgb: Vec<[u8; 3]> =
        hues.iter().map(|&h| hsv_to_rgb(h, rng.range(0.65, 1.0), rng.range(0.7, 1.0))).collect();

    let mut img = Image::filled(size, size, [0, 0, 0]);
    let mut parts = vec![0u32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = (ct * dx + st * dy) / scale;
            let v = (-st * dx + ct * dy) / scale;
            let part = part_at(class, u, v);
            parts[y * size + x] = part;
            let noise = rng.range(-5.0, 5.0);
            let rgb = if part > 0 {
                let c = part_rgb[part as usize - 1];
                [c[0] as f64 + noise, c[1] as f64 + noise, c[2] as f64 + noise]
            } else {
                let stripe = 12.0 * (freq * (cp * x as f64 + sp * y as f64)).sin();
                let g = bg_level + stripe + noise;
                [g + tint[0], g + tint[1], g + tint[2]]
            };
            img.set_pixel(y, x, rgb.map(|c| c.round().clamp(0.0, 255.0) as u8));
        }
    }
    (img, parts)
}

/// Generates `n` samples of side `size`; classes are balanced
/// (round-robin, then shuffled).
pub fn synth_dataset(seed: u64, n: usize, size: usize) -> Result<Vec<SynthSample>> {
    if size < 32 {
        return Err(Error::InvalidConfig(format!("synthetic images need size >= 32, got {size}")));
    }
    let mut order = Stream::new(seed, "synth-order");
    let mut classes: Vec<usize> = (0..n).map(|i| i % N_SHAPE_CLASSES).collect();
    order.shuffle(&mut classes);
    let mut out = Vec::with_capacity(n);
    for (i, &class) in classes.iter().enumerate() {
        let mut rng = Stream::new(seed.wrapping_add(i as u64), "synth-sample");
        // resample the pose until every part is visible
        loop {
            let (image, parts) = render(class, size, &mut rng);
            if let Ok(gt_mask) = LabelMap::new(size, size, parts) {
                if gt_mask.segment_sizes().iter().all(|&s| s >= 4) {
                    out.push(SynthSample { image, class_label: class, gt_mask });
                    break;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superpixel::connected_components;

    #[test]
    fn same_seed_same_data() {
        assert_eq!(synth_dataset(3, 6, 64).unwrap(), synth_dataset(3, 6, 64).unwrap());
        assert_ne!(synth_dataset(3, 6, 64).unwrap(), synth_dataset(4, 6, 64).unwrap());
    }

    #[test]
    fn classes_are_balanced() {
        let data = synth_dataset(11, 300, 64).unwrap();
        let mut counts = [0usize; 3];
        for s in &data {
            counts[s.class_label] += 1;
        }
        for c in counts {
            assert!((c as f64 - 100.0).abs() <= 10.0, "{counts:?}");
        }
    }

    #[test]
    fn parts_tile_a_connected_object() {
        for s in synth_dataset(5, 30, 64).unwrap() {
            assert!((2..=3).contains(&s.n_parts()), "parts {}", s.n_parts());
            let obj = s.object_mask();
            // every object pixel belongs to exactly one part
            for (p, o) in s.gt_mask.labels.iter().zip(&obj.labels) {
                assert_eq!(*p > 0, *o == 1);
            }
            let (comp, _) = connected_components(64, 64, &obj.labels);
            let mut ids: Vec<u32> = comp.iter().zip(&obj.labels).filter(|(_, &o)| o == 1).map(|(c, _)| *c).collect();
            ids.dedup();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 1, "object of class {} is split", s.class_label);
        }
    }

    #[test]
    fn small_sizes_are_rejected() {
        assert!(synth_dataset(0, 1, 16).is_err());
    }
}
