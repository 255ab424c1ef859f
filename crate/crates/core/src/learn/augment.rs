//! View augmentations for two-view training.

use crate::pixelio::Image;
use crate::rng::Stream;

/// Random square crop covering 60-100% of each side, resized back with
/// nearest-neighbor sampling.
pub fn random_resized_crop(image: &Image, rng: &mut Stream) -> Image {
    let (h, w) = (image.height, image.width);
    let frac = rng.range(0.6, 1.0);
    let ch = ((h as f64 * frac).round() as usize).clamp(1, h);
    let cw = ((w as f64 * frac).round() as usize).clamp(1, w);
    let y0 = rng.below(h - ch + 1);
    let x0 = rng.below(w - cw + 1);
    let mut out = Image::filled(h, w, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let sy = y0 + (y * ch) / h;
            let sx = x0 + (x * cw) / w;
            out.set_pixel(y, x, image.pixel(sy, sx));
        }
    }
    out
}

pub fn hflip(image: &Image) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            out.set_pixel(y, x, image.pixel(y, image.width - 1 - x));
        }
    }
    out
}

/// Brightness scaling by up to 20% and per-channel gains by up to 10%.
pub fn color_jitter(image: &Image, rng: &mut Stream) -> Image {
    let b = rng.range(0.8, 1.2);
    let gains = [rng.range(0.9, 1.1), rng.range(0.9, 1.1), rng.range(0.9, 1.1)];
    let mut out = image.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = (*v as f64 * b * gains[i % 3]).round().clamp(0.0, 255.0) as u8;
    }
    out
}

pub fn augment(image: &Image, rng: &mut Stream) -> Image {
    let mut out = random_resized_crop(image, rng);
    if rng.uniform() < 0.5 {
        out = hflip(&out);
    }
    color_jitter(&out, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_twice_is_identity() {
        let mut rng = Stream::new(0, "img");
        let mut img = Image::filled(8, 12, [0, 0, 0]);
        for v in img.data.iter_mut() {
            *v = rng.below(256) as u8;
        }
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(hflip(&img).pixel(2, 0), img.pixel(2, 11));
    }

    #[test]
    fn augment_is_deterministic_and_keeps_size() {
        let img = Image::filled(64, 64, [100, 150, 200]);
        let a = augment(&img, &mut Stream::new(1, "aug"));
        let b = augment(&img, &mut Stream::new(1, "aug"));
        assert_eq!(a, b);
        assert_eq!((a.height, a.width), (64, 64));
    }
}
