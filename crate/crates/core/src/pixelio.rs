//! Image and label-map I/O (binary PPM/PGM) and hierarchy overlay rendering.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit RGB image stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "image {height}x{width} needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// A dense segment-index map. Labels are compact: every id in
/// `[0, n_segments)` occurs at least once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub n_segments: usize,
}

impl LabelMap {
    /// Builds a map and checks that the labels are compact.
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        let n = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; n];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::ShapeMismatch(format!("label {missing} of {n} never occurs")));
        }
        Ok(LabelMap { height, width, labels, n_segments: n })
    }

    /// Relabels arbitrary ids to `[0, n)` preserving their relative order.
    /// Returns the map together with the old-to-new table (`None` for ids
    /// that do not occur).
    pub fn compacted(height: usize, width: usize, raw: &[u32]) -> (Self, Vec<Option<u32>>) {
        let max = raw.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut present = vec![false; max];
        for &l in raw {
            present[l as usize] = true;
        }
        let mut table = vec![None; max];
        let mut next = 0u32;
        for (old, p) in present.iter().enumerate() {
            if *p {
                table[old] = Some(next);
                next += 1;
            }
        }
        let labels = raw.iter().map(|&l| table[l as usize].unwrap()).collect();
        (LabelMap { height, width, labels, n_segments: next as usize }, table)
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        LabelMap { height, width, labels: vec![0; height * width], n_segments: 1 }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> LabelMap {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                labels.push(self.at(y / factor, x / factor));
            }
        }
        LabelMap { height: h, width: w, labels, n_segments: self.n_segments }
    }

    /// Boundary mask: a pixel is on a boundary when its right or lower
    /// 4-neighbour carries a different label.
    pub fn boundary_mask(&self) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let l = self.at(y, x);
                if (x + 1 < w && self.at(y, x + 1) != l) || (y + 1 < h && self.at(y + 1, x) != l) {
                    mask[y * w + x] = true;
                }
            }
        }
        mask
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

/// Parses a binary netpbm header; returns (magic, width, height, maxval,
/// payload offset).
fn parse_header(bytes: &[u8]) -> Result<(String, usize, usize, usize, usize)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader("header ended early".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() {
        return Err(Error::TruncatedPayload { expected: 1, found: 0 });
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::MalformedHeader(format!("not a number: {s:?}")));
    Ok((fields[0].clone(), num(&fields[1])?, num(&fields[2])?, num(&fields[3])?, pos))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = read_file(path.as_ref())?;
    let (magic, width, height, maxval, off) = parse_header(&bytes)?;
    if magic != "P6" {
        return Err(Error::MalformedHeader(format!("expected P6, found {magic}")));
    }
    if maxval != 255 {
        return Err(Error::MalformedHeader(format!("expected maxval 255, found {maxval}")));
    }
    let expected = width * height * 3;
    let found = bytes.len() - off;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    Image::new(height, width, bytes[off..off + expected].to_vec())
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", image.width, image.height)?;
    f.write_all(&image.data)?;
    Ok(())
}

pub fn save_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    if map.n_segments > 65535 {
        return Err(Error::TooManySegments(map.n_segments));
    }
    let mut buf = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    buf.reserve(map.labels.len() * 2);
    for &l in &map.labels {
        buf.extend_from_slice(&(l as u16).to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let bytes = read_file(path.as_ref())?;
    let (magic, width, height, maxval, off) = parse_header(&bytes)?;
    if magic != "P5" {
        return Err(Error::MalformedHeader(format!("expected P5, found {magic}")));
    }
    if maxval != 65535 {
        return Err(Error::MalformedHeader(format!("expected maxval 65535, found {maxval}")));
    }
    let expected = width * height * 2;
    let found = bytes.len() - off;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    let labels = bytes[off..off + expected].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect();
    LabelMap::new(height, width, labels).map_err(|e| Error::MalformedHeader(format!("label payload: {e}")))
}

/// Saturation used for the k-th child of a coarse segment.
pub const SATURATION_STEPS: [f64; 2] = [1.0, 0.55];
/// Value used for the k-th child at the second refinement.
pub const VALUE_STEPS: [f64; 2] = [1.0, 0.7];
const OVERLAY_ALPHA: f64 = 0.6;

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Parent id of every segment of `fine` within `coarse`, or an error when a
/// fine segment straddles two coarse ones.
pub fn parent_table(coarse: &LabelMap, fine: &LabelMap, level: usize) -> Result<Vec<u32>> {
    if coarse.labels.len() != fine.labels.len() {
        return Err(Error::DimMismatch("hierarchy levels differ in size".into()));
    }
    let mut parent: Vec<Option<u32>> = vec![None; fine.n_segments];
    for (&f, &c) in fine.labels.iter().zip(&coarse.labels) {
        match parent[f as usize] {
            None => parent[f as usize] = Some(c),
            Some(p) if p != c => return Err(Error::NonNestedLevels { level }),
            _ => {}
        }
    }
    Ok(parent.into_iter().map(|p| p.unwrap_or(0)).collect())
}

/// Renders a coarse-to-fine consistent colouring of a nested hierarchy.
///
/// The coarsest level picks evenly spaced hues, the first refinement varies
/// saturation among siblings and the second varies value. Boundaries of the
/// finest level are drawn in white.
pub fn render_hierarchy_overlay(image: &Image, levels: &[LabelMap]) -> Result<Image> {
    let mut out = image.clone();
    let Some(coarsest) = levels.first() else {
        return Ok(out);
    };
    for l in levels {
        if l.height != image.height || l.width != image.width {
            return Err(Error::DimMismatch("overlay level size differs from image".into()));
        }
    }
    let n_coarse = coarsest.n_segments;
    let hues: Vec<f64> = (0..n_coarse).map(|i| 360.0 * i as f64 / n_coarse as f64).collect();
    // (hue, saturation, value) per segment of the current level
    let mut colors: Vec<(f64, f64, f64)> = hues.iter().map(|&h| (h, 1.0, 1.0)).collect();
    for (depth, pair) in levels.windows(2).enumerate() {
        let parents = parent_table(&pair[0], &pair[1], depth + 1)?;
        let mut sibling_rank = vec![0usize; pair[1].n_segments];
        let mut seen = vec![0usize; pair[0].n_segments];
        for (child, &p) in parents.iter().enumerate() {
            sibling_rank[child] = seen[p as usize];
            seen[p as usize] += 1;
        }
        colors = parents
            .iter()
            .enumerate()
            .map(|(child, &p)| {
                let (h, s, v) = colors[p as usize];
                let r = sibling_rank[child] % 2;
                match depth {
                    0 => (h, SATURATION_STEPS[r], v),
                    1 => (h, s, VALUE_STEPS[r]),
                    _ => (h, s, v),
                }
            })
            .collect();
    }
    let finest = levels.last().unwrap();
    let rgb: Vec<[u8; 3]> = colors.iter().map(|&(h, s, v)| hsv_to_rgb(h, s, v)).collect();
    let contours = finest.boundary_mask();
    for y in 0..image.height {
        for x in 0..image.width {
            let i = y * image.width + x;
            if contours[i] {
                out.set_pixel(y, x, [255, 255, 255]);
                continue;
            }
            let c = rgb[finest.labels[i] as usize];
            let p = image.pixel(y, x);
            let mix = |a: u8, b: u8| (OVERLAY_ALPHA * a as f64 + (1.0 - OVERLAY_ALPHA) * b as f64).round() as u8;
            out.set_pixel(y, x, [mix(c[0], p[0]), mix(c[1], p[1]), mix(c[2], p[2])]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn reads_a_tiny_red_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("red.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        for _ in 0..4 {
            bytes.extend_from_slice(&[255, 0, 0]);
        }
        fs::write(&p, bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.height, img.width), (2, 2));
        assert_eq!(img.data, [255, 0, 0].repeat(4));
    }

    #[test]
    fn header_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.ppm");
        fs::write(&p, b"P5\n2 2\n255\n\0\0\0\0").unwrap();
        assert!(matches!(load_image(&p), Err(Error::MalformedHeader(_))));
        fs::write(&p, b"P6\n2 2\n65535\n").unwrap();
        assert!(matches!(load_image(&p), Err(Error::MalformedHeader(_))));
        fs::write(&p, b"P6\n2 2\n255\n\x01\x02").unwrap();
        assert!(matches!(load_image(&p), Err(Error::TruncatedPayload { .. })));
        assert!(matches!(load_image(dir.path().join("nope.ppm")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        fs::write(&p, b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(load_image(&p).unwrap().data, vec![1, 2, 3]);
    }

    #[test]
    fn zero_map_writes_zero_words() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.pgm");
        save_label_map(&LabelMap::uniform(3, 4), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n4 3\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len() - header.len(), 24);
    }

    #[test]
    fn too_many_segments_is_rejected() {
        let labels: Vec<u32> = (0..70000).collect();
        let m = LabelMap::new(1, 70000, labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(save_label_map(&m, dir.path().join("x.pgm")), Err(Error::TooManySegments(70000))));
    }

    #[test]
    fn compacted_preserves_order() {
        let (m, table) = LabelMap::compacted(1, 4, &[5, 2, 5, 9]);
        assert_eq!(m.labels, vec![1, 0, 1, 2]);
        assert_eq!(table[2], Some(0));
        assert_eq!(table[3], None);
    }

    #[test]
    fn single_segment_overlay_has_uniform_hue_and_no_contours() {
        let img = Image::filled(8, 8, [0, 0, 0]);
        let out = render_hierarchy_overlay(&img, &[LabelMap::uniform(8, 8)]).unwrap();
        let colors: HashSet<[u8; 3]> = out.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        assert_eq!(colors.len(), 1);
        assert!(!colors.contains(&[255, 255, 255]));
    }

    #[test]
    fn two_by_two_split_gives_four_colors() {
        let img = Image::filled(8, 8, [0, 0, 0]);
        let coarse = LabelMap::new(8, 8, (0..64).map(|i| ((i % 8) / 4) as u32).collect()).unwrap();
        let fine = LabelMap::new(8, 8, (0..64).map(|i| (2 * ((i % 8) / 4) + (i / 8) / 4) as u32).collect()).unwrap();
        let out = render_hierarchy_overlay(&img, &[coarse, fine.clone()]).unwrap();
        let mask = fine.boundary_mask();
        let colors: HashSet<[u8; 3]> =
            out.data.chunks(3).zip(&mask).filter(|(_, &b)| !b).map(|(c, _)| [c[0], c[1], c[2]]).collect();
        assert_eq!(colors.len(), 4);
    }

    #[test]
    fn non_nested_levels_are_rejected() {
        let img = Image::filled(8, 8, [0, 0, 0]);
        let coarse = LabelMap::new(8, 8, (0..64).map(|i| ((i % 8) / 4) as u32).collect()).unwrap();
        let fine = LabelMap::new(8, 8, (0..64).map(|i| ((i % 8) / 6) as u32).collect()).unwrap();
        assert!(matches!(render_hierarchy_overlay(&img, &[coarse, fine]), Err(Error::NonNestedLevels { level: 1 })));
    }
}
