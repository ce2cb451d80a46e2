//! Attention heatmaps: min-max normalise, threshold, upsample, colour and
//! blend over the input image.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::attention_ops::block_attention_batch;
use crate::backbone::Backbone;
use crate::datagen::to_tensor;
use crate::{Error, Real, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const COLORMAP: &str = "viridis";

/// Min-max normalisation to `[0, 1]`. A constant map becomes all ones, so
/// every pixel survives any threshold.
pub fn normalize(map: ArrayView2<'_, f64>) -> Array2<f64> {
    let lo = map.fold(f64::INFINITY, |a, &v| a.min(v));
    let hi = map.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    if hi - lo <= 0.0 {
        return Array2::ones(map.raw_dim());
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

/// Zeroes every value below `threshold`.
pub fn threshold(map: ArrayView2<'_, f64>, threshold: f64) -> Array2<f64> {
    map.mapv(|v| if v < threshold { 0.0 } else { v })
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample(map: ArrayView2<'_, f64>, size: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let coord = |i: usize, n: usize| {
        let c = ((i as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(n - 1), c - lo as f64)
    };
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (y0, y1, ty) = coord(y, h);
        let (x0, x1, tx) = coord(x, w);
        let top = map[[y0, x0]] * (1.0 - tx) + map[[y0, x1]] * tx;
        let bot = map[[y1, x0]] * (1.0 - tx) + map[[y1, x1]] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Samples of the viridis colormap at equal steps.
const VIRIDIS: [[f64; 3]; 9] = [
    [0.267, 0.005, 0.329],
    [0.283, 0.141, 0.458],
    [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558],
    [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518],
    [0.478, 0.821, 0.318],
    [0.993, 0.906, 0.144],
];

pub fn viridis(v: f64) -> [f64; 3] {
    let t = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f, a[2] + (b[2] - a[2]) * f]
}

/// Blends the coloured heat over an interleaved RGB image wherever the
/// heat is non-zero.
pub fn overlay(image: &[u8], heat: ArrayView2<'_, f64>, alpha: f64) -> Vec<u8> {
    let (h, w) = heat.dim();
    let mut out = image.to_vec();
    for y in 0..h {
        for x in 0..w {
            let v = heat[[y, x]];
            if v <= 0.0 {
                continue;
            }
            let c = viridis(v);
            for k in 0..3 {
                let i = (y * w + x) * 3 + k;
                out[i] = ((1.0 - alpha) * image[i] as f64 + alpha * c[k] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Writes a map as whitespace-separated rows of shortest round-trip decimals.
pub fn write_map_text(path: &Path, map: ArrayView2<'_, f64>) -> Result<()> {
    let text: String = map
        .outer_iter()
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    fs::write(path, text)?;
    Ok(())
}

pub fn read_map_text(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Dataset(format!("bad number {v:?} in {}", path.display()))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let w = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Dataset(format!("ragged rows in {}", path.display())));
    }
    Array2::from_shape_vec((rows.len(), w), rows.into_iter().flatten().collect()).map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_png_rgb(path: &Path, image: &[u8], size: usize) -> Result<()> {
    let mut enc = png::Encoder::new(BufWriter::new(fs::File::create(path)?), size as u32, size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(image)?;
    Ok(())
}

/// Files written for one image and block.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedMap {
    pub image: String,
    pub block: usize,
    pub png: PathBuf,
    pub raw: PathBuf,
    /// Attention map before normalisation.
    pub map: Array2<f64>,
}

/// For every image and (1-based) block: computes the block attention map,
/// writes the raw map as text and a thresholded heatmap overlay as PNG.
pub fn export_attention<T: Real>(
    model: &Backbone<T>,
    images: &[(String, Vec<u8>)],
    blocks: &[usize],
    thresh: f64,
    out: &Path,
) -> Result<Vec<ExportedMap>> {
    if !(0.0..=1.0).contains(&thresh) {
        return Err(Error::Param(format!("threshold {thresh} outside [0, 1]")));
    }
    let nb = model.config().blocks();
    if let Some(&b) = blocks.iter().find(|&&b| b == 0 || b > nb) {
        return Err(Error::Param(format!("unknown block {b}; the model has blocks 1..={nb}")));
    }
    let size = model.config().input_size;
    if let Some((name, _)) = images.iter().find(|(_, img)| img.len() != size * size * 3) {
        return Err(Error::Shape(format!("image {name} is not {size}x{size} RGB")));
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for chunk in images.chunks(64) {
        let x: ndarray::Array4<T> = to_tensor(&chunk.iter().map(|(_, i)| i.as_slice()).collect::<Vec<_>>(), size);
        let taps = model.forward_with_taps(x.view())?.taps;
        for &b in blocks {
            let maps = block_attention_batch(taps[b - 1].view())?;
            for ((name, img), (_, m)) in chunk.iter().zip(maps) {
                let map = m.values().mapv(|v| v.f64());
                let heat = upsample(threshold(normalize(map.view()).view(), thresh).view(), size);
                let png = out.join(format!("{name}_block{b}.png"));
                let raw = out.join(format!("{name}_block{b}.txt"));
                write_png_rgb(&png, &overlay(img, heat.view(), DEFAULT_ALPHA), size)?;
                write_map_text(&raw, map.view())?;
                written.push(ExportedMap { image: name.clone(), block: b, png, raw, map });
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_map_keeps_everything() {
        let m = Array2::from_elem((3, 3), 0.2);
        let t = threshold(normalize(m.view()).view(), 0.7);
        assert!(t.iter().all(|&v| v == 1.0));
        let img = vec![10u8; 4 * 4 * 3];
        let o = overlay(&img, upsample(t.view(), 4).view(), 0.5);
        assert!(o.chunks(3).all(|p| p == &o[0..3]));
    }

    #[test]
    fn threshold_extremes() {
        let m = array![[0.1, 0.4], [0.3, 0.2]];
        let n = normalize(m.view());
        assert_eq!(threshold(n.view(), 0.0), n);
        let top = threshold(n.view(), 1.0);
        assert_eq!(top.iter().filter(|&&v| v > 0.0).count(), 1);
        assert_eq!(top[[0, 1]], 1.0);
    }

    #[test]
    fn upsample_preserves_constants_and_range() {
        let m = array![[0.0, 1.0], [1.0, 0.0]];
        let u = upsample(m.view(), 8);
        assert_eq!(u.dim(), (8, 8));
        assert!(u.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(u[[0, 0]], 0.0);
        assert_eq!(u[[0, 7]], 1.0);
        assert!(upsample(Array2::from_elem((2, 2), 0.5).view(), 5).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn map_text_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = array![[0.123456789012345, 1e-9], [0.5, 2.0 / 3.0]];
        let p = dir.path().join("m.txt");
        write_map_text(&p, m.view()).unwrap();
        assert_eq!(read_map_text(&p).unwrap(), m);
    }
}
