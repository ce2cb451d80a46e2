//! Anti-aliased rasterisation of the synthetic images.
//!
//! Everything is computed in `f64` on a fixed sample grid and quantised to
//! 8-bit at the end, so a given random stream always yields the same bytes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Background, DomainSpec, Stroke};

pub type Rgb = [f64; 3];

/// Number of foreground shapes; one per class.
pub const SHAPES: usize = 7;

/// Colours used for the shortcut cue patch, one per cue value.
pub const CUE_PALETTE: [Rgb; 10] = [
    [0.95, 0.10, 0.10],
    [0.10, 0.85, 0.15],
    [0.10, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.10, 0.90],
    [0.10, 0.90, 0.90],
    [0.98, 0.55, 0.05],
    [0.55, 0.25, 0.05],
    [0.50, 0.50, 0.50],
    [0.05, 0.05, 0.05],
];

/// Signed distance (negative inside) from `(x, y)` to shape `kind` centred at
/// the origin with nominal radius `r`.
fn shape_sdf(kind: usize, x: f64, y: f64, r: f64) -> f64 {
    match kind % SHAPES {
        // disk
        0 => (x * x + y * y).sqrt() - r,
        // square
        1 => {
            let s = r * 0.85;
            let (dx, dy) = (x.abs() - s, y.abs() - s);
            let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
            outside + dx.max(dy).min(0.0)
        }
        // triangle (pointing up), intersection of three half-planes
        2 => {
            let k = 3f64.sqrt() / 2.0;
            [(0.0, 1.0), (k, -0.5), (-k, -0.5)]
                .iter()
                .map(|&(nx, ny)| nx * x + ny * y - r * 0.6)
                .fold(f64::MIN, f64::max)
        }
        // plus
        3 => {
            let (a, b) = (r, r * 0.32);
            let bar = |u: f64, v: f64| {
                let (dx, dy) = (u.abs() - a, v.abs() - b);
                (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt() + dx.max(dy).min(0.0)
            };
            bar(x, y).min(bar(y, x))
        }
        // ring
        4 => ((x * x + y * y).sqrt() - r * 0.75).abs() - r * 0.25,
        // diamond
        5 => (x.abs() + y.abs() - r * 1.1) / std::f64::consts::SQRT_2,
        // horizontal bar pair
        _ => {
            let bar = |v: f64| {
                let (dx, dy) = (x.abs() - r, (y - v).abs() - r * 0.22);
                (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt() + dx.max(dy).min(0.0)
            };
            bar(-r * 0.5).min(bar(r * 0.5))
        }
    }
}

fn coverage(sdf: f64, pixel: f64) -> f64 {
    (0.5 - sdf / pixel).clamp(0.0, 1.0)
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn background<R: Rng>(spec: &DomainSpec, size: usize, rng: &mut R) -> Vec<Rgb> {
    let st = &spec.style;
    let (c0, c1) = (st.background[0], st.background[1]);
    let n = size as f64;
    let mut px = vec![[0.0; 3]; size * size];
    match st.texture {
        Background::Gradient => {
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (ca, sa) = (ang.cos(), ang.sin());
            for (i, p) in px.iter_mut().enumerate() {
                let (x, y) = ((i % size) as f64 / n - 0.5, (i / size) as f64 / n - 0.5);
                *p = lerp(c0, c1, (0.5 + (x * ca + y * sa) * 0.9).clamp(0.0, 1.0));
            }
        }
        Background::Stripes => {
            let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let period: f64 = rng.random_range(0.14..0.25);
            let phase: f64 = rng.random_range(0.0..1.0);
            let (ca, sa) = (ang.cos(), ang.sin());
            for (i, p) in px.iter_mut().enumerate() {
                let (x, y) = ((i % size) as f64 / n, (i / size) as f64 / n);
                let t = 0.5 + 0.5 * (std::f64::consts::TAU * ((x * ca + y * sa) / period + phase)).sin();
                *p = lerp(c0, c1, t);
            }
        }
        Background::Dots => {
            let period: f64 = rng.random_range(0.16..0.24);
            let (ox, oy): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            for (i, p) in px.iter_mut().enumerate() {
                let (x, y) = ((i % size) as f64 / n / period + ox, (i / size) as f64 / n / period + oy);
                let (fx, fy) = (x.fract() - 0.5, y.fract() - 0.5);
                let d = (fx * fx + fy * fy).sqrt() - 0.28;
                *p = lerp(c0, c1, coverage(d * period * n, 1.0));
            }
        }
        Background::Noise => {
            // low-frequency value noise on a 5x5 lattice, bilinearly interpolated
            let g = 5;
            let lattice: Vec<f64> = (0..g * g).map(|_| rng.random_range(0.0..1.0)).collect();
            for (i, p) in px.iter_mut().enumerate() {
                let (x, y) = ((i % size) as f64 / n * (g - 1) as f64, (i / size) as f64 / n * (g - 1) as f64);
                let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(g - 1), (y0 + 1).min(g - 1));
                let (tx, ty) = (x - x0 as f64, y - y0 as f64);
                let top = lattice[y0 * g + x0] * (1.0 - tx) + lattice[y0 * g + x1] * tx;
                let bot = lattice[y1 * g + x0] * (1.0 - tx) + lattice[y1 * g + x1] * tx;
                *p = lerp(c0, c1, top * (1.0 - ty) + bot * ty);
            }
        }
    }
    px
}

/// Top-left pixel of the square cue patch for a domain's corner.
pub fn cue_origin(corner: usize, size: usize) -> (usize, usize) {
    let patch = cue_patch_size(size);
    let m = size / 32;
    let far = size - patch - m;
    match corner % 4 {
        0 => (m, m),
        1 => (m, far),
        2 => (far, m),
        _ => (far, far),
    }
}

pub fn cue_patch_size(size: usize) -> usize {
    (size / 4).max(2)
}

/// Renders one `size x size` RGB image (row-major, interleaved) in `[0, 1]`.
///
/// The random stream is consumed identically for every shortcut strength, so
/// changing only `spec.shortcut` changes only the cue colour.
pub fn render<R: Rng>(class: usize, cue: usize, spec: &DomainSpec, size: usize, rng: &mut R) -> Vec<Rgb> {
    let n = size as f64;
    let mut px = background(spec, size, rng);
    let jitter: f64 = rng.random_range(0.9..1.1);
    for p in px.iter_mut() {
        for v in p.iter_mut() {
            *v = (*v * jitter).clamp(0.0, 1.0);
        }
    }

    // foreground shape
    let st = &spec.style;
    let colour = st.foreground[rng.random_range(0..st.foreground.len())];
    let r = n * rng.random_range(0.19..0.25);
    let (cx, cy) = (n * (0.5 + rng.random_range(-0.07..0.07)), n * (0.5 + rng.random_range(-0.07..0.07)));
    let rot: f64 = rng.random_range(-0.35..0.35);
    let (cr, sr) = (rot.cos(), rot.sin());
    for (i, p) in px.iter_mut().enumerate() {
        let (x, y) = ((i % size) as f64 + 0.5 - cx, (i / size) as f64 + 0.5 - cy);
        let (u, v) = (cr * x + sr * y, -sr * x + cr * y);
        let d = shape_sdf(class, u, v, r);
        *p = match st.stroke {
            Stroke::Filled => lerp(*p, colour, coverage(d, 1.0)),
            Stroke::Bordered => {
                let filled = lerp(*p, colour, coverage(d, 1.0));
                let band = coverage(d.abs() - n * 0.03, 1.0);
                lerp(filled, colour.map(|c| c * 0.4), band)
            }
            Stroke::Outline => lerp(*p, colour, coverage(d.abs() - n * 0.0225, 1.0)),
            Stroke::Thick => lerp(*p, colour, coverage(d.abs() - n * 0.045, 1.0)),
        };
    }

    // shortcut cue
    let patch = cue_patch_size(size);
    let (oy, ox) = cue_origin(st.cue_corner, size);
    let cue_colour = CUE_PALETTE[cue % CUE_PALETTE.len()];
    for yy in oy..oy + patch {
        for xx in ox..ox + patch {
            px[yy * size + xx] = cue_colour;
        }
    }

    // sensor noise
    let noise = Normal::new(0.0, 0.02).expect("valid");
    for p in px.iter_mut() {
        for v in p.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    px
}

/// Quantises `[0, 1]` RGB to interleaved 8-bit.
pub fn quantize(px: &[Rgb]) -> Vec<u8> {
    px.iter()
        .flat_map(|p| p.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        .collect()
}

/// Mean colour of the cue patch of an interleaved 8-bit image.
pub fn patch_mean(image: &[u8], size: usize, corner: usize) -> Rgb {
    let patch = cue_patch_size(size);
    let (oy, ox) = cue_origin(corner, size);
    let mut acc = [0.0; 3];
    for yy in oy..oy + patch {
        for xx in ox..ox + patch {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += image[(yy * size + xx) * 3 + c] as f64 / 255.0;
            }
        }
    }
    let k = (patch * patch) as f64;
    acc.map(|a| a / k)
}

/// Index of the nearest cue palette colour among the first `values` entries.
pub fn nearest_cue(rgb: Rgb, values: usize) -> usize {
    (0..values.min(CUE_PALETTE.len()))
        .min_by(|&a, &b| {
            let d = |c: usize| (0..3).map(|i| (CUE_PALETTE[c][i] - rgb[i]).powi(2)).sum::<f64>();
            d(a).partial_cmp(&d(b)).unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap_or(0)
}
