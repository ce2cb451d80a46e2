//! Training-time image augmentation on 8-bit RGB images.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: bool,
    pub crop: bool,
    pub jitter: bool,
    pub grayscale: bool,
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, crop: false, jitter: false, grayscale: false };
    pub const ALL: Augment = Augment { flip: true, crop: true, jitter: true, grayscale: true };

    pub fn any(&self) -> bool {
        self.flip || self.crop || self.jitter || self.grayscale
    }

    /// Returns an augmented copy of a `size x size` interleaved RGB image.
    /// Every random draw is made regardless of which transforms are enabled,
    /// so toggling one transform does not reshuffle the others.
    pub fn apply<R: Rng>(&self, image: &[u8], size: usize, rng: &mut R) -> Vec<u8> {
        let flip = rng.random_bool(0.5);
        let pad = (size / 8) as i64;
        let (dy, dx) = (rng.random_range(-pad..=pad), rng.random_range(-pad..=pad));
        let brightness: f64 = rng.random_range(0.8..1.2);
        let contrast: f64 = rng.random_range(0.8..1.2);
        let saturation: f64 = rng.random_range(0.8..1.2);
        let gray = rng.random_bool(0.1);
        if !self.any() {
            return image.to_vec();
        }

        let n = size as i64;
        let mut out = vec![0f64; image.len()];
        for y in 0..n {
            for x in 0..n {
                let (mut sy, mut sx) = (y, x);
                if self.crop {
                    // translate with edge replication
                    sy = (sy + dy).clamp(0, n - 1);
                    sx = (sx + dx).clamp(0, n - 1);
                }
                if self.flip && flip {
                    sx = n - 1 - sx;
                }
                let (src, dst) = (((sy * n + sx) * 3) as usize, ((y * n + x) * 3) as usize);
                for c in 0..3 {
                    out[dst + c] = image[src + c] as f64 / 255.0;
                }
            }
        }
        if self.jitter {
            let mean = out.iter().sum::<f64>() / out.len() as f64;
            for p in out.chunks_mut(3) {
                let luma = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                for v in p.iter_mut() {
                    let s = luma + (*v - luma) * saturation;
                    *v = ((s - mean) * contrast + mean) * brightness;
                }
            }
        }
        if self.grayscale && gray {
            for p in out.chunks_mut(3) {
                let luma = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                p.fill(luma);
            }
        }
        out.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}
