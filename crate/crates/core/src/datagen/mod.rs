//! Synthetic multi-domain shape benchmark with a controllable shortcut.
//!
//! Each domain has its own background texture, foreground palette, stroke
//! style and cue corner. The class is the foreground shape. A small colour
//! patch in the domain's corner carries a cue that equals a domain-specific
//! function of the label with probability `shortcut`, and is uniform
//! otherwise. Because the label-to-cue mapping differs across domains, the
//! cue is predictive inside a domain but useless on an unseen one.

mod io;
pub mod render;

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{par, rng, Error, Real, Result};

pub use io::{load_dataset, read_png, write_dataset, Manifest, ManifestRow};

/// Largest number of domains with pairwise-distinct style recipes.
pub const MAX_DOMAINS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Gradient,
    Stripes,
    Dots,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stroke {
    Filled,
    /// Filled with a darker contour band.
    Bordered,
    Outline,
    Thick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub texture: Background,
    pub background: [[f64; 3]; 2],
    pub foreground: Vec<[f64; 3]>,
    pub stroke: Stroke,
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub cue_corner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    pub style: Style,
    /// Probability that the cue is the domain's mapped value of the label.
    pub shortcut: f64,
    /// The mapped cue is `(label + cue_offset) mod classes`.
    pub cue_offset: usize,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl DomainSpec {
    /// The fixed style recipe of domain `id`.
    pub fn recipe(id: usize, shortcut: f64, classes: usize) -> Result<Self> {
        if id >= MAX_DOMAINS {
            return Err(Error::Config(format!("at most {MAX_DOMAINS} domains are supported, got id {id}")));
        }
        if !(0.0..=1.0).contains(&shortcut) {
            return Err(Error::Config(format!("shortcut strength {shortcut} outside [0, 1]")));
        }
        let texture = [Background::Gradient, Background::Stripes, Background::Dots, Background::Noise][id % 4];
        let stroke = [Stroke::Filled, Stroke::Bordered, Stroke::Filled, Stroke::Bordered, Stroke::Outline, Stroke::Thick, Stroke::Outline, Stroke::Thick][id];
        let hue = id as f64 * 0.37;
        // light shapes on darker backgrounds everywhere; domains differ in
        // hue, texture, brightness and stroke
        let bv = 0.22 + 0.08 * (id % 3) as f64;
        let background = [hsv(hue, 0.35, bv), hsv(hue + 0.08, 0.5, bv * 0.8 + 0.1)];
        let foreground = (0..3).map(|k| hsv(hue + 0.5 + k as f64 / 3.0, 0.55, 0.95)).collect();
        Ok(Self {
            id,
            style: Style { texture, background, foreground, stroke, cue_corner: id % 4 },
            shortcut,
            cue_offset: (id * 3) % classes.max(1),
        })
    }

    /// The cue value paired with `label` when the shortcut is active.
    pub fn mapped_cue(&self, label: usize, classes: usize) -> usize {
        (label + self.cue_offset) % classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Dataset(format!("unknown split {s:?}"))),
        }
    }
}

/// One image with its metadata. `image` is interleaved RGB, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<u8>,
    pub label: usize,
    pub domain: usize,
    /// Cue value drawn at generation time; unknown for loaded data.
    pub cue: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub domain: usize,
    pub name: String,
    pub spec: Option<DomainSpec>,
    pub size: usize,
    pub classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DomainDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters of a generated benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub domains: usize,
    pub per_domain: usize,
    pub classes: usize,
    pub image_size: usize,
    pub shortcut: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { seed: 0, domains: 4, per_domain: 300, classes: 7, image_size: 32, shortcut: 0.9 }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains < 1 || self.domains > MAX_DOMAINS {
            return Err(Error::Config(format!("domains must be in 1..={MAX_DOMAINS}, got {}", self.domains)));
        }
        if self.classes < 2 || self.classes > render::SHAPES {
            return Err(Error::Config(format!("classes must be in 2..={}, got {}", render::SHAPES, self.classes)));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} is below 16", self.image_size)));
        }
        if self.per_domain < 10 {
            return Err(Error::Param(format!(
                "{} images per domain leave an empty validation split; need at least 10",
                self.per_domain
            )));
        }
        Ok(())
    }
}

/// Sizes of the train/val/test splits of `n` images: val and test take the
/// floor of 10% and 20%, train takes the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 5;
    (n - val - test, val, test)
}

/// Generates one domain.
pub fn generate_domain(config: &BenchmarkConfig, domain: usize) -> Result<DomainDataset> {
    config.validate()?;
    let spec = DomainSpec::recipe(domain, config.shortcut, config.classes)?;
    let n = config.per_domain;
    let z = config.classes;

    // labels cycle through the classes, so any contiguous block of
    // positions is class-balanced to within one
    let ordered: Vec<usize> = (0..n).map(|i| i % z).collect();
    let (_, n_val, n_test) = split_sizes(n);

    let size = config.image_size;
    let samples: Vec<Sample> = par::map_range(n, |i| {
        let label = ordered[i];
        let mut r = rng::stream(config.seed, &[rng::tag::RENDER, domain as u64, i as u64]);
        // cue draws come first and are always consumed
        let hit: f64 = r.random();
        let random_cue = r.random_range(0..z);
        let cue = if hit < spec.shortcut { spec.mapped_cue(label, z) } else { random_cue };
        let px = render::render(label, cue, &spec, size, &mut r);
        Sample { image: render::quantize(&px), label, domain, cue: Some(cue) }
    });

    let mut rest = samples;
    let mut test = rest.split_off(n_val);
    let train = test.split_off(n_test);
    let val = rest;

    Ok(DomainDataset { domain, name: format!("d{domain}"), spec: Some(spec), size, classes: z, train, val, test })
}

/// Generates every domain of the benchmark.
pub fn generate(config: &BenchmarkConfig) -> Result<Vec<DomainDataset>> {
    config.validate()?;
    (0..config.domains).map(|d| generate_domain(config, d)).collect()
}

/// SHA-256 over every split's labels and pixels, as hex.
pub fn fingerprint(data: &DomainDataset) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for split in Split::ALL {
        for s in data.split(split) {
            h.update((s.label as u64).to_le_bytes());
            h.update(&s.image);
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-channel normalisation applied when images become tensors.
pub const MEAN: f64 = 0.5;
pub const STD: f64 = 0.25;

/// Stacks images into an `N x 3 x H x W` tensor normalised with [`MEAN`] and [`STD`].
pub fn to_tensor<T: Real>(images: &[&[u8]], size: usize) -> Array4<T> {
    let mut x = Array4::zeros((images.len(), 3, size, size));
    for (b, img) in images.iter().enumerate() {
        for ((c, h, w), v) in x.index_axis_mut(ndarray::Axis(0), b).indexed_iter_mut() {
            *v = T::of((img[(h * size + w) * 3 + c] as f64 / 255.0 - MEAN) / STD);
        }
    }
    x
}

/// Reads the cue of a sample back from its pixels, given the corner used by
/// the sample's domain.
pub fn read_cue(sample: &Sample, size: usize, corner: usize, classes: usize) -> usize {
    render::nearest_cue(render::patch_mean(&sample.image, size, corner), classes)
}

/// Fits a cue-only classifier (majority label per cue value) on `train`
/// and reports its accuracy on `eval`. `corner` gives each domain's cue corner.
pub fn cue_probe_accuracy(train: &[&Sample], eval: &[&Sample], size: usize, classes: usize, corner: impl Fn(usize) -> usize) -> f64 {
    let mut counts = vec![vec![0usize; classes]; classes];
    for s in train {
        counts[read_cue(s, size, corner(s.domain), classes)][s.label] += 1;
    }
    let rule: Vec<usize> = counts
        .iter()
        .map(|row| row.iter().enumerate().max_by_key(|&(y, &c)| (c, std::cmp::Reverse(y))).map_or(0, |(y, _)| y))
        .collect();
    let hits = eval.iter().filter(|s| rule[read_cue(s, size, corner(s.domain), classes)] == s.label).count();
    hits as f64 / eval.len().max(1) as f64
}
