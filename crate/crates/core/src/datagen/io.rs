//! On-disk layout: `<root>/<domain>/<split>/<class>/<index>.png` plus a
//! tab-separated `manifest.tsv` and, for generated data, `recipe.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BenchmarkConfig, DomainDataset, DomainSpec, Sample, Split};
use crate::{par, Error, Result};

pub const MANIFEST: &str = "manifest.tsv";
pub const RECIPE: &str = "recipe.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub domain: String,
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: Option<BenchmarkConfig>,
    pub domains: Vec<DomainSpec>,
}

fn write_png(path: &Path, image: &[u8], size: usize) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, size as u32, size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(image)?;
    Ok(())
}

/// Decodes a PNG to interleaved 8-bit RGB, returning it with its side length.
pub fn read_png(path: &Path) -> Result<(Vec<u8>, usize)> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w != h {
        return Err(Error::Dataset(format!("{} is {w}x{h}; images must be square", path.display())));
    }
    let buf = &buf[..info.buffer_size()];
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::Png("palette expansion failed".into())),
    };
    Ok((rgb, w))
}

/// Writes datasets under `root` and returns the manifest rows.
pub fn write_dataset(root: &Path, data: &[DomainDataset], config: Option<&BenchmarkConfig>) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    let mut jobs: Vec<(PathBuf, &Sample, usize)> = Vec::new();
    for d in data {
        for split in Split::ALL {
            for (i, s) in d.split(split).iter().enumerate() {
                let rel = format!("{}/{}/{}/{i:05}.png", d.name, split.name(), s.label);
                let full = root.join(&rel);
                if let Some(parent) = full.parent() {
                    fs::create_dir_all(parent)?;
                }
                jobs.push((full, s, d.size));
                rows.push(ManifestRow { path: rel, label: s.label, domain: d.name.clone(), split: split.name().into() });
            }
        }
    }
    par::map_range(jobs.len(), |i| write_png(&jobs[i].0, &jobs[i].1.image, jobs[i].2))
        .into_iter()
        .collect::<Result<Vec<()>>>()?;

    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(root.join(MANIFEST))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    let manifest = Manifest { config: config.cloned(), domains: data.iter().filter_map(|d| d.spec.clone()).collect() };
    serde_json::to_writer_pretty(BufWriter::new(File::create(root.join(RECIPE))?), &manifest)?;
    Ok(rows)
}

fn scan_layout(root: &Path) -> Result<Vec<ManifestRow>> {
    let dirs = |p: &Path| -> Result<Vec<String>> {
        let mut v: Vec<String> = fs::read_dir(p)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        v.sort();
        Ok(v)
    };
    let mut rows = Vec::new();
    for domain in dirs(root)? {
        let classes: BTreeMap<String, usize> = {
            let mut names = std::collections::BTreeSet::new();
            for split in Split::ALL {
                let p = root.join(&domain).join(split.name());
                if p.is_dir() {
                    names.extend(dirs(&p)?);
                }
            }
            names.into_iter().enumerate().map(|(i, n)| (n, i)).collect()
        };
        for split in Split::ALL {
            for (class, &label) in &classes {
                let p = root.join(&domain).join(split.name()).join(class);
                if !p.is_dir() {
                    continue;
                }
                let mut files: Vec<String> = fs::read_dir(&p)?
                    .filter_map(|e| e.ok())
                    .filter_map(|e| e.file_name().into_string().ok())
                    .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
                    .collect();
                files.sort();
                for f in files {
                    rows.push(ManifestRow {
                        path: format!("{domain}/{}/{class}/{f}", split.name()),
                        label,
                        domain: domain.clone(),
                        split: split.name().into(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Loads a dataset written by [`write_dataset`], or any directory following
/// the same layout. Domains get ids in sorted name order.
pub fn load_dataset(root: &Path) -> Result<Vec<DomainDataset>> {
    let manifest_path = root.join(MANIFEST);
    let rows: Vec<ManifestRow> = if manifest_path.exists() {
        let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(&manifest_path)?;
        r.deserialize().collect::<std::result::Result<_, _>>()?
    } else {
        scan_layout(root)?
    };
    if rows.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", root.display())));
    }
    let recipe: Option<Manifest> = match File::open(root.join(RECIPE)) {
        Ok(f) => Some(serde_json::from_reader(BufReader::new(f))?),
        Err(_) => None,
    };

    let names: Vec<String> = rows.iter().map(|r| r.domain.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let classes = rows.iter().map(|r| r.label).max().unwrap_or(0) + 1;
    let images = par::map_range(rows.len(), |i| read_png(&root.join(&rows[i].path)));

    let mut out: Vec<DomainDataset> = names
        .iter()
        .enumerate()
        .map(|(id, name)| DomainDataset {
            domain: id,
            name: name.clone(),
            spec: recipe.as_ref().and_then(|m| m.domains.iter().find(|s| format!("d{}", s.id) == *name).cloned()),
            size: 0,
            classes,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    for (row, img) in rows.iter().zip(images) {
        let (image, size) = img?;
        let id = names.binary_search(&row.domain).expect("name collected above");
        let d = &mut out[id];
        if d.size == 0 {
            d.size = size;
        } else if d.size != size {
            return Err(Error::Dataset(format!("{} is {size}px but domain {} uses {}px", row.path, d.name, d.size)));
        }
        let sample = Sample { image, label: row.label, domain: id, cue: None };
        match Split::parse(&row.split)? {
            Split::Train => d.train.push(sample),
            Split::Val => d.val.push(sample),
            Split::Test => d.test.push(sample),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate;

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchmarkConfig { seed: 1, domains: 2, per_domain: 14, classes: 7, image_size: 16, shortcut: 0.9 };
        let data = generate(&cfg).unwrap();
        let rows = write_dataset(dir.path(), &data, Some(&cfg)).unwrap();
        assert_eq!(rows.len(), 28);
        let back = load_dataset(dir.path()).unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.spec, b.spec);
            assert_eq!(a.size, b.size);
            for split in Split::ALL {
                let (x, y) = (a.split(split), b.split(split));
                assert_eq!(x.len(), y.len());
                for (s, t) in x.iter().zip(y) {
                    assert_eq!((&s.image, s.label), (&t.image, t.label));
                }
            }
        }
        // the directory layout alone is enough to reload
        fs::remove_file(dir.path().join(MANIFEST)).unwrap();
        let scanned = load_dataset(dir.path()).unwrap();
        assert_eq!(scanned[1].test.len(), data[1].test.len());
    }

    #[test]
    fn missing_root_errors() {
        assert!(load_dataset(Path::new("/nonexistent/attdiv")).is_err());
    }
}
