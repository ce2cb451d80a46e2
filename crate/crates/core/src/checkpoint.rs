//! Backbone checkpoints: little-endian `f64` weights in a binary file plus a
//! `key=value` text sidecar next to it (`<file>.meta`).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::nn::Params;
use crate::{rng, Error, Real, Result};

const MAGIC: &[u8; 8] = b"ATTDIV01";

/// Metadata stored in the sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config: BackboneConfig,
    /// `specific` or `aggregated`.
    pub stage: String,
    /// Domain the model was trained on; `None` for aggregated models.
    pub domain: Option<usize>,
    pub seed: u64,
    pub version: String,
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(config: BackboneConfig, stage: &str, domain: Option<usize>, seed: u64) -> Self {
        Self { config, stage: stage.into(), domain, seed, version: code_version(), extra: BTreeMap::new() }
    }

    fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let channels: Vec<String> = c.channels.iter().map(|v| v.to_string()).collect();
        s += &format!("channels={}\n", channels.join(","));
        s += &format!("input_size={}\nin_channels={}\nclasses={}\n", c.input_size, c.in_channels, c.classes);
        s += &format!("stage={}\n", self.stage);
        s += &format!("domain={}\n", self.domain.map_or("none".to_string(), |d| d.to_string()));
        s += &format!("seed={}\nversion={}\n", self.seed, self.version);
        for (k, v) in &self.extra {
            s += &format!("{k}={v}\n");
        }
        s
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let mut kv: BTreeMap<String, String> = parse_key_values(text).map_err(bad)?;
        let mut take = |k: &str| kv.remove(k).ok_or_else(|| bad(format!("sidecar lacks `{k}`")));
        let num = |k: &str, v: String| v.parse::<usize>().map_err(|_| bad(format!("`{k}` is not an integer: {v}")));
        let channels = take("channels")?
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|_| bad(format!("bad channel list entry {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let config = BackboneConfig {
            channels,
            input_size: num("input_size", take("input_size")?)?,
            in_channels: num("in_channels", take("in_channels")?)?,
            classes: num("classes", take("classes")?)?,
        };
        let stage = take("stage")?;
        let domain = match take("domain")?.as_str() {
            "none" => None,
            d => Some(num("domain", d.to_string())?),
        };
        let seed = take("seed")?.parse::<u64>().map_err(|_| bad("`seed` is not an integer".into()))?;
        let version = take("version")?;
        Ok(Self { config, stage, domain, seed, version, extra: kv })
    }
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value, got {line:?}", n + 1))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key `{}`", n + 1, k.trim()));
        }
    }
    Ok(out)
}

/// `git describe` of the working tree, or `unknown` outside a repository.
pub fn code_version() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

fn write_arrays<'a, T: Real>(out: &mut Vec<u8>, arrays: impl ExactSizeIterator<Item = ndarray::ArrayViewD<'a, T>>) {
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
        for &d in a.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in a.iter() {
            out.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
}

/// Serialises all parameters and buffers of `model`.
pub fn to_bytes<T: Real, M: Params<T>>(model: &M) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    write_arrays(&mut out, model.params().into_iter());
    write_arrays(&mut out, model.buffers().into_iter());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_arrays<T: Real>(cur: &mut Cursor<'_>, mut targets: Vec<ndarray::ArrayViewMutD<'_, T>>, what: &str) -> std::result::Result<(), String> {
    let n = cur.u32()? as usize;
    if n != targets.len() {
        return Err(format!("{n} {what} arrays stored, model has {}", targets.len()));
    }
    for (i, t) in targets.iter_mut().enumerate() {
        let nd = cur.u32()? as usize;
        let shape = (0..nd).map(|_| cur.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        if shape != t.shape() {
            return Err(format!("{what} {i}: stored shape {shape:?}, model expects {:?}", t.shape()));
        }
        for v in t.iter_mut() {
            *v = T::of(f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")));
        }
    }
    Ok(())
}

/// Restores parameters and buffers written by [`to_bytes`].
pub fn from_bytes<T: Real, M: Params<T>>(model: &mut M, bytes: &[u8]) -> std::result::Result<(), String> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err("not a checkpoint file".into());
    }
    read_arrays(&mut cur, model.params_mut(), "parameter")?;
    read_arrays(&mut cur, model.buffers_mut(), "buffer")?;
    if cur.pos != bytes.len() {
        return Err("trailing bytes after the last array".into());
    }
    Ok(())
}

pub fn save<T: Real>(path: &Path, model: &Backbone<T>, meta: &CheckpointMeta) -> Result<()> {
    if meta.config != *model.config() {
        return Err(Error::Config("checkpoint metadata does not describe the model being saved".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&to_bytes(model))?;
    fs::write(sidecar_path(path), meta.to_text())?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::Checkpoint { path: side.clone(), reason: e.to_string() })?;
    CheckpointMeta::parse(&text, &side)
}

pub fn load<T: Real>(path: &Path) -> Result<(Backbone<T>, CheckpointMeta)> {
    let meta = read_meta(path)?;
    // the initialisation is overwritten, the stream only has to be valid
    let mut model = Backbone::new(meta.config.clone(), &mut rng::stream(0, &[]))?;
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })?;
    from_bytes(&mut model, &bytes).map_err(|reason| Error::Checkpoint { path: path.to_path_buf(), reason })?;
    Ok((model, meta))
}

/// SHA-256 over every parameter and buffer value, as hex.
pub fn checksum<T: Real, M: Params<T>>(model: &M) -> String {
    let mut h = Sha256::new();
    h.update(to_bytes(model));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig { channels: vec![4, 8], input_size: 8, in_channels: 3, classes: 3 }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = Backbone::<f64>::new(small(), &mut rng::stream(3, &[1])).unwrap();
        // make the running statistics non-default
        let x = ndarray::Array4::from_shape_fn((2, 3, 8, 8), |(a, b, c, d)| (a + b * c + d) as f64 * 0.1);
        model.forward_train(x.view()).unwrap();
        let mut meta = CheckpointMeta::new(small(), "specific", Some(2), 9);
        meta.extra.insert("lambda_intra".into(), "0.005".into());
        save(&path, &model, &meta).unwrap();
        let (back, m2) = load::<f64>(&path).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(checksum(&back), checksum(&model));
        assert_eq!(back.forward_with_taps(x.view()).unwrap().logits, model.forward_with_taps(x.view()).unwrap().logits);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Backbone::<f32>::new(small(), &mut rng::stream(3, &[1])).unwrap();
        save(&path, &model, &CheckpointMeta::new(small(), "aggregated", None, 0)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint { .. })));
        fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(load::<f32>(&path).is_err());
    }

    #[test]
    fn key_value_parsing() {
        let kv = parse_key_values("a = 1\n# note\n\nb=x,y # trailing\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "x,y");
        assert!(parse_key_values("a=1\na=2").is_err());
        assert!(parse_key_values("novalue").is_err());
    }
}
