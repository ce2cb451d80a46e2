use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Augment;
use crate::backbone::BackboneConfig;
use crate::checkpoint::parse_key_values;
use crate::intra_adr::{SceConfig, SceInit};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small, fast settings for a single CPU; not the published recipe.
    Desk,
    /// The published hyperparameters and full augmentation.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

/// Everything that controls a training run. Text form is flat `key=value`
/// with keys equal to the field names (backbone and augmentation fields are
/// flattened).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lambda_intra: f64,
    pub lambda_dir: f64,
    pub lambda_dvr: f64,
    pub topk: usize,
    pub scale: usize,
    pub sce_init: SceInit,
    pub instance_norm: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    /// 1-based blocks used by the inter-model terms; `None` means all.
    pub inter_blocks: Option<Vec<usize>>,
    pub backbone: BackboneConfig,
    pub augment: Augment,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            lambda_intra: 0.005,
            lambda_dir: 2.0,
            lambda_dvr: 1.0,
            topk: 10,
            scale: 2,
            sce_init: SceInit::He,
            instance_norm: true,
            epochs: 15,
            batch_size: 32,
            base_lr: 0.02,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
            inter_blocks: None,
            backbone: BackboneConfig { channels: vec![8, 16, 32, 64], input_size: 32, in_channels: 3, classes: 7 },
            augment: Augment { flip: false, crop: true, jitter: true, grayscale: false },
            precision: Precision::F32,
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            epochs: 150,
            batch_size: 64,
            base_lr: 0.008,
            weight_decay: 4e-4,
            backbone: BackboneConfig::default(),
            augment: Augment::ALL,
            ..Self::desk()
        }
    }

    pub fn sce(&self) -> SceConfig {
        SceConfig {
            scale: self.scale,
            topk: self.topk,
            kernel: None,
            padding: None,
            init: self.sce_init,
            instance_norm: self.instance_norm,
        }
    }

    pub fn uses_intra(&self) -> bool {
        self.lambda_intra > 0.0
    }

    pub fn uses_inter(&self) -> bool {
        self.lambda_dir > 0.0 || self.lambda_dvr > 0.0
    }

    /// 0-based inter-model blocks.
    pub fn inter_block_indices(&self) -> Vec<usize> {
        match &self.inter_blocks {
            None => (0..self.backbone.blocks()).collect(),
            Some(b) => b.iter().map(|&b| b - 1).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_intra", self.lambda_intra), ("lambda_dir", self.lambda_dir), ("lambda_dvr", self.lambda_dvr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch normalisation".into()));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("need base_lr > 0, weight_decay >= 0 and momentum in [0, 1)".into()));
        }
        self.backbone.validate()?;
        let blocks = self.backbone.blocks();
        if let Some(b) = &self.inter_blocks {
            if b.is_empty() || b.iter().any(|&i| i == 0 || i > blocks) {
                return Err(Error::Config(format!("inter_blocks must name blocks in 1..={blocks}, got {b:?}")));
            }
        }
        if self.uses_intra() {
            self.sce().validate(*self.backbone.channels.last().expect("validated non-empty"))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("preset", format!("{:?}", self.preset).to_lowercase());
        put("lambda_intra", self.lambda_intra.to_string());
        put("lambda_dir", self.lambda_dir.to_string());
        put("lambda_dvr", self.lambda_dvr.to_string());
        put("topk", self.topk.to_string());
        put("scale", self.scale.to_string());
        put("sce_init", format!("{:?}", self.sce_init).to_lowercase());
        put("instance_norm", self.instance_norm.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("base_lr", self.base_lr.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("momentum", self.momentum.to_string());
        put("seed", self.seed.to_string());
        put("inter_blocks", self.inter_blocks.as_deref().map_or("all".into(), list));
        put("channels", list(&self.backbone.channels));
        put("input_size", self.backbone.input_size.to_string());
        put("in_channels", self.backbone.in_channels.to_string());
        put("classes", self.backbone.classes.to_string());
        put("flip", self.augment.flip.to_string());
        put("crop", self.augment.crop.to_string());
        put("jitter", self.augment.jitter.to_string());
        put("grayscale", self.augment.grayscale.to_string());
        put("precision", if self.precision == Precision::F64 { "64" } else { "32" }.into());
        s
    }

    /// Parses `key=value` text. `preset` (if given) selects the starting
    /// values; every other key overrides one field. Unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text).map_err(Error::Config)?;
        Self::from_map(kv)
    }

    pub fn from_map(mut kv: BTreeMap<String, String>) -> Result<Self> {
        let mut c = match kv.remove("preset").as_deref() {
            None | Some("desk") => Self::desk(),
            Some("paper") => Self::paper(),
            Some(p) => return Err(Error::Config(format!("unknown preset {p:?}; expected desk or paper"))),
        };
        for (k, v) in kv {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets a single field from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("cannot parse {k}={v}")))
        }
        let list = |k: &str, v: &str| -> Result<Vec<usize>> { v.split(',').map(|x| p(k, x.trim())).collect() };
        match key {
            "lambda_intra" => self.lambda_intra = p(key, v)?,
            "lambda_dir" => self.lambda_dir = p(key, v)?,
            "lambda_dvr" => self.lambda_dvr = p(key, v)?,
            "topk" => self.topk = p(key, v)?,
            "scale" => self.scale = p(key, v)?,
            "sce_init" => {
                self.sce_init = match v {
                    "he" => SceInit::He,
                    "bilinear" => SceInit::Bilinear,
                    _ => return Err(Error::Config(format!("sce_init must be he or bilinear, got {v:?}"))),
                }
            }
            "instance_norm" => self.instance_norm = p(key, v)?,
            "epochs" => self.epochs = p(key, v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "base_lr" => self.base_lr = p(key, v)?,
            "weight_decay" => self.weight_decay = p(key, v)?,
            "momentum" => self.momentum = p(key, v)?,
            "seed" => self.seed = p(key, v)?,
            "inter_blocks" => self.inter_blocks = if v == "all" { None } else { Some(list(key, v)?) },
            "channels" => self.backbone.channels = list(key, v)?,
            "input_size" => self.backbone.input_size = p(key, v)?,
            "in_channels" => self.backbone.in_channels = p(key, v)?,
            "classes" => self.backbone.classes = p(key, v)?,
            "flip" => self.augment.flip = p(key, v)?,
            "crop" => self.augment.crop = p(key, v)?,
            "jitter" => self.augment.jitter = p(key, v)?,
            "grayscale" => self.augment.grayscale = p(key, v)?,
            "precision" => {
                self.precision = match v {
                    "32" | "f32" => Precision::F32,
                    "64" | "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision must be 32 or 64, got {v:?}"))),
                }
            }
            "preset" => return Err(Error::Config("preset can only be chosen once, before other keys".into())),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_lambdas() {
        for c in [TrainConfig::desk(), TrainConfig::paper()] {
            assert_eq!((c.lambda_intra, c.lambda_dir, c.lambda_dvr), (0.005, 2.0, 1.0));
            assert_eq!((c.topk, c.scale), (10, 2));
            c.validate().unwrap();
        }
        let p = TrainConfig::paper();
        assert_eq!((p.epochs, p.batch_size, p.base_lr, p.weight_decay), (150, 64, 0.008, 4e-4));
        assert_eq!(p.augment, Augment::ALL);
        assert!(!TrainConfig::desk().augment.grayscale);
    }

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::paper();
        c.inter_blocks = Some(vec![2, 4]);
        c.precision = Precision::F64;
        c.lambda_intra = 0.0;
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let c = TrainConfig::from_text("preset=paper\nepochs=3\nlambda_dvr=0\n").unwrap();
        assert_eq!((c.epochs, c.lambda_dvr, c.batch_size), (3, 0.0, 64));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(TrainConfig::from_text("lambda_dir=-1").is_err());
        assert!(TrainConfig::from_text("bogus=1").is_err());
        assert!(TrainConfig::from_text("inter_blocks=0,1").is_err());
        assert!(TrainConfig::from_text("topk=100").is_err());
        assert!(TrainConfig::from_text("preset=huge").is_err());
    }
}
