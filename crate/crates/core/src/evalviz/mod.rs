//! Leave-one-domain-out evaluation, result tables, attention heatmaps and
//! the attention-bias report.

mod bias;
mod heatmap;

pub use bias::{
    bias_report, binomial_upper_tail, cosine_distance, final_block_maps, sign_test, BiasReport, ImageDivergence,
    PairDistance, SignTest,
};
pub use heatmap::{
    export_attention, normalize, overlay, read_map_text, threshold, upsample, viridis, write_map_text, write_png_rgb,
    ExportedMap, COLORMAP, DEFAULT_ALPHA, DEFAULT_THRESHOLD,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::datagen::{DomainDataset, Sample};
use crate::trainer::{evaluate, train_aggregated, train_specific, TrainConfig};
use crate::{Error, Real, Result};

/// Training recipes for the aggregated model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Classification loss only.
    Baseline,
    /// Classification plus the intra-model term.
    Intra,
    /// All four terms.
    I2adr,
    InterOnly,
    IntraDir,
    IntraDvr,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Baseline, Method::Intra, Method::I2adr, Method::InterOnly, Method::IntraDir, Method::IntraDvr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Intra => "intra",
            Method::I2adr => "i2adr",
            Method::InterOnly => "inter-only",
            Method::IntraDir => "intra+dir",
            Method::IntraDvr => "intra+dvr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; known: baseline, intra, i2adr, inter-only, intra+dir, intra+dvr")))
    }

    /// `(intra, dir, dvr)` switches.
    fn terms(self) -> (bool, bool, bool) {
        match self {
            Method::Baseline => (false, false, false),
            Method::Intra => (true, false, false),
            Method::I2adr => (true, true, true),
            Method::InterOnly => (false, true, true),
            Method::IntraDir => (true, true, false),
            Method::IntraDvr => (true, false, true),
        }
    }

    pub fn needs_specific(self) -> bool {
        let (_, d, v) = self.terms();
        d || v
    }

    /// `base` with the weights of disabled terms set to zero.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let (i, d, v) = self.terms();
        let mut c = base.clone();
        if !i {
            c.lambda_intra = 0.0;
        }
        if !d {
            c.lambda_dir = 0.0;
        }
        if !v {
            c.lambda_dvr = 0.0;
        }
        c
    }
}

/// Result of one held-out domain, seed and method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolRun {
    pub held_out: usize,
    pub sources: Vec<usize>,
    pub seed: u64,
    pub method: Method,
    /// Top-1 accuracy on the held-out test split, percent.
    pub accuracy: f64,
    /// Domain ids of every sample handed to training, for auditing.
    #[serde(skip)]
    pub trained_on: BTreeSet<usize>,
}

#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub domain_names: Vec<String>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub runs: Vec<ProtocolRun>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

impl ProtocolResult {
    fn accuracies(&self, method: Method, held_out: usize) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|&s| self.runs.iter().find(|r| r.method == method && r.held_out == held_out && r.seed == s))
            .map(|r| r.accuracy)
            .collect()
    }

    /// Mean and sample standard deviation over seeds for one cell.
    pub fn cell(&self, method: Method, held_out: usize) -> (f64, f64) {
        mean_std(&self.accuracies(method, held_out))
    }

    /// The `Avg.` column: per seed, the mean over held-out domains; then mean
    /// and standard deviation over seeds.
    pub fn average(&self, method: Method) -> (f64, f64) {
        let per_seed: Vec<f64> = self
            .seeds
            .iter()
            .map(|&s| {
                let v: Vec<f64> =
                    self.runs.iter().filter(|r| r.method == method && r.seed == s).map(|r| r.accuracy).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect();
        mean_std(&per_seed)
    }

    /// Methods as rows, held-out domains as columns, `Avg.` last.
    pub fn table(&self) -> String {
        let mut header = vec!["Method".to_string()];
        header.extend(self.domain_names.iter().cloned());
        header.push("Avg.".into());
        let mut rows = vec![header];
        for &m in &self.methods {
            let mut row = vec![m.name().to_string()];
            for d in 0..self.domain_names.len() {
                let (mu, sd) = self.cell(m, d);
                row.push(format!("{mu:.1} ± {sd:.1}"));
            }
            let (mu, sd) = self.average(m);
            row.push(format!("{mu:.1} ± {sd:.1}"));
            rows.push(row);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(v, &w)| format!("{v:>w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  "));
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }

    /// Table as CSV: one row per method with mean and std per domain and
    /// for the average.
    pub fn write_table_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["method".to_string()];
        for name in self.domain_names.iter().map(|s| s.as_str()).chain(["avg"]) {
            header.push(format!("{name}_mean"));
            header.push(format!("{name}_std"));
        }
        w.write_record(&header)?;
        for &m in &self.methods {
            let mut row = vec![m.name().to_string()];
            let cells = (0..self.domain_names.len()).map(|d| self.cell(m, d)).chain([self.average(m)]);
            for (mu, sd) in cells {
                row.push(mu.to_string());
                row.push(sd.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per run.
    pub fn write_runs_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["held_out", "seed", "method", "accuracy"])?;
        for r in &self.runs {
            w.write_record([self.domain_names[r.held_out].clone(), r.seed.to_string(), r.method.name().into(), r.accuracy.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn domains_of(sets: &[&DomainDataset]) -> BTreeSet<usize> {
    sets.iter()
        .flat_map(|d| d.train.iter().chain(&d.val))
        .map(|s: &Sample| s.domain)
        .collect()
}

/// Leave-one-domain-out: for every held-out domain, seed and method,
/// trains on the remaining domains and tests on the held-out test split.
/// Stage-1 models depend only on (seed, domain) and are trained once.
/// When `out` is given, every training run's metrics are written below it.
pub fn run_protocol<T: Real>(
    data: &[DomainDataset],
    methods: &[Method],
    seeds: &[u64],
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<ProtocolResult> {
    if data.len() < 2 {
        return Err(Error::Config(format!("leave-one-domain-out needs at least 2 domains, got {}", data.len())));
    }
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need at least one method and one seed".into()));
    }
    if data.len() < 3 && methods.iter().any(|m| m.needs_specific()) {
        return Err(Error::Config(
            "methods using the inter-model terms need at least 2 source domains, i.e. 3 domains in total".into(),
        ));
    }
    for (i, d) in data.iter().enumerate() {
        if d.domain != i {
            return Err(Error::Config(format!("domain {} is stored at position {i}", d.domain)));
        }
    }
    let write = |log: &crate::trainer::RunLog, rel: String| -> Result<()> {
        if let Some(root) = out {
            let dir = root.join(rel);
            std::fs::create_dir_all(&dir)?;
            log.write_metrics(&dir.join("metrics.csv"))?;
        }
        Ok(())
    };

    let need_specific = methods.iter().any(|m| m.needs_specific());
    let mut specific: BTreeMap<(u64, usize), Backbone<T>> = BTreeMap::new();
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut cfg = config.clone();
        cfg.seed = seed;
        if need_specific {
            for d in data {
                log::info!("seed {seed}: stage 1 on {}", d.name);
                let t = train_specific::<T>(d, &cfg)?;
                write(&t.log, format!("seed{seed}/specific_{}", d.name))?;
                specific.insert((seed, d.domain), t.model);
            }
        }
        for held in data {
            let sources: Vec<&DomainDataset> = data.iter().filter(|d| d.domain != held.domain).collect();
            let test: Vec<&Sample> = held.test.iter().collect();
            for &m in methods {
                let mc = m.config(&cfg);
                let frozen: BTreeMap<usize, Backbone<T>> = if m.needs_specific() {
                    sources.iter().map(|d| (d.domain, specific[&(seed, d.domain)].clone())).collect()
                } else {
                    BTreeMap::new()
                };
                log::info!("seed {seed}: {} with {} held out", m.name(), held.name);
                let t = train_aggregated::<T>(&sources, &frozen, &mc)?;
                write(&t.log, format!("seed{seed}/heldout_{}/{}", held.name, m.name()))?;
                let (accuracy, _) = evaluate(&t.model, &test)?;
                // the frozen models were each trained on their own domain only
                let mut trained_on = domains_of(&sources);
                trained_on.extend(frozen.keys());
                runs.push(ProtocolRun {
                    held_out: held.domain,
                    sources: sources.iter().map(|d| d.domain).collect(),
                    seed,
                    method: m,
                    accuracy,
                    trained_on,
                });
            }
        }
    }
    Ok(ProtocolResult { domain_names: data.iter().map(|d| d.name.clone()).collect(), methods: methods.to_vec(), seeds: seeds.to_vec(), runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(runs: &[(usize, u64, Method, f64)]) -> ProtocolResult {
        ProtocolResult {
            domain_names: vec!["a".into(), "b".into()],
            methods: vec![Method::Baseline, Method::I2adr],
            seeds: vec![0, 1],
            runs: runs
                .iter()
                .map(|&(h, s, m, a)| ProtocolRun { held_out: h, sources: vec![1 - h], seed: s, method: m, accuracy: a, trained_on: BTreeSet::new() })
                .collect(),
        }
    }

    #[test]
    fn table_layout_and_statistics() {
        let r = fake(&[
            (0, 0, Method::Baseline, 50.0),
            (0, 1, Method::Baseline, 60.0),
            (1, 0, Method::Baseline, 70.0),
            (1, 1, Method::Baseline, 80.0),
            (0, 0, Method::I2adr, 55.0),
            (0, 1, Method::I2adr, 55.0),
            (1, 0, Method::I2adr, 75.0),
            (1, 1, Method::I2adr, 75.0),
        ]);
        assert_eq!(r.cell(Method::Baseline, 0), (55.0, 50f64.sqrt()));
        assert_eq!(r.average(Method::Baseline), (65.0, 50f64.sqrt()));
        assert_eq!(r.average(Method::I2adr), (65.0, 0.0));
        let t = r.table();
        let header = t.lines().next().unwrap();
        assert!(header.trim_start().starts_with("Method"));
        assert!(header.trim_end().ends_with("Avg."));
        assert!(header.find(" a").unwrap() < header.find(" b").unwrap());
        assert_eq!(t.lines().count(), 4);
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("mixstyle").is_err());
        let c = Method::InterOnly.config(&TrainConfig::desk());
        assert_eq!((c.lambda_intra, c.lambda_dir, c.lambda_dvr), (0.0, 2.0, 1.0));
    }

    #[test]
    fn two_domains_reject_inter_methods() {
        let data = crate::datagen::generate(&crate::datagen::BenchmarkConfig {
            domains: 2,
            per_domain: 10,
            image_size: 16,
            ..Default::default()
        })
        .unwrap();
        let err = run_protocol::<f32>(&data, &[Method::I2adr], &[0], &TrainConfig::desk(), None).unwrap_err();
        assert!(err.to_string().contains("at least 2 source domains"), "{err}");
    }
}
