//! Experiment spec files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cemt_core::data::SyntheticConfig;
use cemt_core::trainer::{Method, Seeds, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::Table;

/// The built-in desk-scale spec, used when `--spec` is not given.
pub const DESK_SPEC: &str = include_str!("../../../specs/desk.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    pub seed: u64,
    pub count: usize,
    pub shape: Vec<usize>,
    pub dims: usize,
    pub n_test: usize,
    /// Extra generator knobs (noise, contrast, ...).
    #[serde(default)]
    pub generator: Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub out: PathBuf,
    pub dataset: DatasetBlock,
    /// Labeled-sample counts; each defines one split of the training pool.
    pub splits: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Overrides applied to every method's training configuration.
    #[serde(default)]
    pub train: Table,
    /// Per-method overrides keyed by method name, applied after `train`.
    #[serde(default)]
    pub overrides: Table,
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing spec {}", p.display()))
            }
            None => Self::parse(DESK_SPEC).context("parsing built-in desk spec"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.shape.len() != d.dims || !(2..=3).contains(&d.dims) {
            bail!("dataset shape {:?} does not match dims {}", d.shape, d.dims);
        }
        if d.n_test >= d.count {
            bail!("n_test {} leaves no training samples out of {}", d.n_test, d.count);
        }
        let n_train = d.count - d.n_test;
        for &s in &self.splits {
            if s == 0 || s > n_train {
                bail!("split with {s} labeled samples is outside 1..={n_train}");
            }
        }
        if self.methods.is_empty() || self.splits.is_empty() || self.seeds.is_empty() {
            bail!("methods, splits and seeds must all be non-empty");
        }
        for key in self.overrides.keys() {
            key.parse::<Method>()
                .with_context(|| format!("override block for unknown method '{key}'"))?;
        }
        self.generator()?;
        for &m in &self.methods {
            self.train_config(m, self.seeds[0], false)?;
        }
        Ok(())
    }

    pub fn generator(&self) -> Result<SyntheticConfig> {
        let mut table = Table::try_from(SyntheticConfig::default())?;
        merge(&mut table, &self.dataset.generator);
        table.insert("seed".into(), toml::Value::Integer(self.dataset.seed as i64));
        table.insert("count".into(), toml::Value::Integer(self.dataset.count as i64));
        table.insert(
            "shape".into(),
            toml::Value::Array(self.dataset.shape.iter().map(|&s| toml::Value::Integer(s as i64)).collect()),
        );
        Ok(table.try_into()?)
    }

    pub fn n_train(&self) -> usize {
        self.dataset.count - self.dataset.n_test
    }

    /// Training configuration of one (method, seed) cell.
    pub fn train_config(&self, method: Method, seed: u64, full_scale: bool) -> Result<TrainConfig> {
        let mut table = Table::try_from(TrainConfig::desk(method))?;
        merge(&mut table, &self.train);
        if let Some(toml::Value::Table(over)) = self.overrides.get(method.name()) {
            merge(&mut table, over);
        }
        let mut cfg: TrainConfig = table
            .try_into()
            .with_context(|| format!("training configuration for {method}"))?;
        cfg.method = method;
        cfg.seeds = Seeds::from_run_seed(self.dataset.seed, seed);
        if full_scale {
            cfg = cfg.full_scale();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_spec_is_valid() {
        let spec = ExperimentSpec::load(None).unwrap();
        assert_eq!(spec.splits, vec![8, 16]);
        assert_eq!(spec.methods.len(), 4);
        let cfg = spec.train_config(Method::MeanTeacher, 2, false).unwrap();
        assert_eq!(cfg.iterations, 1500);
        assert_eq!(cfg.seeds.split, 2);
        let full = spec.train_config(Method::MeanTeacher, 2, true).unwrap();
        assert_eq!((full.iterations, full.schedule_step), (6000, 2500));
    }

    #[test]
    fn overrides_merge_in_order() {
        let text = r#"
            out = "x"
            splits = [4]
            methods = ["mt", "ce-mt-b"]
            seeds = [0]
            [dataset]
            seed = 1
            count = 10
            shape = [32, 32]
            dims = 2
            n_test = 2
            [dataset.generator]
            noise_std = 0.1
            [train]
            iterations = 7
            batch = { patch_shape = [32, 32] }
            [overrides.ce-mt-b]
            iterations = 9
            ema = { alpha = 0.9 }
        "#;
        let spec = ExperimentSpec::parse(text).unwrap();
        let mt = spec.train_config(Method::MeanTeacher, 0, false).unwrap();
        let ce = spec.train_config(Method::CompetitiveBidirectional, 0, false).unwrap();
        assert_eq!(mt.iterations, 7);
        assert_eq!(ce.iterations, 9);
        assert_eq!(ce.ema.alpha, 0.9);
        assert_eq!(ce.batch.patch_shape, vec![32, 32]);
        assert_eq!(ce.batch.labeled, 2);
        assert_eq!(spec.generator().unwrap().noise_std, 0.1);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let base = ExperimentSpec::load(None).unwrap();
        let mut s = base.clone();
        s.splits = vec![0];
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.dataset.dims = 3;
        assert!(s.validate().is_err());
        let mut s = base;
        s.overrides.insert("nope".into(), toml::Value::Table(Table::new()));
        assert!(s.validate().is_err());
    }
}
