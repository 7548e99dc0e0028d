//! Layered run configuration: defaults, then a TOML file, then dotted
//! `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lirf::autoencoder::AeConfig;
use lirf::correction::CorrectionConfig;
use lirf::datasets::DatasetSpec;
use lirf::flow::FlowConfig;
use lirf::pipeline::{Ablation, AnchorMode, PipelineConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSection {
    pub iterations: usize,
    pub gen_batch: usize,
    pub ablation: Ablation,
    pub anchor: AnchorMode,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            iterations: p.iterations,
            gen_batch: p.gen_batch,
            ablation: p.ablation,
            anchor: p.anchor,
        }
    }
}

/// Every knob of every command. The global `seed` overwrites the per-module
/// seed fields; each module then derives its own stream from it by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub ae: AeConfig,
    pub flow: FlowConfig,
    pub correction: CorrectionConfig,
    pub pipeline: PipelineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetSpec::default(),
            ae: AeConfig::default(),
            flow: FlowConfig::default(),
            correction: CorrectionConfig::default(),
            pipeline: PipelineSection::default(),
        }
    }
}

impl RunConfig {
    /// Builds the resolved config. `overrides` are `dotted.key=value`
    /// strings applied in order; values parse as TOML, falling back to a
    /// bare string.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = Value::try_from(RunConfig::default())?;
        let mut touched: Vec<Vec<String>> = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let table: Table = text
                .parse()
                .with_context(|| format!("parsing {}", path.display()))?;
            collect_leaves(&table, &mut Vec::new(), &mut touched);
            merge(&mut root, Value::Table(table));
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{o}` is not of the form key=value"))?;
            let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
            set_path(&mut root, &path, parse_scalar(raw.trim()))?;
            touched.push(path);
        }
        let mut cfg: RunConfig = root
            .try_into()
            .map_err(|e| anyhow!("invalid configuration: {e}"))?;
        cfg.apply_seed();
        let resolved = Value::try_from(&cfg)?;
        for path in &touched {
            if lookup(&resolved, path).is_none() && !optional_leaf(path) {
                bail!("unknown configuration key `{}`", path.join("."));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        self.dataset.seed = self.seed;
        self.ae.seed = self.seed;
        self.flow.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.correction.validate()?;
        self.pipeline().validate()?;
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            iterations: self.pipeline.iterations,
            gen_batch: self.pipeline.gen_batch,
            correction: self.correction.clone(),
            flow: self.flow.clone(),
            ablation: self.pipeline.ablation,
            anchor: self.pipeline.anchor,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Keys whose unset value is omitted from the serialized config.
fn optional_leaf(path: &[String]) -> bool {
    matches!(
        path.iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .as_slice(),
        ["correction", "tau"]
            | [
                "dataset",
                "few_shot_per_class" | "source_path" | "labels_path" | "ambient_dim"
            ]
    )
}

fn parse_scalar(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| anyhow!("empty configuration key"))?;
    let mut cur = root;
    for p in parents {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| anyhow!("configuration key `{}` is not a section", path.join(".")))?;
        cur = table
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| anyhow!("configuration key `{}` is not a section", path.join(".")))?
        .insert(last.clone(), value);
    Ok(())
}

fn lookup<'a>(root: &'a Value, path: &[String]) -> Option<&'a Value> {
    path.iter().try_fold(root, |v, k| v.as_table()?.get(k))
}

fn collect_leaves(table: &Table, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    for (k, v) in table {
        prefix.push(k.clone());
        match v {
            Value::Table(t) => collect_leaves(t, prefix, out),
            _ => out.push(prefix.clone()),
        }
        prefix.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(
            &f,
            "seed = 4\ncorrection.lambda = 0.25\n[pipeline]\niterations = 3\n",
        )
        .unwrap();
        let cfg = RunConfig::resolve(Some(&f), &["correction.lambda=0.75".into()]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.correction.lambda, 0.75);
        assert_eq!(cfg.pipeline.iterations, 3);
        assert_eq!(cfg.ae.seed, 4);
        let cfg = RunConfig::resolve(Some(&f), &[]).unwrap();
        assert_eq!(cfg.correction.lambda, 0.25);
    }

    #[test]
    fn unknown_and_invalid_keys_fail() {
        assert!(RunConfig::resolve(None, &["correction.lamda=0.5".into()]).is_err());
        assert!(RunConfig::resolve(None, &["correction.lambda=2.0".into()]).is_err());
        assert!(RunConfig::resolve(None, &["dataset.kind=spiral".into()]).is_err());
        assert!(RunConfig::resolve(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn optional_keys_and_strings() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "correction.tau=0.3".into(),
                "dataset.kind=two_moons".into(),
                "pipeline.ablation=vanilla_fm".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.correction.tau, Some(0.3));
        assert_eq!(cfg.dataset.kind.to_string(), "two_moons");
        assert_eq!(cfg.pipeline().ablation, Ablation::VanillaFm);
    }
}
