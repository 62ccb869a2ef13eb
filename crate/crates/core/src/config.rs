//! Experiment configuration: flat `section.key = value` text, overridable
//! per key, with a canonical echo of the resolved settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::adapt::{AdaptationConfig, PretrainConfig};
use crate::checkpoint::config_hash;
use crate::data::{synthesize_toy_domains, DatasetKind, DatasetSpec};
use crate::error::{config_err, Error, Result};
use crate::metrics::PairBudget;
use crate::mi::BoundCheckConfig;
use crate::models::ModelConfig;

/// Where the source and target images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the procedural domains.
    pub seed: u64,
    pub source_count: usize,
    pub target_count: usize,
    /// Image folders replacing the procedural domains when set.
    pub source_root: Option<PathBuf>,
    pub target_root: Option<PathBuf>,
    pub source_eval_fraction: f64,
    pub target_eval_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            source_count: 5000,
            target_count: 1000,
            source_root: None,
            target_root: None,
            source_eval_fraction: 0.2,
            target_eval_fraction: 0.5,
        }
    }
}

impl DataConfig {
    /// Source and target dataset specs at the model's resolution.
    pub fn specs(&self, model: &ModelConfig) -> (DatasetSpec, DatasetSpec) {
        let (mut s, mut t) =
            synthesize_toy_domains(self.seed, (self.source_count, self.target_count), model.resolution, model.channels);
        s.eval_fraction = self.source_eval_fraction;
        t.eval_fraction = self.target_eval_fraction;
        if let Some(root) = &self.source_root {
            s.kind = DatasetKind::ImageFolder { root: root.clone() };
        }
        if let Some(root) = &self.target_root {
            t.kind = DatasetKind::ImageFolder { root: root.clone() };
        }
        (s, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated images per evaluation.
    pub generated: usize,
    pub standard_pairs: usize,
    pub pair_budget: PairBudget,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { generated: 1000, standard_pairs: 1000, pair_budget: PairBudget::default(), seed: 7 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptationConfig,
    pub eval: EvalConfig,
    pub mi: BoundCheckConfig,
}

/// Flattens nested tables into dotted keys.
pub fn flatten(table: &Table) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, t: &Table, out: &mut BTreeMap<String, Value>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(inner) => walk(&key, inner, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Result<Table> {
    let mut root = Table::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            cur = match entry {
                Value::Table(t) => t,
                _ => return Err(config_err(format!("key '{key}' conflicts with a scalar at '{p}'"))),
            };
        }
        cur.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    Ok(root)
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    /// Parses config text and applies `key=value` overrides on top.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| config_err(format!("config parse: {}", e.message())))?;
        let Value::Table(defaults) = Value::try_from(ExperimentConfig::default()).expect("config serializes") else {
            unreachable!("config is a table")
        };
        let mut flat = flatten(&defaults);
        flat.extend(flatten(&table));
        for (k, v) in overrides {
            flat.insert(k.clone(), parse_value(v));
        }
        let cfg: ExperimentConfig = Value::Table(unflatten(&flat)?)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (an absent path means all defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Missing(p.to_path_buf()),
                _ => Error::Io(e),
            })?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adapt.validate()?;
        if self.eval.generated < 2 {
            return Err(config_err("eval.generated must be at least 2"));
        }
        if self.mi.trials < 2 || self.mi.hidden == 0 || self.mi.out_dim == 0 || self.mi.symbols == 0 {
            return Err(config_err("mi.trials must be at least 2 and critic widths positive"));
        }
        Ok(())
    }

    /// Sorted `key = value` lines of every resolved setting.
    pub fn canonical(&self) -> String {
        let value = Value::try_from(self).expect("config serializes");
        let Value::Table(t) = value else { unreachable!("config is a table") };
        flatten(&t).iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> [u8; 32] {
        config_hash(&self.canonical())
    }
}

/// Splits `key=value` override arguments.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    args.iter()
        .map(|a| {
            a.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| config_err(format!("override '{a}' is not key=value")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::Method;
    use crate::losses::NegativeSetup;

    #[test]
    fn dotted_keys_and_overrides() {
        let text = "model.resolution = 32\nadapt.method = \"cdc\"\nadapt.lambda1 = 1.5\neval.pair_budget = 0\n";
        let cfg = ExperimentConfig::parse(text, &[("adapt.seed".into(), "9".into())]).unwrap();
        assert_eq!(cfg.model.resolution, 32);
        assert_eq!(cfg.adapt.method, Method::Cdc);
        assert_eq!(cfg.adapt.lambda1, 1.5);
        assert_eq!(cfg.adapt.seed, 9);
        assert_eq!(cfg.eval.pair_budget, PairBudget::All);
        assert_eq!(cfg.adapt.shots, 10);
        let over = ExperimentConfig::parse(text, &[("adapt.method".into(), "dcl".into())]).unwrap();
        assert_eq!(over.adapt.method, Method::Dcl);
        let neg = ExperimentConfig::parse("adapt.negatives = \"target-side\"", &[]).unwrap();
        assert_eq!(neg.adapt.negatives, NegativeSetup::TargetSide);
        let nested = ExperimentConfig::parse("pretrain.classifier.epochs = 1", &[]).unwrap();
        let mut want = PretrainConfig::default().classifier;
        want.epochs = 1;
        assert_eq!(nested.pretrain.classifier, want);
    }

    #[test]
    fn rejects_unknown_keys_methods_and_types() {
        for bad in ["adapt.lamda1 = 2", "adapt.method = \"gan\"", "model.resolution = \"big\"", "model.resolution = 12", "x ="] {
            let err = ExperimentConfig::parse(bad, &[]).unwrap_err();
            assert_eq!(err.class(), "config", "{bad}: {err}");
        }
        let err = ExperimentConfig::parse("adapt.method = \"gan\"", &[]).unwrap_err().to_string();
        assert!(err.contains("dcl"), "{err}");
    }

    #[test]
    fn canonical_echo_reproduces_the_config() {
        let cfg = ExperimentConfig::parse("adapt.iterations = 12\ndata.source_root = \"/x\"", &[]).unwrap();
        let echo = cfg.canonical();
        assert!(echo.contains("adapt.iterations = 12\n"));
        let again = ExperimentConfig::parse(&echo, &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        let other = ExperimentConfig::parse("adapt.iterations = 13", &[]).unwrap();
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn override_syntax() {
        assert_eq!(parse_overrides(&["a.b=3".into()]).unwrap(), vec![("a.b".to_string(), "3".to_string())]);
        assert!(parse_overrides(&["nope".into()]).is_err());
    }
}
