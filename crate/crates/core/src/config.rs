//! Experiment configuration: a strict TOML document with `objective`,
//! `topology`, `trainer`, `init`, `diagnostics`, and `output` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::SliceMode;
use crate::engine::{Algorithm, TrainerConfig};
use crate::error::{LabError, Result};
use crate::objectives::{
    generate_points, load_csv_points, make_cubic_perturbed, make_quadratic, Dataset, DatasetKind, HuberKink, Mlp,
    Objective, Sharding, MAX_DENSE_DIM,
};
use crate::topology::{build_topology, shuffle_workers, GossipMatrix, TopologyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveFamily {
    Quadratic,
    CubicPerturbed,
    Mlp,
    Kink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub family: ObjectiveFamily,
    /// Parameter dimension (polynomial families).
    #[serde(default = "default_d")]
    pub d: usize,
    /// Number of samples.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cubic_scale")]
    pub cubic_scale: f64,
    /// Overrides the quartic confinement of `cubic_perturbed`.
    #[serde(default)]
    pub quartic: Option<f64>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetKind,
    /// CSV of `x1,...,xk,label` rows replacing the generated dataset.
    #[serde(default)]
    pub points_file: Option<PathBuf>,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default)]
    pub sharding: Sharding,
}

fn default_d() -> usize {
    5
}
fn default_n() -> usize {
    32
}
fn default_cubic_scale() -> f64 {
    1.0
}
fn default_hidden() -> usize {
    8
}
fn default_dataset() -> DatasetKind {
    DatasetKind::TwoMoons
}
fn default_width() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub m: usize,
    #[serde(default)]
    pub shuffle: bool,
    /// Adjacency list for `custom`.
    #[serde(default)]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSpec {
    /// Standard deviation of per-worker Gaussian offsets around the common
    /// initial point.
    pub scale: f64,
    pub seed: u64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { scale: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    pub mode: SliceMode,
    pub extent: f64,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSpec {
    /// Record cadence in steps.
    pub every: usize,
    /// Monte-Carlo draws for the average-direction sharpness (0 disables).
    pub sharpness_draws: usize,
    /// Write `Ξ` into each record (needs `d ≤ 200`).
    pub weight_diversity: bool,
    /// Compute the itemized implicit regularizer.
    pub regularizer: bool,
    /// Compute `Tr(HΞ)`.
    pub alignment: bool,
    pub landscape: Option<LandscapeSpec>,
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        Self {
            every: 10,
            sharpness_draws: 64,
            weight_diversity: false,
            regularizer: true,
            alignment: true,
            landscape: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub topology: Option<TopologySpec>,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn config_error(msg: impl Into<String>) -> LabError {
    LabError::Parse {
        what: "config",
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates. Relative file paths stay relative; resolve
    /// them with [`ExperimentConfig::resolve_paths`].
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.check_files()?;
        Ok(cfg)
    }

    /// Makes relative input file paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.objective.points_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.topology.as_mut().and_then(|t| t.file.as_mut()) {
            fix(p);
        }
    }

    pub fn check_files(&self) -> Result<()> {
        let files = [
            ("objective.points_file", self.objective.points_file.as_ref()),
            ("topology.file", self.topology.as_ref().and_then(|t| t.file.as_ref())),
        ];
        for (key, file) in files {
            if let Some(f) = file {
                if !f.is_file() {
                    return Err(config_error(format!("{key}: file {} does not exist", f.display())));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer
            .validate()
            .map_err(|e| config_error(format!("trainer.{}", e.to_string().trim_start_matches("invalid argument: "))))?;
        let o = &self.objective;
        if o.n == 0 {
            return Err(config_error("objective.n must be at least 1"));
        }
        if o.d == 0 {
            return Err(config_error("objective.d must be at least 1"));
        }
        if o.hidden == 0 {
            return Err(config_error("objective.hidden must be at least 1"));
        }
        if !(o.cubic_scale >= 0.0) {
            return Err(config_error("objective.cubic_scale must be nonnegative"));
        }
        if !(o.width > 0.0) {
            return Err(config_error("objective.width must be positive"));
        }
        if self.diagnostics.every == 0 {
            return Err(config_error("diagnostics.every must be at least 1"));
        }
        if !(self.init.scale >= 0.0) {
            return Err(config_error("init.scale must be nonnegative"));
        }
        match (&self.topology, self.trainer.algorithm) {
            (None, Algorithm::Dsgd | Algorithm::Csgd) => {
                return Err(config_error("topology section is required for dsgd and csgd"));
            }
            (Some(t), _) => {
                if t.m == 0 {
                    return Err(config_error("topology.m must be at least 1"));
                }
                if (t.kind == TopologyKind::Custom) != t.file.is_some() {
                    return Err(config_error("topology.file is required exactly when topology.kind = \"custom\""));
                }
            }
            _ => {}
        }
        if let Some(l) = &self.diagnostics.landscape {
            if l.resolution < 3 || !(l.extent >= 0.0) {
                return Err(config_error("diagnostics.landscape needs resolution >= 3 and extent >= 0"));
            }
        }
        Ok(())
    }

    /// Workers simulated: 1 for single-model algorithms.
    pub fn workers(&self) -> usize {
        match &self.topology {
            Some(t) if !self.trainer.algorithm.is_single_model() => t.m,
            _ => 1,
        }
    }

    /// Stable re-serialization used for hashing.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn build_topology(&self) -> Result<Option<GossipMatrix>> {
        let Some(t) = &self.topology else {
            return Ok(None);
        };
        if self.trainer.algorithm.is_single_model() {
            return Ok(None);
        }
        let p = match &t.file {
            Some(f) => {
                let p = GossipMatrix::from_adjacency_file(f)?;
                if p.m() != t.m {
                    return Err(config_error(format!("topology.m = {} but {} declares {} workers", t.m, f.display(), p.m())));
                }
                p
            }
            None => build_topology(t.kind, t.m)?,
        };
        Ok(Some(if t.shuffle {
            shuffle_workers(&p, self.trainer.seed)
        } else {
            p
        }))
    }

    pub fn build_objective(&self) -> Result<(Box<dyn Objective>, Dataset)> {
        let o = &self.objective;
        let (obj, ds): (Box<dyn Objective>, Dataset) = match o.family {
            ObjectiveFamily::Quadratic => {
                let (obj, ds) = make_quadratic(o.d, o.n, o.seed);
                (Box::new(obj), ds)
            }
            ObjectiveFamily::CubicPerturbed => {
                let (obj, ds) = make_cubic_perturbed(o.d, o.n, o.seed, o.cubic_scale);
                let obj = match o.quartic {
                    Some(q) => obj.with_quartic(q),
                    None => obj,
                };
                (Box::new(obj), ds)
            }
            ObjectiveFamily::Mlp => {
                let points = match &o.points_file {
                    Some(f) => load_csv_points(f, 4)?,
                    None => {
                        if o.n < 4 {
                            return Err(config_error("objective.n must be at least 4 for mlp"));
                        }
                        generate_points(o.dataset, o.n, o.seed)
                    }
                };
                let n = points.len();
                (Box::new(Mlp::new(points, o.hidden)), Dataset::new(n))
            }
            ObjectiveFamily::Kink => (Box::new(HuberKink::new(o.width)), Dataset::new(1)),
        };
        if self.diagnostics.weight_diversity && obj.dim() > MAX_DENSE_DIM {
            return Err(config_error(format!(
                "diagnostics.weight_diversity needs d <= {MAX_DENSE_DIM}, objective has {}",
                obj.dim()
            )));
        }
        let ds = ds.with_sharding(self.workers(), o.sharding, o.seed)?;
        Ok((obj, ds))
    }
}

/// Parses a sweep value: integer, float, boolean, then bare string.
pub fn parse_axis_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    toml::Value::String(raw.to_string())
}

/// Sets `key` in a parsed config document. `key` is either a dotted path
/// (`trainer.eta`) or a bare key present in exactly one section. The key
/// must already exist unless its section does and the path is dotted.
pub fn set_config_key(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<String> {
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else {
        if doc.contains_key(key) {
            vec![key.to_string()]
        } else {
            let owners: Vec<String> = doc
                .iter()
                .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
                .map(|(s, _)| s.clone())
                .collect();
            match owners.as_slice() {
                [one] => vec![one.clone(), key.to_string()],
                [] => return Err(config_error(format!("sweep axis `{key}` not found in config"))),
                _ => {
                    return Err(config_error(format!(
                        "sweep axis `{key}` is ambiguous; use one of {}",
                        owners.iter().map(|o| format!("{o}.{key}")).collect::<Vec<_>>().join(", ")
                    )))
                }
            }
        }
    };
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut table = doc;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_error(format!("`{p}` is not a section")))?;
    }
    // Integers are accepted where the existing key holds a float.
    let value = match (table.get(last.as_str()), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    table.insert(last.clone(), value);
    Ok(path.join("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[objective]
family = "cubic_perturbed"
d = 3
n = 12

[topology]
kind = "ring"
m = 4

[trainer]
eta = 0.05
steps = 20
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(cfg.trainer.local_batch, 1);
        assert_eq!(cfg.diagnostics.every, 10);
        assert_eq!(cfg.workers(), 4);
        let (obj, ds) = cfg.build_objective().unwrap();
        assert_eq!((obj.dim(), ds.len()), (3, 12));
        assert_eq!(cfg.build_topology().unwrap().unwrap().m(), 4);
        let again = ExperimentConfig::from_toml_str(&cfg.canonical_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_toml_str(&BASE.replace("eta = 0.05", "etta = 0.05")).unwrap_err();
        assert!(err.to_string().contains("etta"), "{err}");
        let err = ExperimentConfig::from_toml_str(&format!("{BASE}\n[extra]\nx = 1\n")).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_key() {
        let err = ExperimentConfig::from_toml_str(&BASE.replace("eta = 0.05", "eta = -0.1")).unwrap_err();
        assert!(err.to_string().contains("trainer.eta"), "{err}");
        let err = ExperimentConfig::from_toml_str(&format!("{BASE}\n[diagnostics]\nevery = 0\n")).unwrap_err();
        assert!(err.to_string().contains("diagnostics.every"), "{err}");
        let no_topo = BASE.replace("[topology]\nkind = \"ring\"\nm = 4\n", "");
        assert!(ExperimentConfig::from_toml_str(&no_topo).is_err());
        let sgd = no_topo.replace("eta = 0.05", "eta = 0.05\nalgorithm = \"sgd\"");
        assert_eq!(ExperimentConfig::from_toml_str(&sgd).unwrap().workers(), 1);
    }

    #[test]
    fn sweep_keys() {
        let mut doc: toml::Table = toml::from_str(BASE).unwrap();
        assert_eq!(set_config_key(&mut doc, "eta", parse_axis_value("1")).unwrap(), "trainer.eta");
        assert_eq!(doc["trainer"]["eta"], toml::Value::Float(1.0));
        set_config_key(&mut doc, "topology.kind", parse_axis_value("fully_connected")).unwrap();
        set_config_key(&mut doc, "trainer.local_batch", parse_axis_value("4")).unwrap();
        let cfg = ExperimentConfig::from_table(doc.clone()).unwrap();
        assert_eq!(cfg.topology.unwrap().kind, TopologyKind::FullyConnected);
        assert_eq!(cfg.trainer.local_batch, 4);
        assert!(set_config_key(&mut doc, "nonexistent", parse_axis_value("1")).is_err());
        let mut seeded: toml::Table = toml::from_str(&BASE.replace("n = 12", "n = 12\nseed = 1").replace("steps = 20", "steps = 20\nseed = 2")).unwrap();
        let err = set_config_key(&mut seeded, "seed", parse_axis_value("3")).unwrap_err();
        assert!(err.to_string().contains("ambiguous"), "{err}");
    }
}
