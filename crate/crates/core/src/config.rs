//! INI-style run configuration: `[data]`, `[network]`, `[training]`
//! sections with `key = value` lines. Unknown keys are rejected so typos
//! surface instead of silently using defaults.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{DueError, Result};
use crate::networks::{Activation, ModelKind};

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub mesh: Option<PathBuf>,
    /// Project nodal data onto this many sine modes before learning.
    pub basis_modes: Option<usize>,
    /// Restrict to these component names (partial observation).
    pub components: Option<Vec<String>>,
    pub memory: usize,
    pub multistep: usize,
    pub bursts_per_traj: usize,
    pub noise: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub lag_tol: f64,
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub kind: ModelKind,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub latent_nodes: usize,
    pub gate_depth: usize,
    pub gate_width: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub lambda: f64,
    pub q: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
}

fn bad(line: usize, msg: impl Into<String>) -> DueError {
    DueError::Config(format!("line {}: {}", line, msg.into()))
}

struct Section {
    values: HashMap<String, (usize, String)>,
    name: String,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key).map(|(_, v)| v)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.values.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| bad(line, format!("bad value {:?} for key {}", v, key))),
        }
    }

    fn require<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.parse(key)?.ok_or_else(|| {
            DueError::Config(format!("section [{}] is missing key {}", self.name, key))
        })
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.values.into_iter().next() {
            return Err(bad(line, format!("unknown key {:?} in [{}]", key, self.name)));
        }
        Ok(())
    }
}

fn split_sections(text: &str) -> Result<HashMap<String, Section>> {
    let mut sections: HashMap<String, Section> = HashMap::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            if !matches!(name.as_str(), "data" | "network" | "training") {
                return Err(bad(lineno, format!("unknown section [{}]", name)));
            }
            sections.entry(name.clone()).or_insert_with(|| Section {
                values: HashMap::new(),
                name: name.clone(),
            });
            current = Some(name);
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(lineno, format!("expected `key = value`, got {:?}", line)))?;
        let section = current
            .as_ref()
            .ok_or_else(|| bad(lineno, "key before any [section] header"))?;
        let entry = sections.get_mut(section).unwrap();
        let key = k.trim().to_string();
        if entry.values.contains_key(&key) {
            return Err(bad(lineno, format!("duplicate key {:?}", key)));
        }
        entry
            .values
            .insert(key, (lineno, v.trim().to_string()));
    }
    Ok(sections)
}

/// Parse a config file body. Relative paths resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<Config> {
    let mut sections = split_sections(text)?;
    let mut data = sections
        .remove("data")
        .ok_or_else(|| DueError::Config("missing [data] section".into()))?;
    let mut network = sections
        .remove("network")
        .ok_or_else(|| DueError::Config("missing [network] section".into()))?;
    let mut training = sections
        .remove("training")
        .ok_or_else(|| DueError::Config("missing [training] section".into()))?;

    let manifest = base_dir.join(
        data.take("manifest")
            .ok_or_else(|| DueError::Config("section [data] is missing key manifest".into()))?,
    );
    let mesh = data.take("mesh").map(|m| base_dir.join(m));
    let components = data
        .take("components")
        .map(|s| s.split(',').map(|c| c.trim().to_string()).collect());
    let data_cfg = DataConfig {
        manifest,
        mesh,
        basis_modes: data.parse("basis_modes")?,
        components,
        memory: data.parse("memory")?.unwrap_or(0),
        multistep: data.parse("multistep")?.unwrap_or(0),
        bursts_per_traj: data.parse("bursts_per_traj")?.unwrap_or(10),
        noise: data.parse("noise")?.unwrap_or(0.0),
        test_fraction: data.parse("test_fraction")?.unwrap_or(0.0),
        split_seed: data.parse("split_seed")?.unwrap_or(0),
        lag_tol: data.parse("lag_tol")?.unwrap_or(1e-9),
    };
    data.finish()?;

    let kind = ModelKind::parse(
        &network
            .take("kind")
            .ok_or_else(|| DueError::Config("section [network] is missing key kind".into()))?,
    )?;
    let activation = match network.take("activation") {
        Some(a) => Activation::parse(&a)?,
        None => Activation::Gelu,
    };
    let network_cfg = NetworkConfig {
        kind,
        depth: network.parse("depth")?.unwrap_or(3),
        width: network.require("width")?,
        activation,
        latent_nodes: network.parse("latent_nodes")?.unwrap_or(0),
        gate_depth: network.parse("gate_depth")?.unwrap_or(1),
        gate_width: network.parse("gate_width")?.unwrap_or(20),
    };
    network.finish()?;

    let training_cfg = TrainingConfig {
        epochs: training.require("epochs")?,
        batch: training.require("batch")?,
        lr: training.parse("lr")?.unwrap_or(1e-3),
        lr_min: training.parse("lr_min")?.unwrap_or(0.0),
        lambda: training.parse("lambda")?.unwrap_or(0.0),
        q: training.parse("q")?.unwrap_or(1),
        seed: training.parse("seed")?.unwrap_or(0),
    };
    training.finish()?;

    Ok(Config {
        data: data_cfg,
        network: network_cfg,
        training: training_cfg,
    })
}

/// The resolved configuration, serialized so that re-ingesting it reproduces
/// the run.
pub fn config_echo(cfg: &Config) -> String {
    let mut out = String::from("[data]\n");
    out.push_str(&format!("manifest = {}\n", cfg.data.manifest.display()));
    if let Some(m) = &cfg.data.mesh {
        out.push_str(&format!("mesh = {}\n", m.display()));
    }
    if let Some(p) = cfg.data.basis_modes {
        out.push_str(&format!("basis_modes = {}\n", p));
    }
    if let Some(c) = &cfg.data.components {
        out.push_str(&format!("components = {}\n", c.join(",")));
    }
    out.push_str(&format!("memory = {}\n", cfg.data.memory));
    out.push_str(&format!("multistep = {}\n", cfg.data.multistep));
    out.push_str(&format!("bursts_per_traj = {}\n", cfg.data.bursts_per_traj));
    out.push_str(&format!("noise = {}\n", cfg.data.noise));
    out.push_str(&format!("test_fraction = {}\n", cfg.data.test_fraction));
    out.push_str(&format!("split_seed = {}\n", cfg.data.split_seed));
    out.push_str(&format!("lag_tol = {}\n", cfg.data.lag_tol));
    out.push_str("\n[network]\n");
    out.push_str(&format!("kind = {}\n", cfg.network.kind.name()));
    out.push_str(&format!("depth = {}\n", cfg.network.depth));
    out.push_str(&format!("width = {}\n", cfg.network.width));
    out.push_str(&format!("activation = {}\n", cfg.network.activation.name()));
    if cfg.network.kind == ModelKind::PitResNet {
        out.push_str(&format!("latent_nodes = {}\n", cfg.network.latent_nodes));
    }
    if cfg.network.kind == ModelKind::DualOsgNet {
        out.push_str(&format!("gate_depth = {}\n", cfg.network.gate_depth));
        out.push_str(&format!("gate_width = {}\n", cfg.network.gate_width));
    }
    out.push_str("\n[training]\n");
    out.push_str(&format!("epochs = {}\n", cfg.training.epochs));
    out.push_str(&format!("batch = {}\n", cfg.training.batch));
    out.push_str(&format!("lr = {}\n", cfg.training.lr));
    out.push_str(&format!("lr_min = {}\n", cfg.training.lr_min));
    out.push_str(&format!("lambda = {}\n", cfg.training.lambda));
    out.push_str(&format!("q = {}\n", cfg.training.q));
    out.push_str(&format!("seed = {}\n", cfg.training.seed));
    out
}
