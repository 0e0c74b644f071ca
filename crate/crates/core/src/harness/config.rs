use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::presets::preset;
use super::HarnessError;
use crate::client::{MockBehavior, ModelEndpoint};
use crate::watermark::{Condition, WatermarkSpec};

/// One experiment, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Items sampled per dataset; all items when absent.
    #[serde(default)]
    pub sample: Option<usize>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    pub datasets: Vec<DatasetConfig>,
    pub endpoints: Vec<EndpointConfig>,
    pub grid: GridConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub manifest: PathBuf,
    /// Defaults to the manifest's file stem.
    #[serde(default)]
    pub name: Option<String>,
    /// Image root; defaults to the manifest's directory.
    #[serde(default)]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EndpointConfig {
    Http(ModelEndpoint),
    Mock {
        model_name: String,
        #[serde(flatten)]
        behavior: MockBehavior,
    },
}

impl EndpointConfig {
    pub fn model_name(&self) -> &str {
        match self {
            EndpointConfig::Http(e) => &e.model_name,
            EndpointConfig::Mock { model_name, .. } => model_name,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub conditions: Vec<WatermarkSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default)]
    pub jpeg_quality: Option<u8>,
}

impl ExperimentConfig {
    /// Parses a config file; relative paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.output_dir);
        for d in &mut self.datasets {
            abs(&mut d.manifest);
            if let Some(r) = &mut d.root {
                abs(r);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The clean baseline, then each watermark condition, then their defended
    /// copies. Duplicate conditions are dropped.
    pub fn conditions(&self) -> Result<Vec<Condition>, HarnessError> {
        let mut specs = Vec::new();
        let mut defense = self.defense.jpeg_quality;
        if let Some(name) = &self.grid.preset {
            let p = preset(name)?;
            specs.extend(p.conditions);
            if defense.is_none() {
                defense = p.jpeg_quality;
            }
        }
        specs.extend(self.grid.conditions.iter().cloned());

        let mut out = vec![Condition::clean()];
        out.extend(specs.into_iter().map(Condition::watermark));
        if let Some(q) = defense {
            let defended: Vec<Condition> = out.iter().cloned().map(|c| c.with_defense(q)).collect();
            out.extend(defended);
        }
        let mut seen = BTreeSet::new();
        out.retain(|c| seen.insert(c.id.clone()));
        Ok(out)
    }

    /// Checks everything that can be checked without touching the network.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.datasets.is_empty() {
            return bad("no datasets configured".into());
        }
        if self.endpoints.is_empty() {
            return bad("no endpoints configured".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        if self.grid.preset.is_none() && self.grid.conditions.is_empty() {
            return bad("condition grid is empty: set grid.preset or grid.conditions".into());
        }
        if let Some(q) = self.defense.jpeg_quality {
            if !(1..=100).contains(&q) {
                return bad(format!("defense.jpeg_quality must be in 1..=100, got {q}"));
            }
        }
        for spec in &self.grid.conditions {
            spec.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        let conditions = self.conditions()?;
        if conditions.len() < 2 {
            return bad("condition grid has no watermark conditions".into());
        }
        let mut names = BTreeSet::new();
        for ep in &self.endpoints {
            if !names.insert(ep.model_name().to_string()) {
                return bad(format!("duplicate model name {:?}", ep.model_name()));
            }
            if let EndpointConfig::Http(e) = ep {
                e.validate().map_err(HarnessError::Config)?;
            }
        }
        let mut ds_names = BTreeSet::new();
        for d in &self.datasets {
            if !d.manifest.is_file() {
                return bad(format!("manifest {} does not exist", d.manifest.display()));
            }
            if !ds_names.insert(d.name()) {
                return bad(format!("duplicate dataset name {:?}", d.name()));
            }
        }
        Ok(())
    }
}

impl DatasetConfig {
    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.manifest
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::watermark::{PositionMode, WatermarkContent};

    const SAMPLE: &str = r#"
output_dir = "runs/x"
seed = 7
sample = 10

[[datasets]]
manifest = "data/TextS.jsonl"

[[endpoints]]
kind = "http"
base_url = "https://api.example.com/v1"
model_name = "remote"
api_key_env = "EXAMPLE_KEY"

[[endpoints]]
kind = "mock"
model_name = "flip"
behavior = "flip-if-darkened"
threshold = 4.0
content_only = true
regions = [{ x0 = 0.2, y0 = 0.2, x1 = 0.3, y1 = 0.3 }]

[[endpoints]]
kind = "mock"
model_name = "oracle"
behavior = "always-correct"

[grid]
preset = "positions"

[[grid.conditions]]
content = { kind = "mask" }
position = "center"
opacity = 0.8

[defense]
jpeg_quality = 30
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = ExperimentConfig::from_toml(SAMPLE, Path::new("/base")).unwrap();
        assert_eq!(cfg.output_dir, Path::new("/base/runs/x"));
        assert_eq!(cfg.datasets[0].manifest, Path::new("/base/data/TextS.jsonl"));
        assert_eq!(cfg.datasets[0].name(), "TextS");
        assert_eq!(cfg.endpoints.len(), 3);
        assert!(matches!(&cfg.endpoints[1], EndpointConfig::Mock { behavior: MockBehavior::FlipIfDarkened { content_only: true, .. }, .. }));
        assert!(matches!(&cfg.endpoints[2], EndpointConfig::Mock { behavior: MockBehavior::AlwaysCorrect, .. }));
        let conds = cfg.conditions().unwrap();
        // clean + 3 positions + mask, each also defended
        assert_eq!(conds.len(), 10);
        assert!(conds[0].is_clean());
        assert_eq!(conds[4].spec.as_ref().unwrap().content, WatermarkContent::Mask);
        assert!(conds[5..].iter().all(|c| c.jpeg_quality == Some(30)));
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_toml(SAMPLE, dir.path()).unwrap();
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(m)) if m.contains("does not exist")));
        std::fs::create_dir_all(dir.path().join("data")).unwrap();
        std::fs::write(dir.path().join("data/TextS.jsonl"), "").unwrap();
        cfg.validate().unwrap();

        let mut c = cfg.clone();
        c.grid = GridConfig::default();
        assert!(c.validate().is_err());
        let mut c = cfg.clone();
        c.endpoints.push(c.endpoints[1].clone());
        assert!(matches!(c.validate(), Err(HarnessError::Config(m)) if m.contains("duplicate model")));
        let mut c = cfg.clone();
        c.grid.conditions.push(WatermarkSpec::new(WatermarkContent::Mask, PositionMode::Center).with_opacity(2.0));
        assert!(c.validate().is_err());
        cfg.grid.preset = Some("nope".into());
        assert!(matches!(cfg.validate(), Err(HarnessError::UnknownPreset(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = SAMPLE.replace("seed = 7", "seed = 7\nsede = 8");
        assert!(ExperimentConfig::from_toml(&text, Path::new("/")).is_err());
    }
}
