//! Layered run configuration: preset defaults, then the config file, then
//! `--seed`, then `key=value` overrides.

use std::path::Path;

use anyhow::{Context, Result};
use mpfer_core::mpf::PipelineConfig;
use mpfer_core::scene::{SceneSpec, TextureKind};
use mpfer_core::training::{ModelKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::InputError;

/// Camera rig written by `make-scene`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigConfig {
    pub cols: usize,
    pub rows: usize,
    /// Camera spacing, meters.
    pub spacing: f64,
    pub width: usize,
    pub height: usize,
    pub half_fov_tan: f64,
    /// Views marked as held-out render targets.
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Architecture used when training or when no checkpoint is given.
    pub kind: ModelKind,
    /// Channels between the two single-frame Unets.
    pub frame_features: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub gains: Vec<u32>,
    /// Border excluded from metrics; 16 for synthesis and 0 for denoising
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<usize>,
}

/// Fully resolved configuration. Every seed in the sections follows
/// `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub scene: SceneSpec,
    pub rig: RigConfig,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Keys derived from other keys; setting them directly is an error.
const DERIVED: [&str; 2] = ["scene.seed", "train.seed"];

impl Config {
    fn defaults(preset: &str) -> Result<Config> {
        let pipeline = PipelineConfig::preset(preset).map_err(|e| InputError::new(e.to_string()))?;
        Ok(Config {
            seed: 0,
            scene: SceneSpec::new(3, 1.5, 18.0, TextureKind::PerlinLike, 0),
            rig: RigConfig {
                cols: 4,
                rows: 2,
                spacing: 0.05,
                width: 96,
                height: 96,
                half_fov_tan: 0.5,
                targets: Vec::new(),
            },
            model: ModelConfig {
                kind: ModelKind::Mpfer,
                frame_features: 16,
            },
            pipeline,
            train: TrainConfig::desk(2000, 0),
            eval: EvalConfig {
                gains: mpfer_core::training::DEFAULT_GAINS.to_vec(),
                crop: None,
            },
        })
    }

    pub fn resolve(preset: &str, file: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<Config> {
        let mut root = match Value::try_from(Config::defaults(preset)?)? {
            Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        // the drop step tracks the step count unless set explicitly
        table_mut(&mut root, "train.lr")?.remove("drop_step");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("{}: cannot read config", path.display()))?;
            let user: Table = toml::from_str(&text).map_err(|e| InputError::new(format!("{}: {}", path.display(), one_line(&e.to_string()))))?;
            check_derived(&user, "")?;
            merge(&mut root, user);
        }
        if let Some(s) = seed {
            root.insert("seed".into(), Value::Integer(s as i64));
        }
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| InputError::new(format!("override {ov:?} is not KEY=VALUE")))?;
            let key = key.trim();
            if DERIVED.contains(&key) {
                return Err(InputError::new(format!("{key} follows seed; set seed instead")).into());
            }
            let (parent, leaf) = match key.rsplit_once('.') {
                Some((p, l)) => (table_mut(&mut root, p)?, l),
                None => (&mut root, key),
            };
            parent.insert(leaf.to_string(), parse_value(raw.trim()));
        }
        let seed = root.get("seed").cloned().unwrap_or(Value::Integer(0));
        table_mut(&mut root, "scene")?.insert("seed".into(), seed.clone());
        table_mut(&mut root, "train")?.insert("seed".into(), seed);
        let train = table_mut(&mut root, "train")?;
        if !table_mut(train, "lr")?.contains_key("drop_step") {
            let steps = train.get("steps").and_then(Value::as_integer).unwrap_or(0);
            table_mut(train, "lr")?.insert("drop_step".into(), Value::Integer(steps * 4 / 5));
        }
        let config: Config = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| InputError::new(format!("configuration: {}", one_line(&e.to_string()))))?;
        config.pipeline.validate().map_err(|e| InputError::new(e.to_string()))?;
        config.scene.validate().map_err(|e| InputError::new(e.to_string()))?;
        Ok(config)
    }

    /// Canonical JSON; object keys are sorted.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().to_string().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn check_derived(t: &Table, prefix: &str) -> Result<()> {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if DERIVED.contains(&key.as_str()) {
            return Err(InputError::new(format!("{key} follows seed; set seed instead")).into());
        }
        if let Value::Table(inner) = v {
            check_derived(inner, &key)?;
        }
    }
    Ok(())
}

fn table_mut<'a>(root: &'a mut Table, path: &str) -> Result<&'a mut Table> {
    let mut cur = root;
    for part in path.split('.') {
        cur = match cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(InputError::new(format!("{path}: {part} is not a table")).into()),
        };
    }
    Ok(cur)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_derived_keys() {
        let c = Config::resolve("desk", None, Some(7), &["train.steps=100".into(), "pipeline.mode=synthesis".into(), "pipeline.skip_connection=false".into()]).unwrap();
        assert_eq!((c.seed, c.train.seed, c.scene.seed), (7, 7, 7));
        assert_eq!(c.train.lr.drop_step, 80);
        assert!(Config::resolve("desk", None, None, &["train.seed=3".into()]).is_err());
        assert!(Config::resolve("desk", None, None, &["train.stepz=3".into()]).is_err());
        assert!(Config::resolve("nope", None, None, &[]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::resolve("desk", None, None, &[]).unwrap();
        let b = Config::resolve("desk", None, None, &["rig.cols=2".into()]).unwrap();
        assert_eq!(a.hash(), Config::resolve("desk", None, None, &[]).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
