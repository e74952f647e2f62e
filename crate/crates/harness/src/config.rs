//! Run configuration: TOML on disk, `key=value` overrides on the command line.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sparsehead_core::head::HeadConfig;

use crate::error::{Error, Result};
use crate::scene::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
    /// Trailing steps averaged into the reported training ratios.
    pub ratio_window: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { steps: 2000, batch_size: 2, lr: 0.01, momentum: 0.9, clip_norm: Some(5.0), ratio_window: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Image size of evaluation scenes; the finest level is `height/8 × width/8`.
    pub width: usize,
    pub height: usize,
    pub scenes: usize,
    pub latency_reps: usize,
    pub warmup: usize,
    /// Run levels concurrently in the latency benchmark.
    pub parallel: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { width: 800, height: 640, scenes: 8, latency_reps: 30, warmup: 3, parallel: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub loss_csv: String,
    pub checkpoint: String,
    pub manifest: String,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths { dir: PathBuf::from("runs/default"), loss_csv: "loss.csv".into(), checkpoint: "head.ckpt".into(), manifest: "head.json".into() }
    }
}

impl OutputPaths {
    pub fn loss_csv(&self) -> PathBuf {
        self.dir.join(&self.loss_csv)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(&self.checkpoint)
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join(&self.manifest)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives weight init, scene sampling and mask noise. `head.seed` is
    /// replaced by this value.
    pub seed: u64,
    pub head: HeadConfig,
    pub scene: SceneSpec,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub output: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            head: HeadConfig { num_levels: 2, level_strides: vec![8, 16], ..HeadConfig::default() },
            scene: SceneSpec::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
            output: OutputPaths::default(),
        }
    }
}

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Scenes = 1,
    MaskNoise = 2,
    Eval = 3,
}

impl RunConfig {
    /// Parses a config; sections given partially keep the run defaults for
    /// their missing keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table = defaults_with(text, "<input>")?;
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when absent) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let origin = path.map_or("<defaults>".into(), |p| p.display().to_string());
        let mut table = defaults_with(&text, &origin)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.head.seed != 0 && self.head.seed != self.seed {
            return Err(Error::Config("head.seed is taken from the top-level seed; set `seed` instead".into()));
        }
        self.head_config().validate().map_err(|e| Error::Config(format!("head: {e}")))?;
        self.scene.validate(self.head.num_levels)?;
        let t = &self.train;
        if t.batch_size == 0 || t.batch_size > 4 {
            return Err(Error::Config(format!("train.batch_size must be in 1..=4, got {}", t.batch_size)));
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) || t.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("train.lr must be positive, train.momentum in [0, 1), train.clip_norm positive".into()));
        }
        if self.eval.width == 0 || self.eval.height == 0 || self.eval.scenes == 0 {
            return Err(Error::Config("eval size and scene count must be positive".into()));
        }
        Ok(())
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig { seed: self.seed, ..self.head.clone() }
    }

    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        rng
    }
}

/// Run defaults overlaid with `text`. The text is first deserialized on its
/// own so that type errors and unknown keys are reported with line numbers.
fn defaults_with(text: &str, origin: &str) -> Result<toml::Table> {
    toml::from_str::<RunConfig>(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {e}")))?;
    let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut table, file);
    Ok(table)
}

/// Overlays `top` onto `base`, descending into tables present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets a dotted `key` to `value`, parsed as a TOML value when possible and
/// as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    if key.is_empty() {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
