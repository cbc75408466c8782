//! Declarative run configuration.
//!
//! Every tunable in the pipeline lives in one TOML document with a section
//! per module. Command-line flags override file values, which override the
//! built-in defaults; the fully resolved document is written into each run
//! directory so results stay traceable to their exact settings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sliceseg::augment::AugmentConfig;
use sliceseg::data::cohort::PreprocessConfig;
use sliceseg::network::NetworkConfig;
use sliceseg::phantom::CohortDistribution;
use sliceseg::trainer::{EarlyStopPolicy, OptimConfig};
use sliceseg::{Result, SegError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub patients: usize,
    pub distribution: CohortDistribution,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection { patients: 20, distribution: CohortDistribution::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Probability threshold for binarizing predictions.
    pub threshold: f64,
    /// Which split partition to evaluate: train, val, or test.
    pub split: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { threshold: 0.5, split: "test".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Default seed for any command without an explicit `--seed`.
    pub seed: u64,
    pub phantom: PhantomSection,
    pub preprocess: PreprocessConfig,
    pub network: NetworkConfig,
    pub pretrain: OptimConfig,
    pub finetune: OptimConfig,
    pub early_stop: EarlyStopPolicy,
    /// Training-time augmentation; absent means none.
    pub augment: Option<AugmentConfig>,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            phantom: PhantomSection::default(),
            preprocess: PreprocessConfig::default(),
            network: NetworkConfig::default(),
            pretrain: OptimConfig::pretrain(),
            finetune: OptimConfig::finetune(),
            early_stop: EarlyStopPolicy::default(),
            augment: None,
            evaluate: EvaluateSection::default(),
        }
    }
}

/// Read a config file, or fall back to defaults when none is given.
///
/// File keys are merged over the defaults key-by-key, so a partial
/// `[finetune]` section keeps the stage presets for whatever it leaves
/// out. Unknown keys are rejected; the parser names the offending key.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(p) = path else { return Ok(RunConfig::default()) };
    let text =
        fs::read_to_string(p).map_err(|e| SegError::config(format!("{}: {e}", p.display())))?;
    let file_value: toml::Value = toml::from_str(&text)
        .map_err(|e| SegError::config(format!("{}: {}", p.display(), first_line(&e.to_string()))))?;
    let mut merged = toml::Value::try_from(RunConfig::default())
        .map_err(|e| SegError::config(format!("default config: {e}")))?;
    deep_merge(&mut merged, file_value);
    merged.try_into().map_err(|e: toml::de::Error| {
        SegError::config(format!("{}: {}", p.display(), first_line(&e.to_string())))
    })
}

fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(bv) => deep_merge(bv, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn first_line(s: &str) -> String {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Write the fully resolved configuration into a run directory.
pub fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SegError::config(format!("{}: {e}", dir.display())))?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| SegError::config(format!("config snapshot: {e}")))?;
    let path = dir.join("config.toml");
    fs::write(&path, text).map_err(|e| SegError::config(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Apply an optional flag override, recording where the final value came
/// from so the startup log shows the full precedence chain.
pub fn apply<T: std::fmt::Debug + PartialEq>(
    target: &mut T,
    flag: Option<T>,
    key: &str,
    log: &mut Vec<String>,
) {
    if let Some(v) = flag {
        if *target != v {
            log.push(format!("{key} = {v:?} (flag override)"));
        }
        *target = v;
    }
}
