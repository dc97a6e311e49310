//! Effective configuration: preset, then the JSON file, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use icmf_core::config::WiringVariant;
use icmf_core::training::TrainConfig;
use icmf_core::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "ICMF_SEED";

#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON file with optional "preset", "model", "train" and "seed" keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed. Falls back to the config file, then to ICMF_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ModelArgs {
    /// Model preset: tiny or full.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub shared_depth: Option<usize>,
    #[arg(long)]
    pub cross_depth: Option<usize>,
    #[arg(long)]
    pub second_depth: Option<usize>,
    /// Stream wiring: XY_XtoY, XY_YtoX, X_only_XtoY or X_only_YtoX.
    #[arg(long)]
    pub variant: Option<WiringVariant>,
    #[arg(long)]
    pub image_side: Option<usize>,
    #[arg(long)]
    pub click_radius: Option<usize>,
}

impl ModelArgs {
    pub fn any_set(&self) -> bool {
        self.preset.is_some()
            || self.dim.is_some()
            || self.heads.is_some()
            || self.shared_depth.is_some()
            || self.cross_depth.is_some()
            || self.second_depth.is_some()
            || self.variant.is_some()
            || self.image_side.is_some()
            || self.click_radius.is_some()
    }

    fn apply(&self, m: &mut ModelConfig) {
        if let Some(v) = self.dim {
            m.dim = v;
        }
        if let Some(v) = self.heads {
            m.heads = v;
        }
        if let Some(v) = self.shared_depth {
            m.shared_depth = v;
        }
        if let Some(v) = self.cross_depth {
            m.cross_depth = v;
        }
        if let Some(v) = self.second_depth {
            m.second_depth = v;
        }
        if let Some(v) = self.variant {
            m.variant = v;
        }
        if let Some(v) = self.image_side {
            m.image_side = v;
        }
        if let Some(v) = self.click_radius {
            m.click_radius = Some(v);
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_drop_step: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub border_prob: Option<f64>,
    /// Disable flip/rotate/rescale augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

impl TrainArgs {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr_drop_step {
            t.lr_drop_step = Some(v);
        }
        if let Some(v) = self.gamma {
            t.gamma = v;
        }
        if let Some(v) = self.border_prob {
            t.border_prob = v;
        }
        if self.no_augment {
            t.augment = false;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

/// Overwrites keys of `base` with those of `patch`, recursing into objects.
/// Keys unknown to `base` are an error.
fn merge(base: &mut Value, patch: &Value, path: &str) -> CliResult<()> {
    let (Value::Object(b), Value::Object(p)) = (&mut *base, patch) else {
        *base = patch.clone();
        return Ok(());
    };
    for (k, v) in p {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match b.get_mut(k) {
            Some(slot) if slot.is_object() => merge(slot, v, &here)?,
            Some(slot) => *slot = v.clone(),
            None => return Err(CliError::Usage(format!("unknown config key {here:?}"))),
        }
    }
    Ok(())
}

fn read_file(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn seed_from_env() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn resolve(common: &CommonArgs, model: &ModelArgs, train: &TrainArgs) -> CliResult<CliConfig> {
    let file = common.config.as_deref().map(read_file).transpose()?;
    let preset = model
        .preset
        .clone()
        .or_else(|| file.as_ref()?.get("preset")?.as_str().map(str::to_owned))
        .unwrap_or_else(|| "tiny".into());
    let base_model = ModelConfig::preset(&preset)?;
    let base_train = if preset == "tiny" { TrainConfig::desk() } else { TrainConfig::default() };
    let mut value = serde_json::to_value(CliConfig { preset, model: base_model, train: base_train, seed: 0 })?;
    let file_seed = match &file {
        Some(f) => {
            let mut f = f.clone();
            let seed = f.as_object_mut().and_then(|o| o.remove("seed"));
            f.as_object_mut().map(|o| o.remove("preset"));
            merge(&mut value, &f, "")?;
            seed.map(|s| s.as_u64().ok_or_else(|| CliError::Usage("config seed must be an unsigned integer".into())))
                .transpose()?
        }
        None => None,
    };
    let mut cfg: CliConfig = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    model.apply(&mut cfg.model);
    train.apply(&mut cfg.train);
    cfg.seed = match (common.seed, file_seed) {
        (Some(s), _) | (None, Some(s)) => s,
        (None, None) => seed_from_env()?.unwrap_or(0),
    };
    cfg.train.seed = cfg.seed;
    cfg.model.validate()?;
    cfg.train.validate()?;
    log::info!("effective config: {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}
