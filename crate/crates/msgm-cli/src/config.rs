//! Run configuration: JSON file + CLI flag overrides.

use msgm_core::data::SyntheticSpec;
use msgm_core::error::{MsgmError, Result};
use msgm_core::graph::RegionMap;
use msgm_core::model::{AblationFlags, MsgmConfig};
use msgm_core::signal::ScaleSpec;
use msgm_core::train::{SplitPlan, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Model settings as they appear in the config file; unset fields fall back
/// to the built-in defaults. The region map may be named (shipped ids),
/// loaded from a JSON file, or inlined.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelPatch {
    pub h: Option<usize>,
    pub msst_layers: Option<usize>,
    pub cheb_order: Option<usize>,
    pub d_state: Option<usize>,
    pub d_out: Option<usize>,
    pub dropout: Option<f64>,
    pub scale_spec: Option<ScaleSpec>,
    pub region_map_id: Option<String>,
    pub region_map_path: Option<PathBuf>,
    pub region_map: Option<RegionMap>,
    pub share_msst: Option<bool>,
    pub ablation: Option<AblationFlags>,
}

impl ModelPatch {
    /// Resolve the patch against a base configuration.
    pub fn apply(&self, mut cfg: MsgmConfig) -> Result<MsgmConfig> {
        if let Some(h) = self.h {
            cfg.h = h;
        }
        if let Some(m) = self.msst_layers {
            cfg.msst_layers = m;
        }
        if let Some(o) = self.cheb_order {
            cfg.cheb_order = o;
        }
        if let Some(d) = self.d_state {
            cfg.d_state = d;
        }
        if let Some(d) = self.d_out {
            cfg.d_out = d;
        }
        if let Some(p) = self.dropout {
            cfg.dropout = p;
        }
        if let Some(s) = &self.scale_spec {
            cfg.scale_spec = s.clone();
        }
        let named = [
            self.region_map_id.is_some(),
            self.region_map_path.is_some(),
            self.region_map.is_some(),
        ];
        if named.iter().filter(|&&b| b).count() > 1 {
            return Err(MsgmError::Config(
                "specify at most one of region_map_id, region_map_path, region_map".into(),
            ));
        }
        if let Some(id) = &self.region_map_id {
            cfg.region_map = RegionMap::builtin(id)?;
        } else if let Some(path) = &self.region_map_path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| MsgmError::Config(format!("{}: {e}", path.display())))?;
            cfg.region_map = RegionMap::from_json(&text)?;
        } else if let Some(map) = &self.region_map {
            map.validate()?;
            cfg.region_map = map.clone();
        }
        if let Some(s) = self.share_msst {
            cfg.share_msst = s;
        }
        if let Some(a) = &self.ablation {
            cfg.ablation = a.clone();
        }
        Ok(cfg)
    }
}

/// The full run configuration file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelPatch,
    pub train: TrainConfig,
    pub split: SplitPlan,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelPatch::default(),
            train: TrainConfig::default(),
            split: SplitPlan::loso(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| MsgmError::Config(format!("{}: {e}", p.display())))?;
                Ok(serde_json::from_str(&text)?)
            }
            None => Ok(RunConfig::default()),
        }
    }

    /// Resolve the model configuration for a dataset with the given channel
    /// count (picks a fitting shipped region map when none was named).
    pub fn model_config_for_channels(&self, channels: usize) -> Result<MsgmConfig> {
        let mut base = MsgmConfig::default();
        let patch_names_map = self.model.region_map_id.is_some()
            || self.model.region_map_path.is_some()
            || self.model.region_map.is_some();
        if !patch_names_map {
            base.region_map = match channels {
                62 => RegionMap::builtin("62ch-7region")?,
                32 => RegionMap::builtin("32ch-7region")?,
                c => {
                    return Err(MsgmError::Config(format!(
                        "no shipped region map for {c} channels; set region_map_id, region_map_path or region_map"
                    )))
                }
            };
        }
        let cfg = self.model.apply(base)?;
        if cfg.channels() != channels {
            return Err(MsgmError::Config(format!(
                "region map '{}' covers {} channels but the dataset has {channels}",
                cfg.region_map.name,
                cfg.channels()
            )));
        }
        Ok(cfg)
    }

    /// Model configuration for a synthetic run (montage from the generator).
    pub fn model_config_for_synthetic(&self) -> Result<MsgmConfig> {
        let mut base = MsgmConfig::default();
        base.region_map = self.synthetic.region_map()?;
        self.model.apply(base)
    }
}

/// The effective configuration echoed into every output directory.
#[derive(Serialize)]
pub struct ConfigEcho<'a> {
    pub model: &'a MsgmConfig,
    pub train: &'a TrainConfig,
    pub split: &'a SplitPlan,
    pub synthetic: Option<&'a SyntheticSpec>,
    pub seed: u64,
}

pub fn write_config_echo(dir: &Path, echo: &ConfigEcho) -> Result<()> {
    let text = serde_json::to_string_pretty(echo)?;
    std::fs::write(dir.join("config.json"), text)?;
    Ok(())
}

/// Create the output directory, refusing to reuse a non-empty one without
/// --force.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(MsgmError::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}
