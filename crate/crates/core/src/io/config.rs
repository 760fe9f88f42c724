//! TOML configuration with `[grid]`, `[backbone]`, `[head]` and `[tracker]`
//! sections. Missing keys take the nuScenes defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::tracker::AssociationConfig;
use crate::voxelizer::GridConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub tracker: AssociationConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.backbone.validate()?;
        self.head.validate()?;
        self.tracker.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn partial_sections() {
        let cfg = Config::from_toml(
            "[backbone]\nprune_ratio = 0.3\nmode = \"2d\"\n[head]\nmax_detections = 5\n[grid]\nvoxel_size = [0.1, 0.1, 0.2]\n",
        )
        .unwrap();
        assert_eq!(cfg.backbone.prune_ratio, 0.3);
        assert_eq!(cfg.head.max_detections, 5);
        assert_eq!(cfg.head.head_kernel, 3);
        assert_eq!(cfg.grid.range_min, GridConfig::default().range_min);
    }

    #[test]
    fn round_trip() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(Config::from_toml("[grid]\nbogus = 1\n"), Err(Error::Toml(_))));
        assert!(matches!(
            Config::from_toml("[backbone]\nprune_ratio = 1.5\n"),
            Err(Error::InvalidConfig(_))
        ));
    }
}
