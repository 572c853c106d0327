use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dkt, KtModel, Model, ModelConfig, ParamSet, Sakt};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing JSON model container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: String,
    pub config: ModelConfig,
    pub num_items: usize,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch: model.tag().to_string(),
            config: model.config(),
            num_items: model.num_items(),
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if self.arch != self.config.tag().as_str() {
            return Err(Error::invalid(format!(
                "checkpoint arch `{}` disagrees with its config `{}`",
                self.arch,
                self.config.tag()
            )));
        }
        Ok(match self.config {
            ModelConfig::Dkt(c) => Model::Dkt(Dkt::from_parts(self.num_items, c, self.params)?),
            ModelConfig::DktPlus(c) => {
                Model::DktPlus(Dkt::from_parts(self.num_items, c, self.params)?)
            }
            ModelConfig::Sakt(c) => Model::Sakt(Sakt::from_parts(self.num_items, c, self.params)?),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelTag, SaktConfig};

    #[test]
    fn round_trip_preserves_parameters_bitwise() {
        let config = ModelConfig::Sakt(SaktConfig {
            emb_size: 4,
            num_heads: 2,
            num_blocks: 1,
            max_len: 6,
        });
        for cfg in [config, ModelConfig::default_for(ModelTag::DktPlus)] {
            let model = Model::new(&cfg, 7, 11).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.json");
            Checkpoint::from_model(&model).save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap().into_model().unwrap();
            assert_eq!(back.params().to_bytes(), model.params().to_bytes());
            assert_eq!(back.tag(), model.tag());
        }
    }

    #[test]
    fn version_is_checked() {
        let model = Model::new(&ModelConfig::default_for(ModelTag::Dkt), 3, 0).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.version = 99;
        assert!(ck.into_model().is_err());
    }
}
