//! Model configuration and the parameter set shared by encoder and decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::numerics::checkpoint::{load_store, save_store};
use crate::numerics::ParameterStore;
use crate::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

/// Parameters whose names start with this belong to the loop-closure head;
/// everything else is the registration trunk.
pub const LOOP_PREFIX: &str = "loop.";

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let encoder = Encoder::init(&mut store, config.encoder, &mut rng);
        let decoder = Decoder::init(&mut store, config.encoder.feature_dim, config.decoder, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_store(&self.store, path)
    }

    /// Builds the architecture for `config` and fills it from a checkpoint.
    pub fn load(path: &Path, config: ModelConfig) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let stored = load_store(path)?;
        model.store.load_from(&stored)?;
        Ok(model)
    }

    pub fn is_trunk_parameter(name: &str) -> bool {
        !name.starts_with(LOOP_PREFIX)
    }
}
