use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::container;
use crate::discriminator::{Discriminator, DiscriminatorArch};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorArch};

const MAGIC: &[u8; 8] = b"GLCACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    generator: GeneratorArch,
    discriminator: DiscriminatorArch,
    iter: u64,
    seed: u64,
    /// Sampler stream position, as a decimal string (u128).
    rng_word_pos: String,
    g_opt_steps: u64,
    d_opt_steps: u64,
    config: TrainConfig,
}

fn prefixed(prefix: &str, map: BTreeMap<String, Tensor>, out: &mut BTreeMap<String, Tensor>) {
    for (k, v) in map {
        out.insert(format!("{prefix}{k}"), v);
    }
}

fn strip(prefix: &str, map: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    map.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        generator: state.generator.arch().clone(),
        discriminator: state.discriminator.arch().clone(),
        iter: state.iteration,
        seed: state.config.seed,
        rng_word_pos: state.rng.get_word_pos().to_string(),
        g_opt_steps: state.g_opt.steps_taken(),
        d_opt_steps: state.d_opt.steps_taken(),
        config: state.config.clone(),
    };
    let mut tensors = BTreeMap::new();
    prefixed("g/", state.generator.params().snapshot()?, &mut tensors);
    prefixed("d/", state.discriminator.params().snapshot()?, &mut tensors);
    prefixed("g_opt/", state.g_opt.state_tensors(), &mut tensors);
    prefixed("d_opt/", state.d_opt.state_tensors(), &mut tensors);
    container::write(path, MAGIC, CHECKPOINT_VERSION, &serde_json::to_value(&header)?, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let c = container::read(path, MAGIC, CHECKPOINT_VERSION)?;
    let header: Header = serde_json::from_value(c.header).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: format!("bad header: {e}"),
    })?;
    let generator = Generator::new(header.generator, DType::F32, 0)?;
    generator.params().load_from(&strip("g/", &c.tensors))?;
    let discriminator = Discriminator::new(header.discriminator, DType::F32, 0)?;
    discriminator.params().load_from(&strip("d/", &c.tensors))?;
    let mut state = TrainState::from_parts(header.config, generator, discriminator)?;
    state.g_opt.restore(header.g_opt_steps, &strip("g_opt/", &c.tensors))?;
    state.d_opt.restore(header.d_opt_steps, &strip("d_opt/", &c.tensors))?;
    let pos: u128 = header.rng_word_pos.parse().map_err(|_| Error::Corrupt {
        path: path.to_path_buf(),
        reason: "bad rng position".into(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(header.seed.wrapping_add(2));
    rng.set_word_pos(pos);
    state.rng = rng;
    state.iteration = header.iter;
    Ok(state)
}
