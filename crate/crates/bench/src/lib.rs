//! Fixtures shared by the benchmarks.

use jano_core::runtime::masked_forward;
use jano_core::synth::{gaussian_latent, render_scene, standard_suite, synth_trajectory};
use jano_core::{DenoisingRun, KVCacheStore, LatentShape, Level, ModelConfig, Result, TokenMatrix, ToyDiT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A toy transformer with a filled cache and a fixed active token set.
pub struct AttentionCase {
    pub model: ToyDiT,
    pub cache: KVCacheStore,
    pub active_ids: Vec<usize>,
    pub active_tokens: TokenMatrix,
}

impl AttentionCase {
    /// `active_share` of the tokens stay active; the rest are cached at
    /// the static level after one full pass.
    pub fn new(shape: LatentShape, layers: usize, d_model: usize, active_share: f64, seed: u64) -> Result<Self> {
        let n = shape.cells();
        let model = ToyDiT::new(ModelConfig::new(layers, d_model, 4, seed), shape.channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels: Vec<Level> = (0..n)
            .map(|_| if rng.random_bool(active_share) { Level::Active } else { Level::Static })
            .collect();
        let mut cache = KVCacheStore::for_model(&model, n);
        cache.assign(&levels)?;
        let tokens = gaussian_latent(shape, seed.wrapping_add(1)).to_tokens();
        let all: Vec<usize> = (0..n).collect();
        masked_forward(&model, &tokens, &all, &mut cache, 0.3)?;
        let active_ids: Vec<usize> = (0..n).filter(|&i| levels[i] == Level::Active).collect();
        let active_tokens = tokens.gather(&active_ids);
        Ok(Self {
            model,
            cache,
            active_ids,
            active_tokens,
        })
    }

    /// One token-sparse forward pass.
    pub fn step(&mut self, t: f64) -> Result<TokenMatrix> {
        masked_forward(&self.model, &self.active_tokens, &self.active_ids, &mut self.cache, t)
    }
}

/// Interpolated trajectory of the first standard-suite scene.
pub fn suite_run(steps: usize, seed: u64) -> Result<DenoisingRun> {
    let spec = &standard_suite(1, seed)[0];
    synth_trajectory(&render_scene(spec)?, steps, seed)
}
