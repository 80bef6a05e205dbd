use candle_core::Tensor;

use crate::data::Prompt;
use crate::error::{Error, Result};
use crate::fm::{few_step_sample_seeded, DistilledTimesteps, LatentSpec};
use crate::metrics::ClipSource;
use crate::models::{ChunkRecurrentDecoder, GeneratorNet};
use crate::tensor::VideoTensor;

/// Few-step generator plus decoder, viewed as a clip source for evaluation.
pub struct GeneratorSource<'a> {
    pub generator: &'a GeneratorNet,
    pub decoder: &'a ChunkRecurrentDecoder,
    pub timesteps: DistilledTimesteps,
    pub chunks: usize,
}

impl ClipSource for GeneratorSource<'_> {
    fn sample(&self, prompts: &[Prompt], seed: u64) -> Result<VideoTensor> {
        if prompts.is_empty() {
            return Err(Error::config("prompts", "prompt set is empty"));
        }
        let d = self.decoder.config();
        let params = self.generator.params();
        let classes: Vec<u32> = prompts.iter().map(|p| p.class).collect();
        let cond = Tensor::new(classes.as_slice(), params.device())?;
        let spec = LatentSpec::new(
            &[prompts.len(), self.chunks, d.latent_channels, d.latent_height, d.latent_width],
            params.dtype(),
            params.device(),
        );
        let z = few_step_sample_seeded(&self.generator.frozen(), &self.timesteps, &cond, &spec, seed)?;
        Ok(self.decoder.decode(&z)?.detach())
    }
}
