//! The frozen model under interpretation: vocabulary, schedule, denoiser,
//! sampler and the procedure that trains it.

pub mod denoiser;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod vocab;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};

pub use denoiser::{Denoiser, DenoiserConfig, NoisePredictor};
pub use sampler::SamplerConfig;
pub use schedule::NoiseSchedule;
pub use train::{train_subject, untrained_subject, SubjectTrainConfig};
pub use vocab::{encode_prompt, Prompt, Role, TokenId, Vocabulary};

/// A trained, frozen subject: everything downstream reads it and nothing
/// mutates it. The weights hash is fixed at construction.
#[derive(Clone, Debug)]
pub struct Subject {
    vocab: Vocabulary,
    schedule: NoiseSchedule,
    model: Denoiser<f64>,
    weights_hash: String,
}

impl Subject {
    pub fn new(vocab: Vocabulary, schedule: NoiseSchedule, model: Denoiser<f64>) -> Result<Self> {
        if model.config().cond_dim != vocab.dim() {
            return Err(Error::shape("Subject conditioning dim", vocab.dim(), model.config().cond_dim));
        }
        let weights_hash = model.weights_hash();
        Ok(Self {
            vocab,
            schedule,
            model,
            weights_hash,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn model(&self) -> &Denoiser<f64> {
        &self.model
    }

    pub fn image_shape(&self) -> ImageShape {
        self.model.config().image
    }

    pub fn weights_hash(&self) -> &str {
        &self.weights_hash
    }

    pub fn vocab_hash(&self) -> &str {
        self.vocab.version_hash()
    }

    /// Recomputes both hashes and fails if either drifted.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.model.weights_hash();
        if now != self.weights_hash {
            return Err(Error::integrity("subject weights hash", self.weights_hash.clone(), now));
        }
        let vh = vocab::embedding_hash(self.vocab.embeddings());
        if vh != self.vocab.version_hash() {
            return Err(Error::integrity("vocabulary hash", self.vocab.version_hash(), vh));
        }
        Ok(())
    }

    pub fn default_sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig::new(self.schedule.steps(), seed)
    }

    pub fn unconditional(&self) -> Result<Array1<f64>> {
        encode_prompt(&self.vocab, &self.vocab.unconditional_prompt())
    }

    /// Samples one image per conditioning vector; image `i` uses `seeds[i]`.
    pub fn sample_conditioned(
        &self,
        conds: ArrayView2<f64>,
        seeds: &[u64],
        guidance: f64,
        steps: usize,
    ) -> Result<Vec<Image>> {
        SamplerConfig {
            guidance_scale: guidance,
            steps,
            seed: 0,
        }
        .validate(&self.schedule)?;
        let uncond = self.unconditional()?;
        let mut predict = |z: ArrayView2<f64>, t: &[usize], c: ArrayView2<f64>| self.model.forward(z, t, c);
        sampler::ddpm_sample(
            &mut predict,
            &self.schedule,
            self.image_shape(),
            conds,
            uncond.view(),
            guidance,
            steps,
            seeds,
        )
    }

    pub fn sample_cond(&self, cond: ArrayView1<f64>, cfg: &SamplerConfig) -> Result<Image> {
        let uncond = self.unconditional()?;
        let mut predict = |z: ArrayView2<f64>, t: &[usize], c: ArrayView2<f64>| self.model.forward(z, t, c);
        sampler::ddpm_sample_one(&mut predict, &self.schedule, self.image_shape(), cond, uncond.view(), cfg)
    }

    /// Same conditioning, several seeds, batched.
    pub fn sample_seeds(&self, cond: ArrayView1<f64>, seeds: &[u64], guidance: f64, steps: usize) -> Result<Vec<Image>> {
        let conds = Array2::from_shape_fn((seeds.len(), cond.len()), |(_, j)| cond[j]);
        self.sample_conditioned(conds.view(), seeds, guidance, steps)
    }

    /// Conditioning for the pseudo-token prompt `[template, vector]`.
    pub fn pseudo_cond(&self, vector: &[f64]) -> Result<Array1<f64>> {
        encode_prompt(&self.vocab, &self.vocab.template_prompt(vector.to_vec()))
    }

    /// Conditioning for `[template, token]`.
    pub fn token_cond(&self, token: TokenId) -> Result<Array1<f64>> {
        encode_prompt(&self.vocab, &self.vocab.token_prompt(token))
    }
}

/// Draws an image from the subject for a prompt.
pub fn sample(subject: &Subject, prompt: &Prompt, cfg: &SamplerConfig) -> Result<Image> {
    let cond = encode_prompt(subject.vocab(), prompt)?;
    subject.sample_cond(cond.view(), cfg)
}

/// Predicted noise for a batch (the frozen model's forward pass).
pub fn predict_noise(subject: &Subject, z_t: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>> {
    subject.model.forward(z_t, t, cond)
}
