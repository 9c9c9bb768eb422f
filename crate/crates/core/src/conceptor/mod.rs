//! Learning a sparse decomposition of a concept over the vocabulary: a
//! coefficient MLP scores every candidate token, the weighted sum forms a
//! pseudo-token, and the top `n` terms are the readable decomposition.

pub mod loss;
pub mod mlp;
pub mod pseudo;
pub mod train;

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::oracle::SimilarityOracle;
use crate::persist::{canonical_json, check_hash, load_json, save_json, sha256_hex};
use crate::subject::{Subject, TokenId};

pub use loss::{reconstruction_loss, sparsity_loss, NoiseDraw, SparsityLoss};
pub use mlp::{CoefficientMlp, MlpGrads, MlpWeights};
pub use pseudo::{build_pseudo_tokens, combine, PseudoTokens, RankedToken};
pub use train::{
    candidate_matrix, evaluate_reconstruction, filter_vocabulary, optimize_token, total_loss_and_grad, train_coefficients,
    DecompositionConfig, Objective, OptimizedToken, StepLog, TrainingLog,
};

/// Seed of the `i`-th generated concept image for a run seeded `seed`;
/// distinct run seeds give disjoint image seeds.
pub fn corpus_seed(seed: u64, i: usize) -> u64 {
    (seed << 20) | i as u64
}

/// Seeds shared by every validation pass.
pub fn validation_seeds(count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| (1 << 63) | i).collect()
}

/// Images of `concept` (as `[template, concept]`) for the given seeds.
pub fn concept_images(subject: &Subject, concept: TokenId, seeds: &[u64], guidance: f64, steps: Option<usize>) -> Result<Vec<Image>> {
    let cond = subject.token_cond(concept)?;
    subject.sample_seeds(cond.view(), seeds, guidance, steps.unwrap_or(subject.schedule().steps()))
}

/// Images of the pseudo-token prompt `[template, w]` for the given seeds.
pub fn pseudo_images(subject: &Subject, w: &[f64], seeds: &[u64], guidance: f64, steps: Option<usize>) -> Result<Vec<Image>> {
    let cond = subject.pseudo_cond(w)?;
    subject.sample_seeds(cond.view(), seeds, guidance, steps.unwrap_or(subject.schedule().steps()))
}

pub fn image_matrix(images: &[Image]) -> Result<Array2<f64>> {
    let first = images.first().ok_or_else(|| Error::invalid("corpus", "no images"))?;
    let dim = first.data().len();
    let mut m = Array2::zeros((images.len(), dim));
    for (mut row, im) in m.rows_mut().into_iter().zip(images) {
        if im.data().len() != dim {
            return Err(Error::shape("image matrix", dim, im.data().len()));
        }
        row.assign(&ndarray::ArrayView1::from(im.data()));
    }
    Ok(m)
}

/// Mean same-seed similarity between `generated` and `reference` images.
pub fn paired_similarity(oracle: &dyn SimilarityOracle, generated: &[Image], reference: &[Image]) -> Result<f64> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(Error::shape("paired similarity", reference.len(), generated.len()));
    }
    Ok(generated.iter().zip(reference).map(|(g, r)| oracle.sim(g, r)).sum::<f64>() / generated.len() as f64)
}

/// Note attached to a decomposition derived from another by editing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Content id of the decomposition this one was derived from.
    pub derived_from: String,
    pub note: String,
    /// `(token, factor)` applied to the parent's coefficients.
    pub edits: Vec<(TokenId, f64)>,
}

/// A learned decomposition of one concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub concept: String,
    pub vocab_hash: String,
    pub subject_hash: String,
    pub n: usize,
    pub lambda_sparsity: f64,
    pub candidates: Vec<TokenId>,
    pub ranked: Vec<RankedToken>,
    pub w_star: Vec<f64>,
    pub w_star_full: Vec<f64>,
    pub config: DecompositionConfig,
    pub seed: u64,
    pub mlp: MlpWeights,
    pub training_log: TrainingLog,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Decomposition {
    /// SHA-256 of the canonical JSON encoding.
    pub fn content_id(&self) -> Result<String> {
        Ok(sha256_hex(&canonical_json(self)?))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        canonical_json(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(path, self)
    }

    /// Loads and checks internal consistency (not the subject pairing; see
    /// [`Decomposition::verify_against`]).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let d: Decomposition = load_json(path)?;
        d.check_ranking()?;
        Ok(d)
    }

    pub fn w_star(&self) -> Array1<f64> {
        Array1::from(self.w_star.clone())
    }

    pub fn ranked_ids(&self) -> Vec<TokenId> {
        self.ranked.iter().map(|r| r.token_id).collect()
    }

    pub fn coefficient(&self, token: TokenId) -> Option<f64> {
        self.ranked.iter().find(|r| r.token_id == token).map(|r| r.coefficient)
    }

    fn check_ranking(&self) -> Result<()> {
        let bad = |reason: &str| Error::Format {
            what: "decomposition",
            reason: reason.to_string(),
        };
        if self.ranked.len() != self.n {
            return Err(bad("ranked list length differs from n"));
        }
        if self.ranked.iter().any(|r| !(r.coefficient >= 0.0)) {
            return Err(bad("negative or NaN coefficient"));
        }
        if self.ranked.windows(2).any(|w| {
                w[0].coefficient < w[1].coefficient || (w[0].coefficient == w[1].coefficient && w[0].token_id > w[1].token_id)
            })
        {
            return Err(bad("ranked list is not sorted"));
        }
        Ok(())
    }

    /// Refuses a subject whose hashes differ from the recorded ones, and
    /// checks that `w_star` is the combination of the ranked tokens.
    pub fn verify_against(&self, subject: &Subject) -> Result<()> {
        check_hash("decomposition vocab_hash", &self.vocab_hash, subject.vocab_hash())?;
        check_hash("decomposition subject_hash", &self.subject_hash, subject.weights_hash())?;
        self.check_ranking()?;
        let vocab = subject.vocab();
        for r in &self.ranked {
            if !vocab.contains(r.token_id) || vocab.token(r.token_id) != r.token {
                return Err(Error::UnknownToken(r.token.clone()));
            }
        }
        let w = combine(vocab, &pseudo::ranked_terms(&self.ranked))?;
        if w.iter().zip(&self.w_star).any(|(a, b)| a.to_bits() != b.to_bits()) || w.len() != self.w_star.len() {
            return Err(Error::Format {
                what: "decomposition",
                reason: "w_star is not the combination of the ranked tokens".into(),
            });
        }
        Ok(())
    }
}

/// Candidate tokens for decomposing `concept` under `config`.
pub fn candidates_for(subject: &Subject, concept: TokenId, images: &Array2<f64>, config: &DecompositionConfig) -> Result<Vec<TokenId>> {
    let vocab = subject.vocab();
    let obj = Objective {
        model: subject.model(),
        schedule: subject.schedule(),
        vocab,
        images: images.view(),
    };
    let top_m = config.top_m.unwrap_or(vocab.len() - 1);
    let mut ids = filter_vocabulary(obj, top_m, config.seed)?;
    if config.exclude_concept_token {
        ids.retain(|&id| id != concept);
    }
    if config.n > ids.len() {
        return Err(Error::invalid("n", format!("{} exceeds the {} candidate tokens", config.n, ids.len())));
    }
    Ok(ids)
}

/// Generates the concept corpus and trains a decomposition of `concept`,
/// selecting the checkpoint whose `w*` images best match same-seed concept
/// images under `oracle`.
pub fn decompose(
    subject: &Subject,
    concept: &str,
    config: &DecompositionConfig,
    oracle: &dyn SimilarityOracle,
    progress: &mut dyn FnMut(usize, usize),
) -> Result<Decomposition> {
    config.validate()?;
    let vocab = subject.vocab();
    let concept_id = vocab.id(concept)?;
    let seeds: Vec<u64> = (0..config.corpus_size).map(|i| corpus_seed(config.seed, i)).collect();
    let corpus = concept_images(subject, concept_id, &seeds, config.guidance, config.sample_steps)?;
    let images = image_matrix(&corpus)?;
    decompose_images(subject, concept, &images, config, oracle, progress)
}

/// [`decompose`] on an explicit set of concept images.
pub fn decompose_images(
    subject: &Subject,
    concept: &str,
    images: &Array2<f64>,
    config: &DecompositionConfig,
    oracle: &dyn SimilarityOracle,
    progress: &mut dyn FnMut(usize, usize),
) -> Result<Decomposition> {
    config.validate()?;
    let hash_before = subject.weights_hash().to_string();
    let vocab = subject.vocab();
    let concept_id = vocab.id(concept)?;
    let candidates = candidates_for(subject, concept_id, images, config)?;
    let obj = Objective {
        model: subject.model(),
        schedule: subject.schedule(),
        vocab,
        images: images.view(),
    };

    let val_seeds = validation_seeds(config.val_count);
    let reference = if config.val_every > 0 {
        concept_images(subject, concept_id, &val_seeds, config.guidance, config.sample_steps)?
    } else {
        Vec::new()
    };
    let mut validator = |w: &Array1<f64>| -> Result<f64> {
        let generated = pseudo_images(subject, w.as_slice().unwrap(), &val_seeds, config.guidance, config.sample_steps)?;
        paired_similarity(oracle, &generated, &reference)
    };
    let trained = train_coefficients(
        obj,
        &candidates,
        config,
        (config.val_every > 0).then_some(&mut validator as &mut train::Validator<'_>),
        progress,
    )?;

    subject.verify_frozen()?;
    check_hash("subject weights after decomposition", &hash_before, subject.weights_hash())?;
    Ok(Decomposition {
        concept: concept.to_string(),
        vocab_hash: subject.vocab_hash().to_string(),
        subject_hash: subject.weights_hash().to_string(),
        n: config.n,
        lambda_sparsity: config.lambda_sparsity,
        candidates,
        ranked: trained.pseudo.ranked,
        w_star: trained.pseudo.w_star.to_vec(),
        w_star_full: trained.pseudo.w_star_full.to_vec(),
        config: config.clone(),
        seed: config.seed,
        mlp: trained.mlp.weights(),
        training_log: trained.log,
        provenance: None,
    })
}
