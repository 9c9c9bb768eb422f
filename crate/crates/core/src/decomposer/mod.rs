//! Per-image analysis of a decomposition: greedy single-image decomposition,
//! coefficient manipulation and debiasing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conceptor::pseudo::ranked_terms;
use crate::conceptor::train::evaluate_mlp;
use crate::conceptor::{combine, pseudo_images, CoefficientMlp, Decomposition, Provenance, RankedToken};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::oracle::SimilarityOracle;
use crate::subject::{Subject, TokenId};

/// Default removal threshold.
pub const DEFAULT_TAU: f64 = 0.95;

pub const CALIBRATION_NOTE: &str =
    "similarity is the pooled-cosine image oracle mapped to [0, 1]; thresholds are not comparable to CLIP scores";

/// Order in which tokens are tentatively removed within a pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalOrder {
    /// Weakest first; ties by descending token id.
    #[default]
    AscendingCoefficient,
    /// Strongest first; ties by ascending token id.
    DescendingCoefficient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub token_id: TokenId,
    pub token: String,
    #[serde(rename = "pass")]
    pub pass_index: usize,
    pub similarity: f64,
    pub removed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleImageResult {
    pub decomposition_id: String,
    pub seed: u64,
    pub tau: f64,
    pub order: RemovalOrder,
    pub surviving: Vec<RankedToken>,
    pub trace: Vec<TraceEntry>,
    pub passes: usize,
    /// Similarity between the reference image and the image generated from
    /// the surviving tokens alone.
    pub final_similarity: f64,
    pub final_image_matches: bool,
    pub oracle: String,
    pub calibration_note: String,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid("tau", format!("{tau} outside (0, 1)")));
    }
    Ok(())
}

/// One image per seed from the weighted ranked tokens.
pub fn generate(subject: &Subject, dec: &Decomposition, terms: &[(TokenId, f64)], seeds: &[u64]) -> Result<Vec<Image>> {
    let w = combine(subject.vocab(), terms)?;
    pseudo_images(subject, w.as_slice().unwrap(), seeds, dec.config.guidance, dec.config.sample_steps)
}

fn generate_one(subject: &Subject, dec: &Decomposition, terms: &[(TokenId, f64)], seed: u64) -> Result<Image> {
    Ok(generate(subject, dec, terms, &[seed])?.pop().expect("one seed"))
}

/// Greedy removal: in repeated passes over the current tokens, drop a token
/// whenever the image regenerated without it (same seed) stays within `tau`
/// of the reference image; stop after a pass without removals.
pub fn single_image_decompose(
    subject: &Subject,
    dec: &Decomposition,
    seed: u64,
    tau: f64,
    order: RemovalOrder,
    oracle: &dyn SimilarityOracle,
) -> Result<SingleImageResult> {
    check_tau(tau)?;
    dec.verify_against(subject)?;
    let reference = generate_one(subject, dec, &ranked_terms(&dec.ranked), seed)?;
    let mut current: Vec<RankedToken> = dec.ranked.clone();
    let mut trace = Vec::new();
    let mut passes = 0;
    while !current.is_empty() {
        passes += 1;
        let mut attempt: Vec<RankedToken> = current.clone();
        if order == RemovalOrder::AscendingCoefficient {
            attempt.reverse();
        }
        let mut removed_any = false;
        for tok in attempt {
            let without: Vec<(TokenId, f64)> = current
                .iter()
                .filter(|r| r.token_id != tok.token_id)
                .map(|r| (r.token_id, r.coefficient))
                .collect();
            let image = generate_one(subject, dec, &without, seed)?;
            let similarity = oracle.sim(&reference, &image);
            let removed = similarity >= tau;
            if removed {
                current.retain(|r| r.token_id != tok.token_id);
                removed_any = true;
            }
            trace.push(TraceEntry {
                token_id: tok.token_id,
                token: tok.token,
                pass_index: passes,
                similarity,
                removed,
            });
        }
        if !removed_any {
            break;
        }
    }
    let final_image = generate_one(subject, dec, &ranked_terms(&current), seed)?;
    let final_similarity = oracle.sim(&reference, &final_image);
    Ok(SingleImageResult {
        decomposition_id: dec.content_id()?,
        seed,
        tau,
        order,
        surviving: current,
        trace,
        passes,
        final_similarity,
        final_image_matches: final_similarity >= tau,
        oracle: oracle.name().to_string(),
        calibration_note: CALIBRATION_NOTE.to_string(),
    })
}

/// Similarity to the reference image of every subset of the ranked tokens,
/// indexed by bit mask over rank positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetScan {
    pub seed: u64,
    pub tokens: Vec<TokenId>,
    pub similarities: Vec<f64>,
}

impl SubsetScan {
    /// Smallest subsets whose image stays within `tau` of the reference.
    pub fn minimal_subsets(&self, tau: f64) -> Vec<Vec<TokenId>> {
        let ok: Vec<u32> = (0..self.similarities.len() as u32).filter(|&m| self.similarities[m as usize] >= tau).collect();
        let Some(best) = ok.iter().map(|m| m.count_ones()).min() else {
            return Vec::new();
        };
        ok.iter()
            .filter(|m| m.count_ones() == best)
            .map(|&m| self.subset(m))
            .collect()
    }

    pub fn subset(&self, mask: u32) -> Vec<TokenId> {
        (0..self.tokens.len()).filter(|i| mask >> i & 1 == 1).map(|i| self.tokens[i]).collect()
    }

    pub fn similarity_of(&self, subset: &[TokenId]) -> Option<f64> {
        let mut mask = 0u32;
        for t in subset {
            mask |= 1 << self.tokens.iter().position(|x| x == t)?;
        }
        self.similarities.get(mask as usize).copied()
    }
}

/// Exhaustive alternative to the greedy search for at most 8 tokens.
pub fn subset_scan(subject: &Subject, dec: &Decomposition, seed: u64, oracle: &dyn SimilarityOracle) -> Result<SubsetScan> {
    dec.verify_against(subject)?;
    let k = dec.ranked.len();
    if k > 8 {
        return Err(Error::invalid("n", "exhaustive subset scan supports at most 8 tokens"));
    }
    let reference = generate_one(subject, dec, &ranked_terms(&dec.ranked), seed)?;
    let mut similarities = Vec::with_capacity(1 << k);
    for mask in 0u32..(1 << k) {
        let terms: Vec<(TokenId, f64)> = (0..k)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| (dec.ranked[i].token_id, dec.ranked[i].coefficient))
            .collect();
        let image = generate_one(subject, dec, &terms, seed)?;
        similarities.push(oracle.sim(&reference, &image));
    }
    Ok(SubsetScan {
        seed,
        tokens: dec.ranked_ids(),
        similarities,
    })
}

/// Per-token coefficient scales applied to a decomposition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManipulationRequest {
    /// Token to scale factor; tokens not listed keep scale 1.
    pub edits: BTreeMap<TokenId, f64>,
    pub seed: u64,
}

/// The ranked terms with `edits` applied: `alpha_i * scale_i`.
pub fn edited_terms(dec: &Decomposition, edits: &BTreeMap<TokenId, f64>) -> Result<Vec<(TokenId, f64)>> {
    for (&id, &scale) in edits {
        if dec.coefficient(id).is_none() {
            return Err(Error::invalid("edits", format!("token {id} is not in the decomposition")));
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::invalid("edits", format!("scale {scale} for token {id} must be finite and nonnegative")));
        }
    }
    Ok(dec
        .ranked
        .iter()
        .map(|r| (r.token_id, r.coefficient * edits.get(&r.token_id).copied().unwrap_or(1.0)))
        .collect())
}

pub fn manipulate(subject: &Subject, dec: &Decomposition, req: &ManipulationRequest) -> Result<Image> {
    Ok(manipulate_seeds(subject, dec, &req.edits, &[req.seed])?.pop().expect("one seed"))
}

/// [`manipulate`] for several seeds.
pub fn manipulate_seeds(subject: &Subject, dec: &Decomposition, edits: &BTreeMap<TokenId, f64>, seeds: &[u64]) -> Result<Vec<Image>> {
    dec.verify_against(subject)?;
    let terms = edited_terms(dec, edits)?;
    generate(subject, dec, &terms, seeds)
}

/// A derived decomposition with the listed tokens' coefficients multiplied
/// by `factor`, re-ranked, and `w_star`/`w_star_full` recomputed. The list
/// length is unchanged.
pub fn debias(subject: &Subject, dec: &Decomposition, tokens: &[TokenId], factor: f64) -> Result<Decomposition> {
    if !(0.0..1.0).contains(&factor) {
        return Err(Error::invalid("factor", format!("{factor} outside [0, 1)")));
    }
    if tokens.is_empty() {
        return Err(Error::invalid("tokens", "no tokens to scale"));
    }
    dec.verify_against(subject)?;
    for &t in tokens {
        if dec.coefficient(t).is_none() {
            return Err(Error::invalid("tokens", format!("token {t} is not in the decomposition")));
        }
    }
    let vocab = subject.vocab();
    let scale = |id: TokenId, c: f64| if tokens.contains(&id) { c * factor } else { c };

    let mut ranked: Vec<RankedToken> = dec
        .ranked
        .iter()
        .map(|r| RankedToken {
            coefficient: scale(r.token_id, r.coefficient),
            ..r.clone()
        })
        .collect();
    ranked.sort_by(|a, b| b.coefficient.total_cmp(&a.coefficient).then(a.token_id.cmp(&b.token_id)));
    let w_star = combine(vocab, &ranked_terms(&ranked))?;

    let mlp = CoefficientMlp::try_from(&dec.mlp)?;
    let (alpha, _) = evaluate_mlp(&mlp, vocab, &dec.candidates, dec.n)?;
    let full: Vec<(TokenId, f64)> = dec.candidates.iter().zip(&alpha).map(|(&id, &a)| (id, scale(id, a))).collect();
    let w_star_full = combine(vocab, &full)?;

    let names: Vec<&str> = tokens.iter().map(|&t| vocab.token(t)).collect();
    Ok(Decomposition {
        ranked,
        w_star: w_star.to_vec(),
        w_star_full: w_star_full.to_vec(),
        provenance: Some(Provenance {
            derived_from: dec.content_id()?,
            note: format!("coefficients of {} scaled by {factor}; MLP weights are the parent's", names.join(", ")),
            edits: tokens.iter().map(|&t| (t, factor)).collect(),
        }),
        ..dec.clone()
    })
}
