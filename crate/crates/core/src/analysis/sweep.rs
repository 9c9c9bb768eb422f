//! Similarity of manipulated images to the unedited ones as one token's
//! coefficient is scaled.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conceptor::Decomposition;
use crate::decomposer::manipulate_seeds;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::oracle::SimilarityOracle;
use crate::subject::{Subject, TokenId};

/// Scales `0, 0.25, ..., 2`.
pub fn default_scales() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.25).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationSweep {
    pub concept: String,
    pub token_id: TokenId,
    pub token: String,
    pub scales: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Mean over seeds of the similarity to the unedited image, per scale.
    pub similarity: Vec<f64>,
}

/// Sweeps one token's scale; returns the summary and the images
/// (`[scale][seed]`).
pub fn manipulation_sweep(
    subject: &Subject,
    dec: &Decomposition,
    token: TokenId,
    scales: &[f64],
    seeds: &[u64],
    oracle: &dyn SimilarityOracle,
) -> Result<(ManipulationSweep, Vec<Vec<Image>>)> {
    if scales.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("scales", "need at least one scale and one seed"));
    }
    let name = dec
        .ranked
        .iter()
        .find(|r| r.token_id == token)
        .map(|r| r.token.clone())
        .ok_or_else(|| Error::invalid("token", format!("token {token} is not in the decomposition")))?;
    let base = manipulate_seeds(subject, dec, &BTreeMap::new(), seeds)?;
    let mut images = Vec::with_capacity(scales.len());
    let mut similarity = Vec::with_capacity(scales.len());
    for &s in scales {
        let edits = BTreeMap::from([(token, s)]);
        let imgs = manipulate_seeds(subject, dec, &edits, seeds)?;
        similarity.push(imgs.iter().zip(&base).map(|(a, b)| oracle.sim(a, b)).sum::<f64>() / seeds.len() as f64);
        images.push(imgs);
    }
    Ok((
        ManipulationSweep {
            concept: dec.concept.clone(),
            token_id: token,
            token: name,
            scales: scales.to_vec(),
            seeds: seeds.to_vec(),
            similarity,
        },
        images,
    ))
}
