//! Pseudo-tokens as nonnegative combinations of vocabulary embeddings.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subject::{TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token_id: TokenId,
    pub token: String,
    pub coefficient: f64,
}

/// `sum_i c_i E[i]`, accumulated in ascending token-id order and skipping
/// zero weights, so that equal weight maps always give bit-identical vectors
/// regardless of how they were listed.
pub fn combine(vocab: &Vocabulary, terms: &[(TokenId, f64)]) -> Result<Array1<f64>> {
    let mut sorted: Vec<(TokenId, f64)> = terms.to_vec();
    sorted.sort_by_key(|(id, _)| *id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid("tokens", format!("token {} listed twice", w[0].0)));
    }
    let mut out = Array1::<f64>::zeros(vocab.dim());
    for (id, c) in sorted {
        if !vocab.contains(id) {
            return Err(Error::UnknownToken(id.to_string()));
        }
        if c != 0.0 {
            out.scaled_add(c, &vocab.embedding(id));
        }
    }
    Ok(out)
}

/// The full combination, its top-`n` ranking and truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTokens {
    pub w_star_full: Array1<f64>,
    pub ranked: Vec<RankedToken>,
    pub w_star: Array1<f64>,
}

/// Indices of the `n` largest coefficients, ordered by descending
/// coefficient then ascending token id.
pub fn top_n(ids: &[TokenId], alpha: &[f64], n: usize) -> Result<Vec<usize>> {
    if ids.len() != alpha.len() {
        return Err(Error::shape("coefficient vector", ids.len(), alpha.len()));
    }
    if n > ids.len() {
        return Err(Error::invalid("n", format!("{n} exceeds the {} candidate tokens", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(ids[a].cmp(&ids[b])));
    order.truncate(n);
    Ok(order)
}

/// `w*_N` over all candidates and `w*` over the top `n`, without
/// renormalizing the surviving coefficients.
pub fn build_pseudo_tokens(vocab: &Vocabulary, candidates: &[TokenId], alpha: &[f64], n: usize) -> Result<PseudoTokens> {
    let keep = top_n(candidates, alpha, n)?;
    let all: Vec<(TokenId, f64)> = candidates.iter().copied().zip(alpha.iter().copied()).collect();
    let w_star_full = combine(vocab, &all)?;
    let ranked: Vec<RankedToken> = keep
        .iter()
        .map(|&i| RankedToken {
            token_id: candidates[i],
            token: vocab.token(candidates[i]).to_string(),
            coefficient: alpha[i],
        })
        .collect();
    let w_star = combine(vocab, &ranked_terms(&ranked))?;
    Ok(PseudoTokens {
        w_star_full,
        ranked,
        w_star,
    })
}

pub fn ranked_terms(ranked: &[RankedToken]) -> Vec<(TokenId, f64)> {
    ranked.iter().map(|r| (r.token_id, r.coefficient)).collect()
}
