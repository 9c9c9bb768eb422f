//! Agreement between independently seeded decompositions of one concept.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::conceptor::{decompose, Decomposition, DecompositionConfig};
use crate::error::{Error, Result};
use crate::oracle::SimilarityOracle;
use crate::subject::{Subject, TokenId};

/// Default cut-offs at the toy scale (`n = 8`).
pub const TOY_KS: [usize; 3] = [3, 5, 8];

/// `|top-k(a) ∩ top-k(b)|` by exact token id. Lists shorter than `k` are
/// cut at their length.
pub fn intersection(a: &[TokenId], b: &[TokenId], k: usize) -> usize {
    let sa: BTreeSet<TokenId> = a.iter().take(k).copied().collect();
    b.iter().take(k).collect::<BTreeSet<_>>().into_iter().filter(|t| sa.contains(t)).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KIntersection {
    pub k: usize,
    /// Intersection of run 0 with each run `j >= 1`.
    pub counts: Vec<usize>,
    pub mean: f64,
    /// `mean / k`.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRanking {
    pub seed: u64,
    pub decomposition_id: String,
    pub ranked: Vec<TokenId>,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionReport {
    pub concept: String,
    pub runs: Vec<RunRanking>,
    pub per_k: Vec<KIntersection>,
}

impl IntersectionReport {
    pub fn at(&self, k: usize) -> Option<&KIntersection> {
        self.per_k.iter().find(|p| p.k == k)
    }
}

/// Intersections of the first ranking with every other, for each `k`.
pub fn intersection_counts(rankings: &[Vec<TokenId>], ks: &[usize]) -> Result<Vec<KIntersection>> {
    if rankings.len() < 2 {
        return Err(Error::invalid("runs", "need at least 2 rankings"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("ks", "need positive cut-offs"));
    }
    let shortest = rankings.iter().map(Vec::len).min().unwrap_or(0);
    if let Some(&k) = ks.iter().find(|&&k| k > shortest) {
        return Err(Error::invalid("ks", format!("k = {k} exceeds the {shortest} ranked tokens")));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let counts: Vec<usize> = rankings[1..].iter().map(|r| intersection(&rankings[0], r, k)).collect();
            let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
            KIntersection {
                k,
                counts,
                mean,
                fraction: mean / k as f64,
            }
        })
        .collect())
}

/// Builds the report from already trained decompositions of one concept.
pub fn intersection_report(decs: &[Decomposition], ks: &[usize]) -> Result<IntersectionReport> {
    let first = decs.first().ok_or_else(|| Error::invalid("runs", "need at least 2 decompositions"))?;
    if decs.iter().any(|d| d.concept != first.concept) {
        return Err(Error::invalid("runs", "decompositions of different concepts"));
    }
    let rankings: Vec<Vec<TokenId>> = decs.iter().map(Decomposition::ranked_ids).collect();
    let per_k = intersection_counts(&rankings, ks)?;
    let runs = decs
        .iter()
        .map(|d| {
            Ok(RunRanking {
                seed: d.seed,
                decomposition_id: d.content_id()?,
                ranked: d.ranked_ids(),
                tokens: d.ranked.iter().map(|r| r.token.clone()).collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(IntersectionReport {
        concept: first.concept.clone(),
        runs,
        per_k,
    })
}

/// Trains one decomposition per seed (each seed gives a disjoint generated
/// corpus and a fresh MLP initialization) and compares their rankings.
pub fn robustness_study(
    subject: &Subject,
    concept: &str,
    seeds: &[u64],
    config: &DecompositionConfig,
    ks: &[usize],
    oracle: &dyn SimilarityOracle,
    progress: &mut dyn FnMut(usize, usize),
) -> Result<(IntersectionReport, Vec<Decomposition>)> {
    if seeds.len() < 2 {
        return Err(Error::invalid("runs", "need at least 2 seeds"));
    }
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(Error::invalid("seeds", "seeds must be distinct"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > config.n) {
        return Err(Error::invalid("ks", format!("k = {k} exceeds n = {}", config.n)));
    }
    let total = seeds.len() * config.max_steps;
    let mut decs = Vec::with_capacity(seeds.len());
    for (r, &seed) in seeds.iter().enumerate() {
        let cfg = DecompositionConfig { seed, ..config.clone() };
        let offset = r * config.max_steps;
        decs.push(decompose(subject, concept, &cfg, oracle, &mut |s, _| progress(offset + s, total))?);
    }
    Ok((intersection_report(&decs, ks)?, decs))
}

/// Mean and sample standard deviation of the per-concept mean intersection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSummary {
    pub k: usize,
    pub mean: f64,
    pub fraction: f64,
    pub std_across_concepts: f64,
}

pub fn summarize(reports: &[IntersectionReport]) -> Vec<KSummary> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    first
        .per_k
        .iter()
        .map(|p| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.at(p.k)).map(|x| x.mean).collect();
            let (mean, std) = mean_std(&vals);
            KSummary {
                k: p.k,
                mean,
                fraction: mean / p.k as f64,
                std_across_concepts: std,
            }
        })
        .collect()
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
