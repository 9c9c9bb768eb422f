//! Training the coefficient MLP, and the unconstrained optimized token.

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conceptor::loss::{conditioned_loss_value, reconstruction_loss, sparsity_loss, NoiseDraw};
use crate::conceptor::mlp::{CoefficientMlp, MlpGrads};
use crate::conceptor::pseudo::{build_pseudo_tokens, PseudoTokens};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::subject::denoiser::NoisePredictor;
use crate::subject::{encode_prompt, NoiseSchedule, TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecompositionConfig {
    /// Number of tokens kept in `w*`.
    pub n: usize,
    pub lambda_sparsity: f64,
    pub lr: f64,
    pub max_steps: usize,
    pub batch: usize,
    /// Validate every this many steps; 0 disables validation and keeps the
    /// final weights.
    pub val_every: usize,
    pub val_count: usize,
    /// Hidden width of the coefficient MLP.
    pub hidden: usize,
    /// Scale of the MLP's initial output weights.
    pub init_scale: f64,
    /// Keep only the `top_m` tokens with the lowest single-token denoising
    /// loss; `None` keeps every non-null token.
    pub top_m: Option<usize>,
    /// Leave the concept's own token out of the candidates.
    pub exclude_concept_token: bool,
    /// Generated concept images to decompose.
    pub corpus_size: usize,
    pub guidance: f64,
    /// Sampler steps for generated images; `None` uses every diffusion step.
    pub sample_steps: Option<usize>,
    pub seed: u64,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            n: 8,
            lambda_sparsity: 0.001,
            lr: 1e-3,
            max_steps: 500,
            batch: 6,
            val_every: 50,
            val_count: 20,
            hidden: 64,
            init_scale: 0.1,
            top_m: None,
            exclude_concept_token: true,
            corpus_size: 100,
            guidance: crate::subject::sampler::DEFAULT_GUIDANCE,
            sample_steps: None,
            seed: 1024,
        }
    }
}

impl DecompositionConfig {
    /// The values used at the original, full-vocabulary scale.
    pub fn full_vocabulary() -> Self {
        Self {
            n: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n", "must be positive"));
        }
        if !(self.lambda_sparsity >= 0.0 && self.lambda_sparsity.is_finite()) {
            return Err(Error::invalid("lambda_sparsity", "must be finite and nonnegative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be positive"));
        }
        if self.val_every > 0 && self.val_count == 0 {
            return Err(Error::invalid("val_count", "must be positive when validating"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden", "must be positive"));
        }
        if self.corpus_size < self.batch {
            return Err(Error::invalid("corpus_size", "must be at least the batch size"));
        }
        if let Some(m) = self.top_m {
            if m < self.n {
                return Err(Error::invalid("n", format!("{} exceeds top_m = {m}", self.n)));
            }
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::invalid("guidance", "must be finite and nonnegative"));
        }
        if self.sample_steps == Some(0) {
            return Err(Error::invalid("sample_steps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub reconstruction: f64,
    pub sparsity: f64,
    pub total: f64,
    /// The sparsity term was undefined (a zero vector) and contributed 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub step: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepLog>,
    #[serde(default)]
    pub validations: Vec<ValidationLog>,
    /// Step whose weights were kept (the best validation, else the last).
    pub selected_step: usize,
    #[serde(default)]
    pub selected_score: Option<f64>,
}

/// The frozen pieces the objective reads.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub model: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
    pub vocab: &'a Vocabulary,
    /// Target images, one per row.
    pub images: ArrayView2<'a, f64>,
}

impl Objective<'_> {
    fn check(&self, batch: usize) -> Result<()> {
        if self.images.nrows() == 0 {
            return Err(Error::invalid("corpus", "no concept images"));
        }
        if self.images.nrows() < batch {
            return Err(Error::invalid("batch", format!("exceeds the {} concept images", self.images.nrows())));
        }
        if self.images.ncols() != self.model.image_len() {
            return Err(Error::shape("concept images", self.model.image_len(), self.images.ncols()));
        }
        if self.vocab.dim() != self.model.cond_dim() {
            return Err(Error::shape("vocabulary dim", self.model.cond_dim(), self.vocab.dim()));
        }
        Ok(())
    }

    fn draw_rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1ce_0000_0000)
    }
}

/// Trained coefficients before they are wrapped with provenance.
#[derive(Clone, Debug)]
pub struct TrainedCoefficients {
    pub mlp: CoefficientMlp,
    pub alpha: Vec<f64>,
    pub pseudo: PseudoTokens,
    pub log: TrainingLog,
}

/// Validation callback: scores a truncated pseudo-token, higher is better.
pub type Validator<'a> = dyn FnMut(&Array1<f64>) -> Result<f64> + 'a;

pub fn candidate_matrix(vocab: &Vocabulary, candidates: &[TokenId]) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((candidates.len(), vocab.dim()));
    for (mut row, &id) in x.rows_mut().into_iter().zip(candidates) {
        if !vocab.contains(id) {
            return Err(Error::UnknownToken(id.to_string()));
        }
        row.assign(&vocab.embedding(id));
    }
    Ok(x)
}

/// Coefficients and pseudo-tokens of `mlp` over `candidates`.
pub fn evaluate_mlp(mlp: &CoefficientMlp, vocab: &Vocabulary, candidates: &[TokenId], n: usize) -> Result<(Vec<f64>, PseudoTokens)> {
    let x = candidate_matrix(vocab, candidates)?;
    let alpha = mlp.coefficients(x.view())?.to_vec();
    let pseudo = build_pseudo_tokens(vocab, candidates, &alpha, n)?;
    Ok((alpha, pseudo))
}

/// `L_rec(w*_N) + lambda (1 - cos(w*, w*_N))` on one draw, and its gradient
/// with respect to the MLP weights. `x` holds the candidates' embeddings.
/// The returned log entry has `step` 0.
pub fn total_loss_and_grad(
    obj: Objective<'_>,
    x: ArrayView2<f64>,
    candidates: &[TokenId],
    mlp: &CoefficientMlp,
    draw: &NoiseDraw,
    n: usize,
    lambda: f64,
) -> Result<(StepLog, MlpGrads)> {
    if x.nrows() != candidates.len() {
        return Err(Error::shape("candidate embeddings", candidates.len(), x.nrows()));
    }
    let (alpha, tape) = mlp.forward_tape(x)?;
    let pseudo = build_pseudo_tokens(obj.vocab, candidates, alpha.as_slice().unwrap(), n)?;
    let (rec, d_full) = reconstruction_loss(obj.model, obj.schedule, obj.vocab, obj.images, draw, pseudo.w_star_full.view())?;
    let sp = sparsity_loss(pseudo.w_star.view(), pseudo.w_star_full.view())?;
    let g_full = &d_full + &(&sp.grad_full * lambda);
    let g_star = &sp.grad_star * lambda;
    let mut d_alpha = x.dot(&g_full);
    for r in &pseudo.ranked {
        let i = candidates.iter().position(|c| *c == r.token_id).expect("ranked token is a candidate");
        d_alpha[i] += x.row(i).dot(&g_star);
    }
    let grads = mlp.backward(x, &tape, &d_alpha);
    let entry = StepLog {
        step: 0,
        reconstruction: rec,
        sparsity: sp.value,
        total: rec + lambda * sp.value,
        degenerate: sp.degenerate,
    };
    Ok((entry, grads))
}

/// Optimizes the coefficient MLP with Adam on
/// `L_rec(w*_N) + lambda (1 - cos(w*, w*_N))`.
pub fn train_coefficients(
    obj: Objective<'_>,
    candidates: &[TokenId],
    config: &DecompositionConfig,
    mut validate: Option<&mut Validator<'_>>,
    progress: &mut dyn FnMut(usize, usize),
) -> Result<TrainedCoefficients> {
    config.validate()?;
    obj.check(config.batch)?;
    if config.n > candidates.len() {
        return Err(Error::invalid(
            "n",
            format!("{} exceeds the {} candidate tokens", config.n, candidates.len()),
        ));
    }
    let x = candidate_matrix(obj.vocab, candidates)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw_rng = Objective::draw_rng(config.seed);
    let mut mlp = CoefficientMlp::init(obj.vocab.dim(), config.hidden, config.init_scale, &mut init_rng)?;
    let mut adam = Adam::<f64>::new(config.lr, &mlp.param_sizes());
    let lambda = config.lambda_sparsity;
    let (n_img, dim, steps) = (obj.images.nrows(), obj.images.ncols(), obj.schedule.steps());

    let mut log = TrainingLog::default();
    let mut best: Option<(f64, usize, CoefficientMlp)> = None;
    for step in 1..=config.max_steps {
        let draw = NoiseDraw::sample(&mut draw_rng, n_img, config.batch, dim, steps);
        let (entry, grads) = total_loss_and_grad(obj, x.view(), candidates, &mlp, &draw, config.n, lambda)
            .map_err(|e| with_step(e, step))?;
        if !entry.total.is_finite() {
            return Err(Error::NonFinite {
                what: "decomposition loss",
                step,
                value: entry.total,
            });
        }
        adam.step(mlp.param_slices_mut(), &grads.slices());
        log.steps.push(StepLog { step, ..entry });

        if let Some(v) = validate.as_deref_mut() {
            if config.val_every > 0 && step % config.val_every == 0 {
                let (_, p) = evaluate_mlp(&mlp, obj.vocab, candidates, config.n)?;
                let score = v(&p.w_star)?;
                log.validations.push(ValidationLog { step, score });
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, step, mlp.clone()));
                }
            }
        }
        progress(step, config.max_steps);
    }

    let mlp = match best {
        Some((score, step, m)) => {
            log.selected_step = step;
            log.selected_score = Some(score);
            m
        }
        None => {
            log.selected_step = config.max_steps;
            mlp
        }
    };
    let (alpha, pseudo) = evaluate_mlp(&mlp, obj.vocab, candidates, config.n)?;
    Ok(TrainedCoefficients { mlp, alpha, pseudo, log })
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { what, value, .. } => Error::NonFinite { what, step, value },
        other => other,
    }
}

/// An unconstrained embedding trained on the reconstruction loss alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizedToken {
    pub vector: Vec<f64>,
    /// Token whose embedding the vector started from.
    pub init_token: TokenId,
    pub losses: Vec<f64>,
}

/// Adam on a free vector in the pseudo-token slot, starting at
/// `init_token`'s embedding, with the same draw protocol as
/// [`train_coefficients`] for the same seed.
pub fn optimize_token(
    obj: Objective<'_>,
    init_token: TokenId,
    config: &DecompositionConfig,
    progress: &mut dyn FnMut(usize, usize),
) -> Result<OptimizedToken> {
    config.validate()?;
    obj.check(config.batch)?;
    if !obj.vocab.contains(init_token) {
        return Err(Error::UnknownToken(init_token.to_string()));
    }
    let mut w = obj.vocab.embedding(init_token).to_owned();
    let mut draw_rng = Objective::draw_rng(config.seed);
    let mut adam = Adam::<f64>::new(config.lr, &[w.len()]);
    let (n_img, dim, steps) = (obj.images.nrows(), obj.images.ncols(), obj.schedule.steps());
    let mut losses = Vec::with_capacity(config.max_steps);
    for step in 1..=config.max_steps {
        let draw = NoiseDraw::sample(&mut draw_rng, n_img, config.batch, dim, steps);
        let (rec, g) = reconstruction_loss(obj.model, obj.schedule, obj.vocab, obj.images, &draw, w.view())
            .map_err(|e| with_step(e, step))?;
        adam.step(vec![w.as_slice_mut().unwrap()], &[g.as_slice().unwrap()]);
        losses.push(rec);
        progress(step, config.max_steps);
    }
    Ok(OptimizedToken {
        vector: w.to_vec(),
        init_token,
        losses,
    })
}

/// Mean reconstruction loss of `[template, pseudo]` over `draws` seeded
/// passes through all target images.
pub fn evaluate_reconstruction(obj: Objective<'_>, pseudo: &[f64], seed: u64, draws: usize) -> Result<f64> {
    let cond = encode_prompt(obj.vocab, &obj.vocab.template_prompt(pseudo.to_vec()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws.max(1) {
        let draw = NoiseDraw::for_images(&mut rng, (0..obj.images.nrows()).collect(), obj.images.ncols(), obj.schedule.steps());
        total += conditioned_loss_value(obj.model, obj.schedule, obj.images, &draw, cond.view())?;
    }
    Ok(total / draws.max(1) as f64)
}

/// Mean single-token denoising loss of each non-null token, as
/// `[template, token]`, over a fixed seeded draw on up to 32 target images.
pub fn token_scores(obj: Objective<'_>, seed: u64) -> Result<Vec<(TokenId, f64)>> {
    if obj.images.nrows() == 0 {
        return Err(Error::invalid("corpus", "no concept images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = obj.images.nrows().min(32);
    let images: Vec<usize> = (0..count).flat_map(|i| [i, i]).collect();
    let draw = NoiseDraw::for_images(&mut rng, images, obj.images.ncols(), obj.schedule.steps());
    let null = obj.vocab.null_id();
    obj.vocab
        .ids()
        .filter(|&id| id != null)
        .map(|id| {
            let cond = encode_prompt(obj.vocab, &obj.vocab.token_prompt(id))?;
            Ok((id, conditioned_loss_value(obj.model, obj.schedule, obj.images, &draw, cond.view())?))
        })
        .collect()
}

/// The `top_m` non-null tokens with the lowest single-token denoising loss,
/// in ascending id order.
pub fn filter_vocabulary(obj: Objective<'_>, top_m: usize, seed: u64) -> Result<Vec<TokenId>> {
    let non_null = obj.vocab.len() - 1;
    if top_m > non_null {
        return Err(Error::invalid("top_m", format!("{top_m} exceeds the {non_null} non-null tokens")));
    }
    if top_m == non_null {
        let null = obj.vocab.null_id();
        return Ok(obj.vocab.ids().filter(|&id| id != null).collect());
    }
    let mut scores = token_scores(obj, seed)?;
    scores.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<TokenId> = scores.into_iter().take(top_m).map(|(id, _)| id).collect();
    keep.sort();
    Ok(keep)
}
