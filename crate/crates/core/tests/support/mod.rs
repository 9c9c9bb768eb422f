//! Fixtures and independent checks shared by the integration tests and the
//! acceptance target. Each check returns a one-line summary on success and
//! a description of the violation otherwise.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use concept_lab::analysis::baselines::{record_activations, sample_with_basis, ActivationBasis, BasisMethod};
use concept_lab::concepts::ConceptSuite;
use concept_lab::conceptor::{
    candidate_matrix, decompose, reconstruction_loss, total_loss_and_grad, train_coefficients, CoefficientMlp, Decomposition,
    DecompositionConfig, NoiseDraw, Objective,
};
use concept_lab::decomposer::{generate, single_image_decompose, RemovalOrder, SingleImageResult};
use concept_lab::image::ImageShape;
use concept_lab::oracle::{PooledCosine, SimilarityOracle};
use concept_lab::persist::{load_subject, save_subject};
use concept_lab::subject::train::{train_toy_subject, SubjectTrainConfig};
use concept_lab::subject::vocab::VocabConfig;
use concept_lab::subject::{untrained_subject, DenoiserConfig, NoisePredictor, NoiseSchedule, Role, Subject, TokenId, Vocabulary};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(&mut *rng);
        scale * z
    })
}

/// Null, template and `n` candidate tokens with Gaussian embeddings.
pub fn plain_vocab(n: usize, dim: usize, seed: u64) -> Vocabulary {
    let mut r = rng(seed);
    let emb = gaussian(&mut r, (n + 2, dim), 1.0);
    let mut tokens = vec!["<null>".to_string(), "photo".to_string()];
    let mut roles = vec![Role::Null, Role::Template];
    for i in 0..n {
        tokens.push(format!("t{i:02}"));
        roles.push(Role::Filler);
    }
    Vocabulary::new(emb, tokens, roles).unwrap()
}

pub fn candidates(vocab: &Vocabulary) -> Vec<TokenId> {
    vocab.ids_with_role(Role::Filler)
}

/// Untrained 8x8 subject over the toy vocabulary with a 10-step chain.
pub fn tiny_subject() -> Subject {
    let vcfg = VocabConfig { dim: 8, ..VocabConfig::default() };
    let vocab = Vocabulary::toy(&ConceptSuite::default_suite(), &vcfg).unwrap();
    let dcfg = DenoiserConfig {
        image: ImageShape::new(8, 8, 3),
        hidden: 16,
        blocks: 1,
        time_dim: 4,
        cond_dim: 8,
        steps: 10,
    };
    untrained_subject(vocab, dcfg, 7).unwrap()
}

pub fn tiny_config(seed: u64) -> DecompositionConfig {
    DecompositionConfig {
        n: 4,
        max_steps: 20,
        batch: 2,
        corpus_size: 6,
        val_every: 10,
        val_count: 2,
        hidden: 8,
        seed,
        ..DecompositionConfig::default()
    }
}

pub fn tiny_decomposition(subject: &Subject, concept: &str, seed: u64) -> Decomposition {
    decompose(subject, concept, &tiny_config(seed), &PooledCosine::default(), &mut |_, _| {}).unwrap()
}

/// The default toy subject, trained once and cached under the target
/// directory (or at `CONCEPT_LAB_SUBJECT` when set).
pub fn toy_subject(log: impl Fn(&str)) -> Subject {
    let config = SubjectTrainConfig::default();
    let path = std::env::var_os("CONCEPT_LAB_SUBJECT").map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("toy-subject-{}-{}.cpsm", config.steps, config.seed))
    });
    if path.exists() {
        match load_subject(&path) {
            Ok(s) => {
                log(&format!("using cached subject {} ({})", path.display(), &s.weights_hash()[..12]));
                return s;
            }
            Err(e) => log(&format!("ignoring unreadable cached subject: {e}")),
        }
    }
    log(&format!("training the toy subject for {} steps", config.steps));
    let trained = train_toy_subject(&ConceptSuite::default_suite(), &VocabConfig::default(), &config, |step, loss| {
        if step % 1000 == 0 {
            log(&format!("  step {step} loss {loss:.5}"));
        }
    })
    .unwrap();
    save_subject(&trained.subject, &path).unwrap();
    trained.subject
}

// ---------------------------------------------------------------------------
// gradients

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences of the total objective against the analytic MLP
/// gradient, and of the reconstruction loss against its gradient in the
/// pseudo-token, on a random `d`-dim, `n_tokens`-token, `h`-hidden instance.
pub fn gradient_check(d: usize, n_tokens: usize, h: usize, seed: u64) -> Check {
    let vocab = plain_vocab(n_tokens, d, seed);
    let cands = candidates(&vocab);
    let shape = ImageShape::new(3, 3, 1);
    let mut r = rng(seed + 1);
    let dcfg = DenoiserConfig {
        image: shape,
        hidden: 8,
        blocks: 1,
        time_dim: 4,
        cond_dim: d,
        steps: 10,
    };
    let mut model = concept_lab::subject::Denoiser::<f64>::init(dcfg, &mut r).map_err(|e| e.to_string())?;
    for s in model.param_slices_mut() {
        s.iter_mut().for_each(|v| *v = r.random_range(-0.6..0.6));
    }
    let schedule = NoiseSchedule::linear(10).unwrap();
    let images = gaussian(&mut r, (4, shape.len()), 0.5);
    let obj = Objective {
        model: &model,
        schedule: &schedule,
        vocab: &vocab,
        images: images.view(),
    };
    let x = candidate_matrix(&vocab, &cands).unwrap();
    let draw = NoiseDraw::sample(&mut r, 4, 3, shape.len(), 10);
    let mut mlp = CoefficientMlp::init(d, h, 1.0, &mut r).unwrap();
    let (n, lambda, step) = (4, 0.3, 1e-6);
    let ranked = |m: &CoefficientMlp| {
        let a = m.coefficients(x.view()).unwrap();
        concept_lab::conceptor::build_pseudo_tokens(&vocab, &cands, a.as_slice().unwrap(), n)
            .unwrap()
            .ranked
            .iter()
            .map(|t| t.token_id)
            .collect::<Vec<_>>()
    };
    let base_rank = ranked(&mlp);
    let (_, grads) = total_loss_and_grad(obj, x.view(), &cands, &mlp, &draw, n, lambda).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grads.w1.iter().chain(grads.w2.iter()).copied().collect();
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    let count = analytic.len();
    for (i, &a) in analytic.iter().enumerate() {
        let total_at = |m: &mut CoefficientMlp, delta: f64| {
            let p = param(m, i);
            *p += delta;
            let v = total_loss_and_grad(obj, x.view(), &cands, m, &draw, n, lambda).unwrap().0.total;
            *param(m, i) -= delta;
            v
        };
        let mut probe = mlp.clone();
        *param(&mut probe, i) += step;
        let flipped = ranked(&probe) != base_rank;
        *param(&mut probe, i) -= 2.0 * step;
        if flipped || ranked(&probe) != base_rank {
            return Err(format!("top-{n} set changes within the difference step at parameter {i}"));
        }
        let num = (total_at(&mut mlp, step) - total_at(&mut mlp, -step)) / (2.0 * step);
        worst = worst.max(rel_err(a, num, 1e-3 * scale));
    }
    if worst > 1e-4 {
        return Err(format!("MLP gradient rel. err {worst:.2e} > 1e-4"));
    }

    let pseudo: Array1<f64> = Array1::from_shape_simple_fn(d, || r.random_range(-1.0..1.0));
    let (_, g) = reconstruction_loss(&model, &schedule, &vocab, images.view(), &draw, pseudo.view()).unwrap();
    let gscale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst_c = 0.0f64;
    for j in 0..d {
        let at = |delta: f64| {
            let mut p = pseudo.clone();
            p[j] += delta;
            reconstruction_loss(&model, &schedule, &vocab, images.view(), &draw, p.view()).unwrap().0
        };
        let num = (at(step) - at(-step)) / (2.0 * step);
        worst_c = worst_c.max(rel_err(g[j], num, 1e-3 * gscale));
    }
    if worst_c > 1e-4 {
        return Err(format!("conditioning gradient rel. err {worst_c:.2e} > 1e-4"));
    }
    Ok(format!("{count} MLP parameters max rel. err {worst:.1e}; {d} conditioning entries max rel. err {worst_c:.1e}"))
}

fn param(m: &mut CoefficientMlp, i: usize) -> &mut f64 {
    let n1 = m.w1.len();
    if i < n1 {
        m.w1.as_slice_mut().unwrap().get_mut(i).unwrap()
    } else {
        m.w2.get_mut(i - n1).unwrap()
    }
}

// ---------------------------------------------------------------------------
// linear-denoiser oracle

/// `eps(z_t, t, c) = A c + b + k z_t`.
pub struct LinearStub {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub k: f64,
}

impl NoisePredictor for LinearStub {
    fn image_len(&self) -> usize {
        self.a.nrows()
    }

    fn cond_dim(&self) -> usize {
        self.a.ncols()
    }

    fn predict(&self, z_t: ArrayView2<f64>, _t: &[usize], cond: ArrayView2<f64>) -> concept_lab::Result<Array2<f64>> {
        Ok(cond.dot(&self.a.t()) + &self.b + &(&z_t * self.k))
    }

    fn predict_cond_vjp(
        &self,
        z_t: ArrayView2<f64>,
        t: &[usize],
        cond: ArrayView2<f64>,
        upstream: &mut dyn FnMut(&Array2<f64>) -> Array2<f64>,
    ) -> concept_lab::Result<(Array2<f64>, Array2<f64>)> {
        let pred = self.predict(z_t, t, cond)?;
        let g = upstream(&pred);
        Ok((pred.clone(), g.dot(&self.a)))
    }
}

pub struct LinearOracleOutcome {
    pub optimum: f64,
    pub cone_optimum: f64,
    pub learned: f64,
    pub initial: f64,
}

impl LinearOracleOutcome {
    pub fn ratio(&self) -> f64 {
        self.learned / self.optimum
    }
}

/// Trains the coefficient MLP against a linear stub with `lambda = 0` and
/// compares `L_rec(w*_N)` on a large fixed evaluation draw with the
/// least-squares optimum over all conditioning vectors on that draw.
/// Checkpoints are selected on a separate validation draw.
pub fn linear_oracle(max_steps: usize, seed: u64) -> LinearOracleOutcome {
    let (d, p, n_tok, n_img) = (8, 16, 16, 12);
    let vocab = plain_vocab(n_tok, d, seed);
    let cands = candidates(&vocab);
    let mut r = rng(seed + 11);
    let a = gaussian(&mut r, (p, d), 2.0);
    // the optimum sits inside the cone of the candidates
    let e = |i: usize| vocab.embedding(cands[i]).to_owned();
    let w_true = e(1) * 0.8 + e(5) * 1.2 + e(9) * 1.0;
    let c_true = (&vocab.embedding(vocab.template_id()) + &w_true) / 2.0;
    let stub = LinearStub {
        b: -a.dot(&c_true),
        a,
        k: 0.2,
    };
    let mut images = gaussian(&mut r, (n_img, p), 0.5);
    let mean = images.mean_axis(ndarray::Axis(0)).unwrap();
    images -= &mean;
    let schedule = NoiseSchedule::linear(100).unwrap();
    let obj = Objective {
        model: &stub,
        schedule: &schedule,
        vocab: &vocab,
        images: images.view(),
    };
    let config = DecompositionConfig {
        n: n_tok,
        lambda_sparsity: 0.0,
        max_steps,
        corpus_size: n_img,
        seed,
        ..DecompositionConfig::default()
    };
    // checkpoints are selected on a held-out draw, as with the image oracle
    let val_rows: Vec<usize> = (0..n_img).flat_map(|i| std::iter::repeat_n(i, 50)).collect();
    let val_draw = NoiseDraw::for_images(&mut rng(seed + 77), val_rows, p, schedule.steps());
    let mut validate = |w: &Array1<f64>| {
        reconstruction_loss(&stub, &schedule, &vocab, images.view(), &val_draw, w.view()).map(|(l, _)| -l)
    };
    let trained = train_coefficients(obj, &cands, &config, Some(&mut validate), &mut |_, _| {}).unwrap();

    // evaluation objective: every image, 400 fixed draws each
    let rows: Vec<usize> = (0..n_img).flat_map(|i| std::iter::repeat_n(i, 400)).collect();
    let draw = NoiseDraw::for_images(&mut rng(seed + 99), rows, p, schedule.steps());
    let z = draw.noised(&schedule, images.view()).unwrap();
    // y_r = eps_r - b - k z_r; L(c) = mean ||A c - y_r||^2 / p
    let y = &draw.eps - &stub.b - &(&z * stub.k);
    let loss = |c: &Array1<f64>| {
        let ac = stub.a.dot(c);
        let diff = &y - &ac;
        diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64
    };
    let am = DMatrix::from_fn(p, d, |i, j| stub.a[[i, j]]);
    let ybar = y.mean_axis(ndarray::Axis(0)).unwrap();
    let rhs = am.transpose() * DVector::from_iterator(p, ybar.iter().copied());
    let c_opt = (am.transpose() * &am).cholesky().expect("A has full column rank").solve(&rhs);
    let c_opt = Array1::from_iter(c_opt.iter().copied());
    let cond_of = |w: &Array1<f64>| (&vocab.embedding(vocab.template_id()) + w) / 2.0;
    let w_learned = trained.pseudo.w_star_full.clone();
    // the same problem restricted to nonnegative token combinations, by
    // projected gradient; equal to the optimum when the MLP can reach it
    let e = candidate_matrix(&vocab, &cands).unwrap();
    let template = vocab.embedding(vocab.template_id()).to_owned();
    let m = stub.a.dot(&e.t()) / 2.0;
    let target = &ybar - &(stub.a.dot(&template) / 2.0);
    let step = 1.0 / m.t().dot(&m).iter().map(|v| v.abs()).sum::<f64>();
    let mut alpha = Array1::<f64>::zeros(cands.len());
    for _ in 0..50_000 {
        let g = m.t().dot(&(m.dot(&alpha) - &target));
        alpha = (&alpha - &(g * step)).mapv(|v| v.max(0.0));
    }
    LinearOracleOutcome {
        cone_optimum: loss(&cond_of(&e.t().dot(&alpha))),
        optimum: loss(&c_opt),
        learned: loss(&cond_of(&w_learned)),
        initial: loss(&cond_of(&Array1::zeros(d))),
    }
}

// ---------------------------------------------------------------------------
// single-image decomposition

/// Checks the greedy removal contracts on `dec` for one seed: at most `n`
/// passes, every removal at or above `tau`, zero-coefficient tokens gone
/// in pass 1, and a bit-exact replay of every traced similarity.
pub fn single_image_contracts(subject: &Subject, dec: &Decomposition, seed: u64, tau: f64, order: RemovalOrder) -> Check {
    let oracle = PooledCosine::default();
    let res: SingleImageResult = single_image_decompose(subject, dec, seed, tau, order, &oracle).map_err(|e| e.to_string())?;
    if res.passes > dec.n {
        return Err(format!("{} passes for n = {}", res.passes, dec.n));
    }
    for e in &res.trace {
        if e.removed && e.similarity < tau {
            return Err(format!("{} removed at similarity {} < tau", e.token, e.similarity));
        }
        if !e.removed && e.similarity >= tau {
            return Err(format!("{} kept at similarity {} >= tau", e.token, e.similarity));
        }
    }
    for r in dec.ranked.iter().filter(|r| r.coefficient == 0.0) {
        let hit = res.trace.iter().find(|e| e.token_id == r.token_id).ok_or("zero token never tried")?;
        if !(hit.removed && hit.pass_index == 1) {
            return Err(format!("zero-coefficient {} not removed in pass 1", r.token));
        }
    }
    // replay
    let mut current: Vec<(TokenId, f64)> = dec.ranked.iter().map(|r| (r.token_id, r.coefficient)).collect();
    let reference = generate(subject, dec, &current, &[seed]).map_err(|e| e.to_string())?.remove(0);
    for e in &res.trace {
        let without: Vec<(TokenId, f64)> = current.iter().copied().filter(|(t, _)| *t != e.token_id).collect();
        let image = generate(subject, dec, &without, &[seed]).map_err(|e| e.to_string())?.remove(0);
        let s = oracle.sim(&reference, &image);
        if s.to_bits() != e.similarity.to_bits() {
            return Err(format!("replay of {} gives {s}, trace says {}", e.token, e.similarity));
        }
        if e.removed {
            current = without;
        }
    }
    let surviving: Vec<TokenId> = res.surviving.iter().map(|r| r.token_id).collect();
    let replayed: Vec<TokenId> = current.iter().map(|(t, _)| *t).collect();
    if surviving != replayed {
        return Err("replayed survivors differ from the reported ones".into());
    }
    Ok(format!(
        "{} passes, {} of {} tokens kept, {} trace entries replayed",
        res.passes,
        surviving.len(),
        dec.n,
        res.trace.len()
    ))
}

/// `dec` with the coefficients of the tokens at `ranks` set to zero and the
/// ranking rebuilt, as an edited decomposition.
pub fn with_zeroed(subject: &Subject, dec: &Decomposition, ranks: &[usize]) -> Decomposition {
    let ids: Vec<TokenId> = ranks.iter().map(|&i| dec.ranked[i].token_id).collect();
    concept_lab::decomposer::debias(subject, dec, &ids, 0.0).unwrap()
}

// ---------------------------------------------------------------------------
// baselines

/// Full-rank PCA reproduces unmodified samples; NMF components are
/// nonnegative; k-means with one centroid per sample has zero error.
pub fn baseline_sanity(subject: &Subject, concept: &str, images: usize, timesteps: &[usize], sample_seeds: &[u64]) -> Check {
    let hidden = subject.model().config().hidden;
    let token = subject.vocab().id(concept).map_err(|e| e.to_string())?;
    let guidance = concept_lab::subject::sampler::DEFAULT_GUIDANCE;
    let seeds: Vec<u64> = (0..images as u64).map(|i| (1 << 40) | i).collect();
    let x = record_activations(subject, token, &seeds, timesteps, guidance).map_err(|e| e.to_string())?;
    if x.nrows() <= hidden {
        return Err(format!("{} activation rows cannot give full rank in {hidden} dims", x.nrows()));
    }
    let pca = ActivationBasis::fit(BasisMethod::Pca, x.view(), hidden, false, 0).map_err(|e| e.to_string())?;
    let mut pca = pca;
    pca.meta.subject_hash = subject.weights_hash().to_string();
    let cond = subject.token_cond(token).map_err(|e| e.to_string())?;
    let plain = subject.sample_seeds(cond.view(), sample_seeds, guidance, subject.schedule().steps()).map_err(|e| e.to_string())?;
    let hooked = sample_with_basis(subject, cond.view(), &pca, sample_seeds, guidance).map_err(|e| e.to_string())?;
    let max_diff = plain
        .iter()
        .zip(&hooked)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).collect::<Vec<_>>())
        .fold(0.0f64, f64::max);
    if max_diff > 1e-5 {
        return Err(format!("full-rank PCA changes samples by {max_diff:.2e} per pixel"));
    }

    let nmf = ActivationBasis::fit(BasisMethod::Nmf, x.view(), 8.min(hidden), false, 0).map_err(|e| e.to_string())?;
    let negatives = nmf.components.iter().flatten().filter(|v| !(**v >= 0.0)).count();
    if negatives > 0 {
        return Err(format!("{negatives} negative NMF component entries"));
    }

    let rows = x.nrows().min(40);
    let sub = x.slice(ndarray::s![..rows, ..]);
    let km = ActivationBasis::fit(BasisMethod::Kmeans, sub, rows, false, 3).map_err(|e| e.to_string())?;
    let km_error: f64 = sub
        .rows()
        .into_iter()
        .map(|r| km.components.iter().map(|c| r.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).fold(f64::INFINITY, f64::min))
        .sum();
    if km_error != 0.0 || km.meta.error != 0.0 {
        return Err(format!("k-means with n_c = {rows} samples has error {km_error:e} (reported {:e})", km.meta.error));
    }
    Ok(format!(
        "PCA({hidden}) max pixel diff {max_diff:.1e} over {} samples; NMF({}) min entry {:.2e}; k-means({rows}) error 0",
        sample_seeds.len(),
        nmf.n_components(),
        nmf.components.iter().flatten().fold(f64::INFINITY, |m, v| m.min(*v))
    ))
}

/// Atoms of a concept's composition, as token ids.
pub fn atom_ids(subject: &Subject, concept: &str) -> [TokenId; 3] {
    let suite = ConceptSuite::default_suite();
    suite.spec(subject.vocab(), concept).unwrap().atom_token_ids()
}

pub fn top_k(dec: &Decomposition, k: usize) -> Vec<TokenId> {
    dec.ranked.iter().take(k).map(|r| r.token_id).collect()
}

pub fn names(subject: &Subject, ids: &[TokenId]) -> String {
    ids.iter().map(|t| subject.vocab().token(*t)).collect::<Vec<_>>().join(" ")
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn counts_by<K: Ord + Clone>(items: &[K]) -> BTreeMap<K, usize> {
    let mut m = BTreeMap::new();
    for i in items {
        *m.entry(i.clone()).or_insert(0) += 1;
    }
    m
}
