//! Standard noise-prediction training of the subject denoiser, with
//! caption dropout to the null token for classifier-free guidance.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::concepts::{build_corpus, render_composition, Composition, ConceptSuite, ImageSample, Jitter};
use crate::error::{Error, Result};
use crate::image::ImageShape;
use crate::optim::Adam;
use crate::subject::denoiser::{mse_and_grad, Denoiser, DenoiserConfig};
use crate::subject::schedule::NoiseSchedule;
use crate::subject::vocab::{encode_prompt, Prompt, TokenId, Vocabulary};
use crate::subject::Subject;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the caption with the null token.
    pub p_uncond: f64,
    /// Probability that a concept image is captioned with its concept token
    /// rather than with its attributes.
    pub p_concept_caption: f64,
    /// Probability that an attribute caption is given as one weighted
    /// mixture vector in the pseudo-token slot instead of as tokens.
    pub p_mixture: f64,
    /// Extra attribute-captioned renders per shape/color/texture combination.
    pub renders_per_combination: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub warmup_steps: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for SubjectTrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 64,
            lr: 1e-3,
            p_uncond: 0.1,
            p_concept_caption: 0.5,
            p_mixture: 0.5,
            renders_per_combination: 8,
            hidden: 256,
            blocks: 2,
            time_dim: 32,
            warmup_steps: 200,
            log_every: 100,
            seed: 0,
        }
    }
}

impl SubjectTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::invalid("p_uncond", "must be a probability"));
        }
        if !(0.0..=1.0).contains(&self.p_mixture) {
            return Err(Error::invalid("p_mixture", "must be a probability"));
        }
        if !(0.0..=1.0).contains(&self.p_concept_caption) {
            return Err(Error::invalid("p_concept_caption", "must be a probability"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        Ok(())
    }

    pub fn denoiser(&self, image: ImageShape, cond_dim: usize, steps: usize) -> DenoiserConfig {
        DenoiserConfig {
            image,
            hidden: self.hidden,
            blocks: self.blocks,
            time_dim: self.time_dim,
            cond_dim,
            steps,
        }
    }

    /// Learning rate after linear warmup, cosine-decayed to a tenth.
    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps.min(self.steps)).max(1) as f64;
        let frac = (step - self.warmup_steps) as f64 / span;
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Caption {
    /// A concept image: captioned by its concept token or its attributes.
    Concept { concept: TokenId, atoms: [TokenId; 3] },
    /// An attribute-only render.
    Atoms([TokenId; 3]),
}

/// Training images with the captions they may be paired with.
pub struct SubjectDataset {
    shape: ImageShape,
    images: Array2<f32>,
    captions: Vec<Caption>,
}

impl SubjectDataset {
    /// The concept corpus plus `renders_per_combination` attribute-captioned
    /// renders of every shape/color/texture combination.
    pub fn build(
        vocab: &Vocabulary,
        suite: &ConceptSuite,
        corpus: &[ImageSample],
        renders_per_combination: usize,
        seed: u64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("corpus", "empty corpus"));
        }
        let specs = suite.specs(vocab)?;
        let atom_ids = |c: &Composition| -> Result<[TokenId; 3]> {
            let a = c.attributes();
            Ok([vocab.id(a[0].name())?, vocab.id(a[1].name())?, vocab.id(a[2].name())?])
        };
        let shape = corpus[0].pixels.shape();
        let mut rows: Vec<f32> = Vec::new();
        let mut captions = Vec::new();
        for sample in corpus {
            let spec = specs
                .iter()
                .find(|s| s.concept_token_id() == sample.concept_token_id)
                .ok_or_else(|| Error::invalid("corpus", "sample concept not in suite"))?;
            if sample.pixels.shape() != shape {
                return Err(Error::shape("subject corpus", shape, sample.pixels.shape()));
            }
            rows.extend(sample.pixels.data().iter().map(|&v| v as f32));
            captions.push(Caption::Concept {
                concept: spec.concept_token_id(),
                atoms: spec.atom_token_ids(),
            });
        }
        let jitter: Jitter = suite.jitter;
        for (ci, comp) in Composition::all().iter().enumerate() {
            for i in 0..renders_per_combination {
                let s = seed ^ (0xA70Au64 << 48) ^ ((ci as u64) << 32) ^ i as u64;
                let img = render_composition(comp, &jitter, shape, s);
                rows.extend(img.data().iter().map(|&v| v as f32));
                captions.push(Caption::Atoms(atom_ids(comp)?));
            }
        }
        let images = Array2::from_shape_vec((captions.len(), shape.len()), rows).expect("rows sized by shape");
        Ok(Self {
            shape,
            images,
            captions,
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    /// Standard deviation over every pixel value of every image.
    pub fn pixel_std(&self) -> f64 {
        let n = self.images.len() as f64;
        let mean = self.images.iter().map(|&v| v as f64).sum::<f64>() / n;
        (self.images.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// A random caption. Concept images get their concept token with
    /// probability `p_concept`; otherwise a caption describes a non-empty
    /// subset of the attributes (all three half the time), either as tokens
    /// after the template token or, with probability `p_mixture`, as one
    /// substituted vector holding a positively weighted sum of the attribute
    /// embeddings.
    fn draw_caption<R: Rng>(
        &self,
        i: usize,
        vocab: &Vocabulary,
        p_concept: f64,
        p_mixture: f64,
        rng: &mut R,
    ) -> Prompt {
        let template = vocab.template_id();
        let atoms = match self.captions[i] {
            Caption::Concept { concept, atoms } => {
                if rng.random::<f64>() < p_concept {
                    return Prompt::new(vec![template, concept]);
                }
                atoms
            }
            Caption::Atoms(atoms) => atoms,
        };
        let u: f64 = rng.random();
        let subset: Vec<TokenId> = if u < 0.5 {
            atoms.to_vec()
        } else if u < 0.8 {
            let skip = rng.random_range(0..3);
            atoms.iter().enumerate().filter(|(k, _)| *k != skip).map(|(_, a)| *a).collect()
        } else {
            vec![atoms[rng.random_range(0..3)]]
        };
        if rng.random::<f64>() < p_mixture {
            let mut v = vec![0.0; vocab.dim()];
            for &a in &subset {
                let c = rng.random_range(MIXTURE_WEIGHTS);
                for (dst, &e) in v.iter_mut().zip(vocab.embedding(a).iter()) {
                    *dst += c * e;
                }
            }
            return vocab.template_prompt(v);
        }
        let mut tokens = vec![template];
        tokens.extend(subset);
        Prompt::new(tokens)
    }
}

/// Range of the per-attribute weights in mixture captions.
const MIXTURE_WEIGHTS: std::ops::Range<f64> = 0.5..1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTrainLog {
    pub config: SubjectTrainConfig,
    pub num_params: usize,
    /// `(step, mean loss since the previous entry)`.
    pub losses: Vec<(usize, f64)>,
}

pub struct TrainedSubject {
    pub subject: Subject,
    pub log: SubjectTrainLog,
}

/// Trains a fresh denoiser with Adam on the noise-prediction loss and
/// returns it frozen. Runs in `f32`; the frozen copy is widened to `f64`
/// exactly.
#[allow(clippy::needless_range_loop)]
pub fn train_subject(
    vocab: &Vocabulary,
    schedule: &NoiseSchedule,
    dataset: &SubjectDataset,
    config: &SubjectTrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainedSubject> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("corpus", "empty corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dcfg = config.denoiser(dataset.shape(), vocab.dim(), schedule.steps());
    let mut model = Denoiser::<f32>::init(dcfg, &mut rng)?;
    model.init_skip(schedule.alpha_bar(), dataset.pixel_std())?;
    let mut grads = Denoiser::<f32>::zeros(dcfg);
    let sizes: Vec<usize> = model.param_blocks().iter().map(|b| b.data.len()).collect();
    let mut adam = Adam::<f32>::new(config.lr, &sizes);

    let null = encode_prompt(vocab, &vocab.unconditional_prompt())?;
    let (b, dim, cdim) = (config.batch, dataset.shape().len(), vocab.dim());
    let total_t = schedule.steps();
    let ab = schedule.alpha_bar();

    let mut log = SubjectTrainLog {
        config: config.clone(),
        num_params: sizes.iter().sum(),
        losses: Vec::new(),
    };
    let mut running = 0.0;
    let mut since = 0usize;
    let mut z_t = Array2::<f32>::zeros((b, dim));
    let mut eps = Array2::<f32>::zeros((b, dim));
    let mut cond = Array2::<f32>::zeros((b, cdim));
    let mut ts = vec![0usize; b];

    for step in 0..config.steps {
        for r in 0..b {
            let i = rng.random_range(0..dataset.len());
            let c = if rng.random::<f64>() < config.p_uncond {
                null.clone()
            } else {
                let caption = dataset.draw_caption(i, vocab, config.p_concept_caption, config.p_mixture, &mut rng);
                encode_prompt(vocab, &caption)?
            };
            cond.row_mut(r).assign(&c.mapv(|v| v as f32));
            let t = rng.random_range(1..=total_t);
            ts[r] = t;
            let (sa, sn) = (ab[t].sqrt() as f32, (1.0 - ab[t]).sqrt() as f32);
            let x = dataset.images.row(i);
            let mut e_row = eps.row_mut(r);
            let mut z_row = z_t.row_mut(r);
            for k in 0..dim {
                let n: f64 = StandardNormal.sample(&mut rng);
                let n = n as f32;
                e_row[k] = n;
                z_row[k] = sa * x[k] + sn * n;
            }
        }
        let (out, tape) = model.forward_tape(z_t.view(), &ts, cond.view())?;
        let (loss, d_out) = mse_and_grad(&out, eps.view());
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "subject training loss",
                step,
                value: loss,
            });
        }
        model.backward(z_t.view(), &tape, &d_out, &mut grads);
        let gblocks: Vec<&[f32]> = grads.param_blocks().into_iter().map(|p| p.data).collect();
        adam.step_with_lr(model.param_slices_mut(), &gblocks, config.lr_at(step));

        running += loss;
        since += 1;
        if (step + 1) % config.log_every.max(1) == 0 || step + 1 == config.steps {
            let mean = running / since as f64;
            log.losses.push((step + 1, mean));
            progress(step + 1, mean);
            running = 0.0;
            since = 0;
        }
    }

    let subject = Subject::new(vocab.clone(), schedule.clone(), model.cast::<f64>())?;
    Ok(TrainedSubject { subject, log })
}

/// Mean noise-prediction loss of `model` on `images` under each image's
/// prompt, with `(eps, t)` drawn from `seed`.
pub fn denoising_loss(
    model: &Denoiser<f64>,
    schedule: &NoiseSchedule,
    images: ArrayView2<f64>,
    conds: ArrayView2<f64>,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, dim) = images.dim();
    let mut z_t = Array2::<f64>::zeros((n, dim));
    let mut eps = Array2::<f64>::zeros((n, dim));
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(1..=schedule.steps());
        ts.push(t);
        for k in 0..dim {
            eps[[i, k]] = StandardNormal.sample(&mut rng);
        }
        let row = schedule.noise_image(
            images.row(i).as_slice().expect("contiguous"),
            eps.row(i).as_slice().expect("contiguous"),
            t,
        )?;
        z_t.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    let out = model.forward(z_t.view(), &ts, conds)?;
    Ok(mse_and_grad(&out, eps.view()).0)
}

/// Diffusion steps of the toy subject.
pub const TOY_DIFFUSION_STEPS: usize = 100;
/// Concept images per suite concept in the subject's training corpus.
pub const TOY_CORPUS_PER_CONCEPT: usize = 100;

/// The whole recipe for the default subject: toy vocabulary over `suite`,
/// linear schedule, rendered corpus (master seed `config.seed`) and
/// attribute renders (seed `config.seed + 1`).
pub fn train_toy_subject(
    suite: &ConceptSuite,
    vocab_config: &crate::subject::vocab::VocabConfig,
    config: &SubjectTrainConfig,
    progress: impl FnMut(usize, f64),
) -> Result<TrainedSubject> {
    config.validate()?;
    let vocab = Vocabulary::toy(suite, vocab_config)?;
    let schedule = NoiseSchedule::linear(TOY_DIFFUSION_STEPS)?;
    let corpus = build_corpus(&suite.specs(&vocab)?, TOY_CORPUS_PER_CONCEPT, config.seed)?;
    let data = SubjectDataset::build(&vocab, suite, &corpus, config.renders_per_combination, config.seed.wrapping_add(1))?;
    train_subject(&vocab, &schedule, &data, config, progress)
}

/// A randomly initialized subject, for tests and fixtures that need a
/// working pipeline but not a meaningful model. Unlike a fresh training
/// run the output head is random too, so the prediction depends on the
/// conditioning; the skip gain is set as in training.
pub fn untrained_subject(vocab: Vocabulary, config: DenoiserConfig, seed: u64) -> Result<Subject> {
    let schedule = NoiseSchedule::linear(config.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Denoiser::<f32>::init(config, &mut rng)?;
    let bound = 1.0 / (config.hidden as f32).sqrt();
    let mut slices = model.param_slices_mut();
    let n = slices.len();
    slices[n - 3].iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
    model.init_skip(schedule.alpha_bar(), 0.5)?;
    Subject::new(vocab, schedule, model.cast())
}
