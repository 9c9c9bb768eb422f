//! Subcommands. Every command accepts `--seed`, `--config <json>` and
//! `--out <dir>`; `--out` doubles as the workspace root.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use concept_lab::analysis::baselines::{basis_seeds, fit_activation_basis, BasisConfig, BasisMethod};
use concept_lab::analysis::generalization::{run_generalization, GeneralizationConfig};
use concept_lab::analysis::report::{emit_report, BaselineSummary, DecompositionSummary, StudyReport};
use concept_lab::analysis::robustness::{robustness_study, TOY_KS};
use concept_lab::analysis::sweep::{default_scales, manipulation_sweep};
use concept_lab::analysis::sample_with_basis;
use concept_lab::concepts::{ConceptSuite, CorpusManifest};
use concept_lab::conceptor::{decompose, Decomposition, DecompositionConfig};
use concept_lab::decomposer::{
    debias, manipulate_seeds, single_image_decompose, RemovalOrder, DEFAULT_TAU,
};
use concept_lab::image::Image;
use concept_lab::oracle::{PooledCosine, SimilarityOracle};
use concept_lab::persist::{load_json, save_json, save_subject, RunKind, RunRecord};
use concept_lab::subject::train::{train_toy_subject, SubjectTrainConfig};
use concept_lab::subject::vocab::VocabConfig;
use concept_lab::subject::{Role, Subject, TokenId, Vocabulary};
use concept_lab::Error;

use crate::config;
use crate::workspace::{load_subject, Workspace};

#[derive(Parser, Debug)]
#[command(name = "concept-lab", version, about = "Sparse token decompositions of a toy diffusion model's concepts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed overriding the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON object overlaid on the command's default config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, also the workspace root.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SubjectArg {
    /// Subject checkpoint; defaults to `<out>/subject.cpsm`.
    #[arg(long)]
    pub subject: Option<PathBuf>,
}

impl SubjectArg {
    fn load(&self, common: &Common) -> anyhow::Result<Subject> {
        let path = self.subject.clone().unwrap_or_else(|| Workspace::new(&common.out).subject_path());
        Ok(load_subject(&path)?)
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum OrderArg {
    Ascending,
    Descending,
}

impl From<OrderArg> for RemovalOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::Ascending => RemovalOrder::AscendingCoefficient,
            OrderArg::Descending => RemovalOrder::DescendingCoefficient,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum MethodArg {
    Pca,
    Kmeans,
    Nmf,
}

impl From<MethodArg> for BasisMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Pca => BasisMethod::Pca,
            MethodArg::Kmeans => BasisMethod::Kmeans,
            MethodArg::Nmf => BasisMethod::Nmf,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic concept corpus and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        per_concept: usize,
    },
    /// Train the subject model and save `<out>/subject.cpsm`.
    TrainSubject {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Learn a decomposition of one concept.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArg,
        #[arg(long)]
        concept: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Print a decomposition's ranked tokens.
    Inspect {
        #[command(flatten)]
        common: Common,
        decomposition: PathBuf,
    },
    /// Reduce a decomposition to the tokens that matter for one image.
    SingleImage {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArg,
        #[arg(long)]
        decomposition: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, value_enum, default_value = "ascending")]
        order: OrderArg,
    },
    /// Generate with scaled coefficients.
    Manipulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArg,
        #[arg(long)]
        decomposition: PathBuf,
        #[arg(long)]
        token: Option<String>,
        #[arg(long)]
        scale: Option<f64>,
        /// `token=scale`, repeatable.
        #[arg(long)]
        edit: Vec<String>,
        /// Sweep `--token` over scales 0, 0.25, ..., 2 and write a study.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Derive a decomposition with some tokens' coefficients reduced.
    Debias {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArg,
        #[arg(long)]
        decomposition: PathBuf,
        #[arg(long, required = true)]
        token: Vec<String>,
        #[arg(long, default_value_t = 0.0)]
        factor: f64,
    },
    /// Train several seeded decompositions per concept and compare rankings.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArg,
        /// Repeatable; defaults to every composite concept.
        #[arg(long)]
        concept: Vec<String>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
    /// Held-out denoising loss of w*, the concept token, w_o and a random token.
    Generalization {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArg,
        #[arg(long)]
        decomposition: PathBuf,
        #[arg(long)]
        test_images: Option<usize>,
    },
    /// Fit an activation basis and sample through it.
    Baseline {
        method: MethodArg,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArg,
        #[arg(long)]
        concept: String,
        #[arg(long)]
        n_components: Option<usize>,
        /// Number of comparison samples.
        #[arg(long, default_value_t = 6)]
        count: usize,
    },
    /// Merge study files and write report.json, tables and plots.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Serve the HTTP API over the workspace at `--out`.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArg,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8000)]
        port: u16,
    },
}

/// 2 for validation errors, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Invalid { .. } | Error::UnknownToken(_)) => 2,
        _ => 1,
    }
}

/// Parses and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn with_seed<T>(mut cfg: T, seed: Option<u64>, set: impl FnOnce(&mut T, u64)) -> T {
    if let Some(s) = seed {
        set(&mut cfg, s);
    }
    cfg
}

fn token_id(vocab: &Vocabulary, name: &str) -> anyhow::Result<TokenId> {
    Ok(vocab.id(name)?)
}

fn load_dec(path: &Path, subject: &Subject) -> anyhow::Result<Decomposition> {
    let dec = Decomposition::load(path).with_context(|| format!("loading {}", path.display()))?;
    dec.verify_against(subject)?;
    Ok(dec)
}

fn parse_edits(vocab: &Vocabulary, token: &Option<String>, scale: Option<f64>, edits: &[String]) -> anyhow::Result<BTreeMap<TokenId, f64>> {
    let mut out = BTreeMap::new();
    match (token, scale) {
        (Some(t), Some(s)) => {
            out.insert(token_id(vocab, t)?, s);
        }
        (None, None) => {}
        (Some(_), None) => return Err(Error::invalid("scale", "--token needs --scale").into()),
        (None, Some(_)) => return Err(Error::invalid("token", "--scale needs --token").into()),
    }
    for e in edits {
        let (t, s) = e
            .split_once('=')
            .ok_or_else(|| Error::invalid("edit", format!("`{e}` is not token=scale")))?;
        let s: f64 = s.parse().map_err(|_| Error::invalid("edit", format!("bad scale in `{e}`")))?;
        out.insert(token_id(vocab, t)?, s);
    }
    Ok(out)
}

fn edits_slug(vocab: &Vocabulary, edits: &BTreeMap<TokenId, f64>) -> String {
    if edits.is_empty() {
        return "unedited".into();
    }
    edits.iter().map(|(t, s)| format!("{}x{s}", vocab.token(*t))).collect::<Vec<_>>().join("_")
}

fn dir(path: PathBuf) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(path)
}

pub fn run(command: Command) -> anyhow::Result<()> {
    let oracle = PooledCosine::default();
    match command {
        Command::GenData { common, per_concept } => {
            let vcfg: VocabConfig = config::load(common.config.as_deref())?;
            let suite = ConceptSuite::default_suite();
            let vocab = Vocabulary::toy(&suite, &vcfg)?;
            let manifest = CorpusManifest::new(&suite, per_concept, common.seed.unwrap_or(0));
            let samples = manifest.regenerate(&vocab)?;
            let data = dir(common.out.join("data"))?;
            save_json(data.join("manifest.json"), &manifest)?;
            let mut counters: BTreeMap<TokenId, usize> = BTreeMap::new();
            for s in &samples {
                let i = counters.entry(s.concept_token_id).or_default();
                let cdir = dir(data.join(vocab.token(s.concept_token_id)))?;
                s.pixels.save_png(cdir.join(format!("{:04}.png", *i)))?;
                *i += 1;
            }
            println!("wrote {} images and {}", samples.len(), data.join("manifest.json").display());
        }
        Command::TrainSubject { common, steps } => {
            let mut cfg = with_seed(config::load::<SubjectTrainConfig>(common.config.as_deref())?, common.seed, |c, s| c.seed = s);
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let ws = Workspace::new(&common.out);
            dir(common.out.clone())?;
            let trained = train_toy_subject(&ConceptSuite::default_suite(), &VocabConfig::default(), &cfg, |step, loss| {
                println!("step {step:>6} loss {loss:.5}");
            })?;
            let path = ws.subject_path();
            save_subject(&trained.subject, &path)?;
            let inputs = BTreeMap::from([("vocab_hash".to_string(), trained.subject.vocab_hash().to_string())]);
            ws.record(RunRecord::new(RunKind::SubjectTrain, &cfg, inputs)?.with_outputs([path.display().to_string()]))?;
            println!("wrote {} (weights {})", path.display(), trained.subject.weights_hash());
        }
        Command::Decompose { common, subject, concept, n, lambda } => {
            let s = subject.load(&common)?;
            let mut cfg = with_seed(config::load::<DecompositionConfig>(common.config.as_deref())?, common.seed, |c, v| c.seed = v);
            if let Some(n) = n {
                cfg.n = n;
            }
            if let Some(l) = lambda {
                cfg.lambda_sparsity = l;
            }
            let dec = decompose(&s, &concept, &cfg, &oracle, &mut |_, _| {})?;
            let ws = Workspace::new(&common.out);
            let (id, path) = ws.save_decomposition(&dec)?;
            let inputs = BTreeMap::from([
                ("subject_hash".to_string(), s.weights_hash().to_string()),
                ("vocab_hash".to_string(), s.vocab_hash().to_string()),
                ("concept".to_string(), concept.clone()),
            ]);
            ws.record(RunRecord::new(RunKind::Decompose, &cfg, inputs)?.with_outputs([path.display().to_string()]))?;
            println!("decomposition {id}");
            println!("wrote {}", path.display());
        }
        Command::Inspect { decomposition, .. } => {
            let dec = Decomposition::load(&decomposition)?;
            for (i, r) in dec.ranked.iter().enumerate() {
                println!("{} {} {}", i + 1, r.token, r.coefficient);
            }
        }
        Command::SingleImage { common, subject, decomposition, tau, order } => {
            let s = subject.load(&common)?;
            let dec = load_dec(&decomposition, &s)?;
            let seed = common.seed.unwrap_or(0);
            let result = single_image_decompose(&s, &dec, seed, tau, order.into(), &oracle)?;
            let out = dir(common.out.join("single-image").join(format!("{}-{seed}", dec.concept)))?;
            save_json(out.join("result.json"), &result)?;
            let all = manipulate_seeds(&s, &dec, &BTreeMap::new(), &[seed])?;
            all[0].save_png(out.join("reference.png"))?;
            for r in &dec.ranked {
                let img = manipulate_seeds(&s, &dec, &BTreeMap::from([(r.token_id, 0.0)]), &[seed])?;
                img[0].save_png(out.join(format!("without_{}.png", r.token)))?;
            }
            let kept: BTreeMap<TokenId, f64> = dec
                .ranked
                .iter()
                .filter(|r| !result.surviving.iter().any(|k| k.token_id == r.token_id))
                .map(|r| (r.token_id, 0.0))
                .collect();
            manipulate_seeds(&s, &dec, &kept, &[seed])?[0].save_png(out.join("final.png"))?;
            let names: Vec<&str> = result.surviving.iter().map(|r| r.token.as_str()).collect();
            println!("surviving after {} passes: {}", result.passes, names.join(" "));
            println!("final similarity {:.4} (tau {tau})", result.final_similarity);
            println!("wrote {}", out.display());
        }
        Command::Manipulate { common, subject, decomposition, token, scale, edit, sweep, count } => {
            let s = subject.load(&common)?;
            let dec = load_dec(&decomposition, &s)?;
            let seed = common.seed.unwrap_or(0);
            if count == 0 {
                return Err(Error::invalid("count", "must be positive").into());
            }
            let seeds: Vec<u64> = (0..count as u64).map(|i| seed + i).collect();
            let out = dir(common.out.join("manipulate"))?;
            if sweep {
                let name = token.as_deref().ok_or_else(|| Error::invalid("token", "--sweep needs --token"))?;
                let tid = token_id(s.vocab(), name)?;
                let (result, images) = manipulation_sweep(&s, &dec, tid, &default_scales(), &seeds, &oracle)?;
                let flat: Vec<Image> = images.into_iter().flatten().collect();
                Image::grid(&flat, seeds.len())?.save_png(out.join(format!("sweep_{}_{name}.png", dec.concept)))?;
                let mut study = StudyReport::new(s.weights_hash(), s.vocab_hash());
                study.seeds.insert("sweep".into(), seeds.clone());
                study.sweeps.push(result.clone());
                let path = out.join(format!("sweep_{}_{name}.json", dec.concept));
                save_json(&path, &study)?;
                for (sc, sim) in result.scales.iter().zip(&result.similarity) {
                    println!("scale {sc:<5} similarity {sim:.4}");
                }
                println!("wrote {}", path.display());
            } else {
                let edits = parse_edits(s.vocab(), &token, scale, &edit)?;
                let images = manipulate_seeds(&s, &dec, &edits, &seeds)?;
                let slug = edits_slug(s.vocab(), &edits);
                for (img, sd) in images.iter().zip(&seeds) {
                    let path = out.join(format!("{}-{slug}-{sd}.png", dec.concept));
                    img.save_png(&path)?;
                    println!("{} {}", img.content_hash()?, path.display());
                }
            }
        }
        Command::Debias { common, subject, decomposition, token, factor } => {
            let s = subject.load(&common)?;
            let dec = load_dec(&decomposition, &s)?;
            let ids = token.iter().map(|t| token_id(s.vocab(), t)).collect::<anyhow::Result<Vec<_>>>()?;
            let derived = debias(&s, &dec, &ids, factor)?;
            let (id, path) = Workspace::new(&common.out).save_decomposition(&derived)?;
            for (i, r) in derived.ranked.iter().enumerate() {
                println!("{} {} {}", i + 1, r.token, r.coefficient);
            }
            println!("decomposition {id}");
            println!("wrote {}", path.display());
        }
        Command::Robustness { common, subject, concept, runs } => {
            let s = subject.load(&common)?;
            let cfg = with_seed(config::load::<DecompositionConfig>(common.config.as_deref())?, common.seed, |c, v| c.seed = v);
            if runs < 2 {
                return Err(Error::invalid("runs", "need at least 2").into());
            }
            let concepts = if concept.is_empty() {
                s.vocab().ids_with_role(Role::Composite).into_iter().map(|t| s.vocab().token(t).to_string()).collect()
            } else {
                concept
            };
            let seeds: Vec<u64> = (0..runs as u64).map(|r| cfg.seed + r).collect();
            let ks: Vec<usize> = TOY_KS.iter().copied().filter(|&k| k <= cfg.n).collect();
            let ws = Workspace::new(&common.out);
            let mut study = StudyReport::new(s.weights_hash(), s.vocab_hash());
            study.seeds.insert("robustness".into(), seeds.clone());
            for c in &concepts {
                let (report, decs) = robustness_study(&s, c, &seeds, &cfg, &ks, &oracle, &mut |_, _| {})?;
                for d in &decs {
                    ws.save_decomposition(d)?;
                    study.decompositions.push(DecompositionSummary::of(d)?);
                }
                let line: Vec<String> = report.per_k.iter().map(|p| format!("top-{} {:.2}", p.k, p.mean)).collect();
                println!("{c}: {}", line.join(", "));
                study.robustness.push(report);
            }
            study.refresh_summary();
            let path = dir(common.out.join("robustness"))?.join("study.json");
            save_json(&path, &study)?;
            println!("wrote {}", path.display());
        }
        Command::Generalization { common, subject, decomposition, test_images } => {
            let s = subject.load(&common)?;
            let dec = load_dec(&decomposition, &s)?;
            let mut cfg = with_seed(config::load::<GeneralizationConfig>(common.config.as_deref())?, common.seed, |c, v| c.seed = v);
            if let Some(n) = test_images {
                cfg.test_images = n;
            }
            let (curve, w_o) = run_generalization(&s, &dec, &cfg, &mut |_, _| {})?;
            let out = dir(common.out.join("generalization").join(format!("{}-{}", dec.concept, dec.seed)))?;
            save_json(out.join("w_opt.json"), &w_o)?;
            let mut study = StudyReport::new(s.weights_hash(), s.vocab_hash());
            study.seeds.insert("generalization".into(), vec![cfg.seed]);
            for c in &curve.curves {
                println!("{:<8} {:+.6} ± {:.6}", c.name, c.overall_mean, c.overall_stderr);
            }
            study.generalization.push(curve);
            save_json(out.join("study.json"), &study)?;
            println!("wrote {}", out.join("study.json").display());
        }
        Command::Baseline { method, common, subject, concept, n_components, count } => {
            let s = subject.load(&common)?;
            let mut cfg = with_seed(config::load::<BasisConfig>(common.config.as_deref())?, common.seed, |c, v| c.seed = v);
            cfg.method = method.into();
            if let Some(n) = n_components {
                cfg.n_components = n;
            }
            let basis = fit_activation_basis(&s, &concept, &cfg)?;
            let cond = s.token_cond(s.vocab().id(&concept)?)?;
            let seeds: Vec<u64> = (0..count as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
            let constrained = sample_with_basis(&s, cond.view(), &basis, &seeds, cfg.guidance)?;
            let plain = s.sample_seeds(cond.view(), &seeds, cfg.guidance, s.schedule().steps())?;
            let sim = constrained.iter().zip(&plain).map(|(a, b)| oracle.sim(a, b)).sum::<f64>() / seeds.len().max(1) as f64;
            let out = dir(common.out.join("baseline").join(format!("{concept}-{}", cfg.method.name())))?;
            save_json(out.join("basis.json"), &basis)?;
            let mut grid = plain.clone();
            grid.extend(constrained);
            Image::grid(&grid, seeds.len())?.save_png(out.join("samples.png"))?;
            let mut study = StudyReport::new(s.weights_hash(), s.vocab_hash());
            study.seeds.insert("baseline_fit".into(), basis_seeds(&cfg));
            study.seeds.insert("baseline_samples".into(), seeds.clone());
            study.baselines.push(BaselineSummary {
                concept: concept.clone(),
                method: cfg.method,
                n_components: basis.n_components(),
                fit_error: basis.meta.error,
                similarity_to_unmodified: sim,
                seeds,
                warnings: basis.meta.warnings.clone(),
            });
            save_json(out.join("study.json"), &study)?;
            println!("{} components, fit error {:.6}, similarity to unmodified {sim:.4}", basis.n_components(), basis.meta.error);
            println!("wrote {}", out.display());
        }
        Command::Report { common, inputs } => {
            let mut merged: Option<StudyReport> = None;
            for p in &inputs {
                let part: StudyReport = load_json(p).with_context(|| format!("reading {}", p.display()))?;
                match merged.as_mut() {
                    None => merged = Some(part),
                    Some(m) => merge(m, part)?,
                }
            }
            let mut report = merged.expect("clap requires one input");
            report.refresh_summary();
            let files = emit_report(&report, &common.out)?;
            println!("wrote {} files under {}", files.len(), common.out.display());
        }
        Command::Serve { common, subject, host, port } => {
            let s = subject.load(&common)?;
            let state = crate::server::AppState::new(Workspace::new(&common.out), s);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::server::serve(state, &host, port))?;
        }
    }
    Ok(())
}

fn merge(into: &mut StudyReport, part: StudyReport) -> anyhow::Result<()> {
    concept_lab::persist::check_hash("study subject_hash", &into.subject_hash, &part.subject_hash)?;
    concept_lab::persist::check_hash("study vocab_hash", &into.vocab_hash, &part.vocab_hash)?;
    for (k, v) in part.seeds {
        into.seeds.entry(k).or_default().extend(v);
    }
    into.decompositions.extend(part.decompositions);
    into.robustness.extend(part.robustness);
    into.generalization.extend(part.generalization);
    into.baselines.extend(part.baselines);
    into.sweeps.extend(part.sweeps);
    Ok(())
}
