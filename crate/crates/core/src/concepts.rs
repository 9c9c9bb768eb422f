//! Procedural concept images with known compositional ground truth.
//!
//! Every composite concept is exactly one shape, one color and one texture.
//! The renderer is a pure function of `(composition, jitter, seed)`, so a
//! corpus can be regenerated bit-exactly from its manifest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::subject::vocab::{TokenId, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Stripes,
    Dots,
    Checker,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    /// RGB in `[-1, 1]`.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Solid, Texture::Stripes, Texture::Dots, Texture::Checker];

    /// Whether the texture's foreground is lit at shape-local coordinates.
    fn lit(self, u: f64, v: f64) -> bool {
        match self {
            Texture::Solid => true,
            Texture::Stripes => (v / 3.0).floor().rem_euclid(2.0) == 0.0,
            Texture::Dots => {
                let du = u.rem_euclid(6.0) - 3.0;
                let dv = v.rem_euclid(6.0) - 3.0;
                du * du + dv * dv <= 4.0
            }
            Texture::Checker => ((u / 4.0).floor() + (v / 4.0).floor()).rem_euclid(2.0) == 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Shape,
    Color,
    Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Shape(Shape),
    Color(Color),
    Texture(Texture),
}

impl Attribute {
    pub fn all() -> Vec<Attribute> {
        Shape::ALL
            .iter()
            .map(|&s| Attribute::Shape(s))
            .chain(Color::ALL.iter().map(|&c| Attribute::Color(c)))
            .chain(Texture::ALL.iter().map(|&t| Attribute::Texture(t)))
            .collect()
    }

    pub fn kind(self) -> AttributeKind {
        match self {
            Attribute::Shape(_) => AttributeKind::Shape,
            Attribute::Color(_) => AttributeKind::Color,
            Attribute::Texture(_) => AttributeKind::Texture,
        }
    }

    /// The vocabulary string naming this attribute.
    pub fn name(self) -> &'static str {
        match self {
            Attribute::Shape(Shape::Circle) => "circle",
            Attribute::Shape(Shape::Square) => "square",
            Attribute::Shape(Shape::Triangle) => "triangle",
            Attribute::Shape(Shape::Cross) => "cross",
            Attribute::Color(Color::Red) => "red",
            Attribute::Color(Color::Green) => "green",
            Attribute::Color(Color::Blue) => "blue",
            Attribute::Color(Color::Yellow) => "yellow",
            Attribute::Texture(Texture::Solid) => "solid",
            Attribute::Texture(Texture::Stripes) => "stripes",
            Attribute::Texture(Texture::Dots) => "dots",
            Attribute::Texture(Texture::Checker) => "checker",
        }
    }

    pub fn from_name(name: &str) -> Option<Attribute> {
        Attribute::all().into_iter().find(|a| a.name() == name)
    }
}

/// An attribute bound to its vocabulary token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttributeAtom {
    pub attribute: Attribute,
    pub token_id: TokenId,
}

impl AttributeAtom {
    pub fn resolve(vocab: &Vocabulary, attribute: Attribute) -> Result<Self> {
        Ok(Self {
            attribute,
            token_id: vocab.id(attribute.name())?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub shape: Shape,
    pub color: Color,
    pub texture: Texture,
}

impl Composition {
    pub const fn new(shape: Shape, color: Color, texture: Texture) -> Self {
        Self { shape, color, texture }
    }

    pub fn attributes(&self) -> [Attribute; 3] {
        [
            Attribute::Shape(self.shape),
            Attribute::Color(self.color),
            Attribute::Texture(self.texture),
        ]
    }

    /// All 64 shape/color/texture combinations in a fixed order.
    pub fn all() -> Vec<Composition> {
        let mut out = Vec::with_capacity(64);
        for &shape in &Shape::ALL {
            for &color in &Color::ALL {
                for &texture in &Texture::ALL {
                    out.push(Composition::new(shape, color, texture));
                }
            }
        }
        out
    }

    pub fn from_names(names: &[impl AsRef<str>]) -> Result<Self> {
        let mut shape = None;
        let mut color = None;
        let mut texture = None;
        for name in names {
            let name = name.as_ref();
            match Attribute::from_name(name) {
                Some(Attribute::Shape(s)) if shape.is_none() => shape = Some(s),
                Some(Attribute::Color(c)) if color.is_none() => color = Some(c),
                Some(Attribute::Texture(t)) if texture.is_none() => texture = Some(t),
                Some(_) => return Err(Error::invalid("atoms", format!("duplicate attribute kind at `{name}`"))),
                None => return Err(Error::UnknownToken(name.to_string())),
            }
        }
        match (shape, color, texture) {
            (Some(s), Some(c), Some(t)) if names.len() == 3 => Ok(Composition::new(s, c, t)),
            _ => Err(Error::invalid("atoms", "need exactly one shape, one color and one texture")),
        }
    }
}

/// Render-noise ranges. Every draw is uniform in `[-range, range]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub position_px: f64,
    pub scale_frac: f64,
    pub rotation_deg: f64,
    pub pixel_noise_sigma: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        position_px: 0.0,
        scale_frac: 0.0,
        rotation_deg: 0.0,
        pixel_noise_sigma: 0.0,
    };
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            position_px: 4.0,
            scale_frac: 0.15,
            rotation_deg: 0.0,
            pixel_noise_sigma: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeConceptSpec {
    name: String,
    concept_token_id: TokenId,
    atoms: [AttributeAtom; 3],
    jitter: Jitter,
}

impl CompositeConceptSpec {
    /// Binds a composition to the vocabulary. The concept token must exist
    /// and be distinct from every atom token.
    pub fn new(vocab: &Vocabulary, name: &str, composition: Composition, jitter: Jitter) -> Result<Self> {
        let concept_token_id = vocab.id(name)?;
        let attrs = composition.attributes();
        let atoms = [
            AttributeAtom::resolve(vocab, attrs[0])?,
            AttributeAtom::resolve(vocab, attrs[1])?,
            AttributeAtom::resolve(vocab, attrs[2])?,
        ];
        if atoms.iter().any(|a| a.token_id == concept_token_id) {
            return Err(Error::invalid("concept", format!("`{name}` shares a token with its atoms")));
        }
        if jitter.pixel_noise_sigma < 0.0 || jitter.scale_frac < 0.0 || jitter.scale_frac >= 1.0 {
            return Err(Error::invalid("jitter", "ranges must be non-negative and scale below 1"));
        }
        Ok(Self {
            name: name.to_string(),
            concept_token_id,
            atoms,
            jitter,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn concept_token_id(&self) -> TokenId {
        self.concept_token_id
    }

    pub fn atoms(&self) -> &[AttributeAtom; 3] {
        &self.atoms
    }

    pub fn atom_token_ids(&self) -> [TokenId; 3] {
        [self.atoms[0].token_id, self.atoms[1].token_id, self.atoms[2].token_id]
    }

    pub fn jitter(&self) -> &Jitter {
        &self.jitter
    }

    pub fn composition(&self) -> Composition {
        let pick = |kind| self.atoms.iter().map(|a| a.attribute).find(|a| a.kind() == kind);
        match (
            pick(AttributeKind::Shape),
            pick(AttributeKind::Color),
            pick(AttributeKind::Texture),
        ) {
            (Some(Attribute::Shape(s)), Some(Attribute::Color(c)), Some(Attribute::Texture(t))) => {
                Composition::new(s, c, t)
            }
            _ => unreachable!("atoms cover all kinds by construction"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Image,
    pub concept_token_id: TokenId,
    pub seed: u64,
}

/// Renders a composition on a mid-gray background. Unlit texture cells use a
/// quarter-intensity shade of the color.
pub fn render_composition(composition: &Composition, jitter: &Jitter, shape: ImageShape, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |range: f64| rng.random_range(-1.0..=1.0) * range;
    let dx = uniform(jitter.position_px);
    let dy = uniform(jitter.position_px);
    let scale = 1.0 + uniform(jitter.scale_frac);
    let theta = uniform(jitter.rotation_deg).to_radians();

    let (h, w, channels) = (shape.height, shape.width, shape.channels);
    let cx = w as f64 / 2.0 + dx;
    let cy = h as f64 / 2.0 + dy;
    let r = 0.28 * (h.min(w) as f64) * scale;
    let (sin, cos) = theta.sin_cos();
    let rgb = composition.color.rgb();

    let mut data = vec![0.0; shape.len()];
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            let u = cos * px + sin * py;
            let v = -sin * px + cos * py;
            if !inside(composition.shape, u, v, r) {
                continue;
            }
            let gain = if composition.texture.lit(u, v) { 1.0 } else { 0.25 };
            let base = (y * w + x) * channels;
            for ch in 0..channels {
                data[base + ch] = gain * rgb[ch % 3];
            }
        }
    }

    if jitter.pixel_noise_sigma > 0.0 {
        for v in &mut data {
            let n: f64 = rng.sample(StandardNormal);
            *v += jitter.pixel_noise_sigma * n;
        }
    }
    for v in &mut data {
        *v = v.clamp(-1.0, 1.0);
    }
    Image::new(shape, data).expect("buffer sized from shape")
}

fn inside(shape: Shape, u: f64, v: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => u * u + v * v <= r * r,
        Shape::Square => u.abs() <= 0.85 * r && v.abs() <= 0.85 * r,
        Shape::Triangle => v >= -r && v <= 0.8 * r && u.abs() <= (v + r) / 1.8,
        Shape::Cross => {
            let arm = r / 3.0;
            (u.abs() <= arm && v.abs() <= r) || (v.abs() <= arm && u.abs() <= r)
        }
    }
}

pub fn render_image(spec: &CompositeConceptSpec, seed: u64) -> ImageSample {
    ImageSample {
        pixels: render_composition(&spec.composition(), &spec.jitter, ImageShape::default(), seed),
        concept_token_id: spec.concept_token_id,
        seed,
    }
}

/// Per-image seed: `master ^ (concept_index * 2^32 + i)`.
pub fn corpus_seed(master: u64, concept_index: usize, i: usize) -> u64 {
    master ^ (((concept_index as u64) << 32).wrapping_add(i as u64))
}

pub fn build_corpus(specs: &[CompositeConceptSpec], per_concept: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if specs.is_empty() {
        return Err(Error::invalid("specs", "empty concept list"));
    }
    if per_concept == 0 {
        return Err(Error::invalid("per_concept", "must be at least 1"));
    }
    let mut out = Vec::with_capacity(specs.len() * per_concept);
    for (ci, spec) in specs.iter().enumerate() {
        for i in 0..per_concept {
            out.push(render_image(spec, corpus_seed(seed, ci, i)));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConcept {
    pub name: String,
    pub composition: Composition,
}

/// A named set of composite concepts sharing one jitter setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSuite {
    pub version: String,
    pub concepts: Vec<SuiteConcept>,
    pub jitter: Jitter,
}

pub const DEFAULT_SUITE_VERSION: &str = "toy-shapes-v1";

impl ConceptSuite {
    /// Five composite concepts; pairs share at most one attribute and every
    /// attribute value occurs at least once.
    pub fn default_suite() -> Self {
        use Color::*;
        use Shape::*;
        use Texture::*;
        let concepts = [
            ("gleeb", Composition::new(Circle, Red, Solid)),
            ("wump", Composition::new(Square, Green, Stripes)),
            ("trell", Composition::new(Triangle, Blue, Dots)),
            ("zorp", Composition::new(Cross, Yellow, Checker)),
            ("blick", Composition::new(Square, Red, Dots)),
        ]
        .into_iter()
        .map(|(name, composition)| SuiteConcept {
            name: name.to_string(),
            composition,
        })
        .collect();
        Self {
            version: DEFAULT_SUITE_VERSION.to_string(),
            concepts,
            jitter: Jitter::default(),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.concepts.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Result<&SuiteConcept> {
        self.concepts
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownToken(name.to_string()))
    }

    pub fn specs(&self, vocab: &Vocabulary) -> Result<Vec<CompositeConceptSpec>> {
        self.concepts
            .iter()
            .map(|c| CompositeConceptSpec::new(vocab, &c.name, c.composition, self.jitter))
            .collect()
    }

    pub fn spec(&self, vocab: &Vocabulary, name: &str) -> Result<CompositeConceptSpec> {
        let c = self.get(name)?;
        CompositeConceptSpec::new(vocab, &c.name, c.composition, self.jitter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestConcept {
    pub token: String,
    pub atoms: Vec<String>,
    pub per_concept: usize,
}

/// On-disk description of a rendered corpus, sufficient to regenerate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub suite_version: String,
    pub master_seed: u64,
    pub concepts: Vec<ManifestConcept>,
}

impl CorpusManifest {
    pub fn new(suite: &ConceptSuite, per_concept: usize, master_seed: u64) -> Self {
        Self {
            suite_version: suite.version.clone(),
            master_seed,
            concepts: suite
                .concepts
                .iter()
                .map(|c| ManifestConcept {
                    token: c.name.clone(),
                    atoms: c.composition.attributes().iter().map(|a| a.name().to_string()).collect(),
                    per_concept,
                })
                .collect(),
        }
    }

    /// Reconstructs the suite. Jitter is fixed by the suite version.
    pub fn suite(&self) -> Result<ConceptSuite> {
        if self.suite_version != DEFAULT_SUITE_VERSION {
            return Err(Error::integrity(
                "corpus manifest suite version",
                DEFAULT_SUITE_VERSION,
                self.suite_version.clone(),
            ));
        }
        let concepts = self
            .concepts
            .iter()
            .map(|c| {
                Ok(SuiteConcept {
                    name: c.token.clone(),
                    composition: Composition::from_names(&c.atoms)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ConceptSuite {
            version: self.suite_version.clone(),
            concepts,
            jitter: Jitter::default(),
        })
    }

    /// Regenerates the exact corpus this manifest describes.
    pub fn regenerate(&self, vocab: &Vocabulary) -> Result<Vec<ImageSample>> {
        let suite = self.suite()?;
        let specs = suite.specs(vocab)?;
        let mut out = Vec::new();
        for (ci, (spec, entry)) in specs.iter().zip(&self.concepts).enumerate() {
            if entry.per_concept == 0 {
                return Err(Error::invalid("per_concept", "must be at least 1"));
            }
            for i in 0..entry.per_concept {
                out.push(render_image(spec, corpus_seed(self.master_seed, ci, i)));
            }
        }
        Ok(out)
    }
}
