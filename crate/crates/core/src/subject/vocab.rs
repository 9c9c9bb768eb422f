//! The frozen toy text encoder: a token embedding table and mean pooling.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concepts::{Attribute, ConceptSuite};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// The unconditional token used by classifier-free guidance.
    Null,
    /// The fixed prompt prefix ("a photo of a").
    Template,
    Atomic,
    Composite,
    Filler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub size: usize,
    pub dim: usize,
    pub seed: u64,
    /// Standard deviation multiplier for filler-token embeddings.
    pub filler_scale: f64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            size: 64,
            dim: 16,
            seed: 0x70_6b_65_6e,
            filler_scale: 0.5,
        }
    }
}

pub const NULL_TOKEN: &str = "<null>";
pub const TEMPLATE_TOKEN: &str = "photo";

/// Embedding table `V` (N x d) with token strings and roles.
///
/// Embedding entries are always representable as `f32`, which is how they
/// are persisted.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    embeddings: Array2<f64>,
    tokens: Vec<String>,
    roles: Vec<Role>,
    version_hash: String,
}

impl Vocabulary {
    pub fn new(embeddings: Array2<f64>, tokens: Vec<String>, roles: Vec<Role>) -> Result<Self> {
        let n = embeddings.nrows();
        if tokens.len() != n || roles.len() != n {
            return Err(Error::shape("Vocabulary::new", n, format!("{} tokens, {} roles", tokens.len(), roles.len())));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embeddings", "non-finite entry"));
        }
        if roles.iter().filter(|r| **r == Role::Null).count() != 1 {
            return Err(Error::invalid("roles", "exactly one null token required"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = tokens.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::invalid("tokens", format!("duplicate token `{dup}`")));
        }
        let embeddings = embeddings.mapv(|v| v as f32 as f64);
        let version_hash = embedding_hash(&embeddings);
        Ok(Self {
            embeddings,
            tokens,
            roles,
            version_hash,
        })
    }

    /// Builds the toy vocabulary for a concept suite: the null token, the
    /// template token, the twelve attribute atoms, one token per composite
    /// concept, and filler tokens up to `config.size`.
    pub fn toy(suite: &ConceptSuite, config: &VocabConfig) -> Result<Self> {
        let mut tokens = vec![NULL_TOKEN.to_string(), TEMPLATE_TOKEN.to_string()];
        let mut roles = vec![Role::Null, Role::Template];
        for attr in Attribute::all() {
            tokens.push(attr.name().to_string());
            roles.push(Role::Atomic);
        }
        for c in &suite.concepts {
            tokens.push(c.name.clone());
            roles.push(Role::Composite);
        }
        if tokens.len() > config.size {
            return Err(Error::invalid("size", format!("need at least {} tokens", tokens.len())));
        }
        let fillers = config.size - tokens.len();
        for i in 0..fillers {
            tokens.push(format!("filler{i:02}"));
            roles.push(Role::Filler);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut embeddings = Array2::<f64>::zeros((config.size, config.dim));
        for (i, mut row) in embeddings.rows_mut().into_iter().enumerate() {
            let scale = if roles[i] == Role::Filler { config.filler_scale } else { 1.0 };
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = scale * z;
            }
        }
        Self::new(embeddings, tokens, roles)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn embedding(&self, id: TokenId) -> ArrayView1<'_, f64> {
        self.embeddings.row(id.index())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    pub fn role(&self, id: TokenId) -> Role {
        self.roles[id.index()]
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| TokenId(i as u32))
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len() as u32).map(TokenId)
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<TokenId> {
        self.ids().filter(|&id| self.role(id) == role).collect()
    }

    pub fn null_id(&self) -> TokenId {
        self.ids_with_role(Role::Null)[0]
    }

    /// The template token. Falls back to the null token when the vocabulary
    /// has none.
    pub fn template_id(&self) -> TokenId {
        self.ids_with_role(Role::Template).first().copied().unwrap_or_else(|| self.null_id())
    }

    /// Digest of the embedding matrix.
    pub fn version_hash(&self) -> &str {
        &self.version_hash
    }

    /// Pseudo-token prompt `[template, <vector>]`.
    pub fn template_prompt(&self, vector: Vec<f64>) -> Prompt {
        Prompt::with_substitution(vec![self.template_id(), self.null_id()], 1, vector)
    }

    /// Token prompt `[template, token]`.
    pub fn token_prompt(&self, token: TokenId) -> Prompt {
        Prompt::new(vec![self.template_id(), token])
    }

    pub fn unconditional_prompt(&self) -> Prompt {
        Prompt::new(vec![self.null_id()])
    }
}

/// SHA-256 over `(N, d)` as little-endian u32 followed by the entries as
/// row-major little-endian f32.
pub fn embedding_hash(embeddings: &Array2<f64>) -> String {
    let mut h = Sha256::new();
    h.update((embeddings.nrows() as u32).to_le_bytes());
    h.update((embeddings.ncols() as u32).to_le_bytes());
    for v in embeddings.iter() {
        h.update((*v as f32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// An ordered token list. Positions listed in `substitutions` use the given
/// raw vector instead of the table row.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Prompt {
    pub token_ids: Vec<TokenId>,
    pub substitutions: BTreeMap<usize, Vec<f64>>,
}

impl Prompt {
    pub fn new(token_ids: Vec<TokenId>) -> Self {
        Self {
            token_ids,
            substitutions: BTreeMap::new(),
        }
    }

    pub fn with_substitution(token_ids: Vec<TokenId>, position: usize, vector: Vec<f64>) -> Self {
        let mut p = Self::new(token_ids);
        p.substitutions.insert(position, vector);
        p
    }
}

/// Mean of the prompt's token embeddings, with substituted positions using
/// their raw vectors.
pub fn encode_prompt(vocab: &Vocabulary, prompt: &Prompt) -> Result<Array1<f64>> {
    if prompt.token_ids.is_empty() {
        return Err(Error::invalid("prompt", "empty prompt"));
    }
    let d = vocab.dim();
    let mut sum = Array1::<f64>::zeros(d);
    for (pos, &id) in prompt.token_ids.iter().enumerate() {
        if let Some(v) = prompt.substitutions.get(&pos) {
            if v.len() != d {
                return Err(Error::shape("encode_prompt substitution", d, v.len()));
            }
            sum += &ArrayView1::from(v.as_slice());
        } else {
            if !vocab.contains(id) {
                return Err(Error::invalid("prompt", format!("token id {id} out of range")));
            }
            sum += &vocab.embedding(id);
        }
    }
    if let Some(&pos) = prompt.substitutions.keys().find(|&&p| p >= prompt.token_ids.len()) {
        return Err(Error::invalid("prompt", format!("substitution position {pos} out of range")));
    }
    Ok(sum / prompt.token_ids.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: TokenId,
    pub token: String,
    pub role: Role,
}

/// JSON form of a vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub version_hash: String,
    pub dim: usize,
    pub tokens: Vec<VocabEntry>,
    pub embeddings: Vec<Vec<f64>>,
}

impl From<&Vocabulary> for VocabularyFile {
    fn from(v: &Vocabulary) -> Self {
        Self {
            version_hash: v.version_hash.clone(),
            dim: v.dim(),
            tokens: v
                .ids()
                .map(|id| VocabEntry {
                    id,
                    token: v.token(id).to_string(),
                    role: v.role(id),
                })
                .collect(),
            embeddings: v.embeddings.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabularyFile) -> Result<Self> {
        let n = f.tokens.len();
        if f.embeddings.len() != n || f.embeddings.iter().any(|r| r.len() != f.dim) {
            return Err(Error::Format {
                what: "vocabulary file",
                reason: "embedding table does not match token count and dim".into(),
            });
        }
        if f.tokens.iter().enumerate().any(|(i, e)| e.id.index() != i) {
            return Err(Error::Format {
                what: "vocabulary file",
                reason: "token ids must be dense and ordered".into(),
            });
        }
        let flat: Vec<f64> = f.embeddings.into_iter().flatten().collect();
        let embeddings = Array2::from_shape_vec((n, f.dim), flat).map_err(|e| Error::Format {
            what: "vocabulary file",
            reason: e.to_string(),
        })?;
        let (tokens, roles) = f.tokens.into_iter().map(|e| (e.token, e.role)).unzip();
        let vocab = Vocabulary::new(embeddings, tokens, roles)?;
        if vocab.version_hash != f.version_hash {
            return Err(Error::integrity("vocabulary hash", f.version_hash, vocab.version_hash));
        }
        Ok(vocab)
    }
}
