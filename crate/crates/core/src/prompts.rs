//! Per-bin text prompts and the frozen text-embedding bank built from them.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bins::{Bin, BinPolicy};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt '{prompt}' has {tokens} tokens, context length is {limit}")]
    ContextOverflow {
        prompt: String,
        tokens: usize,
        limit: usize,
    },
    #[error("text encoder failed: {0}")]
    Encoder(String),
    #[error("embedding bank needs at least one prompt")]
    Empty,
}

/// Grammar switches for prompt rendering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStyle {
    /// Render the zero bin as "There are 0 people" instead of the literal
    /// singular form.
    #[serde(default)]
    pub natural_zero: bool,
}

pub fn prompt_for_bin(bin: &Bin) -> String {
    prompt_for_bin_styled(bin, PromptStyle::default())
}

pub fn prompt_for_bin_styled(bin: &Bin, style: PromptStyle) -> String {
    match bin.hi {
        None => format!("There are more than {} people", bin.lo),
        Some(hi) if hi == bin.lo => {
            let b = bin.lo;
            if b > 1 || (b == 0 && style.natural_zero) {
                format!("There are {b} people")
            } else {
                format!("There is {b} person")
            }
        }
        Some(hi) => format!("There are between {} and {} people", bin.lo, hi),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    prompts: Vec<String>,
}

impl PromptSet {
    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn from_prompts(prompts: Vec<String>) -> Self {
        PromptSet { prompts }
    }

    /// Line-delimited dump, one prompt per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for p in &self.prompts {
            out.push_str(p);
            out.push('\n');
        }
        out
    }
}

pub fn build_prompt_set(policy: &BinPolicy) -> PromptSet {
    build_prompt_set_styled(policy, PromptStyle::default())
}

pub fn build_prompt_set_styled(policy: &BinPolicy, style: PromptStyle) -> PromptSet {
    PromptSet {
        prompts: policy
            .bins()
            .iter()
            .map(|b| prompt_for_bin_styled(b, style))
            .collect(),
    }
}

/// Checks the grammar rules of a prompt set against its policy and returns
/// one message per problem.
pub fn check_prompt_set(ps: &PromptSet, policy: &BinPolicy, style: PromptStyle) -> Vec<String> {
    let mut problems = Vec::new();
    if ps.len() != policy.len() {
        problems.push(format!(
            "{} prompts for {} bins",
            ps.len(),
            policy.len()
        ));
        return problems;
    }
    for (k, (prompt, bin)) in ps.prompts().iter().zip(policy.bins()).enumerate() {
        if prompt.is_empty() || !prompt.is_ascii() {
            problems.push(format!("prompt {k} is empty or not ASCII"));
        }
        let singular = bin.is_singleton() && bin.lo <= 1 && !(bin.lo == 0 && style.natural_zero);
        let words: Vec<&str> = prompt.split(' ').collect();
        if words.contains(&"is") != singular {
            problems.push(format!("prompt {k} '{prompt}': wrong verb number"));
        }
        if words.contains(&"people") == singular {
            problems.push(format!("prompt {k} '{prompt}': wrong noun number"));
        }
        if *prompt != prompt_for_bin_styled(bin, style) {
            problems.push(format!("prompt {k} '{prompt}' does not match bin {bin}"));
        }
    }
    problems
}

/// A frozen text encoder mapping a prompt to a fixed-width vector.
pub trait TextEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn context_length(&self) -> usize;
    fn tokenize(&self, prompt: &str) -> Vec<String>;
    fn encode(&self, prompt: &str) -> Result<Vec<f64>, PromptError>;
}

/// Deterministic stand-in for a pretrained text encoder: each token seeds a
/// Gaussian vector, and a prompt embeds to the position-weighted sum of its
/// token vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTextEncoder {
    pub width: usize,
    pub seed: u64,
}

impl HashTextEncoder {
    pub const CONTEXT_LENGTH: usize = 77;

    pub fn new(width: usize, seed: u64) -> Self {
        HashTextEncoder { width, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        (0..self.width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

impl TextEncoder for HashTextEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn context_length(&self) -> usize {
        Self::CONTEXT_LENGTH
    }

    fn tokenize(&self, prompt: &str) -> Vec<String> {
        prompt
            .split_whitespace()
            .map(|t| t.to_ascii_lowercase())
            .collect()
    }

    fn encode(&self, prompt: &str) -> Result<Vec<f64>, PromptError> {
        let tokens = self.tokenize(prompt);
        let mut out = vec![0.0; self.width];
        for (pos, tok) in tokens.iter().enumerate() {
            let weight = 1.0 / (1.0 + pos as f64).sqrt();
            for (o, v) in out.iter_mut().zip(self.token_vector(tok)) {
                *o += weight * v;
            }
        }
        Ok(out)
    }
}

/// Unit-normalized text embeddings, one row per bin, in bin order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingBank {
    embeddings: Array2<f64>,
    frozen: bool,
}

impl TextEmbeddingBank {
    /// Wraps rows as-is after normalizing each to unit length.
    pub fn from_rows(mut embeddings: Array2<f64>) -> Result<Self, PromptError> {
        if embeddings.nrows() == 0 {
            return Err(PromptError::Empty);
        }
        for mut row in embeddings.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(PromptError::Encoder("zero or non-finite embedding".into()));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(TextEmbeddingBank {
            embeddings,
            frozen: true,
        })
    }

    /// Wraps rows that are already unit length, bit for bit (e.g. a bank
    /// restored from a checkpoint).
    pub fn from_normalized(embeddings: Array2<f64>) -> Result<Self, PromptError> {
        if embeddings.nrows() == 0 {
            return Err(PromptError::Empty);
        }
        if embeddings.rows().into_iter().any(|r| (r.dot(&r) - 1.0).abs() > 1e-9) {
            return Err(PromptError::Encoder("rows are not unit length".into()));
        }
        Ok(TextEmbeddingBank {
            embeddings,
            frozen: true,
        })
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn n(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn width(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// SHA-256 over the little-endian bytes of every entry.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n() as u64).to_le_bytes());
        h.update((self.width() as u64).to_le_bytes());
        for v in self.embeddings.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn embed_prompts(
    ps: &PromptSet,
    encoder: &dyn TextEncoder,
) -> Result<TextEmbeddingBank, PromptError> {
    if ps.is_empty() {
        return Err(PromptError::Empty);
    }
    let d = encoder.width();
    let mut rows = Array2::zeros((ps.len(), d));
    for (k, prompt) in ps.prompts().iter().enumerate() {
        let tokens = encoder.tokenize(prompt).len();
        // +2 for start/end markers
        if tokens + 2 > encoder.context_length() {
            return Err(PromptError::ContextOverflow {
                prompt: prompt.clone(),
                tokens,
                limit: encoder.context_length(),
            });
        }
        let v = encoder.encode(prompt)?;
        if v.len() != d {
            return Err(PromptError::Encoder(format!(
                "encoder returned width {} instead of {d}",
                v.len()
            )));
        }
        rows.row_mut(k).assign(&ndarray::Array1::from(v));
    }
    TextEmbeddingBank::from_rows(rows)
}
