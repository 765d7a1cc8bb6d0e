//! Prompt embeddings: a token→row table standing in for a text encoder.
//!
//! Prompts are unordered bags of attribute tokens; encoding is the mean of
//! the token rows, so it is permutation-invariant and linear — gradients
//! split evenly across the participating rows. Placeholder tokens (bracketed,
//! e.g. `[V]`) are appended at personalization time, initialized from an
//! existing class row so personalization starts exactly at the class meaning.

use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::Normal;
use thiserror::Error;

pub const NULL_TOKEN: &str = "<null>";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("prompt has no tokens")]
    Empty,
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("clean prompt must not contain placeholder `{0}`")]
    PlaceholderInClean(String),
    #[error("personalization prompt needs at least one placeholder token")]
    MissingPlaceholder,
    #[error("placeholder `{0}` must be bracketed like [V]")]
    BadPlaceholderName(String),
    #[error("token `{0}` already in vocabulary")]
    DuplicateToken(String),
}

/// What a prompt is used for; constrains which tokens it may contain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptRole {
    /// The target prompt y the user asks to generate (may carry a placeholder).
    Target,
    /// Clean prompt y^c: the target with every placeholder swapped for its
    /// class token; never contains a placeholder.
    Clean,
    /// Personalization prompt y_P: carries at least one placeholder.
    Personalization,
    /// The dedicated unconditional token.
    Null,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    tokens: Vec<String>,
    role: PromptRole,
}

pub fn is_placeholder(token: &str) -> bool {
    token.len() >= 3 && token.starts_with('[') && token.ends_with(']')
}

impl Prompt {
    /// Parse a whitespace- or comma-separated token list. Never panics on
    /// arbitrary input; role invariants are enforced here.
    pub fn parse(text: &str, role: PromptRole) -> Result<Prompt, PromptError> {
        if role == PromptRole::Null {
            return Ok(Prompt::null());
        }
        let tokens: Vec<String> = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect();
        if tokens.is_empty() {
            return Err(PromptError::Empty);
        }
        match role {
            PromptRole::Clean => {
                if let Some(p) = tokens.iter().find(|t| is_placeholder(t)) {
                    return Err(PromptError::PlaceholderInClean(p.clone()));
                }
            }
            PromptRole::Personalization => {
                if !tokens.iter().any(|t| is_placeholder(t)) {
                    return Err(PromptError::MissingPlaceholder);
                }
            }
            PromptRole::Target | PromptRole::Null => {}
        }
        Ok(Prompt { tokens, role })
    }

    pub fn null() -> Prompt {
        Prompt { tokens: vec![NULL_TOKEN.to_owned()], role: PromptRole::Null }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn role(&self) -> PromptRole {
        self.role
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// The clean counterpart: every placeholder replaced by its class token.
    pub fn to_clean(&self, class_of: impl Fn(&str) -> Option<String>) -> Result<Prompt, PromptError> {
        let tokens = self
            .tokens
            .iter()
            .map(|t| {
                if is_placeholder(t) {
                    class_of(t).ok_or_else(|| PromptError::UnknownToken(t.clone()))
                } else {
                    Ok(t.clone())
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Prompt { tokens, role: PromptRole::Clean })
    }
}

/// Token→row embedding table with a per-row trainable mask.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    rows: Tensor,
    trainable: Vec<bool>,
    /// placeholder token → class token it was initialized from.
    placeholder_class: Vec<(String, String)>,
}

impl EmbeddingTable {
    /// Table over the null token plus the given attribute tokens, rows
    /// `~ 𝒩(0, 1)` per coordinate so conditioning enters the denoiser at the
    /// same scale as image pixels, everything trainable (pretraining mode).
    pub fn with_attributes(attributes: &[&str], dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut tokens = vec![NULL_TOKEN.to_owned()];
        tokens.extend(attributes.iter().map(|s| s.to_string()));
        assert!(
            tokens.iter().all(|t| !is_placeholder(t)),
            "placeholders are added at personalization time"
        );
        let dist = Normal::new(0.0, 1.0).unwrap();
        let n = tokens.len();
        let rows = Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.sample(dist)).collect());
        EmbeddingTable { tokens, rows, trainable: vec![true; n], placeholder_class: Vec::new() }
    }

    /// Reassemble a table from checkpoint fields. The caller (the checkpoint
    /// decoder) validates lengths and token invariants first; these asserts
    /// are a backstop against decoder bugs.
    pub(crate) fn from_raw_parts(
        tokens: Vec<String>,
        rows: Tensor,
        trainable: Vec<bool>,
        placeholder_class: Vec<(String, String)>,
    ) -> Self {
        assert_eq!(rows.shape().len(), 2);
        assert_eq!(rows.shape()[0], tokens.len());
        assert_eq!(trainable.len(), tokens.len());
        EmbeddingTable { tokens, rows, trainable, placeholder_class }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut Tensor {
        &mut self.rows
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn placeholder_classes(&self) -> &[(String, String)] {
        &self.placeholder_class
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.rows.data()[i * d..(i + 1) * d]
    }

    /// Freeze every existing row (end of pretraining).
    pub fn freeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    /// Append a trainable placeholder row cloned from `class_token`'s row.
    pub fn add_placeholder(&mut self, name: &str, class_token: &str) -> Result<(), PromptError> {
        if !is_placeholder(name) {
            return Err(PromptError::BadPlaceholderName(name.to_owned()));
        }
        if self.index_of(name).is_some() {
            return Err(PromptError::DuplicateToken(name.to_owned()));
        }
        let class_idx = self
            .index_of(class_token)
            .ok_or_else(|| PromptError::UnknownToken(class_token.to_owned()))?;
        let class_row = self.row(class_idx).to_vec();
        let d = self.dim();
        let n = self.tokens.len();
        let mut data = self.rows.data().to_vec();
        data.extend_from_slice(&class_row);
        self.rows = Tensor::matrix(n + 1, d, data);
        self.tokens.push(name.to_owned());
        self.trainable.push(true);
        self.placeholder_class.push((name.to_owned(), class_token.to_owned()));
        Ok(())
    }

    /// Row indices of a prompt's tokens, in prompt order.
    pub fn rows_of(&self, prompt: &Prompt) -> Result<Vec<usize>, PromptError> {
        prompt
            .tokens()
            .iter()
            .map(|t| self.index_of(t).ok_or_else(|| PromptError::UnknownToken(t.clone())))
            .collect()
    }

    /// Mean of the prompt's token rows.
    pub fn encode(&self, prompt: &Prompt) -> Result<Vec<f64>, PromptError> {
        let rows = self.rows_of(prompt)?;
        let d = self.dim();
        let mut out = vec![0.0; d];
        for &r in &rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(out)
    }

    /// Taped [`EmbeddingTable::encode`]: mean of rows of the bound table
    /// node, so gradients flow back into the table.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        table_node: NodeId,
        prompt: &Prompt,
    ) -> Result<NodeId, PromptError> {
        let rows = self.rows_of(prompt)?;
        Ok(tape.rows_mean(table_node, &rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(seed: u64) -> EmbeddingTable {
        EmbeddingTable::with_attributes(
            &["photo", "sketch", "square", "circle"],
            8,
            &mut ChaCha12Rng::seed_from_u64(seed),
        )
    }

    #[test]
    fn single_token_prompt_encodes_to_its_row() {
        let t = table(1);
        let p = Prompt::parse("photo", PromptRole::Clean).unwrap();
        let enc = t.encode(&p).unwrap();
        assert_eq!(enc.as_slice(), t.row(t.index_of("photo").unwrap()));
    }

    #[test]
    fn null_prompt_encodes_to_the_null_row() {
        let t = table(1);
        let enc = t.encode(&Prompt::null()).unwrap();
        assert_eq!(enc.as_slice(), t.row(0));
    }

    #[test]
    fn encoding_is_permutation_invariant() {
        let t = table(2);
        let a = t.encode(&Prompt::parse("photo square", PromptRole::Clean).unwrap()).unwrap();
        let b = t.encode(&Prompt::parse("square photo", PromptRole::Clean).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn two_token_gradient_splits_evenly() {
        let mut t = table(3);
        t.add_placeholder("[V]", "square").unwrap();
        let p = Prompt::parse("sketch [V]", PromptRole::Personalization).unwrap();
        let mut tape = Tape::new();
        let table_node = tape.param(t.rows().clone());
        let enc = t.encode_on_tape(&mut tape, table_node, &p).unwrap();
        let root = tape.sum(enc);
        let g = tape.grad(root, &[table_node]).unwrap();
        let d = t.dim();
        let v_row = t.index_of("[V]").unwrap();
        let sketch_row = t.index_of("sketch").unwrap();
        // Upstream gradient of sum is all-ones; each participating row gets ½.
        for c in 0..d {
            assert_eq!(g[0].data()[v_row * d + c], 0.5);
            assert_eq!(g[0].data()[sketch_row * d + c], 0.5);
            assert_eq!(g[0].data()[c], 0.0, "null row untouched");
        }
    }

    #[test]
    fn placeholder_starts_exactly_at_its_class_row() {
        let mut t = table(4);
        t.add_placeholder("[V]", "circle").unwrap();
        let v = t.index_of("[V]").unwrap();
        let c = t.index_of("circle").unwrap();
        assert_eq!(t.row(v), t.row(c));
        assert!(t.trainable_mask()[v]);
    }

    #[test]
    fn role_invariants_are_enforced() {
        assert_eq!(
            Prompt::parse("photo [V]", PromptRole::Clean),
            Err(PromptError::PlaceholderInClean("[V]".into()))
        );
        assert_eq!(
            Prompt::parse("photo square", PromptRole::Personalization),
            Err(PromptError::MissingPlaceholder)
        );
        assert_eq!(Prompt::parse("  ,, ", PromptRole::Target), Err(PromptError::Empty));
        assert!(Prompt::parse("photo [V]", PromptRole::Target).is_ok());
    }

    #[test]
    fn unknown_token_is_an_error_not_a_panic() {
        let t = table(5);
        let p = Prompt::parse("photo nonsense", PromptRole::Clean).unwrap();
        assert_eq!(t.encode(&p), Err(PromptError::UnknownToken("nonsense".into())));
    }

    #[test]
    fn clean_counterpart_swaps_placeholders_for_classes() {
        let mut t = table(6);
        t.add_placeholder("[V]", "square").unwrap();
        let target = Prompt::parse("sketch [V] photo", PromptRole::Target).unwrap();
        let classes: Vec<(String, String)> = t.placeholder_classes().to_vec();
        let clean = target
            .to_clean(|tok| {
                classes.iter().find(|(p, _)| p == tok).map(|(_, c)| c.clone())
            })
            .unwrap();
        assert_eq!(clean.tokens(), ["sketch", "square", "photo"]);
        assert_eq!(clean.role(), PromptRole::Clean);
    }
}
