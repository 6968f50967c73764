//! Instruction templates and text embedding providers.
//!
//! Instructions name a transition between two expressions ("Turn this face
//! from disgust to happiness."). A pluggable [`EmbeddingProvider`] turns the
//! rendered text into an L x d matrix: the [`HashingEmbedder`] is a
//! deterministic stand-in that maps each (token, position) pair to a fixed
//! unit-norm Gaussian row, while the [`LookupEmbedder`] serves precomputed
//! embeddings (e.g. real CLIP outputs loaded from an archive).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng;

/// Number of instruction templates.
pub const TEMPLATE_COUNT: u8 = 5;

/// Default embedding shape of the full-scale text encoder.
pub const FULL_EMBED_ROWS: usize = 77;
pub const FULL_EMBED_DIM: usize = 768;

/// Ordered expression label set.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpressionVocabulary {
    labels: Vec<String>,
}

impl ExpressionVocabulary {
    /// The seven-expression set used with posed lab recordings.
    pub fn ck_plus() -> Self {
        Self::from_labels(
            ["happiness", "disgust", "anger", "fear", "surprise", "contempt", "sadness"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .expect("built-in vocabulary is valid")
    }

    /// The in-the-wild set: the seven expressions plus neutral.
    pub fn celebv_hq() -> Self {
        let mut labels: Vec<String> = ExpressionVocabulary::ck_plus().labels;
        labels.push("neutral".to_string());
        Self::from_labels(labels).expect("built-in vocabulary is valid")
    }

    /// Validates that labels are unique, lowercase, and non-empty.
    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("vocabulary must not be empty".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.chars().any(|c| c.is_uppercase()) {
                return Err(Error::Validation(format!(
                    "label {l:?} (index {i}) must be lowercase and non-empty"
                )));
            }
            if labels[..i].contains(l) {
                return Err(Error::Validation(format!("duplicate label {l:?}")));
            }
        }
        Ok(ExpressionVocabulary { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// All ordered pairs of distinct labels.
    pub fn ordered_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for a in &self.labels {
            for b in &self.labels {
                if a != b {
                    out.push((a.clone(), b.clone()));
                }
            }
        }
        out
    }
}

/// A rendered instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Instruction {
    pub template_id: u8,
    pub expr_from: String,
    pub expr_to: String,
    pub text: String,
}

/// Renders template `template_id` (1-5) with the two labels.
///
/// Template 5 is rendered with its stray brackets normalized away; a lookup
/// archive may still carry the original surface string as a key.
pub fn render_instruction(
    template_id: u8,
    expr_from: &str,
    expr_to: &str,
    vocab: &ExpressionVocabulary,
) -> Result<Instruction> {
    if !(1..=TEMPLATE_COUNT).contains(&template_id) {
        return Err(Error::Validation(format!(
            "template id must be 1..={TEMPLATE_COUNT}, got {template_id}"
        )));
    }
    for label in [expr_from, expr_to] {
        if vocab.index_of(label).is_none() {
            return Err(Error::Validation(format!("label {label:?} is not in the vocabulary")));
        }
    }
    let text = match template_id {
        1 => format!("Turn this face from {expr_from} to {expr_to}."),
        2 => format!("Change this face from {expr_from} to {expr_to}."),
        3 => format!("Transform this face from {expr_from} to {expr_to}."),
        4 => format!("Modify this face, changing it from {expr_from} to {expr_to}."),
        5 => format!("Replace this face from {expr_from} to {expr_to}."),
        _ => unreachable!(),
    };
    Ok(Instruction {
        template_id,
        expr_from: expr_from.to_string(),
        expr_to: expr_to.to_string(),
        text,
    })
}

/// An L x d text embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub matrix: Mat,
}

impl TextEmbedding {
    /// Column means over all L rows (1 x d). This is the summary the
    /// downstream models consume.
    pub fn pooled(&self) -> Mat {
        let (r, _c) = self.matrix.shape();
        self.matrix.col_sums().scale(1.0 / r as f64)
    }
}

/// Produces deterministic embeddings for instruction text.
pub trait EmbeddingProvider {
    /// (rows, dim) of every embedding this provider emits.
    fn dims(&self) -> (usize, usize);
    fn embed(&self, text: &str) -> Result<TextEmbedding>;
}

/// Deterministic hashing encoder.
///
/// The text is tokenized on whitespace/punctuation and lowercased; token i
/// is written into row i as a unit-norm Gaussian vector seeded by a hash of
/// the token *and its position* (so reorderings such as swapped expression
/// labels stay distinguishable even after mean pooling); remaining rows are
/// zero.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HashingEmbedder {
    pub rows: usize,
    pub dim: usize,
    pub seed: u64,
}

impl HashingEmbedder {
    pub fn new(rows: usize, dim: usize, seed: u64) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Config("embedding dims must be positive".into()));
        }
        Ok(HashingEmbedder { rows, dim, seed })
    }

    /// Full-scale shape (77 x 768).
    pub fn full_scale(seed: u64) -> Self {
        HashingEmbedder { rows: FULL_EMBED_ROWS, dim: FULL_EMBED_DIM, seed }
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl EmbeddingProvider for HashingEmbedder {
    fn dims(&self) -> (usize, usize) {
        (self.rows, self.dim)
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding> {
        if text.is_empty() {
            return Err(Error::Validation("cannot embed empty text".into()));
        }
        let tokens = tokenize(text);
        let mut matrix = Mat::zeros(self.rows, self.dim);
        for (i, token) in tokens.iter().take(self.rows).enumerate() {
            let token_seed =
                rng::derive_seed(self.seed, &[rng::fnv1a(token.as_bytes()), i as u64]);
            let mut stream = rng::stream(token_seed);
            let row = rng::normal_vec(&mut stream, self.dim);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (dst, v) in matrix.row_mut(i).iter_mut().zip(row) {
                *dst = v / norm;
            }
        }
        Ok(TextEmbedding { matrix })
    }
}

/// Exact-match retrieval from a preloaded embedding table.
#[derive(Debug, Clone)]
pub struct LookupEmbedder {
    rows: usize,
    dim: usize,
    table: BTreeMap<String, Mat>,
}

impl LookupEmbedder {
    /// Builds the provider, validating that every entry has one shape.
    pub fn new(table: BTreeMap<String, Mat>) -> Result<Self> {
        let mut dims: Option<(usize, usize)> = None;
        for (key, m) in &table {
            if !m.is_finite() {
                return Err(Error::Validation(format!("embedding for {key:?} is not finite")));
            }
            match dims {
                None => dims = Some(m.shape()),
                Some(d) if d != m.shape() => {
                    return Err(Error::Shape(format!(
                        "embedding for {key:?} has shape {:?}, expected {d:?}",
                        m.shape()
                    )))
                }
                _ => {}
            }
        }
        let (rows, dim) =
            dims.ok_or_else(|| Error::Validation("embedding table is empty".into()))?;
        Ok(LookupEmbedder { rows, dim, table })
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.table.keys()
    }
}

impl EmbeddingProvider for LookupEmbedder {
    fn dims(&self) -> (usize, usize) {
        (self.rows, self.dim)
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding> {
        if text.is_empty() {
            return Err(Error::Validation("cannot embed empty text".into()));
        }
        self.table
            .get(text)
            .map(|m| TextEmbedding { matrix: m.clone() })
            .ok_or_else(|| Error::NotFound(format!("no embedding for instruction {text:?}")))
    }
}

/// Precomputed embeddings for a set of instruction texts, keyed by text.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    map: BTreeMap<String, TextEmbedding>,
    dims: (usize, usize),
}

impl EmbeddingTable {
    pub fn build<'a>(
        provider: &dyn EmbeddingProvider,
        texts: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for text in texts {
            if !map.contains_key(text) {
                map.insert(text.to_string(), provider.embed(text)?);
            }
        }
        Ok(EmbeddingTable { map, dims: provider.dims() })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn get(&self, text: &str) -> Result<&TextEmbedding> {
        self.map
            .get(text)
            .ok_or_else(|| Error::NotFound(format!("no embedding for instruction {text:?}")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn templates_render_exactly() {
        let vocab = ExpressionVocabulary::ck_plus();
        let i1 = render_instruction(1, "disgust", "happiness", &vocab).unwrap();
        assert_eq!(i1.text, "Turn this face from disgust to happiness.");
        let i3 = render_instruction(3, "fear", "surprise", &vocab).unwrap();
        assert_eq!(i3.text, "Transform this face from fear to surprise.");
        let i5 = render_instruction(5, "anger", "sadness", &vocab).unwrap();
        assert_eq!(i5.text, "Replace this face from anger to sadness.");
    }

    #[test]
    fn unknown_labels_and_templates_are_rejected() {
        let vocab = ExpressionVocabulary::ck_plus();
        assert!(matches!(
            render_instruction(1, "joy", "sadness", &vocab),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            render_instruction(0, "anger", "sadness", &vocab),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            render_instruction(6, "anger", "sadness", &vocab),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn same_label_pairs_are_allowed() {
        let vocab = ExpressionVocabulary::celebv_hq();
        let i = render_instruction(2, "neutral", "neutral", &vocab).unwrap();
        assert_eq!(i.text, "Change this face from neutral to neutral.");
    }

    #[test]
    fn hashing_embedder_is_deterministic_with_stable_shape() {
        let p = HashingEmbedder::new(16, 64, 9).unwrap();
        let a = p.embed("Turn this face from disgust to happiness.").unwrap();
        let b = p.embed("Turn this face from disgust to happiness.").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.matrix.shape(), (16, 64));
        let long = p
            .embed("one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen sixteen seventeen")
            .unwrap();
        assert_eq!(long.matrix.shape(), (16, 64));
        assert!(matches!(p.embed(""), Err(Error::Validation(_))));
    }

    #[test]
    fn full_scale_shape_is_77_by_768() {
        let p = HashingEmbedder::full_scale(1);
        let e = p.embed("Turn this face from fear to anger.").unwrap();
        assert_eq!(e.matrix.shape(), (77, 768));
    }

    #[test]
    fn swapped_labels_pool_differently() {
        let p = HashingEmbedder::new(16, 64, 9).unwrap();
        let ab = p.embed("Turn this face from disgust to happiness.").unwrap();
        let ba = p.embed("Turn this face from happiness to disgust.").unwrap();
        assert_ne!(ab, ba);
        let diff = ab.pooled().sub(&ba.pooled()).max_abs();
        assert!(diff > 1e-6, "pooled embeddings must distinguish label order");
    }

    #[test]
    fn lookup_embedder_hits_and_misses() {
        let mut table = BTreeMap::new();
        table.insert("hello there".to_string(), Mat::filled(2, 3, 0.25));
        let p = LookupEmbedder::new(table).unwrap();
        assert_eq!(p.dims(), (2, 3));
        assert!(p.embed("hello there").is_ok());
        match p.embed("missing key") {
            Err(Error::NotFound(msg)) => assert!(msg.contains("missing key")),
            other => panic!("expected NotFound, got {other:?}"),
        }
    }

    #[test]
    fn tokenizer_splits_on_punctuation() {
        assert_eq!(
            tokenize("Modify this face, changing it from a to b."),
            vec!["modify", "this", "face", "changing", "it", "from", "a", "to", "b"]
        );
    }
}
