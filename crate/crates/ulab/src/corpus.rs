//! Synthetic fact corpus with a disjoint forget/retain partition.
//!
//! Facts are fixed-shape five-token sequences `⟨bos⟩ entity attribute value
//! ⟨eos⟩`, so the "completion" of a fact is always a single unambiguous value
//! token. The forget split is entity-level: every fact about a forget entity
//! lands in the forget set. The neighbor set is our own desk-scale
//! construction — retain facts whose attribute token also occurs in some
//! forget fact — which on a full entity×attribute grid covers most of the
//! retain set; it exists to probe collateral damage, not to mirror any
//! external benchmark.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, UlabError};

/// Beginning-of-sequence marker.
pub const BOS: &str = "⟨bos⟩";
/// End-of-sequence marker.
pub const EOS: &str = "⟨eos⟩";
/// Padding token, reserved but never emitted in facts.
pub const PAD: &str = "⟨pad⟩";

/// Closed, ordered vocabulary over token strings.
///
/// Index of a token is stable for the lifetime of the value; the first three
/// slots are always the reserved `⟨bos⟩`/`⟨eos⟩`/`⟨pad⟩` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from token strings. The reserved tokens must be
    /// present at indices 0..3 and all tokens must be distinct.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(UlabError::DegenerateVocab {
                size: tokens.len(),
                min: 4,
            });
        }
        if tokens[0] != BOS || tokens[1] != EOS || tokens[2] != PAD {
            return Err(UlabError::InvalidSpec(
                "vocabulary must start with the reserved bos/eos/pad tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(UlabError::InvalidSpec(format!(
                    "duplicate token {tok:?} in vocabulary"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn bos_id(&self) -> usize {
        0
    }

    pub fn eos_id(&self) -> usize {
        1
    }

    pub fn pad_id(&self) -> usize {
        2
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Maps token strings to ids. Fails on the first token absent from the vocab.
pub fn tokenize(text: &[String], vocab: &Vocab) -> Result<Vec<usize>> {
    text.iter()
        .map(|tok| {
            vocab.id(tok).ok_or_else(|| UlabError::UnknownToken {
                token: tok.clone(),
            })
        })
        .collect()
}

/// Maps token ids back to strings. Inverse of [`tokenize`].
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> Result<Vec<String>> {
    ids.iter()
        .map(|&id| {
            vocab
                .token(id)
                .map(str::to_owned)
                .ok_or_else(|| UlabError::UnknownToken {
                    token: format!("<id {id}>"),
                })
        })
        .collect()
}

/// Parameters for [`generate_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusSpec {
    pub n_entities: usize,
    pub n_attributes: usize,
    pub n_forget_entities: usize,
    pub seed: u64,
}

impl CorpusSpec {
    /// The 40-fact corpus used throughout the test suite and docs.
    pub fn default_desk() -> Self {
        Self {
            n_entities: 10,
            n_attributes: 4,
            n_forget_entities: 2,
            seed: 7,
        }
    }
}

/// A generated fact corpus plus its forget/retain/neighbor partition.
#[derive(Debug, Clone, PartialEq)]
pub struct FactCorpus {
    vocab: Vocab,
    facts: Vec<Vec<usize>>,
    forget_ids: Vec<usize>,
    retain_ids: Vec<usize>,
    neighbor_ids: Vec<usize>,
    seed: u64,
}

impl FactCorpus {
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// All facts as token-id sequences, entity-major order.
    pub fn facts(&self) -> &[Vec<usize>] {
        &self.facts
    }

    pub fn forget_ids(&self) -> &[usize] {
        &self.forget_ids
    }

    pub fn retain_ids(&self) -> &[usize] {
        &self.retain_ids
    }

    /// Retain facts whose attribute token also occurs in a forget fact.
    pub fn neighbor_ids(&self) -> &[usize] {
        &self.neighbor_ids
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn facts_by_ids(&self, ids: &[usize]) -> Vec<Vec<usize>> {
        ids.iter().map(|&i| self.facts[i].clone()).collect()
    }

    pub fn forget_facts(&self) -> Vec<Vec<usize>> {
        self.facts_by_ids(&self.forget_ids)
    }

    pub fn retain_facts(&self) -> Vec<Vec<usize>> {
        self.facts_by_ids(&self.retain_ids)
    }

    /// Serializes to the line-oriented text format:
    /// three `#key=value` header lines, then one fact per line as
    /// space-separated tokens.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#seed={}", self.seed);
        let _ = writeln!(out, "#forget={}", join_ids(&self.forget_ids));
        let _ = writeln!(out, "#neighbors={}", join_ids(&self.neighbor_ids));
        for fact in &self.facts {
            let words: Vec<&str> = fact
                .iter()
                .map(|&id| self.vocab.token(id).expect("fact ids are in-vocab"))
                .collect();
            let _ = writeln!(out, "{}", words.join(" "));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Parses the text format produced by [`FactCorpus::to_text`]. The
    /// vocabulary is rebuilt from the entity/attribute tokens seen in the
    /// facts, so a save/load round trip is exact.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut forget_ids = None;
        let mut neighbor_ids = None;
        let mut fact_words: Vec<Vec<String>> = Vec::new();

        for line in text.lines() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#seed=") {
                seed = Some(rest.parse::<u64>().map_err(|_| {
                    UlabError::InvalidSpec(format!("bad seed header {rest:?}"))
                })?);
            } else if let Some(rest) = line.strip_prefix("#forget=") {
                forget_ids = Some(parse_ids(rest)?);
            } else if let Some(rest) = line.strip_prefix("#neighbors=") {
                neighbor_ids = Some(parse_ids(rest)?);
            } else {
                fact_words.push(line.split(' ').map(str::to_owned).collect());
            }
        }

        let seed = seed.ok_or_else(|| UlabError::InvalidSpec("missing #seed header".into()))?;
        let forget_ids =
            forget_ids.ok_or_else(|| UlabError::InvalidSpec("missing #forget header".into()))?;
        let neighbor_ids = neighbor_ids
            .ok_or_else(|| UlabError::InvalidSpec("missing #neighbors header".into()))?;

        // Recover the grid dimensions from the tokens actually used.
        let mut n_entities = 0usize;
        let mut n_attributes = 0usize;
        for words in &fact_words {
            for w in words {
                if let Some(i) = parse_indexed(w, 'e') {
                    n_entities = n_entities.max(i);
                } else if let Some(i) = parse_indexed(w, 'a') {
                    n_attributes = n_attributes.max(i);
                }
            }
        }
        if n_entities == 0 || n_attributes == 0 {
            return Err(UlabError::InvalidSpec(
                "corpus file contains no entity/attribute tokens".into(),
            ));
        }

        let vocab = build_vocab(n_entities, n_attributes);
        let facts = fact_words
            .iter()
            .map(|words| tokenize(words, &vocab))
            .collect::<Result<Vec<_>>>()?;

        let n = facts.len();
        for &id in forget_ids.iter().chain(&neighbor_ids) {
            if id >= n {
                return Err(UlabError::InvalidSpec(format!(
                    "header index {id} out of range for {n} facts"
                )));
            }
        }
        let retain_ids: Vec<usize> = (0..n).filter(|i| !forget_ids.contains(i)).collect();

        Ok(Self {
            vocab,
            facts,
            forget_ids,
            retain_ids,
            neighbor_ids,
            seed,
        })
    }
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_ids(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|part| {
            part.parse::<usize>()
                .map_err(|_| UlabError::InvalidSpec(format!("bad index {part:?} in header")))
        })
        .collect()
}

/// Parses tokens of the shape `e12`/`a3`/`v7`, returning the 1-based index.
fn parse_indexed(token: &str, prefix: char) -> Option<usize> {
    let rest = token.strip_prefix(prefix)?;
    let idx: usize = rest.parse().ok()?;
    (idx >= 1).then_some(idx)
}

/// The value pool holds twice as many tokens as there are entities, which
/// keeps chance-level completion low without growing the vocabulary much.
fn value_pool_size(n_entities: usize) -> usize {
    2 * n_entities
}

fn build_vocab(n_entities: usize, n_attributes: usize) -> Vocab {
    let mut tokens = vec![BOS.to_owned(), EOS.to_owned(), PAD.to_owned()];
    tokens.extend((1..=n_entities).map(|i| format!("e{i}")));
    tokens.extend((1..=n_attributes).map(|j| format!("a{j}")));
    tokens.extend((1..=value_pool_size(n_entities)).map(|k| format!("v{k}")));
    Vocab::new(tokens).expect("constructed vocab is valid")
}

/// Generates the corpus: `n_entities × n_attributes` facts in entity-major
/// order, each fact's value drawn deterministically from the seed, with all
/// facts of the seeded forget entities assigned to the forget set.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<FactCorpus> {
    if spec.n_entities == 0 || spec.n_attributes == 0 {
        return Err(UlabError::InvalidSpec(
            "corpus spec needs at least one entity and one attribute".into(),
        ));
    }
    if spec.n_forget_entities >= spec.n_entities {
        return Err(UlabError::InvalidSpec(format!(
            "n_forget_entities ({}) must be smaller than n_entities ({})",
            spec.n_forget_entities, spec.n_entities
        )));
    }
    let n_facts = spec.n_entities * spec.n_attributes;
    if n_facts < 40 {
        return Err(UlabError::InvalidSpec(format!(
            "corpus too small: {n_facts} facts, need at least 40"
        )));
    }
    // Entity-level split, so the forget share equals the entity share.
    if 4 * spec.n_forget_entities > spec.n_entities {
        return Err(UlabError::InvalidSpec(format!(
            "forget share {}/{} exceeds the maximum of 1/4",
            spec.n_forget_entities, spec.n_entities
        )));
    }

    let vocab = build_vocab(spec.n_entities, spec.n_attributes);
    let n_values = value_pool_size(spec.n_entities);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Values first, then the forget-entity choice: one fixed draw order keeps
    // regeneration byte-identical.
    let values: Vec<usize> = (0..n_facts).map(|_| rng.gen_range(0..n_values)).collect();
    let mut entity_order: Vec<usize> = (0..spec.n_entities).collect();
    for i in (1..entity_order.len()).rev() {
        let j = rng.gen_range(0..=i);
        entity_order.swap(i, j);
    }
    let mut forget_entities = entity_order[..spec.n_forget_entities].to_vec();
    forget_entities.sort_unstable();

    let mut facts = Vec::with_capacity(n_facts);
    for entity in 0..spec.n_entities {
        for attr in 0..spec.n_attributes {
            let value = values[entity * spec.n_attributes + attr];
            let words = [
                BOS.to_owned(),
                format!("e{}", entity + 1),
                format!("a{}", attr + 1),
                format!("v{}", value + 1),
                EOS.to_owned(),
            ];
            facts.push(tokenize(&words, &vocab)?);
        }
    }

    let is_forget_entity = |fact_id: usize| forget_entities.contains(&(fact_id / spec.n_attributes));
    let forget_ids: Vec<usize> = (0..n_facts).filter(|&i| is_forget_entity(i)).collect();
    let retain_ids: Vec<usize> = (0..n_facts).filter(|&i| !is_forget_entity(i)).collect();

    // Attribute tokens present in forget facts; fact layout is
    // [bos, entity, attribute, value, eos].
    let forget_attrs: Vec<usize> = forget_ids.iter().map(|&i| facts[i][2]).collect();
    let neighbor_ids: Vec<usize> = retain_ids
        .iter()
        .copied()
        .filter(|&i| forget_attrs.contains(&facts[i][2]))
        .collect();

    Ok(FactCorpus {
        vocab,
        facts,
        forget_ids,
        retain_ids,
        neighbor_ids,
        seed: spec.seed,
    })
}
