//! Seeded synthetic corpora and embedding fixtures for overfit runs, the
//! embedding ablation and the sparse-entity metric demonstration.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Document, Mention};
use crate::embed::{ContextualStore, StoreRecord, WordVectors};
use crate::error::Result;

const FILLERS: &[&str] = &["the", "a", "visited", "met", "with", "in", "said", "and", "today", "later"];

const ENTITIES: &[(&[&str], &[&str])] = &[
    (&["paris"], &["/location", "/location/city"]),
    (&["berlin"], &["/location", "/location/city"]),
    (&["new", "york"], &["/location", "/location/city"]),
    (&["france"], &["/location"]),
    (&["acme"], &["/organization"]),
    (&["nasa"], &["/organization"]),
    (&["smith"], &["/person"]),
    (&["picasso"], &["/person", "/person/artist"]),
    (&["bowie"], &["/person", "/person/artist"]),
];

fn mention(start: usize, end: usize, labels: &[&str]) -> Mention {
    Mention {
        start,
        end,
        labels: labels.iter().map(|s| s.to_string()).collect(),
    }
}

/// `n` short sentences over five labels, each with one or two entity
/// mentions among filler words.
pub fn overfit_corpus(n: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut tokens: Vec<String> = Vec::new();
            let mut mentions = Vec::new();
            let k = rng.gen_range(1..=2);
            for _ in 0..k {
                for _ in 0..rng.gen_range(1..=3) {
                    tokens.push(FILLERS.choose(&mut rng).unwrap().to_string());
                }
                let (words, labels) = ENTITIES[rng.gen_range(0..ENTITIES.len())];
                let start = tokens.len();
                tokens.extend(words.iter().map(|w| w.to_string()));
                mentions.push(mention(start, tokens.len(), labels));
            }
            tokens.push(FILLERS.choose(&mut rng).unwrap().to_string());
            Document {
                doc_id: format!("overfit-{i}"),
                tokens,
                mentions,
            }
        })
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    // Uniform on [-sqrt(3), sqrt(3)] has unit variance.
    (0..dim).map(|_| rng.gen_range(-1.732..1.732)).collect()
}

/// Random unit-variance vectors for every token type in `docs`.
pub fn word_vectors_for(docs: &[Document], dim: usize, seed: u64) -> WordVectors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut types: Vec<&str> = docs.iter().flat_map(|d| d.tokens.iter().map(String::as_str)).collect();
    types.sort_unstable();
    types.dedup();
    WordVectors {
        dim,
        vectors: types.into_iter().map(|t| (t.to_string(), unit_vector(&mut rng, dim))).collect(),
        duplicates: 0,
    }
}

/// Sense label and (train, held-out) cue verbs for each sense.
const SENSES: &[(&str, &[&str], &[&str])] = &[
    ("/animal", &["hunted", "prowled", "roared", "slept"], &["stalked", "pounced"]),
    ("/product", &["drove", "parked", "crashed", "sold"], &["revved", "towed"]),
    ("/organization", &["hired", "announced", "merged", "lent"], &["acquired", "fired"]),
    ("/location", &["flooded", "eroded", "overlooked", "curved"], &["dried", "narrowed"]),
    ("/food", &["ate", "peeled", "sliced", "baked"], &["chewed", "juiced"]),
];

/// Ambiguous words and the indices into `SENSES` they can take.
const AMBIGUOUS: &[(&str, [usize; 2])] = &[("jaguar", [0, 1]), ("bank", [2, 3]), ("apple", [4, 2])];

const NEUTRAL: &[&str] = &["today", "again", "there", "slowly", "near", "it", "yesterday", "then"];

/// A corpus whose gold labels depend on context, with a matching
/// hand-built contextual store.
#[derive(Debug, Clone)]
pub struct PolysemyData {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    /// Uses cue verbs never seen in `train` or `dev`.
    pub test: Vec<Document>,
    pub store: ContextualStore,
}

/// Each sentence is `the <ambiguous> <cue> <neutral>...`; the ambiguous
/// word carries the label of the sense its cue selects. In the store, an
/// ambiguous word's vector mixes its type vector with a direction for its
/// sense, as a contextual encoder would; every other token gets its type
/// vector plus a little noise.
pub fn polysemy_corpus(n_train: usize, n_dev: usize, n_test: usize, dim: usize, seed: u64) -> Result<PolysemyData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut type_vec: HashMap<String, Vec<f64>> = HashMap::new();
    let sense_vec: Vec<Vec<f64>> = SENSES.iter().map(|_| unit_vector(&mut rng, dim)).collect();
    let mut store = ContextualStore::new(dim);

    let mut make = |split: &str, i: usize, held_out: bool, rng: &mut ChaCha8Rng| -> Result<Document> {
        let (word, senses) = AMBIGUOUS[rng.gen_range(0..AMBIGUOUS.len())];
        let sense = senses[rng.gen_range(0..2)];
        let (label, train_cues, test_cues) = SENSES[sense];
        let cue = if held_out { test_cues } else { train_cues }.choose(rng).unwrap();
        let mut tokens = vec!["the".to_string(), word.to_string(), cue.to_string()];
        for _ in 0..rng.gen_range(2..=4) {
            tokens.push(NEUTRAL.choose(rng).unwrap().to_string());
        }
        let doc_id = format!("poly-{split}-{i}");
        let mut vectors = Vec::with_capacity(tokens.len());
        for (t, tok) in tokens.iter().enumerate() {
            let base = type_vec.entry(tok.clone()).or_insert_with(|| unit_vector(rng, dim)).clone();
            let v: Vec<f64> = if t == 1 {
                base.iter().zip(&sense_vec[sense]).map(|(b, s)| 0.5 * b + s + rng.gen_range(-0.1..0.1)).collect()
            } else {
                base.iter().map(|b| b + rng.gen_range(-0.1..0.1)).collect()
            };
            vectors.push(v);
        }
        store.insert(StoreRecord {
            doc_id: doc_id.clone(),
            pieces: tokens.clone(),
            word_index: (0..tokens.len()).collect(),
            vectors,
        })?;
        Ok(Document {
            doc_id,
            tokens,
            mentions: vec![mention(1, 2, &[label])],
        })
    };
    let train = (0..n_train).map(|i| make("train", i, false, &mut rng)).collect::<Result<_>>()?;
    let dev = (0..n_dev).map(|i| make("dev", i, false, &mut rng)).collect::<Result<_>>()?;
    let test = (0..n_test).map(|i| make("test", i, true, &mut rng)).collect::<Result<_>>()?;
    Ok(PolysemyData { train, dev, test, store })
}

/// Sentences of `len` tokens, each with a single one-token mention, so the
/// entity-token share is `1 / len`.
pub fn sparse_entity_corpus(n: usize, len: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut tokens: Vec<String> = (0..len).map(|_| FILLERS.choose(&mut rng).unwrap().to_string()).collect();
            let at = rng.gen_range(0..len);
            tokens[at] = "acme".into();
            Document {
                doc_id: format!("sparse-{i}"),
                tokens,
                mentions: vec![mention(at, at + 1, &["/organization"])],
            }
        })
        .collect()
}
