use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::Triplet;
use super::mining::{mine_hard_negatives, DEFAULT_HARD_NEGATIVE_FRACTION};
use crate::corpus::{Corpus, SpanRef};
use crate::error::{Error, Result};
use crate::lexical::{Bm25Index, Bm25Params};
use crate::represent::{description_ref, MentionToken, RepresentationKey, RepresentationStore};

pub const DEFAULT_TRIPLETS_PER_TYPE: usize = 200;

/// Disjoint train and held-out type labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeSplit {
    train: BTreeSet<String>,
    test: BTreeSet<String>,
}

impl TypeSplit {
    pub fn new(train: impl IntoIterator<Item = String>, test: impl IntoIterator<Item = String>) -> Result<Self> {
        let train: BTreeSet<String> = train.into_iter().collect();
        let test: BTreeSet<String> = test.into_iter().collect();
        if let Some(t) = train.intersection(&test).next() {
            return Err(Error::TypeSplitViolation(t.clone()));
        }
        Ok(TypeSplit { train, test })
    }

    /// Every labeled type in `corpus` that is not held out.
    pub fn holdout(corpus: &Corpus, test: impl IntoIterator<Item = String>) -> Self {
        let test: BTreeSet<String> = test.into_iter().collect();
        let train = corpus
            .mentions_by_type()
            .into_keys()
            .filter(|t| !test.contains(t))
            .collect();
        TypeSplit { train, test }
    }

    pub fn train(&self) -> &BTreeSet<String> {
        &self.train
    }

    pub fn test(&self) -> &BTreeSet<String> {
        &self.test
    }

    pub fn check_train(&self, label: &str) -> Result<()> {
        if self.test.contains(label) {
            return Err(Error::TypeSplitViolation(label.to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub per_type: usize,
    pub hard_negative_fraction: f64,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            per_type: DEFAULT_TRIPLETS_PER_TYPE,
            hard_negative_fraction: DEFAULT_HARD_NEGATIVE_FRACTION,
            seed: 0,
        }
    }
}

/// A triplet expressed as references into a representation store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRef {
    pub label: String,
    pub anchor: SpanRef,
    pub positive: SpanRef,
    pub negative: SpanRef,
    pub hard: bool,
}

/// Samples triplets for the given training types. The type label doubles as
/// its description. Documents holding any mention of a held-out type are
/// excluded from positives, negatives and the BM25 statistics.
pub fn build_triplets(
    corpus: &Corpus,
    split: &TypeSplit,
    types: &[String],
    cfg: &TripletConfig,
) -> Result<Vec<TripletRef>> {
    for t in types {
        split.check_train(t)?;
    }
    let clean: Vec<_> = corpus
        .documents()
        .iter()
        .filter(|d| d.spans().iter().all(|s| s.types.is_disjoint(split.test())))
        .collect();
    let bm25 = Bm25Index::from_docs(Bm25Params::default(), clean.iter().map(|d| (d.doc_id(), d.text())))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(types.len() * cfg.per_type);
    for label in types {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for d in &clean {
            for s in d.spans() {
                if s.types.is_empty() {
                    continue;
                }
                let r = SpanRef::new(d.doc_id(), &s.span_id);
                if s.types.contains(label) {
                    positives.push(r);
                } else {
                    negatives.push(r);
                }
            }
        }
        if positives.is_empty() {
            return Err(Error::TypeWithoutMentions(label.clone()));
        }
        let mined = mine_hard_negatives(
            label,
            &negatives,
            &bm25,
            cfg.per_type,
            cfg.hard_negative_fraction,
            &mut rng,
        )?;
        let mut negs: Vec<(SpanRef, bool)> = mined
            .hard
            .into_iter()
            .map(|n| (n, true))
            .chain(mined.random.into_iter().map(|n| (n, false)))
            .collect();
        negs.shuffle(&mut rng);
        let anchor = description_ref(label);
        for (negative, hard) in negs {
            out.push(TripletRef {
                label: label.clone(),
                anchor: anchor.clone(),
                positive: positives.choose(&mut rng).expect("non-empty").clone(),
                negative,
                hard,
            });
        }
    }
    Ok(out)
}

/// Looks up the vectors behind each triplet. Mentions are read at `token`;
/// the anchor always uses the description record.
pub fn resolve_triplets(
    store: &RepresentationStore,
    key: &RepresentationKey,
    refs: &[TripletRef],
    token: MentionToken,
) -> Result<Vec<Triplet>> {
    refs.iter()
        .map(|t| {
            Ok(Triplet {
                anchor: store.require(key, &t.anchor)?.to_vec(),
                positive: store.require(key, &token.resolve(&t.positive))?.to_vec(),
                negative: store.require(key, &token.resolve(&t.negative))?.to_vec(),
            })
        })
        .collect()
}
