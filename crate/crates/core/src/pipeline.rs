//! Glue between representations, the projection, the index and evaluation.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SpanRef, TypeQuery};
use crate::error::{Error, Result};
use crate::eval::{compare_systems, default_metrics, CompareMode, EvalReport, QueryResult};
use crate::index::VectorIndex;
use crate::lexical::{Bm25Index, Bm25Params};
use crate::projection::{
    build_triplets, resolve_triplets, train, ModelDims, ProjectionModel, TrainConfig, TrainReport, TripletConfig,
    TypeSplit, DEFAULT_DROPOUT,
};
use crate::represent::{description_ref, MentionToken, RepresentationKey, RepresentationStore};

pub const DEFAULT_TOP_K: usize = 100;

/// The refs whose vectors stand for mentions: every span, or one EOS record per document.
pub fn mention_refs(corpus: &Corpus, token: MentionToken) -> Vec<SpanRef> {
    match token {
        MentionToken::SpanEnd => corpus
            .documents()
            .iter()
            .flat_map(|d| d.spans().iter().map(move |s| SpanRef::new(d.doc_id(), &s.span_id)))
            .collect(),
        MentionToken::Eos => corpus
            .documents()
            .iter()
            .filter(|d| !d.spans().is_empty())
            .map(|d| token.resolve(&SpanRef::new(d.doc_id(), "")))
            .collect(),
    }
}

fn lookup<'s>(
    store: &'s RepresentationStore,
    key: &RepresentationKey,
    r: &SpanRef,
    token: MentionToken,
) -> Result<&'s [f32]> {
    match (store.get(key, r), token) {
        (Some(v), _) => Ok(v),
        (None, MentionToken::Eos) => Err(Error::MissingVariantData(format!(
            "no EOS vector for document {} at {key}",
            r.doc_id
        ))),
        (None, MentionToken::SpanEnd) => store.require(key, r),
    }
}

/// Embeds every mention of `corpus` (optionally through `model`) into an index.
pub fn build_index(
    corpus: &Corpus,
    store: &RepresentationStore,
    key: &RepresentationKey,
    token: MentionToken,
    model: Option<&ProjectionModel>,
) -> Result<VectorIndex> {
    let refs = mention_refs(corpus, token);
    let raw = refs
        .iter()
        .map(|r| lookup(store, key, r, token))
        .collect::<Result<Vec<_>>>()?;
    let (dim, vectors): (usize, Vec<Vec<f32>>) = match model {
        Some(m) => (m.dims().output, m.project_batch(&raw)?),
        None => {
            let dim = store
                .dim(key)
                .ok_or_else(|| Error::MissingVariantData(format!("no vectors at {key}")))?;
            (dim, raw.iter().map(|v| v.to_vec()).collect())
        }
    };
    let mut index = VectorIndex::with_dim(dim);
    for (r, v) in refs.iter().zip(&vectors) {
        index.add(&r.doc_id, &r.span_id, v)?;
    }
    Ok(index)
}

pub fn embed_description(
    store: &RepresentationStore,
    key: &RepresentationKey,
    description: &str,
    model: Option<&ProjectionModel>,
) -> Result<Vec<f32>> {
    let raw = store.require(key, &description_ref(description))?;
    match model {
        Some(m) => m.project(raw),
        None => Ok(raw.to_vec()),
    }
}

pub fn run_queries(
    index: &VectorIndex,
    store: &RepresentationStore,
    key: &RepresentationKey,
    model: Option<&ProjectionModel>,
    queries: &[TypeQuery],
    k: usize,
    min_score: Option<f64>,
) -> Result<Vec<QueryResult>> {
    queries
        .iter()
        .map(|q| {
            let v = embed_description(store, key, &q.description, model)?;
            Ok(QueryResult {
                query_id: q.query_id.clone(),
                ranking: index.query_topk(&v, k, min_score)?,
            })
        })
        .collect()
}

pub fn bm25_index(corpus: &Corpus, params: Bm25Params) -> Result<Bm25Index> {
    Bm25Index::from_docs(params, corpus.documents().iter().map(|d| (d.doc_id(), d.text())))
}

pub fn run_bm25(index: &Bm25Index, queries: &[TypeQuery], k: usize) -> Vec<QueryResult> {
    queries
        .iter()
        .map(|q| QueryResult {
            query_id: q.query_id.clone(),
            ranking: index.topk(&q.description, k),
        })
        .collect()
}

/// Training types: every corpus label that is not a query description.
pub fn query_holdout(corpus: &Corpus, queries: &[TypeQuery]) -> TypeSplit {
    TypeSplit::holdout(corpus, queries.iter().map(|q| q.description.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSetup {
    pub hidden: usize,
    pub output: usize,
    pub dropout: f64,
    pub init_seed: u64,
    pub triplets: TripletConfig,
    pub train: TrainConfig,
}

impl Default for ProjectionSetup {
    fn default() -> Self {
        let d = ModelDims::default();
        ProjectionSetup {
            hidden: d.hidden,
            output: d.output,
            dropout: DEFAULT_DROPOUT,
            init_seed: 0,
            triplets: TripletConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ProjectionSetup {
    /// Points every random stream at `seed`.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self.triplets.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// Builds triplets for every training type of `split` and fits a fresh model.
pub fn train_projection(
    corpus: &Corpus,
    store: &RepresentationStore,
    key: &RepresentationKey,
    token: MentionToken,
    split: &TypeSplit,
    setup: &ProjectionSetup,
) -> Result<(ProjectionModel, TrainReport)> {
    let input = store
        .dim(key)
        .ok_or_else(|| Error::MissingVariantData(format!("no vectors at {key}")))?;
    let types: Vec<String> = split.train().iter().cloned().collect();
    let refs = build_triplets(corpus, split, &types, &setup.triplets)?;
    let triplets = resolve_triplets(store, key, &refs, token).map_err(|e| match (e, token) {
        (Error::MissingVector { doc_id, .. }, MentionToken::Eos) => {
            Error::MissingVariantData(format!("no EOS vector for document {doc_id} at {key}"))
        }
        (e, _) => e,
    })?;
    let dims = ModelDims {
        input,
        hidden: setup.hidden,
        output: setup.output,
    };
    let mut model = ProjectionModel::new_random(dims, setup.dropout, setup.init_seed)?;
    let report = train(&mut model, &triplets, &setup.train)?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub key: RepresentationKey,
    pub token: MentionToken,
    pub mlp: bool,
}

impl Variant {
    pub fn name(&self) -> String {
        format!(
            "{}/{}/{}",
            self.key,
            self.token.name(),
            if self.mlp { "mlp" } else { "raw" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub selected: RepresentationKey,
    pub last: RepresentationKey,
    pub k: usize,
    pub min_score: Option<f64>,
    pub projection: ProjectionSetup,
}

impl AblationConfig {
    /// The full system first, then every other combination.
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for key in [&self.selected, &self.last] {
            for token in [MentionToken::SpanEnd, MentionToken::Eos] {
                for mlp in [true, false] {
                    out.push(Variant {
                        key: key.clone(),
                        token,
                        mlp,
                    });
                }
            }
        }
        out.dedup();
        out
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub variants: Vec<(Variant, Vec<QueryResult>)>,
    pub training: Vec<(String, TrainReport)>,
    pub report: EvalReport,
}

pub fn run_ablation(
    corpus: &Corpus,
    store: &RepresentationStore,
    queries: &[TypeQuery],
    cfg: &AblationConfig,
) -> Result<AblationOutcome> {
    let split = query_holdout(corpus, queries);
    let mut variants = Vec::new();
    let mut training = Vec::new();
    for v in cfg.variants() {
        let model = if v.mlp {
            let (m, r) = train_projection(corpus, store, &v.key, v.token, &split, &cfg.projection)?;
            training.push((v.name(), r));
            Some(m)
        } else {
            None
        };
        let index = build_index(corpus, store, &v.key, v.token, model.as_ref())?;
        let results = run_queries(&index, store, &v.key, model.as_ref(), queries, cfg.k, cfg.min_score)?;
        variants.push((v, results));
    }
    let named: Vec<(String, Vec<QueryResult>)> = variants.iter().map(|(v, r)| (v.name(), r.clone())).collect();
    let report = compare_systems(&named, queries, &default_metrics(), CompareMode::Ablation)?;
    Ok(AblationOutcome {
        variants,
        training,
        report,
    })
}
