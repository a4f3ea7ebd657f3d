//! Deterministic synthetic corpora and dumps for desk-scale experiments.
//!
//! Generative model at the informative key (dimension `d`):
//!
//! ```text
//! c_t     = normalize(b + s * u_t)                      shared b, per-type u_t
//! mention = normalize(c_t + noise * g / sqrt(d) + ctx)  g ~ N(0, I)
//! ctx     = context_strength * Q z / sqrt(r)            Q: d x r orthonormal, z ~ N(0, I_r)
//! ```
//!
//! so `noise` and `context_strength` are expected norms relative to the unit
//! centroid. Type-description vectors are drawn the same way around `c_t`.
//! The context term lives in a low-rank subspace shared by all types; it is
//! off by default and models nuisance variation a trained projection can remove.
//! With `latent_rank` set, every `u_t` lies in one shared subspace, so types
//! held out of training still share structure with the training types.
//! Every other key, and every EOS record, carries pure `N(0, I)` noise.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{description_ref, eos_ref, RepresentationKey, RepresentationStore};
use crate::corpus::{Corpus, Document, SpanRef, TypeQuery};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_types: usize,
    pub mentions_per_type: usize,
    pub dims: BTreeMap<RepresentationKey, usize>,
    pub informative_key: RepresentationKey,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
    pub context_strength: f64,
    pub context_rank: usize,
    /// When set, type directions are drawn from a shared subspace of this rank
    /// instead of independently in the full space.
    pub latent_rank: Option<usize>,
    /// Probability that a sentence literally contains its type label.
    pub cue_rate: f64,
    /// Probability that a sentence contains some other type's label.
    pub distractor_rate: f64,
    pub emit_eos: bool,
}

impl SynthConfig {
    /// Eight keys: the informative `17:attn.v` at 1024 dims and seven noise keys at 256.
    pub fn default_keys() -> BTreeMap<RepresentationKey, usize> {
        [
            ("4:attn.v", 256),
            ("8:attn.v", 256),
            ("17:attn.k", 256),
            ("17:attn.v", 1024),
            ("17:norm.input", 256),
            ("24:attn.v", 256),
            ("31:attn.v", 256),
            ("31:block.out", 256),
        ]
        .into_iter()
        .map(|(k, d)| (k.parse().expect("static key"), d))
        .collect()
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_types: 20,
            mentions_per_type: 20,
            dims: Self::default_keys(),
            informative_key: RepresentationKey::new(17, "attn.v"),
            separation: 0.8,
            noise: 0.05,
            seed: 0,
            context_strength: 0.0,
            context_rank: 8,
            latent_rank: None,
            cue_rate: 0.25,
            distractor_rate: 0.05,
            emit_eos: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthType {
    pub label: String,
    pub description: String,
    pub docs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub corpus: Corpus,
    pub store: RepresentationStore,
    pub types: Vec<SynthType>,
}

impl SynthData {
    /// One query per named type, with the type's documents as ground truth.
    pub fn queries<'a>(&self, labels: impl IntoIterator<Item = &'a str>) -> Vec<TypeQuery> {
        labels
            .into_iter()
            .filter_map(|l| self.types.iter().find(|t| t.label == l))
            .map(|t| TypeQuery {
                query_id: t.label.clone(),
                description: t.description.clone(),
                relevant_docs: t.docs.iter().cloned().collect(),
            })
            .collect()
    }
}

const LABEL_HEADS: [&str; 16] = [
    "kor", "vel", "tam", "ris", "bal", "nup", "zeg", "fom", "qui", "dra", "lev", "mos", "pes", "hul", "wix", "gar",
];
const LABEL_TAILS: [&str; 8] = ["an", "ite", "ox", "ern", "ul", "ash", "imo", "eth"];
const NAME_SYLLABLES: [&str; 12] = [
    "Ka", "Lo", "Mi", "Ter", "Vo", "Sa", "Bren", "Du", "Ya", "Fen", "Or", "Zi",
];
const FILLER: [&str; 24] = [
    "the", "a", "was", "seen", "near", "during", "with", "report", "noted", "after", "in", "from", "local", "early",
    "its", "by", "known", "across", "old", "new", "said", "once", "often", "there",
];

fn type_label(t: usize) -> String {
    let mut s = String::new();
    let mut n = t;
    loop {
        s.push_str(LABEL_HEADS[n % LABEL_HEADS.len()]);
        n /= LABEL_HEADS.len();
        if n == 0 {
            break;
        }
    }
    s.push_str(LABEL_TAILS[t % LABEL_TAILS.len()]);
    s.push_str("id");
    s
}

fn make_sentence(rng: &mut ChaCha8Rng, cue: Option<&str>, distractor: Option<&str>) -> (String, usize, usize) {
    let mut words: Vec<String> = (0..rng.random_range(2..=5))
        .map(|_| FILLER.choose(rng).unwrap().to_string())
        .collect();
    let name: String = (0..rng.random_range(2..=3))
        .map(|i| {
            let s = *NAME_SYLLABLES.choose(rng).unwrap();
            if i == 0 {
                s.to_string()
            } else {
                s.to_lowercase()
            }
        })
        .collect();
    let name_pos = words.len();
    words.push(name.clone());
    words.extend((0..rng.random_range(2..=6)).map(|_| FILLER.choose(rng).unwrap().to_string()));
    for extra in [cue, distractor].into_iter().flatten() {
        let at = rng.random_range(name_pos + 1..=words.len());
        words.insert(at, extra.to_string());
    }
    let start: usize = words[..name_pos].iter().map(|w| w.chars().count() + 1).sum();
    let end = start + name.chars().count();
    let mut text = words.join(" ");
    text.push('.');
    (text, start, end)
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn orthonormal_basis(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = gaussian(rng, d);
        for q in &basis {
            let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        normalize(&mut v);
        basis.push(v);
    }
    basis
}

struct Informative {
    dim: usize,
    centroids: Vec<Vec<f64>>,
    context: Vec<Vec<f64>>,
}

impl Informative {
    fn draw(&self, rng: &mut ChaCha8Rng, t: usize, cfg: &SynthConfig) -> Vec<f32> {
        let d = self.dim as f64;
        let mut v = self.centroids[t].clone();
        let g = gaussian(rng, self.dim);
        v.iter_mut().zip(&g).for_each(|(x, n)| *x += cfg.noise * n / d.sqrt());
        if cfg.context_strength > 0.0 && !self.context.is_empty() {
            let r = self.context.len() as f64;
            for q in &self.context {
                let z: f64 = rng.sample(StandardNormal);
                let w = cfg.context_strength * z / r.sqrt();
                v.iter_mut().zip(q).for_each(|(x, b)| *x += w * b);
            }
        }
        normalize(&mut v);
        v.into_iter().map(|x| x as f32).collect()
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let fail = |m: String| Err(Error::InvalidParams(m));
    if cfg.num_types < 2 {
        return fail(format!("need at least 2 types, got {}", cfg.num_types));
    }
    if cfg.mentions_per_type < 2 {
        return fail(format!(
            "need at least 2 mentions per type, got {}",
            cfg.mentions_per_type
        ));
    }
    if !(cfg.separation >= 0.0 && cfg.separation.is_finite()) {
        return fail(format!("separation must be >= 0, got {}", cfg.separation));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return fail(format!("noise must be >= 0, got {}", cfg.noise));
    }
    if !(cfg.context_strength >= 0.0 && cfg.context_strength.is_finite()) {
        return fail(format!("context strength must be >= 0, got {}", cfg.context_strength));
    }
    for (name, p) in [("cue_rate", cfg.cue_rate), ("distractor_rate", cfg.distractor_rate)] {
        if !(0.0..=1.0).contains(&p) {
            return fail(format!("{name} must be in [0, 1], got {p}"));
        }
    }
    match cfg.dims.get(&cfg.informative_key) {
        None => return fail(format!("informative key {} has no dimension", cfg.informative_key)),
        Some(&d) if cfg.context_strength > 0.0 && cfg.context_rank > d => {
            return fail(format!("context rank {} exceeds dimension {d}", cfg.context_rank))
        }
        _ => {}
    }
    if let (Some(k), Some(&d)) = (cfg.latent_rank, cfg.dims.get(&cfg.informative_key)) {
        if k == 0 || k > d {
            return fail(format!("latent rank {k} must be in 1..={d}"));
        }
    }
    if cfg.dims.values().any(|&d| d == 0) {
        return fail("key dimensions must be positive".into());
    }
    Ok(())
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    validate(cfg)?;
    let mut text_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vec_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));

    let labels: Vec<String> = (0..cfg.num_types).map(type_label).collect();
    let mut docs = Vec::with_capacity(cfg.num_types * cfg.mentions_per_type);
    let mut types = Vec::with_capacity(cfg.num_types);
    let mut mention_type = Vec::new();
    for (t, label) in labels.iter().enumerate() {
        let mut ids = Vec::with_capacity(cfg.mentions_per_type);
        for m in 0..cfg.mentions_per_type {
            let cue = (text_rng.random::<f64>() < cfg.cue_rate).then_some(label.as_str());
            let distractor = (text_rng.random::<f64>() < cfg.distractor_rate).then(|| {
                let mut o = text_rng.random_range(0..cfg.num_types - 1);
                if o >= t {
                    o += 1;
                }
                labels[o].as_str()
            });
            let (text, start, end) = make_sentence(&mut text_rng, cue, distractor);
            let doc_id = format!("d{t:03}_{m:04}");
            docs.push(Document::new(
                doc_id.clone(),
                text,
                [("s0".to_string(), start, end, vec![label.clone()])],
            )?);
            ids.push(doc_id);
            mention_type.push(t);
        }
        types.push(SynthType {
            label: label.clone(),
            description: label.clone(),
            docs: ids,
        });
    }
    let corpus = Corpus::new(docs)?;

    let mut store = RepresentationStore::new();
    for (key, &dim) in &cfg.dims {
        if *key == cfg.informative_key {
            let shared = {
                let mut b = gaussian(&mut vec_rng, dim);
                normalize(&mut b);
                b
            };
            let latent = cfg.latent_rank.map(|k| orthonormal_basis(&mut vec_rng, dim, k));
            let centroids = (0..cfg.num_types)
                .map(|_| {
                    let mut u = match &latent {
                        None => gaussian(&mut vec_rng, dim),
                        Some(basis) => {
                            let s = gaussian(&mut vec_rng, basis.len());
                            let mut u = vec![0.0; dim];
                            for (q, z) in basis.iter().zip(&s) {
                                u.iter_mut().zip(q).for_each(|(x, b)| *x += z * b);
                            }
                            u
                        }
                    };
                    normalize(&mut u);
                    let mut c: Vec<f64> = shared.iter().zip(&u).map(|(b, u)| b + cfg.separation * u).collect();
                    normalize(&mut c);
                    c
                })
                .collect();
            let context = if cfg.context_strength > 0.0 {
                orthonormal_basis(&mut vec_rng, dim, cfg.context_rank)
            } else {
                Vec::new()
            };
            let info = Informative {
                dim,
                centroids,
                context,
            };
            for (doc, &t) in corpus.documents().iter().zip(&mention_type) {
                let v = info.draw(&mut vec_rng, t, cfg);
                store.insert(key.clone(), SpanRef::new(doc.doc_id(), "s0"), v)?;
            }
            for (t, ty) in types.iter().enumerate() {
                let v = info.draw(&mut vec_rng, t, cfg);
                store.insert(key.clone(), description_ref(&ty.description), v)?;
            }
        } else {
            for doc in corpus.documents() {
                let v = gaussian(&mut vec_rng, dim).into_iter().map(|x| x as f32).collect();
                store.insert(key.clone(), SpanRef::new(doc.doc_id(), "s0"), v)?;
            }
            for ty in &types {
                let v = gaussian(&mut vec_rng, dim).into_iter().map(|x| x as f32).collect();
                store.insert(key.clone(), description_ref(&ty.description), v)?;
            }
        }
        if cfg.emit_eos {
            for doc in corpus.documents() {
                let v = gaussian(&mut vec_rng, dim).into_iter().map(|x| x as f32).collect();
                store.insert(key.clone(), eos_ref(doc.doc_id()), v)?;
            }
        }
    }
    Ok(SynthData { corpus, store, types })
}
