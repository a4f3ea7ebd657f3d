//! Type-discrimination sweep over representation sources.
//!
//! For each seed, a balanced set of same-type and different-type mention pairs
//! is drawn, every pair is scored by cosine similarity under each candidate
//! key, and the separability of the two score populations is summarised as AUC.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Corpus, SpanRef};
use crate::error::{Error, Result};
use crate::represent::{RepresentationKey, RepresentationStore};

pub const DEFAULT_TYPES_SAMPLE: usize = 20;
pub const DEFAULT_MENTIONS_PER_TYPE: usize = 20;
pub const DEFAULT_SEEDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairConfig {
    pub types_sample: usize,
    pub mentions_per_type: usize,
    /// Cap on the number of positive pairs; `None` keeps every within-type pair.
    pub max_positives: Option<usize>,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            types_sample: DEFAULT_TYPES_SAMPLE,
            mentions_per_type: DEFAULT_MENTIONS_PER_TYPE,
            max_positives: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub positives: Vec<(SpanRef, SpanRef)>,
    pub negatives: Vec<(SpanRef, SpanRef)>,
    pub seed: u64,
}

pub fn build_pairs(corpus: &Corpus, cfg: &PairConfig, seed: u64) -> Result<PairSet> {
    if cfg.types_sample < 2 || cfg.mentions_per_type < 2 {
        return Err(Error::InvalidParams(
            "pair sampling needs at least 2 types and 2 mentions per type".into(),
        ));
    }
    let by_type = corpus.mentions_by_type();
    let (eligible, deficient): (Vec<_>, Vec<_>) = by_type.iter().partition(|(_, m)| m.len() >= cfg.mentions_per_type);
    if eligible.len() < cfg.types_sample {
        let detail = match deficient.iter().max_by_key(|(_, m)| m.len()) {
            Some((t, m)) => format!(
                "type {t:?} has {} mentions, {} required ({} of {} types eligible)",
                m.len(),
                cfg.mentions_per_type,
                eligible.len(),
                cfg.types_sample
            ),
            None => format!(
                "corpus has {} labeled types, {} required",
                eligible.len(),
                cfg.types_sample
            ),
        };
        return Err(Error::InsufficientData(detail));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let type_idx = index::sample(&mut rng, eligible.len(), cfg.types_sample).into_vec();
    let groups: Vec<Vec<&SpanRef>> = type_idx
        .into_iter()
        .map(|ti| {
            let mentions = eligible[ti].1;
            index::sample(&mut rng, mentions.len(), cfg.mentions_per_type)
                .into_iter()
                .map(|i| &mentions[i])
                .collect()
        })
        .collect();

    let mut positives = Vec::new();
    for g in &groups {
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                positives.push((g[i].clone(), g[j].clone()));
            }
        }
    }
    if let Some(cap) = cfg.max_positives {
        if positives.len() > cap {
            positives.shuffle(&mut rng);
            positives.truncate(cap);
        }
    }

    // Cross-type pairs whose label sets are disjoint.
    let labels = |r: &SpanRef| corpus.span(r).map(|s| &s.types);
    let mut pool = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            for x in &groups[a] {
                for y in &groups[b] {
                    let disjoint = match (labels(x), labels(y)) {
                        (Some(lx), Some(ly)) => lx.is_disjoint(ly),
                        _ => false,
                    };
                    if disjoint {
                        pool.push((*x, *y));
                    }
                }
            }
        }
    }
    if pool.len() < positives.len() {
        return Err(Error::InsufficientData(format!(
            "only {} disjoint cross-type pairs for {} positives",
            pool.len(),
            positives.len()
        )));
    }
    let negatives = index::sample(&mut rng, pool.len(), positives.len())
        .into_iter()
        .map(|i| (pool[i].0.clone(), pool[i].1.clone()))
        .collect();
    Ok(PairSet {
        positives,
        negatives,
        seed,
    })
}

pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Mann-Whitney AUC: probability a random positive outscores a random
/// negative, ties counted as one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::EmptyInput("positive scores"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyInput("negative scores"));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the positive rank sum, so tied average ranks stay integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j, average (i + 1 + j) / 2
        let n_pos = all[i..j].iter().filter(|e| e.1).count() as u64;
        rank_sum2 += n_pos * (i as u64 + 1 + j as u64);
        i = j;
    }
    let np = pos.len() as u64;
    let nn = neg.len() as u64;
    let u2 = rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyAuc {
    pub mean_auc: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub entries: BTreeMap<RepresentationKey, KeyAuc>,
}

impl SweepResult {
    /// Keys by descending mean AUC, ties by key order.
    pub fn ranking(&self) -> Vec<(&RepresentationKey, f64)> {
        let mut v: Vec<_> = self.entries.iter().map(|(k, a)| (k, a.mean_auc)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn best(&self) -> Option<(&RepresentationKey, f64)> {
        self.ranking().into_iter().next()
    }
}

fn pair_scores(store: &RepresentationStore, key: &RepresentationKey, pairs: &[(SpanRef, SpanRef)]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|(a, b)| cosine(store.require(key, a)?, store.require(key, b)?))
        .collect()
}

pub fn key_auc(store: &RepresentationStore, key: &RepresentationKey, pairs: &PairSet) -> Result<f64> {
    let pos = pair_scores(store, key, &pairs.positives)?;
    let neg = pair_scores(store, key, &pairs.negatives)?;
    auc(&pos, &neg)
}

pub fn run_sweep(
    store: &RepresentationStore,
    corpus: &Corpus,
    keys: &[RepresentationKey],
    seeds: &[u64],
    cfg: &PairConfig,
) -> Result<SweepResult> {
    if seeds.is_empty() {
        return Err(Error::EmptyInput("seeds"));
    }
    let pair_sets = seeds
        .iter()
        .map(|&s| build_pairs(corpus, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let keys: BTreeSet<&RepresentationKey> = keys.iter().collect();
    let keys: Vec<&RepresentationKey> = keys.into_iter().collect();
    let rows = keys
        .par_iter()
        .map(|&key| {
            let per_seed = pair_sets
                .iter()
                .map(|p| key_auc(store, key, p))
                .collect::<Result<Vec<_>>>()?;
            let mean_auc = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            Ok((key.clone(), KeyAuc { mean_auc, per_seed }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        entries: rows.into_iter().collect(),
    })
}

fn grid(result: &SweepResult) -> (Vec<u32>, BTreeMap<&str, BTreeMap<u32, f64>>) {
    let blocks: BTreeSet<u32> = result.entries.keys().map(|k| k.block).collect();
    let mut rows: BTreeMap<&str, BTreeMap<u32, f64>> = BTreeMap::new();
    for (k, a) in &result.entries {
        rows.entry(k.component.as_str())
            .or_default()
            .insert(k.block, a.mean_auc);
    }
    (blocks.into_iter().collect(), rows)
}

fn render(header: &[String], blocks: &[u32], rows: &BTreeMap<&str, BTreeMap<u32, f64>>) -> String {
    let mut out = String::from("component");
    for h in header {
        out.push(',');
        out.push_str(h);
    }
    out.push('\n');
    for (comp, cells) in rows {
        out.push_str(comp);
        for b in blocks {
            out.push(',');
            if let Some(v) = cells.get(b) {
                let _ = write!(out, "{v:.6}");
            }
        }
        out.push('\n');
    }
    out
}

/// Mean AUC per component (rows) and block (columns).
pub fn heatmap_csv(result: &SweepResult) -> String {
    let (blocks, rows) = grid(result);
    let header: Vec<String> = blocks.iter().map(u32::to_string).collect();
    render(&header, &blocks, &rows)
}

/// Same grid with columns labelled by normalized depth `block / (num_blocks - 1)`.
/// `num_blocks` defaults to one past the deepest block present.
pub fn depth_csv(result: &SweepResult, num_blocks: Option<u32>) -> String {
    let (blocks, rows) = grid(result);
    let n = num_blocks.unwrap_or_else(|| blocks.last().map_or(1, |b| b + 1));
    let header: Vec<String> = blocks
        .iter()
        .map(|&b| {
            let d = if n > 1 { f64::from(b) / f64::from(n - 1) } else { 0.0 };
            format!("{d:.4}")
        })
        .collect();
    render(&header, &blocks, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn distinct_pairs(pairs: &[(SpanRef, SpanRef)]) -> usize {
        pairs.iter().collect::<HashSet<_>>().len()
    }

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut wins = 0.0;
        for p in pos {
            for n in neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    fn corpus(counts: &[(&str, usize)]) -> Corpus {
        let mut docs = Vec::new();
        for (t, n) in counts {
            for i in 0..*n {
                docs.push(
                    Document::new(
                        format!("{t}{i}"),
                        "Xy z",
                        [("s0".to_string(), 0, 2, vec![t.to_string()])],
                    )
                    .unwrap(),
                );
            }
        }
        Corpus::new(docs).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.4], &[0.6, 0.1]).unwrap(), 0.75);
        assert!(matches!(auc(&[], &[0.1]), Err(Error::EmptyInput(_))));
        assert!(matches!(auc(&[0.1], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn pairs_small_case() {
        let c = corpus(&[("a", 2), ("b", 2)]);
        let cfg = PairConfig {
            types_sample: 2,
            mentions_per_type: 2,
            max_positives: Some(1),
        };
        let p = build_pairs(&c, &cfg, 3).unwrap();
        assert_eq!(p.positives.len(), 1);
        assert_eq!(p.negatives.len(), 1);
        let (x, y) = &p.positives[0];
        assert_eq!(x.doc_id[..1], y.doc_id[..1]);
        let (x, y) = &p.negatives[0];
        assert_ne!(x.doc_id[..1], y.doc_id[..1]);
        assert_eq!(build_pairs(&c, &cfg, 3).unwrap(), p);
    }

    #[test]
    fn pairs_balanced_and_labeled() {
        let c = corpus(&[("a", 6), ("b", 5), ("c", 7), ("d", 4)]);
        let cfg = PairConfig {
            types_sample: 3,
            mentions_per_type: 4,
            max_positives: None,
        };
        let p = build_pairs(&c, &cfg, 11).unwrap();
        assert_eq!(p.positives.len(), 3 * 6);
        assert_eq!(p.negatives.len(), p.positives.len());
        assert_eq!(distinct_pairs(&p.negatives), p.negatives.len());
        for (a, b) in &p.positives {
            assert!(c.span(a).unwrap().shares_type_with(c.span(b).unwrap()));
        }
        for (a, b) in &p.negatives {
            assert!(!c.span(a).unwrap().shares_type_with(c.span(b).unwrap()));
        }
    }

    #[test]
    fn insufficient_data_names_type() {
        let c = corpus(&[("plenty", 20), ("short", 19)]);
        let err = build_pairs(
            &c,
            &PairConfig {
                types_sample: 2,
                ..PairConfig::default()
            },
            0,
        )
        .unwrap_err();
        match err {
            Error::InsufficientData(m) => assert!(m.contains("short"), "{m}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn single_key_single_seed() {
        let data = crate::represent::synth_generate(&crate::represent::SynthConfig {
            num_types: 3,
            mentions_per_type: 4,
            ..Default::default()
        })
        .unwrap();
        let key: RepresentationKey = "8:attn.v".parse().unwrap();
        let cfg = PairConfig {
            types_sample: 3,
            mentions_per_type: 4,
            max_positives: None,
        };
        let r = run_sweep(&data.store, &data.corpus, std::slice::from_ref(&key), &[9], &cfg).unwrap();
        assert_eq!(r.entries.len(), 1);
        let e = &r.entries[&key];
        assert_eq!(e.per_seed.len(), 1);
        assert_eq!(e.mean_auc, e.per_seed[0]);
    }

    #[test]
    fn missing_vector_reported() {
        let c = corpus(&[("a", 2), ("b", 2)]);
        let store = RepresentationStore::new();
        let cfg = PairConfig {
            types_sample: 2,
            mentions_per_type: 2,
            max_positives: None,
        };
        let key = RepresentationKey::new(0, "attn.v");
        assert!(matches!(
            run_sweep(&store, &c, &[key], &[0], &cfg),
            Err(Error::MissingVector { .. })
        ));
    }

    #[test]
    fn heatmap_layout() {
        let mut r = SweepResult::default();
        for (b, v) in [(3u32, 0.5), (7, 0.75)] {
            r.entries.insert(
                RepresentationKey::new(b, "attn.v"),
                KeyAuc {
                    mean_auc: v,
                    per_seed: vec![v],
                },
            );
        }
        assert_eq!(heatmap_csv(&r), "component,3,7\nattn.v,0.500000,0.750000\n");
        assert_eq!(
            depth_csv(&r, Some(8)),
            "component,0.4286,1.0000\nattn.v,0.500000,0.750000\n"
        );
        assert_eq!(heatmap_csv(&SweepResult::default()), "component\n");
    }

    #[test]
    fn heatmap_leaves_missing_cells_empty() {
        let mut r = SweepResult::default();
        r.entries.insert(
            RepresentationKey::new(0, "attn.k"),
            KeyAuc {
                mean_auc: 0.6,
                per_seed: vec![0.6],
            },
        );
        r.entries.insert(
            RepresentationKey::new(2, "attn.v"),
            KeyAuc {
                mean_auc: 0.9,
                per_seed: vec![0.9],
            },
        );
        assert_eq!(heatmap_csv(&r), "component,0,2\nattn.k,0.600000,\nattn.v,,0.900000\n");
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0i32..20).prop_map(|x| f64::from(x) / 4.0), 1..60)
    }

    proptest! {
        #[test]
        fn auc_matches_enumeration(pos in scores(), neg in scores()) {
            prop_assert_eq!(auc(&pos, &neg).unwrap(), brute_auc(&pos, &neg));
        }

        #[test]
        fn auc_complement_without_ties(pos in prop::collection::hash_set(0i32..1000, 1..30), neg in prop::collection::hash_set(1000i32..2000, 1..30)) {
            let mut pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
            let mut neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
            // interleave the two populations
            pos.iter_mut().enumerate().for_each(|(i, x)| if i % 2 == 0 { *x += 1500.0 });
            neg.iter_mut().for_each(|x| *x += 0.5);
            let a = auc(&pos, &neg).unwrap();
            let b = auc(&neg, &pos).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(pos in scores(), neg in scores()) {
            let f = |x: &f64| (x * 3.0 + 1.0).exp();
            let tp: Vec<f64> = pos.iter().map(f).collect();
            let tn: Vec<f64> = neg.iter().map(f).collect();
            prop_assert_eq!(auc(&pos, &neg).unwrap(), auc(&tp, &tn).unwrap());
        }
    }
}
