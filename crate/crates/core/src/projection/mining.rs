use rand::seq::IndexedRandom;
use rand::Rng;

use crate::corpus::SpanRef;
use crate::error::{Error, Result};
use crate::lexical::{tokenize, Bm25Index};

pub const DEFAULT_HARD_NEGATIVE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinedNegatives {
    /// Highest-BM25 candidates, best first, all distinct and all with positive score.
    pub hard: Vec<SpanRef>,
    /// Uniform draws (with replacement) filling the rest of the quota.
    pub random: Vec<SpanRef>,
}

impl MinedNegatives {
    pub fn len(&self) -> usize {
        self.hard.len() + self.random.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Picks `count` negatives for a type description.
///
/// `round(fraction * count)` of them are the candidates whose documents score
/// highest against the description under `bm25`. If fewer candidates have a
/// positive score, the shortfall is drawn uniformly like the rest.
pub fn mine_hard_negatives<R: Rng>(
    description: &str,
    candidates: &[SpanRef],
    bm25: &Bm25Index,
    count: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<MinedNegatives> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidParams(format!(
            "hard negative fraction {fraction} outside [0, 1]"
        )));
    }
    if count == 0 {
        return Ok(MinedNegatives::default());
    }
    if candidates.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no negative candidates for {description:?}"
        )));
    }
    let want_hard = ((fraction * count as f64).round() as usize).min(count);
    let mut hard = Vec::new();
    if want_hard > 0 {
        let terms = tokenize(description);
        let mut scored = Vec::with_capacity(candidates.len());
        for c in candidates {
            let s = bm25.score(&terms, &c.doc_id)?;
            if s > 0.0 {
                scored.push((s, c));
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.dedup_by(|a, b| a.1 == b.1);
        hard = scored.into_iter().take(want_hard).map(|(_, c)| c.clone()).collect();
    }
    let random = (hard.len()..count)
        .map(|_| candidates.choose(rng).expect("non-empty").clone())
        .collect();
    Ok(MinedNegatives { hard, random })
}
