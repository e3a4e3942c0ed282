//! Ranking metrics with in-batch negatives.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{InteractionRecord, NegativeSampler};
use crate::error::{Error, Result};

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k { 1.0 } else { 0.0 }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 }
}

/// One plus the number of negatives scoring at least as high as the
/// positive, so ties count against the positive.
pub fn pessimistic_rank(positive: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

pub trait Scorer {
    /// Relevance of `item` for `user` as of time `at`.
    fn score(&mut self, user: usize, item: usize, at: u64) -> Result<f64>;
}

/// Ranks items by train popularity.
pub struct PopularityScorer {
    counts: Vec<usize>,
}

impl PopularityScorer {
    pub fn new(train: &[InteractionRecord], items: usize) -> Self {
        let mut counts = vec![0; items];
        for r in train {
            if r.item < items {
                counts[r.item] += 1;
            }
        }
        Self { counts }
    }
}

impl Scorer for PopularityScorer {
    fn score(&mut self, _user: usize, item: usize, _at: u64) -> Result<f64> {
        Ok(self.counts.get(item).copied().unwrap_or(0) as f64)
    }
}

/// Independent uniform scores.
pub struct RandomScorer {
    rng: ChaCha8Rng,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Scorer for RandomScorer {
    fn score(&mut self, _user: usize, _item: usize, _at: u64) -> Result<f64> {
        Ok(self.rng.random())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub samples: usize,
    pub skipped: usize,
    pub fingerprint: String,
    pub seconds: f64,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["fingerprint".to_string(), "samples".into(), "skipped".into()];
        cols.extend(self.ks.iter().map(|k| format!("recall@{k}")));
        cols.extend(self.ks.iter().map(|k| format!("ndcg@{k}")));
        cols.push("seconds".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.fingerprint.clone(), self.samples.to_string(), self.skipped.to_string()];
        cols.extend(self.recall.iter().map(f64::to_string));
        cols.extend(self.ndcg.iter().map(f64::to_string));
        cols.push(format!("{:.3}", self.seconds));
        cols.join(",")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}\n{}", self.csv_header(), self.csv_row())
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Splits `records` into consecutive batches; each sample ranks its positive
/// against the distinct batch items the user never interacted with
/// positively. Samples without any such negative are skipped.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &mut S,
    records: &[InteractionRecord],
    known: &NegativeSampler,
    batch_size: usize,
    ks: &[usize],
) -> Result<MetricsReport> {
    if batch_size == 0 {
        return Err(Error::Invalid("evaluation batch size must be positive".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Invalid("K list must be non-empty and positive".into()));
    }
    let start = Instant::now();
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut recall = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    let (mut samples, mut skipped) = (0, 0);
    for batch in records.chunks(batch_size) {
        let mut items: Vec<usize> = batch.iter().map(|r| r.item).collect();
        items.sort_unstable();
        items.dedup();
        for r in batch {
            let negatives: Vec<usize> = items
                .iter()
                .copied()
                .filter(|&j| j != r.item && !known.is_positive(r.user, j))
                .collect();
            if negatives.is_empty() {
                skipped += 1;
                continue;
            }
            let pos = scorer.score(r.user, r.item, r.timestamp)?;
            let neg = negatives
                .iter()
                .map(|&j| scorer.score(r.user, j, r.timestamp))
                .collect::<Result<Vec<_>>>()?;
            if !pos.is_finite() || neg.iter().any(|s| !s.is_finite()) {
                return Err(Error::NonFinite(format!("score for user {}", r.user)));
            }
            let rank = pessimistic_rank(pos, &neg);
            for (p, &k) in ks.iter().enumerate() {
                recall[p] += recall_at_k(rank, k);
                ndcg[p] += ndcg_at_k(rank, k);
            }
            samples += 1;
        }
    }
    let denom = samples.max(1) as f64;
    Ok(MetricsReport {
        ks,
        recall: recall.into_iter().map(|v| v / denom).collect(),
        ndcg: ndcg.into_iter().map(|v| v / denom).collect(),
        samples,
        skipped,
        fingerprint: String::new(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Scores memoized per `(user, item, time)`; lets one scorer back several
/// metric passes without recomputation.
pub struct Memo<S: Scorer> {
    pub inner: S,
    cache: HashMap<(usize, usize, u64), f64>,
}

impl<S: Scorer> Memo<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            cache: HashMap::new(),
        }
    }
}

impl<S: Scorer> Scorer for Memo<S> {
    fn score(&mut self, user: usize, item: usize, at: u64) -> Result<f64> {
        if let Some(&s) = self.cache.get(&(user, item, at)) {
            return Ok(s);
        }
        let s = self.inner.score(user, item, at)?;
        self.cache.insert((user, item, at), s);
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(user: usize, item: usize) -> InteractionRecord {
        InteractionRecord {
            user,
            item,
            rating: 5,
            timestamp: 0,
        }
    }

    struct Oracle;

    impl Scorer for Oracle {
        fn score(&mut self, user: usize, item: usize, _at: u64) -> Result<f64> {
            Ok(if user == item { 1.0 } else { 0.0 })
        }
    }

    struct Constant;

    impl Scorer for Constant {
        fn score(&mut self, _: usize, _: usize, _: u64) -> Result<f64> {
            Ok(0.5)
        }
    }

    #[test]
    fn unit_values() {
        assert_eq!(recall_at_k(1, 5), 1.0);
        assert_eq!(recall_at_k(6, 5), 0.0);
        assert_eq!(ndcg_at_k(1, 5), 1.0);
        assert_eq!(ndcg_at_k(3, 5), 0.5);
        assert_eq!(ndcg_at_k(7, 5), 0.0);
        assert_eq!(pessimistic_rank(0.5, &[0.5, 0.1, 0.9]), 3);
    }

    #[test]
    fn perfect_and_constant_models() {
        let records: Vec<InteractionRecord> = (0..20).map(|u| rec(u, u)).collect();
        let known = NegativeSampler::new(&records, 20, 20);
        let report = evaluate(&mut Oracle, &records, &known, 8, &[10, 1, 5]).unwrap();
        assert_eq!(report.ks, vec![1, 5, 10]);
        assert_eq!(report.recall, vec![1.0; 3]);
        assert_eq!(report.ndcg, vec![1.0; 3]);
        assert_eq!(report.samples, 20);
        // constant scores rank the positive last: only the 4-item batch hits @4
        let report = evaluate(&mut Constant, &records, &known, 8, &[4]).unwrap();
        assert!((report.recall[0] - 4.0 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn skips_samples_without_negatives() {
        let records = vec![rec(0, 0), rec(0, 1), rec(1, 2)];
        let known = NegativeSampler::new(&[rec(0, 0), rec(0, 1), rec(0, 2), rec(1, 2)], 2, 3);
        let report = evaluate(&mut Constant, &records, &known, 3, &[1]).unwrap();
        assert_eq!((report.samples, report.skipped), (1, 2));
    }

    #[test]
    fn random_scores_match_expected_recall() {
        let mut scorer = RandomScorer::new(7);
        let records: Vec<InteractionRecord> = (0..10_100).map(|n| rec(n, n % 101)).collect();
        let known = NegativeSampler::new(&records, 10_100, 101);
        let report = evaluate(&mut scorer, &records, &known, 101, &[5]).unwrap();
        assert_eq!(report.samples, 10_100);
        assert!((report.recall[0] - 0.05).abs() <= 0.02, "{}", report.recall[0]);
    }

    #[test]
    fn popularity_counts() {
        let mut p = PopularityScorer::new(&[rec(0, 1), rec(1, 1), rec(2, 0)], 3);
        assert_eq!(p.score(9, 1, 0).unwrap(), 2.0);
        assert_eq!(p.score(9, 2, 0).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn rank_matches_sort_oracle(pos in -5i32..5, neg in prop::collection::vec(-5i32..5, 0..30), k in 1usize..10) {
            let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
            let pos = f64::from(pos);
            let mut all: Vec<(f64, bool)> = neg.iter().map(|&s| (s, false)).chain([(pos, true)]).collect();
            // positive sorted last among equal scores
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let oracle = all.iter().position(|x| x.1).unwrap() + 1;
            let rank = pessimistic_rank(pos, &neg);
            prop_assert_eq!(rank, oracle);
            prop_assert!(recall_at_k(rank, k) <= recall_at_k(rank, k + 1));
            prop_assert!(ndcg_at_k(rank, k) <= ndcg_at_k(rank, k + 1));
            prop_assert!((0.0..=1.0).contains(&ndcg_at_k(rank, k)));
        }

        #[test]
        fn batch_order_does_not_matter(seed in 0u64..200) {
            let records: Vec<InteractionRecord> = (0..30).map(|n| rec(n % 7, (n * 5 + seed as usize) % 11)).collect();
            let known = NegativeSampler::new(&records, 7, 11);
            let mut shuffled = records.clone();
            shuffled.reverse();
            let mut scorer = Memo::new(PopularityScorer::new(&records[..10], 11));
            let a = evaluate(&mut scorer, &records, &known, 30, &[3]).unwrap();
            let b = evaluate(&mut scorer, &shuffled, &known, 30, &[3]).unwrap();
            prop_assert!((a.recall[0] - b.recall[0]).abs() < 1e-12);
            prop_assert!((a.ndcg[0] - b.ndcg[0]).abs() < 1e-12);
        }
    }
}
