//! N-gram occurrence statistics over token corpora and the class dominance
//! score derived from them.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Sliding-window n-gram counts with per-class breakdowns.
#[derive(Debug, Clone)]
pub struct NgramTable {
    pub order: usize,
    pub counts: HashMap<Vec<u32>, u64>,
    pub per_class: HashMap<(Vec<u32>, usize), u64>,
    pub total_sequences: usize,
}

/// Count n-grams within each sequence (windows never cross sequences).
pub fn ngram_stats(corpus: &[(Vec<u32>, usize)], order: usize) -> Result<NgramTable> {
    if order != 2 && order != 3 {
        return Err(Error::Config(format!("ngram order must be 2 or 3, got {order}")));
    }
    let mut counts: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut per_class: HashMap<(Vec<u32>, usize), u64> = HashMap::new();
    for (tokens, class_id) in corpus {
        for window in tokens.windows(order) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
            *per_class.entry((window.to_vec(), *class_id)).or_insert(0) += 1;
        }
    }
    Ok(NgramTable { order, counts, per_class, total_sequences: corpus.len() })
}

impl NgramTable {
    /// Per-class counts must sum to the global count for every tuple.
    pub fn is_consistent(&self) -> bool {
        let mut sums: HashMap<&Vec<u32>, u64> = HashMap::new();
        for ((tuple, _), count) in &self.per_class {
            *sums.entry(tuple).or_insert(0) += count;
        }
        if sums.len() != self.counts.len() {
            return false;
        }
        self.counts.iter().all(|(tuple, count)| sums.get(tuple) == Some(count))
    }

    pub fn unique_ngrams(&self) -> usize {
        self.counts.len()
    }
}

/// Histogram rows `(bucket_lo, bucket_hi, unique n-grams)`: unit buckets up
/// to a count of 100, doubling spans above.
pub fn histogram_buckets(table: &NgramTable) -> Vec<(u64, u64, u64)> {
    let mut buckets: HashMap<(u64, u64), u64> = HashMap::new();
    for &count in table.counts.values() {
        let key = if count <= 100 {
            (count, count)
        } else {
            let mut lo = 101u64;
            let mut hi = 200u64;
            while count > hi {
                lo = hi + 1;
                hi *= 2;
            }
            (lo, hi)
        };
        *buckets.entry(key).or_insert(0) += 1;
    }
    let mut rows: Vec<(u64, u64, u64)> = buckets.into_iter().map(|((lo, hi), n)| (lo, hi, n)).collect();
    rows.sort_unstable();
    rows
}

/// One scored n-gram: the class holding the majority of its occurrences.
#[derive(Debug, Clone, PartialEq)]
pub struct DominanceRow {
    pub score: f64,
    pub ngram: Vec<u32>,
    pub class: usize,
}

/// Dominance scores `max_j n(b, c_j) / n(b)` for every n-gram occurring at
/// least `threshold` times, sorted by descending score (ties by n-gram).
pub fn class_dominance(table: &NgramTable, threshold: u64) -> Result<Vec<DominanceRow>> {
    if threshold < 1 {
        return Err(Error::Config("dominance threshold must be >= 1".into()));
    }
    let mut best: HashMap<&Vec<u32>, (u64, usize)> = HashMap::new();
    for ((tuple, class), count) in &table.per_class {
        let entry = best.entry(tuple).or_insert((0, usize::MAX));
        // Deterministic argmax: higher count wins, ties to the lower class.
        if *count > entry.0 || (*count == entry.0 && *class < entry.1) {
            *entry = (*count, *class);
        }
    }
    let mut rows = Vec::new();
    for (tuple, &total) in &table.counts {
        if total < threshold {
            continue;
        }
        let (top, class) = best[tuple];
        rows.push(DominanceRow { score: top as f64 / total as f64, ngram: tuple.clone(), class });
    }
    rows.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap().then_with(|| a.ngram.cmp(&b.ngram))
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn hand_counted_two_grams() {
        let corpus = vec![(vec![1u32, 2, 1, 2], 0usize)];
        let table = ngram_stats(&corpus, 2).unwrap();
        assert_eq!(table.counts[&vec![1, 2]], 2);
        assert_eq!(table.counts[&vec![2, 1]], 1);
        assert_eq!(table.unique_ngrams(), 2);
        assert!(table.is_consistent());
    }

    #[test]
    fn window_count_is_len_minus_order_plus_one() {
        for order in [2usize, 3] {
            let corpus = vec![(vec![5u32; 9], 1usize)];
            let table = ngram_stats(&corpus, order).unwrap();
            let total: u64 = table.counts.values().sum();
            assert_eq!(total as usize, 9 - order + 1);
        }
        assert!(ngram_stats(&[], 4).is_err());
    }

    #[test]
    fn matches_nested_loop_oracle_on_random_corpora() {
        let mut rng = Rng::new(2024);
        for trial in 0..100 {
            let order = if trial % 2 == 0 { 2 } else { 3 };
            let classes = 2 + rng.below(4);
            let corpus: Vec<(Vec<u32>, usize)> = (0..(1 + rng.below(12)))
                .map(|_| {
                    let len = order + rng.below(61);
                    let toks = (0..len).map(|_| rng.below(32) as u32).collect();
                    (toks, rng.below(classes))
                })
                .collect();
            let table = ngram_stats(&corpus, order).unwrap();

            // Brute-force oracle.
            let mut counts: HashMap<Vec<u32>, u64> = HashMap::new();
            let mut per_class: HashMap<(Vec<u32>, usize), u64> = HashMap::new();
            for (toks, class) in &corpus {
                for start in 0..=(toks.len() - order) {
                    let tuple = toks[start..start + order].to_vec();
                    *counts.entry(tuple.clone()).or_insert(0) += 1;
                    *per_class.entry((tuple, *class)).or_insert(0) += 1;
                }
            }
            assert_eq!(table.counts, counts);
            assert_eq!(table.per_class, per_class);
            assert!(table.is_consistent());

            // Histogram buckets partition the unique n-grams.
            let total: u64 = histogram_buckets(&table).iter().map(|(_, _, n)| n).sum();
            assert_eq!(total as usize, table.unique_ngrams());
        }
    }

    #[test]
    fn dominance_scores_hand_cases() {
        // A 2-gram appearing in one class only scores 1.0.
        let corpus = vec![(vec![1u32, 2, 1, 2], 3usize)];
        let table = ngram_stats(&corpus, 2).unwrap();
        let rows = class_dominance(&table, 1).unwrap();
        assert!(rows.iter().all(|r| r.score == 1.0 && r.class == 3));

        // Uniform across J classes scores 1/J.
        let uniform: Vec<(Vec<u32>, usize)> = (0..4).map(|j| (vec![7u32, 8], j)).collect();
        let table = ngram_stats(&uniform, 2).unwrap();
        let rows = class_dominance(&table, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].score, 0.25);

        // Counts 5/3/2 over three classes score 0.5.
        let mut split: Vec<(Vec<u32>, usize)> = Vec::new();
        for (class, reps) in [(0usize, 5usize), (1, 3), (2, 2)] {
            for _ in 0..reps {
                split.push((vec![4u32, 4], class));
            }
        }
        let table = ngram_stats(&split, 2).unwrap();
        let rows = class_dominance(&table, 1).unwrap();
        assert_eq!(rows[0].score, 0.5);
        assert_eq!(rows[0].class, 0);
    }

    #[test]
    fn dominance_threshold_and_bounds() {
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let classes = 2 + rng.below(5);
            let corpus: Vec<(Vec<u32>, usize)> = (0..(2 + rng.below(10)))
                .map(|_| {
                    let toks = (0..(2 + rng.below(30))).map(|_| rng.below(16) as u32).collect();
                    (toks, rng.below(classes))
                })
                .collect();
            let table = ngram_stats(&corpus, 2).unwrap();
            let threshold = 1 + rng.below(3) as u64;
            let rows = class_dominance(&table, threshold).unwrap();
            let lower = 1.0 / classes as f64;
            for row in &rows {
                assert!(row.score >= lower - 1e-12 && row.score <= 1.0, "score {}", row.score);
                assert!(table.counts[&row.ngram] >= threshold);
                assert!(row.class < classes);
                // Score matches a direct recount.
                let expect = (0..classes)
                    .map(|j| *table.per_class.get(&(row.ngram.clone(), j)).unwrap_or(&0))
                    .max()
                    .unwrap() as f64
                    / table.counts[&row.ngram] as f64;
                assert_eq!(row.score, expect);
            }
            // Sorted descending.
            for pair in rows.windows(2) {
                assert!(pair[0].score >= pair[1].score);
            }
            assert!(class_dominance(&table, 0).is_err());
        }
    }
}
