use super::rng::SeededRng;
use crate::error::{Error, Result};

/// Outcome count above which the alias table replaces the cumulative scan.
pub const ALIAS_THRESHOLD: usize = 1024;

/// Draws indices with probability proportional to non-negative weights.
#[derive(Clone, Debug)]
pub struct DiscreteSampler {
    weights: Vec<f64>,
    table: Table,
}

#[derive(Clone, Debug)]
enum Table {
    Cumulative(Vec<f64>),
    Alias { prob: Vec<f64>, alias: Vec<usize> },
}

impl DiscreteSampler {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(
                "sampler weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput(
                "sampler needs at least one positive weight".into(),
            ));
        }
        let table = if weights.len() > ALIAS_THRESHOLD {
            build_alias(&weights, total)
        } else {
            let mut acc = 0.0;
            Table::Cumulative(
                weights
                    .iter()
                    .map(|w| {
                        acc += w / total;
                        acc
                    })
                    .collect(),
            )
        };
        Ok(Self { weights, table })
    }

    /// Unigram counts raised to `power` (1.0 is the plain unigram).
    pub fn from_counts(counts: &[u64], power: f64) -> Result<Self> {
        Self::new(
            counts
                .iter()
                .map(|&c| if c == 0 { 0.0 } else { (c as f64).powf(power) })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample(&self, rng: &mut SeededRng) -> usize {
        match &self.table {
            Table::Cumulative(cdf) => {
                let u = rng.next_f64();
                let idx = cdf.partition_point(|&c| c <= u);
                // guard against the last cdf entry rounding below 1
                let mut i = idx.min(cdf.len() - 1);
                while self.weights[i] == 0.0 {
                    i -= 1;
                }
                i
            }
            Table::Alias { prob, alias } => {
                let i = rng.below(prob.len());
                if rng.next_f64() < prob[i] {
                    i
                } else {
                    alias[i]
                }
            }
        }
    }
}

/// Vose's alias method.
fn build_alias(weights: &[f64], total: f64) -> Table {
    let n = weights.len();
    let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
    let mut prob = vec![0.0; n];
    let mut alias = vec![0usize; n];
    let mut small = Vec::new();
    let mut large = Vec::new();
    for (i, &p) in scaled.iter().enumerate() {
        if p < 1.0 {
            small.push(i);
        } else {
            large.push(i);
        }
    }
    while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
        small.pop();
        prob[s] = scaled[s];
        alias[s] = l;
        scaled[l] -= 1.0 - scaled[s];
        if scaled[l] < 1.0 {
            large.pop();
            small.push(l);
        }
    }
    for i in large.into_iter().chain(small) {
        prob[i] = 1.0;
        alias[i] = i;
    }
    Table::Alias { prob, alias }
}

/// Convenience wrapper matching the free-function form.
pub fn sample_discrete(sampler: &DiscreteSampler, rng: &mut SeededRng) -> usize {
    sampler.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frequencies(s: &DiscreteSampler, draws: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeededRng::new(seed);
        let mut counts = vec![0usize; s.len()];
        for _ in 0..draws {
            counts[s.sample(&mut rng)] += 1;
        }
        counts.iter().map(|&c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn degenerate_weight_always_first() {
        let s = DiscreteSampler::new(vec![1.0, 0.0]).unwrap();
        let mut rng = SeededRng::new(3);
        assert!((0..10_000).all(|_| s.sample(&mut rng) == 0));
    }

    #[test]
    fn zero_weight_never_drawn_at_the_end() {
        let s = DiscreteSampler::new(vec![0.0, 2.0, 0.0]).unwrap();
        let mut rng = SeededRng::new(5);
        assert!((0..10_000).all(|_| s.sample(&mut rng) == 1));
    }

    #[test]
    fn uniform_pair() {
        let s = DiscreteSampler::new(vec![1.0, 1.0]).unwrap();
        let f = frequencies(&s, 100_000, 11);
        assert!((f[0] - 0.5).abs() < 0.01, "{f:?}");
    }

    #[test]
    fn three_to_one() {
        let s = DiscreteSampler::new(vec![3.0, 1.0]).unwrap();
        let f = frequencies(&s, 100_000, 12);
        assert!((f[0] - 0.75).abs() < 0.01, "{f:?}");
    }

    #[test]
    fn alias_table_matches_weights() {
        let weights: Vec<f64> = (0..2000).map(|i| (i % 7) as f64).collect();
        let s = DiscreteSampler::new(weights.clone()).unwrap();
        assert!(matches!(s.table, Table::Alias { .. }));
        let total: f64 = weights.iter().sum();
        // aggregate over the residue classes to get a tight estimate
        let f = frequencies(&s, 200_000, 13);
        let mut by_class = [0.0; 7];
        let mut expected = [0.0; 7];
        for i in 0..2000 {
            by_class[i % 7] += f[i];
            expected[i % 7] += weights[i] / total;
        }
        for k in 0..7 {
            assert!((by_class[k] - expected[k]).abs() < 0.01, "{k}");
        }
        assert_eq!(by_class[0], 0.0);
    }

    #[test]
    fn all_zero_rejected() {
        assert!(DiscreteSampler::new(vec![0.0, 0.0]).is_err());
        assert!(DiscreteSampler::new(vec![]).is_err());
    }

    #[test]
    fn reproducible() {
        let s = DiscreteSampler::new(vec![0.2, 0.5, 0.3]).unwrap();
        let mut a = SeededRng::new(99);
        let mut b = SeededRng::new(99);
        let xa: Vec<usize> = (0..500).map(|_| s.sample(&mut a)).collect();
        let xb: Vec<usize> = (0..500).map(|_| s.sample(&mut b)).collect();
        assert_eq!(xa, xb);
    }
}
