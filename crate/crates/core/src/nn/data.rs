use rand::Rng;

use super::NnError;
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// `b` independent uniform draws.
    WithReplacement,
    /// `b` distinct items, uniformly chosen.
    WithoutReplacement,
    /// `b` consecutive items (cyclically) starting at a uniform offset.
    Contiguous,
}

/// Draws a random subset of `dataset` of size `b`.
pub fn minibatch_sample<T: Clone>(dataset: &[T], b: usize, scheme: Sampling, rng: &mut SimRng) -> Result<Vec<T>, NnError> {
    let n = dataset.len();
    if n == 0 {
        return Err(NnError::Empty("dataset".into()));
    }
    if b == 0 || (b > n && scheme != Sampling::WithReplacement) {
        return Err(NnError::Invalid(format!("batch size {b} for dataset of {n}")));
    }
    Ok(match scheme {
        Sampling::WithReplacement => (0..b).map(|_| dataset[rng.random_range(0..n)].clone()).collect(),
        Sampling::WithoutReplacement => {
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..b {
                let j = rng.random_range(i..n);
                idx.swap(i, j);
            }
            idx[..b].iter().map(|&i| dataset[i].clone()).collect()
        }
        Sampling::Contiguous => {
            let start = rng.random_range(0..n);
            (0..b).map(|i| dataset[(start + i) % n].clone()).collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn full_contiguous_batch_is_whole_dataset() {
        let data: Vec<usize> = (0..9).collect();
        let mut batch = minibatch_sample(&data, 9, Sampling::Contiguous, &mut seeded(3)).unwrap();
        batch.sort();
        assert_eq!(batch, data);
    }

    #[test]
    fn same_seed_same_batches() {
        let data: Vec<usize> = (0..50).collect();
        for scheme in [Sampling::WithReplacement, Sampling::WithoutReplacement, Sampling::Contiguous] {
            let a = minibatch_sample(&data, 7, scheme, &mut seeded(42)).unwrap();
            let b = minibatch_sample(&data, 7, scheme, &mut seeded(42)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_and_oversized_are_errors() {
        let empty: Vec<u8> = vec![];
        assert!(minibatch_sample(&empty, 1, Sampling::WithReplacement, &mut seeded(0)).is_err());
        assert!(minibatch_sample(&[1, 2], 3, Sampling::WithoutReplacement, &mut seeded(0)).is_err());
    }

    #[test]
    fn without_replacement_has_distinct_items() {
        let data: Vec<usize> = (0..20).collect();
        let mut b = minibatch_sample(&data, 20, Sampling::WithoutReplacement, &mut seeded(9)).unwrap();
        b.sort();
        assert_eq!(b, data);
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        // 1e5 draws of size 4 from 10 items without replacement: each item is
        // included with probability 0.4; binomial sd = sqrt(n p (1-p)).
        let data: Vec<usize> = (0..10).collect();
        let draws = 100_000;
        let mut rng = seeded(2024);
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            for i in minibatch_sample(&data, 4, Sampling::WithoutReplacement, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let p = 0.4;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "count {c} vs {mean} ± {sd}");
        }
    }
}
