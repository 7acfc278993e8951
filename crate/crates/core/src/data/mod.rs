pub mod checkpoint;
pub mod jsonl;
pub mod synth;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, NamedTensor, OptimizerState, RngState, FORMAT_VERSION};
pub use jsonl::{load_jsonl, save_jsonl, scan_vocabulary, ImageStorage, TrialRecord};
pub use synth::{generate, SyntheticConfig};
pub use vocab::Vocabulary;

/// Index sets of an 80/10/10 train/val/test split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into 80/10/10; every index lands in exactly
/// one part.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split { train: idx, val, test }
}

pub fn select<T: Clone>(items: &[T], indices: &[usize]) -> Vec<T> {
    indices.iter().map(|&i| items[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        for n in [0, 1, 9, 10, 101] {
            let s = split_indices(n, 5);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
        let s = split_indices(100, 5);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split_indices(100, 5));
    }
}
