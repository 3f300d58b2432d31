//! Seeded synthetic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ragforge_core::{Passage, PassageStore};

/// Zipf-ish vocabulary: low word ids are drawn far more often.
fn word(rng: &mut ChaCha8Rng, vocab: usize) -> String {
    let u: f64 = rng.random();
    let id = ((vocab as f64).powf(u) - 1.0) as usize;
    format!("w{}", id.min(vocab - 1))
}

pub fn sentence(rng: &mut ChaCha8Rng, words: usize, vocab: usize) -> String {
    (0..words).map(|_| word(rng, vocab)).collect::<Vec<_>>().join(" ")
}

pub fn corpus(n: usize, words: usize, vocab: usize, seed: u64) -> PassageStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let passages = (0..n)
        .map(|i| Passage::new(format!("p{i}"), "", sentence(&mut rng, words, vocab)))
        .collect();
    PassageStore::from_passages(passages).expect("ids are unique")
}

pub fn queries(n: usize, words: usize, vocab: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sentence(&mut rng, words, vocab)).collect()
}

pub fn vectors(n: usize, dim: usize, seed: u64) -> Vec<(String, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (format!("v{i}"), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded() {
        assert_eq!(queries(5, 4, 100, 1), queries(5, 4, 100, 1));
        assert_ne!(queries(5, 4, 100, 1), queries(5, 4, 100, 2));
        let c = corpus(50, 20, 500, 3);
        assert_eq!(c.len(), 50);
        assert_eq!(c.fingerprint(), corpus(50, 20, 500, 3).fingerprint());
        assert!(vectors(3, 8, 0).iter().all(|(_, v)| v.len() == 8));
    }
}
