use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of order-preserving merges of an `l`-sequence with a `k`-sequence,
/// `C(l+k, l)`, computed exactly.
pub fn count_interleavings(l: usize, k: usize) -> BigUint {
    let n = l + k;
    let r = l.min(k);
    let mut acc = BigUint::from(1u32);
    // acc * (n-r+i) / i is an integer at every step.
    for i in 1..=r {
        acc *= BigUint::from(n - r + i);
        acc /= BigUint::from(i);
    }
    acc
}

/// Tests a brute-force checker needs to cover two processes of `l` and `k`
/// steps whose commands carry `input_bits` free bits each:
/// `C(l+k, l) * 2^(2 * input_bits)`.
pub fn brute_force_cost(l: usize, k: usize, input_bits: u32) -> BigUint {
    count_interleavings(l, k) << (2 * input_bits as usize)
}

/// Builds the merge of `a` and `b` where `a` occupies `a_positions`
/// (strictly increasing indices into the result).
pub fn merge<T: Clone>(a: &[T], b: &[T], a_positions: &[usize]) -> Vec<T> {
    debug_assert_eq!(a_positions.len(), a.len());
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut ia, mut ib) = (0, 0);
    for slot in 0..a.len() + b.len() {
        if ia < a.len() && a_positions[ia] == slot {
            out.push(a[ia].clone());
            ia += 1;
        } else {
            out.push(b[ib].clone());
            ib += 1;
        }
    }
    out
}

/// Streams every interleaving of `a` and `b` in lexicographic order of the
/// positions taken by `a`, so the first item is all of `a` followed by all
/// of `b`.
pub struct Interleavings<'a, T> {
    a: &'a [T],
    b: &'a [T],
    positions: Option<Vec<usize>>,
}

impl<'a, T: Clone> Interleavings<'a, T> {
    /// Positions of `a` in the interleaving that the next call to `next`
    /// returns.
    pub fn peek_positions(&self) -> Option<&[usize]> {
        self.positions.as_deref()
    }

    fn advance(&mut self) {
        let n = self.a.len() + self.b.len();
        let l = self.a.len();
        let Some(c) = self.positions.as_mut() else { return };
        match (0..l).rev().find(|&i| c[i] < n - l + i) {
            Some(i) => {
                c[i] += 1;
                for j in i + 1..l {
                    c[j] = c[j - 1] + 1;
                }
            }
            None => self.positions = None,
        }
    }
}

impl<T: Clone> Iterator for Interleavings<'_, T> {
    type Item = Vec<T>;

    fn next(&mut self) -> Option<Vec<T>> {
        let merged = merge(self.a, self.b, self.positions.as_ref()?);
        self.advance();
        Some(merged)
    }
}

pub fn enumerate_interleavings<'a, T: Clone>(a: &'a [T], b: &'a [T]) -> Interleavings<'a, T> {
    Interleavings { a, b, positions: Some((0..a.len()).collect()) }
}

/// Uniform random interleavings, reproducible from `seed`.
pub struct InterleavingSampler<'a, T> {
    a: &'a [T],
    b: &'a [T],
    rng: ChaCha8Rng,
}

impl<T: Clone> InterleavingSampler<'_, T> {
    /// Positions of `a` in a fresh uniformly chosen interleaving.
    pub fn next_positions(&mut self) -> Vec<usize> {
        let n = self.a.len() + self.b.len();
        let mut pos = rand::seq::index::sample(&mut self.rng, n, self.a.len()).into_vec();
        pos.sort_unstable();
        pos
    }
}

impl<T: Clone> Iterator for InterleavingSampler<'_, T> {
    type Item = Vec<T>;

    fn next(&mut self) -> Option<Vec<T>> {
        let pos = self.next_positions();
        Some(merge(self.a, self.b, &pos))
    }
}

pub fn interleaving_sampler<'a, T: Clone>(a: &'a [T], b: &'a [T], seed: u64) -> InterleavingSampler<'a, T> {
    InterleavingSampler { a, b, rng: ChaCha8Rng::seed_from_u64(seed) }
}

/// `n` interleavings drawn uniformly with replacement.
pub fn sample_interleavings<T: Clone>(a: &[T], b: &[T], n: usize, seed: u64) -> Vec<Vec<T>> {
    interleaving_sampler(a, b, seed).take(n).collect()
}

/// The `a.len() + 1` ways of inserting `b` as one contiguous block into `a`.
pub fn block_insertions<T: Clone>(a: &[T], b: &[T]) -> Vec<Vec<T>> {
    (0..=a.len())
        .map(|at| a[..at].iter().chain(b).chain(&a[at..]).cloned().collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Naive recursive merge, independent of the combination iterator.
    fn oracle(a: &[char], b: &[char]) -> Vec<Vec<char>> {
        if a.is_empty() {
            return vec![b.to_vec()];
        }
        if b.is_empty() {
            return vec![a.to_vec()];
        }
        let mut out = Vec::new();
        for mut rest in oracle(&a[1..], b) {
            rest.insert(0, a[0]);
            out.push(rest);
        }
        for mut rest in oracle(a, &b[1..]) {
            rest.insert(0, b[0]);
            out.push(rest);
        }
        out
    }

    fn pascal(n: usize, r: usize) -> u64 {
        let mut row = vec![1u64];
        for _ in 0..n {
            let mut next = vec![1u64; row.len() + 1];
            for i in 1..row.len() {
                next[i] = row[i - 1] + row[i];
            }
            row = next;
        }
        row[r]
    }

    #[test]
    fn count_examples() {
        assert_eq!(count_interleavings(1, 1), BigUint::from(2u32));
        assert_eq!(count_interleavings(3, 3), BigUint::from(oracle(&['a', 'b', 'c'], &['x', 'y', 'z']).len()));
        assert_eq!(count_interleavings(3, 3), BigUint::from(20u32));
        assert_eq!(count_interleavings(10, 10), BigUint::from(pascal(20, 10)));
        assert_eq!(count_interleavings(10, 10), BigUint::from(184_756u32));
        assert_eq!(count_interleavings(0, 0), BigUint::from(1u32));
        assert_eq!(count_interleavings(30, 30), BigUint::from(pascal(60, 30)));
    }

    #[test]
    fn count_does_not_wrap() {
        // C(200,100) is far above u128::MAX.
        let c = count_interleavings(100, 100);
        assert!(c.bits() > 128);
        assert_eq!(c.to_string(), "90548514656103281165404177077484163874504589675413336841320");
    }

    #[test]
    fn cost_examples() {
        let expected = BigUint::from(184_756u64) * BigUint::from(1u64 << 32);
        assert_eq!(brute_force_cost(10, 10, 16), expected);
        assert_eq!(brute_force_cost(10, 10, 16), BigUint::from(793_520_977_739_776u64));
        assert_eq!(brute_force_cost(0, 0, 0), BigUint::from(1u32));
        assert_eq!(brute_force_cost(1, 0, 8), BigUint::from(65_536u32));
    }

    #[test]
    fn enumerate_examples() {
        let got: Vec<_> = enumerate_interleavings(&['A'], &['X']).collect();
        assert_eq!(got, vec![vec!['A', 'X'], vec!['X', 'A']]);
        let got: Vec<_> = enumerate_interleavings(&['A', 'B'], &['X']).collect();
        assert_eq!(got, vec![vec!['A', 'B', 'X'], vec!['A', 'X', 'B'], vec!['X', 'A', 'B']]);
        let a: Vec<u8> = (0..10).collect();
        assert_eq!(enumerate_interleavings(&a, &[100, 101]).count(), 66);
    }

    #[test]
    fn enumeration_matches_oracle_up_to_five() {
        let letters: Vec<char> = "abcde".chars().collect();
        let others: Vec<char> = "VWXYZ".chars().collect();
        for l in 0..=5 {
            for k in 0..=5 {
                let (a, b) = (&letters[..l], &others[..k]);
                let got: Vec<_> = enumerate_interleavings(a, b).collect();
                let set: BTreeSet<_> = got.iter().cloned().collect();
                assert_eq!(set.len(), got.len(), "duplicates for {l},{k}");
                assert_eq!(set, oracle(a, b).into_iter().collect::<BTreeSet<_>>());
                assert_eq!(BigUint::from(got.len()), count_interleavings(l, k));
                let mut sorted = got.clone();
                // a-first lexicographic: map a-items to 0 and b-items to 1
                sorted.sort_by_key(|s| s.iter().map(|c| u8::from(others.contains(c))).collect::<Vec<_>>());
                assert_eq!(sorted, got);
            }
        }
    }

    #[test]
    fn sampling_preserves_order_and_is_deterministic() {
        let a: Vec<u32> = (0..10).collect();
        let b: Vec<u32> = (100..110).collect();
        assert!(sample_interleavings(&a, &b, 0, 1).is_empty());
        let s = sample_interleavings(&a, &b, 1000, 42);
        assert_eq!(s.len(), 1000);
        for seq in &s {
            let pa: Vec<_> = seq.iter().filter(|x| **x < 100).copied().collect();
            let pb: Vec<_> = seq.iter().filter(|x| **x >= 100).copied().collect();
            assert_eq!(pa, a);
            assert_eq!(pb, b);
        }
        assert_eq!(s, sample_interleavings(&a, &b, 1000, 42));
        assert_ne!(s, sample_interleavings(&a, &b, 1000, 43));
    }

    #[test]
    fn sampling_is_uniform_on_the_all_a_first_sequence() {
        // Expected count 20 over 184756 * 20 draws; binomial sd ~ sqrt(20).
        let a = [0u8; 10];
        let b = [1u8; 10];
        let draws = 184_756 * 20;
        let mut sampler = interleaving_sampler(&a, &b, 2024);
        let first: Vec<usize> = (0..10).collect();
        let hits = (0..draws).filter(|_| sampler.next_positions() == first).count() as f64;
        let p = 1.0 / 184_756.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((hits - mean).abs() <= 5.0 * sd, "hits {hits}, mean {mean}, sd {sd}");
    }

    #[test]
    fn block_insertions_keep_b_contiguous() {
        let got = block_insertions(&[1, 2], &[9, 8]);
        assert_eq!(got, vec![vec![9, 8, 1, 2], vec![1, 9, 8, 2], vec![1, 2, 9, 8]]);
    }
}
