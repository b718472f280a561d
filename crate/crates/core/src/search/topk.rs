//! Radix top-k selection over f64 scores.
//!
//! Floats map to unsigned keys whose integer order matches float order
//! (sign bit flipped for positives, all bits flipped for negatives; negative
//! zero collapses onto positive zero). The selector walks byte histograms
//! from the most significant byte down: buckets above the boundary are
//! accepted wholesale, the boundary bucket is refined on the next byte, and
//! exact-threshold ties resolve to the lowest index.

/// Monotone total-order key for a finite f64.
#[inline]
fn order_key(v: f64) -> u64 {
    let v = if v == 0.0 { 0.0 } else { v };
    let bits = v.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | 0x8000_0000_0000_0000
    }
}

/// Indices of the `k` largest scores, ordered by (score desc, index asc).
/// Ties at the selection threshold break to the lower index. `k >= n`
/// returns all indices.
pub fn radix_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    if k == 0 {
        return Vec::new();
    }
    let keys: Vec<u64> = scores.iter().map(|&v| order_key(v)).collect();
    if k >= n {
        let mut all: Vec<usize> = (0..n).collect();
        all.sort_by(|&a, &b| keys[b].cmp(&keys[a]).then(a.cmp(&b)));
        return all;
    }

    let mut result: Vec<usize> = Vec::with_capacity(k);
    let mut candidates: Vec<usize> = (0..n).collect();
    let mut need = k;

    for byte_pos in (0..8).rev() {
        let shift = byte_pos * 8;
        let mut hist = [0usize; 256];
        for &i in &candidates {
            hist[((keys[i] >> shift) & 0xff) as usize] += 1;
        }
        let mut above = 0usize;
        let mut boundary = 0usize;
        for bucket in (0..256).rev() {
            if above + hist[bucket] >= need {
                boundary = bucket;
                break;
            }
            above += hist[bucket];
        }
        let mut boundary_members = Vec::with_capacity(hist[boundary]);
        for &i in &candidates {
            let byte = ((keys[i] >> shift) & 0xff) as usize;
            if byte > boundary {
                result.push(i);
            } else if byte == boundary {
                boundary_members.push(i);
            }
        }
        need -= above;
        candidates = boundary_members;
        if need == candidates.len() {
            break;
        }
    }
    // Remaining candidates share one exact key (or the whole bucket is
    // needed); fill by ascending index.
    result.extend(candidates.into_iter().take(need));
    result.sort_by(|&a, &b| keys[b].cmp(&keys[a]).then(a.cmp(&b)));
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full-sort reference: (score desc, index asc), take k.
    fn sort_oracle(scores: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }

    #[test]
    fn tiny_case() {
        assert_eq!(radix_topk(&[5.0, 1.0, 9.0, 3.0], 2), vec![2, 0]);
    }

    #[test]
    fn all_equal_ties_break_to_lowest_indices() {
        assert_eq!(radix_topk(&[7.0; 6], 3), vec![0, 1, 2]);
    }

    #[test]
    fn k_at_least_n_returns_everything() {
        assert_eq!(radix_topk(&[1.0, 2.0], 5), vec![1, 0]);
        assert_eq!(radix_topk(&[], 3), Vec::<usize>::new());
    }

    #[test]
    fn signed_zeros_match_the_oracle() {
        let scores = [-0.0, 0.0, -0.0, 0.0];
        assert_eq!(radix_topk(&scores, 2), sort_oracle(&scores, 2));
        assert_eq!(radix_topk(&scores, 2), vec![0, 1]);
    }

    #[test]
    fn negatives_and_duplicates_match_the_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..200 {
            let n = rng.gen_range(1..200);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        // Force duplicates from a small value pool.
                        (rng.gen_range(-3i64..3) as f64) * 0.5
                    } else {
                        rng.gen::<f64>() * 200.0 - 100.0
                    }
                })
                .collect();
            let k = rng.gen_range(1..=n);
            assert_eq!(
                radix_topk(&scores, k),
                sort_oracle(&scores, k),
                "trial {trial} failed (n={n}, k={k})"
            );
        }
    }
}
