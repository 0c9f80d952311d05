//! Adjusted mutual information between two labelings.

use std::collections::BTreeMap;

use statrs::function::gamma::ln_gamma;

fn ln_factorial(n: u64) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

fn canonicalize(labels: &[u32]) -> Vec<u32> {
    let mut map = BTreeMap::new();
    let mut next = 0u32;
    labels
        .iter()
        .map(|l| {
            *map.entry(*l).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            })
        })
        .collect()
}

/// AMI with the arithmetic-mean normalization:
/// `(MI - E[MI]) / (mean(H(U), H(V)) - E[MI])`. Degenerate denominators
/// (single-cluster against single-cluster, or chance-level) return 0.
pub fn adjusted_mutual_information(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len() as u64;
    if n == 0 {
        return 0.0;
    }
    // Canonicalize labels by first appearance so the result is bit-identical
    // under any relabeling permutation.
    let a = canonicalize(a);
    let b = canonicalize(b);
    let (a, b) = (&a[..], &b[..]);
    // Contingency table.
    let mut table: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut row: BTreeMap<u32, u64> = BTreeMap::new();
    let mut col: BTreeMap<u32, u64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b.iter()) {
        *table.entry((*x, *y)).or_insert(0) += 1;
        *row.entry(*x).or_insert(0) += 1;
        *col.entry(*y).or_insert(0) += 1;
    }
    let nf = n as f64;
    let mi: f64 = table
        .iter()
        .map(|((x, y), nij)| {
            let nij = *nij as f64;
            let ai = row[x] as f64;
            let bj = col[y] as f64;
            (nij / nf) * ((nf * nij) / (ai * bj)).ln()
        })
        .sum();
    let h = |counts: &BTreeMap<u32, u64>| -> f64 {
        -counts
            .values()
            .map(|c| {
                let p = *c as f64 / nf;
                p * p.ln()
            })
            .sum::<f64>()
    };
    let hu = h(&row);
    let hv = h(&col);

    // Expected MI under the hypergeometric null (Vinh et al.).
    let mut emi = 0.0;
    for ai in row.values() {
        for bj in col.values() {
            let ai = *ai;
            let bj = *bj;
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let nijf = nij as f64;
                let term1 = (nijf / nf) * ((nf * nijf) / (ai as f64 * bj as f64)).ln();
                let log_term2 = ln_factorial(ai) + ln_factorial(bj)
                    + ln_factorial(n - ai)
                    + ln_factorial(n - bj)
                    - ln_factorial(n)
                    - ln_factorial(nij)
                    - ln_factorial(ai - nij)
                    - ln_factorial(bj - nij)
                    - ln_factorial((n - ai) + nij - bj);
                emi += term1 * log_term2.exp();
            }
        }
    }

    let denom = 0.5 * (hu + hv) - emi;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    ((mi - emi) / denom).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_labelings_score_one() {
        let a = vec![0u32, 0, 1, 1, 2, 2, 2, 3];
        let ami = adjusted_mutual_information(&a, &a);
        assert!((ami - 1.0).abs() < 1e-12, "{ami}");
    }

    #[test]
    fn single_cluster_scores_zero() {
        let truth = vec![0u32, 1, 2, 0, 1, 2, 0, 1];
        let ones = vec![5u32; 8];
        let ami = adjusted_mutual_information(&ones, &truth);
        assert_eq!(ami, 0.0);
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let truth: Vec<u32> = (0..120).map(|_| rng.gen_range(0..5)).collect();
        let clusters: Vec<u32> = (0..120).map(|_| rng.gen_range(0..4)).collect();
        let base = adjusted_mutual_information(&clusters, &truth);
        // Relabel clusters by a permutation.
        let perm = [2u32, 0, 3, 1];
        let renamed: Vec<u32> = clusters.iter().map(|c| perm[*c as usize]).collect();
        let same = adjusted_mutual_information(&renamed, &truth);
        assert_eq!(base, same);
    }

    #[test]
    fn random_labelings_score_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut acc = 0.0;
        let trials = 20;
        for _ in 0..trials {
            let a: Vec<u32> = (0..300).map(|_| rng.gen_range(0..6)).collect();
            let b: Vec<u32> = (0..300).map(|_| rng.gen_range(0..6)).collect();
            acc += adjusted_mutual_information(&a, &b);
        }
        let mean = acc / trials as f64;
        assert!(mean.abs() < 0.03, "chance-level AMI should hover near 0, got {mean}");
    }

    #[test]
    fn informative_beats_noisy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth: Vec<u32> = (0..400).map(|_| rng.gen_range(0..4)).collect();
        // 90% faithful copy.
        let noisy: Vec<u32> = truth
            .iter()
            .map(|t| {
                if rng.gen::<f64>() < 0.9 {
                    *t
                } else {
                    rng.gen_range(0..4)
                }
            })
            .collect();
        let good = adjusted_mutual_information(&noisy, &truth);
        assert!(good > 0.5, "{good}");
    }
}
