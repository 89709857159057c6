//! Verification metrics over descriptor pairs: Bray-Curtis distance,
//! FAR/FRR tradeoff, equal error rate, and a paired randomization test.

use crate::dataio::EmbeddingPairs;
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Bray-Curtis dissimilarity `sum |u - v| / sum (u + v)` for nonnegative
/// vectors. Zero for identical vectors, one for disjoint supports, invariant
/// under common scaling. Two all-zero vectors count as identical.
pub fn bray_curtis(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {} cannot be compared",
            u.len(),
            v.len()
        )));
    }
    if u.is_empty() {
        return Err(Error::Argument("empty vectors have no distance".into()));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        if !(a >= 0.0) || !(b >= 0.0) {
            return Err(Error::Argument(format!(
                "bray-curtis needs nonnegative finite entries, got {a} and {b}"
            )));
        }
        num += (a as f64 - b as f64).abs();
        den += a as f64 + b as f64;
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

/// Distances of matched (same identity) and nonmatched pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct VerificationScores {
    pub matched: Vec<f64>,
    pub nonmatched: Vec<f64>,
}

impl VerificationScores {
    pub fn new(matched: Vec<f64>, nonmatched: Vec<f64>) -> Result<VerificationScores> {
        if matched.is_empty() || nonmatched.is_empty() {
            return Err(Error::Argument(
                "need at least one matched and one nonmatched distance".into(),
            ));
        }
        if matched.iter().chain(&nonmatched).any(|d| !d.is_finite()) {
            return Err(Error::Data("non-finite distance".into()));
        }
        Ok(VerificationScores {
            matched,
            nonmatched,
        })
    }

    /// Bray-Curtis distances of every pair in `pairs`.
    pub fn from_pairs(pairs: &EmbeddingPairs) -> Result<VerificationScores> {
        let dist = |set: &[(Vec<f32>, Vec<f32>)]| -> Result<Vec<f64>> {
            set.iter().map(|(u, v)| bray_curtis(u, v)).collect()
        };
        VerificationScores::new(dist(&pairs.matched)?, dist(&pairs.nonmatched)?)
    }
}

/// A pair is accepted as matched iff its distance falls below `tau`.
/// Returns (false accept rate, false reject rate).
pub fn far_frr(scores: &VerificationScores, tau: f64) -> (f64, f64) {
    let far = scores.nonmatched.iter().filter(|&&d| d < tau).count() as f64
        / scores.nonmatched.len() as f64;
    let frr = scores.matched.iter().filter(|&&d| d >= tau).count() as f64
        / scores.matched.len() as f64;
    (far, frr)
}

/// Equal error rate and the threshold attaining it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub threshold: f64,
    pub eer: f64,
}

/// Sweep FAR and FRR over every distinct distance and the midpoints between
/// them; where their difference changes sign, interpolate both rates
/// linearly and report the crossing.
pub fn eer(scores: &VerificationScores) -> Result<EerResult> {
    let mut all: Vec<f64> = scores
        .matched
        .iter()
        .chain(&scores.nonmatched)
        .copied()
        .collect();
    all.sort_unstable_by(f64::total_cmp);
    all.dedup();
    let mut candidates = Vec::with_capacity(2 * all.len() + 2);
    candidates.push(all[0] - 1.0);
    for (i, &d) in all.iter().enumerate() {
        candidates.push(d);
        if let Some(&next) = all.get(i + 1) {
            candidates.push((d + next) / 2.0);
        }
    }
    candidates.push(all[all.len() - 1] + 1.0);

    // FAR - FRR is nondecreasing in tau: -1 below all distances, +1 above.
    let mut prev: Option<(f64, f64, f64)> = None;
    for &tau in &candidates {
        let (far, frr) = far_frr(scores, tau);
        let diff = far - frr;
        if diff == 0.0 {
            return Ok(EerResult {
                threshold: tau,
                eer: far,
            });
        }
        if diff > 0.0 {
            let (t1, far1, frr1) = prev.expect("diff is negative at the low sentinel");
            // far1 + s (far2 - far1) = frr1 + s (frr2 - frr1), s in (0, 1).
            let s = (frr1 - far1) / ((far - far1) - (frr - frr1));
            return Ok(EerResult {
                threshold: t1 + s * (tau - t1),
                eer: far1 + s * (far - far1),
            });
        }
        prev = Some((tau, far, frr));
    }
    unreachable!("diff is positive at the high sentinel");
}

/// Paired two-sided randomization test on the statistic |mean(a) - mean(b)|.
/// Each permutation swaps every pair independently with probability one
/// half; the p-value is (c + 1) / (permutations + 1) where c counts
/// permutations at least as extreme as the observation.
pub fn randomization_test(a: &[f64], b: &[f64], permutations: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Argument("paired test needs at least one pair".into()));
    }
    if permutations == 0 {
        return Err(Error::Argument("need at least one permutation".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite sample".into()));
    }
    let n = a.len() as f64;
    let observed: f64 = a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / n;
    let observed = observed.abs();
    let mut rng = Rng::from_seed(seed);
    let mut extreme = 0usize;
    for _ in 0..permutations {
        let mut sum = 0.0f64;
        for (x, y) in a.iter().zip(b) {
            let d = x - y;
            sum += if rng.index(2) == 1 { -d } else { d };
        }
        if (sum / n).abs() >= observed {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (permutations + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn bray_curtis_worked_example() {
        let d = bray_curtis(&[2.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!((d - 0.2).abs() < 1e-12);
    }

    #[test]
    fn bray_curtis_edges() {
        assert_eq!(bray_curtis(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        // Disjoint supports are maximally distant.
        assert_eq!(bray_curtis(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
        assert_eq!(bray_curtis(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(bray_curtis(&[1.0], &[1.0, 2.0]).is_err());
        assert!(bray_curtis(&[], &[]).is_err());
        assert!(bray_curtis(&[-1.0], &[1.0]).is_err());
        assert!(bray_curtis(&[f32::NAN], &[1.0]).is_err());
    }

    #[test]
    fn far_frr_worked_example() {
        let scores =
            VerificationScores::new(vec![0.1, 0.4], vec![0.2, 0.3]).unwrap();
        let (far, frr) = far_frr(&scores, 0.25);
        assert_eq!((far, frr), (0.5, 0.5));
        // Below every distance nothing is accepted; above, everything.
        assert_eq!(far_frr(&scores, 0.0), (0.0, 1.0));
        assert_eq!(far_frr(&scores, 1.0), (1.0, 0.0));
    }

    #[test]
    fn eer_worked_examples() {
        let scores =
            VerificationScores::new(vec![0.1, 0.4], vec![0.2, 0.3]).unwrap();
        let r = eer(&scores).unwrap();
        assert_eq!(r.eer, 0.5);
        assert_eq!(r.threshold, 0.25);

        // Fully separable: zero error between the clusters.
        let scores =
            VerificationScores::new(vec![0.1, 0.2], vec![0.5, 0.6]).unwrap();
        let r = eer(&scores).unwrap();
        assert_eq!(r.eer, 0.0);
        assert!(r.threshold > 0.2 && r.threshold < 0.5);

        // Identical multisets: chance level.
        let scores =
            VerificationScores::new(vec![0.3, 0.7], vec![0.3, 0.7]).unwrap();
        assert_eq!(eer(&scores).unwrap().eer, 0.5);

        // All distances equal: indistinguishable, chance level.
        let scores = VerificationScores::new(vec![0.5; 3], vec![0.5; 4]).unwrap();
        assert_eq!(eer(&scores).unwrap().eer, 0.5);
    }

    #[test]
    fn scores_require_both_sides() {
        assert!(VerificationScores::new(vec![], vec![0.1]).is_err());
        assert!(VerificationScores::new(vec![0.1], vec![]).is_err());
        assert!(VerificationScores::new(vec![f64::NAN], vec![0.1]).is_err());
    }

    /// Independent EER: evaluate every candidate naively and interpolate at
    /// the first sign change.
    fn eer_brute(scores: &VerificationScores) -> (f64, f64) {
        let mut all: Vec<f64> = scores
            .matched
            .iter()
            .chain(&scores.nonmatched)
            .copied()
            .collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        let mut cands = vec![all[0] - 1.0];
        for i in 0..all.len() {
            cands.push(all[i]);
            if i + 1 < all.len() {
                cands.push((all[i] + all[i + 1]) / 2.0);
            }
        }
        cands.push(all.last().unwrap() + 1.0);
        let rates: Vec<(f64, f64, f64)> = cands
            .iter()
            .map(|&t| {
                let far = scores.nonmatched.iter().filter(|&&d| d < t).count() as f64
                    / scores.nonmatched.len() as f64;
                let frr = scores.matched.iter().filter(|&&d| d >= t).count() as f64
                    / scores.matched.len() as f64;
                (t, far, frr)
            })
            .collect();
        for w in rates.windows(2) {
            let (t1, far1, frr1) = w[0];
            let (t2, far2, frr2) = w[1];
            if far1 - frr1 == 0.0 {
                return (t1, far1);
            }
            if far1 - frr1 < 0.0 && far2 - frr2 >= 0.0 {
                if far2 - frr2 == 0.0 {
                    return (t2, far2);
                }
                let s = (frr1 - far1) / ((far2 - far1) - (frr2 - frr1));
                return (t1 + s * (t2 - t1), far1 + s * (far2 - far1));
            }
        }
        unreachable!()
    }

    proptest! {
        #[test]
        fn eer_matches_brute_force(seed in 0u64..500) {
            let mut rng = Rng::from_seed(seed);
            let m = 1 + rng.index(30);
            let n = 1 + rng.index(30);
            // Quantized distances force plenty of ties across the sets.
            let gen = |rng: &mut Rng, len: usize, lo: f32, hi: f32| {
                (0..len)
                    .map(|_| (rng.uniform(lo, hi) * 16.0).round() as f64 / 16.0)
                    .collect::<Vec<f64>>()
            };
            let matched = gen(&mut rng, m, 0.0, 0.6);
            let nonmatched = gen(&mut rng, n, 0.3, 1.0);
            let scores = VerificationScores::new(matched, nonmatched).unwrap();
            let fast = eer(&scores).unwrap();
            let (t, e) = eer_brute(&scores);
            prop_assert_eq!(fast.threshold, t);
            prop_assert_eq!(fast.eer, e);
            prop_assert!((0.0..=1.0).contains(&fast.eer));
            // At the reported threshold the empirical rates bracket the EER.
            let (far, frr) = far_frr(&scores, fast.threshold);
            prop_assert!(far.min(frr) <= fast.eer + 1e-12);
            prop_assert!(fast.eer <= far.max(frr) + 1e-12);
        }

        #[test]
        fn bray_curtis_properties(seed in 0u64..400) {
            let mut rng = Rng::from_seed(seed);
            let len = 1 + rng.index(12);
            let u: Vec<f32> = (0..len).map(|_| rng.uniform(0.0, 5.0)).collect();
            let v: Vec<f32> = (0..len).map(|_| rng.uniform(0.0, 5.0)).collect();
            let d = bray_curtis(&u, &v).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, bray_curtis(&v, &u).unwrap());
            // Invariant under common positive scaling.
            let su: Vec<f32> = u.iter().map(|x| x * 3.0).collect();
            let sv: Vec<f32> = v.iter().map(|x| x * 3.0).collect();
            prop_assert!((d - bray_curtis(&su, &sv).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn randomization_exchange_invariance(seed in 0u64..200) {
            let mut rng = Rng::from_seed(seed.wrapping_add(977));
            let len = 2 + rng.index(20);
            let a: Vec<f64> = (0..len).map(|_| rng.uniform(0.0, 1.0) as f64).collect();
            let b: Vec<f64> = (0..len).map(|_| rng.uniform(0.0, 1.0) as f64).collect();
            let p_ab = randomization_test(&a, &b, 99, 5).unwrap();
            let p_ba = randomization_test(&b, &a, 99, 5).unwrap();
            prop_assert_eq!(p_ab, p_ba);
            prop_assert!(p_ab > 0.0 && p_ab <= 1.0);
        }
    }

    #[test]
    fn randomization_identical_samples_give_p_one() {
        let a = vec![0.3, 0.5, 0.9];
        let p = randomization_test(&a, &a.clone(), 199, 7).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn randomization_detects_consistent_gap() {
        // b beats a on every pair by a wide margin; with 20 pairs the
        // one-in-a-million sign pattern practically never recurs.
        let a: Vec<f64> = (0..20).map(|i| 0.9 + 0.001 * i as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| 0.1 + 0.001 * i as f64).collect();
        let p = randomization_test(&a, &b, 999, 11).unwrap();
        assert_eq!(p, 1.0 / 1000.0);
    }

    #[test]
    fn randomization_validates_input() {
        assert!(randomization_test(&[1.0], &[1.0, 2.0], 10, 0).is_err());
        assert!(randomization_test(&[], &[], 10, 0).is_err());
        assert!(randomization_test(&[1.0], &[2.0], 0, 0).is_err());
        assert!(randomization_test(&[f64::NAN], &[2.0], 10, 0).is_err());
    }

    #[test]
    fn randomization_is_seed_deterministic() {
        let a = vec![0.1, 0.9, 0.4, 0.6];
        let b = vec![0.2, 0.7, 0.5, 0.5];
        let p1 = randomization_test(&a, &b, 499, 3).unwrap();
        let p2 = randomization_test(&a, &b, 499, 3).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn scores_from_embedding_pairs() {
        let pairs = EmbeddingPairs {
            matched: vec![(vec![2.0, 1.0], vec![1.0, 1.0])],
            nonmatched: vec![(vec![1.0, 0.0], vec![0.0, 3.0])],
            dim: 2,
        };
        let scores = VerificationScores::from_pairs(&pairs).unwrap();
        assert!((scores.matched[0] - 0.2).abs() < 1e-12);
        assert_eq!(scores.nonmatched[0], 1.0);
    }
}
