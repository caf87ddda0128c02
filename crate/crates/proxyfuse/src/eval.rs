//! Verification-style evaluation on held-out pairs plus ground-truth-aware
//! merge diagnostics.
//!
//! Pairs are scored by embedding cosine; accuracy uses the standard
//! 10-fold protocol where each fold is scored at the best threshold of the
//! other nine.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::MergeMap;
use crate::linalg::{dot, Mat};
use crate::net::{forward, NetParams};
use crate::synthetic::SampleRecord;

pub const N_FOLDS: usize = 10;

/// One verification pair: two features and whether they share an identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifPair {
    pub feature_a: Vec<f64>,
    pub feature_b: Vec<f64>,
    pub same_identity: bool,
    pub fold: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<VerifPair>,
}

/// Draws a balanced pair set from held-out samples: n_pairs/2 positives
/// (two samples of one identity) and n_pairs/2 negatives (samples of two
/// identities), with folds assigned round-robin within each class.
pub fn build_pairs(
    heldout: &[SampleRecord],
    n_pairs: usize,
    seed: u64,
) -> Result<PairSet> {
    if n_pairs < 2 || n_pairs % 2 != 0 {
        return Err(Error::Contract(format!(
            "build_pairs: n_pairs must be even and >= 2, got {n_pairs}"
        )));
    }
    let mut by_identity: std::collections::BTreeMap<u32, Vec<&SampleRecord>> = Default::default();
    for s in heldout {
        by_identity.entry(s.gt_identity).or_default().push(s);
    }
    let identities: Vec<u32> = by_identity.keys().copied().collect();
    if identities.len() < 2 {
        return Err(Error::Contract(
            "build_pairs: need samples of at least two identities".into(),
        ));
    }
    let multi: Vec<u32> = by_identity
        .iter()
        .filter_map(|(&id, v)| (v.len() >= 2).then_some(id))
        .collect();
    if multi.is_empty() {
        return Err(Error::Contract(
            "build_pairs: positives need an identity with at least two samples".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n_pairs / 2;
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..half {
        let id = multi[rng.gen_range(0..multi.len())];
        let group = &by_identity[&id];
        let a = rng.gen_range(0..group.len());
        let b = loop {
            let b = rng.gen_range(0..group.len());
            if b != a {
                break b;
            }
        };
        pairs.push(VerifPair {
            feature_a: group[a].feature.clone(),
            feature_b: group[b].feature.clone(),
            same_identity: true,
            fold: (i % N_FOLDS) as u8,
        });
    }
    for i in 0..half {
        let picked = identities
            .choose_multiple(&mut rng, 2)
            .copied()
            .collect::<Vec<_>>();
        let ga = &by_identity[&picked[0]];
        let gb = &by_identity[&picked[1]];
        pairs.push(VerifPair {
            feature_a: ga[rng.gen_range(0..ga.len())].feature.clone(),
            feature_b: gb[rng.gen_range(0..gb.len())].feature.clone(),
            same_identity: false,
            fold: (i % N_FOLDS) as u8,
        });
    }
    Ok(PairSet { pairs })
}

/// Best fixed threshold on (sims, labels) under the rule `sim >= t → same`.
///
/// The sweep is exhaustive over every achievable classification: below the
/// smallest value, above the largest, and at every midpoint of consecutive
/// distinct values. Ties pick the lowest threshold.
pub fn best_threshold(sims: &[f64], same: &[bool]) -> (f64, f64) {
    assert_eq!(sims.len(), same.len());
    assert!(!sims.is_empty());
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]));
    let mut values: Vec<f64> = Vec::with_capacity(sims.len());
    // positives/negatives at each distinct value, in ascending order
    let mut pos_at: Vec<usize> = Vec::new();
    let mut neg_at: Vec<usize> = Vec::new();
    for &i in &order {
        if values.last() != Some(&sims[i]) {
            values.push(sims[i]);
            pos_at.push(0);
            neg_at.push(0);
        }
        if same[i] {
            *pos_at.last_mut().unwrap() += 1;
        } else {
            *neg_at.last_mut().unwrap() += 1;
        }
    }
    let total_pos: usize = pos_at.iter().sum();
    let m = values.len();
    // candidate g = number of distinct values strictly below the threshold
    let mut best_correct = 0usize;
    let mut best_g = 0usize;
    let mut pos_below = 0usize;
    let mut neg_below = 0usize;
    for g in 0..=m {
        // predicted same: every pair at values[g..]; correct = (total_pos −
        // pos_below) + neg_below
        let correct = (total_pos - pos_below) + neg_below;
        if correct > best_correct {
            best_correct = correct;
            best_g = g;
        }
        if g < m {
            pos_below += pos_at[g];
            neg_below += neg_at[g];
        }
    }
    let threshold = if best_g == 0 {
        values[0] - 1.0
    } else if best_g == m {
        values[m - 1] + 1.0
    } else {
        0.5 * (values[best_g - 1] + values[best_g])
    };
    (threshold, best_correct as f64 / sims.len() as f64)
}

fn accuracy_at(sims: &[f64], same: &[bool], t: f64) -> f64 {
    let correct = sims
        .iter()
        .zip(same.iter())
        .filter(|(&s, &y)| (s >= t) == y)
        .count();
    correct as f64 / sims.len().max(1) as f64
}

/// 10-fold cross-validated accuracy: each fold is scored at the threshold
/// that maximizes accuracy over the other nine folds.
pub fn tenfold_accuracy(sims: &[f64], same: &[bool], folds: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(sims.len(), same.len());
    assert_eq!(sims.len(), folds.len());
    let mut fold_acc = Vec::with_capacity(N_FOLDS);
    let mut thresholds = Vec::with_capacity(N_FOLDS);
    for f in 0..N_FOLDS as u8 {
        let (mut tr_s, mut tr_y) = (Vec::new(), Vec::new());
        let (mut te_s, mut te_y) = (Vec::new(), Vec::new());
        for i in 0..sims.len() {
            if folds[i] == f {
                te_s.push(sims[i]);
                te_y.push(same[i]);
            } else {
                tr_s.push(sims[i]);
                tr_y.push(same[i]);
            }
        }
        if tr_s.is_empty() || te_s.is_empty() {
            continue;
        }
        let (t, _) = best_threshold(&tr_s, &tr_y);
        thresholds.push(t);
        fold_acc.push(accuracy_at(&te_s, &te_y, t));
    }
    let mean = fold_acc.iter().sum::<f64>() / fold_acc.len().max(1) as f64;
    (mean, thresholds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifOutcome {
    pub accuracy: f64,
    pub fold_thresholds: Vec<f64>,
}

/// Embeds both sides of every pair and runs the 10-fold protocol.
pub fn verification_accuracy(net: &NetParams, pairs: &PairSet) -> Result<VerifOutcome> {
    if pairs.pairs.is_empty() {
        return Err(Error::Contract("verification_accuracy: empty pair set".into()));
    }
    let sims = pair_similarities(net, pairs)?;
    let same: Vec<bool> = pairs.pairs.iter().map(|p| p.same_identity).collect();
    let folds: Vec<u8> = pairs.pairs.iter().map(|p| p.fold).collect();
    let (accuracy, fold_thresholds) = tenfold_accuracy(&sims, &same, &folds);
    Ok(VerifOutcome {
        accuracy,
        fold_thresholds,
    })
}

/// Embedding cosine of every pair, batched through the network.
pub fn pair_similarities(net: &NetParams, pairs: &PairSet) -> Result<Vec<f64>> {
    let dim = net.input_dim();
    let n = pairs.pairs.len();
    let chunk = 512usize;
    let mut sims = Vec::with_capacity(n);
    let mut idx = 0;
    while idx < n {
        let hi = (idx + chunk).min(n);
        let rows = hi - idx;
        let mut a = Mat::zeros(rows, dim);
        let mut b = Mat::zeros(rows, dim);
        for (r, p) in pairs.pairs[idx..hi].iter().enumerate() {
            if p.feature_a.len() != dim || p.feature_b.len() != dim {
                return Err(Error::Contract(format!(
                    "pair feature dim does not match net input dim {dim}"
                )));
            }
            a.row_mut(r).copy_from_slice(&p.feature_a);
            b.row_mut(r).copy_from_slice(&p.feature_b);
        }
        let (ea, _) = forward(net, &a)?;
        let (eb, _) = forward(net, &b)?;
        for r in 0..rows {
            sims.push(dot(ea.row(r), eb.row(r)));
        }
        idx = hi;
    }
    Ok(sims)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeQuality {
    pub precision: f64,
    pub recall: f64,
    /// True when there were no merged pairs (precision defined as 1).
    pub precision_vacuous: bool,
    /// True when the conflict set is empty (recall defined as 1).
    pub recall_vacuous: bool,
    pub true_merged_pairs: u64,
    pub merged_pairs: u64,
    pub conflict_pairs: u64,
}

/// Scores a merge map against the generator's exact conflict set.
///
/// Merged pairs are counted within components via closure; empty
/// denominators score as 1.0 with the vacuity flags set.
pub fn merge_quality(map: &MergeMap, conflicts_global: &[(u32, u32)]) -> MergeQuality {
    let merged_pairs = map.merged_pair_count();
    let true_merged = conflicts_global
        .iter()
        .filter(|&&(a, b)| map.same_component(a, b))
        .count() as u64;
    let (precision, precision_vacuous) = if merged_pairs == 0 {
        (1.0, true)
    } else {
        (true_merged as f64 / merged_pairs as f64, false)
    };
    let (recall, recall_vacuous) = if conflicts_global.is_empty() {
        (1.0, true)
    } else {
        (true_merged as f64 / conflicts_global.len() as f64, false)
    };
    MergeQuality {
        precision,
        recall,
        precision_vacuous,
        recall_vacuous,
        true_merged_pairs: true_merged,
        merged_pairs,
        conflict_pairs: conflicts_global.len() as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use crate::synthetic::{gen_identity_bank, sample_heldout, HELDOUT_UID_BASE};
    use proptest::prelude::*;

    fn heldout_fixture() -> Vec<SampleRecord> {
        let bank = gen_identity_bank(12, 16, 3).unwrap();
        let ids: Vec<u32> = (0..12).collect();
        sample_heldout(&bank, &ids, 4, 0.2, 77).unwrap()
    }

    #[test]
    fn pair_counts_and_balance() {
        let held = heldout_fixture();
        let set = build_pairs(&held, 20, 5).unwrap();
        assert_eq!(set.pairs.len(), 20);
        assert_eq!(set.pairs.iter().filter(|p| p.same_identity).count(), 10);
        assert_eq!(set.pairs.iter().filter(|p| !p.same_identity).count(), 10);
    }

    #[test]
    fn pairs_deterministic() {
        let held = heldout_fixture();
        assert_eq!(
            build_pairs(&held, 40, 5).unwrap(),
            build_pairs(&held, 40, 5).unwrap()
        );
    }

    #[test]
    fn pairs_only_use_heldout_uids() {
        let held = heldout_fixture();
        // every held-out record sits in the reserved uid range, so no pair
        // can reuse a training image
        assert!(held.iter().all(|s| s.image_uid >= HELDOUT_UID_BASE));
        build_pairs(&held, 20, 5).unwrap();
    }

    #[test]
    fn folds_balanced_within_one() {
        let held = heldout_fixture();
        let set = build_pairs(&held, 86, 5).unwrap();
        let mut counts = [0usize; N_FOLDS];
        for p in &set.pairs {
            counts[p.fold as usize] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 2); // ±1 within each of the two classes
    }

    #[test]
    fn perfectly_separated_scores_one() {
        let n = 100;
        let sims: Vec<f64> = (0..n).map(|i| if i < 50 { 0.9 } else { 0.1 }).collect();
        let same: Vec<bool> = (0..n).map(|i| i < 50).collect();
        let folds: Vec<u8> = (0..n).map(|i| (i % N_FOLDS) as u8).collect();
        let (acc, _) = tenfold_accuracy(&sims, &same, &folds);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn random_embeddings_score_near_half() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 2000;
        let sims: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let same: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let folds: Vec<u8> = (0..n).map(|i| ((i / 2) % N_FOLDS) as u8).collect();
        let (acc, _) = tenfold_accuracy(&sims, &same, &folds);
        assert!((acc - 0.5).abs() < 0.05, "got {acc}");
    }

    #[test]
    fn degenerate_single_point_scores_half() {
        let n = 200;
        let sims = vec![1.0; n];
        let same: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let folds: Vec<u8> = (0..n).map(|i| ((i / 2) % N_FOLDS) as u8).collect();
        let (acc, _) = tenfold_accuracy(&sims, &same, &folds);
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn verification_runs_through_network() {
        let held = heldout_fixture();
        let set = build_pairs(&held, 60, 9).unwrap();
        let net = init_params(16, &[16], 8, 21);
        let out = verification_accuracy(&net, &set).unwrap();
        assert!((0.0..=1.0).contains(&out.accuracy));
        assert_eq!(out.fold_thresholds.len(), N_FOLDS);
    }

    #[test]
    fn accuracy_invariant_under_rotation() {
        // cosine similarity only sees angles, so rotating all embeddings
        // must not move the score
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let d = 6;
        let n = 80;
        let emb_a: Vec<Vec<f64>> = (0..n)
            .map(|_| crate::linalg::normalized(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let emb_b: Vec<Vec<f64>> = (0..n)
            .map(|_| crate::linalg::normalized(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        // random rotation via Gram-Schmidt of a gaussian matrix
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for b in &basis {
                let proj = dot(&v, b);
                for (x, &bb) in v.iter_mut().zip(b.iter()) {
                    *x -= proj * bb;
                }
            }
            let nv = crate::linalg::norm(&v);
            if nv > 1e-6 {
                basis.push(v.iter().map(|x| x / nv).collect());
            }
        }
        let rotate = |v: &[f64]| -> Vec<f64> { basis.iter().map(|b| dot(v, b)).collect() };
        let same: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let folds: Vec<u8> = (0..n).map(|i| ((i / 2) % N_FOLDS) as u8).collect();
        let sims: Vec<f64> = (0..n).map(|i| dot(&emb_a[i], &emb_b[i])).collect();
        let sims_rot: Vec<f64> = (0..n)
            .map(|i| dot(&rotate(&emb_a[i]), &rotate(&emb_b[i])))
            .collect();
        let (a1, _) = tenfold_accuracy(&sims, &same, &folds);
        let (a2, _) = tenfold_accuracy(&sims_rot, &same, &folds);
        assert!((a1 - a2).abs() < 1e-9);
    }

    #[test]
    fn merge_quality_conventions() {
        let conflicts = vec![(0u32, 3u32), (1, 4)];
        // identity map with conflicts: recall 0, precision vacuous 1
        let id = MergeMap::identity(6);
        let q = merge_quality(&id, &conflicts);
        assert_eq!(q.precision, 1.0);
        assert!(q.precision_vacuous);
        assert_eq!(q.recall, 0.0);
        // identity map, zero conflicts: both vacuous 1
        let q0 = merge_quality(&id, &[]);
        assert_eq!((q0.precision, q0.recall), (1.0, 1.0));
        assert!(q0.precision_vacuous && q0.recall_vacuous);
    }

    #[test]
    fn merge_quality_exact_and_all_in_one() {
        let conflicts = vec![(0u32, 3u32), (1, 4)];
        // exactly the planted conflicts merged
        let mut remap: Vec<u32> = (0..6).collect();
        remap[3] = 0;
        remap[4] = 1;
        let map = MergeMap::from_remap(remap).unwrap();
        let q = merge_quality(&map, &conflicts);
        assert_eq!((q.precision, q.recall), (1.0, 1.0));
        // everything merged into one: precision = |conflicts| / C(6,2)
        let all = MergeMap::from_remap(vec![0; 6]).unwrap();
        let q = merge_quality(&all, &conflicts);
        assert_eq!(q.recall, 1.0);
        assert!((q.precision - 2.0 / 15.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn best_threshold_beats_any_fixed_threshold(seed in 0u64..1000) {
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let sims: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let same: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            let (_, best_acc) = best_threshold(&sims, &same);
            for _ in 0..100 {
                let t = rng.gen_range(-1.2..1.2);
                prop_assert!(best_acc >= accuracy_at(&sims, &same, t) - 1e-12);
            }
        }
    }
}
