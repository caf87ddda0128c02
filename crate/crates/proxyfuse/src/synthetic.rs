//! Synthetic identity data: ground-truth direction banks, noisy samples,
//! and overlapping dataset shards with an exactly enumerable conflict set.
//!
//! Identities are unit vectors on the hypersphere. A shard is one
//! "dataset": a set of identities with dense local class ids, noisy
//! per-image feature vectors, and an additive per-dataset domain shift.
//! Splitting with overlap ratio `r` plants round(N*r) cross-shard class
//! conflicts along a ring: shard i shares identities with shard i+1.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, normalized};

/// Generator rejects identity pairs at or above this cosine similarity.
pub const MAX_PAIR_COS: f64 = 0.9;

/// Attempts per identity before rejection sampling gives up.
const MAX_ATTEMPTS: usize = 256;

/// Held-out sample uids start here so they can never collide with training uids.
pub const HELDOUT_UID_BASE: u64 = 1 << 40;

// Stream tags for deriving independent substreams from one spec seed.
const STREAM_DOMAIN: u64 = 1 << 32;
const STREAM_BASE: u64 = 2 << 32;
const STREAM_PEEK: u64 = 3 << 32;

fn substream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Ground-truth identity directions on the unit hypersphere.
///
/// Every experiment is scored against this hidden truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityBank {
    pub dim: usize,
    pub seed: u64,
    directions: Vec<Vec<f64>>,
}

impl IdentityBank {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn direction(&self, id: usize) -> &[f64] {
        &self.directions[id]
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    pub(crate) fn from_parts(dim: usize, seed: u64, directions: Vec<Vec<f64>>) -> Self {
        IdentityBank { dim, seed, directions }
    }

    /// Returns a larger bank with `extra` fresh directions appended, for
    /// probing generalization to identities never seen in training.
    pub fn extend_unseen(&self, extra: usize, seed: u64) -> Result<IdentityBank> {
        let mut directions = self.directions.clone();
        let mut rng = substream(seed, u64::from(u32::MAX));
        grow_bank(&mut directions, extra, self.dim, &mut rng)?;
        Ok(IdentityBank {
            dim: self.dim,
            seed: self.seed,
            directions,
        })
    }
}

fn grow_bank(
    directions: &mut Vec<Vec<f64>>,
    count: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let requested = directions.len() + count;
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let candidate = normalized(&gaussian_vec(rng, dim));
            let ok = directions.iter().all(|d| dot(d, &candidate) < MAX_PAIR_COS);
            if ok {
                directions.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::BankCapacity {
                requested,
                placed: directions.len(),
                dim,
                attempts: MAX_ATTEMPTS,
            });
        }
    }
    Ok(())
}

/// Generates `n` unit directions with pairwise cosine below [`MAX_PAIR_COS`].
///
/// Deterministic for a fixed seed. Fails with a capacity error when the
/// dimension is too small to host `n` identities at that separation.
pub fn gen_identity_bank(n: usize, dim: usize, seed: u64) -> Result<IdentityBank> {
    if n < 2 {
        return Err(Error::Contract(format!("bank needs n >= 2 identities, got {n}")));
    }
    if dim < 4 {
        return Err(Error::Contract(format!("bank needs dim >= 4, got {dim}")));
    }
    let mut directions = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grow_bank(&mut directions, n, dim, &mut rng)?;
    Ok(IdentityBank { dim, seed, directions })
}

/// One noisy observation of an identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub gt_identity: u32,
    pub local_class_id: u32,
    /// Identifies the underlying "image"; equal uids mean duplicated images.
    pub image_uid: u64,
    pub feature: Vec<f64>,
}

/// One dataset: local classes, samples, and a fixed domain-shift vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetShard {
    pub dataset_id: u32,
    /// (local_class_id, gt_identity); local ids are dense 0..C_k-1.
    pub classes: Vec<(u32, u32)>,
    pub samples: Vec<SampleRecord>,
    pub domain_shift: Vec<f64>,
}

impl DatasetShard {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// How to carve one identity bank into overlapping dataset shards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_identities: usize,
    pub k: usize,
    /// Overlap ratio in [0,1): round(N*r) identities are planted in two shards.
    pub r: f64,
    pub duplicate_images: bool,
    pub images_per_identity: usize,
    pub noise_sigma: f64,
    /// Magnitude of each shard's fixed additive domain-shift vector.
    pub domain_shift_mag: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            n_identities: 1000,
            k: 8,
            r: 0.2,
            duplicate_images: false,
            images_per_identity: 8,
            noise_sigma: 0.3,
            domain_shift_mag: 0.05,
            seed: 1,
        }
    }
}

/// One planted conflict: the same identity appearing as a class in two shards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictPair {
    pub gt_identity: u32,
    pub shard_a: u32,
    pub local_class_a: u32,
    pub shard_b: u32,
    pub local_class_b: u32,
}

/// Pure identity-membership accounting for a split; no samples drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub n_identities: usize,
    pub k: usize,
    /// Disjoint base identity ranges, one per shard.
    pub bases: Vec<Vec<u32>>,
    /// Identities shard i borrows from its clockwise neighbor's base.
    pub peeks: Vec<Vec<u32>>,
    /// Full member list per shard, in local-class order (base then peeked).
    pub members: Vec<Vec<u32>>,
    pub conflicts: Vec<ConflictPair>,
}

impl SplitPlan {
    /// Total class count over all shards: N + round(N*r).
    pub fn total_classes(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }
}

/// Splits identities 0..N into k ring-overlapping shards.
///
/// Shard i's members are its base range plus the first m_i identities of
/// shard (i+1)%k's base, with Σ m_i = round(N*r) distributed as evenly as
/// possible (remainders go to the lowest-index edges). Every shared
/// identity lives in exactly two shards, so the conflict set has size
/// round(N*r) exactly.
pub fn plan_split(n: usize, k: usize, r: f64) -> Result<SplitPlan> {
    if k == 0 {
        return Err(Error::Split("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Split(format!(
            "cannot split {n} identities into {k} non-empty subsets"
        )));
    }
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Split(format!("overlap ratio r={r} outside [0,1)")));
    }
    let m_total = (n as f64 * r).round() as usize;
    if k == 1 {
        if m_total > 0 {
            return Err(Error::Split(
                "k=1 admits no overlap: a single subset has no neighbor to share with".into(),
            ));
        }
        let base: Vec<u32> = (0..n as u32).collect();
        return Ok(SplitPlan {
            n_identities: n,
            k,
            bases: vec![base.clone()],
            peeks: vec![vec![]],
            members: vec![base],
            conflicts: vec![],
        });
    }

    let mut bases: Vec<Vec<u32>> = Vec::with_capacity(k);
    let mut start = 0usize;
    for i in 0..k {
        let size = n / k + usize::from(i < n % k);
        bases.push((start as u32..(start + size) as u32).collect());
        start += size;
    }

    let mut peeks: Vec<Vec<u32>> = Vec::with_capacity(k);
    for i in 0..k {
        let m_i = m_total / k + usize::from(i < m_total % k);
        let donor = &bases[(i + 1) % k];
        if m_i > donor.len() {
            return Err(Error::Split(format!(
                "edge {i}->{} needs {m_i} shared identities but the donor base holds only {}",
                (i + 1) % k,
                donor.len()
            )));
        }
        peeks.push(donor[..m_i].to_vec());
    }

    let members: Vec<Vec<u32>> = (0..k)
        .map(|i| {
            let mut m = bases[i].clone();
            m.extend_from_slice(&peeks[i]);
            m
        })
        .collect();

    let mut conflicts = Vec::with_capacity(m_total);
    for i in 0..k {
        let j = (i + 1) % k;
        for (offset, &x) in peeks[i].iter().enumerate() {
            let local_a = (bases[i].len() + offset) as u32;
            let local_b = (x - bases[j][0]) as u32;
            conflicts.push(ConflictPair {
                gt_identity: x,
                shard_a: i as u32,
                local_class_a: local_a,
                shard_b: j as u32,
                local_class_b: local_b,
            });
        }
    }
    conflicts.sort_by_key(|c| c.gt_identity);

    Ok(SplitPlan {
        n_identities: n,
        k,
        bases,
        peeks,
        members,
        conflicts,
    })
}

/// A generated shard collection plus its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardSet {
    pub bank: IdentityBank,
    pub spec: SplitSpec,
    pub shards: Vec<DatasetShard>,
    pub conflicts: Vec<ConflictPair>,
}

impl ShardSet {
    /// Starting global class id of each shard (shard class tables concatenated).
    pub fn class_offsets(&self) -> Vec<u32> {
        let mut offsets = Vec::with_capacity(self.shards.len());
        let mut acc = 0u32;
        for s in &self.shards {
            offsets.push(acc);
            acc += s.n_classes() as u32;
        }
        offsets
    }

    pub fn n_classes_total(&self) -> usize {
        self.shards.iter().map(DatasetShard::n_classes).sum()
    }

    /// dataset id of every global class, in global-id order.
    pub fn dataset_of_classes(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.n_classes_total());
        for s in &self.shards {
            out.extend(std::iter::repeat(s.dataset_id).take(s.n_classes()));
        }
        out
    }

    /// gt identity of every global class, in global-id order.
    pub fn gt_of_classes(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.n_classes_total());
        for s in &self.shards {
            out.extend(s.classes.iter().map(|&(_, gt)| gt));
        }
        out
    }

    /// Planted conflicts as pairs of global class ids.
    pub fn conflict_global_pairs(&self) -> Vec<(u32, u32)> {
        let offsets = self.class_offsets();
        self.conflicts
            .iter()
            .map(|c| {
                (
                    offsets[c.shard_a as usize] + c.local_class_a,
                    offsets[c.shard_b as usize] + c.local_class_b,
                )
            })
            .collect()
    }

    /// Largest training image uid, for held-out uid disjointness checks.
    pub fn max_image_uid(&self) -> u64 {
        self.shards
            .iter()
            .flat_map(|s| s.samples.iter().map(|r| r.image_uid))
            .max()
            .unwrap_or(0)
    }
}

fn noisy_feature(direction: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return direction.to_vec();
    }
    let mut v: Vec<f64> = direction
        .iter()
        .map(|&d| d + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn add_shift(feature: &mut [f64], shift: &[f64]) {
    if shift.iter().all(|&s| s == 0.0) {
        return;
    }
    for (f, &s) in feature.iter_mut().zip(shift.iter()) {
        *f += s;
    }
}

/// Draws `images_per_identity` noisy samples for each member identity.
///
/// feature = normalize(direction + gaussian(0, sigma)) + domain_shift,
/// with fresh image uids 0.. within the returned shard.
pub fn sample_shard(
    bank: &IdentityBank,
    members: &[u32],
    images_per_identity: usize,
    noise_sigma: f64,
    dataset_id: u32,
    domain_shift: &[f64],
    seed: u64,
) -> Result<DatasetShard> {
    if members.is_empty() {
        return Err(Error::Contract("sample_shard: members must be nonempty".into()));
    }
    if noise_sigma < 0.0 {
        return Err(Error::Contract(format!(
            "sample_shard: noise_sigma must be >= 0, got {noise_sigma}"
        )));
    }
    if images_per_identity == 0 {
        return Err(Error::Contract("sample_shard: images_per_identity must be >= 1".into()));
    }
    if domain_shift.len() != bank.dim {
        return Err(Error::Contract(format!(
            "sample_shard: domain_shift has dim {}, bank has dim {}",
            domain_shift.len(),
            bank.dim
        )));
    }
    for &m in members {
        if m as usize >= bank.len() {
            return Err(Error::Contract(format!(
                "sample_shard: member {m} outside bank of {} identities",
                bank.len()
            )));
        }
    }

    let mut rng = substream(seed, STREAM_BASE + u64::from(dataset_id));
    let mut samples = Vec::with_capacity(members.len() * images_per_identity);
    let mut next_id = 0u64;
    let classes: Vec<(u32, u32)> = members
        .iter()
        .enumerate()
        .map(|(local, &gt)| (local as u32, gt))
        .collect();
    for &(local, gt) in &classes {
        for _ in 0..images_per_identity {
            let mut feature = noisy_feature(bank.direction(gt as usize), noise_sigma, &mut rng);
            add_shift(&mut feature, domain_shift);
            samples.push(SampleRecord {
                sample_id: next_id,
                gt_identity: gt,
                local_class_id: local,
                image_uid: next_id,
                feature,
            });
            next_id += 1;
        }
    }
    Ok(DatasetShard {
        dataset_id,
        classes,
        samples,
        domain_shift: domain_shift.to_vec(),
    })
}

/// Generates the full overlapping shard collection for a spec.
///
/// Base classes are sampled first across all shards, then the peeked
/// (shared) classes: with `duplicate_images` the peeking shard reuses the
/// donor shard's records verbatim (same uid, same feature), otherwise it
/// draws fresh noise under its own domain shift.
pub fn split_with_overlap(bank: &IdentityBank, spec: &SplitSpec) -> Result<ShardSet> {
    if bank.len() != spec.n_identities {
        return Err(Error::Contract(format!(
            "split: bank holds {} identities but spec.n_identities = {}",
            bank.len(),
            spec.n_identities
        )));
    }
    if spec.noise_sigma < 0.0 {
        return Err(Error::Split(format!(
            "noise_sigma must be >= 0, got {}",
            spec.noise_sigma
        )));
    }
    if spec.images_per_identity == 0 {
        return Err(Error::Split("images_per_identity must be >= 1".into()));
    }
    let plan = plan_split(spec.n_identities, spec.k, spec.r)?;

    let dim = bank.dim;
    let shifts: Vec<Vec<f64>> = (0..spec.k)
        .map(|i| {
            if spec.domain_shift_mag == 0.0 {
                vec![0.0; dim]
            } else {
                let mut rng = substream(spec.seed, STREAM_DOMAIN + i as u64);
                let dir = normalized(&gaussian_vec(&mut rng, dim));
                dir.iter().map(|x| x * spec.domain_shift_mag).collect()
            }
        })
        .collect();

    let ipi = spec.images_per_identity;
    let mut shards: Vec<DatasetShard> = (0..spec.k)
        .map(|i| DatasetShard {
            dataset_id: i as u32,
            classes: plan.members[i]
                .iter()
                .enumerate()
                .map(|(local, &gt)| (local as u32, gt))
                .collect(),
            samples: Vec::with_capacity(plan.members[i].len() * ipi),
            domain_shift: shifts[i].clone(),
        })
        .collect();

    // Pass 1: base classes, shard-major, sequential uids.
    let mut next_uid = 0u64;
    let mut next_sample_id = 0u64;
    for i in 0..spec.k {
        let mut rng = substream(spec.seed, STREAM_BASE + i as u64);
        for (local, &gt) in plan.bases[i].iter().enumerate() {
            for _ in 0..ipi {
                let mut feature = noisy_feature(bank.direction(gt as usize), spec.noise_sigma, &mut rng);
                add_shift(&mut feature, &shifts[i]);
                shards[i].samples.push(SampleRecord {
                    sample_id: next_sample_id,
                    gt_identity: gt,
                    local_class_id: local as u32,
                    image_uid: next_uid,
                    feature,
                });
                next_sample_id += 1;
                next_uid += 1;
            }
        }
    }

    // Pass 2: peeked classes; clone the donor's records under duplication,
    // otherwise draw fresh images under this shard's own shift.
    for i in 0..spec.k {
        let donor = (i + 1) % spec.k;
        let mut rng = substream(spec.seed, STREAM_PEEK + i as u64);
        for (offset, &gt) in plan.peeks[i].iter().enumerate() {
            let local = (plan.bases[i].len() + offset) as u32;
            if spec.duplicate_images {
                let donor_local = (gt - plan.bases[donor][0]) as usize;
                for rec_idx in 0..ipi {
                    let donor_rec = shards[donor].samples[donor_local * ipi + rec_idx].clone();
                    shards[i].samples.push(SampleRecord {
                        sample_id: next_sample_id,
                        gt_identity: gt,
                        local_class_id: local,
                        image_uid: donor_rec.image_uid,
                        feature: donor_rec.feature,
                    });
                    next_sample_id += 1;
                }
            } else {
                for _ in 0..ipi {
                    let mut feature =
                        noisy_feature(bank.direction(gt as usize), spec.noise_sigma, &mut rng);
                    add_shift(&mut feature, &shifts[i]);
                    shards[i].samples.push(SampleRecord {
                        sample_id: next_sample_id,
                        gt_identity: gt,
                        local_class_id: local,
                        image_uid: next_uid,
                        feature,
                    });
                    next_sample_id += 1;
                    next_uid += 1;
                }
            }
        }
    }

    Ok(ShardSet {
        bank: bank.clone(),
        spec: spec.clone(),
        shards,
        conflicts: plan.conflicts,
    })
}

/// Fresh noise draws for evaluation, in a uid range disjoint from training.
///
/// No domain shift is applied: held-out features model a neutral domain.
pub fn sample_heldout(
    bank: &IdentityBank,
    identities: &[u32],
    per_identity: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if identities.is_empty() || per_identity == 0 {
        return Err(Error::Contract(
            "sample_heldout: need at least one identity and one sample each".into(),
        ));
    }
    let mut rng = substream(seed, STREAM_PEEK + (1 << 20));
    let mut out = Vec::with_capacity(identities.len() * per_identity);
    let mut next = HELDOUT_UID_BASE;
    for &gt in identities {
        if gt as usize >= bank.len() {
            return Err(Error::Contract(format!(
                "sample_heldout: identity {gt} outside bank of {}",
                bank.len()
            )));
        }
        for _ in 0..per_identity {
            let feature = noisy_feature(bank.direction(gt as usize), noise_sigma, &mut rng);
            out.push(SampleRecord {
                sample_id: next,
                gt_identity: gt,
                local_class_id: 0,
                image_uid: next,
                feature,
            });
            next += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cosine;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn bank_two_identities_separated() {
        let bank = gen_identity_bank(2, 4, 7).unwrap();
        for d in bank.directions() {
            assert!((norm(d) - 1.0).abs() < 1e-9);
        }
        assert!(dot(bank.direction(0), bank.direction(1)) < MAX_PAIR_COS);
    }

    #[test]
    fn bank_deterministic() {
        let a = gen_identity_bank(1000, 64, 1).unwrap();
        let b = gen_identity_bank(1000, 64, 1).unwrap();
        for (x, y) in a.directions().iter().zip(b.directions()) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn bank_tight_dim_never_silently_close() {
        // Either succeeds with all pairs separated, or reports capacity.
        match gen_identity_bank(100, 4, 3) {
            Ok(bank) => {
                // brute-force pairwise similarity scan
                for i in 0..bank.len() {
                    for j in (i + 1)..bank.len() {
                        assert!(dot(bank.direction(i), bank.direction(j)) < MAX_PAIR_COS);
                    }
                }
            }
            Err(Error::BankCapacity { .. }) => {}
            Err(e) => panic!("unexpected error kind: {e}"),
        }
    }

    #[test]
    fn shard_zero_noise_is_exact() {
        let bank = gen_identity_bank(4, 8, 11).unwrap();
        let shift = vec![0.0; 8];
        let shard = sample_shard(&bank, &[2, 0], 3, 0.0, 0, &shift, 5).unwrap();
        assert_eq!(shard.n_classes(), 2);
        for s in &shard.samples {
            let (_, gt) = shard.classes[s.local_class_id as usize];
            assert_eq!(s.gt_identity, gt);
            // bitwise equality: zero noise, zero shift
            assert_eq!(s.feature, bank.direction(gt as usize));
        }
    }

    #[test]
    fn shard_single_member() {
        let bank = gen_identity_bank(8, 8, 11).unwrap();
        let shift = vec![0.0; 8];
        let shard = sample_shard(&bank, &[5], 3, 0.0, 0, &shift, 5).unwrap();
        assert_eq!(shard.n_classes(), 1);
        assert_eq!(shard.samples.len(), 3);
        for s in &shard.samples {
            assert_eq!(s.gt_identity, 5);
            assert_eq!(s.feature, bank.direction(5));
        }
    }

    #[test]
    fn shard_noise_keeps_own_identity_closest_on_average() {
        let bank = gen_identity_bank(6, 16, 3).unwrap();
        let shift = vec![0.0; 16];
        let members: Vec<u32> = (0..6).collect();
        let shard = sample_shard(&bank, &members, 20, 0.1, 0, &shift, 9).unwrap();
        // brute-force: mean cosine to own direction vs best other direction
        for gt in 0..6usize {
            let own: Vec<f64> = shard
                .samples
                .iter()
                .filter(|s| s.gt_identity == gt as u32)
                .map(|s| cosine(&s.feature, bank.direction(gt)))
                .collect();
            let mean_own = own.iter().sum::<f64>() / own.len() as f64;
            for other in 0..6usize {
                if other == gt {
                    continue;
                }
                let cross: Vec<f64> = shard
                    .samples
                    .iter()
                    .filter(|s| s.gt_identity == gt as u32)
                    .map(|s| cosine(&s.feature, bank.direction(other)))
                    .collect();
                let mean_cross = cross.iter().sum::<f64>() / cross.len() as f64;
                assert!(mean_own > mean_cross);
            }
        }
    }

    #[test]
    fn plan_zero_overlap_disjoint() {
        let plan = plan_split(100, 4, 0.0).unwrap();
        assert_eq!(plan.conflicts.len(), 0);
        for m in &plan.members {
            assert_eq!(m.len(), 25);
        }
        let all: HashSet<u32> = plan.members.iter().flatten().copied().collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn plan_twenty_percent_overlap() {
        let plan = plan_split(100, 4, 0.2).unwrap();
        assert_eq!(plan.conflicts.len(), 20);
        // brute-force count of distinct (shard, gt) pairs = naive class count
        let slots: usize = plan.members.iter().map(Vec::len).sum();
        assert_eq!(slots, 120);
        // union still covers everything
        let all: HashSet<u32> = plan.members.iter().flatten().copied().collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn plan_matches_published_count_formula() {
        // naive-concat class count = |S| + N*r, checked at the scale the
        // formula was reported for
        let plan = plan_split(10560, 8, 0.2).unwrap();
        assert_eq!(plan.total_classes(), 10560 + 2112);
        assert_eq!(plan.conflicts.len(), 2112);
    }

    #[test]
    fn plan_k2_conflicts_match_ratio() {
        let plan = plan_split(1000, 2, 0.3).unwrap();
        assert_eq!(plan.conflicts.len(), 300);
        // each shared identity appears in exactly two shards
        let mut seen = std::collections::HashMap::new();
        for m in &plan.members {
            for &x in m {
                *seen.entry(x).or_insert(0) += 1;
            }
        }
        assert_eq!(seen.values().filter(|&&c| c == 2).count(), 300);
        assert_eq!(seen.values().filter(|&&c| c == 1).count(), 700);
    }

    #[test]
    fn plan_unrealizable_names_constraint() {
        let err = plan_split(3, 4, 0.0).unwrap_err();
        match err {
            Error::Split(msg) => assert!(msg.contains("non-empty")),
            e => panic!("wrong error kind: {e}"),
        }
        let err = plan_split(100, 1, 0.5).unwrap_err();
        assert!(matches!(err, Error::Split(_)));
    }

    fn small_set(duplicate: bool) -> ShardSet {
        let bank = gen_identity_bank(24, 12, 2).unwrap();
        let spec = SplitSpec {
            n_identities: 24,
            k: 3,
            r: 0.25,
            duplicate_images: duplicate,
            images_per_identity: 2,
            noise_sigma: 0.2,
            domain_shift_mag: 0.05,
            seed: 13,
        };
        split_with_overlap(&bank, &spec).unwrap()
    }

    #[test]
    fn split_distinct_mode_uids_disjoint() {
        let set = small_set(false);
        let mut seen = HashSet::new();
        for shard in &set.shards {
            for s in &shard.samples {
                assert!(seen.insert(s.image_uid), "uid {} repeated", s.image_uid);
                assert!(s.feature.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn split_duplicate_mode_shares_records() {
        let set = small_set(true);
        for c in &set.conflicts {
            let a = &set.shards[c.shard_a as usize];
            let b = &set.shards[c.shard_b as usize];
            let recs_a: Vec<_> = a
                .samples
                .iter()
                .filter(|s| s.local_class_id == c.local_class_a)
                .collect();
            let recs_b: Vec<_> = b
                .samples
                .iter()
                .filter(|s| s.local_class_id == c.local_class_b)
                .collect();
            assert_eq!(recs_a.len(), recs_b.len());
            for (x, y) in recs_a.iter().zip(recs_b.iter()) {
                assert_eq!(x.image_uid, y.image_uid);
                assert_eq!(x.feature, y.feature);
            }
        }
    }

    #[test]
    fn split_classes_dense_and_consistent() {
        let set = small_set(false);
        for shard in &set.shards {
            for (i, &(local, _)) in shard.classes.iter().enumerate() {
                assert_eq!(local as usize, i);
            }
            for s in &shard.samples {
                let (_, gt) = shard.classes[s.local_class_id as usize];
                assert_eq!(gt, s.gt_identity);
            }
        }
    }

    #[test]
    fn split_deterministic() {
        let a = small_set(false);
        let b = small_set(false);
        assert_eq!(a, b);
    }

    #[test]
    fn conflict_global_pairs_line_up() {
        let set = small_set(false);
        let gts = set.gt_of_classes();
        let ds = set.dataset_of_classes();
        for (a, b) in set.conflict_global_pairs() {
            assert_eq!(gts[a as usize], gts[b as usize]);
            assert_ne!(ds[a as usize], ds[b as usize]);
        }
        assert_eq!(set.conflicts.len(), 6); // round(24 * 0.25)
    }

    #[test]
    fn heldout_uids_disjoint_from_training() {
        let set = small_set(false);
        let ids: Vec<u32> = (0..24).collect();
        let held = sample_heldout(&set.bank, &ids, 2, 0.2, 99).unwrap();
        let max_train = set.max_image_uid();
        for h in &held {
            assert!(h.image_uid > max_train);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn class_count_accounting(n in 8usize..200, k in 2usize..8, r in 0.0f64..0.9) {
            prop_assume!(n >= k);
            if let Ok(plan) = plan_split(n, k, r) {
                let expected = n + (n as f64 * r).round() as usize;
                prop_assert_eq!(plan.total_classes(), expected);
                prop_assert_eq!(plan.conflicts.len(), (n as f64 * r).round() as usize);
                // union covers all identities
                let all: HashSet<u32> = plan.members.iter().flatten().copied().collect();
                prop_assert_eq!(all.len(), n);
            }
        }
    }
}
