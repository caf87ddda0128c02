//! Class-proxy fusion: cosine-similarity scan over the proxy matrix,
//! threshold merging into a union-find partition, proxy averaging, and
//! similarity-distribution analytics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::loss::ProxyMatrix;

/// Histogram bin width for similarity reports, over [-1, 1].
pub const HIST_BIN_WIDTH: f64 = 0.02;
pub const HIST_BINS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Similarity threshold: proxies merge when sim > T1 (strict), so
    /// T1 > 1.0 reproduces naive concatenation exactly.
    pub t1: f64,
    /// Fraction of total steps after which the one-shot fusion fires.
    pub t2: f64,
    /// Scan same-dataset proxy pairs too (detects in-dataset label noise).
    pub include_intra_dataset: bool,
    /// Optional periodic re-scan after the fusion event; off by default.
    pub rescan_every: Option<u64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            t1: 0.7,
            t2: 0.21,
            include_intra_dataset: true,
            rescan_every: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        // T1 > 1 is legal and means "never merge" (naive concatenation).
        if self.t1 <= 0.0 {
            problems.push(format!("fusion.t1 must be > 0, got {}", self.t1));
        }
        if !(0.0..1.0).contains(&self.t2) {
            problems.push(format!("fusion.t2 must be in [0,1), got {}", self.t2));
        }
        if self.rescan_every == Some(0) {
            problems.push("fusion.rescan_every must be >= 1 when set".into());
        }
        problems
    }
}

/// Union-find forest with path compression and union by rank.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut x: u32) -> u32 {
        let mut path = Vec::new();
        while self.parent[x as usize] != x {
            path.push(x);
            x = self.parent[x as usize];
        }
        for p in path {
            self.parent[p as usize] = x;
        }
        x
    }

    pub fn union(&mut self, a: u32, b: u32) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra as usize].cmp(&self.rank[rb as usize]) {
            std::cmp::Ordering::Greater => self.parent[rb as usize] = ra,
            std::cmp::Ordering::Less => self.parent[ra as usize] = rb,
            std::cmp::Ordering::Equal => {
                self.parent[rb as usize] = ra;
                self.rank[ra as usize] += 1;
            }
        }
        true
    }
}

/// The result of a merge scan: a partition of original class ids with the
/// lowest member of each component as its canonical proxy id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeMap {
    /// original class id → fused (canonical) class id; idempotent.
    remap: Vec<u32>,
}

impl MergeMap {
    pub fn identity(n: usize) -> Self {
        MergeMap {
            remap: (0..n as u32).collect(),
        }
    }

    pub fn from_remap(remap: Vec<u32>) -> Result<Self> {
        for (i, &r) in remap.iter().enumerate() {
            if r as usize >= remap.len() || remap[r as usize] != r {
                return Err(Error::Format(format!(
                    "merge remap not idempotent at class {i}"
                )));
            }
        }
        Ok(MergeMap { remap })
    }

    pub fn n_classes(&self) -> usize {
        self.remap.len()
    }

    pub fn remap(&self, class: u32) -> u32 {
        self.remap[class as usize]
    }

    pub fn remap_table(&self) -> &[u32] {
        &self.remap
    }

    pub fn is_identity(&self) -> bool {
        self.remap.iter().enumerate().all(|(i, &r)| i as u32 == r)
    }

    pub fn same_component(&self, a: u32, b: u32) -> bool {
        self.remap(a) == self.remap(b)
    }

    /// Components with at least two members, each sorted ascending.
    pub fn merged_components(&self) -> Vec<Vec<u32>> {
        let mut groups: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
        for (i, &r) in self.remap.iter().enumerate() {
            groups.entry(r).or_default().push(i as u32);
        }
        groups.into_values().filter(|g| g.len() > 1).collect()
    }

    /// Chains a later merge pass after this one: classes first follow this
    /// map, then the newer one. Merges never unmerge.
    pub fn compose(&self, later: &MergeMap) -> MergeMap {
        assert_eq!(self.n_classes(), later.n_classes());
        MergeMap {
            remap: self.remap.iter().map(|&r| later.remap(r)).collect(),
        }
    }

    /// Number of unordered class pairs merged together, counted within
    /// components via closure: Σ C(|component|, 2).
    pub fn merged_pair_count(&self) -> u64 {
        self.merged_components()
            .iter()
            .map(|g| {
                let n = g.len() as u64;
                n * (n - 1) / 2
            })
            .sum()
    }
}

/// Eq-style cosine similarity between two proxy vectors.
pub fn proxy_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("proxy_similarity: zero vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Per-proxy top-1 cross-dataset similarity plus its histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub step: u64,
    /// (class id, dataset id, top-1 similarity against other datasets).
    pub entries: Vec<(u32, u32, f64)>,
    /// Fixed-width bins over [-1, 1].
    pub histogram: Vec<u64>,
}

impl SimilarityReport {
    pub fn bin_of(sim: f64) -> usize {
        (((sim + 1.0) / HIST_BIN_WIDTH) as usize).min(HIST_BINS - 1)
    }

    /// Plain-text histogram: `bin_low bin_high count` per line.
    pub fn write_histogram<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# similarity-histogram v1 step={}", self.step)?;
        for (i, &count) in self.histogram.iter().enumerate() {
            let lo = -1.0 + i as f64 * HIST_BIN_WIDTH;
            writeln!(w, "{:.2} {:.2} {}", lo, lo + HIST_BIN_WIDTH, count)?;
        }
        Ok(())
    }

    /// Raw per-proxy values: `class_id dataset_id top1` per line.
    pub fn write_raw<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# similarity-raw v1 step={}", self.step)?;
        for &(class, ds, sim) in &self.entries {
            writeln!(w, "{class} {ds} {sim:.17}")?;
        }
        Ok(())
    }
}

/// For each active proxy, the maximum similarity against active proxies
/// of *other* datasets. Errors when fewer than two datasets are active.
pub fn top1_report(proxies: &ProxyMatrix, step: u64) -> Result<SimilarityReport> {
    if proxies.active_datasets().len() < 2 {
        return Err(Error::EmptyReport);
    }
    let ids = proxies.active_ids();
    let mut entries = Vec::with_capacity(ids.len());
    let mut histogram = vec![0u64; HIST_BINS];
    for &c in &ids {
        let own = proxies.dataset_of(c as usize);
        let mut best = f64::NEG_INFINITY;
        for &o in &ids {
            if proxies.dataset_of(o as usize) == own {
                continue;
            }
            let sim = dot(proxies.vec(c as usize), proxies.vec(o as usize));
            if sim > best {
                best = sim;
            }
        }
        if best.is_finite() {
            entries.push((c, own, best));
            histogram[SimilarityReport::bin_of(best)] += 1;
        }
    }
    Ok(SimilarityReport {
        step,
        entries,
        histogram,
    })
}

/// Scans all active proxy pairs and unions those with sim > T1 (strict).
///
/// Cross-dataset pairs are always scanned; same-dataset pairs only when
/// the config says so. The canonical id of each component is its lowest
/// original class id. Deterministic: ascending (i, j) scan order.
pub fn build_merge_map(proxies: &ProxyMatrix, cfg: &FusionConfig) -> MergeMap {
    let n = proxies.n_classes();
    let ids = proxies.active_ids();
    let mut uf = UnionFind::new(n);
    for (ai, &a) in ids.iter().enumerate() {
        for &b in &ids[ai + 1..] {
            let same_ds = proxies.dataset_of(a as usize) == proxies.dataset_of(b as usize);
            if same_ds && !cfg.include_intra_dataset {
                continue;
            }
            let sim = dot(proxies.vec(a as usize), proxies.vec(b as usize));
            if sim > cfg.t1 {
                uf.union(a, b);
            }
        }
    }
    // canonical representative = lowest class id in the component
    let mut canonical = vec![u32::MAX; n];
    let mut remap = vec![0u32; n];
    for c in 0..n as u32 {
        let root = uf.find(c) as usize;
        if canonical[root] == u32::MAX {
            canonical[root] = c;
        }
    }
    for c in 0..n as u32 {
        remap[c as usize] = canonical[uf.find(c) as usize];
    }
    MergeMap { remap }
}

/// Applies a merge map to the proxy matrix: each merged component's
/// canonical proxy becomes the unit-normalized mean of its members, the
/// other members are deactivated. Label remapping goes through
/// [`MergeMap::remap`]; the trainer discards deactivated momentum and
/// resets the canonical proxy's momentum.
pub fn apply_merge(proxies: &mut ProxyMatrix, map: &MergeMap) -> Result<()> {
    if map.n_classes() != proxies.n_classes() {
        return Err(Error::Contract(format!(
            "apply_merge: map covers {} classes, proxies have {}",
            map.n_classes(),
            proxies.n_classes()
        )));
    }
    for group in map.merged_components() {
        let canonical = group[0] as usize;
        if !proxies.is_active(canonical) {
            return Err(Error::Contract(
                "apply_merge: canonical class is already inactive".into(),
            ));
        }
        let dim = proxies.dim();
        let mut mean = vec![0.0; dim];
        for &member in &group {
            for (m, &v) in mean.iter_mut().zip(proxies.vec(member as usize).iter()) {
                *m += v;
            }
        }
        let scale = 1.0 / group.len() as f64;
        mean.iter_mut().for_each(|m| *m *= scale);
        let n = norm(&mean);
        if n < 1e-12 {
            return Err(Error::Contract(
                "apply_merge: member proxies cancel out; mean is degenerate".into(),
            ));
        }
        mean.iter_mut().for_each(|m| *m /= n);
        proxies.vec_mut(canonical).copy_from_slice(&mean);
        for &member in &group[1..] {
            proxies.deactivate(member as usize);
        }
    }
    Ok(())
}

/// Number of class proxies the softmax currently uses.
pub fn count_active(proxies: &ProxyMatrix) -> usize {
    proxies.n_active()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{normalized, Mat};
    use proptest::prelude::*;

    fn proxies_from_rows(rows: Vec<Vec<f64>>, datasets: Vec<u32>) -> ProxyMatrix {
        let dim = rows[0].len();
        let mut m = Mat::zeros(rows.len(), dim);
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(r);
        }
        let n = rows.len();
        ProxyMatrix::from_parts(m, datasets, vec![true; n])
    }

    #[test]
    fn similarity_trivial_cases() {
        let v = normalized(&[1.0, 2.0, -0.5]);
        assert!((proxy_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let a = [1.0, 0.0];
        let b = [0.0, 3.0];
        assert_eq!(proxy_similarity(&a, &b).unwrap(), 0.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((proxy_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            proxy_similarity(&[0.0, 0.0], &a),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn top1_requires_two_datasets() {
        let p = proxies_from_rows(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 0],
        );
        assert!(matches!(top1_report(&p, 0), Err(Error::EmptyReport)));
    }

    #[test]
    fn top1_brute_force_agreement() {
        let bank = crate::synthetic::gen_identity_bank(12, 8, 5).unwrap();
        let rows: Vec<Vec<f64>> = bank.directions().to_vec();
        let datasets: Vec<u32> = (0..12).map(|i| (i % 3) as u32).collect();
        let p = proxies_from_rows(rows.clone(), datasets.clone());
        let report = top1_report(&p, 7).unwrap();
        assert_eq!(report.step, 7);
        assert_eq!(report.entries.len(), 12);
        for &(c, ds, top1) in &report.entries {
            // brute-force pairwise scan
            let mut best = f64::NEG_INFINITY;
            for o in 0..12 {
                if datasets[o] != ds {
                    best = best.max(dot(&rows[c as usize], &rows[o]));
                }
            }
            assert!((top1 - best).abs() < 1e-12);
            // bank separation keeps everything under the rejection threshold
            assert!(top1 < crate::synthetic::MAX_PAIR_COS);
        }
        assert_eq!(report.histogram.iter().sum::<u64>(), 12);
    }

    #[test]
    fn t1_above_one_is_identity() {
        let p = proxies_from_rows(
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 1, 1],
        );
        let cfg = FusionConfig {
            t1: 1.01,
            ..FusionConfig::default()
        };
        let map = build_merge_map(&p, &cfg);
        assert!(map.is_identity());
        assert_eq!(map.merged_pair_count(), 0);
    }

    #[test]
    fn transitive_closure_unions_chains() {
        // a–b and b–c exceed the threshold; a–c does not, but all three
        // must land in one component
        let theta = 0.95f64.acos();
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![theta.cos(), theta.sin(), 0.0];
        let two = 2.0 * theta;
        let c = vec![two.cos(), two.sin(), 0.0];
        assert!(dot(&a, &c) < 0.9);
        let p = proxies_from_rows(vec![a, b, c], vec![0, 1, 2]);
        let cfg = FusionConfig {
            t1: 0.9,
            ..FusionConfig::default()
        };
        let map = build_merge_map(&p, &cfg);
        assert!(map.same_component(0, 1));
        assert!(map.same_component(1, 2));
        assert_eq!(map.remap(2), 0, "canonical is the lowest id");
    }

    #[test]
    fn intra_dataset_scan_is_switchable() {
        let p = proxies_from_rows(
            vec![vec![1.0, 0.0], vec![1.0, 1e-6], vec![0.0, 1.0]],
            vec![0, 0, 1],
        );
        let on = build_merge_map(
            &p,
            &FusionConfig {
                t1: 0.99,
                include_intra_dataset: true,
                ..FusionConfig::default()
            },
        );
        assert!(on.same_component(0, 1), "in-dataset duplicates detected");
        let off = build_merge_map(
            &p,
            &FusionConfig {
                t1: 0.99,
                include_intra_dataset: false,
                ..FusionConfig::default()
            },
        );
        assert!(off.is_identity());
    }

    #[test]
    fn planted_conflicts_recovered_exactly() {
        // simulate convergence: conflicting classes sit on the same
        // direction, everything else on its own bank direction
        let bank = crate::synthetic::gen_identity_bank(10, 16, 9).unwrap();
        let plan = crate::synthetic::plan_split(10, 2, 0.4).unwrap();
        let mut rows = Vec::new();
        let mut datasets = Vec::new();
        for (shard, members) in plan.members.iter().enumerate() {
            for &gt in members {
                rows.push(bank.direction(gt as usize).to_vec());
                datasets.push(shard as u32);
            }
        }
        let p = proxies_from_rows(rows, datasets);
        let map = build_merge_map(&p, &FusionConfig::default());
        // ground-truth oracle: the generator's conflict list
        let offsets = {
            let mut acc = 0u32;
            let mut v = Vec::new();
            for m in &plan.members {
                v.push(acc);
                acc += m.len() as u32;
            }
            v
        };
        let mut expected = 0;
        for c in &plan.conflicts {
            let a = offsets[c.shard_a as usize] + c.local_class_a;
            let b = offsets[c.shard_b as usize] + c.local_class_b;
            assert!(map.same_component(a, b));
            expected += 1;
        }
        assert_eq!(map.merged_pair_count(), expected);
        assert_eq!(expected, 4); // round(10 * 0.4)
    }

    #[test]
    fn apply_identity_changes_nothing() {
        let mut p = proxies_from_rows(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 1],
        );
        let before = p.clone();
        apply_merge(&mut p, &MergeMap::identity(2)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn merging_identical_proxies_keeps_the_vector() {
        let v = normalized(&[0.3, -0.8, 0.52]);
        let mut p = proxies_from_rows(vec![v.clone(), v.clone()], vec![0, 1]);
        let map = build_merge_map(
            &p,
            &FusionConfig {
                t1: 0.999,
                ..FusionConfig::default()
            },
        );
        apply_merge(&mut p, &map).unwrap();
        assert!(p.is_active(0));
        assert!(!p.is_active(1));
        for (a, b) in p.vec(0).iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn merged_mean_stays_close_to_members() {
        let t = 0.98f64;
        let theta = t.acos();
        let a = vec![1.0, 0.0];
        let b = vec![theta.cos(), theta.sin()];
        let mut p = proxies_from_rows(vec![a.clone(), b.clone()], vec![0, 1]);
        let map = build_merge_map(&p, &FusionConfig::default());
        apply_merge(&mut p, &map).unwrap();
        let canon = p.vec(0);
        assert!((norm(canon) - 1.0).abs() < 1e-9);
        // direct computation: the normalized mean bisects the pair, so its
        // cosine to each member is cos(θ/2) = sqrt((1+t)/2)
        let expected = ((1.0 + t) / 2.0).sqrt();
        assert!((dot(canon, &a) - expected).abs() < 1e-12);
        assert!((dot(canon, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn count_active_tracks_merges() {
        let p0 = proxies_from_rows(
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 1, 1],
        );
        let mut p = p0.clone();
        assert_eq!(count_active(&p), 3);
        let map = build_merge_map(&p, &FusionConfig::default());
        apply_merge(&mut p, &map).unwrap();
        assert_eq!(count_active(&p), 2);
    }

    fn random_unit_proxies(n: usize, dim: usize, seed: u64) -> ProxyMatrix {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| normalized(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let ds: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
        proxies_from_rows(rows, ds)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn merge_map_is_a_partition(seed in 0u64..500, t1 in 0.1f64..1.0) {
            let p = random_unit_proxies(14, 3, seed);
            let cfg = FusionConfig { t1, ..FusionConfig::default() };
            let map = build_merge_map(&p, &cfg);
            for c in 0..14u32 {
                // idempotent
                prop_assert_eq!(map.remap(map.remap(c)), map.remap(c));
                // canonical is the lowest member
                prop_assert!(map.remap(c) <= c);
            }
        }

        #[test]
        fn higher_t1_refines_partition(seed in 0u64..500, t_lo in 0.2f64..0.7) {
            let p = random_unit_proxies(14, 3, seed);
            let t_hi = t_lo + 0.2;
            let lo = build_merge_map(&p, &FusionConfig { t1: t_lo, ..FusionConfig::default() });
            let hi = build_merge_map(&p, &FusionConfig { t1: t_hi, ..FusionConfig::default() });
            for a in 0..14u32 {
                for b in 0..14u32 {
                    if hi.same_component(a, b) {
                        prop_assert!(lo.same_component(a, b), "high-T1 components must refine low-T1");
                    }
                }
            }
        }

        #[test]
        fn apply_merge_preserves_unit_norms(seed in 0u64..200) {
            let mut p = random_unit_proxies(12, 3, seed);
            let map = build_merge_map(&p, &FusionConfig { t1: 0.5, ..FusionConfig::default() });
            apply_merge(&mut p, &map).unwrap();
            for c in 0..12 {
                if p.is_active(c) {
                    prop_assert!((norm(p.vec(c)) - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
