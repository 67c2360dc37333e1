//! Datasets, client shards for the three distribution settings, and test
//! shards for the two evaluation modes.
//!
//! Partitioning always happens on a training pool that had a held-out slice
//! removed first (`split_holdout`), so no test sample can leak into any
//! client's shard regardless of setting or mode.

pub mod io;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seeds;

/// Largest allowed total-variation distance between a client's training and
/// local-test label distributions.
pub const LOCAL_TEST_TV_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Vec<(Tensor, usize)>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<(Tensor, usize)>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if num_classes == 0 {
            return Err(Error::Data("dataset needs at least one class".into()));
        }
        let shape = samples[0].0.shape().to_vec();
        for (i, (x, y)) in samples.iter().enumerate() {
            if x.shape() != shape {
                return Err(Error::Data(format!(
                    "sample {i} has shape {:?}, expected {shape:?}",
                    x.shape()
                )));
            }
            if *y >= num_classes {
                return Err(Error::Data(format!(
                    "sample {i} has label {y}, beyond {num_classes} classes"
                )));
            }
            if x.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("sample {i} contains non-finite features")));
            }
        }
        Ok(LabeledDataset { samples, num_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_shape(&self) -> &[usize] {
        self.samples[0].0.shape()
    }

    pub fn sample(&self, i: usize) -> (&Tensor, usize) {
        let (x, y) = &self.samples[i];
        (x, *y)
    }

    pub fn label(&self, i: usize) -> usize {
        self.samples[i].1
    }

    /// Stacks the indexed samples into a `[N, sample...]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Data("cannot assemble an empty batch".into()));
        }
        let sample_len: usize = self.feature_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * sample_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (x, y) = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
            data.extend_from_slice(x.data());
            labels.push(*y);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.feature_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Per-class sample counts over `indices` (whole dataset if empty slice
    /// handling is needed, pass `0..len`).
    pub fn label_histogram(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let mut hist = vec![0usize; self.num_classes];
        for &i in indices {
            let label = self
                .samples
                .get(i)
                .map(|(_, y)| *y)
                .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
            hist[label] += 1;
        }
        Ok(hist)
    }

    /// New dataset containing copies of the indexed samples.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(samples, self.num_classes)
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, (_, y)) in self.samples.iter().enumerate() {
            by_class[*y].push(i);
        }
        by_class
    }
}

/// Client data distribution settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Every client's label distribution matches the pool.
    Iid,
    /// Dirichlet label skew; every client still sees every class.
    NonIid,
    /// Clients own pairwise disjoint class sets.
    Dispatch,
}

impl Setting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Setting::Iid),
            "noniid" => Ok(Setting::NonIid),
            "dispatch" => Ok(Setting::Dispatch),
            other => Err(Error::Config(format!(
                "unknown setting `{other}` (expected iid, noniid, or dispatch)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::Iid => "iid",
            Setting::NonIid => "noniid",
            Setting::Dispatch => "dispatch",
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-client training shards (indices into the training pool).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub setting: Setting,
    pub clients: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
    pub shards: Vec<Vec<usize>>,
}

/// Dispatches to the partitioner for `setting`.
pub fn partition(
    setting: Setting,
    data: &LabeledDataset,
    clients: usize,
    seed: u64,
    alpha: f64,
) -> Result<PartitionPlan> {
    match setting {
        Setting::Iid => partition_iid(data, clients, seed),
        Setting::NonIid => partition_noniid(data, clients, seed, alpha),
        Setting::Dispatch => partition_dispatch(data, clients, seed),
    }
}

/// Stratified shuffle-split: per-class shuffles dealt round-robin with a
/// cursor that rolls across classes, so each client's count of every class
/// and its total size are both within ±1 of an exact proportional share.
pub fn partition_iid(data: &LabeledDataset, clients: usize, seed: u64) -> Result<PartitionPlan> {
    check_client_count(data, clients)?;
    let mut rng = seeds::stream_rng(seed, seeds::stream::PARTITION, 0);
    let mut shards = vec![Vec::new(); clients];
    let mut cursor = 0usize;
    for mut class_indices in data.indices_by_class() {
        class_indices.shuffle(&mut rng);
        for idx in class_indices {
            shards[cursor].push(idx);
            cursor = (cursor + 1) % clients;
        }
    }
    Ok(PartitionPlan { setting: Setting::Iid, clients, seed, alpha: None, shards })
}

/// Dirichlet(α) label skew: per class, client proportions are drawn from a
/// symmetric Dirichlet and realized by largest-remainder rounding, then
/// repaired so every client keeps at least one sample of every class.
pub fn partition_noniid(
    data: &LabeledDataset,
    clients: usize,
    seed: u64,
    alpha: f64,
) -> Result<PartitionPlan> {
    check_client_count(data, clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "dirichlet concentration must be positive and finite, got {alpha}"
        )));
    }
    let by_class = data.indices_by_class();
    for (c, indices) in by_class.iter().enumerate() {
        if indices.len() < clients {
            return Err(Error::Config(format!(
                "class {c} has {} samples, fewer than {clients} clients",
                indices.len()
            )));
        }
    }
    let mut rng = seeds::stream_rng(seed, seeds::stream::PARTITION, 0);
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Internal(format!("gamma distribution setup failed: {e}")))?;
    let mut shards = vec![Vec::new(); clients];
    for mut class_indices in by_class {
        class_indices.shuffle(&mut rng);
        // Symmetric Dirichlet via normalized gamma draws.
        let mut draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) {
            // All draws underflowed to zero (tiny alpha); fall back to uniform.
            draws = vec![1.0; clients];
        }
        let mut counts = apportion(&draws, class_indices.len());
        repair_min_one(&mut counts);
        let mut start = 0;
        for (k, &count) in counts.iter().enumerate() {
            shards[k].extend_from_slice(&class_indices[start..start + count]);
            start += count;
        }
        debug_assert_eq!(start, class_indices.len());
    }
    Ok(PartitionPlan {
        setting: Setting::NonIid,
        clients,
        seed,
        alpha: Some(alpha),
        shards,
    })
}

/// Disjoint class ownership: class ids are shuffled, chunked contiguously
/// into `clients` groups (earlier clients take the extra classes when the
/// count does not divide), and each client receives every sample of its
/// classes.
pub fn partition_dispatch(
    data: &LabeledDataset,
    clients: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    check_client_count(data, clients)?;
    if data.num_classes() < clients {
        return Err(Error::Config(format!(
            "dispatch needs at least as many classes as clients ({} < {clients})",
            data.num_classes()
        )));
    }
    let mut rng = seeds::stream_rng(seed, seeds::stream::PARTITION, 0);
    let mut class_ids: Vec<usize> = (0..data.num_classes()).collect();
    class_ids.shuffle(&mut rng);
    let by_class = data.indices_by_class();
    let (quot, rem) = (data.num_classes() / clients, data.num_classes() % clients);
    let mut shards = Vec::with_capacity(clients);
    let mut next = 0usize;
    for k in 0..clients {
        let take = quot + usize::from(k < rem);
        let classes = &class_ids[next..next + take];
        next += take;
        let mut shard = Vec::new();
        for &c in classes {
            shard.extend_from_slice(&by_class[c]);
        }
        if shard.is_empty() {
            return Err(Error::Data(format!(
                "client {k} would own classes {classes:?}, which have no samples"
            )));
        }
        shards.push(shard);
    }
    Ok(PartitionPlan { setting: Setting::Dispatch, clients, seed, alpha: None, shards })
}

fn check_client_count(data: &LabeledDataset, clients: usize) -> Result<()> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if clients > data.len() {
        return Err(Error::Config(format!(
            "{clients} clients cannot share {} samples",
            data.len()
        )));
    }
    Ok(())
}

/// Rounds real-valued proportional targets to integer counts that sum to
/// `total` (largest-remainder; ties broken toward lower indices).
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let targets: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Moves single samples from the fullest cells to empty ones until every
/// count is at least 1. Requires `sum(counts) >= counts.len()`.
fn repair_min_one(counts: &mut [usize]) {
    loop {
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = counts
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("counts is nonempty");
        debug_assert!(counts[donor] > 1, "not enough samples to cover every client");
        counts[donor] -= 1;
        counts[empty] += 1;
    }
}

/// Evaluation data layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMode {
    /// One pooled shard every client is scored on.
    Global,
    /// Per-client shards matching each client's training distribution.
    Local,
}

impl TestMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(TestMode::Global),
            "local" => Ok(TestMode::Local),
            other => Err(Error::Config(format!(
                "unknown test mode `{other}` (expected global or local)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TestMode::Global => "global",
            TestMode::Local => "local",
        }
    }
}

/// Per-client test shards (indices into the held-out dataset). The global
/// mode stores one shard structurally, so "all clients see the same data" is
/// true by representation, not by copied lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TestAssignment {
    Global { shard: Vec<usize>, clients: usize },
    Local { shards: Vec<Vec<usize>> },
}

impl TestAssignment {
    pub fn mode(&self) -> TestMode {
        match self {
            TestAssignment::Global { .. } => TestMode::Global,
            TestAssignment::Local { .. } => TestMode::Local,
        }
    }

    pub fn num_clients(&self) -> usize {
        match self {
            TestAssignment::Global { clients, .. } => *clients,
            TestAssignment::Local { shards } => shards.len(),
        }
    }

    pub fn shard_for(&self, client: usize) -> &[usize] {
        match self {
            TestAssignment::Global { shard, .. } => shard,
            TestAssignment::Local { shards } => &shards[client],
        }
    }
}

/// Total-variation distance between two distributions over the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Builds test shards from the held-out pool.
///
/// Global mode hands every client the whole pool (whose label distribution
/// matches the combined training shards, because the held-out split is
/// stratified and every plan covers the full training pool). Local mode
/// samples a per-client shard whose label histogram matches that client's
/// training histogram within [`LOCAL_TEST_TV_TOLERANCE`] total variation.
///
/// Local shards of different clients may overlap: each client draws
/// independently from the full pool, so one skewed client can never starve
/// another of a class they both need. Overlap is harmless here — nothing
/// ever trains on these samples.
pub fn build_tests(
    train_data: &LabeledDataset,
    plan: &PartitionPlan,
    held_out: &LabeledDataset,
    mode: TestMode,
) -> Result<TestAssignment> {
    if held_out.is_empty() {
        return Err(Error::Config("held-out pool is empty".into()));
    }
    if train_data.num_classes() != held_out.num_classes() {
        return Err(Error::Config(
            "training and held-out pools disagree on the class count".into(),
        ));
    }
    match mode {
        TestMode::Global => Ok(TestAssignment::Global {
            shard: (0..held_out.len()).collect(),
            clients: plan.clients,
        }),
        TestMode::Local => {
            let mut rng = seeds::stream_rng(plan.seed, seeds::stream::TEST_BUILD, 0);
            let mut pools = held_out.indices_by_class();
            for pool in pools.iter_mut() {
                pool.shuffle(&mut rng);
            }
            let budget = (held_out.len() / plan.clients).max(1);
            let mut shards = Vec::with_capacity(plan.clients);
            for (k, train_shard) in plan.shards.iter().enumerate() {
                let hist = train_data.label_histogram(train_shard)?;
                let weights: Vec<f64> = hist.iter().map(|&c| c as f64).collect();
                let targets = apportion(&weights, budget);
                let mut shard = Vec::new();
                let mut worst_shortfall = (0usize, 0usize); // (missing, class)
                for (c, &want) in targets.iter().enumerate() {
                    let take = want.min(pools[c].len());
                    if want - take > worst_shortfall.0 {
                        worst_shortfall = (want - take, c);
                    }
                    shard.extend_from_slice(&pools[c][..take]);
                }
                if shard.is_empty() {
                    return Err(Error::Config(format!(
                        "held-out pool has no samples of class {} for client {k}'s \
                         test shard",
                        worst_shortfall.1
                    )));
                }
                let train_total: usize = hist.iter().sum();
                let test_hist = held_out.label_histogram(&shard)?;
                let p: Vec<f64> =
                    hist.iter().map(|&c| c as f64 / train_total as f64).collect();
                let q: Vec<f64> = test_hist
                    .iter()
                    .map(|&c| c as f64 / shard.len() as f64)
                    .collect();
                let tv = total_variation(&p, &q);
                if tv > LOCAL_TEST_TV_TOLERANCE {
                    let worst = p
                        .iter()
                        .zip(&q)
                        .enumerate()
                        .max_by(|(_, (a1, b1)), (_, (a2, b2))| {
                            let d1 = (*a1 - *b1).abs();
                            let d2 = (*a2 - *b2).abs();
                            d1.partial_cmp(&d2).unwrap()
                        })
                        .map(|(c, _)| c)
                        .unwrap();
                    return Err(Error::Config(format!(
                        "held-out pool cannot match client {k}'s distribution: class {worst} \
                         is short (train {:.3} vs test {:.3}, total variation {tv:.3} > {})",
                        p[worst], q[worst], LOCAL_TEST_TV_TOLERANCE
                    )));
                }
                shards.push(shard);
            }
            Ok(TestAssignment::Local { shards })
        }
    }
}

/// Splits off a held-out slice before any partitioning, stratified by class:
/// per class, `fraction` of the samples (rounded, and always leaving at
/// least one training sample) go to the held-out pool.
///
/// Returns `(train_pool, held_out, train_indices, held_indices)` where the
/// index vectors map back into `data`.
pub fn split_holdout(
    data: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "held-out fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut rng = seeds::stream_rng(seed, seeds::stream::HOLDOUT, 0);
    let mut held = Vec::new();
    let mut train = Vec::new();
    for mut class_indices in data.indices_by_class() {
        class_indices.shuffle(&mut rng);
        let n = class_indices.len();
        let want = (n as f64 * fraction).round() as usize;
        // Keep at least one training sample per class; singleton classes are
        // never held out.
        let take = want.min(n.saturating_sub(1)).max(if n > 1 { 1 } else { 0 });
        held.extend_from_slice(&class_indices[..take]);
        train.extend_from_slice(&class_indices[take..]);
    }
    held.sort_unstable();
    train.sort_unstable();
    if held.is_empty() {
        return Err(Error::Config(
            "held-out fraction produced an empty test pool".into(),
        ));
    }
    Ok((data.subset(&train)?, data.subset(&held)?, train, held))
}

/// Synthetic Gaussian-blob classification data: one standard-normal center
/// per class, samples cycle through classes (so labels are balanced to ±1)
/// and scatter around their center with standard deviation `noise`.
pub fn synthetic_blobs(
    samples: usize,
    features: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if features == 0 {
        return Err(Error::Config("synthetic data needs at least 1 feature".into()));
    }
    if samples < classes {
        return Err(Error::Config(format!(
            "{samples} samples cannot cover {classes} classes"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = seeds::stream_rng(seed, seeds::stream::SYNTHESIS, 0);
    let normal = StandardNormal;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..features).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % classes;
        let x: Vec<f64> = centers[label]
            .iter()
            .map(|&c| c + noise * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
            .collect();
        out.push((Tensor::from_vec(x), label));
    }
    LabeledDataset::new(out, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `n` samples, labels cycling through `classes`, 2 features each.
    fn toy(n: usize, classes: usize) -> LabeledDataset {
        let samples = (0..n)
            .map(|i| {
                (
                    Tensor::from_vec(vec![i as f64, (i % classes) as f64]),
                    i % classes,
                )
            })
            .collect();
        LabeledDataset::new(samples, classes).unwrap()
    }

    fn assert_exact_partition(plan: &PartitionPlan, total: usize) {
        let mut seen = vec![false; total];
        for shard in &plan.shards {
            for &i in shard {
                assert!(!seen[i], "sample {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "some samples were never assigned");
    }

    #[test]
    fn iid_single_client_takes_everything() {
        let data = toy(30, 3);
        let plan = partition_iid(&data, 1, 7).unwrap();
        assert_eq!(plan.shards.len(), 1);
        assert_eq!(plan.shards[0].len(), 30);
    }

    #[test]
    fn iid_balances_classes_and_sizes() {
        let data = toy(100, 2);
        let plan = partition_iid(&data, 2, 7).unwrap();
        assert_exact_partition(&plan, 100);
        for shard in &plan.shards {
            let hist = data.label_histogram(shard).unwrap();
            assert_eq!(hist, vec![25, 25]);
        }
    }

    #[test]
    fn iid_stays_within_one_sample_on_awkward_counts() {
        // 47 samples, 3 classes, 4 clients: nothing divides evenly.
        let data = toy(47, 3);
        let plan = partition_iid(&data, 4, 3).unwrap();
        assert_exact_partition(&plan, 47);
        let global = data.label_histogram(&(0..47).collect::<Vec<_>>()).unwrap();
        for shard in &plan.shards {
            assert!((shard.len() as i64 - (47 / 4) as i64).abs() <= 1);
            let hist = data.label_histogram(shard).unwrap();
            for (c, &count) in hist.iter().enumerate() {
                let share = global[c] as f64 / 4.0;
                assert!(
                    (count as f64 - share).abs() <= 1.0,
                    "class {c}: {count} vs fair share {share}"
                );
            }
        }
    }

    #[test]
    fn iid_is_deterministic() {
        let data = toy(60, 3);
        assert_eq!(partition_iid(&data, 4, 9).unwrap(), partition_iid(&data, 4, 9).unwrap());
        assert_ne!(
            partition_iid(&data, 4, 9).unwrap().shards,
            partition_iid(&data, 4, 10).unwrap().shards
        );
    }

    #[test]
    fn noniid_covers_every_cell() {
        let data = toy(1000, 5);
        let plan = partition_noniid(&data, 5, 11, 0.5).unwrap();
        assert_exact_partition(&plan, 1000);
        for shard in &plan.shards {
            let hist = data.label_histogram(shard).unwrap();
            assert!(hist.iter().all(|&c| c >= 1), "empty cell in {hist:?}");
        }
        // Deterministic given (seed, alpha).
        assert_eq!(plan, partition_noniid(&data, 5, 11, 0.5).unwrap());
    }

    #[test]
    fn noniid_rejects_thin_classes() {
        let data = toy(10, 5); // 2 samples per class
        let err = partition_noniid(&data, 3, 1, 0.5).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn large_alpha_approaches_iid() {
        let data = toy(500, 5);
        let plan = partition_noniid(&data, 5, 13, 1e6).unwrap();
        for shard in &plan.shards {
            let hist = data.label_histogram(shard).unwrap();
            for &count in &hist {
                // 100 per class / 5 clients = 20 each in the IID limit.
                assert!((count as i64 - 20).abs() <= 2, "histogram {hist:?}");
            }
        }
    }

    #[test]
    fn dispatch_gives_disjoint_class_sets() {
        let data = toy(80, 4);
        let plan = partition_dispatch(&data, 2, 17).unwrap();
        assert_exact_partition(&plan, 80);
        let mut class_sets = Vec::new();
        for shard in &plan.shards {
            let hist = data.label_histogram(shard).unwrap();
            let classes: Vec<usize> = hist
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(c, _)| c)
                .collect();
            assert_eq!(classes.len(), 2);
            class_sets.push(classes);
        }
        assert!(class_sets[0].iter().all(|c| !class_sets[1].contains(c)));
    }

    #[test]
    fn dispatch_one_class_per_client_when_counts_match() {
        let data = toy(50, 5);
        let plan = partition_dispatch(&data, 5, 23).unwrap();
        for shard in &plan.shards {
            let hist = data.label_histogram(shard).unwrap();
            assert_eq!(hist.iter().filter(|&&c| c > 0).count(), 1);
        }
    }

    #[test]
    fn dispatch_needs_enough_classes() {
        let data = toy(40, 2);
        assert!(matches!(
            partition_dispatch(&data, 3, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn holdout_is_stratified_and_disjoint() {
        let data = toy(120, 3);
        let (train, held, train_idx, held_idx) = split_holdout(&data, 1.0 / 6.0, 5).unwrap();
        assert_eq!(train.len() + held.len(), 120);
        // 40 per class, round(40/6) = 7 held out from each.
        assert_eq!(held.len(), 21);
        for i in &held_idx {
            assert!(!train_idx.contains(i));
        }
        // Stratified: about a sixth of each class.
        let hist = held.label_histogram(&(0..held.len()).collect::<Vec<_>>()).unwrap();
        for &c in &hist {
            assert!((c as i64 - 7).abs() <= 1, "held-out histogram {hist:?}");
        }
    }

    #[test]
    fn global_tests_share_one_shard() {
        let data = toy(120, 3);
        let (train, held, _, _) = split_holdout(&data, 0.25, 5).unwrap();
        let plan = partition_iid(&train, 3, 5).unwrap();
        let tests = build_tests(&train, &plan, &held, TestMode::Global).unwrap();
        assert_eq!(tests.mode(), TestMode::Global);
        assert_eq!(tests.num_clients(), 3);
        let first = tests.shard_for(0).to_vec();
        assert_eq!(tests.shard_for(2), first.as_slice());
        assert_eq!(first.len(), held.len());
    }

    #[test]
    fn local_tests_match_train_histograms() {
        let data = toy(600, 3);
        let (train, held, _, _) = split_holdout(&data, 1.0 / 6.0, 5).unwrap();
        for setting in [Setting::Iid, Setting::Dispatch] {
            let plan = partition(setting, &train, 3, 5, 0.5).unwrap();
            let tests = build_tests(&train, &plan, &held, TestMode::Local).unwrap();
            for k in 0..3 {
                let train_hist = train.label_histogram(&plan.shards[k]).unwrap();
                let test_hist = held.label_histogram(tests.shard_for(k)).unwrap();
                let tn: usize = train_hist.iter().sum();
                let sn: usize = test_hist.iter().sum();
                let p: Vec<f64> = train_hist.iter().map(|&c| c as f64 / tn as f64).collect();
                let q: Vec<f64> = test_hist.iter().map(|&c| c as f64 / sn as f64).collect();
                assert!(
                    total_variation(&p, &q) <= LOCAL_TEST_TV_TOLERANCE,
                    "{setting:?} client {k}: train {train_hist:?} vs test {test_hist:?}"
                );
                if setting == Setting::Dispatch {
                    // Local shards only contain the client's own class.
                    for (c, &count) in test_hist.iter().enumerate() {
                        assert!(count == 0 || train_hist[c] > 0);
                    }
                }
            }
        }
    }

    #[test]
    fn skewed_clients_do_not_starve_each_other_of_test_samples() {
        // Three clients all train 80% on class 0. Their combined appetite for
        // class 0 (24 samples) exceeds the pool's supply (15), so shards must
        // overlap — but every single client's own demand (8) fits easily.
        let train = toy(120, 2); // even indices class 0, odd class 1
        let shards: Vec<Vec<usize>> = (0..3)
            .map(|k| {
                let class0 = (0..16).map(|i| 2 * (16 * k + i));
                let class1 = (0..4).map(|i| 2 * (4 * k + i) + 1);
                class0.chain(class1).collect()
            })
            .collect();
        let plan = PartitionPlan {
            setting: Setting::NonIid,
            clients: 3,
            seed: 9,
            alpha: Some(0.5),
            shards,
        };
        let held = toy(30, 2); // 15 samples of each class
        let tests = build_tests(&train, &plan, &held, TestMode::Local).unwrap();
        for k in 0..3 {
            let hist = held.label_histogram(tests.shard_for(k)).unwrap();
            assert_eq!(hist, vec![8, 2], "client {k}");
        }
    }

    #[test]
    fn impossible_local_match_names_the_class() {
        // Training data has two classes, but the held-out pool only class 0,
        // so a client training on class 1 cannot get a matching shard.
        let train = toy(40, 2);
        let held = LabeledDataset::new(
            (0..10).map(|i| (Tensor::from_vec(vec![i as f64, 0.0]), 0)).collect(),
            2,
        )
        .unwrap();
        let plan = partition_dispatch(&train, 2, 3).unwrap();
        let err = build_tests(&train, &plan, &held, TestMode::Local).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("class 1"), "got: {msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_blobs_are_balanced_and_deterministic() {
        let a = synthetic_blobs(100, 4, 5, 1.0, 42).unwrap();
        let b = synthetic_blobs(100, 4, 5, 1.0, 42).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.feature_shape(), &[4]);
        let hist = a.label_histogram(&(0..100).collect::<Vec<_>>()).unwrap();
        assert_eq!(hist, vec![20; 5]);
        for i in 0..100 {
            assert!(a.sample(i).0.bit_eq(b.sample(i).0));
        }
        assert!(!a.sample(0).0.bit_eq(synthetic_blobs(100, 4, 5, 1.0, 43).unwrap().sample(0).0));
    }

    #[test]
    fn batch_stacks_samples_in_order() {
        let data = toy(5, 2);
        let (x, y) = data.batch(&[3, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.data(), &[3.0, 1.0, 0.0, 0.0]);
        assert_eq!(y, vec![1, 0]);
        assert!(data.batch(&[99]).is_err());
        assert!(data.batch(&[]).is_err());
    }

    #[test]
    fn dataset_validation_catches_bad_samples() {
        let bad_label = vec![(Tensor::from_vec(vec![0.0]), 3usize)];
        assert!(LabeledDataset::new(bad_label, 2).is_err());
        let bad_shape = vec![
            (Tensor::from_vec(vec![0.0]), 0usize),
            (Tensor::from_vec(vec![0.0, 1.0]), 1),
        ];
        assert!(LabeledDataset::new(bad_shape, 2).is_err());
        let bad_value = vec![(Tensor::from_vec(vec![f64::NAN]), 0usize)];
        assert!(LabeledDataset::new(bad_value, 1).is_err());
    }
}
