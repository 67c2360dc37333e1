//! The project's exit gate. Each check prints one verdict line of the form
//! `[acceptance NN] PASS <name>: <measured detail> (<time>, budget <limit>)`
//! and fails loudly otherwise. The desk-scale benchmark families (checks
//! 06–09) share their runs through lazy memoization, so the whole target
//! stays well inside each check's individual time budget.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use fedsim::data::{partition, synthetic_blobs, Setting};
use fedsim::model::{
    server_init, BlockEntry, HeadMode, ParameterBlock, PartitionLayout, PartitionedModel,
};
use fedsim::nn::{Architecture, LayerParams, LayerSpec, NamedLayer, SgdConfig, Tensor};
use fedsim::protocol::{aggregate, Contribution, Federation, Method, ProtocolObserver, RoundConfig};
use fedsim::runner::config::ExperimentConfig;
use fedsim::runner::run_experiment;
use fedsim::seeds;
use fedsim::sharing::{CommLedger, ShareMask, ShareSchedule};

fn verdict(number: usize, name: &str, ok: bool, detail: &str, started: Instant, budget_s: u64) {
    let elapsed = started.elapsed().as_secs_f64();
    let within = elapsed < budget_s as f64;
    let tag = if ok && within { "PASS" } else { "FAIL" };
    println!("[acceptance {number:02}] {tag} {name}: {detail} ({elapsed:.1}s, budget {budget_s}s)");
    assert!(ok, "acceptance {number:02} {name}: {detail}");
    assert!(within, "acceptance {number:02} {name} took {elapsed:.1}s, budget {budget_s}s");
}

fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}

// ---------------------------------------------------------------- check 01

/// Composite-loss value of a dual-head model rebuilt from a flat parameter
/// block with one entry nudged — the probe the finite-difference loop uses.
fn loss_at(
    arch: &Arc<Architecture>,
    layout: &PartitionLayout,
    flat: &ParameterBlock,
    x: &Tensor,
    y: &[usize],
) -> f64 {
    let model = PartitionedModel::from_flat(Arc::clone(arch), layout.clone(), flat).unwrap();
    model.loss_and_grads(x, y).unwrap().0
}

#[test]
fn c01_composite_loss_gradients_match_central_differences() {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    for net in 0..20 {
        let mut rng = seeds::stream_rng(1234, seeds::stream::MODEL_INIT, net);
        let d = rng.random_range(2..=4);
        let h = rng.random_range(2..=3);
        let classes = rng.random_range(2..=3);
        let arch = Arc::new(
            Architecture::new(
                vec![d],
                vec![
                    NamedLayer::new("fc1", LayerSpec::Dense { inputs: d, outputs: h }),
                    NamedLayer::new("relu1", LayerSpec::Relu),
                    NamedLayer::new("fc_out", LayerSpec::Dense { inputs: h, outputs: classes }),
                    NamedLayer::new("probs", LayerSpec::Softmax),
                ],
            )
            .unwrap(),
        );
        let layout =
            PartitionLayout::new(vec!["fc1".into()], vec!["fc_out".into()], classes).unwrap();
        let server = server_init(&arch, &layout, 1000 + net).unwrap();
        let model = PartitionedModel::client_init(
            Arc::clone(&arch),
            layout.clone(),
            HeadMode::Dual,
            &server,
            1000 + net,
            0,
        )
        .unwrap();
        assert!(model.flatten().param_count() <= 60);

        let batch = 3;
        let x = Tensor::new(
            vec![batch, d],
            (0..batch * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

        let (_, grads) = model.loss_and_grads(&x, &y).unwrap();
        let flat = model.flatten();
        let step = 1e-5;
        for (j, entry) in flat.entries().iter().enumerate() {
            let grad_entry = [&grads.base, &grads.global_head, &grads.local_head]
                .iter()
                .find_map(|b| b.get(&entry.name))
                .unwrap_or_else(|| panic!("no gradient for layer `{}`", entry.name));
            for (field, analytic) in [
                (0, grad_entry.weights.data()),
                (1, grad_entry.bias.data()),
            ] {
                for i in 0..analytic.len() {
                    let probe = |delta: f64| {
                        let mut nudged = flat.clone();
                        let p = &mut nudged.entries_mut()[j].params;
                        let data = if field == 0 {
                            p.weights.data_mut()
                        } else {
                            p.bias.data_mut()
                        };
                        data[i] += delta;
                        loss_at(&arch, &layout, &nudged, &x, &y)
                    };
                    let fd = (probe(step) - probe(-step)) / (2.0 * step);
                    let a = analytic[i];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                    worst = worst.max(rel);
                }
            }
        }
    }
    verdict(
        1,
        "dual-head gradients vs central differences",
        worst < 1e-4,
        &format!("max relative error {worst:.2e} over 20 nets (need < 1e-4)"),
        started,
        10,
    );
}

// ---------------------------------------------------------------- check 02

/// Plain-vector mirror of one client's upload: (client, samples, layers),
/// each layer (name, weights, bias).
type RawContribution = (usize, usize, Vec<(String, Vec<f64>, Vec<f64>)>);

/// Weighted mean, canonical form, coded from scratch on plain vectors:
/// ascending client order, baseline plus weighted deltas, zero deltas
/// skipped. Shares no code with the implementation under test.
fn weighted_mean_oracle(contribs: &[RawContribution]) -> Vec<(String, Vec<f64>, Vec<f64>)> {
    let mut order: Vec<usize> = (0..contribs.len()).collect();
    order.sort_by_key(|&i| contribs[i].0);
    let total: f64 = order.iter().map(|&i| contribs[i].1 as f64).sum();
    let baseline = contribs[order[0]].2.clone();
    let mut result = baseline.clone();
    for &i in &order[1..] {
        let w = contribs[i].1 as f64 / total;
        for (layer, (incoming, base)) in
            result.iter_mut().zip(contribs[i].2.iter().zip(baseline.iter()))
        {
            for (part, (inc, bas)) in [
                (&mut layer.1, (&incoming.1, &base.1)),
                (&mut layer.2, (&incoming.2, &base.2)),
            ] {
                for (r, (&xv, &x0)) in part.iter_mut().zip(inc.iter().zip(bas.iter())) {
                    let delta = xv - x0;
                    if delta != 0.0 {
                        *r += w * delta;
                    }
                }
            }
        }
    }
    result
}

fn to_contribution(raw: &RawContribution) -> Contribution {
    let entries = raw
        .2
        .iter()
        .enumerate()
        .map(|(position, (name, w, b))| BlockEntry {
            name: name.clone(),
            position,
            params: LayerParams {
                weights: Tensor::from_vec(w.clone()),
                bias: Tensor::from_vec(b.clone()),
            },
        })
        .collect();
    Contribution {
        client: raw.0,
        num_samples: raw.1,
        block: ParameterBlock::from_entries(entries).unwrap(),
    }
}

#[test]
fn c02_aggregation_matches_an_independent_weighted_mean_oracle() {
    let started = Instant::now();
    let mut rng = seeds::stream_rng(777, seeds::stream::SAMPLING, 2);
    let mut worst_naive_gap = 0.0_f64;
    for _ in 0..100 {
        let num_layers = rng.random_range(1..=3);
        let sizes: Vec<(usize, usize)> = (0..num_layers)
            .map(|_| (rng.random_range(1..=5), rng.random_range(1..=2)))
            .collect();
        let mut ids: Vec<usize> = (0..10).collect();
        ids.shuffle(&mut rng);
        let num_clients = rng.random_range(1..=5);
        let contribs: Vec<RawContribution> = ids[..num_clients]
            .iter()
            .map(|&client| {
                let layers = sizes
                    .iter()
                    .enumerate()
                    .map(|(l, &(nw, nb))| {
                        (
                            format!("l{l}"),
                            (0..nw).map(|_| rng.random_range(-3.0..3.0)).collect(),
                            (0..nb).map(|_| rng.random_range(-3.0..3.0)).collect(),
                        )
                    })
                    .collect();
                (client, rng.random_range(1..=9), layers)
            })
            .collect();

        // The implementation gets the contributions in shuffled order.
        let result =
            aggregate(&contribs.iter().map(to_contribution).collect::<Vec<_>>()).unwrap();
        let expected = weighted_mean_oracle(&contribs);

        let total: f64 = contribs.iter().map(|c| c.1 as f64).sum();
        for (name, want_w, want_b) in &expected {
            let got = result.get(name).unwrap();
            for (got_part, want_part, part_idx) in
                [(got.weights.data(), want_w, 1), (got.bias.data(), want_b, 2)]
            {
                assert_eq!(got_part.len(), want_part.len());
                for (i, (g, w)) in got_part.iter().zip(want_part).enumerate() {
                    assert_eq!(
                        g.to_bits(),
                        w.to_bits(),
                        "layer {name} entry {i} differs from the oracle"
                    );
                    // Sanity anchor: the canonical form is still a weighted
                    // mean — compare loosely against naive Σ w_k x_k.
                    let naive: f64 = contribs
                        .iter()
                        .map(|c| {
                            let layer = c.2.iter().find(|(n, _, _)| n == name).unwrap();
                            let v = if part_idx == 1 { &layer.1 } else { &layer.2 };
                            (c.1 as f64 / total) * v[i]
                        })
                        .sum();
                    worst_naive_gap = worst_naive_gap.max((g - naive).abs());
                }
            }
        }
    }
    verdict(
        2,
        "aggregation vs independent oracle",
        worst_naive_gap < 1e-9,
        &format!(
            "100 random sets bit-identical to the oracle; worst gap to naive mean {worst_naive_gap:.1e}"
        ),
        started,
        5,
    );
}

// ---------------------------------------------------------------- check 03

#[test]
fn c03_single_client_federation_degenerates_to_centralized_sgd() {
    let started = Instant::now();
    let arch = Arc::new(
        Architecture::new(
            vec![6],
            vec![
                NamedLayer::new("fc1", LayerSpec::Dense { inputs: 6, outputs: 8 }),
                NamedLayer::new("relu1", LayerSpec::Relu),
                NamedLayer::new("fc_out", LayerSpec::Dense { inputs: 8, outputs: 3 }),
                NamedLayer::new("probs", LayerSpec::Softmax),
            ],
        )
        .unwrap(),
    );
    let layout = PartitionLayout::new(vec!["fc1".into()], vec!["fc_out".into()], 3).unwrap();
    let data = synthetic_blobs(90, 6, 3, 1.0, 5).unwrap();
    let seed = 77;
    let sgd = SgdConfig::new(0.1, 16).unwrap();

    let mut fed = Federation::new(
        Arc::clone(&arch),
        layout.clone(),
        Method::Fedavg,
        None,
        RoundConfig { local_epochs: 2, sampled_per_round: 1, sgd },
        &[(0..90).collect()],
        4,
        seed,
    )
    .unwrap();
    for _ in 0..20 {
        fed.run_round(&data).unwrap();
    }

    // Centralized twin: same initial weights, same batch-order stream, and
    // 20 rounds x 2 epochs = 40 straight epochs.
    let server = server_init(&arch, &layout, seed).unwrap();
    let mut central =
        PartitionedModel::client_init(arch, layout, HeadMode::Single, &server, seed, 0).unwrap();
    let mut batch_rng = seeds::stream_rng(seed, seeds::stream::BATCH, 0);
    let all: Vec<usize> = (0..90).collect();
    central.train_epochs(&data, &all, 40, &sgd, &mut batch_rng).unwrap();

    let identical = fed.server().weights().bit_eq(&central.flatten());
    verdict(
        3,
        "single-client run equals centralized training",
        identical,
        "20 rounds x 2 epochs vs 40 epochs: weights bit-identical",
        started,
        30,
    );
}

// ---------------------------------------------------------------- check 04

#[derive(Default)]
struct IsolationTap {
    downloads: usize,
    uploads: usize,
    aggregates: usize,
    private_sightings: Vec<String>,
}

impl IsolationTap {
    fn scan(&mut self, what: &str, block: &ParameterBlock) {
        for name in block.names() {
            if name.contains("#local") {
                self.private_sightings.push(format!("{what}: {name}"));
            }
        }
    }
}

impl ProtocolObserver for IsolationTap {
    fn on_download(&mut self, _round: usize, _client: usize, payload: &ParameterBlock) {
        self.downloads += 1;
        self.scan("download", payload);
    }
    fn on_upload(&mut self, _round: usize, _client: usize, contribution: &Contribution) {
        self.uploads += 1;
        self.scan("upload", &contribution.block);
    }
    fn on_aggregate(&mut self, _round: usize, result: &ParameterBlock) {
        self.aggregates += 1;
        self.scan("aggregate", result);
    }
}

#[test]
fn c04_no_private_head_tensor_ever_crosses_the_wire() {
    let started = Instant::now();
    let data = synthetic_blobs(500, 5, 4, 1.0, 31).unwrap();
    let plan = partition(Setting::Iid, &data, 5, 31, 0.5).unwrap();
    let arch = Arc::new(
        Architecture::new(
            vec![5],
            vec![
                NamedLayer::new("fc1", LayerSpec::Dense { inputs: 5, outputs: 10 }),
                NamedLayer::new("relu1", LayerSpec::Relu),
                NamedLayer::new("fc_out", LayerSpec::Dense { inputs: 10, outputs: 4 }),
                NamedLayer::new("probs", LayerSpec::Softmax),
            ],
        )
        .unwrap(),
    );
    let layout = PartitionLayout::new(vec!["fc1".into()], vec!["fc_out".into()], 4).unwrap();
    let mut fed = Federation::new(
        arch,
        layout,
        Method::DoubleHead,
        None,
        RoundConfig {
            local_epochs: 1,
            sampled_per_round: 3,
            sgd: SgdConfig::new(0.05, 32).unwrap(),
        },
        &plan.shards,
        4,
        31,
    )
    .unwrap();
    let mut tap = IsolationTap::default();
    for _ in 0..50 {
        fed.run_round_observed(&data, &mut tap).unwrap();
    }
    let saw_everything = tap.downloads == 150 && tap.uploads == 150 && tap.aggregates == 50;
    verdict(
        4,
        "private head isolation over 50 instrumented rounds",
        saw_everything && tap.private_sightings.is_empty(),
        &format!(
            "{} downloads, {} uploads, {} aggregates inspected; private sightings: {:?}",
            tap.downloads, tap.uploads, tap.aggregates, tap.private_sightings
        ),
        started,
        120,
    );
}

// ---------------------------------------------------------------- check 05

#[test]
fn c05_ledger_matches_closed_form_and_halves_traffic_when_scheduled() {
    let started = Instant::now();

    // (a) A real scheduled run against an independently coded closed form.
    let rounds = 60;
    let frequency = rounds / 5;
    let sampled = 3;
    let bytes_per_param = 4u64;
    let arch = Arc::new(
        Architecture::new(
            vec![7],
            vec![
                NamedLayer::new("fc1", LayerSpec::Dense { inputs: 7, outputs: 16 }),
                NamedLayer::new("relu1", LayerSpec::Relu),
                NamedLayer::new("fc2", LayerSpec::Dense { inputs: 16, outputs: 8 }),
                NamedLayer::new("relu2", LayerSpec::Relu),
                NamedLayer::new("fc_out", LayerSpec::Dense { inputs: 8, outputs: 3 }),
                NamedLayer::new("probs", LayerSpec::Softmax),
            ],
        )
        .unwrap(),
    );
    let layout =
        PartitionLayout::new(vec!["fc1".into(), "fc2".into()], vec!["fc_out".into()], 3).unwrap();
    let domain = layout.share_domain();
    let counts: BTreeMap<String, u64> = arch.param_counts().into_iter().collect();
    let data = synthetic_blobs(240, 7, 3, 1.0, 13).unwrap();
    let plan = partition(Setting::Iid, &data, 4, 13, 0.5).unwrap();
    let schedule = ShareSchedule::new(frequency, domain.len(), true).unwrap();
    let mut fed = Federation::new(
        Arc::clone(&arch),
        layout,
        Method::DoubleHeadGs,
        Some(schedule),
        RoundConfig {
            local_epochs: 1,
            sampled_per_round: sampled,
            sgd: SgdConfig::new(0.05, 32).unwrap(),
        },
        &plan.shards,
        bytes_per_param,
        13,
    )
    .unwrap();
    for _ in 0..rounds {
        fed.run_round(&data).unwrap();
    }
    // Closed form, recomputed from scratch: phase(t) = min(L, (t-1)/f) with
    // the frozen first window, bytes per direction = released params x
    // bytes_per_param x sampled clients.
    let mut expect_one_way = 0u64;
    let mut per_round_ok = true;
    for (t, record) in (1..=rounds).zip(fed.ledger().records()) {
        let phase = ((t - 1) / frequency).min(domain.len());
        let released: u64 = domain[..phase].iter().map(|n| counts[n]).sum();
        let one_way = released * bytes_per_param * sampled as u64;
        expect_one_way += one_way;
        per_round_ok &= record.bytes_up == one_way && record.bytes_down == one_way;
    }
    let closed_form_ok = per_round_ok
        && fed.ledger().cumulative_up() == expect_one_way
        && fed.ledger().cumulative_down() == expect_one_way
        && fed.ledger().cumulative_bytes() == 2 * expect_one_way;

    // (b) Equal layer sizes, T=400, f=80, five layers: the schedule must
    // save exactly 60% against always-full sharing.
    let wide: Vec<String> = (0..5).map(|l| format!("l{l}")).collect();
    let wide_counts: Vec<(String, u64)> = wide.iter().map(|n| (n.clone(), 100)).collect();
    let mut scheduled = CommLedger::new(4).unwrap();
    let mut full = CommLedger::new(4).unwrap();
    for t in 1..=400u64 {
        let phase = (((t - 1) / 80) as usize).min(5);
        scheduled
            .record_exchange(t as usize, phase, &ShareMask::prefix(&wide, phase), &wide_counts, 10)
            .unwrap();
        full.record_exchange(t as usize, 5, &ShareMask::full(&wide), &wide_counts, 10)
            .unwrap();
    }
    let saving_ok = scheduled.cumulative_bytes() * 2 <= full.cumulative_bytes()
        && scheduled.cumulative_bytes() * 5 == full.cumulative_bytes() * 2;

    verdict(
        5,
        "communication ledger closed form and scheduled saving",
        closed_form_ok && saving_ok,
        &format!(
            "60-round ledger equals closed form ({} bytes/direction); 400-round equal-size case saves {:.0}% (need >= 50%)",
            expect_one_way,
            100.0 * (1.0 - scheduled.cumulative_bytes() as f64 / full.cumulative_bytes() as f64)
        ),
        started,
        60,
    );
}

// ------------------------------------------------------- checks 06 to 09

const BENCH_SEEDS: [u64; 3] = [1, 2, 3];

/// `(final accuracy under the shared test shard, final accuracy under the
/// per-client matched shards)` per (method, seed).
type BenchResults = BTreeMap<(&'static str, u64), (f64, f64)>;

fn bench_config(method: &str, setting: &str, seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.set_key("method", method).unwrap();
    config.set_key("setting", setting).unwrap();
    config.set_key("rounds", "200").unwrap();
    config.set_key("eval-every", "200").unwrap();
    config.set_key("seed", &seed.to_string()).unwrap();
    if method == "double_head_gs" {
        // One fifth of the horizon per released layer.
        config.set_key("frequency", "40").unwrap();
    }
    config
}

fn run_bench(methods: &[&'static str], setting: &str) -> BenchResults {
    let mut out = BTreeMap::new();
    for &method in methods {
        for seed in BENCH_SEEDS {
            let artifacts = run_experiment(&bench_config(method, setting, seed), None).unwrap();
            out.insert(
                (method, seed),
                (
                    artifacts.summary.final_accuracy_global,
                    artifacts.summary.final_accuracy_local,
                ),
            );
        }
    }
    out
}

fn dispatch_bench() -> &'static BenchResults {
    static BENCH: OnceLock<BenchResults> = OnceLock::new();
    BENCH.get_or_init(|| run_bench(&["fedavg", "double_head", "head_freeze"], "dispatch"))
}

fn iid_bench() -> &'static BenchResults {
    static BENCH: OnceLock<BenchResults> = OnceLock::new();
    BENCH.get_or_init(|| run_bench(&["fedavg", "double_head", "double_head_gs"], "iid"))
}

fn paired_median(
    bench: &BenchResults,
    a: &'static str,
    b: &'static str,
    pick: fn(&(f64, f64)) -> f64,
) -> f64 {
    median(
        BENCH_SEEDS
            .iter()
            .map(|&s| pick(&bench[&(a, s)]) - pick(&bench[&(b, s)]))
            .collect(),
    )
}

#[test]
fn c06_dispatch_dual_head_beats_fedavg_locally_by_five_points() {
    let started = Instant::now();
    let gain = paired_median(dispatch_bench(), "double_head", "fedavg", |r| r.1);
    verdict(
        6,
        "dispatch personalization",
        gain >= 0.05,
        &format!("median per-client accuracy gain over fedavg {gain:+.3} (need >= +0.050)"),
        started,
        900,
    );
}

#[test]
fn c07_dispatch_global_ordering_fedavg_over_withheld_head() {
    let started = Instant::now();
    let lead = paired_median(dispatch_bench(), "fedavg", "head_freeze", |r| r.0);
    verdict(
        7,
        "dispatch pooled-test ordering",
        lead >= 0.0,
        &format!("median fedavg lead over head_freeze {lead:+.3} (need >= 0)"),
        started,
        900,
    );
}

#[test]
fn c08_iid_dual_head_tracks_fedavg_globally() {
    let started = Instant::now();
    let gap = paired_median(iid_bench(), "double_head", "fedavg", |r| r.0);
    verdict(
        8,
        "balanced-data parity with fedavg",
        gap.abs() <= 0.03,
        &format!("median pooled-test gap {gap:+.3} (need within ±0.030)"),
        started,
        900,
    );
}

#[test]
fn c09_scheduled_sharing_recovers_dual_head_accuracy() {
    let started = Instant::now();
    let gap = paired_median(iid_bench(), "double_head_gs", "double_head", |r| r.1);
    verdict(
        9,
        "layer-release schedule recovery",
        gap.abs() <= 0.03,
        &format!("median per-client accuracy gap to always-sharing {gap:+.3} (need within ±0.030)"),
        started,
        1200,
    );
}

// ---------------------------------------------------------------- check 10

#[test]
fn c10_partition_invariants_hold_over_random_draws() {
    let started = Instant::now();
    let classes = 6;
    let data = synthetic_blobs(600, 5, classes, 1.0, 99).unwrap();
    let mut rng = seeds::stream_rng(4242, seeds::stream::PARTITION, 1);
    let mut checked = 0;
    for _ in 0..500 {
        let setting = [Setting::Iid, Setting::NonIid, Setting::Dispatch]
            [rng.random_range(0..3usize)];
        let clients = match setting {
            Setting::Dispatch => rng.random_range(1..=classes),
            _ => rng.random_range(1..=12),
        };
        let seed: u64 = rng.random();
        let alpha = rng.random_range(0.05..8.0);
        let plan = partition(setting, &data, clients, seed, alpha).unwrap();
        assert_eq!(plan.shards.len(), clients);

        // Disjoint and complete: the shards are a permutation of 0..N.
        let mut all: Vec<usize> = plan.shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..data.len()).collect::<Vec<_>>(), "{setting:?} K={clients}");

        match setting {
            Setting::Dispatch => {
                let label_sets: Vec<BTreeSet<usize>> = plan
                    .shards
                    .iter()
                    .map(|shard| shard.iter().map(|&i| data.label(i)).collect())
                    .collect();
                for (a, sa) in label_sets.iter().enumerate() {
                    for sb in label_sets.iter().skip(a + 1) {
                        assert!(sa.is_disjoint(sb), "dispatch classes overlap");
                    }
                }
            }
            Setting::NonIid => {
                for shard in &plan.shards {
                    let present: BTreeSet<usize> = shard.iter().map(|&i| data.label(i)).collect();
                    assert_eq!(present.len(), classes, "a label-skew cell is empty");
                }
            }
            Setting::Iid => {}
        }

        let replay = partition(setting, &data, clients, seed, alpha).unwrap();
        assert_eq!(plan, replay, "partition is not deterministic");
        checked += 1;
    }
    verdict(
        10,
        "partition invariants",
        checked == 500,
        &format!("{checked} random draws: disjoint, complete, class-exclusive, no empty cell, replayable"),
        started,
        60,
    );
}

// ---------------------------------------------------------------- check 11

#[test]
fn c11_identical_runs_emit_byte_identical_metrics() {
    let started = Instant::now();
    let mut config = ExperimentConfig::default();
    config.set_key("rounds", "20").unwrap();
    config.set_key("eval-every", "5").unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_experiment(&config, Some(&a)).unwrap();
    run_experiment(&config, Some(&b)).unwrap();
    let left = std::fs::read(a.join("metrics.csv")).unwrap();
    let right = std::fs::read(b.join("metrics.csv")).unwrap();
    let ledger_left = std::fs::read(a.join("ledger.csv")).unwrap();
    let ledger_right = std::fs::read(b.join("ledger.csv")).unwrap();
    verdict(
        11,
        "end-to-end determinism",
        left == right && ledger_left == ledger_right,
        &format!("two identical runs: metrics.csv ({} bytes) byte-identical, ledger.csv too", left.len()),
        started,
        300,
    );
}
