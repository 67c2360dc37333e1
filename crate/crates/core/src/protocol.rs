//! The federated round loop: client sampling, local training on shared
//! weights, and sample-count-weighted aggregation.
//!
//! Aggregation is written as a baseline-plus-weighted-deltas sum in a
//! canonical (ascending client index) order, which makes three things exact
//! rather than approximate: a single contribution is returned bit-identical,
//! identical contributions aggregate to themselves bit-identically, and
//! shuffling the contribution list cannot change the result by even one ulp.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{
    server_init, HeadMode, ParameterBlock, PartitionLayout, PartitionedModel,
};
use crate::nn::{Architecture, SgdConfig};
use crate::seeds;
use crate::sharing::{
    masked_extract, masked_merge, phase_of_round, CommLedger, ShareMask, ShareSchedule,
};

/// Training methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Single-head baseline; every layer is shared every round.
    Fedavg,
    /// Dual heads (shared + private); full sharing of the shared stack.
    DoubleHead,
    /// Dual heads with the layer-release schedule gating what is shared.
    DoubleHeadGs,
    /// Single-head baseline that never shares its final classifier layer.
    HeadFreeze,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Method::Fedavg),
            "double_head" => Ok(Method::DoubleHead),
            "double_head_gs" => Ok(Method::DoubleHeadGs),
            "head_freeze" => Ok(Method::HeadFreeze),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected fedavg, double_head, double_head_gs, \
                 or head_freeze)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Fedavg => "fedavg",
            Method::DoubleHead => "double_head",
            Method::DoubleHeadGs => "double_head_gs",
            Method::HeadFreeze => "head_freeze",
        }
    }

    pub fn head_mode(&self) -> HeadMode {
        match self {
            Method::Fedavg | Method::HeadFreeze => HeadMode::Single,
            Method::DoubleHead | Method::DoubleHeadGs => HeadMode::Dual,
        }
    }

    pub fn uses_schedule(&self) -> bool {
        matches!(self, Method::DoubleHeadGs)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Layer names a method is allowed to share, shallow to deep. The private
/// head never appears; `head_freeze` additionally keeps its deepest head
/// layer out of circulation.
pub fn method_share_domain(method: Method, layout: &PartitionLayout) -> Vec<String> {
    let mut domain = layout.share_domain();
    if method == Method::HeadFreeze {
        domain.pop();
    }
    domain
}

/// Server side of the loop: the shared weights and the sampling stream.
#[derive(Debug, Clone)]
pub struct ServerState {
    round: usize,
    weights: ParameterBlock,
    rng: ChaCha8Rng,
}

impl ServerState {
    /// Rounds completed so far (0 before the first round).
    pub fn round(&self) -> usize {
        self.round
    }

    /// Current shared weights (base + shared head; never a private head).
    pub fn weights(&self) -> &ParameterBlock {
        &self.weights
    }
}

/// One client's model, data shard, and batch-order stream.
#[derive(Debug, Clone)]
pub struct ClientState {
    index: usize,
    model: PartitionedModel,
    train_shard: Vec<usize>,
    batch_rng: ChaCha8Rng,
}

impl ClientState {
    /// `global_seed` is the experiment seed; the batch-order stream is
    /// derived from it per client, so shards and sampling draws elsewhere
    /// cannot disturb batch orders.
    pub fn new(
        index: usize,
        model: PartitionedModel,
        train_shard: Vec<usize>,
        global_seed: u64,
    ) -> ClientState {
        let batch_rng = seeds::stream_rng(global_seed, seeds::stream::BATCH, index as u64);
        ClientState { index, model, train_shard, batch_rng }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn model(&self) -> &PartitionedModel {
        &self.model
    }

    pub fn train_shard(&self) -> &[usize] {
        &self.train_shard
    }

    pub fn num_samples(&self) -> usize {
        self.train_shard.len()
    }
}

/// Per-round knobs. Construct freely; [`RoundConfig::validate`] is what the
/// round loop enforces.
#[derive(Debug, Clone, Copy)]
pub struct RoundConfig {
    /// Local epochs between synchronizations.
    pub local_epochs: usize,
    /// Clients sampled per round.
    pub sampled_per_round: usize,
    pub sgd: SgdConfig,
}

impl RoundConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::Config("local epochs must be at least 1".into()));
        }
        if self.sampled_per_round == 0 {
            return Err(Error::Config("must sample at least one client per round".into()));
        }
        if self.sampled_per_round > num_clients {
            return Err(Error::Config(format!(
                "cannot sample {} of {num_clients} clients",
                self.sampled_per_round
            )));
        }
        Ok(())
    }
}

/// Draws `m` distinct client indices uniformly without replacement,
/// returned sorted ascending (the canonical aggregation order).
pub fn sample_clients(rng: &mut ChaCha8Rng, total: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Config("must sample at least one client".into()));
    }
    if m > total {
        return Err(Error::Config(format!("cannot sample {m} of {total} clients")));
    }
    let mut picked = rand::seq::index::sample(rng, total, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// One client's upload: its shared-layer values after local training.
#[derive(Debug, Clone)]
pub struct Contribution {
    pub client: usize,
    pub num_samples: usize,
    pub block: ParameterBlock,
}

/// Sample-count-weighted mean of the contributions: weights `n_k / Σ n_k`
/// renormalized over the contributing clients, summed in ascending client
/// order regardless of input order.
pub fn aggregate(contributions: &[Contribution]) -> Result<ParameterBlock> {
    if contributions.is_empty() {
        return Err(Error::Protocol("no contributions to aggregate".into()));
    }
    let mut order: Vec<&Contribution> = contributions.iter().collect();
    order.sort_by_key(|c| c.client);
    for pair in order.windows(2) {
        if pair[0].client == pair[1].client {
            return Err(Error::Protocol(format!(
                "client {} contributed twice in one round",
                pair[0].client
            )));
        }
    }
    let mut total = 0u64;
    for c in &order {
        if c.num_samples == 0 {
            return Err(Error::Protocol(format!(
                "client {} contributed with zero samples",
                c.client
            )));
        }
        total += c.num_samples as u64;
    }
    let baseline = &order[0].block;
    for c in &order[1..] {
        if !c.block.same_structure(baseline) {
            return Err(Error::Structure(format!(
                "client {}'s contribution does not match the structure of client {}'s",
                c.client, order[0].client
            )));
        }
    }
    // result = x_0 + Σ_k w_k (x_k - x_0). Mathematically the weighted mean
    // (the k=0 delta is zero); numerically it returns x_0 untouched when all
    // contributions agree, because every delta is then exactly zero and
    // skipped.
    let baseline = baseline.clone();
    let mut result = baseline.clone();
    for c in &order[1..] {
        let w = c.num_samples as f64 / total as f64;
        for ((acc, inc), base) in result
            .entries_mut()
            .iter_mut()
            .zip(c.block.entries())
            .zip(baseline.entries())
        {
            add_weighted_delta(
                acc.params.weights.data_mut(),
                inc.params.weights.data(),
                base.params.weights.data(),
                w,
            );
            add_weighted_delta(
                acc.params.bias.data_mut(),
                inc.params.bias.data(),
                base.params.bias.data(),
                w,
            );
        }
    }
    Ok(result)
}

fn add_weighted_delta(acc: &mut [f64], incoming: &[f64], baseline: &[f64], w: f64) {
    for ((a, &x), &x0) in acc.iter_mut().zip(incoming).zip(baseline) {
        let delta = x - x0;
        if delta != 0.0 {
            *a += w * delta;
        }
    }
}

/// Client-side round step: overwrite the local copies of the shared layers
/// with the server's payload, keep the private head untouched, run the
/// configured local epochs, and return only the shared-layer values.
///
/// With zero epochs the returned block equals the payload bit for bit.
pub fn client_update(
    state: &mut ClientState,
    payload: &ParameterBlock,
    shared_names: &[String],
    data: &LabeledDataset,
    config: &RoundConfig,
) -> Result<Contribution> {
    state.model.merge_shared(payload)?;
    if config.local_epochs > 0 {
        state.model.train_epochs(
            data,
            &state.train_shard,
            config.local_epochs,
            &config.sgd,
            &mut state.batch_rng,
        )?;
    }
    let block = state.model.extract_shared(shared_names)?;
    Ok(Contribution { client: state.index, num_samples: state.train_shard.len(), block })
}

/// Observation points on the wire: everything a real network would see.
/// Used by tests to prove private-head isolation; all hooks default to
/// no-ops.
pub trait ProtocolObserver {
    fn on_download(&mut self, _round: usize, _client: usize, _payload: &ParameterBlock) {}
    fn on_upload(&mut self, _round: usize, _client: usize, _contribution: &Contribution) {}
    fn on_aggregate(&mut self, _round: usize, _result: &ParameterBlock) {}
}

/// Observer that ignores everything.
pub struct NoopObserver;

impl ProtocolObserver for NoopObserver {}

/// What one round did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutcome {
    pub round: usize,
    pub phase: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub sampled: Vec<usize>,
}

/// A full federation: server, clients, method, schedule, and ledger.
#[derive(Debug)]
pub struct Federation {
    method: Method,
    schedule: Option<ShareSchedule>,
    domain: Vec<String>,
    param_counts: Vec<(String, u64)>,
    server: ServerState,
    clients: Vec<ClientState>,
    round_cfg: RoundConfig,
    ledger: CommLedger,
}

impl Federation {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arch: Arc<Architecture>,
        layout: PartitionLayout,
        method: Method,
        schedule: Option<ShareSchedule>,
        round_cfg: RoundConfig,
        shards: &[Vec<usize>],
        bytes_per_param: u64,
        seed: u64,
    ) -> Result<Federation> {
        if shards.is_empty() {
            return Err(Error::Config("a federation needs at least one client".into()));
        }
        round_cfg.validate(shards.len())?;
        let domain = method_share_domain(method, &layout);
        if method.uses_schedule() {
            match &schedule {
                None => {
                    return Err(Error::Config(
                        "the scheduled method needs a share schedule".into(),
                    ))
                }
                Some(s) if s.num_shareable_layers != domain.len() => {
                    return Err(Error::Config(format!(
                        "schedule covers {} layers but the model shares {}",
                        s.num_shareable_layers,
                        domain.len()
                    )))
                }
                Some(_) => {}
            }
        }
        let weights = server_init(&arch, &layout, seed)?;
        let mut clients = Vec::with_capacity(shards.len());
        for (k, shard) in shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Config(format!("client {k} has an empty shard")));
            }
            let model = PartitionedModel::client_init(
                Arc::clone(&arch),
                layout.clone(),
                method.head_mode(),
                &weights,
                seed,
                k,
            )?;
            clients.push(ClientState::new(k, model, shard.clone(), seed));
        }
        let param_counts = arch.param_counts();
        Ok(Federation {
            method,
            schedule,
            domain,
            param_counts,
            server: ServerState {
                round: 0,
                weights,
                rng: seeds::stream_rng(seed, seeds::stream::SAMPLING, 0),
            },
            clients,
            round_cfg,
            ledger: CommLedger::new(bytes_per_param)?,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn client(&self, k: usize) -> &ClientState {
        &self.clients[k]
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn share_domain(&self) -> &[String] {
        &self.domain
    }

    /// Phase and mask in effect for round `t` (1-based). Unscheduled methods
    /// always release the whole domain, and their phase reports its size.
    pub fn mask_for_round(&self, t: usize) -> (usize, ShareMask) {
        match (&self.schedule, self.method.uses_schedule()) {
            (Some(schedule), true) => {
                let p = phase_of_round(t, schedule);
                (p, ShareMask::prefix(&self.domain, p))
            }
            _ => (self.domain.len(), ShareMask::full(&self.domain)),
        }
    }

    /// The model a measurement sees for client `k`: its own parameters with
    /// every layer the just-finished round shared overwritten by the
    /// server's current values — what the client would hold after a fresh
    /// download. Under full sharing this makes single-head clients identical
    /// to the server; private and unreleased layers stay the client's own.
    /// The client's live state is untouched and nothing hits the ledger.
    pub fn measurement_model(&self, k: usize) -> Result<PartitionedModel> {
        let mut model = self.clients[k].model.clone();
        if self.server.round > 0 {
            let (_, mask) = self.mask_for_round(self.server.round);
            let payload = masked_extract(&self.server.weights, &mask)?;
            model.merge_shared(&payload)?;
        }
        Ok(model)
    }

    /// Runs round `t = completed + 1`.
    pub fn run_round(&mut self, data: &LabeledDataset) -> Result<RoundOutcome> {
        self.run_round_observed(data, &mut NoopObserver)
    }

    /// Runs one round, reporting every download payload, upload, and the
    /// aggregate result to `observer` (in ascending client order).
    pub fn run_round_observed(
        &mut self,
        data: &LabeledDataset,
        observer: &mut dyn ProtocolObserver,
    ) -> Result<RoundOutcome> {
        let t = self.server.round + 1;
        let (phase, mask) = self.mask_for_round(t);
        let sampled = sample_clients(
            &mut self.server.rng,
            self.clients.len(),
            self.round_cfg.sampled_per_round,
        )?;
        let payload = masked_extract(&self.server.weights, &mask)?;
        for &k in &sampled {
            observer.on_download(t, k, &payload);
        }
        let shared_names: Vec<String> = mask.flagged().map(str::to_string).collect();
        let round_cfg = self.round_cfg;
        let mut contributions: Vec<Contribution> = self
            .clients
            .par_iter_mut()
            .enumerate()
            .filter(|(k, _)| sampled.binary_search(k).is_ok())
            .map(|(_, client)| client_update(client, &payload, &shared_names, data, &round_cfg))
            .collect::<Result<Vec<_>>>()?;
        contributions.sort_by_key(|c| c.client);
        for c in &contributions {
            observer.on_upload(t, c.client, c);
        }
        let aggregated = aggregate(&contributions)?;
        observer.on_aggregate(t, &aggregated);
        self.server.weights = masked_merge(&self.server.weights, &aggregated, &mask)?;
        self.ledger
            .record_exchange(t, phase, &mask, &self.param_counts, sampled.len())?;
        let record = *self.ledger.records().last().expect("record just pushed");
        self.server.round = t;
        Ok(RoundOutcome {
            round: t,
            phase,
            bytes_up: record.bytes_up,
            bytes_down: record.bytes_down,
            sampled,
        })
    }
}
