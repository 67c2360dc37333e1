//! Gradual layer release: the phase schedule, mask algebra for partial
//! payloads, and byte-exact communication accounting.
//!
//! Sharing starts fully frozen and releases one layer every `frequency`
//! rounds, shallowest first, until the whole shareable stack synchronizes.
//! Masked-out layers are omitted from payloads entirely — the byte savings
//! come from truncation, not from shipping zeros — and the ledger charges
//! exactly the parameters that travel, in both directions, per sampled
//! client.

use std::io;

use crate::error::{Error, Result};
use crate::model::{ParameterBlock, PartitionLayout};

/// Which shareable layers travel this round. Covers the shareable domain in
/// shallow-to-deep order; flags always form a prefix (a released layer is
/// never re-frozen while deeper layers stay out).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareMask {
    included: Vec<(String, bool)>,
}

impl ShareMask {
    pub fn new(included: Vec<(String, bool)>) -> Result<Self> {
        for (i, (name, _)) in included.iter().enumerate() {
            if included[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Structure(format!("duplicate layer `{name}` in mask")));
            }
        }
        let mut seen_off = false;
        for (name, flag) in &included {
            if *flag && seen_off {
                return Err(Error::Structure(format!(
                    "mask flags `{name}` while a shallower layer is still frozen"
                )));
            }
            if !*flag {
                seen_off = true;
            }
        }
        Ok(ShareMask { included })
    }

    /// Mask with the `released` shallowest layers flagged (clamped to the
    /// domain size).
    pub fn prefix(domain: &[String], released: usize) -> ShareMask {
        ShareMask {
            included: domain
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i < released))
                .collect(),
        }
    }

    pub fn full(domain: &[String]) -> ShareMask {
        ShareMask::prefix(domain, domain.len())
    }

    pub fn frozen(domain: &[String]) -> ShareMask {
        ShareMask::prefix(domain, 0)
    }

    pub fn entries(&self) -> &[(String, bool)] {
        &self.included
    }

    pub fn flagged(&self) -> impl Iterator<Item = &str> {
        self.included
            .iter()
            .filter(|(_, f)| *f)
            .map(|(n, _)| n.as_str())
    }

    pub fn flagged_count(&self) -> usize {
        self.included.iter().filter(|(_, f)| *f).count()
    }

    pub fn is_flagged(&self, name: &str) -> bool {
        self.included
            .iter()
            .any(|(n, f)| n == name && *f)
    }

    pub fn in_domain(&self, name: &str) -> bool {
        self.included.iter().any(|(n, _)| n == name)
    }
}

/// The release schedule: one more layer every `frequency` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShareSchedule {
    /// Rounds per released layer.
    pub frequency: usize,
    /// Size of the shareable stack (saturation point of the phase).
    pub num_shareable_layers: usize,
    /// Whether the run starts with a fully frozen phase 0 of `frequency`
    /// rounds. Disabling it starts at phase 1 (one layer shared immediately).
    pub include_frozen_phase: bool,
}

impl ShareSchedule {
    pub fn new(
        frequency: usize,
        num_shareable_layers: usize,
        include_frozen_phase: bool,
    ) -> Result<Self> {
        if frequency == 0 {
            return Err(Error::Config("share frequency must be at least 1 round".into()));
        }
        if num_shareable_layers == 0 {
            return Err(Error::Config("schedule needs at least one shareable layer".into()));
        }
        Ok(ShareSchedule { frequency, num_shareable_layers, include_frozen_phase })
    }
}

/// Phase of round `t` (1-based): the number of layers currently released,
/// saturating at the stack size. With the frozen phase enabled,
/// `p = min(L, (t-1)/f)`; without it, `p = min(L, 1 + (t-1)/f)`.
pub fn phase_of_round(t: usize, schedule: &ShareSchedule) -> usize {
    assert!(t >= 1, "round indices are 1-based");
    let step = (t - 1) / schedule.frequency;
    let p = if schedule.include_frozen_phase { step } else { 1 + step };
    p.min(schedule.num_shareable_layers)
}

/// Mask for phase `p` over the layout's shareable domain (base then global
/// head, shallow to deep). Private head layers are never in the domain.
pub fn get_mask(p: usize, layout: &PartitionLayout) -> ShareMask {
    ShareMask::prefix(&layout.share_domain(), p)
}

/// Returns only the flagged layers of `w` — no zero-filled placeholders; the
/// payload simply omits everything else. Every flagged mask layer must exist
/// in `w`.
pub fn masked_extract(w: &ParameterBlock, mask: &ShareMask) -> Result<ParameterBlock> {
    for name in mask.flagged() {
        if !w.contains(name) {
            return Err(Error::Structure(format!(
                "mask flags `{name}`, which the block does not contain"
            )));
        }
    }
    let entries = w
        .entries()
        .iter()
        .filter(|e| mask.is_flagged(&e.name))
        .cloned()
        .collect();
    ParameterBlock::from_entries(entries)
}

/// Replaces the flagged layers of `current` with `incoming`'s values and
/// keeps everything else. `incoming` must contain exactly the flagged
/// layers: an unflagged layer in the payload is a protocol violation, a
/// missing flagged layer a structural error.
pub fn masked_merge(
    current: &ParameterBlock,
    incoming: &ParameterBlock,
    mask: &ShareMask,
) -> Result<ParameterBlock> {
    for e in incoming.entries() {
        if !mask.is_flagged(&e.name) {
            return Err(Error::Protocol(format!(
                "payload carries `{}`, which the mask does not release",
                e.name
            )));
        }
    }
    for name in mask.flagged() {
        if !incoming.contains(name) {
            return Err(Error::Structure(format!(
                "payload is missing flagged layer `{name}`"
            )));
        }
    }
    let mut entries = Vec::with_capacity(current.len());
    for e in current.entries() {
        if let Some(new_params) = incoming.get(&e.name) {
            if new_params.weights.shape() != e.params.weights.shape()
                || new_params.bias.shape() != e.params.bias.shape()
            {
                return Err(Error::Structure(format!(
                    "incoming layer `{}` has mismatched shapes",
                    e.name
                )));
            }
            entries.push(crate::model::BlockEntry {
                name: e.name.clone(),
                position: e.position,
                params: new_params.clone(),
            });
        } else {
            entries.push(e.clone());
        }
    }
    ParameterBlock::from_entries(entries)
}

/// One round's communication record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerRecord {
    pub round: usize,
    pub phase: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Byte-exact communication accounting, one record per round.
#[derive(Debug, Clone)]
pub struct CommLedger {
    bytes_per_param: u64,
    records: Vec<LedgerRecord>,
}

impl CommLedger {
    pub fn new(bytes_per_param: u64) -> Result<Self> {
        if bytes_per_param == 0 {
            return Err(Error::Config("bytes per parameter must be positive".into()));
        }
        Ok(CommLedger { bytes_per_param, records: Vec::new() })
    }

    pub fn bytes_per_param(&self) -> u64 {
        self.bytes_per_param
    }

    /// Appends one round: each direction costs
    /// `(sum of flagged layers' parameter counts) x bytes_per_param x sampled_clients`.
    /// `param_counts` maps layer name to scalar parameter count.
    pub fn record_exchange(
        &mut self,
        round: usize,
        phase: usize,
        mask: &ShareMask,
        param_counts: &[(String, u64)],
        sampled_clients: usize,
    ) -> Result<()> {
        let mut params = 0u64;
        for name in mask.flagged() {
            let count = param_counts
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, c)| *c)
                .ok_or_else(|| {
                    Error::Structure(format!("no parameter count known for layer `{name}`"))
                })?;
            params += count;
        }
        let per_direction = params * self.bytes_per_param * sampled_clients as u64;
        self.records.push(LedgerRecord {
            round,
            phase,
            bytes_up: per_direction,
            bytes_down: per_direction,
        });
        Ok(())
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn cumulative_up(&self) -> u64 {
        self.records.iter().map(|r| r.bytes_up).sum()
    }

    pub fn cumulative_down(&self) -> u64 {
        self.records.iter().map(|r| r.bytes_down).sum()
    }

    /// Total bytes in both directions.
    pub fn cumulative_bytes(&self) -> u64 {
        self.cumulative_up() + self.cumulative_down()
    }

    /// CSV export: `round,phase,bytes_up,bytes_down,cum_bytes`, where
    /// `cum_bytes` is the running both-direction total.
    pub fn write_csv<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "round,phase,bytes_up,bytes_down,cum_bytes")?;
        let mut cum = 0u64;
        for r in &self.records {
            cum += r.bytes_up + r.bytes_down;
            writeln!(w, "{},{},{},{},{}", r.round, r.phase, r.bytes_up, r.bytes_down, cum)?;
        }
        Ok(())
    }
}
