//! The partitioned model: a shared trunk plus two duplicated classifier
//! heads.
//!
//! The network chain is split at the first head layer. Everything before the
//! split is the base (trunk); the layers after it exist twice — a global head
//! that participates in federated averaging and a local head that never
//! leaves the client. Prediction concatenates both heads' class scores and
//! maps the winning index back onto the class set; training charges each
//! head its own cross-entropy and lets the trunk accumulate both heads'
//! gradients.

pub mod block;
pub mod checkpoint;

pub use block::{
    as_local, concat, local_name, split, BlockEntry, ParameterBlock, PartitionLayout,
    LOCAL_MARKER,
};

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{
    backward_segment, cross_entropy_batch, forward_segment, init_all_params, sgd_step,
    Architecture, LayerParams, NamedLayer, SgdConfig, Tensor,
};
use crate::seeds;

/// Whether a model carries one classification track or the duplicated pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// One head (plain federated averaging baselines).
    Single,
    /// Global + local heads.
    Dual,
}

/// Gradients mirroring a model's three parameter blocks.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub base: ParameterBlock,
    pub global_head: ParameterBlock,
    pub local_head: ParameterBlock,
}

#[derive(Debug, Clone)]
pub struct PartitionedModel {
    arch: Arc<Architecture>,
    layout: PartitionLayout,
    heads: HeadMode,
    /// Chain index of the first head layer; layers `..branch` form the base
    /// segment, `branch..` the head segment (run once per head).
    branch: usize,
    base: ParameterBlock,
    global_head: ParameterBlock,
    local_head: ParameterBlock,
}

/// Checks that the layout names exactly the parameterized layers of `arch`,
/// with every base layer shallower than every head layer, and returns the
/// chain index where the head segment starts.
pub fn validate_layout(arch: &Architecture, layout: &PartitionLayout) -> Result<usize> {
    let mut covered = Vec::new();
    for name in layout.base_layers.iter().chain(&layout.head_layers) {
        let idx = arch
            .index_of(name)
            .ok_or_else(|| Error::Structure(format!("layout names unknown layer `{name}`")))?;
        if !arch.layers()[idx].spec.has_params() {
            return Err(Error::Structure(format!(
                "layout names `{name}`, which has no parameters to share"
            )));
        }
        covered.push(idx);
    }
    for (i, l) in arch.param_layers() {
        if !covered.contains(&i) {
            return Err(Error::Structure(format!(
                "parameterized layer `{}` is not covered by the layout",
                l.name
            )));
        }
    }
    let head_indices: Vec<usize> = layout
        .head_layers
        .iter()
        .map(|n| arch.index_of(n).unwrap())
        .collect();
    let first_head = *head_indices.iter().min().unwrap();
    if let Some(deepest_base) = layout
        .base_layers
        .iter()
        .map(|n| arch.index_of(n).unwrap())
        .max()
    {
        if deepest_base > first_head {
            return Err(Error::Structure(
                "base layers must all be shallower than head layers".into(),
            ));
        }
    }
    if *arch.output_shape() != [layout.num_classes] {
        return Err(Error::Structure(format!(
            "network outputs shape {:?} but the layout declares {} classes",
            arch.output_shape(),
            layout.num_classes
        )));
    }
    Ok(first_head)
}

/// Initializes base + global head weights for the server: every
/// parameterized layer drawn in chain order from the model-init stream.
pub fn server_init(
    arch: &Architecture,
    layout: &PartitionLayout,
    seed: u64,
) -> Result<ParameterBlock> {
    validate_layout(arch, layout)?;
    let mut rng = seeds::stream_rng(seed, seeds::stream::MODEL_INIT, 0);
    let mut blockb = ParameterBlock::empty();
    for (i, name, params) in init_all_params(arch, &mut rng) {
        blockb.push(BlockEntry { name, position: i, params })?;
    }
    Ok(blockb)
}

impl PartitionedModel {
    /// Builds a client model: base and global head copy the server's current
    /// values; in dual mode the local head is freshly initialized from the
    /// per-client stream `(seed, LOCAL_HEAD, client)`.
    pub fn client_init(
        arch: Arc<Architecture>,
        layout: PartitionLayout,
        heads: HeadMode,
        server_weights: &ParameterBlock,
        seed: u64,
        client: usize,
    ) -> Result<PartitionedModel> {
        let branch = validate_layout(&arch, &layout)?;
        let (base, global_head, stray_local) = split(server_weights, &layout)?;
        if !stray_local.is_empty() {
            return Err(Error::Structure(
                "server weights unexpectedly contain a private head".into(),
            ));
        }
        let local_head = match heads {
            HeadMode::Single => ParameterBlock::empty(),
            HeadMode::Dual => {
                let mut rng = seeds::stream_rng(seed, seeds::stream::LOCAL_HEAD, client as u64);
                let mut blockb = ParameterBlock::empty();
                let offset = arch.layers().len();
                for (i, l) in arch.param_layers() {
                    if layout.is_head(&l.name) {
                        let params = l.spec.init_params(&mut rng).expect("head layer has params");
                        blockb.push(BlockEntry {
                            name: local_name(&l.name),
                            position: i + offset,
                            params,
                        })?;
                    }
                }
                blockb
            }
        };
        Ok(PartitionedModel { arch, layout, heads, branch, base, global_head, local_head })
    }

    /// Reassembles a model from a flat block (e.g. a loaded checkpoint).
    /// Dual/single mode is inferred from the presence of the private head.
    pub fn from_flat(
        arch: Arc<Architecture>,
        layout: PartitionLayout,
        flat: &ParameterBlock,
    ) -> Result<PartitionedModel> {
        let branch = validate_layout(&arch, &layout)?;
        let (base, global_head, local_head) = split(flat, &layout)?;
        let heads = if local_head.is_empty() { HeadMode::Single } else { HeadMode::Dual };
        let offset = arch.layers().len();
        let normalize = |blockb: &ParameterBlock, is_local: bool| -> Result<ParameterBlock> {
            let mut out = ParameterBlock::empty();
            for e in blockb.entries() {
                let template = as_local(&e.name).unwrap_or(&e.name);
                let idx = arch.index_of(template).expect("split validated the name");
                let (w_shape, b_shape) =
                    arch.layers()[idx].spec.param_shapes().expect("param layer");
                if e.params.weights.shape() != w_shape.as_slice()
                    || e.params.bias.shape() != b_shape.as_slice()
                {
                    return Err(Error::Structure(format!(
                        "layer `{}` has shape {:?}/{:?} but the network expects {:?}/{:?}",
                        e.name,
                        e.params.weights.shape(),
                        e.params.bias.shape(),
                        w_shape,
                        b_shape
                    )));
                }
                out.push(BlockEntry {
                    name: e.name.clone(),
                    position: if is_local { idx + offset } else { idx },
                    params: e.params.clone(),
                })?;
            }
            Ok(out)
        };
        let base = normalize(&base, false)?;
        let global_head = normalize(&global_head, false)?;
        let local_head = normalize(&local_head, true)?;
        Ok(PartitionedModel { arch, layout, heads, branch, base, global_head, local_head })
    }

    pub fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn layout(&self) -> &PartitionLayout {
        &self.layout
    }

    pub fn heads(&self) -> HeadMode {
        self.heads
    }

    pub fn base(&self) -> &ParameterBlock {
        &self.base
    }

    pub fn global_head(&self) -> &ParameterBlock {
        &self.global_head
    }

    pub fn local_head(&self) -> &ParameterBlock {
        &self.local_head
    }

    /// All parameters as one flat block (base, global head, then local head).
    pub fn flatten(&self) -> ParameterBlock {
        concat(&[&self.base, &self.global_head, &self.local_head])
            .expect("model blocks are disjoint by construction")
    }

    fn base_segment(&self) -> &[NamedLayer] {
        &self.arch.layers()[..self.branch]
    }

    fn head_segment(&self) -> &[NamedLayer] {
        &self.arch.layers()[self.branch..]
    }

    fn base_params(&self) -> Vec<Option<&LayerParams>> {
        self.base_segment()
            .iter()
            .map(|l| if l.spec.has_params() { self.base.get(&l.name) } else { None })
            .collect()
    }

    fn head_params<'a>(&self, blockb: &'a ParameterBlock, local: bool) -> Vec<Option<&'a LayerParams>> {
        self.head_segment()
            .iter()
            .map(|l| {
                if !l.spec.has_params() {
                    return None;
                }
                if local {
                    blockb.get(&local_name(&l.name))
                } else {
                    blockb.get(&l.name)
                }
            })
            .collect()
    }

    /// Class-score outputs `(global, local)` for a batch; the local output is
    /// `None` for single-head models.
    pub fn head_outputs(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let base_acts = forward_segment(self.base_segment(), &self.base_params(), x)?;
        let trunk_out = base_acts.last().unwrap();
        let g_acts =
            forward_segment(self.head_segment(), &self.head_params(&self.global_head, false), trunk_out)?;
        let f_g = g_acts.into_iter().last().unwrap();
        let f_l = match self.heads {
            HeadMode::Single => None,
            HeadMode::Dual => {
                let l_acts = forward_segment(
                    self.head_segment(),
                    &self.head_params(&self.local_head, true),
                    trunk_out,
                )?;
                Some(l_acts.into_iter().last().unwrap())
            }
        };
        Ok((f_g, f_l))
    }

    /// Predicted classes for a batch.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (f_g, f_l) = self.head_outputs(x)?;
        let c = self.layout.num_classes;
        let n = f_g.shape()[0];
        let gd = f_g.data();
        let mut out = Vec::with_capacity(n);
        match f_l {
            None => {
                for s in 0..n {
                    out.push(argmax(&gd[s * c..(s + 1) * c]));
                }
            }
            Some(f_l) => {
                let ld = f_l.data();
                for s in 0..n {
                    out.push(combined_argmax(&gd[s * c..(s + 1) * c], &ld[s * c..(s + 1) * c]));
                }
            }
        }
        Ok(out)
    }

    /// Predicted class for a single sample (shape = network input shape).
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let mut batched = vec![1];
        batched.extend_from_slice(x.shape());
        let xb = x.reshaped(batched)?;
        Ok(self.predict_batch(&xb)?[0])
    }

    /// Mean loss and per-block gradients for one batch.
    ///
    /// Dual mode: `loss = mean[ce(f_g, y) + ce(f_l, y)]`; the trunk gradient
    /// is the sum of both heads' back-propagated contributions, and each
    /// head's own gradients come only from its own loss term. Single mode:
    /// ordinary cross-entropy through the one head.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, ModelGrads)> {
        if x.shape().first().copied() == Some(0) || labels.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        let base_layers = self.base_segment();
        let head_layers = self.head_segment();
        let base_params = self.base_params();
        let global_params = self.head_params(&self.global_head, false);

        let base_acts = forward_segment(base_layers, &base_params, x)?;
        let trunk_out = base_acts.last().unwrap();
        let g_acts = forward_segment(head_layers, &global_params, trunk_out)?;
        let (loss_g, dldp_g) = cross_entropy_batch(g_acts.last().unwrap(), labels)?;
        let (g_grads, mut trunk_grad) =
            backward_segment(head_layers, &global_params, &g_acts, &dldp_g)?;

        let (loss, l_grads) = match self.heads {
            HeadMode::Single => (loss_g, Vec::new()),
            HeadMode::Dual => {
                let local_params = self.head_params(&self.local_head, true);
                let l_acts = forward_segment(head_layers, &local_params, trunk_out)?;
                let (loss_l, dldp_l) = cross_entropy_batch(l_acts.last().unwrap(), labels)?;
                let (l_grads, trunk_grad_l) =
                    backward_segment(head_layers, &local_params, &l_acts, &dldp_l)?;
                add_into(&mut trunk_grad, &trunk_grad_l)?;
                (loss_g + loss_l, l_grads)
            }
        };

        let (b_grads, _) = backward_segment(base_layers, &base_params, &base_acts, &trunk_grad)?;

        let base = segment_grads_to_block(base_layers, 0, b_grads, false, self.arch.layers().len());
        let global_head = segment_grads_to_block(
            head_layers,
            self.branch,
            g_grads,
            false,
            self.arch.layers().len(),
        );
        let local_head = segment_grads_to_block(
            head_layers,
            self.branch,
            l_grads,
            true,
            self.arch.layers().len(),
        );
        Ok((loss, ModelGrads { base, global_head, local_head }))
    }

    /// One SGD step over every block present in `grads`.
    pub fn apply_sgd(&mut self, grads: &ModelGrads, learning_rate: f64) -> Result<()> {
        for (blockb, gblock) in [
            (&mut self.base, &grads.base),
            (&mut self.global_head, &grads.global_head),
            (&mut self.local_head, &grads.local_head),
        ] {
            for ge in gblock.entries() {
                let params = blockb.get_mut(&ge.name).ok_or_else(|| {
                    Error::Structure(format!("gradient for unknown layer `{}`", ge.name))
                })?;
                sgd_step(&mut params.weights, &ge.params.weights, learning_rate)?;
                sgd_step(&mut params.bias, &ge.params.bias, learning_rate)?;
            }
        }
        Ok(())
    }

    /// `epochs` passes of mini-batch SGD over `indices` of `data`. Each epoch
    /// shuffles a fresh copy of the given order with `rng`, so the batch
    /// sequence depends only on the stream state — running two epochs in one
    /// call or across two calls walks identical batches.
    pub fn train_epochs(
        &mut self,
        data: &LabeledDataset,
        indices: &[usize],
        epochs: usize,
        sgd: &SgdConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if indices.is_empty() {
            return Err(Error::Data("training shard is empty".into()));
        }
        for _ in 0..epochs {
            let mut order = indices.to_vec();
            order.shuffle(rng);
            for chunk in order.chunks(sgd.batch_size) {
                let (x, y) = data.batch(chunk)?;
                let (_, grads) = self.loss_and_grads(&x, &y)?;
                self.apply_sgd(&grads, sgd.learning_rate)?;
            }
        }
        Ok(())
    }

    /// Fraction of correct predictions over `indices` of `data`.
    pub fn accuracy(&self, data: &LabeledDataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::Config("cannot evaluate on an empty shard".into()));
        }
        let mut correct = 0usize;
        for chunk in indices.chunks(256) {
            let (x, y) = data.batch(chunk)?;
            let pred = self.predict_batch(&x)?;
            correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        Ok(correct as f64 / indices.len() as f64)
    }

    /// Overwrites shared-layer values with `incoming` (base and global-head
    /// names only; may be a subset under a partial-sharing mask). A private
    /// head layer in the payload is a protocol violation.
    pub fn merge_shared(&mut self, incoming: &ParameterBlock) -> Result<()> {
        for e in incoming.entries() {
            if as_local(&e.name).is_some() {
                return Err(Error::Protocol(format!(
                    "shared payload contains private layer `{}`",
                    e.name
                )));
            }
            let target = if self.layout.is_base(&e.name) {
                self.base.get_mut(&e.name)
            } else if self.layout.is_head(&e.name) {
                self.global_head.get_mut(&e.name)
            } else {
                None
            };
            let target = target.ok_or_else(|| {
                Error::Structure(format!("shared payload names unknown layer `{}`", e.name))
            })?;
            if target.weights.shape() != e.params.weights.shape()
                || target.bias.shape() != e.params.bias.shape()
            {
                return Err(Error::Structure(format!(
                    "shared layer `{}` has mismatched shapes",
                    e.name
                )));
            }
            *target = e.params.clone();
        }
        Ok(())
    }

    /// Copies the named shared layers out of the model, preserving canonical
    /// order. Asking for a private layer is a protocol violation.
    pub fn extract_shared(&self, names: &[String]) -> Result<ParameterBlock> {
        let mut out = Vec::new();
        for name in names {
            if as_local(name).is_some() {
                return Err(Error::Protocol(format!(
                    "private layer `{name}` requested for upload"
                )));
            }
            let entry = self
                .base
                .entries()
                .iter()
                .chain(self.global_head.entries())
                .find(|e| &e.name == name)
                .ok_or_else(|| {
                    Error::Structure(format!("unknown shared layer `{name}` requested"))
                })?;
            out.push(entry.clone());
        }
        out.sort_by_key(|e| e.position);
        ParameterBlock::from_entries(out)
    }
}

/// Argmax with first-occurrence tie-breaking.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg
}

/// Dual-head decision rule: argmax over the concatenation
/// `global_scores ++ local_scores` (length 2C), first occurrence winning
/// ties, mapped back to a class by `index mod C`.
pub fn combined_argmax(global_scores: &[f64], local_scores: &[f64]) -> usize {
    assert_eq!(
        global_scores.len(),
        local_scores.len(),
        "both heads must score the same class set"
    );
    let c = global_scores.len();
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, &v) in global_scores.iter().chain(local_scores).enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg % c
}

fn add_into(acc: &mut Tensor, other: &Tensor) -> Result<()> {
    if acc.shape() != other.shape() {
        return Err(Error::Structure(format!(
            "cannot add tensors of shapes {:?} and {:?}",
            acc.shape(),
            other.shape()
        )));
    }
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
    Ok(())
}

/// Packs segment-aligned gradients into a block keyed like the model's own.
fn segment_grads_to_block(
    layers: &[NamedLayer],
    segment_start: usize,
    grads: Vec<Option<LayerParams>>,
    local: bool,
    chain_len: usize,
) -> ParameterBlock {
    let mut blockb = ParameterBlock::empty();
    for (i, g) in grads.into_iter().enumerate() {
        if let Some(params) = g {
            let template = &layers[i].name;
            let (name, position) = if local {
                (local_name(template), segment_start + i + chain_len)
            } else {
                (template.clone(), segment_start + i)
            };
            blockb
                .push(BlockEntry { name, position, params })
                .expect("segment names are unique");
        }
    }
    blockb
}
