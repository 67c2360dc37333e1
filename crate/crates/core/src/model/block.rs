//! Named parameter blocks and the base/head partition layout.
//!
//! A `ParameterBlock` is an ordered set of `(layer name, parameters)` pairs —
//! the unit that travels between server and clients. The client-private copy
//! of a head layer is stored under the template name plus a `#local` marker,
//! which keeps the flattened form of a model collision-free and makes any
//! private layer that leaks into a shared payload identifiable by name alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayerParams;

/// Marker appended to a head layer's name for the client-private copy.
pub const LOCAL_MARKER: &str = "#local";

/// Appends the private-copy marker to a template layer name.
pub fn local_name(template: &str) -> String {
    format!("{template}{LOCAL_MARKER}")
}

/// If `name` carries the private-copy marker, returns the template name.
pub fn as_local(name: &str) -> Option<&str> {
    name.strip_suffix(LOCAL_MARKER)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockEntry {
    pub name: String,
    /// Ordering key. For layers of an architecture this is the chain index;
    /// private head copies sit after the whole chain so that concatenation
    /// reproduces the canonical base / global head / local head order.
    pub position: usize,
    pub params: LayerParams,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterBlock {
    entries: Vec<BlockEntry>,
}

impl ParameterBlock {
    pub fn empty() -> Self {
        ParameterBlock { entries: Vec::new() }
    }

    pub fn from_entries(entries: Vec<BlockEntry>) -> Result<Self> {
        let mut block = ParameterBlock::empty();
        for e in entries {
            block.push(e)?;
        }
        Ok(block)
    }

    pub fn push(&mut self, entry: BlockEntry) -> Result<()> {
        if self.contains(&entry.name) {
            return Err(Error::Structure(format!(
                "duplicate layer `{}` in parameter block",
                entry.name
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BlockEntry] {
        &self.entries
    }

    /// Mutable access for in-place arithmetic; callers must not rename
    /// entries (that would break the uniqueness guarantee).
    pub fn entries_mut(&mut self) -> &mut [BlockEntry] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&LayerParams> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.params)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.params)
    }

    /// Total scalar parameter count across all entries.
    pub fn param_count(&self) -> u64 {
        self.entries.iter().map(|e| e.params.num_params()).sum()
    }

    pub fn bit_eq(&self, other: &ParameterBlock) -> bool {
        self.len() == other.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.position == b.position && a.params.bit_eq(&b.params)
            })
    }

    /// True when both blocks list the same layer names in the same order with
    /// identical weight/bias shapes.
    pub fn same_structure(&self, other: &ParameterBlock) -> bool {
        self.len() == other.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.params.weights.shape() == b.params.weights.shape()
                    && a.params.bias.shape() == b.params.bias.shape()
            })
    }
}

/// Concatenates blocks into one, ordered by entry position. Any layer name
/// appearing twice is an error.
pub fn concat(blocks: &[&ParameterBlock]) -> Result<ParameterBlock> {
    let mut entries: Vec<BlockEntry> = Vec::new();
    for block in blocks {
        for e in block.entries() {
            if entries.iter().any(|have| have.name == e.name) {
                return Err(Error::Structure(format!(
                    "duplicate layer `{}` across concatenated blocks",
                    e.name
                )));
            }
            entries.push(e.clone());
        }
    }
    entries.sort_by_key(|e| e.position);
    ParameterBlock::from_entries(entries)
}

/// Which layers belong to the shared trunk and which to the duplicated
/// classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionLayout {
    pub base_layers: Vec<String>,
    pub head_layers: Vec<String>,
    pub num_classes: usize,
}

impl PartitionLayout {
    pub fn new(
        base_layers: Vec<String>,
        head_layers: Vec<String>,
        num_classes: usize,
    ) -> Result<Self> {
        if head_layers.is_empty() {
            return Err(Error::Structure("partition layout needs at least one head layer".into()));
        }
        if num_classes < 2 {
            return Err(Error::Structure(format!(
                "a classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        for name in &head_layers {
            if base_layers.contains(name) {
                return Err(Error::Structure(format!(
                    "layer `{name}` listed as both base and head"
                )));
            }
        }
        Ok(PartitionLayout { base_layers, head_layers, num_classes })
    }

    pub fn is_base(&self, name: &str) -> bool {
        self.base_layers.iter().any(|n| n == name)
    }

    pub fn is_head(&self, name: &str) -> bool {
        self.head_layers.iter().any(|n| n == name)
    }

    /// All shareable layer names, shallowest first: the trunk, then the
    /// globally shared head.
    pub fn share_domain(&self) -> Vec<String> {
        self.base_layers
            .iter()
            .chain(self.head_layers.iter())
            .cloned()
            .collect()
    }
}

/// Splits a flat block into `(base, global head, local head)` according to
/// the layout. The local head may be absent entirely (a server-side block),
/// in which case the third block is empty; a partially present local head is
/// an error, as is any name the layout does not know.
pub fn split(
    flat: &ParameterBlock,
    layout: &PartitionLayout,
) -> Result<(ParameterBlock, ParameterBlock, ParameterBlock)> {
    let mut base = ParameterBlock::empty();
    let mut global = ParameterBlock::empty();
    let mut local = ParameterBlock::empty();
    for e in flat.entries() {
        if layout.is_base(&e.name) {
            base.push(e.clone())?;
        } else if layout.is_head(&e.name) {
            global.push(e.clone())?;
        } else if let Some(template) = as_local(&e.name) {
            if layout.is_head(template) {
                local.push(e.clone())?;
            } else {
                return Err(Error::Structure(format!(
                    "layer `{}` is not part of the partition layout",
                    e.name
                )));
            }
        } else {
            return Err(Error::Structure(format!(
                "layer `{}` is not part of the partition layout",
                e.name
            )));
        }
    }
    let missing: Vec<&str> = layout
        .base_layers
        .iter()
        .filter(|n| !base.contains(n))
        .chain(layout.head_layers.iter().filter(|n| !global.contains(n)))
        .map(|s| s.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Structure(format!(
            "block is missing layers {missing:?} required by the layout"
        )));
    }
    if !local.is_empty() && local.len() != layout.head_layers.len() {
        let missing: Vec<String> = layout
            .head_layers
            .iter()
            .filter(|n| !local.contains(&local_name(n)))
            .map(|n| local_name(n))
            .collect();
        return Err(Error::Structure(format!(
            "local head is incomplete, missing {missing:?}"
        )));
    }
    Ok((base, global, local))
}
