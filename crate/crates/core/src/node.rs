//! On-flash node layout shared by both trees.
//!
//! One node occupies one block:
//!
//! ```text
//! cell 0       kind   (0 unwritten, 1 leaf, 2 internal)
//! cell 1       barren (0 live, >= 1 barren)
//! cells 2..    B slots of [state | key digits | payload digits]
//! ```
//!
//! Internal nodes store a child block id in the payload word.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, DigitWord};
use crate::flash::{BlockId, CellLevel, FlashError, FlashGeometry};

pub const KIND_CELL: usize = 0;
pub const BARREN_CELL: usize = 1;
const HEADER_CELLS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("node needs {needed} cells but blocks hold {available}")]
    ConfigTooLarge { needed: usize, available: usize },
    #[error("invalid tree config: {0}")]
    InvalidConfig(String),
    #[error("key {key} does not fit in {width} digits")]
    KeyOverflow { key: u64, width: usize },
    #[error("payload {payload} does not fit in {width} digits")]
    PayloadOverflow { payload: u64, width: usize },
    #[error("device full: no pristine or reclaimable block left")]
    DeviceFull,
    #[error("block {0} is already barren")]
    AlreadyBarren(BlockId),
    #[error("corrupt node in block {block}: {reason}")]
    Corrupt { block: BlockId, reason: String },
    #[error(transparent)]
    Flash(#[from] FlashError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Leaf,
    Internal,
}

impl NodeKind {
    pub fn level(self) -> CellLevel {
        match self {
            NodeKind::Leaf => 1,
            NodeKind::Internal => 2,
        }
    }

    pub fn from_level(level: CellLevel) -> Option<Self> {
        match level {
            1 => Some(NodeKind::Leaf),
            2 => Some(NodeKind::Internal),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    /// Slots per node (B).
    pub slots_per_node: usize,
    pub key_width: usize,
    pub payload_width: usize,
    /// Garbage fraction of device blocks that triggers a rebuild.
    pub gc_barren_fraction: f64,
    pub recycle_tombstones: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            slots_per_node: 16,
            key_width: 11,
            payload_width: 11,
            gc_barren_fraction: 0.25,
            recycle_tombstones: true,
        }
    }
}

impl TreeConfig {
    pub fn slot_cells(&self) -> usize {
        1 + self.key_width + self.payload_width
    }

    pub fn node_cells(&self) -> usize {
        HEADER_CELLS + self.slots_per_node * self.slot_cells()
    }

    /// Half-full occupancy, used as split point, fill factor and minimum.
    pub fn half(&self) -> usize {
        self.slots_per_node.div_ceil(2)
    }

    pub fn validate(&self, geometry: &FlashGeometry) -> Result<(), TreeError> {
        if self.slots_per_node < 4 || self.slots_per_node % 2 != 0 {
            return Err(TreeError::InvalidConfig(format!(
                "slots_per_node must be even and at least 4, got {}",
                self.slots_per_node
            )));
        }
        if self.key_width == 0 || self.payload_width == 0 {
            return Err(TreeError::InvalidConfig(
                "key and payload widths must be at least one digit".into(),
            ));
        }
        if !(self.gc_barren_fraction > 0.0 && self.gc_barren_fraction <= 1.0) {
            return Err(TreeError::InvalidConfig(format!(
                "gc_barren_fraction must be in (0, 1], got {}",
                self.gc_barren_fraction
            )));
        }
        if self.node_cells() > geometry.cells_per_block {
            return Err(TreeError::ConfigTooLarge {
                needed: self.node_cells(),
                available: geometry.cells_per_block,
            });
        }
        if codec::capacity(geometry.q, self.payload_width) < geometry.block_count as u128 {
            return Err(TreeError::InvalidConfig(format!(
                "payload width {} cannot address {} blocks",
                self.payload_width, geometry.block_count
            )));
        }
        if codec::capacity(geometry.q, self.key_width) > u64::MAX as u128 + 1
            || codec::capacity(geometry.q, self.payload_width) > u64::MAX as u128 + 1
        {
            return Err(TreeError::InvalidConfig(
                "digit widths exceed 64-bit values".into(),
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> NodeLayout {
        NodeLayout {
            slots: self.slots_per_node,
            key_width: self.key_width,
            payload_width: self.payload_width,
        }
    }
}

/// Cell offsets within a node block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeLayout {
    pub slots: usize,
    pub key_width: usize,
    pub payload_width: usize,
}

impl NodeLayout {
    fn slot_base(&self, slot: usize) -> usize {
        HEADER_CELLS + slot * (1 + self.key_width + self.payload_width)
    }

    pub fn state_cell(&self, slot: usize) -> usize {
        self.slot_base(slot)
    }

    pub fn key_cell(&self, slot: usize) -> usize {
        self.slot_base(slot) + 1
    }

    pub fn payload_cell(&self, slot: usize) -> usize {
        self.slot_base(slot) + 1 + self.key_width
    }

    pub fn node_cells(&self) -> usize {
        self.slot_base(self.slots)
    }
}

/// Decode a word out of a raw cell image.
pub(crate) fn word_at(cells: &[CellLevel], start: usize, width: usize) -> DigitWord {
    DigitWord::from_digits(cells[start..start + width].to_vec())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStats {
    pub height: usize,
    pub live_count: usize,
    pub barren_blocks: usize,
    pub dead_slots: usize,
    pub inserted_total: u64,
}
