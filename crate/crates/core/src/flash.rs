//! Multi-level NAND flash emulator.
//!
//! A device is a fixed array of blocks; each block holds `cells_per_block`
//! cells that store one of `q` levels. A cell may only be raised between
//! erases, and an erase resets every cell of one block to level 0. Every
//! read, program and erase is tallied in [`OpCounters`].

use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Level stored in one cell, always in `[0, q - 1]`.
pub type CellLevel = u8;

/// Largest supported number of levels per cell (levels fit in a `u8`).
pub const MAX_LEVELS: u32 = 256;

/// Index of a block on a [`FlashDevice`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub u32);

impl BlockId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlashError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("block {block} cell {cell} out of range")]
    OutOfRange { block: u64, cell: u64 },
    #[error("level {level} out of range for q={q}")]
    LevelOutOfRange { level: u32, q: u32 },
    #[error("block {block} cell {cell}: cannot lower level {current} to {target} without erase")]
    MonotonicityViolation {
        block: u32,
        cell: usize,
        current: CellLevel,
        target: CellLevel,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashGeometry {
    /// Levels per cell.
    pub q: u32,
    pub cells_per_block: usize,
    pub block_count: usize,
}

impl FlashGeometry {
    pub fn new(q: u32, cells_per_block: usize, block_count: usize) -> Result<Self, FlashError> {
        let geometry = Self {
            q,
            cells_per_block,
            block_count,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<(), FlashError> {
        if self.q < 2 || self.q > MAX_LEVELS {
            return Err(FlashError::InvalidGeometry(format!(
                "q must be in [2, {MAX_LEVELS}], got {}",
                self.q
            )));
        }
        if self.cells_per_block == 0 {
            return Err(FlashError::InvalidGeometry(
                "cells_per_block must be at least 1".into(),
            ));
        }
        if self.block_count == 0 {
            return Err(FlashError::InvalidGeometry(
                "block_count must be at least 1".into(),
            ));
        }
        if self.block_count > u32::MAX as usize {
            return Err(FlashError::InvalidGeometry("too many blocks".into()));
        }
        Ok(())
    }

    pub fn total_cells(&self) -> usize {
        self.cells_per_block * self.block_count
    }

    pub fn max_level(&self) -> CellLevel {
        (self.q - 1) as CellLevel
    }
}

/// Access tallies since creation or the last [`FlashDevice::reset_counters`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub cell_reads: u64,
    pub cell_programs: u64,
    pub block_erases: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WearStats {
    pub max_erases: u64,
    pub mean_erases: f64,
    pub per_block: Vec<u64>,
}

/// The emulated device. Cells are stored flat, block-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlashDevice {
    geometry: FlashGeometry,
    cells: Vec<CellLevel>,
    erase_counts: Vec<u64>,
    counters: OpCounters,
}

impl FlashDevice {
    pub fn new(geometry: FlashGeometry) -> Result<Self, FlashError> {
        geometry.validate()?;
        Ok(Self {
            geometry,
            cells: vec![0; geometry.total_cells()],
            erase_counts: vec![0; geometry.block_count],
            counters: OpCounters::default(),
        })
    }

    pub fn geometry(&self) -> &FlashGeometry {
        &self.geometry
    }

    fn offset(&self, block: BlockId, cell: usize) -> Result<usize, FlashError> {
        if block.index() >= self.geometry.block_count || cell >= self.geometry.cells_per_block {
            return Err(FlashError::OutOfRange {
                block: block.0 as u64,
                cell: cell as u64,
            });
        }
        Ok(block.index() * self.geometry.cells_per_block + cell)
    }

    fn check_block(&self, block: BlockId) -> Result<(), FlashError> {
        if block.index() >= self.geometry.block_count {
            return Err(FlashError::OutOfRange {
                block: block.0 as u64,
                cell: 0,
            });
        }
        Ok(())
    }

    pub fn read_cell(&mut self, block: BlockId, cell: usize) -> Result<CellLevel, FlashError> {
        let off = self.offset(block, cell)?;
        self.counters.cell_reads += 1;
        Ok(self.cells[off])
    }

    /// Raise a cell to `target`. Programming the current level is a no-op
    /// and is not counted.
    pub fn program_cell(
        &mut self,
        block: BlockId,
        cell: usize,
        target: CellLevel,
    ) -> Result<(), FlashError> {
        let off = self.offset(block, cell)?;
        if u32::from(target) >= self.geometry.q {
            return Err(FlashError::LevelOutOfRange {
                level: target.into(),
                q: self.geometry.q,
            });
        }
        let current = self.cells[off];
        if target < current {
            return Err(FlashError::MonotonicityViolation {
                block: block.0,
                cell,
                current,
                target,
            });
        }
        if target > current {
            self.cells[off] = target;
            self.counters.cell_programs += 1;
        }
        Ok(())
    }

    pub fn erase_block(&mut self, block: BlockId) -> Result<(), FlashError> {
        self.check_block(block)?;
        let cpb = self.geometry.cells_per_block;
        let start = block.index() * cpb;
        self.cells[start..start + cpb].fill(0);
        self.erase_counts[block.index()] += 1;
        self.counters.block_erases += 1;
        Ok(())
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    /// Zero the access tallies. Per-block erase counts are physical wear and
    /// are kept.
    pub fn reset_counters(&mut self) {
        self.counters = OpCounters::default();
    }

    pub fn erase_count(&self, block: BlockId) -> Result<u64, FlashError> {
        self.check_block(block)?;
        Ok(self.erase_counts[block.index()])
    }

    pub fn wear_stats(&self) -> WearStats {
        let per_block = self.erase_counts.clone();
        let max_erases = per_block.iter().copied().max().unwrap_or(0);
        let total: u64 = per_block.iter().sum();
        WearStats {
            max_erases,
            mean_erases: total as f64 / per_block.len() as f64,
            per_block,
        }
    }

    /// Uncounted view of a block's cells, for dumps and invariant checks.
    /// Tree code must go through [`read_cell`](Self::read_cell).
    pub fn inspect_block(&self, block: BlockId) -> Result<&[CellLevel], FlashError> {
        self.check_block(block)?;
        let cpb = self.geometry.cells_per_block;
        let start = block.index() * cpb;
        Ok(&self.cells[start..start + cpb])
    }

    /// Plain-text snapshot: `block <id> erases=<n> cells=<levels>` per line.
    pub fn dump<W: io::Write>(&self, mut out: W) -> io::Result<()> {
        let cpb = self.geometry.cells_per_block;
        for (id, cells) in self.cells.chunks(cpb).enumerate() {
            write!(out, "block {id} erases={} cells=", self.erase_counts[id])?;
            for (i, level) in cells.iter().enumerate() {
                if i > 0 {
                    out.write_all(b" ")?;
                }
                write!(out, "{level}")?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
