//! Erase-avoiding search trees on emulated multi-level flash.
//!
//! - [`flash`]: the q-level cell / block-erase device model with counters.
//! - [`codec`]: digit words and the monotone slot lifecycle.
//! - [`fm_tree`]: the erase-avoiding tree (unsorted slots, tombstones,
//!   barren nodes, lazy erasure, rebuild).
//! - [`baseline`]: a conventional sorted B-tree on the same layout.
//! - [`oracle`]: reference map and differential checking.
//! - [`bench`]: workload generation, the trial protocol and reports.

pub mod baseline;
pub mod bench;
pub mod codec;
pub mod flash;
pub mod fm_tree;
pub mod node;
pub mod oracle;

pub use baseline::BaselineTree;
pub use flash::{BlockId, FlashDevice, FlashGeometry, OpCounters, WearStats};
pub use fm_tree::FmTree;
pub use node::{TreeConfig, TreeError, TreeStats};
