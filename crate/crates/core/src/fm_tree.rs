//! Erase-avoiding search tree over multi-level flash.
//!
//! A B-tree variant in which:
//!
//! - slots inside a node are unsorted, so an insert programs the first
//!   usable slot instead of shifting its neighbours;
//! - deletion only increments a slot's state cell (a tombstone);
//! - a node left with no live entries is flagged barren through a single
//!   cell and its parent slot is tombstoned, with no merging or borrowing;
//! - blocks are erased lazily, only when a barren block is picked up again
//!   by the allocator after every pristine block has been used;
//! - a garbage-collection rebuild bulk-loads the live entries into a fresh
//!   generation once enough garbage accumulates.
//!
//! Internal slots hold `(separator, child)`. Routing picks the occupied slot
//! with the greatest separator not above the key, or the smallest separator
//! when the key precedes them all.
//!
//! All node accesses go through the counted [`FlashDevice`] API. The tree
//! also keeps some RAM bookkeeping (allocator queues, dead-slot tallies)
//! that a controller would hold in memory.

use std::collections::{HashMap, VecDeque};

use crate::codec::{self, can_overwrite, DigitWord, SlotRules, SlotState};
use crate::flash::{BlockId, CellLevel, FlashDevice, OpCounters, WearStats};
use crate::node::{word_at, NodeKind, NodeLayout, TreeConfig, TreeError, TreeStats, BARREN_CELL, KIND_CELL};

type Result<T> = std::result::Result<T, TreeError>;

/// Block queues. A block id is in at most one queue.
#[derive(Clone, Debug, Default)]
pub struct Allocator {
    /// Never programmed since the tree was created.
    pub pristine: VecDeque<BlockId>,
    /// Barren blocks, erased when handed out again.
    pub reclaimable: VecDeque<BlockId>,
}

impl Allocator {
    pub fn available(&self) -> usize {
        self.pristine.len() + self.reclaimable.len()
    }
}

/// Deliberate faults for exercising the differential harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The n-th successful delete (0-based) reports success but leaves the
    /// slot occupied.
    SkipTombstone { delete_index: u64 },
}

#[derive(Clone, Copy, Debug)]
struct Step {
    block: BlockId,
    slot: usize,
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    slot: usize,
    key: u64,
    payload: u64,
}

pub struct FmTree {
    device: FlashDevice,
    config: TreeConfig,
    layout: NodeLayout,
    rules: SlotRules,
    root: BlockId,
    height: usize,
    alloc: Allocator,
    live_count: usize,
    inserted_total: u64,
    /// Blocks marked barren since the last rebuild.
    barren_since_gc: usize,
    /// Dead-slot tally for every block of the live tree.
    dead_slots: HashMap<BlockId, usize>,
    dead_majority: usize,
    gc_runs: u64,
    auto_gc: bool,
    deletes: u64,
    fault: Option<Fault>,
}

impl FmTree {
    /// Build an empty tree on `device`. Every block not used by the root
    /// must be all-zero (a fresh device).
    pub fn create(device: FlashDevice, config: TreeConfig) -> Result<Self> {
        let geometry = *device.geometry();
        config.validate(&geometry)?;
        if geometry.q < 3 {
            return Err(TreeError::InvalidConfig(format!(
                "slots need at least 3 levels per cell, got q={}",
                geometry.q
            )));
        }
        let rules = SlotRules {
            q: geometry.q,
            recycle_tombstones: config.recycle_tombstones,
        };
        let alloc = Allocator {
            pristine: (0..geometry.block_count as u32).map(BlockId).collect(),
            reclaimable: VecDeque::new(),
        };
        let mut tree = Self {
            device,
            layout: config.layout(),
            config,
            rules,
            root: BlockId(0),
            height: 1,
            alloc,
            live_count: 0,
            inserted_total: 0,
            barren_since_gc: 0,
            dead_slots: HashMap::new(),
            dead_majority: 0,
            gc_runs: 0,
            auto_gc: true,
            deletes: 0,
            fault: None,
        };
        tree.root = tree.allocate_node(NodeKind::Leaf)?;
        Ok(tree)
    }

    pub fn device(&self) -> &FlashDevice {
        &self.device
    }

    pub fn into_device(self) -> FlashDevice {
        self.device
    }

    pub fn counters(&self) -> OpCounters {
        self.device.counters()
    }

    pub fn reset_counters(&mut self) {
        self.device.reset_counters();
    }

    pub fn wear_stats(&self) -> WearStats {
        self.device.wear_stats()
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn allocator(&self) -> &Allocator {
        &self.alloc
    }

    pub fn root(&self) -> BlockId {
        self.root
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.live_count
    }

    pub fn is_empty(&self) -> bool {
        self.live_count == 0
    }

    pub fn gc_runs(&self) -> u64 {
        self.gc_runs
    }

    /// Enable or disable the automatic rebuild trigger.
    pub fn set_auto_gc(&mut self, enabled: bool) {
        self.auto_gc = enabled;
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Barren blocks (this generation or earlier) plus reachable blocks whose
    /// dead slots outnumber half the node, over device blocks.
    pub fn garbage_fraction(&self) -> f64 {
        (self.barren_since_gc + self.dead_majority) as f64
            / self.device.geometry().block_count as f64
    }

    pub fn tree_stats(&self) -> TreeStats {
        TreeStats {
            height: self.height,
            live_count: self.live_count,
            barren_blocks: self.alloc.reclaimable.len(),
            dead_slots: self.dead_slots.values().sum(),
            inserted_total: self.inserted_total,
        }
    }

    // ---- counted cell access ----

    fn read_level(&mut self, block: BlockId, cell: usize) -> Result<CellLevel> {
        Ok(self.device.read_cell(block, cell)?)
    }

    fn read_word(&mut self, block: BlockId, start: usize, width: usize) -> Result<DigitWord> {
        let mut digits = Vec::with_capacity(width);
        for cell in start..start + width {
            digits.push(self.device.read_cell(block, cell)?);
        }
        Ok(DigitWord::from_digits(digits))
    }

    fn read_value(&mut self, block: BlockId, start: usize, width: usize) -> Result<u64> {
        let word = self.read_word(block, start, width)?;
        Ok(codec::decode_word(&word, self.rules.q)?)
    }

    fn read_key(&mut self, block: BlockId, slot: usize) -> Result<u64> {
        self.read_value(block, self.layout.key_cell(slot), self.layout.key_width)
    }

    fn read_payload(&mut self, block: BlockId, slot: usize) -> Result<u64> {
        self.read_value(block, self.layout.payload_cell(slot), self.layout.payload_width)
    }

    fn read_state(&mut self, block: BlockId, slot: usize) -> Result<CellLevel> {
        self.read_level(block, self.layout.state_cell(slot))
    }

    fn read_kind(&mut self, block: BlockId) -> Result<NodeKind> {
        let level = self.read_level(block, KIND_CELL)?;
        NodeKind::from_level(level).ok_or_else(|| TreeError::Corrupt {
            block,
            reason: format!("kind cell holds {level}"),
        })
    }

    fn program_word(&mut self, block: BlockId, start: usize, word: &DigitWord) -> Result<()> {
        for (i, &digit) in word.digits().iter().enumerate() {
            self.device.program_cell(block, start + i, digit)?;
        }
        Ok(())
    }

    fn encode_key(&self, key: u64) -> Result<DigitWord> {
        codec::encode_word(key, self.layout.key_width, self.rules.q).map_err(|_| {
            TreeError::KeyOverflow {
                key,
                width: self.layout.key_width,
            }
        })
    }

    fn encode_payload(&self, payload: u64) -> Result<DigitWord> {
        codec::encode_word(payload, self.layout.payload_width, self.rules.q).map_err(|_| {
            TreeError::PayloadOverflow {
                payload,
                width: self.layout.payload_width,
            }
        })
    }

    // ---- node-level reads ----

    /// All occupied slots of a node, in slot order.
    fn read_entries(&mut self, block: BlockId) -> Result<Vec<Entry>> {
        let mut entries = Vec::new();
        for slot in 0..self.layout.slots {
            let level = self.read_state(block, slot)?;
            if self.rules.classify(level) == SlotState::Occupied {
                let key = self.read_key(block, slot)?;
                let payload = self.read_payload(block, slot)?;
                entries.push(Entry { slot, key, payload });
            }
        }
        Ok(entries)
    }

    /// Pick the child slot of an internal node responsible for `key`.
    fn route(&mut self, block: BlockId, key: u64) -> Result<(usize, BlockId)> {
        let mut best: Option<(u64, usize)> = None;
        let mut smallest: Option<(u64, usize)> = None;
        for slot in 0..self.layout.slots {
            let level = self.read_state(block, slot)?;
            if self.rules.classify(level) != SlotState::Occupied {
                continue;
            }
            let sep = self.read_key(block, slot)?;
            if sep <= key && best.map_or(true, |(s, _)| sep > s) {
                best = Some((sep, slot));
            }
            if smallest.map_or(true, |(s, _)| sep < s) {
                smallest = Some((sep, slot));
            }
        }
        let (_, slot) = best.or(smallest).ok_or_else(|| TreeError::Corrupt {
            block,
            reason: "internal node has no children".into(),
        })?;
        let child = self.read_payload(block, slot)?;
        Ok((slot, BlockId(child as u32)))
    }

    fn descend(&mut self, key: u64) -> Result<(Vec<Step>, BlockId)> {
        let mut path = Vec::with_capacity(self.height);
        let mut block = self.root;
        loop {
            match self.read_kind(block)? {
                NodeKind::Leaf => return Ok((path, block)),
                NodeKind::Internal => {
                    let (slot, child) = self.route(block, key)?;
                    path.push(Step { block, slot });
                    block = child;
                }
            }
        }
    }

    /// Linear scan of a leaf for `key`; returns the slot and its state level.
    fn find_in_leaf(&mut self, leaf: BlockId, key: u64) -> Result<Option<(usize, CellLevel)>> {
        for slot in 0..self.layout.slots {
            let level = self.read_state(leaf, slot)?;
            if self.rules.classify(level) == SlotState::Occupied && self.read_key(leaf, slot)? == key
            {
                return Ok(Some((slot, level)));
            }
        }
        Ok(None)
    }

    fn has_occupied(&mut self, block: BlockId) -> Result<bool> {
        for slot in 0..self.layout.slots {
            let level = self.read_state(block, slot)?;
            if self.rules.classify(level) == SlotState::Occupied {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Assign a usable slot to every word pair, first fit left to right.
    /// A vacant slot with residual digits is usable only when both new words
    /// can be programmed over the residue.
    fn find_usable_slots(
        &mut self,
        block: BlockId,
        words: &[(DigitWord, DigitWord)],
        skip: Option<usize>,
    ) -> Result<Option<Vec<(usize, CellLevel)>>> {
        let mut candidates = Vec::new();
        for slot in 0..self.layout.slots {
            if Some(slot) == skip {
                continue;
            }
            let level = self.read_state(block, slot)?;
            if self.rules.classify(level) == SlotState::Vacant {
                candidates.push((slot, level, None::<(DigitWord, DigitWord)>));
            }
        }
        let mut taken = vec![false; candidates.len()];
        let mut chosen = Vec::with_capacity(words.len());
        'words: for (key_word, payload_word) in words {
            for (i, (slot, level, residue)) in candidates.iter_mut().enumerate() {
                if taken[i] {
                    continue;
                }
                // a slot still at level 0 has never held data since erase
                let fits = if *level == 0 {
                    true
                } else {
                    if residue.is_none() {
                        let k = self.read_word(block, self.layout.key_cell(*slot), self.layout.key_width)?;
                        let p = self.read_word(
                            block,
                            self.layout.payload_cell(*slot),
                            self.layout.payload_width,
                        )?;
                        *residue = Some((k, p));
                    }
                    let (k, p) = residue.as_ref().expect("residue read above");
                    can_overwrite(k, key_word)? && can_overwrite(p, payload_word)?
                };
                if fits {
                    taken[i] = true;
                    chosen.push((*slot, *level));
                    continue 'words;
                }
            }
            return Ok(None);
        }
        Ok(Some(chosen))
    }

    // ---- node-level writes ----

    fn write_slot(
        &mut self,
        block: BlockId,
        slot: usize,
        level: CellLevel,
        key: &DigitWord,
        payload: &DigitWord,
    ) -> Result<()> {
        let next = self.rules.occupy(level)?;
        self.program_word(block, self.layout.key_cell(slot), key)?;
        self.program_word(block, self.layout.payload_cell(slot), payload)?;
        // state last: the slot becomes visible only once its words are in place
        self.device
            .program_cell(block, self.layout.state_cell(slot), next)?;
        Ok(())
    }

    fn tombstone_slot(&mut self, block: BlockId, slot: usize, level: CellLevel) -> Result<()> {
        let next = self.rules.tombstone(level)?;
        self.device
            .program_cell(block, self.layout.state_cell(slot), next)?;
        if self.rules.classify(next) == SlotState::Dead {
            let half = self.config.half();
            let count = self.dead_slots.entry(block).or_insert(0);
            *count += 1;
            if *count == half + 1 {
                self.dead_majority += 1;
            }
        }
        Ok(())
    }

    /// Hand out a block for a new node: pristine first, otherwise erase one
    /// reclaimable block. Programs the kind cell.
    pub fn allocate_node(&mut self, kind: NodeKind) -> Result<BlockId> {
        let block = if let Some(block) = self.alloc.pristine.pop_front() {
            block
        } else if let Some(block) = self.alloc.reclaimable.pop_front() {
            self.device.erase_block(block)?;
            block
        } else {
            return Err(TreeError::DeviceFull);
        };
        self.device.program_cell(block, KIND_CELL, kind.level())?;
        self.dead_slots.insert(block, 0);
        Ok(block)
    }

    /// Flag a node barren and queue its block for lazy reclamation.
    pub fn mark_barren(&mut self, block: BlockId) -> Result<()> {
        if self.read_level(block, BARREN_CELL)? >= 1 {
            return Err(TreeError::AlreadyBarren(block));
        }
        self.device.program_cell(block, BARREN_CELL, 1)?;
        self.alloc.reclaimable.push_back(block);
        self.barren_since_gc += 1;
        if let Some(dead) = self.dead_slots.remove(&block) {
            if dead > self.config.half() {
                self.dead_majority -= 1;
            }
        }
        Ok(())
    }

    /// Allocate a fresh node and fill it with `entries` in order.
    fn write_fresh(&mut self, kind: NodeKind, entries: &[(u64, u64)]) -> Result<BlockId> {
        let block = self.allocate_node(kind)?;
        for (slot, &(key, payload)) in entries.iter().enumerate() {
            let k = self.encode_key(key)?;
            let p = self.encode_payload(payload)?;
            self.write_slot(block, slot, 0, &k, &p)?;
        }
        Ok(block)
    }

    /// Worst-case allocations for restructuring a node `depth` levels below
    /// the root: two nodes per level plus a new root.
    fn ensure_capacity(&self, depth: usize) -> Result<()> {
        if self.alloc.available() < 2 * (depth + 1) + 1 {
            return Err(TreeError::DeviceFull);
        }
        Ok(())
    }

    /// Replace `old` (reached via `path`) by fresh nodes holding `entries`:
    /// one node when they fit in half a node, otherwise a split into sorted
    /// lower and upper halves. `old` is marked barren afterwards.
    fn replace_node(
        &mut self,
        path: &[Step],
        old: BlockId,
        kind: NodeKind,
        mut entries: Vec<(u64, u64)>,
    ) -> Result<()> {
        if entries.is_empty() && !path.is_empty() {
            return self.remove_node(path, old);
        }
        entries.sort_unstable_by_key(|e| e.0);
        let groups: Vec<&[(u64, u64)]> = if entries.len() <= self.config.half() {
            vec![&entries[..]]
        } else {
            let (lower, upper) = entries.split_at(entries.len() / 2);
            vec![lower, upper]
        };
        let mut children = Vec::with_capacity(groups.len());
        for group in groups {
            let block = self.write_fresh(kind, group)?;
            let sep = group.first().map_or(0, |e| e.0);
            children.push((sep, block));
        }
        self.link_replacement(path, children)?;
        self.mark_barren(old)
    }

    /// Point the parent of the node at the end of `path` (or the root) at
    /// `children` instead of the node.
    fn link_replacement(&mut self, path: &[Step], mut children: Vec<(u64, BlockId)>) -> Result<()> {
        let Some((parent, upper)) = path.split_last() else {
            if children.len() == 1 {
                self.root = children[0].1;
            } else {
                children[0].0 = 0;
                let entries: Vec<(u64, u64)> =
                    children.iter().map(|&(s, b)| (s, b.0 as u64)).collect();
                self.root = self.write_fresh(NodeKind::Internal, &entries)?;
                self.height += 1;
            }
            return Ok(());
        };
        let sep = self.read_key(parent.block, parent.slot)?;
        children[0].0 = children[0].0.min(sep);
        let mut words = Vec::with_capacity(children.len());
        for &(s, b) in &children {
            words.push((self.encode_key(s)?, self.encode_payload(b.0 as u64)?));
        }
        match self.find_usable_slots(parent.block, &words, Some(parent.slot))? {
            Some(slots) => {
                for ((slot, level), (k, p)) in slots.into_iter().zip(&words) {
                    self.write_slot(parent.block, slot, level, k, p)?;
                }
                let level = self.read_state(parent.block, parent.slot)?;
                self.tombstone_slot(parent.block, parent.slot, level)
            }
            None => {
                let mut entries: Vec<(u64, u64)> = self
                    .read_entries(parent.block)?
                    .into_iter()
                    .filter(|e| e.slot != parent.slot)
                    .map(|e| (e.key, e.payload))
                    .collect();
                entries.extend(children.iter().map(|&(s, b)| (s, b.0 as u64)));
                self.replace_node(upper, parent.block, NodeKind::Internal, entries)
            }
        }
    }

    /// Drop an emptied non-root node: mark it barren and tombstone its parent
    /// slot, cascading upwards when the parent empties too.
    fn remove_node(&mut self, path: &[Step], block: BlockId) -> Result<()> {
        let (parent, upper) = path.split_last().expect("root is never removed");
        self.mark_barren(block)?;
        let level = self.read_state(parent.block, parent.slot)?;
        self.tombstone_slot(parent.block, parent.slot, level)?;
        if self.has_occupied(parent.block)? {
            return Ok(());
        }
        if upper.is_empty() {
            // the root lost its last child: restart from an empty leaf
            let leaf = self.allocate_node(NodeKind::Leaf)?;
            self.mark_barren(parent.block)?;
            self.root = leaf;
            self.height = 1;
            Ok(())
        } else {
            self.remove_node(upper, parent.block)
        }
    }

    // ---- public operations ----

    pub fn search(&mut self, key: u64) -> Result<Option<u64>> {
        self.encode_key(key)?;
        let (_, leaf) = self.descend(key)?;
        match self.find_in_leaf(leaf, key)? {
            Some((slot, _)) => Ok(Some(self.read_payload(leaf, slot)?)),
            None => Ok(None),
        }
    }

    /// Insert or update `key`.
    pub fn insert(&mut self, key: u64, payload: u64) -> Result<()> {
        let key_word = self.encode_key(key)?;
        let payload_word = self.encode_payload(payload)?;
        let (path, leaf) = self.descend(key)?;
        let existing = self.find_in_leaf(leaf, key)?;
        if let Some((slot, _)) = existing {
            let old = self.read_word(leaf, self.layout.payload_cell(slot), self.layout.payload_width)?;
            if can_overwrite(&old, &payload_word)? {
                self.program_word(leaf, self.layout.payload_cell(slot), &payload_word)?;
                self.inserted_total += 1;
                return self.maybe_gc();
            }
        }
        let words = [(key_word, payload_word)];
        match self.find_usable_slots(leaf, &words, existing.map(|e| e.0))? {
            Some(slots) => {
                let (slot, level) = slots[0];
                self.write_slot(leaf, slot, level, &words[0].0, &words[0].1)?;
                if let Some((old_slot, old_level)) = existing {
                    self.tombstone_slot(leaf, old_slot, old_level)?;
                }
            }
            None => {
                self.ensure_capacity(path.len())?;
                let mut entries: Vec<(u64, u64)> = self
                    .read_entries(leaf)?
                    .into_iter()
                    .filter(|e| e.key != key)
                    .map(|e| (e.key, e.payload))
                    .collect();
                entries.push((key, payload));
                self.replace_node(&path, leaf, NodeKind::Leaf, entries)?;
            }
        }
        self.inserted_total += 1;
        if existing.is_none() {
            self.live_count += 1;
        }
        self.maybe_gc()
    }

    /// Remove `key`; returns whether it was present.
    pub fn delete(&mut self, key: u64) -> Result<bool> {
        self.encode_key(key)?;
        let (path, leaf) = self.descend(key)?;
        let Some((slot, level)) = self.find_in_leaf(leaf, key)? else {
            return Ok(false);
        };
        let index = self.deletes;
        self.deletes += 1;
        if self.fault == Some(Fault::SkipTombstone { delete_index: index }) {
            self.live_count -= 1;
            return Ok(true);
        }
        if u32::from(level) + 1 >= self.rules.q {
            // saturated state cell: rewrite the leaf without the key
            self.ensure_capacity(path.len())?;
            let entries: Vec<(u64, u64)> = self
                .read_entries(leaf)?
                .into_iter()
                .filter(|e| e.slot != slot)
                .map(|e| (e.key, e.payload))
                .collect();
            self.replace_node(&path, leaf, NodeKind::Leaf, entries)?;
        } else {
            self.tombstone_slot(leaf, slot, level)?;
            if !path.is_empty() && !self.has_occupied(leaf)? {
                self.remove_node(&path, leaf)?;
            }
        }
        self.live_count -= 1;
        self.maybe_gc()?;
        Ok(true)
    }

    /// Every live `(key, payload)` in key order.
    pub fn live_entries(&mut self) -> Result<Vec<(u64, u64)>> {
        Ok(self.collect()?.0)
    }

    /// Live entries (sorted) and every block reachable from the root.
    fn collect(&mut self) -> Result<(Vec<(u64, u64)>, Vec<BlockId>)> {
        let mut entries = Vec::with_capacity(self.live_count);
        let mut blocks = Vec::new();
        let mut stack = vec![self.root];
        while let Some(block) = stack.pop() {
            blocks.push(block);
            let kind = self.read_kind(block)?;
            for e in self.read_entries(block)? {
                match kind {
                    NodeKind::Leaf => entries.push((e.key, e.payload)),
                    NodeKind::Internal => stack.push(BlockId(e.payload as u32)),
                }
            }
        }
        entries.sort_unstable_by_key(|e| e.0);
        Ok((entries, blocks))
    }

    fn maybe_gc(&mut self) -> Result<()> {
        if self.auto_gc && self.garbage_fraction() >= self.config.gc_barren_fraction {
            match self.gc_rebuild() {
                // not enough room for two generations yet; keep going
                Err(TreeError::DeviceFull) => Ok(()),
                other => other,
            }
        } else {
            Ok(())
        }
    }

    /// Rebuild the tree from its live entries into a fresh generation,
    /// leaves and internal nodes filled to half capacity, then mark every
    /// block of the old generation barren.
    pub fn gc_rebuild(&mut self) -> Result<()> {
        let fill = self.config.half();
        let mut needed = self.live_count.div_ceil(fill).max(1);
        let mut level_width = needed;
        while level_width > 1 {
            level_width = level_width.div_ceil(fill);
            needed += level_width;
        }
        if self.alloc.available() < needed {
            return Err(TreeError::DeviceFull);
        }
        let (entries, old_blocks) = self.collect()?;

        let mut level: Vec<(u64, BlockId)> = Vec::new();
        if entries.is_empty() {
            level.push((0, self.write_fresh(NodeKind::Leaf, &[])?));
        } else {
            for group in entries.chunks(fill) {
                level.push((group[0].0, self.write_fresh(NodeKind::Leaf, group)?));
            }
        }
        level[0].0 = 0;
        let mut height = 1;
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len().div_ceil(fill));
            for group in level.chunks(fill) {
                let slots: Vec<(u64, u64)> = group.iter().map(|&(s, b)| (s, b.0 as u64)).collect();
                next.push((group[0].0, self.write_fresh(NodeKind::Internal, &slots)?));
            }
            level = next;
            height += 1;
        }
        self.root = level[0].1;
        self.height = height;
        for block in old_blocks {
            self.mark_barren(block)?;
        }
        self.barren_since_gc = 0;
        self.gc_runs += 1;
        debug_assert_eq!(entries.len(), self.live_count);
        Ok(())
    }

    /// Full structural check using uncounted device inspection.
    ///
    /// Verifies node kinds and barren flags, uniform leaf depth, that every
    /// live key routes back to the leaf holding it, the live count and the
    /// dead-slot bookkeeping.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let q = self.rules.q;
        let layout = self.layout;
        let decode = |cells: &[CellLevel], start: usize, width: usize| {
            codec::decode_word(&word_at(cells, start, width), q).map_err(|e| e.to_string())
        };
        struct Node {
            kind: NodeKind,
            entries: Vec<(u64, u64)>,
            dead: usize,
        }
        let load = |block: BlockId| -> std::result::Result<Node, String> {
            let cells = self.device.inspect_block(block).map_err(|e| e.to_string())?;
            let kind = NodeKind::from_level(cells[KIND_CELL])
                .ok_or_else(|| format!("block {block}: kind {}", cells[KIND_CELL]))?;
            if cells[BARREN_CELL] != 0 {
                return Err(format!("block {block} is reachable but barren"));
            }
            let mut entries = Vec::new();
            let mut dead = 0;
            for slot in 0..layout.slots {
                match self.rules.classify(cells[layout.state_cell(slot)]) {
                    SlotState::Occupied => entries.push((
                        decode(cells, layout.key_cell(slot), layout.key_width)?,
                        decode(cells, layout.payload_cell(slot), layout.payload_width)?,
                    )),
                    SlotState::Dead => dead += 1,
                    SlotState::Vacant => {}
                }
            }
            Ok(Node {
                kind,
                entries,
                dead,
            })
        };
        let route = |node: &Node, key: u64| -> Option<BlockId> {
            let best = node.entries.iter().filter(|e| e.0 <= key).max_by_key(|e| e.0);
            let smallest = node.entries.iter().min_by_key(|e| e.0);
            best.or(smallest).map(|e| BlockId(e.1 as u32))
        };

        let mut leaf_depth = None;
        let mut live = Vec::new();
        let mut stack = vec![(self.root, 1usize)];
        let mut seen = std::collections::HashSet::new();
        while let Some((block, depth)) = stack.pop() {
            if !seen.insert(block) {
                return Err(format!("block {block} reachable twice"));
            }
            let node = load(block)?;
            if self.dead_slots.get(&block) != Some(&node.dead) {
                return Err(format!(
                    "block {block}: dead tally {:?} != {}",
                    self.dead_slots.get(&block),
                    node.dead
                ));
            }
            match node.kind {
                NodeKind::Leaf => {
                    if *leaf_depth.get_or_insert(depth) != depth {
                        return Err(format!("leaf {block} at depth {depth}"));
                    }
                    let mut keys: Vec<u64> = node.entries.iter().map(|e| e.0).collect();
                    keys.sort_unstable();
                    keys.dedup();
                    if keys.len() != node.entries.len() {
                        return Err(format!("leaf {block} holds duplicate keys"));
                    }
                    live.extend(node.entries.iter().map(|e| (e.0, block)));
                }
                NodeKind::Internal => {
                    if node.entries.is_empty() && block != self.root {
                        return Err(format!("internal {block} has no children"));
                    }
                    if node.entries.is_empty() {
                        return Err("root internal node has no children".into());
                    }
                    for &(_, child) in &node.entries {
                        stack.push((BlockId(child as u32), depth + 1));
                    }
                }
            }
        }
        if leaf_depth != Some(self.height) {
            return Err(format!("height {} but leaves at {:?}", self.height, leaf_depth));
        }
        if live.len() != self.live_count {
            return Err(format!("live_count {} but {} entries", self.live_count, live.len()));
        }
        if self.dead_slots.len() != seen.len() {
            return Err("dead-slot tally tracks unreachable blocks".into());
        }
        for (key, holder) in live {
            let mut block = self.root;
            loop {
                let node = load(block)?;
                match node.kind {
                    NodeKind::Leaf => break,
                    NodeKind::Internal => {
                        block = route(&node, key).ok_or("empty internal node")?;
                    }
                }
            }
            if block != holder {
                return Err(format!("key {key} lives in {holder} but routes to {block}"));
            }
        }
        for &block in self.alloc.pristine.iter() {
            let cells = self.device.inspect_block(block).map_err(|e| e.to_string())?;
            if cells.iter().any(|&c| c != 0) {
                return Err(format!("pristine block {block} is programmed"));
            }
        }
        for &block in self.alloc.reclaimable.iter() {
            if seen.contains(&block) {
                return Err(format!("reclaimable block {block} is reachable"));
            }
            let cells = self.device.inspect_block(block).map_err(|e| e.to_string())?;
            if cells[BARREN_CELL] == 0 {
                return Err(format!("reclaimable block {block} is not barren"));
            }
        }
        Ok(())
    }
}
