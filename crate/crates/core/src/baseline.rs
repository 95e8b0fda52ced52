//! Conventional B-tree baseline on the same flash layout.
//!
//! Nodes keep their entries sorted in a prefix of slots, searches binary
//! search each node, and deletes restore minimum occupancy by borrowing from
//! or merging with a sibling. Every node rewrite is checked cell by cell:
//! when any cell would have to drop, the block is erased and reprogrammed.
//!
//! Data lives in leaves. Internal slot `i` holds `(lower bound, child)`; the
//! bound in slot 0 is never consulted.

use std::collections::VecDeque;

use crate::codec::{self, DigitWord};
use crate::flash::{BlockId, CellLevel, FlashDevice, OpCounters, WearStats};
use crate::node::{word_at, NodeKind, NodeLayout, TreeConfig, TreeError, TreeStats, KIND_CELL};

type Result<T> = std::result::Result<T, TreeError>;

#[derive(Clone, Debug, PartialEq, Eq)]
struct Node {
    kind: NodeKind,
    entries: Vec<(u64, u64)>,
}

impl Node {
    fn child(&self, i: usize) -> BlockId {
        BlockId(self.entries[i].1 as u32)
    }
}

pub struct BaselineTree {
    device: FlashDevice,
    config: TreeConfig,
    layout: NodeLayout,
    q: u32,
    always_erase_on_rewrite: bool,
    root: BlockId,
    height: usize,
    free: VecDeque<BlockId>,
    /// Blocks that held data since their last erase.
    dirty: Vec<bool>,
    len: usize,
    inserted_total: u64,
}

impl BaselineTree {
    pub fn create(device: FlashDevice, config: TreeConfig, always_erase_on_rewrite: bool) -> Result<Self> {
        let geometry = *device.geometry();
        config.validate(&geometry)?;
        let mut tree = Self {
            layout: config.layout(),
            q: geometry.q,
            config,
            always_erase_on_rewrite,
            root: BlockId(0),
            height: 1,
            free: (0..geometry.block_count as u32).map(BlockId).collect(),
            dirty: vec![false; geometry.block_count],
            len: 0,
            inserted_total: 0,
            device,
        };
        tree.root = tree.allocate(&Node {
            kind: NodeKind::Leaf,
            entries: Vec::new(),
        })?;
        Ok(tree)
    }

    pub fn device(&self) -> &FlashDevice {
        &self.device
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

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn root(&self) -> BlockId {
        self.root
    }

    pub fn tree_stats(&self) -> TreeStats {
        TreeStats {
            height: self.height,
            live_count: self.len,
            barren_blocks: 0,
            dead_slots: 0,
            inserted_total: self.inserted_total,
        }
    }

    fn min_entries(&self) -> usize {
        self.config.half()
    }

    fn check_key(&self, key: u64) -> Result<()> {
        if key as u128 >= codec::capacity(self.q, self.layout.key_width) {
            return Err(TreeError::KeyOverflow {
                key,
                width: self.layout.key_width,
            });
        }
        Ok(())
    }

    fn check_payload(&self, payload: u64) -> Result<()> {
        if payload as u128 >= codec::capacity(self.q, self.layout.payload_width) {
            return Err(TreeError::PayloadOverflow {
                payload,
                width: self.layout.payload_width,
            });
        }
        Ok(())
    }

    // ---- counted reads ----

    fn read_value(&mut self, block: BlockId, start: usize, width: usize) -> Result<u64> {
        let mut digits = Vec::with_capacity(width);
        for cell in start..start + width {
            digits.push(self.device.read_cell(block, cell)?);
        }
        Ok(codec::decode_word(&DigitWord::from_digits(digits), self.q)?)
    }

    fn read_key(&mut self, block: BlockId, slot: usize) -> Result<u64> {
        self.read_value(block, self.layout.key_cell(slot), self.layout.key_width)
    }

    fn read_payload(&mut self, block: BlockId, slot: usize) -> Result<u64> {
        self.read_value(block, self.layout.payload_cell(slot), self.layout.payload_width)
    }

    fn read_kind(&mut self, block: BlockId) -> Result<NodeKind> {
        let level = self.device.read_cell(block, KIND_CELL)?;
        NodeKind::from_level(level).ok_or_else(|| TreeError::Corrupt {
            block,
            reason: format!("kind cell holds {level}"),
        })
    }

    /// Length of the occupied prefix, by binary search over state cells.
    fn read_count(&mut self, block: BlockId) -> Result<usize> {
        let (mut lo, mut hi) = (0, self.layout.slots);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.device.read_cell(block, self.layout.state_cell(mid))? != 0 {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }

    /// Index of the child covering `key`: the last slot in `1..count` whose
    /// bound is at most `key`, or slot 0.
    fn route(&mut self, block: BlockId, count: usize, key: u64) -> Result<usize> {
        let (mut lo, mut hi) = (1, count);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.read_key(block, mid)? <= key {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        Ok(lo - 1)
    }

    /// Descend to the leaf for `key`, recording `(block, child index)` for
    /// every internal node passed.
    fn descend(&mut self, key: u64) -> Result<(Vec<(BlockId, usize)>, BlockId)> {
        let mut path = Vec::with_capacity(self.height);
        let mut block = self.root;
        loop {
            match self.read_kind(block)? {
                NodeKind::Leaf => return Ok((path, block)),
                NodeKind::Internal => {
                    let count = self.read_count(block)?;
                    let idx = self.route(block, count, key)?;
                    let child = BlockId(self.read_payload(block, idx)? as u32);
                    path.push((block, idx));
                    block = child;
                }
            }
        }
    }

    fn load(&mut self, block: BlockId) -> Result<Node> {
        let kind = self.read_kind(block)?;
        let count = self.read_count(block)?;
        let mut entries = Vec::with_capacity(count + 1);
        for slot in 0..count {
            entries.push((self.read_key(block, slot)?, self.read_payload(block, slot)?));
        }
        Ok(Node { kind, entries })
    }

    // ---- writes ----

    fn image(&self, node: &Node) -> Result<Vec<CellLevel>> {
        let mut cells = vec![0; self.layout.node_cells()];
        cells[KIND_CELL] = node.kind.level();
        for (slot, &(key, payload)) in node.entries.iter().enumerate() {
            cells[self.layout.state_cell(slot)] = 1;
            let k = codec::encode_word(key, self.layout.key_width, self.q)?;
            let p = codec::encode_word(payload, self.layout.payload_width, self.q)?;
            let kc = self.layout.key_cell(slot);
            cells[kc..kc + k.width()].copy_from_slice(k.digits());
            let pc = self.layout.payload_cell(slot);
            cells[pc..pc + p.width()].copy_from_slice(p.digits());
        }
        Ok(cells)
    }

    /// Bring `block` from image `current` (None: erased) to `node`. Erases
    /// first when any cell would decrease, or on every change when
    /// `always_erase_on_rewrite` is set; otherwise programs changed cells.
    fn write_node(&mut self, block: BlockId, current: Option<&Node>, node: &Node) -> Result<()> {
        let new = self.image(node)?;
        let old = match current {
            Some(n) => self.image(n)?,
            None => vec![0; new.len()],
        };
        if new == old {
            return Ok(());
        }
        let must_erase = self.always_erase_on_rewrite || new.iter().zip(&old).any(|(n, o)| n < o);
        if must_erase {
            self.device.erase_block(block)?;
            for (cell, &level) in new.iter().enumerate() {
                self.device.program_cell(block, cell, level)?;
            }
        } else {
            for (cell, (&n, &o)) in new.iter().zip(&old).enumerate() {
                if n != o {
                    self.device.program_cell(block, cell, n)?;
                }
            }
        }
        self.dirty[block.index()] = true;
        Ok(())
    }

    fn allocate(&mut self, node: &Node) -> Result<BlockId> {
        let block = self.free.pop_front().ok_or(TreeError::DeviceFull)?;
        if self.dirty[block.index()] {
            self.device.erase_block(block)?;
            self.dirty[block.index()] = false;
        }
        self.write_node(block, None, node)?;
        Ok(block)
    }

    fn release(&mut self, block: BlockId) {
        self.free.push_back(block);
    }

    // ---- operations ----

    pub fn search(&mut self, key: u64) -> Result<Option<u64>> {
        self.check_key(key)?;
        let (_, leaf) = self.descend(key)?;
        let count = self.read_count(leaf)?;
        let (mut lo, mut hi) = (0, count);
        while lo < hi {
            let mid = (lo + hi) / 2;
            let k = self.read_key(leaf, mid)?;
            if k == key {
                return Ok(Some(self.read_payload(leaf, mid)?));
            } else if k < key {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        Ok(None)
    }

    pub fn insert(&mut self, key: u64, payload: u64) -> Result<()> {
        self.check_key(key)?;
        self.check_payload(payload)?;
        let (mut path, leaf) = self.descend(key)?;
        let old = self.load(leaf)?;
        let mut node = old.clone();
        self.inserted_total += 1;
        match node.entries.binary_search_by_key(&key, |e| e.0) {
            Ok(i) => {
                node.entries[i].1 = payload;
                return self.write_node(leaf, Some(&old), &node);
            }
            Err(i) => node.entries.insert(i, (key, payload)),
        }
        // a split cascade needs at most one block per level plus a new root
        if node.entries.len() > self.layout.slots && self.free.len() < path.len() + 2 {
            return Err(TreeError::DeviceFull);
        }
        self.len += 1;
        self.store_or_split(&mut path, leaf, &old, node)
    }

    /// Write `node` back to `block`, splitting it when it overflows and
    /// pushing the new separator into the parent.
    fn store_or_split(
        &mut self,
        path: &mut Vec<(BlockId, usize)>,
        block: BlockId,
        old: &Node,
        mut node: Node,
    ) -> Result<()> {
        if node.entries.len() <= self.layout.slots {
            return self.write_node(block, Some(old), &node);
        }
        let upper = Node {
            kind: node.kind,
            entries: node.entries.split_off(node.entries.len() / 2),
        };
        let sep = upper.entries[0].0;
        let right = self.allocate(&upper)?;
        self.write_node(block, Some(old), &node)?;
        match path.pop() {
            None => {
                let root = Node {
                    kind: NodeKind::Internal,
                    entries: vec![(0, block.0 as u64), (sep, right.0 as u64)],
                };
                self.root = self.allocate(&root)?;
                self.height += 1;
                Ok(())
            }
            Some((parent, idx)) => {
                let pold = self.load(parent)?;
                let mut pnode = pold.clone();
                pnode.entries.insert(idx + 1, (sep, right.0 as u64));
                self.store_or_split(path, parent, &pold, pnode)
            }
        }
    }

    pub fn delete(&mut self, key: u64) -> Result<bool> {
        self.check_key(key)?;
        let (mut path, leaf) = self.descend(key)?;
        let old = self.load(leaf)?;
        let Ok(i) = old.entries.binary_search_by_key(&key, |e| e.0) else {
            return Ok(false);
        };
        let mut node = old.clone();
        node.entries.remove(i);
        self.len -= 1;
        self.rebalance(&mut path, leaf, &old, node)?;
        Ok(true)
    }

    /// Store a node that just lost an entry, borrowing from or merging with
    /// a sibling when it falls below minimum occupancy.
    fn rebalance(
        &mut self,
        path: &mut Vec<(BlockId, usize)>,
        block: BlockId,
        old: &Node,
        mut node: Node,
    ) -> Result<()> {
        let Some((parent, idx)) = path.pop() else {
            if node.kind == NodeKind::Internal && node.entries.len() == 1 {
                self.root = node.child(0);
                self.height -= 1;
                self.release(block);
                return Ok(());
            }
            return self.write_node(block, Some(old), &node);
        };
        if node.entries.len() >= self.min_entries() {
            return self.write_node(block, Some(old), &node);
        }
        let pold = self.load(parent)?;
        let mut pnode = pold.clone();
        let internal = node.kind == NodeKind::Internal;

        if idx > 0 {
            let left_block = pnode.child(idx - 1);
            let lold = self.load(left_block)?;
            let mut left = lold.clone();
            if left.entries.len() > self.min_entries() {
                let (s, v) = left.entries.pop().expect("left sibling is non-empty");
                if internal {
                    node.entries[0].0 = pnode.entries[idx].0;
                }
                node.entries.insert(0, (s, v));
                pnode.entries[idx].0 = s;
                self.write_node(left_block, Some(&lold), &left)?;
                self.write_node(block, Some(old), &node)?;
                return self.write_node(parent, Some(&pold), &pnode);
            }
            if internal {
                node.entries[0].0 = pnode.entries[idx].0;
            }
            left.entries.extend(node.entries);
            self.write_node(left_block, Some(&lold), &left)?;
            self.release(block);
            pnode.entries.remove(idx);
        } else {
            let right_block = pnode.child(idx + 1);
            let rold = self.load(right_block)?;
            let mut right = rold.clone();
            if right.entries.len() > self.min_entries() {
                let (s, v) = right.entries.remove(0);
                let bound = if internal { pnode.entries[idx + 1].0 } else { s };
                node.entries.push((bound, v));
                pnode.entries[idx + 1].0 = right.entries[0].0;
                self.write_node(right_block, Some(&rold), &right)?;
                self.write_node(block, Some(old), &node)?;
                return self.write_node(parent, Some(&pold), &pnode);
            }
            if internal {
                right.entries[0].0 = pnode.entries[idx + 1].0;
            }
            node.entries.extend(right.entries);
            self.write_node(block, Some(old), &node)?;
            self.release(right_block);
            pnode.entries.remove(idx + 1);
        }
        self.rebalance(path, parent, &pold, pnode)
    }

    /// Every `(key, payload)` in key order.
    pub fn live_entries(&mut self) -> Result<Vec<(u64, u64)>> {
        let mut out = Vec::with_capacity(self.len);
        let mut stack = vec![self.root];
        while let Some(block) = stack.pop() {
            let node = self.load(block)?;
            match node.kind {
                NodeKind::Leaf => out.extend(node.entries),
                NodeKind::Internal => {
                    stack.extend(node.entries.iter().rev().map(|e| BlockId(e.1 as u32)))
                }
            }
        }
        Ok(out)
    }

    /// Structural check through uncounted inspection: sorted nodes, minimum
    /// occupancy off the root, uniform depth, separator bounds and a clean
    /// tail after every occupied prefix.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let layout = self.layout;
        let decode = |cells: &[CellLevel], start: usize, width: usize| {
            codec::decode_word(&word_at(cells, start, width), self.q).map_err(|e| e.to_string())
        };
        let mut stack = vec![(self.root, 1usize, None::<u64>, None::<u64>)];
        let mut leaf_depth = None;
        let mut count = 0;
        while let Some((block, depth, lo, hi)) = stack.pop() {
            let cells = self.device.inspect_block(block).map_err(|e| e.to_string())?;
            let kind = NodeKind::from_level(cells[KIND_CELL])
                .ok_or_else(|| format!("block {block}: kind {}", cells[KIND_CELL]))?;
            let n = (0..layout.slots)
                .take_while(|&s| cells[layout.state_cell(s)] == 1)
                .count();
            let tail = layout.state_cell(n.min(layout.slots));
            if n < layout.slots && cells[tail..layout.node_cells()].iter().any(|&c| c != 0) {
                return Err(format!("block {block}: residue after occupied prefix"));
            }
            if block != self.root && n < self.min_entries() {
                return Err(format!("block {block}: {n} entries below minimum"));
            }
            let mut entries = Vec::with_capacity(n);
            for s in 0..n {
                entries.push((
                    decode(cells, layout.key_cell(s), layout.key_width)?,
                    decode(cells, layout.payload_cell(s), layout.payload_width)?,
                ));
            }
            let keys_from = if kind == NodeKind::Internal { 1 } else { 0 };
            for w in entries[keys_from.min(n)..].windows(2) {
                if w[0].0 >= w[1].0 {
                    return Err(format!("block {block}: keys not strictly increasing"));
                }
            }
            for &(k, _) in &entries[keys_from.min(n)..] {
                if lo.is_some_and(|lo| k < lo) || hi.is_some_and(|hi| k >= hi) {
                    return Err(format!("block {block}: key {k} outside [{lo:?}, {hi:?})"));
                }
            }
            match kind {
                NodeKind::Leaf => {
                    if *leaf_depth.get_or_insert(depth) != depth {
                        return Err(format!("leaf {block} at depth {depth}"));
                    }
                    count += n;
                }
                NodeKind::Internal => {
                    if n < 2 {
                        return Err(format!("internal {block} has {n} children"));
                    }
                    for i in 0..n {
                        let clo = if i == 0 { lo } else { Some(entries[i].0) };
                        let chi = if i + 1 < n { Some(entries[i + 1].0) } else { hi };
                        stack.push((BlockId(entries[i].1 as u32), depth + 1, clo, chi));
                    }
                }
            }
        }
        if leaf_depth != Some(self.height) {
            return Err(format!("height {} but leaves at {leaf_depth:?}", self.height));
        }
        if count != self.len {
            return Err(format!("len {} but {count} entries", self.len));
        }
        Ok(())
    }
}
