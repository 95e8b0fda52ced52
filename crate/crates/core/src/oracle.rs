//! Reference ordered map and differential checking of both trees.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineTree;
use crate::flash::{FlashDevice, FlashGeometry};
use crate::fm_tree::FmTree;
use crate::node::{TreeConfig, TreeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkloadOp {
    Insert { key: u64, payload: u64 },
    Delete { key: u64 },
    Search { key: u64 },
}

/// What an operation lets a caller observe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Inserted,
    Search(Option<u64>),
    Delete(bool),
    Entries(Vec<(u64, u64)>),
    Error(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceResults {
    /// One outcome per op.
    pub outcomes: Vec<Outcome>,
    pub entries: Vec<(u64, u64)>,
}

pub fn replay(ops: &[WorkloadOp]) -> ReferenceResults {
    let mut map = BTreeMap::new();
    let outcomes = ops
        .iter()
        .map(|op| match *op {
            WorkloadOp::Insert { key, payload } => {
                map.insert(key, payload);
                Outcome::Inserted
            }
            WorkloadOp::Delete { key } => Outcome::Delete(map.remove(&key).is_some()),
            WorkloadOp::Search { key } => Outcome::Search(map.get(&key).copied()),
        })
        .collect();
    ReferenceResults {
        outcomes,
        entries: map.into_iter().collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    /// Index of the op; `ops.len()` for the final entry comparison.
    pub op_index: usize,
    pub expected: Outcome,
    pub actual: Outcome,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub pass: bool,
    pub first_divergence: Option<Divergence>,
}

impl Verdict {
    fn from_divergence(first_divergence: Option<Divergence>) -> Self {
        Self {
            pass: first_divergence.is_none(),
            first_divergence,
        }
    }
}

/// Key-value surface shared by both trees.
pub trait KvTree {
    fn insert(&mut self, key: u64, payload: u64) -> Result<(), TreeError>;
    fn delete(&mut self, key: u64) -> Result<bool, TreeError>;
    fn search(&mut self, key: u64) -> Result<Option<u64>, TreeError>;
    fn live_entries(&mut self) -> Result<Vec<(u64, u64)>, TreeError>;
}

impl KvTree for FmTree {
    fn insert(&mut self, key: u64, payload: u64) -> Result<(), TreeError> {
        FmTree::insert(self, key, payload)
    }
    fn delete(&mut self, key: u64) -> Result<bool, TreeError> {
        FmTree::delete(self, key)
    }
    fn search(&mut self, key: u64) -> Result<Option<u64>, TreeError> {
        FmTree::search(self, key)
    }
    fn live_entries(&mut self) -> Result<Vec<(u64, u64)>, TreeError> {
        FmTree::live_entries(self)
    }
}

impl KvTree for BaselineTree {
    fn insert(&mut self, key: u64, payload: u64) -> Result<(), TreeError> {
        BaselineTree::insert(self, key, payload)
    }
    fn delete(&mut self, key: u64) -> Result<bool, TreeError> {
        BaselineTree::delete(self, key)
    }
    fn search(&mut self, key: u64) -> Result<Option<u64>, TreeError> {
        BaselineTree::search(self, key)
    }
    fn live_entries(&mut self) -> Result<Vec<(u64, u64)>, TreeError> {
        BaselineTree::live_entries(self)
    }
}

pub fn apply<T: KvTree + ?Sized>(tree: &mut T, op: &WorkloadOp) -> Outcome {
    let result = match *op {
        WorkloadOp::Insert { key, payload } => tree.insert(key, payload).map(|_| Outcome::Inserted),
        WorkloadOp::Delete { key } => tree.delete(key).map(Outcome::Delete),
        WorkloadOp::Search { key } => tree.search(key).map(Outcome::Search),
    };
    result.unwrap_or_else(|e| Outcome::Error(e.to_string()))
}

/// Run `ops` on `tree` and compare every outcome plus the final entries
/// with the reference replay. Stops at the first divergence.
pub fn check_tree<T: KvTree + ?Sized>(tree: &mut T, ops: &[WorkloadOp]) -> Verdict {
    let reference = replay(ops);
    for (i, (op, expected)) in ops.iter().zip(&reference.outcomes).enumerate() {
        let actual = apply(tree, op);
        if actual != *expected {
            return Verdict::from_divergence(Some(Divergence {
                op_index: i,
                expected: expected.clone(),
                actual,
            }));
        }
    }
    let actual = match tree.live_entries() {
        Ok(entries) => Outcome::Entries(entries),
        Err(e) => Outcome::Error(e.to_string()),
    };
    let expected = Outcome::Entries(reference.entries);
    Verdict::from_divergence((actual != expected).then(|| Divergence {
        op_index: ops.len(),
        expected,
        actual,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeKind {
    Fm,
    Baseline,
}

/// Device and tree parameters for building either tree.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeSetup {
    pub q: u32,
    pub blocks: usize,
    pub config: TreeConfig,
    pub always_erase_on_rewrite: bool,
}

impl TreeSetup {
    pub fn device(&self) -> Result<FlashDevice, TreeError> {
        let geometry = FlashGeometry::new(self.q, self.config.node_cells(), self.blocks)?;
        Ok(FlashDevice::new(geometry)?)
    }

    pub fn build_fm(&self) -> Result<FmTree, TreeError> {
        FmTree::create(self.device()?, self.config.clone())
    }

    pub fn build_baseline(&self) -> Result<BaselineTree, TreeError> {
        BaselineTree::create(self.device()?, self.config.clone(), self.always_erase_on_rewrite)
    }
}

pub fn differential_check(ops: &[WorkloadOp], kind: TreeKind, setup: &TreeSetup) -> Verdict {
    let built: Result<Box<dyn KvTree>, TreeError> = match kind {
        TreeKind::Fm => setup.build_fm().map(|t| Box::new(t) as Box<dyn KvTree>),
        TreeKind::Baseline => setup.build_baseline().map(|t| Box::new(t) as Box<dyn KvTree>),
    };
    match built {
        Ok(mut tree) => check_tree(tree.as_mut(), ops),
        Err(e) => Verdict::from_divergence(Some(Divergence {
            op_index: 0,
            expected: Outcome::Entries(Vec::new()),
            actual: Outcome::Error(e.to_string()),
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fm_tree::Fault;

    fn setup() -> TreeSetup {
        TreeSetup {
            q: 8,
            blocks: 256,
            config: TreeConfig {
                slots_per_node: 4,
                key_width: 3,
                payload_width: 3,
                ..TreeConfig::default()
            },
            always_erase_on_rewrite: false,
        }
    }

    #[test]
    fn replay_examples() {
        let r = replay(&[
            WorkloadOp::Insert { key: 1, payload: 10 },
            WorkloadOp::Search { key: 1 },
        ]);
        assert_eq!(r.outcomes[1], Outcome::Search(Some(10)));
        let r = replay(&[WorkloadOp::Delete { key: 9 }]);
        assert_eq!(r.outcomes, vec![Outcome::Delete(false)]);
        let r = replay(&[
            WorkloadOp::Insert { key: 3, payload: 1 },
            WorkloadOp::Insert { key: 1, payload: 2 },
            WorkloadOp::Insert { key: 3, payload: 4 },
        ]);
        assert_eq!(r.entries, vec![(1, 2), (3, 4)]);
    }

    /// Brute-force model: an unordered list of pairs searched by scanning.
    fn brute_force(ops: &[WorkloadOp]) -> ReferenceResults {
        let mut list: Vec<(u64, u64)> = Vec::new();
        let mut outcomes = Vec::new();
        for op in ops {
            match *op {
                WorkloadOp::Insert { key, payload } => {
                    list.retain(|e| e.0 != key);
                    list.push((key, payload));
                    outcomes.push(Outcome::Inserted);
                }
                WorkloadOp::Delete { key } => {
                    let before = list.len();
                    list.retain(|e| e.0 != key);
                    outcomes.push(Outcome::Delete(list.len() != before));
                }
                WorkloadOp::Search { key } => {
                    outcomes.push(Outcome::Search(
                        list.iter().find(|e| e.0 == key).map(|e| e.1),
                    ));
                }
            }
        }
        // selection of the minimum key, repeated
        let mut entries = Vec::new();
        while let Some(i) = (0..list.len()).min_by_key(|&i| list[i].0) {
            entries.push(list.swap_remove(i));
        }
        ReferenceResults { outcomes, entries }
    }

    fn alphabet() -> Vec<WorkloadOp> {
        let mut ops = Vec::new();
        for key in 0..3 {
            ops.push(WorkloadOp::Insert { key, payload: 10 });
            ops.push(WorkloadOp::Insert { key, payload: 20 });
            ops.push(WorkloadOp::Delete { key });
            ops.push(WorkloadOp::Search { key });
        }
        ops
    }

    fn for_each_sequence(max_len: usize, mut f: impl FnMut(&[WorkloadOp])) {
        let alphabet = alphabet();
        let mut seq = Vec::with_capacity(max_len);
        fn rec(
            alphabet: &[WorkloadOp],
            seq: &mut Vec<WorkloadOp>,
            max_len: usize,
            f: &mut dyn FnMut(&[WorkloadOp]),
        ) {
            f(seq);
            if seq.len() == max_len {
                return;
            }
            for op in alphabet {
                seq.push(*op);
                rec(alphabet, seq, max_len, f);
                seq.pop();
            }
        }
        rec(&alphabet, &mut seq, max_len, &mut f);
    }

    #[test]
    fn replay_matches_brute_force_exhaustively() {
        let mut n = 0u64;
        for_each_sequence(6, |ops| {
            assert_eq!(replay(ops), brute_force(ops), "{ops:?}");
            n += 1;
        });
        // sum of 12^k for k = 0..=6
        assert_eq!(n, (0..=6).map(|k| 12u64.pow(k)).sum::<u64>());
    }

    #[test]
    fn trees_match_oracle_on_short_sequences() {
        let s = setup();
        for_each_sequence(4, |ops| {
            for kind in [TreeKind::Fm, TreeKind::Baseline] {
                let v = differential_check(ops, kind, &s);
                assert!(v.pass, "{kind:?} {ops:?}: {:?}", v.first_divergence);
            }
        });
    }

    #[test]
    fn injected_fault_is_caught() {
        let ops = [
            WorkloadOp::Insert { key: 1, payload: 10 },
            WorkloadOp::Insert { key: 2, payload: 20 },
            WorkloadOp::Delete { key: 2 },
            WorkloadOp::Search { key: 1 },
            WorkloadOp::Delete { key: 1 },
            WorkloadOp::Search { key: 2 },
            WorkloadOp::Search { key: 1 },
        ];
        let mut tree = setup().build_fm().unwrap();
        assert!(check_tree(&mut tree, &ops).pass);

        let mut tree = setup().build_fm().unwrap();
        tree.inject_fault(Fault::SkipTombstone { delete_index: 1 });
        let v = check_tree(&mut tree, &ops);
        assert!(!v.pass);
        assert_eq!(
            v.first_divergence,
            Some(Divergence {
                op_index: 6,
                expected: Outcome::Search(None),
                actual: Outcome::Search(Some(10)),
            })
        );
    }

    #[test]
    fn final_entries_are_compared() {
        struct Forgetful(BTreeMap<u64, u64>);
        impl KvTree for Forgetful {
            fn insert(&mut self, key: u64, payload: u64) -> Result<(), TreeError> {
                self.0.insert(key, payload);
                Ok(())
            }
            fn delete(&mut self, key: u64) -> Result<bool, TreeError> {
                Ok(self.0.remove(&key).is_some())
            }
            fn search(&mut self, key: u64) -> Result<Option<u64>, TreeError> {
                Ok(self.0.get(&key).copied())
            }
            fn live_entries(&mut self) -> Result<Vec<(u64, u64)>, TreeError> {
                Ok(self.0.iter().skip(1).map(|(&k, &v)| (k, v)).collect())
            }
        }
        let ops = [WorkloadOp::Insert { key: 4, payload: 1 }];
        let v = check_tree(&mut Forgetful(BTreeMap::new()), &ops);
        assert_eq!(v.first_divergence.unwrap().op_index, 1);
    }
}
