//! Seeded workloads, the two-tree trial protocol and report emission.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use indexmap::IndexSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::digits_for_bits;
use crate::flash::{OpCounters, WearStats};
use crate::node::{TreeConfig, TreeError, TreeStats};
use crate::oracle::{self, KvTree, TreeKind, TreeSetup, Verdict, WorkloadOp};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error("trial {trial} failed on the {tree:?} tree: {source}")]
    Trial {
        trial: u64,
        tree: TreeKind,
        source: TreeError,
    },
    #[error("report output failed: {0}")]
    IoFailure(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

/// Per-operation latencies used for the synthetic cost, in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub read_us: f64,
    pub write_us: f64,
    pub erase_us: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            read_us: 25.0,
            write_us: 200.0,
            erase_us: 1750.0,
        }
    }
}

impl CostWeights {
    pub fn cost(&self, c: &OpCounters) -> f64 {
        c.cell_reads as f64 * self.read_us
            + c.cell_programs as f64 * self.write_us
            + c.block_erases as f64 * self.erase_us
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seed: u64,
    pub baseline_inserts: usize,
    pub mixed_ops: usize,
    pub trials: usize,
    pub insert_fraction: f64,
    pub q: u32,
    pub blocks: usize,
    pub slots_per_node: usize,
    pub key_bits: u32,
    pub payload_bits: u32,
    pub gc_barren_fraction: f64,
    pub always_erase_on_rewrite: bool,
    pub format: ReportFormat,
    pub weights: CostWeights,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            baseline_inserts: 1000,
            mixed_ops: 10_000,
            trials: 4,
            insert_fraction: 0.5,
            q: 8,
            blocks: 4096,
            slots_per_node: 16,
            key_bits: 32,
            payload_bits: 32,
            gc_barren_fraction: 0.25,
            always_erase_on_rewrite: false,
            format: ReportFormat::Json,
            weights: CostWeights::default(),
        }
    }
}

impl BenchConfig {
    pub fn tree_config(&self) -> TreeConfig {
        let payload_bits = self.payload_bits.max(usize::BITS - (self.blocks.max(1) - 1).leading_zeros());
        TreeConfig {
            slots_per_node: self.slots_per_node,
            key_width: digits_for_bits(self.key_bits, self.q),
            payload_width: digits_for_bits(payload_bits, self.q),
            gc_barren_fraction: self.gc_barren_fraction,
            recycle_tombstones: true,
        }
    }

    pub fn setup(&self) -> TreeSetup {
        TreeSetup {
            q: self.q,
            blocks: self.blocks,
            config: self.tree_config(),
            always_erase_on_rewrite: self.always_erase_on_rewrite,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::InvalidConfig(msg));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.insert_fraction) {
            return bad(format!("insert_fraction {} not in [0, 1]", self.insert_fraction));
        }
        if !(1..=64).contains(&self.key_bits) || !(1..=64).contains(&self.payload_bits) {
            return bad("key_bits and payload_bits must be in 1..=64".into());
        }
        if !(3..=256).contains(&self.q) {
            return bad(format!("q must be in 3..=256, got {}", self.q));
        }
        let setup = self.setup();
        let device = setup.device().map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
        setup
            .config
            .validate(device.geometry())
            .map_err(|e| BenchError::InvalidConfig(e.to_string()))
    }
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn draw(rng: &mut ChaCha8Rng, bits: u32) -> u64 {
    if bits >= 64 {
        rng.gen()
    } else {
        rng.gen_range(0..1u64 << bits)
    }
}

/// Benchmark workload for one trial: `baseline_inserts` random inserts, then
/// `mixed_ops` inserts or deletes. Deletes target a uniformly chosen live
/// key; with no live key the op becomes an insert.
pub fn generate_workload(config: &BenchConfig, trial: u64) -> Vec<WorkloadOp> {
    let mut rng = trial_rng(config.seed, trial);
    let mut live: IndexSet<u64> = IndexSet::new();
    let mut ops = Vec::with_capacity(config.baseline_inserts + config.mixed_ops);
    let insert = |rng: &mut ChaCha8Rng, live: &mut IndexSet<u64>| {
        let key = draw(rng, config.key_bits);
        let payload = draw(rng, config.payload_bits);
        live.insert(key);
        WorkloadOp::Insert { key, payload }
    };
    for _ in 0..config.baseline_inserts {
        ops.push(insert(&mut rng, &mut live));
    }
    for _ in 0..config.mixed_ops {
        let wants_insert = rng.gen_bool(config.insert_fraction);
        if wants_insert || live.is_empty() {
            ops.push(insert(&mut rng, &mut live));
        } else {
            let idx = rng.gen_range(0..live.len());
            let key = live.swap_remove_index(idx).expect("index in range");
            ops.push(WorkloadOp::Delete { key });
        }
    }
    ops
}

/// Workload for differential checks: inserts, deletes (hits and misses)
/// and searches over a small key space so keys collide often.
pub fn generate_differential_workload(seed: u64, ops: usize, key_space: u64) -> Vec<WorkloadOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut live: IndexSet<u64> = IndexSet::new();
    (0..ops)
        .map(|_| {
            let roll = rng.gen_range(0..10);
            let key = rng.gen_range(0..key_space);
            match roll {
                0..=3 => {
                    live.insert(key);
                    WorkloadOp::Insert {
                        key,
                        payload: rng.gen_range(0..key_space),
                    }
                }
                4..=6 => {
                    let key = if !live.is_empty() && rng.gen_bool(0.5) {
                        *live.get_index(rng.gen_range(0..live.len())).expect("in range")
                    } else {
                        key
                    };
                    live.swap_remove(&key);
                    WorkloadOp::Delete { key }
                }
                _ => WorkloadOp::Search { key },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeReport {
    pub counters: OpCounters,
    pub wear: WearStats,
    pub stats: TreeStats,
    pub synthetic_cost_us: f64,
}

/// Ratios are baseline over FM (erases: over `max(fm, 1)`), so values above
/// one favour the FM tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: u64,
    pub fm: TreeReport,
    pub baseline: TreeReport,
    pub erase_ratio: f64,
    pub read_ratio: f64,
    pub program_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeMeans {
    pub cell_reads: f64,
    pub cell_programs: f64,
    pub block_erases: f64,
    pub max_block_erases: f64,
    pub synthetic_cost_us: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub fm: TreeMeans,
    pub baseline: TreeMeans,
    pub erase_ratio: f64,
    pub read_ratio: f64,
    pub program_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: BenchConfig,
    pub trials: Vec<TrialReport>,
    pub means: MeanReport,
}

fn ratio(baseline: u64, fm: u64) -> f64 {
    baseline as f64 / fm.max(1) as f64
}

fn drive<T: KvTree>(tree: &mut T, ops: &[WorkloadOp]) -> Result<(), TreeError> {
    for op in ops {
        match *op {
            WorkloadOp::Insert { key, payload } => tree.insert(key, payload)?,
            WorkloadOp::Delete { key } => {
                tree.delete(key)?;
            }
            WorkloadOp::Search { key } => {
                tree.search(key)?;
            }
        }
    }
    Ok(())
}

pub fn run_trial(config: &BenchConfig, trial: u64) -> Result<TrialReport, BenchError> {
    config.validate()?;
    let setup = config.setup();
    let ops = generate_workload(config, trial);
    let fail = |tree| move |source| BenchError::Trial { trial, tree, source };

    let mut fm = setup.build_fm().map_err(fail(TreeKind::Fm))?;
    fm.reset_counters();
    drive(&mut fm, &ops).map_err(fail(TreeKind::Fm))?;
    let fm_counters = fm.counters();
    let fm_report = TreeReport {
        counters: fm_counters,
        wear: fm.wear_stats(),
        stats: fm.tree_stats(),
        synthetic_cost_us: config.weights.cost(&fm_counters),
    };
    drop(fm);

    let mut baseline = setup.build_baseline().map_err(fail(TreeKind::Baseline))?;
    baseline.reset_counters();
    drive(&mut baseline, &ops).map_err(fail(TreeKind::Baseline))?;
    let bl_counters = baseline.counters();
    let baseline_report = TreeReport {
        counters: bl_counters,
        wear: baseline.wear_stats(),
        stats: baseline.tree_stats(),
        synthetic_cost_us: config.weights.cost(&bl_counters),
    };

    Ok(TrialReport {
        trial,
        erase_ratio: ratio(bl_counters.block_erases, fm_counters.block_erases),
        read_ratio: ratio(bl_counters.cell_reads, fm_counters.cell_reads),
        program_ratio: ratio(bl_counters.cell_programs, fm_counters.cell_programs),
        fm: fm_report,
        baseline: baseline_report,
    })
}

fn tree_means<'a>(reports: impl Iterator<Item = &'a TreeReport>) -> TreeMeans {
    let mut m = TreeMeans::default();
    let mut n = 0usize;
    for r in reports {
        m.cell_reads += r.counters.cell_reads as f64;
        m.cell_programs += r.counters.cell_programs as f64;
        m.block_erases += r.counters.block_erases as f64;
        m.max_block_erases += r.wear.max_erases as f64;
        m.synthetic_cost_us += r.synthetic_cost_us;
        n += 1;
    }
    if n > 0 {
        let n = n as f64;
        m.cell_reads /= n;
        m.cell_programs /= n;
        m.block_erases /= n;
        m.max_block_erases /= n;
        m.synthetic_cost_us /= n;
    }
    m
}

pub fn summarize(trials: &[TrialReport]) -> MeanReport {
    let n = trials.len().max(1) as f64;
    MeanReport {
        fm: tree_means(trials.iter().map(|t| &t.fm)),
        baseline: tree_means(trials.iter().map(|t| &t.baseline)),
        erase_ratio: trials.iter().map(|t| t.erase_ratio).sum::<f64>() / n,
        read_ratio: trials.iter().map(|t| t.read_ratio).sum::<f64>() / n,
        program_ratio: trials.iter().map(|t| t.program_ratio).sum::<f64>() / n,
    }
}

/// Run trials `0..trials` in parallel and average them.
pub fn run_experiment(config: &BenchConfig) -> Result<ExperimentReport, BenchError> {
    config.validate()?;
    let trials = (0..config.trials as u64)
        .into_par_iter()
        .map(|t| run_trial(config, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentReport {
        config: config.clone(),
        means: summarize(&trials),
        trials,
    })
}

pub const CSV_HEADER: &str = "trial,tree,cell_reads,cell_programs,block_erases,max_block_erases,erase_ratio,read_ratio,program_ratio,synthetic_cost_us";

pub fn emit_report<W: Write>(report: &ExperimentReport, format: ReportFormat, mut out: W) -> Result<(), BenchError> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, report).map_err(io::Error::from)?;
            out.write_all(b"\n")?;
        }
        ReportFormat::Csv => {
            writeln!(out, "{CSV_HEADER}")?;
            for t in &report.trials {
                for (name, r) in [("fm", &t.fm), ("baseline", &t.baseline)] {
                    writeln!(
                        out,
                        "{},{name},{},{},{},{},{},{},{},{}",
                        t.trial,
                        r.counters.cell_reads,
                        r.counters.cell_programs,
                        r.counters.block_erases,
                        r.wear.max_erases,
                        t.erase_ratio,
                        t.read_ratio,
                        t.program_ratio,
                        r.synthetic_cost_us
                    )?;
                }
            }
            let m = &report.means;
            for (name, r) in [("fm", &m.fm), ("baseline", &m.baseline)] {
                writeln!(
                    out,
                    "mean,{name},{},{},{},{},{},{},{},{}",
                    r.cell_reads,
                    r.cell_programs,
                    r.block_erases,
                    r.max_block_erases,
                    m.erase_ratio,
                    m.read_ratio,
                    m.program_ratio,
                    r.synthetic_cost_us
                )?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<(), BenchError> {
    let file = File::create(path)?;
    emit_report(report, format, BufWriter::new(file))
}

/// Parameters of the differential suite run by `fmbench verify`.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    pub seeds: u64,
    pub ops: usize,
    pub key_space: u64,
    pub setup: TreeSetup,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        // small nodes and a tight device so splits, reclaim erases and
        // rebuilds all happen within a few thousand ops
        Self {
            seed: 0,
            seeds: 10,
            ops: 10_000,
            key_space: 2048,
            setup: TreeSetup {
                q: 8,
                blocks: 1024,
                config: TreeConfig {
                    slots_per_node: 8,
                    key_width: 4,
                    payload_width: 4,
                    gc_barren_fraction: 0.25,
                    recycle_tombstones: true,
                },
                always_erase_on_rewrite: false,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct VerifyResult {
    pub seed: u64,
    pub kind: TreeKind,
    pub verdict: Verdict,
}

pub fn run_verify(config: &VerifyConfig) -> Vec<VerifyResult> {
    let jobs: Vec<(u64, TreeKind)> = (config.seed..config.seed + config.seeds)
        .flat_map(|s| [(s, TreeKind::Fm), (s, TreeKind::Baseline)])
        .collect();
    jobs.into_par_iter()
        .map(|(seed, kind)| {
            let ops = generate_differential_workload(seed, config.ops, config.key_space);
            VerifyResult {
                seed,
                kind,
                verdict: oracle::differential_check(&ops, kind, &config.setup),
            }
        })
        .collect()
}
