//! Negotiation instances, the synthetic dataset generator, and ingestion of
//! normalized negotiation records.
//!
//! Record format, one JSON object per line:
//!
//! ```text
//! {"a1": {"d": 0.1, "budget": 0.5, "priority": 0.7}, "a2": {...}, "u": [0.6, 0.7]}
//! ```
//!
//! `d` may be omitted and defaults to 0 (records normalized from human
//! corpora usually carry no disagreement point). Dataset files written by
//! this crate use the same format, grouped train/val/test, plus a sidecar
//! `<name>.meta.json` holding the seed, split counts, and frontier radius.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{solve_nbs, FeasibleSet};
use crate::rng::Stream;

/// Feature dimension per agent; the layout is `[d, budget, priority]`.
pub const FEATURE_DIM: usize = 3;

/// Seed for the deterministic order-hash split applied to ingested records.
pub const INGEST_SPLIT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AgentFeatures {
    /// Disagreement point (outside option), in `[0, 1)`.
    #[serde(default)]
    pub d: f64,
    /// Normalized budget in `[0, 1]`.
    pub budget: f64,
    /// Priority weight in `[0, 1]`.
    pub priority: f64,
}

impl AgentFeatures {
    pub fn as_array(&self) -> [f64; FEATURE_DIM] {
        [self.d, self.budget, self.priority]
    }

    fn validate(&self, line: usize, prefix: &str) -> Result<()> {
        let checks = [
            ("d", self.d, 0.0, 1.0, true),
            ("budget", self.budget, 0.0, 1.0, false),
            ("priority", self.priority, 0.0, 1.0, false),
        ];
        for (name, value, lo, hi, open_hi) in checks {
            let in_range = if open_hi {
                value >= lo && value < hi
            } else {
                (lo..=hi).contains(&value)
            };
            if !value.is_finite() || !in_range {
                return Err(Error::Validation {
                    line,
                    field: format!("{prefix}.{name}"),
                    msg: format!("value {value} outside expected range"),
                });
            }
        }
        Ok(())
    }
}

/// Point in the bilateral utility space.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct UtilityVector(pub [f64; 2]);

impl UtilityVector {
    pub fn norm(&self) -> f64 {
        (self.0[0] * self.0[0] + self.0[1] * self.0[1]).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// One bilateral negotiation context: the conditioning input for generation
/// and the geometry for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NegotiationInstance {
    pub agents: [AgentFeatures; 2],
    /// Frontier radius; the feasible set is the nonnegative ball of this
    /// radius.
    pub radius: f64,
    /// Known outcome for this instance: the oracle NBS for synthetic data,
    /// or the recorded human outcome for ingested data.
    pub reference_utility: Option<UtilityVector>,
    pub split_tag: SplitTag,
}

impl NegotiationInstance {
    pub fn disagreement(&self) -> [f64; 2] {
        [self.agents[0].d, self.agents[1].d]
    }

    pub fn features(&self) -> [[f64; FEATURE_DIM]; 2] {
        [self.agents[0].as_array(), self.agents[1].as_array()]
    }

    pub fn feasible_set(&self) -> Result<FeasibleSet> {
        FeasibleSet::new(self.radius, self.disagreement())
    }

    /// Counterfactual intervention: both agents receive the mean of the two
    /// disagreement points. The stale reference outcome is dropped.
    pub fn equalize_disagreement(&self) -> NegotiationInstance {
        let mean_d = 0.5 * (self.agents[0].d + self.agents[1].d);
        let mut out = self.clone();
        out.agents[0].d = mean_d;
        out.agents[1].d = mean_d;
        out.reference_utility = None;
        out
    }

    fn validate(&self, line: usize) -> Result<()> {
        self.agents[0].validate(line, "a1")?;
        self.agents[1].validate(line, "a2")?;
        for (i, agent) in self.agents.iter().enumerate() {
            if agent.d >= self.radius {
                return Err(Error::Validation {
                    line,
                    field: format!("a{}.d", i + 1),
                    msg: format!(
                        "disagreement {} leaves no feasible surplus at radius {}",
                        agent.d, self.radius
                    ),
                });
            }
        }
        if let Some(u) = &self.reference_utility {
            for (i, v) in u.0.iter().enumerate() {
                if !v.is_finite() || !(0.0..=1.0).contains(v) {
                    return Err(Error::Validation {
                        line,
                        field: format!("u[{i}]"),
                        msg: format!("utility {v} outside [0, 1]"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// An ordered dataset with disjoint train/val/test assignment.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub instances: Vec<NegotiationInstance>,
    pub seed: u64,
    /// `(train, val, test)` sizes; they sum to `instances.len()`.
    pub counts: (usize, usize, usize),
}

impl DatasetSplit {
    pub fn by_tag(&self, tag: SplitTag) -> Vec<&NegotiationInstance> {
        self.instances
            .iter()
            .filter(|inst| inst.split_tag == tag)
            .collect()
    }

    pub fn train(&self) -> Vec<&NegotiationInstance> {
        self.by_tag(SplitTag::Train)
    }

    pub fn val(&self) -> Vec<&NegotiationInstance> {
        self.by_tag(SplitTag::Val)
    }

    pub fn test(&self) -> Vec<&NegotiationInstance> {
        self.by_tag(SplitTag::Test)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// 80/10/10 sizes by integer arithmetic; train and val round down, the
/// remainder goes to test.
fn split_counts(total: usize) -> (usize, usize, usize) {
    let train = total * 8 / 10;
    let val = total / 10;
    (train, val, total - train - val)
}

fn tags_from_permutation(total: usize, order: &[usize]) -> Vec<SplitTag> {
    let (n_train, n_val, _) = split_counts(total);
    let mut tags = vec![SplitTag::Test; total];
    for (pos, &idx) in order.iter().enumerate() {
        tags[idx] = if pos < n_train {
            SplitTag::Train
        } else if pos < n_train + n_val {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
    }
    tags
}

/// Generate `count` synthetic dyads: disagreement points drawn per agent
/// from U(0.05, 0.4), budget and priority from U(0, 1), reference set to
/// the oracle NBS, and an 80/10/10 split assigned by seeded shuffle.
pub fn generate_synthetic(count: usize, seed: u64, radius: f64) -> Result<DatasetSplit> {
    if count < 1 {
        return Err(Error::Config("dataset count must be >= 1".to_string()));
    }
    // Worst-case d = (0.4, 0.4) must leave a nonempty frontier arc.
    let min_radius = 0.4 * std::f64::consts::SQRT_2;
    if !(radius > min_radius) {
        return Err(Error::Config(format!(
            "radius {radius} must exceed {min_radius} so the IR arc is nonempty"
        )));
    }

    let mut draw = Stream::derive(seed, "dataset");
    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let agents = [
            AgentFeatures {
                d: draw.uniform_in(0.05, 0.4),
                budget: draw.uniform(),
                priority: draw.uniform(),
            },
            AgentFeatures {
                d: draw.uniform_in(0.05, 0.4),
                budget: draw.uniform(),
                priority: draw.uniform(),
            },
        ];
        let fs = FeasibleSet::new(radius, [agents[0].d, agents[1].d])?;
        let reference = solve_nbs(&fs)?;
        instances.push(NegotiationInstance {
            agents,
            radius,
            reference_utility: Some(reference),
            split_tag: SplitTag::Test, // assigned below
        });
    }

    let mut order: Vec<usize> = (0..count).collect();
    let mut shuffle = Stream::derive(seed, "split");
    shuffle.shuffle(&mut order);
    let tags = tags_from_permutation(count, &order);
    for (inst, tag) in instances.iter_mut().zip(tags) {
        inst.split_tag = tag;
    }

    Ok(DatasetSplit {
        instances,
        seed,
        counts: split_counts(count),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    a1: AgentFeatures,
    a2: AgentFeatures,
    u: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    seed: u64,
    counts: [usize; 3],
    radius: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Ingest normalized negotiation records (one JSON object per line).
/// Utilities must lie in the unit square; the frontier radius is fixed at
/// 1.0. Records are split 80/10/10 by a deterministic order hash.
pub fn ingest_records(path: &Path) -> Result<DatasetSplit> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&text).map_err(|e| Error::Validation {
            line: line_no,
            field: "record".to_string(),
            msg: e.to_string(),
        })?;
        let inst = NegotiationInstance {
            agents: [record.a1, record.a2],
            radius: 1.0,
            reference_utility: Some(UtilityVector(record.u)),
            split_tag: SplitTag::Test,
        };
        inst.validate(line_no)?;
        instances.push(inst);
    }

    let total = instances.len();
    // Order-hash split: sort record indices by a keyed hash, then slice.
    let mut order: Vec<usize> = (0..total).collect();
    let keys: Vec<u64> = (0..total)
        .map(|i| Stream::derive_indexed(INGEST_SPLIT_SEED, "ingest-split", i as u64).next_u64())
        .collect();
    order.sort_by_key(|&i| (keys[i], i));
    let tags = tags_from_permutation(total, &order);
    for (inst, tag) in instances.iter_mut().zip(tags) {
        inst.split_tag = tag;
    }

    Ok(DatasetSplit {
        instances,
        seed: INGEST_SPLIT_SEED,
        counts: split_counts(total),
    })
}

/// Write the dataset as line-delimited records grouped train/val/test,
/// plus the sidecar metadata file. Byte-identical for identical inputs.
pub fn save_dataset(split: &DatasetSplit, path: &Path) -> Result<()> {
    let radius = match split.instances.first() {
        Some(inst) => inst.radius,
        None => 1.0,
    };
    if split.instances.iter().any(|i| i.radius != radius) {
        return Err(Error::Config(
            "dataset has mixed radii; cannot serialize a single sidecar".to_string(),
        ));
    }
    let mut file = std::fs::File::create(path)?;
    for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
        for inst in split.instances.iter().filter(|i| i.split_tag == tag) {
            let record = Record {
                a1: inst.agents[0],
                a2: inst.agents[1],
                u: inst
                    .reference_utility
                    .as_ref()
                    .map(|u| u.0)
                    .unwrap_or([f64::NAN, f64::NAN]),
            };
            if record.u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(
                    "cannot serialize an instance without a reference utility".to_string(),
                ));
            }
            let json = serde_json::to_string(&record)
                .map_err(|e| Error::Parse(format!("serialize record: {e}")))?;
            writeln!(file, "{json}")?;
        }
    }
    let meta = DatasetMeta {
        seed: split.seed,
        counts: [split.counts.0, split.counts.1, split.counts.2],
        radius,
    };
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Parse(format!("serialize meta: {e}")))?;
    std::fs::write(sidecar_path(path), meta_json)?;
    Ok(())
}

/// Load a dataset written by [`save_dataset`]; split tags are recovered
/// from the sidecar counts and the grouped record order.
pub fn load_dataset(path: &Path) -> Result<DatasetSplit> {
    let meta_raw = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
        Error::Parse(format!(
            "missing sidecar `{}`: {e}",
            sidecar_path(path).display()
        ))
    })?;
    let meta: DatasetMeta = serde_json::from_str(&meta_raw)
        .map_err(|e| Error::Parse(format!("sidecar `{}`: {e}", sidecar_path(path).display())))?;

    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&text).map_err(|e| Error::Validation {
            line: line_no,
            field: "record".to_string(),
            msg: e.to_string(),
        })?;
        let tag = if idx < meta.counts[0] {
            SplitTag::Train
        } else if idx < meta.counts[0] + meta.counts[1] {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
        let inst = NegotiationInstance {
            agents: [record.a1, record.a2],
            radius: meta.radius,
            reference_utility: Some(UtilityVector(record.u)),
            split_tag: tag,
        };
        inst.validate(line_no)?;
        instances.push(inst);
    }
    let total = instances.len();
    if total != meta.counts.iter().sum::<usize>() {
        return Err(Error::Parse(format!(
            "dataset `{}` has {total} records but sidecar counts sum to {}",
            path.display(),
            meta.counts.iter().sum::<usize>()
        )));
    }
    Ok(DatasetSplit {
        instances,
        seed: meta.seed,
        counts: (meta.counts[0], meta.counts[1], meta.counts[2]),
    })
}
