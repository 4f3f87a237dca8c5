//! Feature bank for neighbour search, per-sample pseudo-label histories, and
//! the temporal key queue used to pick contrastive negatives.

use std::cmp::Ordering;
use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, ProbVector};

/// Store of momentum-model features (unit norm) and predictions, one slot per
/// sample id.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    capacity: usize,
    dim: Option<usize>,
    ids: Vec<u64>,
    features: Vec<f64>,
    preds: Vec<ProbVector>,
    last_seen: Vec<u64>,
    index: HashMap<u64, usize>,
    epoch: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbour<'a> {
    pub sample_id: u64,
    pub distance: f64,
    pub probs: &'a ProbVector,
}

impl FeatureBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("bank capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim: None,
            ids: Vec::new(),
            features: Vec::new(),
            preds: Vec::new(),
            last_seen: Vec::new(),
            index: HashMap::new(),
            epoch: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, sample_id: u64) -> bool {
        self.index.contains_key(&sample_id)
    }

    /// Marks the start of a new epoch for the eviction rule.
    pub fn begin_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
    }

    pub fn get(&self, sample_id: u64) -> Option<(&[f64], &ProbVector)> {
        self.index.get(&sample_id).map(|&pos| (self.feature(pos), &self.preds[pos]))
    }

    fn feature(&self, pos: usize) -> &[f64] {
        let d = self.dim.unwrap_or(0);
        &self.features[pos * d..(pos + 1) * d]
    }

    /// Stores `(z / |z|, probs)` under `sample_id`. When the bank is full and
    /// the id is new, the smallest id not written this epoch is evicted (the
    /// smallest id overall if every slot was written this epoch).
    pub fn update(&mut self, sample_id: u64, z: &[f64], probs: &ProbVector) -> Result<()> {
        numerics::validate_simplex(probs.as_slice())?;
        let unit = numerics::l2_normalize(z)?;
        let dim = *self.dim.get_or_insert(unit.len());
        if unit.len() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                got: unit.len(),
            });
        }
        if let Some(&pos) = self.index.get(&sample_id) {
            self.features[pos * dim..(pos + 1) * dim].copy_from_slice(&unit);
            self.preds[pos] = probs.clone();
            self.last_seen[pos] = self.epoch;
            return Ok(());
        }
        if self.ids.len() == self.capacity {
            self.evict();
        }
        self.index.insert(sample_id, self.ids.len());
        self.ids.push(sample_id);
        self.features.extend_from_slice(&unit);
        self.preds.push(probs.clone());
        self.last_seen.push(self.epoch);
        Ok(())
    }

    fn evict(&mut self) {
        let epoch = self.epoch;
        let stale = (0..self.ids.len())
            .filter(|&p| self.last_seen[p] < epoch)
            .min_by_key(|&p| self.ids[p]);
        let pos = stale.unwrap_or_else(|| {
            (0..self.ids.len())
                .min_by_key(|&p| self.ids[p])
                .expect("evict called on a full, nonempty bank")
        });
        let dim = self.dim.unwrap_or(0);
        let last = self.ids.len() - 1;
        self.index.remove(&self.ids[pos]);
        self.ids.swap_remove(pos);
        self.preds.swap_remove(pos);
        self.last_seen.swap_remove(pos);
        if pos != last {
            self.features.copy_within(last * dim..(last + 1) * dim, pos * dim);
            self.index.insert(self.ids[pos], pos);
        }
        self.features.truncate(last * dim);
    }

    /// The `k` stored entries closest to `z` in cosine distance, ascending,
    /// ties broken by ascending sample id. `exclude` is never returned.
    pub fn knn_query(&self, z: &[f64], k: usize, exclude: Option<u64>) -> Result<Vec<Neighbour<'_>>> {
        let query = numerics::l2_normalize(z)?;
        if let Some(dim) = self.dim {
            if dim != query.len() {
                return Err(Error::LengthMismatch {
                    expected: dim,
                    got: query.len(),
                });
            }
        }
        let mut candidates: Vec<(f64, u64, usize)> = (0..self.ids.len())
            .filter(|&p| Some(self.ids[p]) != exclude)
            .map(|p| (1.0 - numerics::dot(&query, self.feature(p)), self.ids[p], p))
            .collect();
        if k == 0 || candidates.len() < k {
            return Err(Error::BankUnderfilled {
                needed: k,
                available: candidates.len(),
            });
        }
        let order = |a: &(f64, u64, usize), b: &(f64, u64, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, order);
            candidates.truncate(k);
        }
        candidates.sort_unstable_by(order);
        Ok(candidates
            .into_iter()
            .map(|(distance, sample_id, p)| Neighbour {
                sample_id,
                distance,
                probs: &self.preds[p],
            })
            .collect())
    }
}

/// Per-sample ring buffers of refined pseudo-labels, newest last.
#[derive(Clone, Debug)]
pub struct LabelHistoryStore {
    length: usize,
    classes: usize,
    histories: HashMap<u64, VecDeque<usize>>,
}

impl LabelHistoryStore {
    pub fn new(length: usize, classes: usize) -> Result<Self> {
        if length == 0 {
            return Err(Error::InvalidConfig("history length must be at least 1".into()));
        }
        Ok(Self {
            length,
            classes,
            histories: HashMap::new(),
        })
    }

    pub fn history_len(&self) -> usize {
        self.length
    }

    pub fn append(&mut self, sample_id: u64, label: usize) -> Result<()> {
        if label >= self.classes {
            return Err(Error::InvalidConfig(format!(
                "label {label} outside [0, {})",
                self.classes
            )));
        }
        let buf = self.histories.entry(sample_id).or_default();
        buf.push_back(label);
        while buf.len() > self.length {
            buf.pop_front();
        }
        Ok(())
    }

    pub fn get(&self, sample_id: u64) -> Option<&VecDeque<usize>> {
        self.histories.get(&sample_id)
    }

    pub fn snapshot(&self, sample_id: u64) -> Vec<usize> {
        self.get(sample_id).map(|h| h.iter().copied().collect()).unwrap_or_default()
    }

    /// Newest label of a sample.
    pub fn latest(&self, sample_id: u64) -> Option<usize> {
        self.get(sample_id).and_then(|h| h.back().copied())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u64, &VecDeque<usize>)> {
        self.histories.iter()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry {
    pub key: Vec<f64>,
    history: Box<[usize]>,
}

impl QueueEntry {
    pub fn history(&self) -> &[usize] {
        &self.history
    }
}

/// FIFO of contrastive keys, each tagged with a frozen copy of its sample's
/// label history.
#[derive(Clone, Debug)]
pub struct TemporalQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
    pushes: u64,
    evictions: u64,
}

impl TemporalQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("queue capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            pushes: 0,
            evictions: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pushes(&self) -> u64 {
        self.pushes
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn push(&mut self, keys: &[Vec<f64>], snapshots: &[Vec<usize>]) -> Result<()> {
        if keys.len() != snapshots.len() {
            return Err(Error::LengthMismatch {
                expected: keys.len(),
                got: snapshots.len(),
            });
        }
        let normalized = keys.iter().map(|k| numerics::l2_normalize(k)).collect::<Result<Vec<_>>>()?;
        for (key, snap) in normalized.into_iter().zip(snapshots) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
                self.evictions += 1;
            }
            self.entries.push_back(QueueEntry {
                key,
                history: snap.clone().into_boxed_slice(),
            });
            self.pushes += 1;
        }
        Ok(())
    }
}

/// How two label histories are compared when deciding whether a queued key
/// is a false negative for a query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionRule {
    /// Same label at the same epoch offset, aligned on the newest entry.
    #[default]
    Aligned,
    /// Any label in common, regardless of epoch.
    AnyShared,
}

pub fn histories_share_label(query: &[usize], snapshot: &[usize], rule: ExclusionRule) -> bool {
    match rule {
        ExclusionRule::Aligned => query.iter().rev().zip(snapshot.iter().rev()).any(|(a, b)| a == b),
        ExclusionRule::AnyShared => query.iter().any(|a| snapshot.contains(a)),
    }
}

/// `true` keeps the queue entry as a negative for this query.
pub fn exclusion_mask(query_history: &[usize], queue: &TemporalQueue, rule: ExclusionRule) -> Vec<bool> {
    queue
        .entries()
        .map(|e| !histories_share_label(query_history, e.history(), rule))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueDiagnostics {
    pub epoch: usize,
    pub queue_length: usize,
    pub mask_kept_fraction: f64,
}

pub const QUEUE_DIAGNOSTICS_SCHEMA: &str = "# sfuda.queue/1";

pub fn write_queue_diagnostics(path: &Path, rows: &[QueueDiagnostics]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{QUEUE_DIAGNOSTICS_SCHEMA}")?;
    let mut writer = csv::Writer::from_writer(file);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}
