//! Early identity pruning: a streaming monitor over per-batch predictions
//! that removes the fastest-learned identities from the training stream,
//! exploiting how quickly poisoned identities are picked up compared to
//! benign face features.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Which accuracy extreme gets pruned. The pruning rationale targets the
/// fastest-learned (highest-accuracy) identity; the opposite direction is
/// kept runnable as a switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneDirection {
    #[default]
    MaxAccuracy,
    MinAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// Number of identities in the dataset.
    pub kappa: usize,
    /// First batch index at which pruning may fire.
    pub start_batch: u64,
    /// Batch interval between removals.
    pub batch_interval: u64,
    /// Maximum number of identities to remove.
    pub max_removals: usize,
    pub direction: PruneDirection,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            kappa: 0,
            start_batch: 500,
            batch_interval: 500,
            max_removals: 10,
            direction: PruneDirection::MaxAccuracy,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.start_batch < 1 || self.batch_interval < 1 || self.max_removals < 1 {
            return Err(Error::Domain(
                "start batch, interval, and removal budget must be at least 1".into(),
            ));
        }
        if self.kappa <= self.max_removals {
            return Err(Error::Domain(format!(
                "identity count {} must exceed the removal budget {}",
                self.kappa, self.max_removals
            )));
        }
        Ok(())
    }
}

/// Running per-identity hit/total tallies plus removal bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    hits: Vec<u64>,
    totals: Vec<u64>,
    batch_counter: u64,
    removal_counter: usize,
    removed: BTreeSet<usize>,
}

impl PruneState {
    pub fn new(kappa: usize) -> Self {
        PruneState {
            hits: vec![0; kappa],
            totals: vec![0; kappa],
            batch_counter: 0,
            removal_counter: 0,
            removed: BTreeSet::new(),
        }
    }

    pub fn batch_counter(&self) -> u64 {
        self.batch_counter
    }

    pub fn removal_counter(&self) -> usize {
        self.removal_counter
    }

    pub fn removed(&self) -> &BTreeSet<usize> {
        &self.removed
    }

    pub fn is_active(&self, identity: usize) -> bool {
        !self.removed.contains(&identity)
    }

    /// Accuracy of an identity since the last reset; `None` when it has no
    /// observations.
    pub fn accuracy(&self, identity: usize) -> Option<f64> {
        if self.totals[identity] == 0 {
            None
        } else {
            Some(self.hits[identity] as f64 / self.totals[identity] as f64)
        }
    }

    pub fn tallies_are_zero(&self) -> bool {
        self.hits.iter().all(|h| *h == 0) && self.totals.iter().all(|t| *t == 0)
    }
}

/// One training batch as `(true identity, predicted identity)` pairs.
/// Removed identities must no longer appear as true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub pairs: Vec<(usize, usize)>,
}

/// Feeds one batch into the monitor. On eligible batch indices (at or past
/// the start batch, on an interval multiple, with removal budget left) the
/// extreme-accuracy identity is pruned, all tallies are reset to zero, and
/// the pruned identity is returned. Identities with no observations are
/// excluded from the extremum; ties break toward the lowest identity index.
pub fn observe_batch(
    state: &mut PruneState,
    batch: &StreamBatch,
    config: &PruneConfig,
) -> Result<Option<usize>> {
    config.validate()?;
    if batch.pairs.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    for &(true_id, _) in &batch.pairs {
        if true_id >= config.kappa {
            return Err(Error::Data(format!(
                "identity {true_id} out of range for kappa {}",
                config.kappa
            )));
        }
        if !state.is_active(true_id) {
            return Err(Error::Data(format!(
                "batch references removed identity {true_id}"
            )));
        }
    }

    state.batch_counter += 1;
    for &(true_id, pred_id) in &batch.pairs {
        state.totals[true_id] += 1;
        if true_id == pred_id {
            state.hits[true_id] += 1;
        }
    }

    let due = state.batch_counter >= config.start_batch
        && state.batch_counter % config.batch_interval == 0
        && state.removal_counter < config.max_removals;
    if !due {
        return Ok(None);
    }

    let mut extreme: Option<(usize, f64)> = None;
    for id in 0..config.kappa {
        if !state.is_active(id) {
            continue;
        }
        let Some(acc) = state.accuracy(id) else {
            continue;
        };
        let better = match (extreme, config.direction) {
            (None, _) => true,
            (Some((_, best)), PruneDirection::MaxAccuracy) => acc > best,
            (Some((_, best)), PruneDirection::MinAccuracy) => acc < best,
        };
        if better {
            extreme = Some((id, acc));
        }
    }
    let Some((pruned, _)) = extreme else {
        return Ok(None); // no identity observed since the last reset
    };

    state.removed.insert(pruned);
    state.hits.fill(0);
    state.totals.fill(0);
    state.removal_counter += 1;
    Ok(Some(pruned))
}

/// Supplies batches to the monitor; the source sees the removed set so it
/// can stop emitting pruned identities.
pub trait BatchSource {
    fn next_batch(&mut self, removed: &BTreeSet<usize>) -> Option<StreamBatch>;
}

/// Synthetic training stream with exponential learning curves: the
/// per-identity probability of a correct prediction at batch `t` is
/// `1 - exp(-t / tau)`, and the poisoned identity's `tau` is much smaller
/// than the benign one, modeling backdoors being learned faster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthStreamConfig {
    pub kappa: usize,
    pub batch_size: usize,
    pub total_batches: u64,
    pub tau_benign: f64,
    pub tau_poisoned: f64,
    pub poisoned_identity: usize,
    pub seed: u64,
}

impl Default for SynthStreamConfig {
    fn default() -> Self {
        SynthStreamConfig {
            kappa: 64,
            batch_size: 128,
            total_batches: 1000,
            tau_benign: 2000.0,
            tau_poisoned: 400.0,
            poisoned_identity: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthStream {
    config: SynthStreamConfig,
    batch_index: u64,
}

impl SynthStream {
    pub fn new(config: SynthStreamConfig) -> Result<Self> {
        if config.kappa < 2 || config.batch_size == 0 {
            return Err(Error::Domain(
                "synthetic stream needs at least two identities and a positive batch size".into(),
            ));
        }
        if config.poisoned_identity >= config.kappa {
            return Err(Error::Domain("poisoned identity out of range".into()));
        }
        if !(config.tau_benign > 0.0 && config.tau_poisoned > 0.0) {
            return Err(Error::Domain("learning-curve taus must be positive".into()));
        }
        Ok(SynthStream {
            config,
            batch_index: 0,
        })
    }

    fn tau(&self, identity: usize) -> f64 {
        if identity == self.config.poisoned_identity {
            self.config.tau_poisoned
        } else {
            self.config.tau_benign
        }
    }
}

impl BatchSource for SynthStream {
    fn next_batch(&mut self, removed: &BTreeSet<usize>) -> Option<StreamBatch> {
        if self.batch_index >= self.config.total_batches {
            return None;
        }
        self.batch_index += 1;
        let t = self.batch_index as f64;

        let active: Vec<usize> = (0..self.config.kappa)
            .filter(|id| !removed.contains(id))
            .collect();
        let mut rng = seeds::substream_indexed(self.config.seed, "stream", self.batch_index);
        let mut pairs = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let true_id = active[rng.gen_range(0..active.len())];
            let accuracy = 1.0 - (-t / self.tau(true_id)).exp();
            let pred_id = if rng.gen_bool(accuracy.clamp(0.0, 1.0)) || active.len() == 1 {
                true_id
            } else {
                // Uniform wrong prediction among the other active identities.
                let mut wrong = active[rng.gen_range(0..active.len() - 1)];
                if wrong == true_id {
                    wrong = active[active.len() - 1];
                }
                wrong
            };
            pairs.push((true_id, pred_id));
        }
        Some(StreamBatch { pairs })
    }
}

/// Replays a recorded stream. Pairs whose true identity has been pruned are
/// dropped (the monitor demands they stop appearing); batches left empty are
/// skipped entirely.
#[derive(Debug, Clone)]
pub struct ReplayStream {
    batches: std::vec::IntoIter<StreamBatch>,
}

impl ReplayStream {
    pub fn new(batches: Vec<StreamBatch>) -> Self {
        ReplayStream {
            batches: batches.into_iter(),
        }
    }

    /// Parses a line-delimited `batch,true_id,pred_id` file (header row
    /// optional); consecutive lines with the same batch index form a batch.
    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut batches: Vec<StreamBatch> = Vec::new();
        let mut current: Option<(u64, Vec<(usize, usize)>)> = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Data(format!("stream line {}: {e}", lineno + 1)))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || (lineno == 0 && trimmed.starts_with("batch")) {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Data(format!(
                    "stream line {}: expected `batch,true_id,pred_id`, got {trimmed:?}",
                    lineno + 1
                )));
            }
            let parse = |s: &str| -> Result<u64> {
                s.parse()
                    .map_err(|e| Error::Data(format!("stream line {}: {e}", lineno + 1)))
            };
            let batch = parse(fields[0])?;
            let true_id = parse(fields[1])? as usize;
            let pred_id = parse(fields[2])? as usize;
            match &mut current {
                Some((idx, pairs)) if *idx == batch => pairs.push((true_id, pred_id)),
                _ => {
                    if let Some((_, pairs)) = current.take() {
                        batches.push(StreamBatch { pairs });
                    }
                    current = Some((batch, vec![(true_id, pred_id)]));
                }
            }
        }
        if let Some((_, pairs)) = current {
            batches.push(StreamBatch { pairs });
        }
        Ok(ReplayStream::new(batches))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(file))
    }
}

impl BatchSource for ReplayStream {
    fn next_batch(&mut self, removed: &BTreeSet<usize>) -> Option<StreamBatch> {
        for batch in self.batches.by_ref() {
            let pairs: Vec<(usize, usize)> = batch
                .pairs
                .into_iter()
                .filter(|(true_id, _)| !removed.contains(true_id))
                .collect();
            if !pairs.is_empty() {
                return Some(StreamBatch { pairs });
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneEvent {
    pub batch_index: u64,
    pub identity: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DefenseReport {
    pub pruned: Vec<PruneEvent>,
    pub batches_processed: u64,
    /// Accuracy per identity since the last reset; removed or unobserved
    /// identities are `None`.
    pub final_accuracy: Vec<Option<f64>>,
}

/// Drives a batch source through the monitor to exhaustion.
pub fn run_defense(source: &mut dyn BatchSource, config: &PruneConfig) -> Result<DefenseReport> {
    config.validate()?;
    let mut state = PruneState::new(config.kappa);
    let mut pruned = Vec::new();
    while let Some(batch) = source.next_batch(&state.removed) {
        if let Some(identity) = observe_batch(&mut state, &batch, config)? {
            pruned.push(PruneEvent {
                batch_index: state.batch_counter(),
                identity,
            });
        }
    }
    let final_accuracy = (0..config.kappa)
        .map(|id| {
            if state.is_active(id) {
                state.accuracy(id)
            } else {
                None
            }
        })
        .collect();
    Ok(DefenseReport {
        pruned,
        batches_processed: state.batch_counter(),
        final_accuracy,
    })
}
