//! Append-only buffer of equilibrium plans with recency-weighted sampling.
//!
//! A record from training iteration `k` is drawn with weight `0.5^(T−k)`
//! when sampling at iteration `T`, with replacement.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::homeworld::Feedback;
use crate::planner::{ContextEntry, ContextHistory, FeedbackSource};
use crate::refiner::{Token, Vocab};

pub const DECAY: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("the buffer is empty")]
    Empty,
    #[error("record iteration {got} is older than the newest record's {newest}")]
    IterationOrder { got: usize, newest: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquilibriumRecord {
    pub id: u64,
    pub task_id: String,
    /// The equilibrium plan x*.
    pub plan: Vec<Token>,
    /// Context that accompanies x* as refiner input, newest first; its
    /// first entry is the feedback on x* itself.
    pub context: ContextHistory,
    pub feedback: Feedback,
    pub source: FeedbackSource,
    /// Training iteration k that produced the record.
    pub iteration: usize,
}

/// Fields of a record before an id is assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewRecord {
    pub task_id: String,
    pub plan: Vec<Token>,
    pub context: ContextHistory,
    pub feedback: Feedback,
    pub source: FeedbackSource,
    pub iteration: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EquilibriumMemory {
    records: Vec<Arc<EquilibriumRecord>>,
}

impl EquilibriumMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends and returns the new record's id. Ids are insertion indices.
    pub fn append(&mut self, record: NewRecord) -> Result<u64, MemoryError> {
        if let Some(last) = self.records.last() {
            if record.iteration < last.iteration {
                return Err(MemoryError::IterationOrder {
                    got: record.iteration,
                    newest: last.iteration,
                });
            }
        }
        let id = self.records.len() as u64;
        self.records.push(Arc::new(EquilibriumRecord {
            id,
            task_id: record.task_id,
            plan: record.plan,
            context: record.context,
            feedback: record.feedback,
            source: record.source,
            iteration: record.iteration,
        }));
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Option<&EquilibriumRecord> {
        self.records.get(usize::try_from(id).ok()?).map(Arc::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = &EquilibriumRecord> {
        self.records.iter().map(Arc::as_ref)
    }

    /// Normalized draw probability of each record at iteration `current`.
    pub fn selection_probabilities(&self, current: usize) -> Vec<f64> {
        let w: Vec<f64> = self.records.iter().map(|r| weight(current, r.iteration)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    /// Draws `batch` records with replacement; deterministic per seed.
    pub fn sample_batch(&self, batch: usize, current: usize, seed: u64) -> Result<Vec<&EquilibriumRecord>, MemoryError> {
        if self.records.is_empty() {
            return Err(MemoryError::Empty);
        }
        let weights: Vec<f64> = self.records.iter().map(|r| weight(current, r.iteration)).collect();
        let dist = WeightedIndex::new(&weights).expect("positive finite weights");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..batch).map(|_| self.records[dist.sample(&mut rng)].as_ref()).collect())
    }

    /// One JSON line per record; plans as token names.
    pub fn save(&self, out: &mut impl Write, vocab: &Vocab) -> Result<(), MemoryError> {
        for r in &self.records {
            let line = RecordLine::from_record(r, vocab);
            writeln!(out, "{}", serde_json::to_string(&line).expect("records serialize"))?;
        }
        Ok(())
    }

    pub fn load(input: impl BufRead, vocab: &Vocab) -> Result<Self, MemoryError> {
        let mut memory = Self::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |message: String| MemoryError::Parse { line: i + 1, message };
            let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
            if parsed.id != memory.len() as u64 {
                return Err(parse("record ids must be consecutive from 0".into()));
            }
            let record = parsed.into_new(vocab).map_err(parse)?;
            memory.append(record)?;
        }
        Ok(memory)
    }
}

fn weight(current: usize, k: usize) -> f64 {
    DECAY.powi(current as i32 - k as i32)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryLine {
    plan: String,
    feedback: Feedback,
    source: FeedbackSource,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: u64,
    task_id: String,
    iteration: usize,
    source: FeedbackSource,
    plan: String,
    feedback: Feedback,
    context: Vec<EntryLine>,
}

impl RecordLine {
    fn from_record(r: &EquilibriumRecord, vocab: &Vocab) -> Self {
        RecordLine {
            id: r.id,
            task_id: r.task_id.clone(),
            iteration: r.iteration,
            source: r.source,
            plan: vocab.render(&r.plan),
            feedback: r.feedback.clone(),
            context: r
                .context
                .entries()
                .iter()
                .map(|e| EntryLine {
                    plan: vocab.render(&e.plan),
                    feedback: e.feedback.clone(),
                    source: e.source,
                })
                .collect(),
        }
    }

    fn into_new(self, vocab: &Vocab) -> Result<NewRecord, String> {
        let mut context = ContextHistory::new();
        for e in self.context.into_iter().rev() {
            context = context.prepended(ContextEntry {
                plan: vocab.parse(&e.plan)?,
                feedback: e.feedback,
                source: e.source,
            });
        }
        Ok(NewRecord {
            task_id: self.task_id,
            plan: vocab.parse(&self.plan)?,
            context,
            feedback: self.feedback,
            source: self.source,
            iteration: self.iteration,
        })
    }
}

#[cfg(test)]
mod tests;
