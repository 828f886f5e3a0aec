//! Evaluation summaries and the files derived from them. Everything here is
//! a pure function of the episode summaries, so `report` can regenerate the
//! outputs byte for byte.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::homeworld::{FeedbackCategory, Split, TaskRecord};
use crate::planner::{plan_text, EpisodeResult};
use crate::refiner::Vocab;

/// Compact per-episode record; one line of `episodes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSummary {
    pub task_id: String,
    pub split: Split,
    pub exec: bool,
    pub success: bool,
    pub gcr: f64,
    pub inner_counts: Vec<usize>,
    pub env_interactions: usize,
    pub refiner_calls: usize,
    pub outcome: FeedbackCategory,
    pub final_plan: String,
}

impl EpisodeSummary {
    pub fn new(vocab: &Vocab, task: &TaskRecord, split: Split, episode: &EpisodeResult) -> Self {
        EpisodeSummary {
            task_id: episode.task_id.clone(),
            split,
            exec: episode.exec,
            success: episode.success,
            gcr: episode.gcr,
            inner_counts: episode.inner_counts.clone(),
            env_interactions: episode.env_interactions,
            refiner_calls: episode.refiner_calls,
            outcome: episode.outcome.category(),
            final_plan: plan_text(vocab, task, &episode.final_plan),
        }
    }
}

/// First line of `episodes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodesHeader {
    pub config_hash: String,
    pub seed: u64,
    pub feedback: String,
}

/// Percentages are in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub n_tasks: usize,
    pub exec: f64,
    pub sr: f64,
    pub gcr: f64,
    /// Over every inner loop of every episode.
    pub mean_inner_iterations: f64,
    pub std_inner_iterations: f64,
    pub mean_env_interactions: f64,
    pub mean_refiner_calls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub feedback: String,
    pub splits: Vec<SplitMetrics>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn split_metrics(split: Split, episodes: &[&EpisodeSummary]) -> SplitMetrics {
    let pct = |f: &dyn Fn(&EpisodeSummary) -> f64| 100.0 * mean(episodes.iter().map(|e| f(e)));
    let inner: Vec<f64> = episodes
        .iter()
        .flat_map(|e| e.inner_counts.iter().map(|&c| c as f64))
        .collect();
    let m = mean(inner.iter().copied());
    let var = mean(inner.iter().map(|x| (x - m).powi(2)));
    SplitMetrics {
        split,
        n_tasks: episodes.len(),
        exec: pct(&|e| f64::from(u8::from(e.exec))),
        sr: pct(&|e| f64::from(u8::from(e.success))),
        gcr: pct(&|e| e.gcr),
        mean_inner_iterations: m,
        std_inner_iterations: var.sqrt(),
        mean_env_interactions: mean(episodes.iter().map(|e| e.env_interactions as f64)),
        mean_refiner_calls: mean(episodes.iter().map(|e| e.refiner_calls as f64)),
    }
}

/// Splits appear in their canonical order; absent splits are omitted.
pub fn build_report(header: &EpisodesHeader, episodes: &[EpisodeSummary]) -> EvalReport {
    let splits = Split::ALL
        .into_iter()
        .filter_map(|s| {
            let these: Vec<&EpisodeSummary> = episodes.iter().filter(|e| e.split == s).collect();
            (!these.is_empty()).then(|| split_metrics(s, &these))
        })
        .collect();
    EvalReport {
        config_hash: header.config_hash.clone(),
        seed: header.seed,
        feedback: header.feedback.clone(),
        splits,
    }
}

pub fn render_report(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn render_scaling_csv(episodes: &[EpisodeSummary]) -> String {
    let mut s = String::from("task_id,split,refiner_calls,success\n");
    for e in episodes {
        s.push_str(&format!("{},{},{},{}\n", e.task_id, e.split.name(), e.refiner_calls, u8::from(e.success)));
    }
    s
}

pub fn write_episodes(out: &mut impl Write, header: &EpisodesHeader, episodes: &[EpisodeSummary]) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string(header).expect("header serializes"))?;
    for e in episodes {
        writeln!(out, "{}", serde_json::to_string(e).expect("summary serializes"))?;
    }
    Ok(())
}

pub fn read_episodes(input: impl BufRead) -> anyhow::Result<(EpisodesHeader, Vec<EpisodeSummary>)> {
    let mut lines = input.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(t) if t.trim().is_empty()));
    let (_, first) = lines.next().ok_or_else(|| anyhow::anyhow!("episodes file is empty"))?;
    let header: EpisodesHeader =
        serde_json::from_str(&first?).map_err(|e| anyhow::anyhow!("line 1: header: {e}"))?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let e = serde_json::from_str(&line?).map_err(|e| anyhow::anyhow!("line {}: {e}", i + 1))?;
        out.push(e);
    }
    Ok((header, out))
}
