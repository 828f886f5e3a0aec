//! Train/test splits over (scene, family) and the JSONL dataset format.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::goals::GoalSpec;
use super::plan::{parse_plan, render_plan};
use super::scene::SceneGraph;
use super::tasks::{Family, TaskKind, TaskRecord};
use super::HomeError;

pub const MIN_SCENES: usize = 4;
pub const MIN_FAMILIES: usize = 8;

/// Fraction of scenes held out for the novel-scene subsets.
const HELD_SCENE_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    NovelScene,
    NovelTask,
    NovelBoth,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::NovelScene, Split::NovelTask, Split::NovelBoth];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::NovelScene => "novel_scene",
            Split::NovelTask => "novel_task",
            Split::NovelBoth => "novel_both",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

/// Split label per task plus the held-out scenes and families.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub labels: Vec<Split>,
    pub held_scenes: BTreeSet<String>,
    pub held_families: BTreeSet<Family>,
}

impl SplitAssignment {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == split)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.labels.iter().filter(|&&s| s == split).count()
    }
}

fn label(scene_held: bool, family_held: bool) -> Split {
    match (scene_held, family_held) {
        (false, false) => Split::Train,
        (true, false) => Split::NovelScene,
        (false, true) => Split::NovelTask,
        (true, true) => Split::NovelBoth,
    }
}

/// Holds out whole scenes and whole families.
///
/// About 30% of scenes are held out. Families are then visited in shuffled
/// order and held out whenever that moves the train count closer to half of
/// all tasks, keeping at least one seen family per template kind.
pub fn split_dataset(tasks: &[TaskRecord], seed: u64) -> Result<SplitAssignment, HomeError> {
    let scenes: BTreeSet<&str> = tasks.iter().map(|t| t.scene_id.as_str()).collect();
    if scenes.len() < MIN_SCENES {
        return Err(HomeError::InsufficientDiversity {
            what: "scenes",
            needed: MIN_SCENES,
            found: scenes.len(),
        });
    }
    let families: BTreeSet<Family> = tasks.iter().map(|t| t.family).collect();
    if families.len() < MIN_FAMILIES {
        return Err(HomeError::InsufficientDiversity {
            what: "template families",
            needed: MIN_FAMILIES,
            found: families.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5B11);
    let mut scene_order: Vec<&str> = scenes.into_iter().collect();
    scene_order.shuffle(&mut rng);
    let n_held = ((scene_order.len() as f64 * HELD_SCENE_FRACTION).round() as usize)
        .clamp(1, scene_order.len() - 1);
    let held_scenes: BTreeSet<String> = scene_order[..n_held].iter().map(|s| s.to_string()).collect();

    // Tasks on seen scenes, per family: the train mass a family carries.
    let mut seen_mass: BTreeMap<Family, usize> = BTreeMap::new();
    for t in tasks.iter().filter(|t| !held_scenes.contains(&t.scene_id)) {
        *seen_mass.entry(t.family).or_default() += 1;
    }
    let mut family_order: Vec<Family> = families.iter().copied().collect();
    family_order.shuffle(&mut rng);
    let mut seen_per_kind: BTreeMap<TaskKind, usize> = BTreeMap::new();
    for f in &family_order {
        *seen_per_kind.entry(f.kind).or_default() += 1;
    }
    let target = tasks.len() as f64 / 2.0;
    let mut train: usize = seen_mass.values().sum();
    let mut held_families = BTreeSet::new();
    let mut held_with_mass = 0;
    for f in family_order {
        let mass = seen_mass.get(&f).copied().unwrap_or(0);
        if mass == 0 {
            // Never trained on, so it can only be novel.
            held_families.insert(f);
            continue;
        }
        let closer = ((train - mass) as f64 - target).abs() < (train as f64 - target).abs();
        let keeps_kind = seen_per_kind[&f.kind] > 1;
        if (closer || held_with_mass == 0) && keeps_kind && mass < train {
            held_families.insert(f);
            held_with_mass += 1;
            train -= mass;
            *seen_per_kind.get_mut(&f.kind).expect("counted") -= 1;
        }
    }
    if held_with_mass == 0 {
        return Err(HomeError::InsufficientDiversity {
            what: "families per template kind",
            needed: 2,
            found: 1,
        });
    }
    let labels = tasks
        .iter()
        .map(|t| label(held_scenes.contains(&t.scene_id), held_families.contains(&t.family)))
        .collect();
    Ok(SplitAssignment {
        labels,
        held_scenes,
        held_families,
    })
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub task_id: String,
    pub scene_id: String,
    pub split: Split,
    pub instruction: String,
    pub family: Family,
    pub args: Vec<u32>,
    pub scene: SceneGraph,
    pub goals: GoalSpec,
    /// Canonical step lines without the closing `[END]`.
    pub gt_plan: Vec<String>,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetRecord {
    pub fn from_task(task: &TaskRecord, split: Split, config_hash: &str, seed: u64) -> Self {
        let text = render_plan(&task.gt_plan, &task.scene);
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines.pop();
        DatasetRecord {
            task_id: task.task_id.clone(),
            scene_id: task.scene_id.clone(),
            split,
            instruction: task.instruction.clone(),
            family: task.family,
            args: task.args.clone(),
            scene: task.scene.clone(),
            goals: task.goals.clone(),
            gt_plan: lines,
            config_hash: config_hash.to_string(),
            seed,
        }
    }

    pub fn into_task(self) -> Result<(TaskRecord, Split), String> {
        let mut text = self.gt_plan.join("\n");
        text.push_str("\n[END]");
        let gt_plan = parse_plan(&text, &self.scene)
            .map_err(|f| format!("ground-truth plan does not parse: {f:?}"))?;
        self.goals.validate(&self.scene).map_err(|e| e.to_string())?;
        Ok((
            TaskRecord {
                task_id: self.task_id,
                scene_id: self.scene_id,
                instruction: self.instruction,
                family: self.family,
                args: self.args,
                scene: self.scene,
                goals: self.goals,
                gt_plan,
            },
            self.split,
        ))
    }
}

pub fn write_dataset(
    out: &mut impl Write,
    tasks: &[TaskRecord],
    splits: &SplitAssignment,
    config_hash: &str,
    seed: u64,
) -> Result<(), HomeError> {
    for (task, &split) in tasks.iter().zip(&splits.labels) {
        let record = DatasetRecord::from_task(task, split, config_hash, seed);
        let line = serde_json::to_string(&record).expect("records serialize");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<Vec<(TaskRecord, Split)>, HomeError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| HomeError::Dataset {
            line: i + 1,
            message: e.to_string(),
        })?;
        let task = record
            .into_task()
            .map_err(|message| HomeError::Dataset { line: i + 1, message })?;
        out.push(task);
    }
    Ok(out)
}
