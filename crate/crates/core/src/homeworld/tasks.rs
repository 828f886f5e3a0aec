//! Goal templates and ground-truth plans.
//!
//! Ground truth is derived by regression over preconditions: each goal is
//! reduced to an achiever (`hold`, `put_in`, `switch_on`, ...) whose missing
//! preconditions are achieved first by further achievers, down to single
//! actions. Every emitted step is applied to a scratch copy of the scene, and
//! the finished plan is replayed and scored before a task is returned.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::Archetype;
use super::exec::{apply_step, FailReason};
use super::feedback::assess;
use super::goals::{evaluate_goals, GoalSpec};
use super::plan::{Action, Plan, Step};
use super::scene::{generate_scene, Location, SceneGraph, SizeClass};
use super::{Capability, HomeError, ObjectId, Relation, State};

/// Draws allowed before `generate_task` gives up.
pub const MAX_TEMPLATE_DRAWS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PlaceOn,
    PlaceIn,
    Gather,
    SwitchOn,
    WatchTv,
    Clean,
    PutAway,
    Heat,
    Read,
}

impl TaskKind {
    pub const ALL: [TaskKind; 9] = [
        TaskKind::PlaceOn,
        TaskKind::PlaceIn,
        TaskKind::Gather,
        TaskKind::SwitchOn,
        TaskKind::WatchTv,
        TaskKind::Clean,
        TaskKind::PutAway,
        TaskKind::Heat,
        TaskKind::Read,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PlaceOn => "place_on",
            TaskKind::PlaceIn => "place_in",
            TaskKind::Gather => "gather",
            TaskKind::SwitchOn => "switch_on",
            TaskKind::WatchTv => "watch_tv",
            TaskKind::Clean => "clean",
            TaskKind::PutAway => "put_away",
            TaskKind::Heat => "heat",
            TaskKind::Read => "read",
        }
    }

    /// Relative sampling weight of the template.
    fn weight(self) -> f64 {
        match self {
            TaskKind::PlaceOn => 0.5,
            TaskKind::PlaceIn => 1.0,
            TaskKind::Gather => 2.0,
            TaskKind::SwitchOn => 1.5,
            TaskKind::WatchTv => 1.0,
            TaskKind::Clean => 1.0,
            TaskKind::PutAway => 2.0,
            TaskKind::Heat => 1.5,
            TaskKind::Read => 1.0,
        }
    }
}

/// A goal-template family: the template kind plus the archetype that keys
/// it. Families are the unit held out for novel-task evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Family {
    pub kind: TaskKind,
    pub key: Archetype,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.key.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub scene_id: String,
    pub instruction: String,
    pub family: Family,
    /// Objects the instruction mentions, in mention order. Item lists come
    /// first and the target receptacle last; put-away tasks alternate
    /// item and home.
    pub args: Vec<ObjectId>,
    pub scene: SceneGraph,
    pub goals: GoalSpec,
    pub gt_plan: Plan,
}

type Built = Result<(), FailReason>;

/// Scratch executor that records every step it applies.
struct Builder {
    scene: SceneGraph,
    steps: Vec<Step>,
}

impl Builder {
    fn act(&mut self, action: Action, args: &[ObjectId]) -> Built {
        let step = Step::new(action, args);
        apply_step(&mut self.scene, &step)?;
        self.steps.push(step);
        Ok(())
    }

    fn is_close(&self, o: ObjectId) -> bool {
        let ch = self.scene.character();
        ch.close.contains(&o) || ch.holding.contains(&o)
    }

    fn stand(&mut self) -> Built {
        if self.scene.character().sitting_on.is_some() {
            self.act(Action::StandUp, &[])?;
        }
        Ok(())
    }

    fn reach(&mut self, o: ObjectId) -> Built {
        if !self.is_close(o) {
            self.stand()?;
            self.act(Action::Walk, &[o])?;
        }
        Ok(())
    }

    fn open(&mut self, o: ObjectId) -> Built {
        if self.scene.has_state(o, State::Closed) {
            self.reach(o)?;
            if self.scene.has_state(o, State::On) {
                self.act(Action::SwitchOff, &[o])?;
            }
            self.act(Action::Open, &[o])?;
        }
        Ok(())
    }

    fn shut(&mut self, o: ObjectId) -> Built {
        if self.scene.has_state(o, State::Open) {
            self.reach(o)?;
            self.act(Action::Close, &[o])?;
        }
        Ok(())
    }

    fn hold(&mut self, item: ObjectId) -> Built {
        if self.scene.character().holding.contains(&item) {
            return Ok(());
        }
        self.reach(item)?;
        if let Some(c) = self.scene.blocking_container(item) {
            self.open(c)?;
        }
        self.act(Action::Grab, &[item])
    }

    fn put_on(&mut self, item: ObjectId, surface: ObjectId) -> Built {
        self.hold(item)?;
        self.reach(surface)?;
        self.act(Action::PutBack, &[item, surface])
    }

    fn put_in(&mut self, item: ObjectId, container: ObjectId) -> Built {
        self.hold(item)?;
        self.reach(container)?;
        self.open(container)?;
        self.act(Action::PutIn, &[item, container])
    }

    fn put_home(&mut self, item: ObjectId) -> Built {
        let home = self
            .scene
            .object(item)
            .and_then(|o| o.home)
            .ok_or(FailReason::Incapable(item))?;
        self.hold(item)?;
        self.reach(home)?;
        self.open(home)?;
        self.act(Action::PutObjBack, &[item])
    }

    fn switch_on(&mut self, device: ObjectId) -> Built {
        if self.scene.has_state(device, State::On) {
            return Ok(());
        }
        self.reach(device)?;
        if self.scene.has_state(device, State::PluggedOut) {
            self.act(Action::PlugIn, &[device])?;
        }
        if self.scene.has_state(device, State::Open) {
            self.act(Action::Close, &[device])?;
        }
        self.act(Action::SwitchOn, &[device])
    }

    fn switch_off(&mut self, device: ObjectId) -> Built {
        if self.scene.has_state(device, State::On) {
            self.reach(device)?;
            self.act(Action::SwitchOff, &[device])?;
        }
        Ok(())
    }

    fn sit(&mut self, seat: ObjectId) -> Built {
        if self.scene.character().sitting_on == Some(seat) {
            return Ok(());
        }
        self.stand()?;
        self.reach(seat)?;
        self.act(Action::Sit, &[seat])
    }
}

/// One instantiated template before ground truth is derived.
struct Draft {
    family: Family,
    args: Vec<ObjectId>,
    instruction: String,
    goals: GoalSpec,
}

fn ids_where(scene: &SceneGraph, pred: impl Fn(&super::Object) -> bool) -> Vec<ObjectId> {
    scene.objects().filter(|o| pred(o)).map(|o| o.id).collect()
}

fn label(scene: &SceneGraph, id: ObjectId) -> String {
    format!("the {} ({id})", scene.name_of(id).unwrap_or("object").replace('_', " "))
}

fn list(scene: &SceneGraph, ids: &[ObjectId]) -> String {
    let names: Vec<String> = ids.iter().map(|&i| label(scene, i)).collect();
    match names.as_slice() {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn arch(scene: &SceneGraph, id: ObjectId) -> Archetype {
    scene.object(id).expect("candidate ids exist").archetype
}

fn resting_place(scene: &SceneGraph, host: ObjectId) -> Relation {
    if scene.object(host).is_some_and(|o| o.has(Capability::Container)) {
        Relation::Inside
    } else {
        Relation::OnTop
    }
}

fn instantiate(kind: TaskKind, scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let ch = scene.character().id;
    let items = ids_where(scene, |o| o.archetype.is_item());
    let by_arch = |a: Archetype| ids_where(scene, |o| o.archetype == a);
    let family = |key| Family { kind, key };
    match kind {
        TaskKind::PlaceOn | TaskKind::Gather => {
            let surfaces = ids_where(scene, |o| !o.archetype.is_item() && o.has(Capability::Surface));
            let &s = surfaces.choose(rng)?;
            let free: Vec<ObjectId> = items
                .iter()
                .copied()
                .filter(|&i| scene.object(i).expect("item").location != Location::OnTop(s))
                .collect();
            let n = if kind == TaskKind::PlaceOn { 1 } else { rng.gen_range(2..=4) };
            if free.len() < n {
                return None;
            }
            let chosen: Vec<ObjectId> = free.choose_multiple(rng, n).copied().collect();
            let instruction = if n == 1 {
                format!("Put {} on {}.", label(scene, chosen[0]), label(scene, s))
            } else {
                format!("Gather {} on {}.", list(scene, &chosen), label(scene, s))
            };
            let mut args = chosen.clone();
            args.push(s);
            Some(Draft {
                family: family(arch(scene, s)),
                args,
                instruction,
                goals: GoalSpec {
                    states: vec![],
                    relations: chosen.iter().map(|&i| (i, Relation::OnTop, s)).collect(),
                },
            })
        }
        TaskKind::PlaceIn => {
            let containers =
                ids_where(scene, |o| !o.archetype.is_item() && o.has(Capability::Container));
            let &c = containers.choose(rng)?;
            let free: Vec<ObjectId> = items
                .iter()
                .copied()
                .filter(|&i| scene.object(i).expect("item").location != Location::Inside(c))
                .collect();
            let &item = free.choose(rng)?;
            let close_after = arch(scene, c).has(Capability::CanOpen) && rng.gen_bool(0.5);
            let mut goals = GoalSpec {
                states: vec![],
                relations: vec![(item, Relation::Inside, c)],
            };
            let mut instruction = format!("Put {} in {}", label(scene, item), label(scene, c));
            if close_after {
                goals.states.push((c, State::Closed));
                instruction.push_str(" and close it");
            }
            instruction.push('.');
            Some(Draft {
                family: family(arch(scene, c)),
                args: vec![item, c],
                instruction,
                goals,
            })
        }
        TaskKind::SwitchOn => {
            let devices = ids_where(scene, |o| {
                o.has(Capability::HasSwitch) && o.archetype != Archetype::Sink && o.is(State::Off)
            });
            let n = rng.gen_range(2..=3).min(devices.len());
            if n == 0 {
                return None;
            }
            let chosen: Vec<ObjectId> = devices.choose_multiple(rng, n).copied().collect();
            Some(Draft {
                family: family(arch(scene, chosen[0])),
                instruction: format!("Turn on {}.", list(scene, &chosen)),
                goals: GoalSpec {
                    states: chosen.iter().map(|&d| (d, State::On)).collect(),
                    relations: vec![],
                },
                args: chosen,
            })
        }
        TaskKind::WatchTv => {
            let &tv = by_arch(Archetype::Tv).choose(rng)?;
            let seats = ids_where(scene, |o| o.has(Capability::Sittable));
            let &seat = seats.choose(rng)?;
            if scene.has_state(tv, State::On) {
                return None;
            }
            Some(Draft {
                family: family(arch(scene, seat)),
                args: vec![tv, seat],
                instruction: format!("Watch {} while sitting on {}.", label(scene, tv), label(scene, seat)),
                goals: GoalSpec {
                    states: vec![(tv, State::On), (ch, State::Sitting)],
                    relations: vec![(ch, Relation::OnTop, seat)],
                },
            })
        }
        TaskKind::Clean => {
            let dirty = ids_where(scene, |o| o.is(State::Dirty));
            let &item = dirty.choose(rng)?;
            let &sink = by_arch(Archetype::Sink).choose(rng)?;
            let surfaces = ids_where(scene, |o| !o.archetype.is_item() && o.has(Capability::Surface));
            let &dry = surfaces.choose(rng)?;
            Some(Draft {
                family: family(arch(scene, item)),
                args: vec![item, sink, dry],
                instruction: format!(
                    "Wash {} in {} and put it on {}.",
                    label(scene, item),
                    label(scene, sink),
                    label(scene, dry)
                ),
                goals: GoalSpec {
                    states: vec![(item, State::Clean), (sink, State::Off)],
                    relations: vec![(item, Relation::OnTop, dry)],
                },
            })
        }
        TaskKind::PutAway => {
            let away: Vec<ObjectId> = items
                .iter()
                .copied()
                .filter(|&i| {
                    let o = scene.object(i).expect("item");
                    o.home.is_some() && scene.receptacle(i) != o.home
                })
                .collect();
            let n = rng.gen_range(2..=3).min(away.len());
            if n == 0 {
                return None;
            }
            let chosen: Vec<ObjectId> = away.choose_multiple(rng, n).copied().collect();
            let mut relations = Vec::new();
            let mut args = Vec::new();
            let mut parts = Vec::new();
            for &i in &chosen {
                let home = scene.object(i).and_then(|o| o.home).expect("filtered");
                let rel = resting_place(scene, home);
                let prep = if rel == Relation::Inside { "in" } else { "on" };
                relations.push((i, rel, home));
                args.extend([i, home]);
                parts.push(format!("{} back {prep} {}", label(scene, i), label(scene, home)));
            }
            Some(Draft {
                family: family(arch(scene, chosen[0])),
                instruction: format!("Put {}.", parts.join(" and ")),
                goals: GoalSpec {
                    states: vec![],
                    relations,
                },
                args,
            })
        }
        TaskKind::Heat => {
            let food = ids_where(scene, |o| o.archetype.spec().heatable);
            let &f = food.choose(rng)?;
            let &mw = by_arch(Archetype::Microwave).choose(rng)?;
            Some(Draft {
                family: family(arch(scene, f)),
                args: vec![f, mw],
                instruction: format!("Heat {} in {}.", label(scene, f), label(scene, mw)),
                goals: GoalSpec {
                    states: vec![(mw, State::On)],
                    relations: vec![(f, Relation::Inside, mw)],
                },
            })
        }
        TaskKind::Read => {
            let &book = by_arch(Archetype::Book).choose(rng)?;
            let seats = ids_where(scene, |o| o.has(Capability::Sittable));
            let &seat = seats.choose(rng)?;
            Some(Draft {
                family: family(arch(scene, seat)),
                args: vec![book, seat],
                instruction: format!("Read {} while sitting on {}.", label(scene, book), label(scene, seat)),
                goals: GoalSpec {
                    states: vec![(ch, State::Sitting)],
                    relations: vec![(ch, Relation::Holds, book), (ch, Relation::OnTop, seat)],
                },
            })
        }
    }
}

/// Achieves the goals of a template instance from `scene`, goal by goal.
/// `args` follows the layout of [`TaskRecord::args`] for `kind`.
pub fn ground_truth(
    kind: TaskKind,
    args: &[ObjectId],
    goals: &GoalSpec,
    scene: &SceneGraph,
) -> Result<Plan, FailReason> {
    let mut b = Builder {
        scene: scene.clone(),
        steps: Vec::new(),
    };
    match kind {
        TaskKind::PlaceOn | TaskKind::Gather => {
            let (&s, items) = args.split_last().expect("surface last");
            for &i in items {
                b.put_on(i, s)?;
            }
        }
        TaskKind::PlaceIn => {
            b.put_in(args[0], args[1])?;
            if goals.states.contains(&(args[1], State::Closed)) {
                b.shut(args[1])?;
            }
        }
        TaskKind::SwitchOn => {
            for &d in args {
                b.switch_on(d)?;
            }
        }
        TaskKind::WatchTv => {
            b.switch_on(args[0])?;
            b.sit(args[1])?;
        }
        TaskKind::Clean => {
            b.put_in(args[0], args[1])?;
            b.switch_on(args[1])?;
            b.switch_off(args[1])?;
            b.put_on(args[0], args[2])?;
        }
        TaskKind::PutAway => {
            for pair in args.chunks(2) {
                b.put_home(pair[0])?;
            }
        }
        TaskKind::Heat => {
            b.put_in(args[0], args[1])?;
            b.switch_on(args[1])?;
        }
        TaskKind::Read => {
            b.hold(args[0])?;
            b.sit(args[1])?;
        }
    }
    Ok(Plan::new(b.steps))
}

/// Samples a template, instantiates it in `scene` and derives a verified
/// ground-truth plan. Task and scene ids are left for the caller to fill.
pub fn generate_task(scene: &SceneGraph, seed: u64) -> Result<TaskRecord, HomeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A5C);
    let weights: Vec<f64> = TaskKind::ALL.iter().map(|k| k.weight()).collect();
    let dist = rand::distributions::WeightedIndex::new(&weights).expect("positive weights");
    for _ in 0..MAX_TEMPLATE_DRAWS {
        let kind = TaskKind::ALL[rng.sample(&dist)];
        let Some(draft) = instantiate(kind, scene, &mut rng) else {
            continue;
        };
        let initial = evaluate_goals(scene, &draft.goals)?;
        if initial.complete() {
            continue;
        }
        let Ok(plan) = ground_truth(kind, &draft.args, &draft.goals, scene) else {
            continue;
        };
        let scored = assess(scene, &draft.goals, &Ok(plan.clone()), false)?;
        if !scored.success {
            continue;
        }
        return Ok(TaskRecord {
            task_id: String::new(),
            scene_id: String::new(),
            instruction: draft.instruction,
            family: draft.family,
            args: draft.args,
            scene: scene.clone(),
            goals: draft.goals,
            gt_plan: plan,
        });
    }
    Err(HomeError::NoAchievableTask {
        draws: MAX_TEMPLATE_DRAWS,
    })
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

/// Generates `n_tasks` tasks spread round-robin over `n_scenes` scenes.
/// Goal sets repeated within a scene are redrawn.
pub fn generate_tasks(
    n_tasks: usize,
    n_scenes: usize,
    size: SizeClass,
    seed: u64,
) -> Result<Vec<TaskRecord>, HomeError> {
    if n_scenes == 0 {
        return Err(HomeError::InsufficientDiversity {
            what: "scenes",
            needed: 1,
            found: 0,
        });
    }
    let scenes: Vec<SceneGraph> = (0..n_scenes)
        .map(|i| generate_scene(scene_seed(seed, i), size))
        .collect();
    let mut seen: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n_scenes];
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut draw: u64 = 0;
    for t in 0..n_tasks {
        let s = t % n_scenes;
        let mut accepted = None;
        for _ in 0..MAX_TEMPLATE_DRAWS {
            draw += 1;
            let task_seed = scene_seed(seed ^ 0xA11CE, draw as usize);
            let task = generate_task(&scenes[s], task_seed)?;
            let key = serde_json::to_string(&task.goals).expect("goals serialize");
            if seen[s].insert(key) {
                accepted = Some(task);
                break;
            }
        }
        let mut task = accepted.ok_or(HomeError::NoAchievableTask {
            draws: MAX_TEMPLATE_DRAWS,
        })?;
        task.task_id = format!("task-{t:05}");
        task.scene_id = format!("scene-{s:03}");
        tasks.push(task);
    }
    Ok(tasks)
}
