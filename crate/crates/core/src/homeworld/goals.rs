use serde::{Deserialize, Serialize};

use super::scene::{Edge, SceneGraph};
use super::{HomeError, ObjectId, State};

/// Hidden goal conditions of a task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    pub states: Vec<(ObjectId, State)>,
    pub relations: Vec<Edge>,
}

impl GoalSpec {
    pub fn total(&self) -> usize {
        self.states.len() + self.relations.len()
    }

    /// Every id the goals mention, in first-mention order.
    pub fn ids(&self) -> Vec<ObjectId> {
        let mut ids = Vec::new();
        let mut push = |id| {
            if !ids.contains(&id) {
                ids.push(id);
            }
        };
        for &(o, _) in &self.states {
            push(o);
        }
        for &(a, _, b) in &self.relations {
            push(a);
            push(b);
        }
        ids
    }

    /// Checks the goal is nonempty and resolves in `scene`.
    pub fn validate(&self, scene: &SceneGraph) -> Result<(), HomeError> {
        if self.total() == 0 {
            return Err(HomeError::EmptyGoal);
        }
        match self.ids().into_iter().find(|&id| !scene.contains(id)) {
            Some(id) => Err(HomeError::DanglingGoal(id)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalEvaluation {
    pub achieved: usize,
    pub total: usize,
    pub gcr: f64,
    pub unmet_states: Vec<(ObjectId, State)>,
    pub wrong_relations: Vec<Edge>,
}

impl GoalEvaluation {
    pub fn complete(&self) -> bool {
        self.achieved == self.total
    }
}

pub fn evaluate_goals(scene: &SceneGraph, goals: &GoalSpec) -> Result<GoalEvaluation, HomeError> {
    goals.validate(scene)?;
    let unmet_states: Vec<_> = goals
        .states
        .iter()
        .copied()
        .filter(|&(o, s)| !scene.has_state(o, s))
        .collect();
    let wrong_relations: Vec<_> = goals
        .relations
        .iter()
        .copied()
        .filter(|&e| !scene.has_edge(e))
        .collect();
    let total = goals.total();
    let achieved = total - unmet_states.len() - wrong_relations.len();
    Ok(GoalEvaluation {
        achieved,
        total,
        gcr: achieved as f64 / total as f64,
        unmet_states,
        wrong_relations,
    })
}
