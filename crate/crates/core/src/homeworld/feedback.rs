use serde::{Deserialize, Serialize};

use super::exec::{execute_plan, FailReason};
use super::goals::{evaluate_goals, GoalSpec};
use super::plan::{Action, Plan, Step};
use super::scene::{Edge, SceneGraph};
use super::{HomeError, ObjectId, State};

/// Environment response to one plan; exactly one category.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "category")]
pub enum Feedback {
    Format,
    InvalidCommand {
        line: String,
    },
    ExecutionError {
        /// Zero-based index of the failing step.
        step: usize,
        action: Action,
        args: Vec<ObjectId>,
        reason: FailReason,
    },
    GoalReport {
        unmet_states: Vec<(ObjectId, State)>,
        wrong_relations: Vec<Edge>,
    },
    Success,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackCategory {
    Format,
    InvalidCommand,
    ExecutionError,
    GoalReport,
    Success,
}

impl FeedbackCategory {
    pub const ALL: [FeedbackCategory; 5] = [
        FeedbackCategory::Format,
        FeedbackCategory::InvalidCommand,
        FeedbackCategory::ExecutionError,
        FeedbackCategory::GoalReport,
        FeedbackCategory::Success,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeedbackCategory::Format => "format",
            FeedbackCategory::InvalidCommand => "invalid_command",
            FeedbackCategory::ExecutionError => "execution_error",
            FeedbackCategory::GoalReport => "goal_report",
            FeedbackCategory::Success => "success",
        }
    }
}

fn named(scene: &SceneGraph, id: ObjectId) -> String {
    format!("({id}, {})", scene.name_of(id).unwrap_or("unknown"))
}

fn reason_text(scene: &SceneGraph, reason: &FailReason) -> String {
    let n = |id| named(scene, id);
    match *reason {
        FailReason::NotClose(o) => format!("the character is not close to {}", n(o)),
        FailReason::HandsFull => "hands full".to_string(),
        FailReason::NotHolding(o) => format!("the character is not holding {}", n(o)),
        FailReason::Incapable(o) => format!("{} does not support this action", n(o)),
        FailReason::Blocked(c) => format!("the object is inside {}, which is closed", n(c)),
        FailReason::WrongState(o, s) => format!("{} is {}", n(o), s.name()),
        FailReason::Sitting => "the character is sitting".to_string(),
        FailReason::NotSitting => "the character is not sitting".to_string(),
        FailReason::AlreadyHeld(o) => format!("{} is already held", n(o)),
        FailReason::NotInRoom(o) => format!("{} is not in the character's room", n(o)),
        FailReason::UnknownObject(o) => format!("object {o} does not exist"),
    }
}

impl Feedback {
    pub fn category(&self) -> FeedbackCategory {
        match self {
            Feedback::Format => FeedbackCategory::Format,
            Feedback::InvalidCommand { .. } => FeedbackCategory::InvalidCommand,
            Feedback::ExecutionError { .. } => FeedbackCategory::ExecutionError,
            Feedback::GoalReport { .. } => FeedbackCategory::GoalReport,
            Feedback::Success => FeedbackCategory::Success,
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, Feedback::Success)
    }

    /// Canonical message text with names resolved in `scene`.
    pub fn render(&self, scene: &SceneGraph) -> String {
        match self {
            Feedback::Format => "Your output does not conform to the required format.".to_string(),
            Feedback::InvalidCommand { line } => {
                format!("Your output has an invalid command: {line}")
            }
            Feedback::ExecutionError {
                step,
                action,
                args,
                reason,
            } => {
                let line = Step {
                    action: *action,
                    args: args.clone(),
                }
                .render(scene);
                format!(
                    "Your output is executed incorrectly in the environment.\nStep {}: {line} failed because {}.",
                    step + 1,
                    reason_text(scene, reason)
                )
            }
            Feedback::GoalReport {
                unmet_states,
                wrong_relations,
            } => {
                let mut text = "You have not completed this task.".to_string();
                if !unmet_states.is_empty() {
                    let items: Vec<String> = unmet_states
                        .iter()
                        .map(|&(o, s)| format!("{} is not {}", named(scene, o), s.name()))
                        .collect();
                    text.push_str(
                        "\nThe following objects and corresponding states do not meet the goals: ",
                    );
                    text.push_str(&items.join("; "));
                    text.push('.');
                }
                if !wrong_relations.is_empty() {
                    let items: Vec<String> = wrong_relations
                        .iter()
                        .map(|&(a, _, b)| format!("{} and {}", named(scene, a), named(scene, b)))
                        .collect();
                    text.push_str("\nThe following objects have wrong relative position: ");
                    text.push_str(&items.join("; "));
                    text.push('.');
                }
                text
            }
            Feedback::Success => "You have completed this task.".to_string(),
        }
    }
}

/// Scored outcome of one plan against a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub feedback: Feedback,
    /// The plan parsed and every step executed.
    pub exec: bool,
    /// Executed and every goal condition holds.
    pub success: bool,
    /// Goal-condition recall on the state the plan left behind.
    pub gcr: f64,
    pub executed_steps: usize,
}

/// Maps a parse result to feedback and metrics.
///
/// Parse failures score GCR on the initial scene. An execution failure
/// scores GCR on the partially executed scene; with `truncate_illegal` the
/// failing step and everything after it are dropped, so the executed prefix
/// counts as a complete execution. Feedback is never truncated.
pub fn assess(
    scene: &SceneGraph,
    goals: &GoalSpec,
    parsed: &Result<Plan, Feedback>,
    truncate_illegal: bool,
) -> Result<Assessment, HomeError> {
    let plan = match parsed {
        Ok(plan) => plan,
        Err(feedback) => {
            let eval = evaluate_goals(scene, goals)?;
            return Ok(Assessment {
                feedback: feedback.clone(),
                exec: false,
                success: false,
                gcr: eval.gcr,
                executed_steps: 0,
            });
        }
    };
    let run = execute_plan(scene, plan);
    let eval = evaluate_goals(&run.final_scene, goals)?;
    let exec = run.completed() || truncate_illegal;
    let feedback = match run.failure {
        Some((index, reason)) => {
            let step = &plan.steps[index];
            Feedback::ExecutionError {
                step: index,
                action: step.action,
                args: step.args.clone(),
                reason,
            }
        }
        None if eval.complete() => Feedback::Success,
        None => Feedback::GoalReport {
            unmet_states: eval.unmet_states.clone(),
            wrong_relations: eval.wrong_relations.clone(),
        },
    };
    Ok(Assessment {
        feedback,
        exec,
        success: exec && eval.complete(),
        gcr: eval.gcr,
        executed_steps: run.executed,
    })
}
