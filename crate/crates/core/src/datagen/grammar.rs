use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AfnError, Result};

/// Global action label. The terminal label is `ActivityGrammar::end_label()`.
pub type ActionLabel = usize;

const ROW_TOL: f64 = 1e-9;

/// Parameters of the randomly generated grammar family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarConfig {
    pub activities: usize,
    pub actions_per_activity: usize,
    pub vocabulary: usize,
    pub duration_min: u32,
    pub duration_max: u32,
    /// Probability mass on the forward successor of each action.
    pub forward_min: f64,
    pub forward_max: f64,
    pub channel_groups: Vec<usize>,
    /// Index of the group that carries frame differences, if any.
    pub flow_group: Option<usize>,
    pub height: usize,
    pub width: usize,
    /// Scale of the per-activity background added to every frame.
    pub activity_gain: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            activities: 4,
            actions_per_activity: 8,
            vocabulary: 12,
            duration_min: 2,
            duration_max: 6,
            forward_min: 0.55,
            forward_max: 0.85,
            channel_groups: vec![3, 1, 1, 2],
            flow_group: Some(3),
            height: 8,
            width: 8,
            activity_gain: 1.0,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(AfnError::config(format!("grammar.{field}"), reason));
        if self.activities < 2 {
            return bad("activities", "need at least 2 activities");
        }
        if self.actions_per_activity < 2 {
            return bad("actions_per_activity", "need at least 2 actions per activity");
        }
        if self.vocabulary < self.actions_per_activity {
            return bad("vocabulary", "smaller than actions_per_activity");
        }
        if self.duration_min < 1 || self.duration_max < self.duration_min {
            return bad("duration_min", "need 1 <= duration_min <= duration_max");
        }
        if !(0.0 < self.forward_min && self.forward_min <= self.forward_max && self.forward_max <= 1.0) {
            return bad("forward_min", "need 0 < forward_min <= forward_max <= 1");
        }
        validate_layout(&self.channel_groups, self.flow_group, self.height, self.width)
    }
}

fn validate_layout(groups: &[usize], flow: Option<usize>, height: usize, width: usize) -> Result<()> {
    if groups.is_empty() || groups.contains(&0) {
        return Err(AfnError::config("grammar.channel_groups", "groups must be non-empty and positive"));
    }
    if flow.is_some_and(|f| f >= groups.len()) {
        return Err(AfnError::config("grammar.flow_group", "index out of range"));
    }
    if height == 0 || width == 0 {
        return Err(AfnError::config("grammar.height", "frame extents must be positive"));
    }
    Ok(())
}

/// Hand-specified grammar structure; prototypes are still drawn from a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    pub action_names: Vec<String>,
    pub activities: Vec<ActivitySpec>,
    pub channel_groups: Vec<usize>,
    pub flow_group: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub activity_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivitySpec {
    pub name: String,
    /// Global labels of the activity's actions, in local order.
    pub actions: Vec<ActionLabel>,
    pub start: Vec<f64>,
    /// Rows per local action, columns per local action plus END.
    pub transitions: Vec<Vec<f64>>,
    /// Inclusive integer-second bounds per local action.
    pub durations: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub name: String,
    pub actions: Vec<ActionLabel>,
    pub start: Vec<f64>,
    /// Square over local actions plus END; the END row is absorbing.
    pub transitions: Vec<Vec<f64>>,
    pub durations: Vec<(u32, u32)>,
}

impl Activity {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Local index of the terminal state.
    pub fn end_state(&self) -> usize {
        self.actions.len()
    }

    pub fn local_index(&self, label: ActionLabel) -> Option<usize> {
        self.actions.iter().position(|&a| a == label)
    }

    pub fn mean_duration(&self, local: usize) -> f64 {
        let (lo, hi) = self.durations[local];
        (lo + hi) as f64 / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityGrammar {
    pub action_names: Vec<String>,
    pub activities: Vec<Activity>,
    pub channel_groups: Vec<usize>,
    pub flow_group: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub activity_gain: f64,
    /// Per action label, one full frame (all channel groups, row-major).
    pub action_prototypes: Vec<Vec<f32>>,
    /// Per activity, one full frame of background.
    pub activity_prototypes: Vec<Vec<f32>>,
}

impl ActivityGrammar {
    pub fn num_actions(&self) -> usize {
        self.action_names.len()
    }

    /// Label used for "no further action" in next-action targets.
    pub fn end_label(&self) -> ActionLabel {
        self.action_names.len()
    }

    pub fn num_activities(&self) -> usize {
        self.activities.len()
    }

    pub fn channels(&self) -> usize {
        self.channel_groups.iter().sum()
    }

    pub fn frame_len(&self) -> usize {
        self.channels() * self.height * self.width
    }

    pub fn activity(&self, id: usize) -> Result<&Activity> {
        self.activities
            .get(id)
            .ok_or_else(|| AfnError::Lookup(format!("unknown activity {id}")))
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        validate_layout(&self.channel_groups, self.flow_group, self.height, self.width)?;
        let v = self.num_actions();
        if self.activities.is_empty() {
            return Err(AfnError::Grammar("no activities".into()));
        }
        for act in &self.activities {
            let m = act.len();
            let err = |msg: String| Err(AfnError::Grammar(format!("activity `{}`: {msg}", act.name)));
            if m == 0 {
                return err("has no actions".into());
            }
            if act.actions.iter().any(|&a| a >= v) {
                return err("action label outside vocabulary".into());
            }
            if act.start.len() != m || act.durations.len() != m {
                return err("start/duration length differs from action count".into());
            }
            if act.transitions.len() != m + 1 || act.transitions.iter().any(|r| r.len() != m + 1) {
                return err(format!("transition matrix must be {0}x{0}", m + 1));
            }
            if !is_distribution(&act.start) {
                return err("start distribution does not sum to 1".into());
            }
            for (k, row) in act.transitions.iter().enumerate() {
                if !is_distribution(row) {
                    return err(format!("transition row {k} does not sum to 1"));
                }
            }
            if act.transitions[m][m] != 1.0 {
                return err("END row is not absorbing".into());
            }
            if act.durations.iter().any(|&(lo, hi)| lo < 1 || hi < lo) {
                return err("duration bounds must satisfy 1 <= min <= max".into());
            }
            if !end_reachable(act) {
                return err("END is not reachable from every action".into());
            }
        }
        let len = self.frame_len();
        if self.action_prototypes.len() != v || self.action_prototypes.iter().any(|p| p.len() != len) {
            return Err(AfnError::Grammar("action prototypes have wrong dimensionality".into()));
        }
        if self.activity_prototypes.len() != self.activities.len()
            || self.activity_prototypes.iter().any(|p| p.len() != len)
        {
            return Err(AfnError::Grammar("activity prototypes have wrong dimensionality".into()));
        }
        Ok(())
    }

    pub fn from_spec(spec: GrammarSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame_len: usize = spec.channel_groups.iter().sum::<usize>() * spec.height * spec.width;
        let activities = spec
            .activities
            .into_iter()
            .map(|a| {
                let m = a.actions.len();
                let mut transitions = a.transitions;
                let mut end_row = vec![0.0; m + 1];
                end_row[m] = 1.0;
                transitions.push(end_row);
                Activity {
                    name: a.name,
                    actions: a.actions,
                    start: a.start,
                    transitions,
                    durations: a.durations,
                }
            })
            .collect::<Vec<_>>();
        let grammar = ActivityGrammar {
            action_prototypes: (0..spec.action_names.len())
                .map(|_| gaussian_frame(frame_len, &mut rng))
                .collect(),
            activity_prototypes: (0..activities.len())
                .map(|_| gaussian_frame(frame_len, &mut rng))
                .collect(),
            action_names: spec.action_names,
            activities,
            channel_groups: spec.channel_groups,
            flow_group: spec.flow_group,
            height: spec.height,
            width: spec.width,
            activity_gain: spec.activity_gain,
        };
        grammar.validate()?;
        Ok(grammar)
    }
}

fn is_distribution(row: &[f64]) -> bool {
    row.iter().all(|&p| p >= 0.0 && p.is_finite()) && (row.iter().sum::<f64>() - 1.0).abs() <= ROW_TOL
}

/// Backward reachability from END over positive-probability edges.
fn end_reachable(act: &Activity) -> bool {
    let n = act.len() + 1;
    let mut reach = vec![false; n];
    reach[n - 1] = true;
    loop {
        let mut changed = false;
        for k in 0..n {
            if !reach[k] && (0..n).any(|j| reach[j] && act.transitions[k][j] > 0.0) {
                reach[k] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    reach.iter().all(|&r| r)
}

fn gaussian_frame(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random grammar: each action moves forward with high probability and
/// otherwise jumps to a random other action (possibly backwards) or END.
/// The last action always ends the video.
pub fn generate_grammar(config: &GrammarConfig, seed: u64) -> Result<ActivityGrammar> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = config.actions_per_activity;
    let mut activities = Vec::with_capacity(config.activities);
    for j in 0..config.activities {
        let mut vocab: Vec<ActionLabel> = (0..config.vocabulary).collect();
        vocab.shuffle(&mut rng);
        vocab.truncate(m);
        let mut transitions = vec![vec![0.0; m + 1]; m + 1];
        for (k, row) in transitions.iter_mut().enumerate().take(m) {
            if k == m - 1 {
                row[m] = 1.0;
                continue;
            }
            let forward = rng.random_range(config.forward_min..=config.forward_max);
            row[k + 1] += forward;
            let alternatives: Vec<usize> = (0..=m).filter(|&x| x != k && x != k + 1).collect();
            let alt = alternatives[rng.random_range(0..alternatives.len())];
            row[alt] += 1.0 - forward;
        }
        transitions[m][m] = 1.0;
        let mut start = vec![0.0; m];
        start[0] = 1.0;
        activities.push(Activity {
            name: format!("activity_{j}"),
            actions: vocab,
            start,
            transitions,
            durations: vec![(config.duration_min, config.duration_max); m],
        });
    }
    let frame_len = config.channel_groups.iter().sum::<usize>() * config.height * config.width;
    let grammar = ActivityGrammar {
        action_names: (0..config.vocabulary).map(|a| format!("action_{a}")).collect(),
        action_prototypes: (0..config.vocabulary)
            .map(|_| gaussian_frame(frame_len, &mut rng))
            .collect(),
        activity_prototypes: (0..config.activities)
            .map(|_| gaussian_frame(frame_len, &mut rng))
            .collect(),
        activities,
        channel_groups: config.channel_groups.clone(),
        flow_group: config.flow_group,
        height: config.height,
        width: config.width,
        activity_gain: config.activity_gain,
    };
    grammar.validate()?;
    Ok(grammar)
}

/// Deterministic chains: activity `j` walks its own `actions` distinct
/// labels in order, each lasting `duration` seconds, then ends.
pub fn chain_grammar(activities: usize, actions: usize, duration: u32, seed: u64) -> Result<ActivityGrammar> {
    ActivityGrammar::from_spec(chain_spec(activities, actions, duration), seed)
}

/// Specification behind [`chain_grammar`], for callers that adjust the frame
/// layout before building.
pub fn chain_spec(activities: usize, actions: usize, duration: u32) -> GrammarSpec {
    let mut specs = Vec::with_capacity(activities);
    for j in 0..activities {
        specs.push(chain_activity(
            format!("chain_{j}"),
            (j * actions..(j + 1) * actions).collect(),
            vec![(duration, duration); actions],
        ));
    }
    GrammarSpec {
        action_names: (0..activities * actions).map(|a| format!("step_{a}")).collect(),
        activities: specs,
        channel_groups: vec![3, 1, 1, 2],
        flow_group: Some(3),
        height: 8,
        width: 8,
        activity_gain: 1.0,
    }
}

/// One activity visiting `actions` in order, then END.
pub fn chain_activity(name: String, actions: Vec<ActionLabel>, durations: Vec<(u32, u32)>) -> ActivitySpec {
    let m = actions.len();
    let mut start = vec![0.0; m];
    start[0] = 1.0;
    let transitions = (0..m)
        .map(|k| {
            let mut row = vec![0.0; m + 1];
            row[k + 1] = 1.0;
            row
        })
        .collect();
    ActivitySpec {
        name,
        actions,
        start,
        transitions,
        durations,
    }
}

/// Grammar whose next action depends on the action two steps back.
///
/// Each activity runs `lead_j → shared → tail_j → END`; the shared middle
/// action looks the same in every activity and backgrounds are disabled, so a
/// clip taken inside the middle action cannot tell which tail follows.
pub fn two_back_grammar(branches: usize, lead: (u32, u32), middle: (u32, u32), tail: (u32, u32), seed: u64) -> Result<ActivityGrammar> {
    ActivityGrammar::from_spec(two_back_spec(branches, lead, middle, tail), seed)
}

pub fn two_back_spec(branches: usize, lead: (u32, u32), middle: (u32, u32), tail: (u32, u32)) -> GrammarSpec {
    let shared = 2 * branches;
    let activities = (0..branches)
        .map(|j| chain_activity(format!("branch_{j}"), vec![j, shared, branches + j], vec![lead, middle, tail]))
        .collect();
    let mut action_names: Vec<String> = (0..branches).map(|j| format!("lead_{j}")).collect();
    action_names.extend((0..branches).map(|j| format!("tail_{j}")));
    action_names.push("shared".into());
    GrammarSpec {
        action_names,
        activities,
        channel_groups: vec![3, 1, 1, 2],
        flow_group: None,
        height: 8,
        width: 8,
        activity_gain: 0.0,
    }
}
