//! The three link-prediction tasks: ground-truth label extraction from
//! channel responses, and the fixed instruction/answer templates.

use crate::channel::ChannelResponse;
use crate::error::{Error, Result};
use crate::scene::Episode;
use crate::seeded;
use rand::Rng;

/// Link availability boundary; the comparison is inclusive.
pub const AVAILABILITY_THRESHOLD_DBM: f64 = -80.0;
/// Blockage-risk lookahead in frames.
pub const BLOCKAGE_HORIZON: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskKind {
    LosNlos,
    LinkAvailability,
    BlockageRisk,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::LosNlos,
        TaskKind::LinkAvailability,
        TaskKind::BlockageRisk,
    ];

    pub fn index(self) -> usize {
        match self {
            TaskKind::LosNlos => 0,
            TaskKind::LinkAvailability => 1,
            TaskKind::BlockageRisk => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::LosNlos => "los_nlos",
            TaskKind::LinkAvailability => "link_availability",
            TaskKind::BlockageRisk => "blockage_risk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "los_nlos" => Ok(TaskKind::LosNlos),
            "link_availability" => Ok(TaskKind::LinkAvailability),
            "blockage_risk" => Ok(TaskKind::BlockageRisk),
            other => Err(Error::validation(format!("unknown task '{other}'"))),
        }
    }
}

/// Per-frame ground truth. A label is absent when its precondition fails:
/// availability needs finite received power, blockage risk needs a currently
/// clear link and a full lookahead horizon inside the episode.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    pub episode_id: u64,
    pub t: usize,
    pub los_clear: bool,
    pub rx_power_dbm: f64,
    pub labels: [Option<bool>; 3],
}

impl LabeledFrame {
    pub fn label(&self, task: TaskKind) -> Option<bool> {
        self.labels[task.index()]
    }
}

/// Derive all task labels from per-frame channel responses.
pub fn extract_labels(episode: &Episode, responses: &[ChannelResponse]) -> Vec<LabeledFrame> {
    assert_eq!(
        episode.frames.len(),
        responses.len(),
        "need one response per frame"
    );
    let clear: Vec<bool> = responses.iter().map(|r| r.los_clear).collect();
    let n = clear.len();
    (0..n)
        .map(|t| {
            let r = &responses[t];
            let availability = if r.rx_power_dbm.is_finite() {
                Some(r.rx_power_dbm >= AVAILABILITY_THRESHOLD_DBM)
            } else {
                None
            };
            let blockage = if clear[t] && t + BLOCKAGE_HORIZON < n {
                Some((1..=BLOCKAGE_HORIZON).any(|k| !clear[t + k]))
            } else {
                None
            };
            LabeledFrame {
                episode_id: episode.episode_id,
                t,
                los_clear: clear[t],
                rx_power_dbm: r.rx_power_dbm,
                labels: [Some(clear[t]), availability, blockage],
            }
        })
        .collect()
}

const LOS_TEMPLATES: [&str; 3] = [
    "Is the link between the ego vehicle and the RSU line-of-sight?",
    "Is the path to the RSU clear?",
    "Is the communication path line-of-sight now?",
];

const AVAILABILITY_TEMPLATES: [&str; 3] = [
    "Is the communication link available at the required signal strength?",
    "Is the received signal strength sufficient for the link?",
    "Is the link to the RSU available now?",
];

const BLOCKAGE_TEMPLATES: [&str; 3] = [
    "Is the communication link likely to be blocked in the next 3 time steps?",
    "Will the path to the RSU be blocked within the next 3 time steps?",
    "Is blockage of the link expected in the next 3 time steps?",
];

pub fn instruction_templates(task: TaskKind) -> &'static [&'static str] {
    match task {
        TaskKind::LosNlos => &LOS_TEMPLATES,
        TaskKind::LinkAvailability => &AVAILABILITY_TEMPLATES,
        TaskKind::BlockageRisk => &BLOCKAGE_TEMPLATES,
    }
}

/// Sample one paraphrase template for a task.
pub fn render_instruction(task: TaskKind, seed: u64) -> &'static str {
    let templates = instruction_templates(task);
    let mut rng = seeded::stream(seed, "instruction", &[task.index() as u64]);
    templates[rng.gen_range(0..templates.len())]
}

/// Recover the task from instruction text via keyword rules.
pub fn parse_instruction(text: &str) -> Result<TaskKind> {
    let lower = text.to_lowercase();
    let has = |w: &str| {
        lower
            .split(|c: char| !c.is_ascii_alphanumeric())
            .any(|tok| tok == w)
    };
    if has("next") {
        Ok(TaskKind::BlockageRisk)
    } else if has("available") || has("strength") || has("sufficient") {
        Ok(TaskKind::LinkAvailability)
    } else if has("sight") || has("clear") {
        Ok(TaskKind::LosNlos)
    } else {
        Err(Error::validation(format!(
            "instruction matches no task: '{text}'"
        )))
    }
}

/// Fixed per-task answer phrasings; `parse_answer` is the exact inverse.
pub fn render_answer(task: TaskKind, label: bool) -> &'static str {
    match (task, label) {
        (TaskKind::LosNlos, true) => "Yes, the link is line-of-sight.",
        (TaskKind::LosNlos, false) => "No, the link is blocked.",
        (TaskKind::LinkAvailability, true) => "Yes, the link is available.",
        (TaskKind::LinkAvailability, false) => "No, the link is unavailable.",
        (TaskKind::BlockageRisk, true) => {
            "Yes, the link is likely to be blocked within 3 time steps."
        }
        (TaskKind::BlockageRisk, false) => {
            "No, the link is not expected to be blocked within 3 time steps."
        }
    }
}

/// Invert a rendered answer. Unknown strings are a hard error: they signal
/// template drift between the renderer and a stored dataset.
pub fn parse_answer(text: &str) -> Result<bool> {
    for task in TaskKind::ALL {
        for label in [false, true] {
            if render_answer(task, label) == text {
                return Ok(label);
            }
        }
    }
    Err(Error::format(format!("unknown answer template: '{text}'")))
}
