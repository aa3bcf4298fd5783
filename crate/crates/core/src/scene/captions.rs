//! Template captions with slot filling.
//!
//! Slots: `{t}` target class, `{o}` collided obstacle class, `{d}` destination kind.

use std::collections::BTreeMap;

use rand::Rng;

use super::layout::{Event, Outcome, Scene};
use crate::error::{Error, Result};

/// Words that only appear in collision descriptions.
pub const COLLISION_VERBS: [&str; 14] = [
    "hit", "collide", "bump", "knock", "push", "fall", "falls", "roll", "rolls", "rolling", "topple", "slide",
    "drop", "pushed",
];

pub const MIN_PARAPHRASES: usize = 3;

pub type Caption = Vec<String>;

#[derive(Clone, Debug)]
pub struct TemplateBank {
    families: BTreeMap<Event, Vec<&'static str>>,
}

impl Default for TemplateBank {
    fn default() -> Self {
        let mut families = BTreeMap::new();
        families.insert(
            Event::None,
            vec![
                "the {t} can be placed on the {d} safely because there is enough free space at that spot",
                "there is enough room on the {d} so the {t} will be put down without touching any object",
                "the robot will place the {t} on an empty area of the {d} and nothing will happen",
                "the {t} will be set down on the {d} in a free spot away from the other objects",
            ],
        );
        families.insert(
            Event::FallsOver,
            vec![
                "the {t} will hit the {o} on the {d} and the {o} will fall over",
                "when the {t} is placed on the {d} it will bump into the tall {o} and knock it over",
                "the held {t} will collide with the {o} since the spot is crowded and the {o} will topple",
                "placing the {t} there will make the {o} on the {d} fall over after the two objects touch",
            ],
        );
        families.insert(
            Event::Rolls,
            vec![
                "the {t} will hit the round {o} on the {d} and the {o} will roll away",
                "the held {t} will bump into the {o} and the {o} will start rolling across the {d}",
                "when the {t} is put down it will collide with the {o} which will roll on the {d}",
                "placing the {t} there will push the round {o} so that it rolls along the {d}",
            ],
        );
        families.insert(
            Event::FallsOff,
            vec![
                "the {t} will hit the {o} near the edge and the {o} will fall off the {d}",
                "the held {t} will push the {o} off the edge of the {d} and it will drop to the floor",
                "when the {t} is placed it will collide with the {o} and knock it off the {d}",
                "placing the {t} there will bump the {o} at the edge so it falls down from the {d}",
            ],
        );
        families.insert(
            Event::Pushed,
            vec![
                "the {t} will hit the {o} on the {d} and the {o} will be pushed aside",
                "the held {t} will collide with the {o} and slide it a little on the {d}",
                "when the {t} is placed on the {d} it will bump into the {o} and move it",
                "placing the {t} there will push the {o} on the {d} out of its position",
            ],
        );
        Self { families }
    }
}

impl TemplateBank {
    pub fn empty() -> Self {
        Self {
            families: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, event: Event, templates: Vec<&'static str>) {
        self.families.insert(event, templates);
    }

    pub fn family(&self, event: Event) -> Result<&[&'static str]> {
        let family = self
            .families
            .get(&event)
            .ok_or_else(|| Error::Config(format!("no caption templates for event `{}`", event.name())))?;
        if family.len() < MIN_PARAPHRASES {
            return Err(Error::Config(format!(
                "event `{}` has {} templates, need at least {MIN_PARAPHRASES}",
                event.name(),
                family.len()
            )));
        }
        Ok(family)
    }

    pub fn validate(&self) -> Result<()> {
        Event::ALL.iter().try_for_each(|&e| self.family(e).map(|_| ()))
    }
}

fn fill(template: &str, target: &str, obstacle: Option<&str>, dest: &str) -> Result<Caption> {
    template
        .split_whitespace()
        .map(|w| match w {
            "{t}" => Ok(target.to_string()),
            "{d}" => Ok(dest.to_string()),
            "{o}" => obstacle
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("template `{template}` needs an obstacle"))),
            other => Ok(other.to_string()),
        })
        .collect()
}

/// Returns `(caption_train, captions_eval)`: every paraphrase of the outcome's
/// family, and one of them drawn uniformly for training.
pub fn make_captions<R: Rng>(
    scene: &Scene,
    outcome: &Outcome,
    bank: &TemplateBank,
    rng: &mut R,
) -> Result<(Caption, Vec<Caption>)> {
    let family = bank.family(outcome.event)?;
    let obstacle = outcome
        .collided_obstacle
        .map(|i| {
            scene
                .obstacles
                .get(i)
                .map(|o| o.class.name())
                .ok_or_else(|| Error::Input(format!("collided obstacle {i} not in scene")))
        })
        .transpose()?;
    let eval = family
        .iter()
        .map(|t| fill(t, scene.target.name(), obstacle, scene.destination_kind.name()))
        .collect::<Result<Vec<_>>>()?;
    let pick = rng.random_range(0..eval.len());
    Ok((eval[pick].clone(), eval))
}
