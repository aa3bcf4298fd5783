//! Scene layout generation and the rule-based placement outcome.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{DestinationKind, ObstacleClass, TargetClass, GRID, MAX_HEIGHT};
use crate::error::{Error, Result};

/// Hard cap on obstacles per scene; the encoder pads to this length.
pub const MAX_OBSTACLES: usize = 8;

/// Axis-aligned cell rectangle covering rows `row..row+rows`, cols `col..col+cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub row: i32,
    pub col: i32,
    pub rows: i32,
    pub cols: i32,
}

impl CellRect {
    pub fn intersection_area(&self, other: &CellRect) -> i32 {
        let r0 = self.row.max(other.row);
        let r1 = (self.row + self.rows).min(other.row + other.rows);
        let c0 = self.col.max(other.col);
        let c1 = (self.col + self.cols).min(other.col + other.cols);
        (r1 - r0).max(0) * (c1 - c0).max(0)
    }

    pub fn overlaps(&self, other: &CellRect) -> bool {
        self.intersection_area(other) > 0
    }

    pub fn within_grid(&self) -> bool {
        self.row >= 0 && self.col >= 0 && self.row + self.rows <= GRID as i32 && self.col + self.cols <= GRID as i32
    }

    /// Cells of this rectangle that fall inside the grid.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let g = GRID as i32;
        (self.row.max(0)..(self.row + self.rows).min(g))
            .flat_map(move |r| (self.col.max(0)..(self.col + self.cols).min(g)).map(move |c| (r as usize, c as usize)))
    }

    pub fn area(&self) -> i32 {
        self.rows * self.cols
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traits {
    pub round: bool,
    pub tall: bool,
    pub near_edge: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Obstacle {
    pub class: ObstacleClass,
    pub footprint: CellRect,
    pub height: u8,
    pub traits: Traits,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub destination_kind: DestinationKind,
    /// Row-major GRID×GRID height field; 0 marks free surface.
    pub grid: Vec<u8>,
    pub obstacles: Vec<Obstacle>,
    pub target: TargetClass,
    pub placement_cell: (usize, usize),
    pub seed: u64,
}

impl Scene {
    /// Footprint of the target when centred on the placement cell.
    pub fn target_footprint(&self) -> CellRect {
        let (rows, cols) = self.target.footprint();
        let (r, c) = self.placement_cell;
        CellRect {
            row: r as i32 - (rows / 2) as i32,
            col: c as i32 - (cols / 2) as i32,
            rows: rows as i32,
            cols: cols as i32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    None,
    FallsOver,
    Rolls,
    FallsOff,
    Pushed,
}

impl Event {
    pub const ALL: [Event; 5] = [Event::None, Event::FallsOver, Event::Rolls, Event::FallsOff, Event::Pushed];

    pub fn name(self) -> &'static str {
        match self {
            Event::None => "none",
            Event::FallsOver => "falls_over",
            Event::Rolls => "rolls",
            Event::FallsOff => "falls_off",
            Event::Pushed => "pushed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub collided: bool,
    pub collided_obstacle: Option<usize>,
    pub event: Event,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_obstacles: usize,
    pub max_obstacles: usize,
    /// Placement attempts per scene before giving up.
    pub rejection_budget: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_obstacles: 1,
            max_obstacles: 5,
            rejection_budget: 2000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_obstacles == 0 || self.min_obstacles > self.max_obstacles || self.max_obstacles > MAX_OBSTACLES {
            return Err(Error::Config(format!(
                "obstacle range {}..={} must satisfy 1 <= min <= max <= {MAX_OBSTACLES}",
                self.min_obstacles, self.max_obstacles
            )));
        }
        Ok(())
    }
}

pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let destination_kind = DestinationKind::ALL[rng.random_range(0..DestinationKind::ALL.len())];
    let target = TargetClass::new(rng.random_range(0..TargetClass::COUNT)).unwrap();
    let count = rng.random_range(config.min_obstacles..=config.max_obstacles);

    let mut obstacles: Vec<Obstacle> = Vec::with_capacity(count);
    let mut attempts = 0;
    while obstacles.len() < count {
        attempts += 1;
        if attempts > config.rejection_budget {
            return Err(Error::Generation(format!(
                "placed {} of {count} obstacles before exhausting {} attempts (seed {seed})",
                obstacles.len(),
                config.rejection_budget
            )));
        }
        let class = ObstacleClass::new(rng.random_range(0..ObstacleClass::COUNT)).unwrap();
        let spec = class.spec();
        let rows = rng.random_range(spec.size.0..=spec.size.1) as i32;
        let cols = rng.random_range(spec.size.0..=spec.size.1) as i32;
        let height = rng.random_range(spec.height.0..=spec.height.1);
        let row = rng.random_range(0..=(GRID as i32 - rows));
        let col = rng.random_range(0..=(GRID as i32 - cols));
        let footprint = CellRect { row, col, rows, cols };
        if obstacles.iter().any(|o| o.footprint.overlaps(&footprint)) {
            continue;
        }
        let g = GRID as i32;
        let traits = Traits {
            round: class.is_round(),
            tall: height >= 3,
            near_edge: row == 0 || col == 0 || row + rows == g || col + cols == g,
        };
        obstacles.push(Obstacle { class, footprint, height, traits });
    }

    let mut grid = vec![0u8; GRID * GRID];
    for o in &obstacles {
        for (r, c) in o.footprint.cells() {
            grid[r * GRID + c] = o.height.min(MAX_HEIGHT);
        }
    }
    let placement_cell = (rng.random_range(0..GRID), rng.random_range(0..GRID));
    Ok(Scene {
        destination_kind,
        grid,
        obstacles,
        target,
        placement_cell,
        seed,
    })
}

/// Collision iff the centred target footprint meets an obstacle. The collided
/// obstacle is the one with the largest overlap (lowest index on ties); its
/// traits pick the event by priority near_edge > round > tall > pushed.
pub fn simulate_placement(scene: &Scene) -> Outcome {
    let footprint = scene.target_footprint();
    let mut best: Option<(usize, i32)> = None;
    for (i, o) in scene.obstacles.iter().enumerate() {
        let area = o.footprint.intersection_area(&footprint);
        if area > 0 && best.is_none_or(|(_, a)| area > a) {
            best = Some((i, area));
        }
    }
    match best {
        None => Outcome {
            collided: false,
            collided_obstacle: None,
            event: Event::None,
        },
        Some((i, _)) => {
            let t = scene.obstacles[i].traits;
            let event = if t.near_edge {
                Event::FallsOff
            } else if t.round {
                Event::Rolls
            } else if t.tall {
                Event::FallsOver
            } else {
                Event::Pushed
            };
            Outcome {
                collided: true,
                collided_obstacle: Some(i),
                event,
            }
        }
    }
}
