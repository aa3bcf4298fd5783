//! Fixed object catalogues: destination kinds, obstacle classes, target classes.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const GRID: usize = 16;
pub const MAX_HEIGHT: u8 = 4;

pub type Rgb = [f32; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DestinationKind {
    Desk,
    DiningTable,
    Shelf,
    KitchenCounter,
    CoffeeTable,
    Cabinet,
}

impl DestinationKind {
    pub const ALL: [DestinationKind; 6] = [
        DestinationKind::Desk,
        DestinationKind::DiningTable,
        DestinationKind::Shelf,
        DestinationKind::KitchenCounter,
        DestinationKind::CoffeeTable,
        DestinationKind::Cabinet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DestinationKind::Desk => "desk",
            DestinationKind::DiningTable => "dining_table",
            DestinationKind::Shelf => "shelf",
            DestinationKind::KitchenCounter => "kitchen_counter",
            DestinationKind::CoffeeTable => "coffee_table",
            DestinationKind::Cabinet => "cabinet",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    /// Surface colour of empty cells.
    pub fn color(self) -> Rgb {
        match self {
            DestinationKind::Desk => [0.0, 0.0, 0.125],
            DestinationKind::DiningTable => [0.0, 0.125, 0.0],
            DestinationKind::Shelf => [0.125, 0.0, 0.0],
            DestinationKind::KitchenCounter => [0.125, 0.125, 0.0],
            DestinationKind::CoffeeTable => [0.0, 0.125, 0.125],
            DestinationKind::Cabinet => [0.125, 0.0, 0.125],
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for DestinationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) struct ObstacleSpec {
    pub name: &'static str,
    pub round: bool,
    pub size: (usize, usize),
    pub height: (u8, u8),
}

const fn obst(name: &'static str, round: bool, size: (usize, usize), height: (u8, u8)) -> ObstacleSpec {
    ObstacleSpec { name, round, size, height }
}

pub(crate) const OBSTACLES: [ObstacleSpec; 25] = [
    obst("apple", true, (2, 2), (1, 1)),
    obst("ball", true, (2, 3), (1, 2)),
    obst("orange", true, (2, 2), (1, 1)),
    obst("can", true, (1, 2), (2, 3)),
    obst("glass", true, (1, 2), (2, 3)),
    obst("jar", true, (2, 2), (2, 3)),
    obst("mug", false, (2, 2), (1, 2)),
    obst("cup", false, (1, 2), (1, 2)),
    obst("bottle", false, (1, 2), (3, 4)),
    obst("vase", false, (2, 2), (3, 4)),
    obst("candle", false, (1, 1), (2, 3)),
    obst("lamp", false, (2, 3), (3, 4)),
    obst("book", false, (2, 4), (1, 1)),
    obst("box", false, (2, 4), (1, 3)),
    obst("toy_car", false, (2, 3), (1, 1)),
    obst("teddy_bear", false, (2, 3), (2, 3)),
    obst("rubiks_cube", false, (1, 2), (1, 2)),
    obst("plate", false, (3, 4), (1, 1)),
    obst("bowl", false, (2, 3), (1, 1)),
    obst("clock", false, (2, 2), (2, 3)),
    obst("phone", false, (1, 2), (1, 1)),
    obst("remote", false, (1, 2), (1, 1)),
    obst("sponge", false, (1, 2), (1, 1)),
    obst("banana", false, (2, 3), (1, 1)),
    obst("pen_stand", false, (1, 1), (2, 3)),
];

/// One of the 25 obstacle classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObstacleClass(u8);

impl ObstacleClass {
    pub const COUNT: usize = OBSTACLES.len();

    pub fn new(index: usize) -> Option<Self> {
        (index < Self::COUNT).then_some(Self(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        OBSTACLES[self.index()].name
    }

    pub fn is_round(self) -> bool {
        OBSTACLES[self.index()].round
    }

    pub(crate) fn spec(self) -> &'static ObstacleSpec {
        &OBSTACLES[self.index()]
    }

    pub fn color(self) -> Rgb {
        let i = self.index();
        let level = |v: usize| 0.25 * (v % 3 + 1) as f32;
        [level(i % 3), level((i / 3) % 3), level((i / 9) % 3)]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        OBSTACLES.iter().position(|s| s.name == name).map(|i| Self(i as u8))
    }

    pub fn all() -> impl Iterator<Item = ObstacleClass> {
        (0..Self::COUNT).map(|i| Self(i as u8))
    }
}

pub(crate) struct TargetSpec {
    pub name: &'static str,
    pub footprint: (usize, usize),
    pub height: u8,
}

const fn targ(name: &'static str, footprint: (usize, usize), height: u8) -> TargetSpec {
    TargetSpec { name, footprint, height }
}

pub(crate) const TARGETS: [TargetSpec; 14] = [
    targ("plastic_bottle", (2, 2), 4),
    targ("rubiks_cube", (2, 2), 2),
    targ("cup", (2, 2), 2),
    targ("can", (2, 2), 2),
    targ("book", (3, 2), 1),
    targ("box", (3, 3), 2),
    targ("apple", (2, 2), 1),
    targ("banana", (3, 2), 1),
    targ("toy_car", (3, 2), 1),
    targ("sponge", (2, 2), 1),
    targ("mug", (2, 2), 2),
    targ("ball", (2, 2), 2),
    targ("bowl", (3, 3), 1),
    targ("phone", (2, 3), 1),
];

/// One of the 14 target-object classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TargetClass(u8);

impl TargetClass {
    pub const COUNT: usize = TARGETS.len();

    pub fn new(index: usize) -> Option<Self> {
        (index < Self::COUNT).then_some(Self(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        TARGETS[self.index()].name
    }

    /// (rows, cols) occupied when placed.
    pub fn footprint(self) -> (usize, usize) {
        TARGETS[self.index()].footprint
    }

    pub fn height(self) -> u8 {
        TARGETS[self.index()].height
    }

    pub fn color(self) -> Rgb {
        let i = self.index();
        let level = |v: usize| 0.375 + 0.25 * (v % 3) as f32;
        [level(i % 3), level((i / 3) % 3), level((i / 9) % 3)]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        TARGETS.iter().position(|s| s.name == name).map(|i| Self(i as u8))
    }
}

macro_rules! serde_by_name {
    ($ty:ty, $what:literal) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let name = String::deserialize(d)?;
                <$ty>::from_name(&name)
                    .ok_or_else(|| serde::de::Error::custom(format!("unknown {} `{}`", $what, name)))
            }
        }
    };
}

serde_by_name!(DestinationKind, "destination kind");
serde_by_name!(ObstacleClass, "obstacle class");
serde_by_name!(TargetClass, "target class");
