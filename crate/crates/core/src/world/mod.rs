//! Grid scenes, agent kinematics, geodesics and the synthetic sensors.

mod gen;
mod nav;
mod render;

pub use gen::{generate_scene, SceneParams};
pub use nav::{geodesic_distance, shortest_action_path, step, ActionField, DistanceField};
pub use render::{
    render_audio, render_visual, AudioParams, AudioSignal, SoundSource, VISUAL_CHANNELS,
    VISUAL_LEN, VISUAL_WINDOW,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of semantic object categories.
pub const NUM_CATEGORIES: usize = 21;

pub const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = [
    "chair", "table", "picture", "cabinet", "cushion", "sofa", "bed", "dresser", "plant", "sink",
    "toilet", "stool", "towel", "tv", "shower", "bathtub", "counter", "fireplace", "treadmill",
    "bench", "clothes",
];

/// Room label 0 is always the hallway.
pub const NUM_ROOM_TYPES: usize = 8;

pub const ROOM_NAMES: [&str; NUM_ROOM_TYPES] = [
    "hallway", "kitchen", "bedroom", "bathroom", "lounge", "office", "study", "pantry",
];

pub const HALLWAY: i8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    pub fn manhattan(self, other: Cell) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

/// Compass heading. North is towards decreasing `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    pub fn right(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    pub fn left(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    /// Unit grid step along this heading.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub x: i32,
    pub y: i32,
    pub heading: Heading,
}

impl Pose {
    pub const fn new(x: i32, y: i32, heading: Heading) -> Self {
        Self { x, y, heading }
    }

    pub fn cell(&self) -> Cell {
        Cell::new(self.x, self.y)
    }

    pub fn ahead(&self) -> Cell {
        let (dx, dy) = self.heading.delta();
        self.cell().offset(dx, dy)
    }
}

/// Primitive navigation actions, in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Stop,
    MoveForward,
    TurnRight,
    TurnLeft,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [
        Action::Stop,
        Action::MoveForward,
        Action::TurnRight,
        Action::TurnLeft,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn short(self) -> &'static str {
        match self {
            Action::Stop => "S",
            Action::MoveForward => "F",
            Action::TurnRight => "R",
            Action::TurnLeft => "L",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellInfo {
    pub navigable: bool,
    /// Room type index, or -1 for walls.
    pub room_label: i8,
}

impl CellInfo {
    pub const WALL: CellInfo = CellInfo {
        navigable: false,
        room_label: -1,
    };

    pub fn open(room_label: i8) -> Self {
        Self {
            navigable: true,
            room_label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticObject {
    pub id: usize,
    pub category: usize,
    pub cell: Cell,
    pub is_sound_source: bool,
}

/// The navigable world: an occupancy grid with room labels and objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<CellInfo>,
    pub objects: Vec<SemanticObject>,
    pub seed: u64,
    object_at: Vec<Option<usize>>,
}

pub const MIN_SIDE: usize = 8;
pub const MAX_SIDE: usize = 64;
pub const SCENE_SCHEMA: u32 = 1;

impl Scene {
    /// Builds a scene and validates every invariant.
    pub fn new(
        width: usize,
        height: usize,
        cells: Vec<CellInfo>,
        objects: Vec<SemanticObject>,
        seed: u64,
    ) -> Result<Self> {
        if !(MIN_SIDE..=MAX_SIDE).contains(&width) || !(MIN_SIDE..=MAX_SIDE).contains(&height) {
            return Err(Error::Input(format!(
                "scene size {width}x{height} outside [{MIN_SIDE}, {MAX_SIDE}]"
            )));
        }
        if cells.len() != width * height {
            return Err(Error::Input("cell count does not match scene size".into()));
        }
        let mut scene = Self {
            width,
            height,
            cells,
            objects,
            seed,
            object_at: vec![None; width * height],
        };
        for (i, obj) in scene.objects.iter().enumerate() {
            if obj.category >= NUM_CATEGORIES {
                return Err(Error::Input(format!("object {} has bad category", obj.id)));
            }
            if !scene.is_navigable(obj.cell) {
                return Err(Error::Input(format!("object {} on a blocked cell", obj.id)));
            }
            let idx = scene.index(obj.cell);
            if scene.object_at[idx].is_some() {
                return Err(Error::Input(format!("two objects share cell {:?}", obj.cell)));
            }
            scene.object_at[idx] = Some(i);
        }
        if !scene.is_connected() {
            return Err(Error::Input("navigable cells are not connected".into()));
        }
        Ok(scene)
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y as usize * self.width + c.x as usize
    }

    pub fn cell_at(&self, idx: usize) -> Cell {
        Cell::new((idx % self.width) as i32, (idx / self.width) as i32)
    }

    pub fn info(&self, c: Cell) -> CellInfo {
        if self.in_bounds(c) {
            self.cells[self.index(c)]
        } else {
            CellInfo::WALL
        }
    }

    pub fn is_navigable(&self, c: Cell) -> bool {
        self.info(c).navigable
    }

    pub fn room_label(&self, c: Cell) -> i8 {
        self.info(c).room_label
    }

    pub fn object_at(&self, c: Cell) -> Option<&SemanticObject> {
        if !self.in_bounds(c) {
            return None;
        }
        self.object_at[self.index(c)].map(|i| &self.objects[i])
    }

    pub fn object(&self, id: usize) -> Option<&SemanticObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn navigable_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.cells.len())
            .filter(|&i| self.cells[i].navigable)
            .map(|i| self.cell_at(i))
    }

    pub fn navigable_count(&self) -> usize {
        self.cells.iter().filter(|c| c.navigable).count()
    }

    fn is_connected(&self) -> bool {
        let Some(start) = self.navigable_cells().next() else {
            return false;
        };
        let field = DistanceField::from_cell(self, start);
        self.navigable_cells().all(|c| field.get(c).is_some())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&SceneDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SceneDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectDoc {
    id: usize,
    category: usize,
    x: i32,
    y: i32,
}

/// On-disk scene layout.
#[derive(Debug, Serialize, Deserialize)]
struct SceneDoc {
    schema: u32,
    width: usize,
    height: usize,
    cells: Vec<i8>,
    objects: Vec<ObjectDoc>,
    seed: u64,
}

impl From<&Scene> for SceneDoc {
    fn from(s: &Scene) -> Self {
        SceneDoc {
            schema: SCENE_SCHEMA,
            width: s.width,
            height: s.height,
            cells: s.cells.iter().map(|c| c.room_label).collect(),
            objects: s
                .objects
                .iter()
                .map(|o| ObjectDoc {
                    id: o.id,
                    category: o.category,
                    x: o.cell.x,
                    y: o.cell.y,
                })
                .collect(),
            seed: s.seed,
        }
    }
}

impl TryFrom<SceneDoc> for Scene {
    type Error = Error;

    fn try_from(doc: SceneDoc) -> Result<Self> {
        if doc.schema != SCENE_SCHEMA {
            return Err(Error::Input(format!("unsupported scene schema {}", doc.schema)));
        }
        let mut cells = Vec::with_capacity(doc.cells.len());
        for label in doc.cells {
            if label < 0 {
                cells.push(CellInfo::WALL);
            } else if (label as usize) < NUM_ROOM_TYPES {
                cells.push(CellInfo::open(label));
            } else {
                return Err(Error::Input(format!("room label {label} out of range")));
            }
        }
        let objects = doc
            .objects
            .into_iter()
            .map(|o| SemanticObject {
                id: o.id,
                category: o.category,
                cell: Cell::new(o.x, o.y),
                is_sound_source: true,
            })
            .collect();
        Scene::new(doc.width, doc.height, cells, objects, doc.seed)
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Parses an ASCII map: `#` wall, `.` hallway, digits room labels,
    /// lowercase letters objects (`a` = category 0) standing in the hallway.
    pub fn scene_from_ascii(rows: &[&str]) -> Scene {
        let height = rows.len();
        let width = rows[0].len();
        let mut cells = Vec::new();
        let mut objects = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), width);
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '#' => cells.push(CellInfo::WALL),
                    '.' => cells.push(CellInfo::open(HALLWAY)),
                    '0'..='7' => cells.push(CellInfo::open(ch as i8 - b'0' as i8)),
                    'a'..='u' => {
                        cells.push(CellInfo::open(HALLWAY));
                        objects.push(SemanticObject {
                            id: objects.len(),
                            category: (ch as u8 - b'a') as usize,
                            cell: Cell::new(x as i32, y as i32),
                            is_sound_source: true,
                        });
                    }
                    _ => panic!("bad map char {ch}"),
                }
            }
        }
        Scene::new(width, height, cells, objects, 0).expect("valid test scene")
    }
}
