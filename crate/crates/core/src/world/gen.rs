use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Cell, CellInfo, Scene, SemanticObject, HALLWAY, MAX_SIDE, MIN_SIDE, NUM_CATEGORIES,
    NUM_ROOM_TYPES,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub rooms: usize,
    /// Smallest room side, in cells.
    pub min_room: usize,
    pub num_objects: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 24,
            height: 24,
            rooms: 6,
            min_room: 3,
            num_objects: NUM_CATEGORIES,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let side = MIN_SIDE..=MAX_SIDE;
        if !side.contains(&self.width) || !side.contains(&self.height) {
            return Err(Error::Config(format!(
                "scene size {}x{} outside [{MIN_SIDE}, {MAX_SIDE}]",
                self.width, self.height
            )));
        }
        if self.rooms == 0 {
            return Err(Error::Config("rooms must be at least 1".into()));
        }
        if self.min_room < 2 {
            return Err(Error::Config("min_room must be at least 2".into()));
        }
        if self.num_objects == 0 {
            return Err(Error::Config("num_objects must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: i32,
    y0: i32,
    w: i32,
    h: i32,
}

/// A wall line produced by one split, in need of a door.
#[derive(Debug, Clone, Copy)]
struct Split {
    vertical: bool,
    coord: i32,
    from: i32,
    to: i32,
}

/// Recursive rectangular room splitting with one door per split wall.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (params.width as i32, params.height as i32);
    let min = params.min_room as i32;

    let mut open = vec![false; params.width * params.height];
    let idx = |x: i32, y: i32| (y * w + x) as usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            open[idx(x, y)] = true;
        }
    }

    let mut leaves = vec![Rect {
        x0: 1,
        y0: 1,
        w: w - 2,
        h: h - 2,
    }];
    let mut splits = Vec::new();
    while leaves.len() < params.rooms {
        // Split the largest leaf that can still hold two rooms.
        let candidate = leaves
            .iter()
            .enumerate()
            .filter(|(_, r)| r.w >= 2 * min + 1 || r.h >= 2 * min + 1)
            .max_by_key(|(i, r)| (r.w * r.h, std::cmp::Reverse(*i)))
            .map(|(i, _)| i);
        let Some(i) = candidate else {
            return Err(Error::Config(format!(
                "cannot fit {} rooms of side {} in {}x{}",
                params.rooms, params.min_room, params.width, params.height
            )));
        };
        let r = leaves[i];
        let can_v = r.w >= 2 * min + 1;
        let can_h = r.h >= 2 * min + 1;
        let vertical = match (can_v, can_h) {
            (true, false) => true,
            (false, true) => false,
            _ if r.w != r.h => r.w > r.h,
            _ => rng.random_bool(0.5),
        };
        let span = if vertical { r.w } else { r.h };
        let k = rng.random_range(min..=span - min - 1);
        if vertical {
            let x = r.x0 + k;
            for y in r.y0..r.y0 + r.h {
                open[idx(x, y)] = false;
            }
            splits.push(Split {
                vertical,
                coord: x,
                from: r.y0,
                to: r.y0 + r.h,
            });
            leaves[i] = Rect { w: k, ..r };
            leaves.push(Rect {
                x0: x + 1,
                w: r.w - k - 1,
                ..r
            });
        } else {
            let y = r.y0 + k;
            for x in r.x0..r.x0 + r.w {
                open[idx(x, y)] = false;
            }
            splits.push(Split {
                vertical,
                coord: y,
                from: r.x0,
                to: r.x0 + r.w,
            });
            leaves[i] = Rect { h: k, ..r };
            leaves.push(Rect {
                y0: y + 1,
                h: r.h - k - 1,
                ..r
            });
        }
    }

    // Room labels: the most elongated room becomes the hallway.
    let hallway = leaves
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            let ra = a.w.max(a.h) as f64 / a.w.min(a.h) as f64;
            let rb = b.w.max(b.h) as f64 / b.w.min(b.h) as f64;
            ra.total_cmp(&rb).then(j.cmp(i))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut labels = vec![-1i8; params.width * params.height];
    for (i, r) in leaves.iter().enumerate() {
        let label = if i == hallway {
            HALLWAY
        } else {
            rng.random_range(1..NUM_ROOM_TYPES) as i8
        };
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                labels[idx(x, y)] = label;
            }
        }
    }

    let mut doors = Vec::new();
    for s in &splits {
        let mut options = Vec::new();
        for t in s.from..s.to {
            let (a, b) = if s.vertical {
                ((s.coord - 1, t), (s.coord + 1, t))
            } else {
                ((t, s.coord - 1), (t, s.coord + 1))
            };
            if open[idx(a.0, a.1)] && open[idx(b.0, b.1)] {
                options.push((t, a));
            }
        }
        let Some(&(t, side)) = options.choose(&mut rng) else {
            return Err(Error::Config("no room for a door".into()));
        };
        doors.push((s.vertical, s.coord, t, side));
    }
    for (vertical, coord, t, side) in doors {
        let (x, y) = if vertical { (coord, t) } else { (t, coord) };
        open[idx(x, y)] = true;
        labels[idx(x, y)] = labels[idx(side.0, side.1)];
    }

    let cells: Vec<CellInfo> = open
        .iter()
        .zip(&labels)
        .map(|(&o, &l)| if o { CellInfo::open(l) } else { CellInfo::WALL })
        .collect();

    // Objects go on room cells that are not doorways.
    let mut free: Vec<Cell> = Vec::new();
    for r in &leaves {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                free.push(Cell::new(x, y));
            }
        }
    }
    free.sort();
    if free.len() < params.num_objects {
        return Err(Error::Config(format!(
            "{} objects do not fit in {} free cells",
            params.num_objects,
            free.len()
        )));
    }
    free.shuffle(&mut rng);
    let mut categories: Vec<usize> = (0..NUM_CATEGORIES).collect();
    categories.shuffle(&mut rng);
    let objects = free
        .iter()
        .take(params.num_objects)
        .enumerate()
        .map(|(id, &cell)| SemanticObject {
            id,
            category: categories[id % NUM_CATEGORIES],
            cell,
            is_sound_source: true,
        })
        .collect();

    Scene::new(params.width, params.height, cells, objects, seed)
}
