use std::collections::VecDeque;

use super::{Action, Cell, Heading, Pose, Scene};
use crate::error::{Error, Result};

const UNREACHED: u32 = u32::MAX;

/// Applies one primitive action. Blocked forward moves leave the pose as is.
pub fn step(scene: &Scene, pose: Pose, action: Action) -> Pose {
    match action {
        Action::Stop => pose,
        Action::TurnRight => Pose {
            heading: pose.heading.right(),
            ..pose
        },
        Action::TurnLeft => Pose {
            heading: pose.heading.left(),
            ..pose
        },
        Action::MoveForward => {
            let next = pose.ahead();
            if scene.is_navigable(next) {
                Pose {
                    x: next.x,
                    y: next.y,
                    ..pose
                }
            } else {
                pose
            }
        }
    }
}

/// Breadth-first geodesic distances from one cell over the 4-connected grid.
#[derive(Debug, Clone)]
pub struct DistanceField {
    origin: Cell,
    width: usize,
    dist: Vec<u32>,
}

impl DistanceField {
    pub fn from_cell(scene: &Scene, origin: Cell) -> Self {
        let mut dist = vec![UNREACHED; scene.width * scene.height];
        let mut queue = VecDeque::new();
        if scene.is_navigable(origin) {
            dist[scene.index(origin)] = 0;
            queue.push_back(origin);
        }
        while let Some(c) = queue.pop_front() {
            let d = dist[scene.index(c)];
            for h in Heading::ALL {
                let (dx, dy) = h.delta();
                let n = c.offset(dx, dy);
                if scene.is_navigable(n) && dist[scene.index(n)] == UNREACHED {
                    dist[scene.index(n)] = d + 1;
                    queue.push_back(n);
                }
            }
        }
        Self {
            origin,
            width: scene.width,
            dist,
        }
    }

    pub fn origin(&self) -> Cell {
        self.origin
    }

    pub fn get(&self, c: Cell) -> Option<u32> {
        if c.x < 0 || c.y < 0 || c.x as usize >= self.width {
            return None;
        }
        let i = c.y as usize * self.width + c.x as usize;
        match self.dist.get(i) {
            Some(&d) if d != UNREACHED => Some(d),
            _ => None,
        }
    }

    /// Distance as `f64`; unreachable cells map to infinity.
    pub fn distance(&self, c: Cell) -> f64 {
        self.get(c).map_or(f64::INFINITY, f64::from)
    }
}

/// Geodesic (shortest 4-connected path) distance in cells.
pub fn geodesic_distance(scene: &Scene, a: Cell, b: Cell) -> Result<f64> {
    for c in [a, b] {
        if !scene.is_navigable(c) {
            return Err(Error::Input(format!("cell {c:?} is not navigable")));
        }
    }
    Ok(DistanceField::from_cell(scene, a).distance(b))
}

/// Minimal number of primitive actions from every `(cell, heading)` state to a
/// goal cell, with greedy extraction of tie-broken shortest action paths.
#[derive(Debug, Clone)]
pub struct ActionField {
    goal: Cell,
    width: usize,
    cost: Vec<u32>,
}

/// Tie-break order for equally short paths.
const PREFERENCE: [Action; 3] = [Action::MoveForward, Action::TurnLeft, Action::TurnRight];

impl ActionField {
    pub fn new(scene: &Scene, goal: Cell) -> Self {
        let n = scene.width * scene.height;
        let mut cost = vec![UNREACHED; n * 4];
        let key = |c: Cell, h: Heading| scene.index(c) * 4 + h.index();
        let mut queue = VecDeque::new();
        if scene.is_navigable(goal) {
            for h in Heading::ALL {
                cost[key(goal, h)] = 0;
                queue.push_back((goal, h));
            }
        }
        // Reverse search: predecessors of (c, h) are (c - delta(h), h) via a
        // forward move and (c, h.left()), (c, h.right()) via turns.
        while let Some((c, h)) = queue.pop_front() {
            let d = cost[key(c, h)];
            let (dx, dy) = h.delta();
            let back = c.offset(-dx, -dy);
            let forward = scene.is_navigable(back).then_some((back, h));
            let turns = [(c, h.left()), (c, h.right())];
            for (pc, ph) in forward.into_iter().chain(turns) {
                let k = key(pc, ph);
                if cost[k] == UNREACHED {
                    cost[k] = d + 1;
                    queue.push_back((pc, ph));
                }
            }
        }
        Self {
            goal,
            width: scene.width,
            cost,
        }
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    /// Minimal action count from `pose` to the goal cell.
    pub fn cost(&self, pose: Pose) -> Option<u32> {
        if pose.x < 0 || pose.y < 0 || pose.x as usize >= self.width {
            return None;
        }
        let i = (pose.y as usize * self.width + pose.x as usize) * 4 + pose.heading.index();
        match self.cost.get(i) {
            Some(&c) if c != UNREACHED => Some(c),
            _ => None,
        }
    }

    /// First action of the preferred shortest path, or `None` at the goal.
    pub fn next_action(&self, scene: &Scene, pose: Pose) -> Option<Action> {
        let here = self.cost(pose)?;
        if here == 0 {
            return None;
        }
        PREFERENCE
            .into_iter()
            .find(|&a| self.cost(step(scene, pose, a)) == Some(here - 1))
    }

    pub fn path(&self, scene: &Scene, mut pose: Pose) -> Vec<Action> {
        let mut out = Vec::new();
        while let Some(a) = self.next_action(scene, pose) {
            out.push(a);
            pose = step(scene, pose, a);
        }
        out
    }
}

/// Minimal-length action sequence (without the final Stop) reaching `goal`.
pub fn shortest_action_path(scene: &Scene, pose: Pose, goal: Cell) -> Result<Vec<Action>> {
    if !scene.is_navigable(pose.cell()) {
        return Err(Error::Input(format!("pose {pose:?} is not navigable")));
    }
    if !scene.is_navigable(goal) {
        return Err(Error::Input(format!("goal {goal:?} is not navigable")));
    }
    Ok(ActionField::new(scene, goal).path(scene, pose))
}
