//! Deterministic grid lake: maps, moves, shortest-path labels, rollouts and
//! frame rendering.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::{Result, Rng, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Start,
    Goal,
    Hole,
    Ice,
}

/// Moves in tie-breaking order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

/// Grid position `(row, col)`.
pub type Pos = (usize, usize);

/// Square map with the start at the top-left and the goal at the
/// bottom-right corner.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LakeMap {
    pub size: usize,
    pub cells: Vec<Cell>,
}

impl LakeMap {
    /// All-ice map of side `size >= 2`.
    pub fn open(size: usize) -> Result<LakeMap> {
        if size < 2 {
            return Err(TensorError::Config(format!("grid size must be >= 2, got {size}")));
        }
        let mut cells = vec![Cell::Ice; size * size];
        cells[0] = Cell::Start;
        cells[size * size - 1] = Cell::Goal;
        Ok(LakeMap { size, cells })
    }

    pub fn start(&self) -> Pos {
        (0, 0)
    }

    pub fn goal(&self) -> Pos {
        (self.size - 1, self.size - 1)
    }

    pub fn cell(&self, p: Pos) -> Cell {
        self.cells[p.0 * self.size + p.1]
    }

    pub fn holes(&self) -> usize {
        self.cells.iter().filter(|&&c| c == Cell::Hole).count()
    }

    /// Result of `a` from `p`; moves into a wall leave the agent in place.
    pub fn step(&self, p: Pos, a: Action) -> Pos {
        let (dr, dc) = a.delta();
        let r = p.0 as isize + dr;
        let c = p.1 as isize + dc;
        if r < 0 || c < 0 || r >= self.size as isize || c >= self.size as isize {
            p
        } else {
            (r as usize, c as usize)
        }
    }

    /// Positions visited by executing `actions` from the start (inclusive).
    pub fn trajectory(&self, actions: &[Action]) -> Vec<Pos> {
        let mut p = self.start();
        let mut out = vec![p];
        for &a in actions {
            p = self.step(p, a);
            out.push(p);
        }
        out
    }

    /// Hole-avoiding shortest distance from every cell to the goal.
    pub fn distances_to_goal(&self) -> Vec<Option<usize>> {
        let g = self.size;
        let mut dist = vec![None; g * g];
        let goal = self.goal();
        dist[goal.0 * g + goal.1] = Some(0);
        let mut queue = VecDeque::from([goal]);
        while let Some(p) = queue.pop_front() {
            let d = dist[p.0 * g + p.1].unwrap();
            for a in Action::ALL {
                let q = self.step(p, a);
                if self.cell(q) != Cell::Hole && dist[q.0 * g + q.1].is_none() {
                    dist[q.0 * g + q.1] = Some(d + 1);
                    queue.push_back(q);
                }
            }
        }
        dist
    }

    pub fn solvable(&self) -> bool {
        self.distances_to_goal()[0].is_some()
    }

    /// First action (in tie-breaking order) on a shortest path from `p`;
    /// `None` at the goal, in a hole, or when the goal is unreachable.
    pub fn policy_action(&self, p: Pos) -> Option<Action> {
        self.policy_with(&self.distances_to_goal(), p)
    }

    fn policy_with(&self, dist: &[Option<usize>], p: Pos) -> Option<Action> {
        let g = self.size;
        if p == self.goal() || self.cell(p) == Cell::Hole {
            return None;
        }
        let d = dist[p.0 * g + p.1]?;
        Action::ALL.into_iter().find(|&a| {
            let q = self.step(p, a);
            q != p && dist[q.0 * g + q.1] == Some(d - 1)
        })
    }

    /// Plain-text grid: `S` start, `G` goal, `H` hole, `.` ice.
    pub fn parse(text: &str) -> Result<LakeMap> {
        let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let g = rows.len();
        let mut cells = Vec::with_capacity(g * g);
        for row in &rows {
            if row.chars().count() != g {
                return Err(TensorError::Config(format!("map rows must have {g} cells: {row:?}")));
            }
            for ch in row.chars() {
                cells.push(match ch {
                    'S' => Cell::Start,
                    'G' => Cell::Goal,
                    'H' => Cell::Hole,
                    '.' => Cell::Ice,
                    other => return Err(TensorError::Config(format!("unknown map cell {other:?}"))),
                });
            }
        }
        let map = LakeMap { size: g, cells };
        if g < 2 || map.cell(map.start()) != Cell::Start || map.cell(map.goal()) != Cell::Goal {
            return Err(TensorError::Config("map needs S top-left and G bottom-right".into()));
        }
        if map.cells.iter().filter(|&&c| c == Cell::Start || c == Cell::Goal).count() != 2 {
            return Err(TensorError::Config("map needs exactly one S and one G".into()));
        }
        Ok(map)
    }
}

impl fmt::Display for LakeMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.cells.chunks(self.size) {
            let line: String = row
                .iter()
                .map(|c| match c {
                    Cell::Start => 'S',
                    Cell::Goal => 'G',
                    Cell::Hole => 'H',
                    Cell::Ice => '.',
                })
                .collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Shortest hole-avoiding plan from the start, ties broken by action order.
pub fn bfs_plan(map: &LakeMap) -> Result<Vec<Action>> {
    let dist = map.distances_to_goal();
    if dist[0].is_none() {
        return Err(TensorError::invalid("bfs_plan", "goal unreachable from start"));
    }
    let mut p = map.start();
    let mut plan = Vec::new();
    while let Some(a) = map.policy_with(&dist, p) {
        plan.push(a);
        p = map.step(p, a);
    }
    Ok(plan)
}

/// Random solvable maps: each cell other than start and goal is a hole with
/// probability `hole_density`; maps that are unsolvable or exceed
/// `max_holes` are redrawn.
pub fn generate_maps(
    size: usize,
    count: usize,
    hole_density: f64,
    max_holes: Option<usize>,
    seed: u64,
) -> Result<Vec<LakeMap>> {
    if !(0.0..=0.4).contains(&hole_density) {
        return Err(TensorError::Config(format!("hole_density must be in [0, 0.4], got {hole_density}")));
    }
    let base = LakeMap::open(size)?;
    let mut rng = Rng::new(seed);
    let mut maps = Vec::with_capacity(count);
    while maps.len() < count {
        let mut m = base.clone();
        for i in 1..size * size - 1 {
            if rng.uniform() < hole_density {
                m.cells[i] = Cell::Hole;
            }
        }
        if max_holes.is_some_and(|k| m.holes() > k) || !m.solvable() {
            continue;
        }
        maps.push(m);
    }
    Ok(maps)
}

/// Drops duplicate maps, shuffles, and splits off `holdout_fraction` of the
/// distinct maps (at least one when the fraction is positive). The two sides
/// never share a layout.
pub fn split_maps(maps: &[LakeMap], holdout_fraction: f64, seed: u64) -> Result<(Vec<LakeMap>, Vec<LakeMap>)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(TensorError::Config(format!("holdout_fraction must be in [0, 1), got {holdout_fraction}")));
    }
    let mut seen = std::collections::HashSet::new();
    let mut distinct: Vec<LakeMap> = maps.iter().filter(|m| seen.insert(*m)).cloned().collect();
    Rng::new(seed).shuffle(&mut distinct);
    let mut held = (holdout_fraction * distinct.len() as f64).ceil() as usize;
    if holdout_fraction > 0.0 && distinct.len() < 2 {
        return Err(TensorError::Config("need at least two distinct maps to hold some out".into()));
    }
    held = held.min(distinct.len() - 1);
    let train = distinct.split_off(held);
    Ok((train, distinct))
}

pub const ICE: f64 = 0.0;
pub const HOLE: f64 = -1.0;
pub const GOAL: f64 = 1.0;
pub const AGENT: f64 = 0.5;

/// Single-channel frame of side `size * cell_px`: ice 0, hole −1, goal +1,
/// and the agent as a centered square of 0.5 half the cell wide.
pub fn render(map: &LakeMap, agent: Pos, cell_px: usize) -> Vec<f64> {
    let side = map.size * cell_px;
    let mut img = vec![ICE; side * side];
    let lo = cell_px / 4;
    let hi = cell_px - lo;
    for r in 0..map.size {
        for c in 0..map.size {
            let base = match map.cell((r, c)) {
                Cell::Hole => HOLE,
                Cell::Goal => GOAL,
                _ => ICE,
            };
            for y in 0..cell_px {
                for x in 0..cell_px {
                    let on_agent = (r, c) == agent && (lo..hi).contains(&y) && (lo..hi).contains(&x);
                    img[(r * cell_px + y) * side + c * cell_px + x] = if on_agent { AGENT } else { base };
                }
            }
        }
    }
    img
}

/// One walk from the start.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub map: LakeMap,
    /// `actions.len() + 1` positions, starting at the start cell.
    pub positions: Vec<Pos>,
    pub actions: Vec<Action>,
    /// Shortest-path action from `positions[i]`.
    pub labels: Vec<Action>,
    /// `positions.len()` frames of `(size·cell_px)²` pixels.
    pub frames: Vec<Vec<f64>>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Follows the shortest-path policy to the goal, but with probability
/// `epsilon` takes a random move that stays on the grid and out of holes.
/// Stops at the goal or after `max_len` moves.
pub fn make_rollout(map: &LakeMap, epsilon: f64, max_len: usize, cell_px: usize, rng: &mut Rng) -> Result<Rollout> {
    let dist = map.distances_to_goal();
    if dist[0].is_none() {
        return Err(TensorError::invalid("rollout", "goal unreachable from start"));
    }
    let mut p = map.start();
    let mut positions = vec![p];
    let (mut actions, mut labels) = (Vec::new(), Vec::new());
    while actions.len() < max_len {
        let Some(label) = map.policy_with(&dist, p) else { break };
        let mut action = label;
        if rng.uniform() < epsilon {
            let safe: Vec<Action> = Action::ALL
                .into_iter()
                .filter(|&a| {
                    let q = map.step(p, a);
                    q != p && map.cell(q) != Cell::Hole
                })
                .collect();
            action = safe[rng.below(safe.len())];
        }
        p = map.step(p, action);
        positions.push(p);
        actions.push(action);
        labels.push(label);
    }
    let frames = positions.iter().map(|&q| render(map, q, cell_px)).collect();
    Ok(Rollout { map: map.clone(), positions, actions, labels, frames })
}

/// `per_map` rollouts for every map; map `i` draws from its own stream
/// derived from `seed`, so the result does not depend on map order elsewhere.
pub fn make_rollouts(
    maps: &[LakeMap],
    per_map: usize,
    epsilon: f64,
    max_len: usize,
    cell_px: usize,
    seed: u64,
) -> Result<Vec<Rollout>> {
    let root = Rng::new(seed);
    let mut out = Vec::with_capacity(maps.len() * per_map);
    for (i, m) in maps.iter().enumerate() {
        let mut rng = root.derive(i as u64);
        for _ in 0..per_map {
            out.push(make_rollout(m, epsilon, max_len, cell_px, &mut rng)?);
        }
    }
    Ok(out)
}
