//! Reset-free point-mass environments.
//!
//! All environments share one damped double-integrator: the action is an
//! acceleration in `[-1, 1]^2`, velocity is measured in workspace units per
//! step. None of them resets itself; episode bookkeeping (goal counters) is
//! restarted with [`Environment::begin_segment`], which never moves the agent.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::EnvError;

pub const GOAL_THRESHOLD: f64 = 0.5;
pub const HAZARD_PENALTY: f64 = -300.0;
pub const WAYPOINTS: [[f64; 2]; 3] = [[0.0, 5.0], [5.0, 5.0], [5.0, 0.0]];
pub const MEDIUM_MAZE: &str = include_str!("../assets/medium_maze.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub half_width: f64,
    pub dt: f64,
    pub v_max: f64,
    pub drag: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            obs_dim: 4,
            action_dim: 2,
            half_width: 10.0,
            dt: 0.1,
            v_max: 1.0,
            drag: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl EnvState {
    pub fn at(x: f64, y: f64) -> Self {
        Self {
            position: [x, y],
            velocity: [0.0, 0.0],
        }
    }

    /// Observation layout shared by every environment: `[x, y, vx, vy]`.
    pub fn observation(&self) -> Vec<f64> {
        vec![self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub goal_hits: u32,
}

/// Who is asking for an oracle reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetContext {
    Baseline,
    Evaluation,
    ResetFreeTraining,
}

/// Stepping contract shared by the point-mass family.
pub trait Environment: Clone + Send {
    fn spec(&self) -> &EnvSpec;
    fn state(&self) -> EnvState;
    fn observe(&self) -> Vec<f64> {
        self.state().observation()
    }
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError>;
    /// Restarts per-segment goal bookkeeping without touching the physical state.
    fn begin_segment(&mut self);
    /// Places the agent at `state`. Reserved for evaluation and baselines.
    fn place(&mut self, state: EnvState);
    /// Minimal post-termination intervention: zero the velocity in place.
    fn recover(&mut self) {
        let mut s = self.state();
        s.velocity = [0.0, 0.0];
        self.place(s);
    }
    /// Task-progress features appended to absolute coordinates for high-level controllers.
    fn progress(&self) -> Vec<f64> {
        Vec::new()
    }
}

fn check_action(action: &[f64], dim: usize) -> Result<[f64; 2], EnvError> {
    if action.len() != dim || dim != 2 {
        return Err(EnvError::BadAction(format!("expected {dim} components, got {}", action.len())));
    }
    if action.iter().any(|a| a.is_nan()) {
        return Err(EnvError::BadAction("NaN component".into()));
    }
    Ok([action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)])
}

fn integrate_velocity(velocity: [f64; 2], action: [f64; 2], spec: &EnvSpec) -> [f64; 2] {
    let mut v = [
        spec.drag * velocity[0] + spec.dt * action[0],
        spec.drag * velocity[1] + spec.dt * action[1],
    ];
    let speed = v[0].hypot(v[1]);
    if speed > spec.v_max {
        let s = spec.v_max / speed;
        v = [v[0] * s, v[1] * s];
    }
    v
}

/// Damped double-integrator step, clipped to the square workspace.
pub fn integrate(state: &EnvState, action: [f64; 2], spec: &EnvSpec) -> EnvState {
    let velocity = integrate_velocity(state.velocity, action, spec);
    let h = spec.half_width;
    EnvState {
        position: [
            (state.position[0] + velocity[0]).clamp(-h, h),
            (state.position[1] + velocity[1]).clamp(-h, h),
        ],
        velocity,
    }
}

/// Shortest distance from `point` to the segment `a -> b`.
pub fn segment_distance(a: [f64; 2], b: [f64; 2], point: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((point[0] - a[0]) * d[0] + (point[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a[0] + t * d[0] - point[0]).hypot(a[1] + t * d[1] - point[1])
}

/// Shaping term `exp(-d^2 / 2)` of the distance-to-goal reward.
pub fn distance_shaping(position: [f64; 2], goal: [f64; 2]) -> f64 {
    let d = (position[0] - goal[0]).hypot(position[1] - goal[1]);
    (-0.5 * d * d).exp()
}

/// Task reward for reaching the origin: `exp(-d^2/2) + goals_completed`.
pub fn task_reward(position: [f64; 2], goals_completed: u32) -> f64 {
    distance_shaping(position, [0.0, 0.0]) + goals_completed as f64
}

/// Shaping term for the active waypoint.
pub fn waypoint_reward(position: [f64; 2], waypoint_index: usize) -> Result<f64, EnvError> {
    let goal = WAYPOINTS
        .get(waypoint_index)
        .ok_or(EnvError::WaypointIndex(waypoint_index))?;
    Ok(distance_shaping(position, *goal))
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

/// Thin strips near two opposite workspace corners; entering one ends the phase.
pub fn default_hazards() -> Vec<Rect> {
    vec![
        Rect {
            x0: 6.5,
            x1: 9.5,
            y0: 8.75,
            y1: 9.25,
        },
        Rect {
            x0: -9.5,
            x1: -6.5,
            y0: -9.25,
            y1: -8.75,
        },
    ]
}

/// The forward task: walk to the origin and stay there.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointMass {
    spec: EnvSpec,
    state: EnvState,
    hazards: Vec<Rect>,
    goals_completed: u32,
    oracle_resets: u64,
    reset_free_lock: bool,
}

impl PointMass {
    pub fn new(start: EnvState) -> Self {
        Self::with_spec(EnvSpec::default(), start)
    }

    pub fn with_spec(spec: EnvSpec, start: EnvState) -> Self {
        Self {
            spec,
            state: start,
            hazards: default_hazards(),
            goals_completed: 0,
            oracle_resets: 0,
            reset_free_lock: false,
        }
    }

    pub fn hazards(&self) -> &[Rect] {
        &self.hazards
    }

    pub fn in_hazard(&self, p: [f64; 2]) -> bool {
        self.hazards.iter().any(|h| h.contains(p))
    }

    pub fn goals_completed(&self) -> u32 {
        self.goals_completed
    }

    /// Number of oracle resets served since construction.
    pub fn oracle_reset_count(&self) -> u64 {
        self.oracle_resets
    }

    /// After this call every oracle reset fails, whatever the caller claims to be.
    pub fn lock_reset_free(&mut self) {
        self.reset_free_lock = true;
    }

    /// Teleports to a draw from the initial-state distribution (uniform on the
    /// annulus `3 <= r <= 5`, at rest).
    pub fn oracle_reset<R: Rng + ?Sized>(&mut self, ctx: ResetContext, rng: &mut R) -> Result<EnvState, EnvError> {
        if self.reset_free_lock || ctx == ResetContext::ResetFreeTraining {
            return Err(EnvError::OracleResetForbidden);
        }
        self.oracle_resets += 1;
        self.state = sample_initial_state(rng);
        self.goals_completed = 0;
        Ok(self.state)
    }
}

/// Uniform draw (by area) from the annulus of radii `[3, 5]`.
pub fn sample_initial_state<R: Rng + ?Sized>(rng: &mut R) -> EnvState {
    let (r0, r1) = (3.0f64, 5.0f64);
    let u: f64 = rng.random();
    let r = (r0 * r0 + u * (r1 * r1 - r0 * r0)).sqrt();
    let theta = rng.random::<f64>() * 2.0 * PI;
    EnvState::at(r * theta.cos(), r * theta.sin())
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn state(&self) -> EnvState {
        self.state
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        let action = check_action(action, self.spec.action_dim)?;
        let prev = self.state.position;
        self.state = integrate(&self.state, action, &self.spec);
        let mut goal_hits = 0;
        if self.goals_completed == 0 && segment_distance(prev, self.state.position, [0.0, 0.0]) < GOAL_THRESHOLD {
            self.goals_completed = 1;
            goal_hits = 1;
        }
        let terminated = self.in_hazard(self.state.position);
        let mut reward = task_reward(self.state.position, self.goals_completed);
        if terminated {
            reward += HAZARD_PENALTY;
        }
        Ok(StepResult {
            obs: self.state.observation(),
            reward,
            terminated,
            goal_hits,
        })
    }

    fn begin_segment(&mut self) {
        self.goals_completed = 0;
    }

    fn place(&mut self, state: EnvState) {
        self.state = state;
    }
}

/// Visit `(0,5)`, `(5,5)`, `(5,0)` in order, starting from the origin.
#[derive(Debug, Clone)]
pub struct Waypoints {
    spec: EnvSpec,
    state: EnvState,
    start: EnvState,
    index: usize,
    completed: u32,
}

impl Waypoints {
    pub fn new() -> Self {
        let start = EnvState::at(0.0, 0.0);
        Self {
            spec: EnvSpec::default(),
            state: start,
            start,
            index: 0,
            completed: 0,
        }
    }

    pub fn start(&self) -> EnvState {
        self.start
    }

    pub fn waypoint_index(&self) -> usize {
        self.index
    }

    pub fn completed(&self) -> u32 {
        self.completed
    }

    pub fn solved(&self) -> bool {
        self.completed as usize == WAYPOINTS.len()
    }
}

impl Default for Waypoints {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Waypoints {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn state(&self) -> EnvState {
        self.state
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        let action = check_action(action, self.spec.action_dim)?;
        let prev = self.state.position;
        self.state = integrate(&self.state, action, &self.spec);
        let mut goal_hits = 0;
        if !self.solved() && segment_distance(prev, self.state.position, WAYPOINTS[self.index]) < GOAL_THRESHOLD {
            self.completed += 1;
            goal_hits = 1;
            if self.index + 1 < WAYPOINTS.len() {
                self.index += 1;
            }
        }
        let reward = waypoint_reward(self.state.position, self.index)? + self.completed as f64;
        Ok(StepResult {
            obs: self.state.observation(),
            reward,
            terminated: false,
            goal_hits,
        })
    }

    fn begin_segment(&mut self) {
        self.index = 0;
        self.completed = 0;
    }

    fn place(&mut self, state: EnvState) {
        self.state = state;
    }

    fn progress(&self) -> Vec<f64> {
        vec![self.completed as f64]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Wall,
}

/// Grid maze parsed from ASCII: `#` wall, `G` goal, `S` start, anything else free.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeLayout {
    rows: usize,
    cols: usize,
    cells: Vec<Cell>,
    goal: (usize, usize),
    start: (usize, usize),
    cell_size: f64,
}

impl MazeLayout {
    pub fn parse(text: &str, cell_size: f64) -> Result<Self, EnvError> {
        let lines: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        if lines.is_empty() {
            return Err(EnvError::MazeLayout("empty layout".into()));
        }
        let cols = lines[0].chars().count();
        if let Some((i, _)) = lines.iter().enumerate().find(|(_, l)| l.chars().count() != cols) {
            return Err(EnvError::MazeLayout(format!("row {i} length differs from row 0")));
        }
        if cell_size <= 0.0 {
            return Err(EnvError::MazeLayout("cell size must be positive".into()));
        }
        let mut cells = Vec::with_capacity(lines.len() * cols);
        let (mut goals, mut starts) = (Vec::new(), Vec::new());
        for (r, line) in lines.iter().enumerate() {
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => cells.push(Cell::Wall),
                    'G' => {
                        goals.push((r, c));
                        cells.push(Cell::Free);
                    }
                    'S' => {
                        starts.push((r, c));
                        cells.push(Cell::Free);
                    }
                    _ => cells.push(Cell::Free),
                }
            }
        }
        if goals.len() != 1 {
            return Err(EnvError::MazeLayout(format!("expected exactly one 'G', found {}", goals.len())));
        }
        if starts.len() != 1 {
            return Err(EnvError::MazeLayout(format!("expected exactly one 'S', found {}", starts.len())));
        }
        Ok(Self {
            rows: lines.len(),
            cols,
            cells,
            goal: goals[0],
            start: starts[0],
            cell_size,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.cols + col]
    }

    pub fn goal_cell(&self) -> (usize, usize) {
        self.goal
    }

    pub fn start_cell(&self) -> (usize, usize) {
        self.start
    }

    /// World coordinates of a cell center; row 0 is the top of the maze and
    /// the grid is centered on the origin.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        let c = self.cell_size;
        [
            (col as f64 + 0.5) * c - self.cols as f64 * c / 2.0,
            (self.rows as f64 - row as f64 - 0.5) * c - self.rows as f64 * c / 2.0,
        ]
    }

    /// Cell containing `p`, or `None` outside the grid.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let c = self.cell_size;
        let col = ((p[0] + self.cols as f64 * c / 2.0) / c).floor();
        let row_from_bottom = ((p[1] + self.rows as f64 * c / 2.0) / c).floor();
        if col < 0.0 || row_from_bottom < 0.0 || col >= self.cols as f64 || row_from_bottom >= self.rows as f64 {
            return None;
        }
        Some((self.rows - 1 - row_from_bottom as usize, col as usize))
    }

    pub fn blocked(&self, p: [f64; 2]) -> bool {
        match self.cell_of(p) {
            Some((r, c)) => self.cell(r, c) == Cell::Wall,
            None => true,
        }
    }

    /// Free cells in breadth-first order from `from`, with their predecessor.
    fn bfs(&self, from: (usize, usize)) -> Vec<Option<(usize, usize)>> {
        let mut prev = vec![None; self.rows * self.cols];
        let mut seen = vec![false; self.rows * self.cols];
        let mut queue = std::collections::VecDeque::from([from]);
        seen[from.0 * self.cols + from.1] = true;
        while let Some((r, c)) = queue.pop_front() {
            let neighbours = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            for (nr, nc) in neighbours {
                if nr >= self.rows || nc >= self.cols || self.cell(nr, nc) == Cell::Wall {
                    continue;
                }
                let idx = nr * self.cols + nc;
                if !seen[idx] {
                    seen[idx] = true;
                    prev[idx] = Some((r, c));
                    queue.push_back((nr, nc));
                }
            }
        }
        prev
    }

    /// Shortest cell path from `from` to the goal (inclusive), if one exists.
    pub fn path_to_goal(&self, from: (usize, usize)) -> Option<Vec<(usize, usize)>> {
        let prev = self.bfs(self.goal);
        let mut path = vec![from];
        let mut cur = from;
        while cur != self.goal {
            cur = prev[cur.0 * self.cols + cur.1]?;
            path.push(cur);
        }
        Some(path)
    }
}

/// Maze navigation with the shared point-mass dynamics and axis-separated
/// wall collisions. Reward is the negative distance to the goal cell center.
#[derive(Debug, Clone)]
pub struct Maze {
    spec: EnvSpec,
    layout: MazeLayout,
    state: EnvState,
}

impl Maze {
    pub fn new(layout: MazeLayout) -> Self {
        let (r, c) = layout.start_cell();
        let p = layout.cell_center(r, c);
        let half = (layout.cols.max(layout.rows) as f64) * layout.cell_size / 2.0;
        Self {
            spec: EnvSpec {
                half_width: half,
                ..EnvSpec::default()
            },
            state: EnvState::at(p[0], p[1]),
            layout,
        }
    }

    pub fn medium(cell_size: f64) -> Self {
        Self::new(MazeLayout::parse(MEDIUM_MAZE, cell_size).expect("bundled maze is valid"))
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn start(&self) -> EnvState {
        let (r, c) = self.layout.start_cell();
        let p = self.layout.cell_center(r, c);
        EnvState::at(p[0], p[1])
    }

    pub fn goal(&self) -> [f64; 2] {
        let (r, c) = self.layout.goal_cell();
        self.layout.cell_center(r, c)
    }

    pub fn reward_at(&self, p: [f64; 2]) -> f64 {
        let g = self.goal();
        -(p[0] - g[0]).hypot(p[1] - g[1])
    }
}

/// One maze transition: velocity update, then the x move, then the y move;
/// a move that would land inside a wall keeps that coordinate and zeroes its
/// velocity component.
pub fn maze_step(layout: &MazeLayout, spec: &EnvSpec, state: &EnvState, action: [f64; 2]) -> EnvState {
    let mut velocity = integrate_velocity(state.velocity, action, spec);
    let mut p = state.position;
    let moved_x = [p[0] + velocity[0], p[1]];
    if layout.blocked(moved_x) {
        velocity[0] = 0.0;
    } else {
        p = moved_x;
    }
    let moved_y = [p[0], p[1] + velocity[1]];
    if layout.blocked(moved_y) {
        velocity[1] = 0.0;
    } else {
        p = moved_y;
    }
    EnvState { position: p, velocity }
}

impl Environment for Maze {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn state(&self) -> EnvState {
        self.state
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        let action = check_action(action, self.spec.action_dim)?;
        self.state = maze_step(&self.layout, &self.spec, &self.state, action);
        Ok(StepResult {
            obs: self.state.observation(),
            reward: self.reward_at(self.state.position),
            terminated: false,
            goal_hits: 0,
        })
    }

    fn begin_segment(&mut self) {}

    fn place(&mut self, state: EnvState) {
        self.state = state;
    }
}

/// One row of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub phase: String,
    pub skill: Option<usize>,
    pub x: f64,
    pub y: f64,
    pub reward: f64,
    pub terminated: bool,
}
