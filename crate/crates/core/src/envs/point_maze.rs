//! Point mass in a wall grid.
//!
//! State `(x, y, vx, vy)`; cell `(row, col)` covers `x in [col, col + 1)`,
//! `y in [row, row + 1)`. Force is integrated into velocity, velocity is
//! limited per component, and motion is resolved one axis at a time: a move
//! that would bring the point within `radius` of a wall is cancelled and that
//! velocity component zeroed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Environment, StepOutcome};
use crate::error::{BatsError, Result};
use crate::seeding::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeLayout {
    /// `#` wall, `.` open, `S` start, `G` goal.
    pub rows: Vec<String>,
}

impl MazeLayout {
    pub fn umaze() -> Self {
        MazeLayout {
            rows: ["#####", "#G..#", "###.#", "#S..#", "#####"].iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let layout: MazeLayout = serde_json::from_str(text)?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.rows.first().map_or(0, |r| r.chars().count());
        if width == 0 || self.rows.iter().any(|r| r.chars().count() != width) {
            return Err(BatsError::Input("maze rows must be nonempty and equally wide".into()));
        }
        if let Some(c) = self.rows.iter().flat_map(|r| r.chars()).find(|c| !"#.SG".contains(*c)) {
            return Err(BatsError::Input(format!("unknown maze cell '{c}'")));
        }
        let count = |ch: char| self.rows.iter().flat_map(|r| r.chars()).filter(|&c| c == ch).count();
        if count('S') != 1 || count('G') != 1 {
            return Err(BatsError::Input("maze needs exactly one S and one G".into()));
        }
        let border_open = self.rows.iter().enumerate().any(|(i, r)| {
            r.chars().enumerate().any(|(j, c)| {
                c != '#' && (i == 0 || j == 0 || i + 1 == self.rows.len() || j + 1 == width)
            })
        });
        if border_open {
            return Err(BatsError::Input("maze must be enclosed by walls".into()));
        }
        Ok(())
    }

    fn cell(&self, row: usize, col: usize) -> char {
        self.rows[row].as_bytes()[col] as char
    }

    fn find(&self, ch: char) -> (usize, usize) {
        for (i, r) in self.rows.iter().enumerate() {
            if let Some(j) = r.find(ch) {
                return (i, j);
            }
        }
        unreachable!("validated layouts contain every marker")
    }

    pub fn open_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            for (j, c) in r.chars().enumerate() {
                if c != '#' {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointMaze {
    pub layout: MazeLayout,
    pub dt: f64,
    /// Acceleration per unit force.
    pub gain: f64,
    pub max_speed: f64,
    /// Clearance the point keeps from walls.
    pub radius: f64,
    pub max_steps: usize,
    /// Uniform jitter of reset positions around the start cell centre.
    pub reset_noise: f64,
    pub pd_kp: f64,
    pub pd_kd: f64,
    pub pd_noise: f64,
    /// Distance to a waypoint at which the wanderer picks the next one.
    pub waypoint_tolerance: f64,
}

impl Default for PointMaze {
    fn default() -> Self {
        PointMaze {
            layout: MazeLayout::umaze(),
            dt: 0.1,
            gain: 5.0,
            max_speed: 2.0,
            radius: 0.1,
            max_steps: 300,
            reset_noise: 0.1,
            pd_kp: 3.0,
            pd_kd: 1.0,
            pd_noise: 0.2,
            waypoint_tolerance: 0.2,
        }
    }
}

fn centre((row, col): (usize, usize)) -> [f64; 2] {
    [col as f64 + 0.5, row as f64 + 0.5]
}

impl PointMaze {
    pub fn start_cell(&self) -> (usize, usize) {
        self.layout.find('S')
    }

    pub fn goal_cell(&self) -> (usize, usize) {
        self.layout.find('G')
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let (row, col) = (y.floor() as usize, x.floor() as usize);
        (row < self.layout.rows.len() && col < self.layout.rows[0].len()).then_some((row, col))
    }

    pub fn in_goal(&self, state: &[f64]) -> bool {
        self.cell_of(state[0], state[1]) == Some(self.goal_cell())
    }

    fn is_wall(&self, row: isize, col: isize) -> bool {
        if row < 0 || col < 0 {
            return true;
        }
        let (row, col) = (row as usize, col as usize);
        row >= self.layout.rows.len() || col >= self.layout.rows[0].len() || self.layout.cell(row, col) == '#'
    }

    /// True when the disc of `radius` at `(x, y)` overlaps no wall cell.
    pub fn is_free(&self, x: f64, y: f64) -> bool {
        let r = self.radius;
        let (c0, c1) = ((x - r).floor() as isize, (x + r).floor() as isize);
        let (r0, r1) = ((y - r).floor() as isize, (y + r).floor() as isize);
        for row in r0..=r1 {
            for col in c0..=c1 {
                if !self.is_wall(row, col) {
                    continue;
                }
                // Closest point of the wall square to the centre.
                let px = x.clamp(col as f64, col as f64 + 1.0);
                let py = y.clamp(row as f64, row as f64 + 1.0);
                if (px - x).powi(2) + (py - y).powi(2) < r * r {
                    return false;
                }
            }
        }
        true
    }

    fn neighbours(&self, (row, col): (usize, usize)) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (r, c) = (row as isize + dr, col as isize + dc);
            if !self.is_wall(r, c) {
                out.push((r as usize, c as usize));
            }
        }
        out
    }

    /// Episode start for data collection: a random open cell centre, at rest.
    pub fn wander_start(&self, rng: &mut SeededRng) -> Vec<f64> {
        let cells = self.layout.open_cells();
        let c = centre(cells[rng.random_range(0..cells.len())]);
        vec![c[0], c[1], 0.0, 0.0]
    }

    /// One wandering episode: a PD controller chases random adjacent
    /// waypoints with Gaussian action noise.
    pub fn wander(&self, start: Vec<f64>, steps: usize, rng: &mut SeededRng) -> Vec<(Vec<f64>, Vec<f64>, StepOutcome)> {
        let mut s = start;
        let mut cell = self.cell_of(s[0], s[1]).expect("start inside the grid");
        let mut waypoint = self.next_waypoint(cell, rng);
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let w = centre(waypoint);
            if ((s[0] - w[0]).powi(2) + (s[1] - w[1]).powi(2)).sqrt() < self.waypoint_tolerance {
                cell = waypoint;
                waypoint = self.next_waypoint(cell, rng);
            }
            let w = centre(waypoint);
            let a: Vec<f64> = (0..2)
                .map(|k| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (self.pd_kp * (w[k] - s[k]) - self.pd_kd * s[2 + k] + self.pd_noise * noise).clamp(-1.0, 1.0)
                })
                .collect();
            let step = self.step(&s, &a);
            let next = step.next_state.clone();
            out.push((s, a, step));
            s = next;
        }
        out
    }

    fn next_waypoint(&self, cell: (usize, usize), rng: &mut SeededRng) -> (usize, usize) {
        let n = self.neighbours(cell);
        if n.is_empty() {
            cell
        } else {
            n[rng.random_range(0..n.len())]
        }
    }
}

impl Environment for PointMaze {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> Vec<[f64; 2]> {
        vec![[-1.0, 1.0], [-1.0, 1.0]]
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&self, rng: &mut SeededRng) -> Vec<f64> {
        let c = centre(self.start_cell());
        let n = self.reset_noise;
        vec![
            c[0] + rng.random_range(-n..=n),
            c[1] + rng.random_range(-n..=n),
            0.0,
            0.0,
        ]
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        let mut vx = (state[2] + self.dt * self.gain * ax).clamp(-self.max_speed, self.max_speed);
        let mut vy = (state[3] + self.dt * self.gain * ay).clamp(-self.max_speed, self.max_speed);
        let (mut x, mut y) = (state[0], state[1]);
        let nx = x + self.dt * vx;
        if self.is_free(nx, y) {
            x = nx;
        } else {
            vx = 0.0;
        }
        let ny = y + self.dt * vy;
        if self.is_free(x, ny) {
            y = ny;
        } else {
            vy = 0.0;
        }
        let next_state = vec![x, y, vx, vy];
        let reward = if self.in_goal(&next_state) { 1.0 } else { 0.0 };
        StepOutcome {
            next_state,
            reward,
            terminal: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    #[test]
    fn wall_contact_zeroes_velocity_without_penetration() {
        let env = PointMaze::default();
        // Start cell (3, 1); the wall cell (3, 0) lies to the left.
        let s = vec![1.15, 3.5, -2.0, 0.0];
        let out = env.step(&s, &[-1.0, 0.0]);
        assert_eq!(out.next_state[2], 0.0);
        assert!(out.next_state[0] - env.radius >= 1.0 - 1e-12);
        assert_eq!(out.next_state[1], 3.5);
    }

    #[test]
    fn goal_indicator_reward() {
        let env = PointMaze::default();
        let (r, c) = env.goal_cell();
        let s = vec![c as f64 + 0.5, r as f64 + 0.5, 0.0, 0.0];
        assert_eq!(env.step(&s, &[0.0, 0.0]).reward, 1.0);
        let (r, c) = env.start_cell();
        let s = vec![c as f64 + 0.5, r as f64 + 0.5, 0.0, 0.0];
        assert_eq!(env.step(&s, &[0.0, 0.0]).reward, 0.0);
    }

    #[test]
    fn wanderer_stays_in_free_space() {
        let env = PointMaze::default();
        let mut rng = rng_from(4, &[]);
        let start = env.wander_start(&mut rng);
        for (s, _, _) in env.wander(start, 500, &mut rng) {
            assert!(env.is_free(s[0], s[1]));
        }
    }

    #[test]
    fn layout_validation() {
        assert!(MazeLayout::umaze().validate().is_ok());
        let open = MazeLayout {
            rows: vec!["S.G".into()],
        };
        assert!(open.validate().is_err());
        assert!(MazeLayout::from_json(r####"{"rows": ["###", "#S#", "#G#", "###"]}"####).is_ok());
    }
}
