//! Slippery gridworld with exit cells and an exact value-iteration oracle.
//!
//! Cells are indexed row-major. Goal and hazard cells are exit cells: any
//! action taken there pays the cell's reward and ends the episode. Every
//! other move pays the step reward. Moves off the grid leave the agent in
//! place.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 4;
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    pub goal: Option<usize>,
    pub hazards: Vec<usize>,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub hazard_reward: f64,
}

impl GridLayout {
    /// `n x n` cliff layout: the goal sits in the bottom-right corner and the
    /// bottom row between the two bottom corners (minus the cell next to the
    /// goal) is hazardous. Walking along the second-to-last row is the
    /// shortest route and is only safe under deterministic moves.
    pub fn cliff(n: usize) -> Self {
        let goal = n * n - 1;
        let hazards = if n >= 4 {
            (1..n - 2).map(|c| (n - 1) * n + c).collect()
        } else {
            Vec::new()
        };
        GridLayout {
            rows: n,
            cols: n,
            goal: Some(goal),
            hazards,
            step_reward: -0.01,
            goal_reward: 1.0,
            hazard_reward: -1.0,
        }
    }

    /// Open `rows x cols` grid with the goal in the last cell.
    pub fn open(rows: usize, cols: usize) -> Self {
        GridLayout {
            rows,
            cols,
            goal: Some(rows * cols - 1),
            hazards: Vec::new(),
            step_reward: -0.01,
            goal_reward: 1.0,
            hazard_reward: -1.0,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_exit(&self, cell: usize) -> bool {
        self.goal == Some(cell) || self.hazards.contains(&cell)
    }

    pub fn exit_reward(&self, cell: usize) -> Option<f64> {
        if self.goal == Some(cell) {
            Some(self.goal_reward)
        } else if self.hazards.contains(&cell) {
            Some(self.hazard_reward)
        } else {
            None
        }
    }

    /// Cells an episode may start in.
    pub fn start_cells(&self) -> Vec<usize> {
        (0..self.num_cells()).filter(|&c| !self.is_exit(c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_cells();
        if n == 0 {
            return Err(Error::UnsupportedEnv("empty grid".into()));
        }
        if self.goal.is_some_and(|g| g >= n) || self.hazards.iter().any(|&h| h >= n) {
            return Err(Error::UnsupportedEnv("exit cell outside grid".into()));
        }
        Ok(())
    }

    fn neighbor(&self, cell: usize, action: usize) -> usize {
        let (r, c) = (cell / self.cols, cell % self.cols);
        let (nr, nc) = match action {
            UP if r > 0 => (r - 1, c),
            DOWN if r + 1 < self.rows => (r + 1, c),
            LEFT if c > 0 => (r, c - 1),
            RIGHT if c + 1 < self.cols => (r, c + 1),
            _ => (r, c),
        };
        nr * self.cols + nc
    }
}

fn perpendicular(action: usize) -> [usize; 2] {
    match action {
        UP | DOWN => [LEFT, RIGHT],
        _ => [UP, DOWN],
    }
}

/// One possible result of a move, with its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    pub prob: f64,
    pub next: usize,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSlip {
    pub layout: GridLayout,
    /// Probability of slipping perpendicular to the intended move (split evenly).
    pub slip: f64,
    /// Probability that the `right` action does nothing.
    pub broken_right: f64,
    pub reward_scale: f64,
}

impl GridSlip {
    pub fn new(layout: GridLayout, slip: f64, broken_right: f64, reward_scale: f64) -> Result<Self> {
        layout.validate()?;
        if !(0.0..=1.0).contains(&slip) || !(0.0..=1.0).contains(&broken_right) {
            return Err(Error::UnsupportedEnv(format!(
                "grid probabilities out of [0, 1]: slip={slip}, broken={broken_right}"
            )));
        }
        if slip > 0.0 && broken_right > 0.0 {
            return Err(Error::UnsupportedEnv(
                "grid supports one dynamics shift at a time".into(),
            ));
        }
        Ok(GridSlip {
            layout,
            slip,
            broken_right,
            reward_scale,
        })
    }

    pub fn num_states(&self) -> usize {
        self.layout.num_cells()
    }

    /// Ordered branches `(prob, next cell)` of a non-exit move. Sampling walks
    /// these intervals with a single uniform draw.
    fn branches(&self, cell: usize, action: usize) -> Vec<(f64, usize)> {
        let intended = self.layout.neighbor(cell, action);
        if action == RIGHT && self.broken_right > 0.0 {
            return vec![(self.broken_right, cell), (1.0 - self.broken_right, intended)];
        }
        if self.slip > 0.0 {
            let [a, b] = perpendicular(action);
            return vec![
                (0.5 * self.slip, self.layout.neighbor(cell, a)),
                (0.5 * self.slip, self.layout.neighbor(cell, b)),
                (1.0 - self.slip, intended),
            ];
        }
        vec![(1.0, intended)]
    }

    fn check(&self, cell: usize, action: usize) -> Result<()> {
        if cell >= self.num_states() {
            return Err(Error::InvalidState(format!(
                "cell {cell} outside grid of {} cells",
                self.num_states()
            )));
        }
        if action >= NUM_ACTIONS {
            return Err(Error::InvalidArgument(format!("grid action {action}")));
        }
        Ok(())
    }

    /// Samples one move. Always consumes exactly one `u64` from `rng`.
    pub fn step<R: Rng + ?Sized>(&self, cell: usize, action: usize, rng: &mut R) -> Result<GridOutcome> {
        self.check(cell, action)?;
        let u: f64 = rng.random();
        if let Some(r) = self.layout.exit_reward(cell) {
            return Ok(GridOutcome {
                prob: 1.0,
                next: cell,
                reward: r * self.reward_scale,
                terminal: true,
            });
        }
        let branches = self.branches(cell, action);
        let mut acc = 0.0;
        let mut chosen = branches.last().expect("non-empty").1;
        for &(p, next) in &branches {
            acc += p;
            if p > 0.0 && u < acc {
                chosen = next;
                break;
            }
        }
        Ok(GridOutcome {
            prob: 1.0,
            next: chosen,
            reward: self.layout.step_reward * self.reward_scale,
            terminal: false,
        })
    }

    /// Exact next-cell distribution; zero-probability branches are dropped and
    /// branches landing in the same cell are merged.
    pub fn outcomes(&self, cell: usize, action: usize) -> Result<Vec<GridOutcome>> {
        self.check(cell, action)?;
        if let Some(r) = self.layout.exit_reward(cell) {
            return Ok(vec![GridOutcome {
                prob: 1.0,
                next: cell,
                reward: r * self.reward_scale,
                terminal: true,
            }]);
        }
        let mut out: Vec<GridOutcome> = Vec::new();
        for (p, next) in self.branches(cell, action) {
            if p <= 0.0 {
                continue;
            }
            if let Some(o) = out.iter_mut().find(|o| o.next == next) {
                o.prob += p;
            } else {
                out.push(GridOutcome {
                    prob: p,
                    next,
                    reward: self.layout.step_reward * self.reward_scale,
                    terminal: false,
                });
            }
        }
        Ok(out)
    }
}

/// Result of value iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct DpSolution {
    pub values: Vec<f64>,
    pub q: Vec<[f64; NUM_ACTIONS]>,
    pub policy: Vec<usize>,
    pub iterations: usize,
    pub gamma: f64,
}

impl DpSolution {
    /// Max-norm Bellman optimality residual of `values`.
    pub fn residual(&self, grid: &GridSlip) -> f64 {
        let backed = bellman_backup(grid, &self.values, self.gamma);
        backed
            .iter()
            .zip(&self.values)
            .map(|((_, v), w)| (v - w).abs())
            .fold(0.0, f64::max)
    }
}

fn q_values(grid: &GridSlip, values: &[f64], gamma: f64, cell: usize) -> [f64; NUM_ACTIONS] {
    let mut q = [0.0; NUM_ACTIONS];
    for (a, qa) in q.iter_mut().enumerate() {
        *qa = grid
            .outcomes(cell, a)
            .expect("valid cell")
            .iter()
            .map(|o| {
                let cont = if o.terminal { 0.0 } else { values[o.next] };
                o.prob * (o.reward + gamma * cont)
            })
            .sum();
    }
    q
}

fn greedy(q: &[f64; NUM_ACTIONS]) -> usize {
    let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    q.iter().position(|&v| v >= best - 1e-12).expect("finite q")
}

fn bellman_backup(grid: &GridSlip, values: &[f64], gamma: f64) -> Vec<([f64; NUM_ACTIONS], f64)> {
    (0..grid.num_states())
        .map(|s| {
            let q = q_values(grid, values, gamma, s);
            let v = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (q, v)
        })
        .collect()
}

/// Value iteration to a sup-norm fixed point within `1e-12`. Ties in the
/// greedy policy go to the lowest action index.
pub fn value_iteration(grid: &GridSlip, gamma: f64) -> Result<DpSolution> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("discount {gamma} not in [0, 1)")));
    }
    let n = grid.num_states();
    let mut values = vec![0.0; n];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let backed = bellman_backup(grid, &values, gamma);
        let delta = backed
            .iter()
            .zip(&values)
            .map(|((_, v), w)| (v - w).abs())
            .fold(0.0, f64::max);
        values = backed.iter().map(|(_, v)| *v).collect();
        if delta <= 1e-12 || iterations >= 1_000_000 {
            break;
        }
    }
    let q: Vec<_> = (0..n).map(|s| q_values(grid, &values, gamma, s)).collect();
    let policy = q.iter().map(greedy).collect();
    Ok(DpSolution {
        values,
        q,
        policy,
        iterations,
        gamma,
    })
}

/// Discounted values of a stochastic policy `probs[s][a]`, by iterative
/// policy evaluation to `1e-12`.
pub fn policy_values(grid: &GridSlip, probs: &[[f64; NUM_ACTIONS]], gamma: f64) -> Vec<f64> {
    let n = grid.num_states();
    let mut values = vec![0.0; n];
    loop {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                let q = q_values(grid, &values, gamma, s);
                q.iter().zip(&probs[s]).map(|(q, p)| q * p).sum()
            })
            .collect();
        let delta = next
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        if delta <= 1e-12 {
            return values;
        }
    }
}

/// Exact expected undiscounted return of a stochastic policy over `horizon`
/// steps, averaged over the uniform start distribution.
pub fn expected_return(grid: &GridSlip, probs: &[[f64; NUM_ACTIONS]], horizon: usize) -> f64 {
    let n = grid.num_states();
    // to_go[s] = expected return from s with k steps left
    let mut to_go = vec![0.0; n];
    for _ in 0..horizon {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..NUM_ACTIONS)
                    .map(|a| {
                        let p = probs[s][a];
                        if p == 0.0 {
                            return 0.0;
                        }
                        let v: f64 = grid
                            .outcomes(s, a)
                            .expect("valid cell")
                            .iter()
                            .map(|o| o.prob * (o.reward + if o.terminal { 0.0 } else { to_go[o.next] }))
                            .sum();
                        p * v
                    })
                    .sum()
            })
            .collect();
        to_go = next;
    }
    let starts = grid.layout.start_cells();
    starts.iter().map(|&s| to_go[s]).sum::<f64>() / starts.len() as f64
}

pub fn greedy_probs(policy: &[usize]) -> Vec<[f64; NUM_ACTIONS]> {
    policy
        .iter()
        .map(|&a| {
            let mut p = [0.0; NUM_ACTIONS];
            p[a] = 1.0;
            p
        })
        .collect()
}

pub fn epsilon_greedy_probs(policy: &[usize], epsilon: f64) -> Vec<[f64; NUM_ACTIONS]> {
    policy
        .iter()
        .map(|&a| {
            let mut p = [epsilon / NUM_ACTIONS as f64; NUM_ACTIONS];
            p[a] += 1.0 - epsilon;
            p
        })
        .collect()
}
