//! Source/target environment pairs that differ only in their dynamics, plus
//! exact oracles (value iteration, expected backups, set-state replay).

pub mod grid;
pub mod point_mass;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
pub use grid::{DpSolution, GridLayout, GridSlip};
pub use point_mass::PointMass;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GridSlip,
    PointMass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    Friction,
    Morphology,
    Kinematic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub family: Family,
    pub shift_kind: ShiftKind,
    pub shift_level: f64,
    pub horizon: usize,
    pub reward_scale: f64,
    pub seed: u64,
    /// Side length of the grid (grid_slip only).
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
}

fn default_grid_size() -> usize {
    8
}

impl EnvSpec {
    pub fn grid_slip(shift_kind: ShiftKind, shift_level: f64) -> Self {
        EnvSpec {
            family: Family::GridSlip,
            shift_kind,
            shift_level,
            horizon: 100,
            reward_scale: 1.0,
            seed: 0,
            grid_size: 8,
        }
    }

    pub fn point_mass(shift_kind: ShiftKind, shift_level: f64) -> Self {
        EnvSpec {
            family: Family::PointMass,
            shift_kind,
            shift_level,
            horizon: 200,
            reward_scale: 1.0,
            seed: 0,
            grid_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::UnsupportedEnv("horizon must be >= 1".into()));
        }
        if !self.reward_scale.is_finite() || self.reward_scale <= 0.0 {
            return Err(Error::UnsupportedEnv(format!("reward_scale {}", self.reward_scale)));
        }
        let level = self.shift_level;
        let ok = match (self.family, self.shift_kind) {
            (_, ShiftKind::None) => true,
            (Family::GridSlip, ShiftKind::Friction | ShiftKind::Kinematic) => (0.0..=1.0).contains(&level),
            (Family::GridSlip, ShiftKind::Morphology) => {
                return Err(Error::UnsupportedEnv(
                    "grid_slip has no morphology shift".into(),
                ))
            }
            (Family::PointMass, ShiftKind::Friction | ShiftKind::Morphology) => level > 0.0 && level <= 100.0,
            (Family::PointMass, ShiftKind::Kinematic) => (1.0..=100.0).contains(&level),
        };
        if !ok {
            return Err(Error::UnsupportedEnv(format!(
                "shift level {level} out of bounds for {:?}/{:?}",
                self.family, self.shift_kind
            )));
        }
        if self.family == Family::GridSlip && self.grid_size < 2 {
            return Err(Error::UnsupportedEnv("grid_size must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvState {
    Grid(usize),
    PointMass([f64; 4]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub terminal: bool,
    /// The action was outside the action box and has been clipped.
    pub clipped: bool,
}

/// One branch of an exact transition distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub prob: f64,
    pub next_state: EnvState,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dynamics {
    Grid(GridSlip),
    PointMass(PointMass),
}

/// One side (source or target) of an environment pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    pub spec: EnvSpec,
    pub dynamics: Dynamics,
}

/// Builds the (source, target) pair for `base`. The source always runs the
/// unshifted dynamics.
pub fn make_pair(base: &EnvSpec) -> Result<(Env, Env)> {
    base.validate()?;
    let level = base.shift_level;
    match base.family {
        Family::GridSlip => {
            let layout = GridLayout::cliff(base.grid_size);
            let source = GridSlip::new(layout.clone(), 0.0, 0.0, base.reward_scale)?;
            let (slip, broken) = match base.shift_kind {
                ShiftKind::None => (0.0, 0.0),
                ShiftKind::Friction => (level, 0.0),
                ShiftKind::Kinematic => (0.0, level),
                ShiftKind::Morphology => unreachable!("rejected by validate"),
            };
            let target = GridSlip::new(layout, slip, broken, base.reward_scale)?;
            Ok((
                Env::new(base.clone(), Dynamics::Grid(source)),
                Env::new(base.clone(), Dynamics::Grid(target)),
            ))
        }
        Family::PointMass => {
            let source = PointMass::new(base.reward_scale);
            let mut target = source.clone();
            match base.shift_kind {
                ShiftKind::None => {}
                ShiftKind::Friction => target.drag *= level,
                ShiftKind::Morphology => target.mass *= level,
                ShiftKind::Kinematic => target.action_limit[1] = 1.0 / level,
            }
            Ok((
                Env::new(base.clone(), Dynamics::PointMass(source)),
                Env::new(base.clone(), Dynamics::PointMass(target)),
            ))
        }
    }
}

impl Env {
    pub fn new(spec: EnvSpec, dynamics: Dynamics) -> Self {
        Env { spec, dynamics }
    }

    /// A grid environment over an explicit layout (used by oracles and tests).
    pub fn grid(layout: GridLayout, slip: f64, horizon: usize) -> Result<Self> {
        let mut spec = EnvSpec::grid_slip(ShiftKind::Friction, slip);
        spec.horizon = horizon;
        spec.grid_size = layout.rows.max(layout.cols);
        Ok(Env::new(spec, Dynamics::Grid(GridSlip::new(layout, slip, 0.0, 1.0)?)))
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn state_dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::Grid(g) => g.num_states(),
            Dynamics::PointMass(_) => 4,
        }
    }

    pub fn action_dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::Grid(_) => grid::NUM_ACTIONS,
            Dynamics::PointMass(_) => 2,
        }
    }

    /// Lower and upper bound of every action coordinate.
    pub fn action_box(&self) -> (f64, f64) {
        match &self.dynamics {
            Dynamics::Grid(_) => (0.0, 1.0),
            Dynamics::PointMass(_) => (-1.0, 1.0),
        }
    }

    pub fn as_grid(&self) -> Option<&GridSlip> {
        match &self.dynamics {
            Dynamics::Grid(g) => Some(g),
            Dynamics::PointMass(_) => None,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        match &self.dynamics {
            Dynamics::Grid(g) => {
                let starts = g.layout.start_cells();
                EnvState::Grid(starts[rng.random_range(0..starts.len())])
            }
            Dynamics::PointMass(_) => EnvState::PointMass([
                rng.random_range(-point_mass::ARENA..point_mass::ARENA),
                rng.random_range(-point_mass::ARENA..point_mass::ARENA),
                0.0,
                0.0,
            ]),
        }
    }

    /// Network-facing encoding of a state: one-hot cell for grids, raw
    /// `(x, y, vx, vy)` for the point mass.
    pub fn features(&self, state: &EnvState) -> Vec<f64> {
        match state {
            EnvState::Grid(c) => {
                let mut v = vec![0.0; self.state_dim()];
                v[*c] = 1.0;
                v
            }
            EnvState::PointMass(s) => s.to_vec(),
        }
    }

    pub fn decode(&self, features: &[f64]) -> Result<EnvState> {
        if features.len() != self.state_dim() {
            return Err(Error::dim("state features", self.state_dim(), features.len()));
        }
        match &self.dynamics {
            Dynamics::Grid(_) => {
                let ones: Vec<usize> = features
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, _)| i)
                    .collect();
                match ones.as_slice() {
                    [c] if features[*c] == 1.0 => Ok(EnvState::Grid(*c)),
                    _ => Err(Error::InvalidState("grid state is not one-hot".into())),
                }
            }
            Dynamics::PointMass(_) => {
                let s = [features[0], features[1], features[2], features[3]];
                PointMass::check_state(&s)?;
                Ok(EnvState::PointMass(s))
            }
        }
    }

    /// Encodes a discrete grid action as a one-hot vector.
    pub fn grid_action(action: usize) -> Vec<f64> {
        let mut v = vec![0.0; grid::NUM_ACTIONS];
        v[action] = 1.0;
        v
    }

    /// Grid actions are the argmax of the (clipped) action vector.
    fn grid_action_index(action: &[f64]) -> (usize, bool) {
        let mut clipped = false;
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &a) in action.iter().enumerate() {
            let c = if a.is_finite() { a.clamp(0.0, 1.0) } else { 0.0 };
            if c != a {
                clipped = true;
            }
            if c > best_v {
                best_v = c;
                best = i;
            }
        }
        (best, clipped)
    }

    pub fn step<R: Rng + ?Sized>(&self, state: &EnvState, action: &[f64], rng: &mut R) -> Result<StepResult> {
        if action.len() != self.action_dim() {
            return Err(Error::dim("action", self.action_dim(), action.len()));
        }
        match (&self.dynamics, state) {
            (Dynamics::Grid(g), EnvState::Grid(cell)) => {
                let (a, clipped) = Self::grid_action_index(action);
                let o = g.step(*cell, a, rng)?;
                Ok(StepResult {
                    next_state: EnvState::Grid(o.next),
                    reward: o.reward,
                    terminal: o.terminal,
                    clipped,
                })
            }
            (Dynamics::PointMass(p), EnvState::PointMass(s)) => {
                let r = p.step(s, action)?;
                Ok(StepResult {
                    next_state: EnvState::PointMass(r.next),
                    reward: r.reward,
                    terminal: false,
                    clipped: r.clipped,
                })
            }
            _ => Err(Error::InvalidState("state does not belong to this environment".into())),
        }
    }

    /// Exact transition distribution from `(state, action)`.
    pub fn outcomes(&self, state: &EnvState, action: &[f64]) -> Result<Vec<Outcome>> {
        if action.len() != self.action_dim() {
            return Err(Error::dim("action", self.action_dim(), action.len()));
        }
        match (&self.dynamics, state) {
            (Dynamics::Grid(g), EnvState::Grid(cell)) => {
                let (a, _) = Self::grid_action_index(action);
                Ok(g.outcomes(*cell, a)?
                    .into_iter()
                    .map(|o| Outcome {
                        prob: o.prob,
                        next_state: EnvState::Grid(o.next),
                        reward: o.reward,
                        terminal: o.terminal,
                    })
                    .collect())
            }
            (Dynamics::PointMass(_), EnvState::PointMass(_)) => {
                let mut rng = rng::Rng::seed_from_u64(0);
                let r = self.step(state, action, &mut rng)?;
                Ok(vec![Outcome {
                    prob: 1.0,
                    next_state: r.next_state,
                    reward: r.reward,
                    terminal: r.terminal,
                }])
            }
            _ => Err(Error::InvalidState("state does not belong to this environment".into())),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        match &self.dynamics {
            Dynamics::Grid(g) => g.slip == 0.0 && g.broken_right == 0.0,
            Dynamics::PointMass(_) => true,
        }
    }
}

/// Exact value iteration on a tabular environment.
pub fn exact_dp(env: &Env, gamma: f64) -> Result<DpSolution> {
    match &env.dynamics {
        Dynamics::Grid(g) => grid::value_iteration(g, gamma),
        Dynamics::PointMass(_) => Err(Error::UnsupportedEnv(
            "exact dynamic programming needs a tabular environment".into(),
        )),
    }
}

/// One step from exactly `(state, action)` under `env`'s dynamics, with the
/// step's randomness seeded by `seed`. Nothing else is touched.
pub fn replay_once(env: &Env, state: &[f64], action: &[f64], seed: u64) -> Result<(f64, Vec<f64>)> {
    let r = replay_step(env, state, action, seed)?;
    Ok((r.reward, env.features(&r.next_state)))
}

/// `replay_once` keeping the full step result (terminal flag included).
pub fn replay_step(env: &Env, state: &[f64], action: &[f64], seed: u64) -> Result<StepResult> {
    let s = env.decode(state)?;
    let mut rng = rng::Rng::seed_from_u64(seed);
    env.step(&s, action, &mut rng)
}
