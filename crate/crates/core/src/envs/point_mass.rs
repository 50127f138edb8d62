use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARENA: f64 = 1.0;
pub const DT: f64 = 0.05;
pub const BASE_DRAG: f64 = 0.1;
pub const BASE_MASS: f64 = 1.0;
pub const GOAL: [f64; 2] = [0.5, 0.5];

/// A 2-D point mass pushed by a bounded force inside `[-1, 1]^2`.
///
/// Explicit Euler with step `DT`: the position advances with the current
/// velocity, then the velocity takes the force impulse minus a linear drag
/// impulse `drag * v`, both divided by the mass. Hitting a wall clamps the
/// position and zeroes that velocity component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMass {
    pub mass: f64,
    pub drag: f64,
    /// Per-axis bound on the effective action.
    pub action_limit: [f64; 2],
    pub goal: [f64; 2],
    pub reward_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointMassStep {
    pub next: [f64; 4],
    pub reward: f64,
    pub clipped: bool,
}

impl PointMass {
    pub fn new(reward_scale: f64) -> Self {
        PointMass {
            mass: BASE_MASS,
            drag: BASE_DRAG,
            action_limit: [1.0, 1.0],
            goal: GOAL,
            reward_scale,
        }
    }

    pub fn check_state(state: &[f64; 4]) -> Result<()> {
        let tol = 1e-9;
        if state.iter().any(|v| !v.is_finite())
            || state[0].abs() > ARENA + tol
            || state[1].abs() > ARENA + tol
        {
            return Err(Error::InvalidState(format!("point mass state {state:?}")));
        }
        Ok(())
    }

    pub fn reward_at(&self, pos: [f64; 2]) -> f64 {
        let dx = pos[0] - self.goal[0];
        let dy = pos[1] - self.goal[1];
        -(dx * dx + dy * dy).sqrt() * self.reward_scale
    }

    pub fn step(&self, state: &[f64; 4], action: &[f64]) -> Result<PointMassStep> {
        Self::check_state(state)?;
        if action.len() != 2 {
            return Err(Error::dim("point mass action", 2, action.len()));
        }
        let mut clipped = false;
        let mut force = [0.0; 2];
        for i in 0..2 {
            let a = if action[i].is_finite() { action[i] } else { 0.0 };
            if !(-1.0..=1.0).contains(&a) || !action[i].is_finite() {
                clipped = true;
            }
            let lim = self.action_limit[i];
            force[i] = a.clamp(-1.0, 1.0).clamp(-lim, lim);
        }
        let [x, y, vx, vy] = *state;
        let mut pos = [x + DT * vx, y + DT * vy];
        let mut vel = [
            vx + (DT * force[0] - self.drag * vx) / self.mass,
            vy + (DT * force[1] - self.drag * vy) / self.mass,
        ];
        for i in 0..2 {
            if pos[i] > ARENA {
                pos[i] = ARENA;
                vel[i] = 0.0;
            } else if pos[i] < -ARENA {
                pos[i] = -ARENA;
                vel[i] = 0.0;
            }
        }
        let next = [pos[0], pos[1], vel[0], vel[1]];
        Ok(PointMassStep {
            next,
            reward: self.reward_at(pos),
            clipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn at_rest_on_goal_has_zero_reward() {
        let env = PointMass::new(1.0);
        let s = env.step(&[GOAL[0], GOAL[1], 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s.reward, 0.0);
        assert_eq!(s.next, [GOAL[0], GOAL[1], 0.0, 0.0]);
    }

    #[test]
    fn doubled_mass_halves_velocity_change() {
        let light = PointMass::new(1.0);
        let mut heavy = PointMass::new(1.0);
        heavy.mass = 2.0;
        let s = [0.1, -0.2, 0.3, -0.1];
        let a = [0.7, -0.4];
        let dl = light.step(&s, &a).unwrap().next;
        let dh = heavy.step(&s, &a).unwrap().next;
        for i in 2..4 {
            let l = dl[i] - s[i];
            let h = dh[i] - s[i];
            assert!((h - 0.5 * l).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_box_action_is_clipped_and_flagged() {
        let env = PointMass::new(1.0);
        let s = [0.0; 4];
        let a = env.step(&s, &[3.0, 0.0]).unwrap();
        let b = env.step(&s, &[1.0, 0.0]).unwrap();
        assert!(a.clipped && !b.clipped);
        assert_eq!(a.next, b.next);
    }

    #[test]
    fn walls_clamp_position_and_stop_motion() {
        let env = PointMass::new(1.0);
        let s = env.step(&[0.99, 0.0, 1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(s.next[0], 1.0);
        assert_eq!(s.next[2], 0.0);
    }

    #[test]
    fn rejects_states_outside_arena() {
        let env = PointMass::new(1.0);
        assert!(env.step(&[1.5, 0.0, 0.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(env.step(&[0.0, f64::NAN, 0.0, 0.0], &[0.0, 0.0]).is_err());
    }
}
