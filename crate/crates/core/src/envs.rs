//! Environment generators: the two-branch chain, garnets and a slippery
//! gridworld.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mdp::{PolicyTable, TabularMdp};

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// State layout of [`build_chain_mdp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainLayout {
    pub num_left: usize,
    pub num_right: usize,
}

impl ChainLayout {
    pub const START: usize = 0;

    pub fn num_states(&self) -> usize {
        self.num_left + self.num_right + 3
    }

    /// `i`-th state of the left segment, counted from the start (1-based).
    pub fn left(&self, i: usize) -> usize {
        i
    }

    pub fn left_terminal(&self) -> usize {
        self.num_left + 1
    }

    pub fn right(&self, i: usize) -> usize {
        self.num_left + 1 + i
    }

    pub fn right_terminal(&self) -> usize {
        self.num_left + self.num_right + 2
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        s == self.left_terminal() || s == self.right_terminal()
    }

    /// Position on the line: negative on the left, positive on the right.
    fn position(&self, s: usize) -> i64 {
        if s == Self::START {
            0
        } else if s <= self.left_terminal() {
            -(s as i64)
        } else {
            (s - self.left_terminal()) as i64
        }
    }

    fn state_at(&self, pos: i64) -> usize {
        if pos <= 0 {
            (-pos) as usize
        } else {
            self.left_terminal() + pos as usize
        }
    }

    /// Always move away from the start along the branch chosen at `s0`.
    pub fn branch_policy(&self, go_left: bool) -> Result<PolicyTable> {
        let a = if go_left { LEFT } else { RIGHT };
        let actions: Vec<usize> = (0..self.num_states())
            .map(|s| match self.position(s) {
                0 => a,
                p if p < 0 => LEFT,
                _ => RIGHT,
            })
            .collect();
        PolicyTable::deterministic(&actions, 2)
    }

    /// Takes the left branch at the start with probability `p_left` and moves
    /// forward deterministically inside either segment.
    pub fn split_policy(&self, p_left: f64) -> Result<PolicyTable> {
        if !(0.0..=1.0).contains(&p_left) {
            return invalid(format!("p_left must lie in [0, 1], got {p_left}"));
        }
        let rows: Vec<Vec<f64>> = (0..self.num_states())
            .map(|s| match self.position(s) {
                0 => vec![p_left, 1.0 - p_left],
                p if p < 0 => vec![1.0, 0.0],
                _ => vec![0.0, 1.0],
            })
            .collect();
        PolicyTable::from_rows(&rows)
    }
}

/// Line of states `T_L <- L_k .. L_1 <- s0 -> R_1 .. R_k -> T_R`.
///
/// Action 0 moves one step left and action 1 one step right. Entering `T_L`
/// pays `reward_left`, entering `T_R` pays `reward_right`; every other
/// transition pays 0 and both terminals absorb. The start state is `s0`.
pub fn build_chain_mdp(
    num_left: usize,
    num_right: usize,
    reward_left: f64,
    reward_right: f64,
    discount: f64,
) -> Result<TabularMdp> {
    if num_left == 0 || num_right == 0 {
        return invalid("chain segments need at least one state each");
    }
    let layout = ChainLayout {
        num_left,
        num_right,
    };
    let n = layout.num_states();
    let mut p = DMatrix::zeros(2 * n, n);
    let mut r = DVector::zeros(2 * n);
    for s in 0..n {
        for a in [LEFT, RIGHT] {
            let i = 2 * s + a;
            if layout.is_terminal(s) {
                p[(i, s)] = 1.0;
                continue;
            }
            let step = if a == LEFT { -1 } else { 1 };
            let next = layout.state_at(layout.position(s) + step);
            p[(i, next)] = 1.0;
            if next == layout.left_terminal() {
                r[i] = reward_left;
            } else if next == layout.right_terminal() {
                r[i] = reward_right;
            }
        }
    }
    let mut rho = DVector::zeros(n);
    rho[ChainLayout::START] = 1.0;
    TabularMdp::new(n, 2, p, r, discount, rho)
}

/// Garnet with discount 0.9 and a uniform start distribution.
pub fn build_garnet(num_states: usize, num_actions: usize, branching: usize, seed: u64) -> Result<TabularMdp> {
    garnet(num_states, num_actions, branching, 0.9, seed)
}

/// Each pair moves to `branching` distinct uniformly chosen states with
/// Dirichlet(1) weights; rewards are uniform on [-1, 1].
pub fn garnet(
    num_states: usize,
    num_actions: usize,
    branching: usize,
    discount: f64,
    seed: u64,
) -> Result<TabularMdp> {
    if branching == 0 || branching > num_states {
        return invalid(format!(
            "branching must lie in 1..={num_states}, got {branching}"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = num_states * num_actions;
    let mut p = DMatrix::zeros(pairs, num_states);
    for i in 0..pairs {
        let targets = rand::seq::index::sample(&mut rng, num_states, branching);
        let weights: Vec<f64> = (0..branching).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        for (t, w) in targets.iter().zip(&weights) {
            p[(i, t)] = w / total;
        }
        // Force the row onto the simplex after division rounding.
        let drift = 1.0 - p.row(i).sum();
        p[(i, targets.index(0))] += drift;
    }
    let r = DVector::from_fn(pairs, |_, _| rng.random_range(-1.0..=1.0));
    let rho = DVector::from_element(num_states, 1.0 / num_states as f64);
    TabularMdp::new(num_states, num_actions, p, r, discount, rho)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub slip: f64,
    pub discount: f64,
}

/// Four-action gridworld. The agent starts in the top-left cell, the goal is
/// the bottom-right cell (absorbing, +1 on entry). With probability `slip`
/// the move goes in a uniformly random other direction. Walls block moves.
pub fn build_gridworld(spec: &GridSpec) -> Result<TabularMdp> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 || w * h < 2 {
        return invalid("gridworld needs at least two cells");
    }
    if !(0.0..=1.0).contains(&spec.slip) {
        return invalid(format!("slip must lie in [0, 1], got {}", spec.slip));
    }
    let n = w * h;
    let goal = n - 1;
    let moves: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
    let target = |s: usize, dir: usize| -> usize {
        let (x, y) = ((s % w) as i64, (s / w) as i64);
        let (nx, ny) = (x + moves[dir].0, y + moves[dir].1);
        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
            s
        } else {
            ny as usize * w + nx as usize
        }
    };
    let mut p = DMatrix::zeros(4 * n, n);
    let mut r = DVector::zeros(4 * n);
    for s in 0..n {
        for a in 0..4 {
            let i = 4 * s + a;
            if s == goal {
                p[(i, s)] = 1.0;
                continue;
            }
            for dir in 0..4 {
                let prob = if dir == a { 1.0 - spec.slip } else { spec.slip / 3.0 };
                p[(i, target(s, dir))] += prob;
            }
            r[i] = p[(i, goal)];
        }
    }
    let mut rho = DVector::zeros(n);
    rho[0] = 1.0;
    TabularMdp::new(n, 4, p, r, spec.discount, rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::optimal_policy;

    #[test]
    fn short_chain_values() {
        let mdp = build_chain_mdp(1, 1, 1.0, 0.0, 0.9).unwrap();
        let (pi, sol) = optimal_policy(&mdp, 1e-12).unwrap();
        assert_eq!(pi.prob(0, LEFT), 1.0);
        assert!((sol.v[0] - 0.9).abs() < 1e-12);

        let sym = build_chain_mdp(2, 2, 0.5, 0.5, 0.9).unwrap();
        let (pi, _) = optimal_policy(&sym, 1e-12).unwrap();
        assert_eq!(pi.prob(0, LEFT), 1.0);
    }

    #[test]
    fn chain_layout_moves() {
        let layout = ChainLayout {
            num_left: 2,
            num_right: 3,
        };
        let mdp = build_chain_mdp(2, 3, 1.0, 0.5, 0.9).unwrap();
        assert_eq!(mdp.num_states(), 8);
        let next = |s: usize, a: usize| {
            let row = mdp.transition().row(mdp.index(s, a));
            row.iter().position(|&x| x == 1.0).unwrap()
        };
        assert_eq!(next(0, LEFT), layout.left(1));
        assert_eq!(next(layout.left(2), LEFT), layout.left_terminal());
        assert_eq!(next(layout.left(1), RIGHT), 0);
        assert_eq!(next(0, RIGHT), layout.right(1));
        assert_eq!(next(layout.right(3), RIGHT), layout.right_terminal());
        assert_eq!(mdp.reward()[mdp.index(layout.right(3), RIGHT)], 0.5);
        assert_eq!(mdp.reward()[mdp.index(layout.left(2), LEFT)], 1.0);
    }

    #[test]
    fn garnet_determinism_and_shape() {
        let a = build_garnet(6, 3, 2, 4).unwrap();
        let b = build_garnet(6, 3, 2, 4).unwrap();
        assert_eq!(a, b);
        for i in 0..18 {
            assert_eq!(a.transition().row(i).iter().filter(|&&x| x > 0.0).count(), 2);
        }
        assert!(build_garnet(3, 2, 4, 0).is_err());
    }

    #[test]
    fn gridworld_reaches_goal() {
        let mdp = build_gridworld(&GridSpec {
            width: 3,
            height: 3,
            slip: 0.1,
            discount: 0.95,
        })
        .unwrap();
        let (_, sol) = optimal_policy(&mdp, 1e-10).unwrap();
        assert!(sol.v[0] > 0.0);
        assert!(sol.v[8].abs() < 1e-12);
    }
}
