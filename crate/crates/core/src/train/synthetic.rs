//! A two-state decision process with a closed-form optimum, for checking
//! that the learner converges.

use rand::Rng as _;

use crate::qnet::NetworkConfig;
use crate::seed::Rng;
use crate::train::{EnvStep, Environment, TrainError};

/// Two states, two actions. In state 0, action 0 pays 1 and stays, action 1
/// pays 0 and moves to state 1. In state 1, action 0 pays 0 and returns to
/// state 0, action 1 pays 2 and stays. Episodes are cut after `horizon`
/// steps without being terminal, so the discounted optimum is that of the
/// infinite-horizon process.
#[derive(Debug, Clone)]
pub struct TwoStateMdp {
    state: usize,
    t: u32,
    pub horizon: u32,
}

impl Default for TwoStateMdp {
    fn default() -> Self {
        Self::new()
    }
}

impl TwoStateMdp {
    pub fn new() -> Self {
        Self {
            state: 0,
            t: 0,
            horizon: 20,
        }
    }

    /// One-hot code laid out for [`TwoStateMdp::network`].
    pub fn encode(s: usize) -> Vec<f64> {
        if s == 0 {
            vec![1.0, 0.0, 0.0]
        } else {
            vec![0.0, 1.0, 0.0]
        }
    }

    /// `(next state, reward)`.
    pub fn transition(s: usize, a: usize) -> (usize, f64) {
        match (s, a) {
            (0, 0) => (0, 1.0),
            (0, _) => (1, 0.0),
            (_, 0) => (0, 0.0),
            _ => (1, 2.0),
        }
    }

    pub fn network() -> NetworkConfig {
        NetworkConfig {
            slots: 1,
            slot_features: 1,
            ego_features: 2,
            encoder_hidden: 2,
            encoder_out: 2,
            ego_hidden: 16,
            trunk: 16,
            actions: 2,
        }
    }

    /// `Q*` by value iteration run to a fixed point.
    pub fn optimal_q(gamma: f64) -> [[f64; 2]; 2] {
        let mut q = [[0.0f64; 2]; 2];
        loop {
            let v = [q[0][0].max(q[0][1]), q[1][0].max(q[1][1])];
            let mut next = q;
            for (s, row) in next.iter_mut().enumerate() {
                for (a, cell) in row.iter_mut().enumerate() {
                    let (n, r) = Self::transition(s, a);
                    *cell = r + gamma * v[n];
                }
            }
            if next == q {
                return q;
            }
            q = next;
        }
    }
}

impl Environment for TwoStateMdp {
    fn action_count(&self) -> usize {
        2
    }

    fn reset(&mut self, rng: &mut Rng) -> Result<Vec<f64>, TrainError> {
        self.state = rng.gen_range(0..2);
        self.t = 0;
        Ok(Self::encode(self.state))
    }

    fn step(&mut self, action: usize, _rng: &mut Rng) -> Result<EnvStep, TrainError> {
        let (n, r) = Self::transition(self.state, action);
        self.state = n;
        self.t += 1;
        Ok(EnvStep {
            next_state: Self::encode(n),
            reward: r,
            done: false,
            truncated: self.t >= self.horizon,
            outcome: None,
        })
    }
}
