//! Task distributions and episode dynamics for the three environment
//! families, plus the optimal-action oracle used for supervised targets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

pub const DARKROOM_ACTIONS: usize = 5;
pub const ACT_UP: usize = 0;
pub const ACT_DOWN: usize = 1;
pub const ACT_LEFT: usize = 2;
pub const ACT_RIGHT: usize = 3;
pub const ACT_STAY: usize = 4;

pub const DEFAULT_NOISE_STD: f64 = 0.3;

/// Multi-armed bandit task: per-arm Gaussian rewards with means in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct BanditTask {
    pub means: Vec<f64>,
    pub noise_std: f64,
    pub horizon: usize,
}

/// Linear bandit task: reward mean for action a is <omega, features[a]>.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBanditTask {
    pub omega: Vec<f64>,
    /// |A| rows of length d, shared across tasks within one experiment.
    pub features: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub horizon: usize,
}

/// Sparse-reward gridworld with two goal cells (reward 1 and reward 2).
#[derive(Debug, Clone, PartialEq)]
pub struct Darkroom2Task {
    pub grid_side: usize,
    pub goal1: (usize, usize),
    pub goal2: (usize, usize),
    pub start: (usize, usize),
    pub horizon: usize,
}

/// One interaction record; the unit of both the victim's and the attacker's
/// context. `observed_reward` is what the victim sees, `clean_reward` stays
/// on the attacker side.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub observed_reward: f64,
    pub clean_reward: f64,
    pub next_state: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Bandit,
    LinearBandit,
    Darkroom2,
}

impl EnvKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::Bandit => "bandit",
            EnvKind::LinearBandit => "linear",
            EnvKind::Darkroom2 => "darkroom2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Bandit(BanditTask),
    Linear(LinearBanditTask),
    Darkroom(Darkroom2Task),
}

impl Darkroom2Task {
    pub fn num_states(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn state_id(&self, cell: (usize, usize)) -> usize {
        cell.0 * self.grid_side + cell.1
    }

    pub fn cell(&self, state: usize) -> (usize, usize) {
        (state / self.grid_side, state % self.grid_side)
    }

    /// Movement clamped at walls.
    pub fn move_cell(&self, cell: (usize, usize), action: usize) -> (usize, usize) {
        let (r, c) = cell;
        let side = self.grid_side;
        match action {
            ACT_UP => (r.saturating_sub(1), c),
            ACT_DOWN => ((r + 1).min(side - 1), c),
            ACT_LEFT => (r, c.saturating_sub(1)),
            ACT_RIGHT => (r, (c + 1).min(side - 1)),
            _ => (r, c),
        }
    }

    /// Reward for occupying a cell: 1 on goal1, 2 on goal2, 0 elsewhere.
    pub fn cell_reward(&self, cell: (usize, usize)) -> f64 {
        if cell == self.goal2 {
            2.0
        } else if cell == self.goal1 {
            1.0
        } else {
            0.0
        }
    }
}

impl Task {
    pub fn kind(&self) -> EnvKind {
        match self {
            Task::Bandit(_) => EnvKind::Bandit,
            Task::Linear(_) => EnvKind::LinearBandit,
            Task::Darkroom(_) => EnvKind::Darkroom2,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            Task::Bandit(t) => t.means.len(),
            Task::Linear(t) => t.features.len(),
            Task::Darkroom(_) => DARKROOM_ACTIONS,
        }
    }

    /// Bandit families use a single dummy state id 0.
    pub fn num_states(&self) -> usize {
        match self {
            Task::Bandit(_) | Task::Linear(_) => 1,
            Task::Darkroom(t) => t.num_states(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Task::Bandit(t) => t.horizon,
            Task::Linear(t) => t.horizon,
            Task::Darkroom(t) => t.horizon,
        }
    }

    pub fn start_state(&self) -> usize {
        match self {
            Task::Bandit(_) | Task::Linear(_) => 0,
            Task::Darkroom(t) => t.state_id(t.start),
        }
    }

    /// Mean of the underlying reward for (state, action).
    pub fn mean_reward(&self, state: usize, action: usize) -> f64 {
        match self {
            Task::Bandit(t) => t.means[action],
            Task::Linear(t) => dot(&t.omega, &t.features[action]),
            Task::Darkroom(t) => {
                let next = t.move_cell(t.cell(state), action);
                t.cell_reward(next)
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Each mean drawn i.i.d. uniform on [0, 1].
pub fn sample_bandit_task(num_arms: usize, horizon: usize, rng: &mut ChaCha8Rng) -> BanditTask {
    assert!(num_arms >= 2);
    let means = (0..num_arms).map(|_| rng.gen::<f64>()).collect();
    BanditTask {
        means,
        noise_std: DEFAULT_NOISE_STD,
        horizon,
    }
}

/// Feature rows drawn from an isotropic normal with per-coordinate variance
/// 1/d. Sampled once per experiment and shared across that experiment's tasks.
pub fn sample_linear_features(num_actions: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    assert!(dim >= 1 && num_actions >= 2);
    let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).unwrap();
    (0..num_actions)
        .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
        .collect()
}

/// omega per task from the same N(0, I_d/d); features supplied by the caller.
pub fn sample_linear_task(
    features: &[Vec<f64>],
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> LinearBanditTask {
    let dim = features[0].len();
    let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).unwrap();
    let omega = (0..dim).map(|_| normal.sample(rng)).collect();
    LinearBanditTask {
        omega,
        features: features.to_vec(),
        noise_std: DEFAULT_NOISE_STD,
        horizon,
    }
}

/// Goals sampled uniformly among distinct cells; start fixed at grid center.
pub fn sample_darkroom2_task(
    grid_side: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Darkroom2Task {
    assert!(grid_side >= 2);
    let cells = grid_side * grid_side;
    let g1 = rng.gen_range(0..cells);
    let g2 = loop {
        let c = rng.gen_range(0..cells);
        if c != g1 {
            break c;
        }
    };
    let center = grid_side / 2;
    Darkroom2Task {
        grid_side,
        goal1: (g1 / grid_side, g1 % grid_side),
        goal2: (g2 / grid_side, g2 % grid_side),
        start: (center, center),
        horizon,
    }
}

/// Environment dynamics: returns (clean_reward, next_state).
pub fn step(task: &Task, state: usize, action: usize, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let num_actions = task.num_actions();
    if action >= num_actions {
        return Err(Error::InvalidAction {
            action,
            num_actions,
        });
    }
    match task {
        Task::Bandit(t) => {
            let noise = Normal::new(0.0, t.noise_std).unwrap().sample(rng);
            Ok((t.means[action] + noise, 0))
        }
        Task::Linear(t) => {
            let noise = Normal::new(0.0, t.noise_std).unwrap().sample(rng);
            Ok((dot(&t.omega, &t.features[action]) + noise, 0))
        }
        Task::Darkroom(t) => {
            let next = t.move_cell(t.cell(state), action);
            Ok((t.cell_reward(next), t.state_id(next)))
        }
    }
}

/// Oracle action: bandit/linear argmax of means (lowest index on ties);
/// Darkroom2 first step of a shortest path to goal2 (stay once there),
/// breaking ties by the smallest resulting row-major cell id.
pub fn optimal_action(task: &Task, state: usize) -> usize {
    match task {
        Task::Bandit(t) => argmax(&t.means),
        Task::Linear(t) => {
            let scores: Vec<f64> = t.features.iter().map(|f| dot(&t.omega, f)).collect();
            argmax(&scores)
        }
        Task::Darkroom(t) => {
            let cell = t.cell(state);
            if cell == t.goal2 {
                return ACT_STAY;
            }
            let dist = |c: (usize, usize)| -> usize {
                c.0.abs_diff(t.goal2.0) + c.1.abs_diff(t.goal2.1)
            };
            let here = dist(cell);
            let mut best: Option<(usize, usize)> = None; // (next_state_id, action)
            for a in 0..DARKROOM_ACTIONS {
                let next = t.move_cell(cell, a);
                if next != cell && dist(next) < here {
                    let id = t.state_id(next);
                    if best.map_or(true, |(bid, _)| id < bid) {
                        best = Some((id, a));
                    }
                }
            }
            best.expect("a shortest-path move exists off the goal").1
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Sum over steps of (optimal mean - chosen mean), computed on means.
/// For Darkroom the caller should report episode reward instead.
pub fn cumulative_regret(task: &Task, actions: &[usize]) -> f64 {
    let best = task.mean_reward(0, optimal_action(task, 0));
    actions
        .iter()
        .map(|&a| best - task.mean_reward(0, a))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn bandit_sampling_matches_distribution() {
        let mut rng = substream(1, &[0]);
        let t = sample_bandit_task(5, 500, &mut rng);
        assert_eq!(t.means.len(), 5);
        assert!(t.means.iter().all(|&m| (0.0..=1.0).contains(&m)));
        assert_eq!(t.noise_std, 0.3);

        // determinism of a seeded stream
        let t2 = sample_bandit_task(5, 500, &mut substream(1, &[0]));
        assert_eq!(t, t2);

        // law-of-large-numbers check against the uniform oracle
        let mut rng = substream(2, &[0]);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n / 5 {
            sum += sample_bandit_task(5, 1, &mut rng).means.iter().sum::<f64>();
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn linear_sampling_shapes_and_moments() {
        let mut rng = substream(3, &[0]);
        let features = sample_linear_features(10, 2, &mut rng);
        assert_eq!(features.len(), 10);
        assert!(features.iter().all(|f| f.len() == 2));
        let t = sample_linear_task(&features, 200, &mut rng);
        assert_eq!(t.omega.len(), 2);

        let t2 = sample_linear_task(
            &sample_linear_features(10, 2, &mut substream(3, &[0])),
            200,
            &mut substream(3, &[0]),
        );
        // same stream position is consumed by features first, so re-derive:
        let mut r = substream(3, &[0]);
        let _ = sample_linear_features(10, 2, &mut r);
        let t3 = sample_linear_task(&features, 200, &mut r);
        assert_eq!(t.omega, t3.omega);
        drop(t2);

        // variance of omega coordinates should be 1/d = 0.5 within 5%
        let mut rng = substream(4, &[0]);
        let feats = sample_linear_features(2, 2, &mut rng);
        let n = 100_000;
        let mut sq = 0.0;
        for _ in 0..n / 2 {
            let t = sample_linear_task(&feats, 1, &mut rng);
            sq += t.omega.iter().map(|x| x * x).sum::<f64>();
        }
        let var = sq / n as f64;
        assert!((var - 0.5).abs() < 0.025, "var {var}");
    }

    #[test]
    fn darkroom_sampling_invariants() {
        let mut rng = substream(5, &[0]);
        for _ in 0..10_000 {
            let t = sample_darkroom2_task(5, 200, &mut rng);
            assert_ne!(t.goal1, t.goal2);
            assert!(t.goal1.0 < 5 && t.goal1.1 < 5);
            assert!(t.goal2.0 < 5 && t.goal2.1 < 5);
            assert_eq!(t.start, (2, 2));
        }
    }

    #[test]
    fn darkroom_goal_histogram_uniform() {
        let mut rng = substream(6, &[0]);
        let n = 100_000;
        let mut counts = [0usize; 25];
        for _ in 0..n {
            let t = sample_darkroom2_task(5, 1, &mut rng);
            counts[t.state_id(t.goal1)] += 1;
        }
        // chi-square against uniform with 24 dof; p > 0.001 <=> stat < 51.18
        let expected = n as f64 / 25.0;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(stat < 51.18, "chi-square stat {stat}");
    }

    #[test]
    fn step_semantics() {
        let t = Task::Darkroom(Darkroom2Task {
            grid_side: 5,
            goal1: (0, 0),
            goal2: (4, 2),
            start: (2, 2),
            horizon: 200,
        });
        let mut rng = substream(7, &[0]);
        // moving onto goal2 pays 2
        let s = match &t {
            Task::Darkroom(d) => d.state_id((3, 2)),
            _ => unreachable!(),
        };
        let (r, s2) = step(&t, s, ACT_DOWN, &mut rng).unwrap();
        assert_eq!(r, 2.0);
        assert_eq!(s2, 22);
        // wall clamping: left at column 0 stays put
        let s = match &t {
            Task::Darkroom(d) => d.state_id((1, 0)),
            _ => unreachable!(),
        };
        let (_, s2) = step(&t, s, ACT_LEFT, &mut rng).unwrap();
        assert_eq!(s2, s);
        // invalid action rejected
        assert!(step(&t, 0, 9, &mut rng).is_err());
    }

    #[test]
    fn bandit_step_monte_carlo() {
        let t = Task::Bandit(BanditTask {
            means: vec![0.7, 0.1],
            noise_std: 0.3,
            horizon: 500,
        });
        let mut rng = substream(8, &[0]);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += step(&t, 0, 0, &mut rng).unwrap().0;
        }
        assert!((sum / n as f64 - 0.7).abs() < 0.01);
    }

    #[test]
    fn darkroom_moves_stay_in_grid() {
        let d = Darkroom2Task {
            grid_side: 5,
            goal1: (0, 1),
            goal2: (4, 4),
            start: (2, 2),
            horizon: 200,
        };
        for s in 0..25 {
            for a in 0..DARKROOM_ACTIONS {
                let (r, c) = d.move_cell(d.cell(s), a);
                assert!(r < 5 && c < 5);
            }
        }
    }

    #[test]
    fn optimal_action_cases() {
        let t = Task::Bandit(BanditTask {
            means: vec![0.1, 0.9, 0.2, 0.5, 0.3],
            noise_std: 0.3,
            horizon: 1,
        });
        assert_eq!(optimal_action(&t, 0), 1);

        let t = Task::Linear(LinearBanditTask {
            omega: vec![1.0, 0.0],
            features: vec![vec![0.5, 0.2], vec![0.9, -0.1]],
            noise_std: 0.3,
            horizon: 1,
        });
        assert_eq!(optimal_action(&t, 0), 1);
    }

    /// BFS oracle for the darkroom shortest path.
    fn bfs_dist(d: &Darkroom2Task, from: (usize, usize), to: (usize, usize)) -> usize {
        use std::collections::VecDeque;
        let mut seen = vec![usize::MAX; d.num_states()];
        let mut q = VecDeque::new();
        seen[d.state_id(from)] = 0;
        q.push_back(from);
        while let Some(c) = q.pop_front() {
            if c == to {
                return seen[d.state_id(c)];
            }
            for a in 0..4 {
                let n = d.move_cell(c, a);
                if seen[d.state_id(n)] == usize::MAX {
                    seen[d.state_id(n)] = seen[d.state_id(c)] + 1;
                    q.push_back(n);
                }
            }
        }
        unreachable!()
    }

    #[test]
    fn darkroom_oracle_follows_shortest_paths() {
        let d = Darkroom2Task {
            grid_side: 5,
            goal1: (0, 0),
            goal2: (4, 2),
            start: (2, 2),
            horizon: 200,
        };
        let t = Task::Darkroom(d.clone());
        // start (2,2), goal2 (4,2): two "down" steps
        assert_eq!(optimal_action(&t, d.state_id((2, 2))), ACT_DOWN);
        let mut cell = (2, 2);
        let mut steps = 0;
        while cell != d.goal2 {
            let a = optimal_action(&t, d.state_id(cell));
            cell = d.move_cell(cell, a);
            steps += 1;
        }
        assert_eq!(steps, 2);
        assert_eq!(optimal_action(&t, d.state_id(d.goal2)), ACT_STAY);

        // every state: oracle step reduces BFS distance by exactly 1
        let mut rng = substream(9, &[0]);
        for _ in 0..50 {
            let d = sample_darkroom2_task(5, 200, &mut rng);
            let t = Task::Darkroom(d.clone());
            for s in 0..25 {
                let cell = d.cell(s);
                if cell == d.goal2 {
                    continue;
                }
                let a = optimal_action(&t, s);
                let next = d.move_cell(cell, a);
                assert_eq!(bfs_dist(&d, next, d.goal2) + 1, bfs_dist(&d, cell, d.goal2));
            }
        }
    }

    #[test]
    fn regret_computation() {
        let t = Task::Bandit(BanditTask {
            means: vec![0.2, 0.8],
            noise_std: 0.3,
            horizon: 10,
        });
        assert_eq!(cumulative_regret(&t, &[1; 10]), 0.0);
        let r = cumulative_regret(&t, &[0; 10]);
        assert!((r - 6.0).abs() < 1e-12);
        // non-negative for arbitrary sequences
        let mut rng = substream(10, &[0]);
        for _ in 0..100 {
            let seq: Vec<usize> = (0..20).map(|_| rng.gen_range(0..2)).collect();
            assert!(cumulative_regret(&t, &seq) >= 0.0);
        }
    }
}
