//! Token encodings for in-context decision making.
//!
//! Every sequence starts with a query token (state encoding only, action and
//! reward slots zeroed) followed by one token per context transition:
//!
//! - bandit: `[onehot(action) | reward]`, width `|A| + 1`
//! - linear bandit: `[features(action) | reward]`, width `d + 1`
//! - gridworld: `[onehot(s) | onehot(a) | reward | onehot(s')]`,
//!   width `2|S| + |A| + 1`

use crate::envs::Task;

/// One transition as seen by the in-context policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextEntry {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// Row-major `len x width` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub width: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl TokenSequence {
    fn with_capacity(width: usize, capacity: usize) -> Self {
        Self {
            width,
            len: 0,
            data: Vec::with_capacity(width * capacity),
        }
    }

    fn push(&mut self, token: &[f64]) {
        debug_assert_eq!(token.len(), self.width);
        self.data.extend_from_slice(token);
        self.len += 1;
    }

    pub fn token(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.width..(pos + 1) * self.width]
    }
}

/// A single supervised training example: tokens plus a per-position label
/// and loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub seq: TokenSequence,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenBatch {
    /// Label every position (query plus each context prefix) with the same
    /// target action.
    pub fn with_uniform_target(seq: TokenSequence, target: usize) -> Self {
        let len = seq.len;
        Self {
            seq,
            targets: vec![target; len],
            mask: vec![true; len],
        }
    }
}

pub fn token_width(task: &Task) -> usize {
    match task {
        Task::Bandit(b) => b.means.len() + 1,
        Task::Linear(l) => l.omega.len() + 1,
        Task::Darkroom(d) => 2 * d.num_states() + crate::envs::DARKROOM_ACTIONS + 1,
    }
}

/// Query token: state encoding only.
pub fn encode_query(task: &Task, query_state: usize) -> Vec<f64> {
    let mut token = vec![0.0f64; token_width(task)];
    if let Task::Darkroom(_) = task {
        token[query_state] = 1.0;
    }
    token
}

/// Context token for one transition.
pub fn encode_entry(task: &Task, entry: &ContextEntry) -> Vec<f64> {
    let width = token_width(task);
    let mut token = vec![0.0f64; width];
    match task {
        Task::Bandit(b) => {
            token[entry.action] = 1.0;
            token[b.means.len()] = entry.reward;
        }
        Task::Linear(l) => {
            let d = l.omega.len();
            for (i, &f) in l.features[entry.action].iter().enumerate() {
                token[i] = f;
            }
            token[d] = entry.reward;
        }
        Task::Darkroom(dr) => {
            let s = dr.num_states();
            let a = crate::envs::DARKROOM_ACTIONS;
            token[entry.state] = 1.0;
            token[s + entry.action] = 1.0;
            token[s + a] = entry.reward;
            token[s + a + 1 + entry.next_state] = 1.0;
        }
    }
    token
}

/// Build the full query-first sequence for a context.
pub fn encode_context(task: &Task, query_state: usize, entries: &[ContextEntry]) -> TokenSequence {
    let mut seq = TokenSequence::with_capacity(token_width(task), entries.len() + 1);
    seq.push(&encode_query(task, query_state));
    for entry in entries {
        seq.push(&encode_entry(task, entry));
    }
    seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BanditTask, Darkroom2Task, Task};

    fn bandit_task() -> Task {
        Task::Bandit(BanditTask {
            means: vec![0.1, 0.9, 0.5, 0.2, 0.7],
            noise_std: 0.3,
            horizon: 10,
        })
    }

    #[test]
    fn bandit_tokens_are_query_first_with_action_onehot() {
        let task = bandit_task();
        let entries = [
            ContextEntry { state: 0, action: 2, reward: 0.75, next_state: 0 },
            ContextEntry { state: 0, action: 4, reward: -0.25, next_state: 0 },
        ];
        let seq = encode_context(&task, 0, &entries);
        assert_eq!(seq.width, 6);
        assert_eq!(seq.len, 3);
        assert_eq!(seq.token(0), &[0.0; 6]);
        assert_eq!(seq.token(1), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.75]);
        assert_eq!(seq.token(2), &[0.0, 0.0, 0.0, 0.0, 1.0, -0.25]);
    }

    #[test]
    fn darkroom_token_round_trips_transition_fields() {
        let dr = Darkroom2Task {
            grid_side: 5,
            goal1: (0, 0),
            goal2: (4, 4),
            start: (2, 2),
            horizon: 20,
        };
        let task = Task::Darkroom(dr);
        let entry = ContextEntry { state: 7, action: 3, reward: 2.0, next_state: 8 };
        let token = encode_entry(&task, &entry);
        assert_eq!(token.len(), 56);
        // decode back
        let s = (0..25).find(|&i| token[i] == 1.0).unwrap();
        let a = (0..5).find(|&i| token[25 + i] == 1.0).unwrap();
        let r = token[30];
        let s2 = (0..25).find(|&i| token[31 + i] == 1.0).unwrap();
        assert_eq!((s, a, r, s2), (7, 3, 2.0, 8));
        // exactly three one-hot bits plus the reward are set
        assert_eq!(token.iter().filter(|&&v| v != 0.0).count(), 4);

        let query = encode_query(&task, 12);
        assert_eq!(query[12], 1.0);
        assert_eq!(query.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn uniform_target_masks_every_position() {
        let task = bandit_task();
        let entries = [ContextEntry { state: 0, action: 1, reward: 0.5, next_state: 0 }];
        let batch = TokenBatch::with_uniform_target(encode_context(&task, 0, &entries), 3);
        assert_eq!(batch.targets, vec![3, 3]);
        assert_eq!(batch.mask, vec![true, true]);
    }
}
