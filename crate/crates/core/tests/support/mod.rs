//! Breadth-first search over the real environment dynamics.

#![allow(dead_code)]

use std::collections::{HashSet, VecDeque};

use lambert_core::gridworld::{env_step, Cell, GridState};

type Key = ((usize, usize), u8, Option<Cell>, Vec<Cell>);

fn key(s: &GridState) -> Key {
    (s.agent_pos, s.agent_dir, s.carrying, s.cells.clone())
}

/// Shortest action sequence ending in a rewarded step, if one exists within
/// the episode limit.
pub fn shortest_solution(start: &GridState) -> Option<Vec<usize>> {
    let mut seen = HashSet::from([key(start)]);
    let mut queue = VecDeque::from([(start.clone(), Vec::new())]);
    while let Some((state, path)) = queue.pop_front() {
        for action in 0..7 {
            let (next, _, reward, done) = env_step(&state, action).expect("live state");
            let mut p = path.clone();
            p.push(action);
            if reward > 0.0 {
                return Some(p);
            }
            if !done && seen.insert(key(&next)) {
                queue.push_back((next, p));
            }
        }
    }
    None
}

/// Success reward for an episode of `max_steps` solved by the action taken
/// at step index `k`.
pub fn decayed_reward(decay: f64, k: usize, max_steps: usize) -> f64 {
    1.0 - decay * (k as f64 / max_steps as f64)
}

/// Plays `actions` and returns every `(reward, done)`.
pub fn replay(start: &GridState, actions: &[usize]) -> Vec<(f64, bool)> {
    let mut s = start.clone();
    actions
        .iter()
        .map(|&a| {
            let (next, _, r, d) = env_step(&s, a).expect("live state");
            s = next;
            (r, d)
        })
        .collect()
}
