//! Empirical statistics of a forgettable decision process: how often task
//! `m` under mask `f` is followed by task `m'`, and the mean reward earned
//! in task `m` under mask `f`.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::mask::TaskId;
use crate::rl::replay::MaskId;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FdpStats {
    transitions: BTreeMap<(TaskId, MaskId), BTreeMap<TaskId, u64>>,
    rewards: BTreeMap<(TaskId, MaskId), (f64, u64)>,
}

/// Estimated transition probabilities and mean rewards. Pairs never
/// observed have no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FdpEstimates {
    pub transition: BTreeMap<(TaskId, MaskId), BTreeMap<TaskId, f64>>,
    pub reward: BTreeMap<(TaskId, MaskId), f64>,
}

/// One `(task, mask)` pair of [`FdpEstimates`], flattened for reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdpRow {
    pub task: u32,
    pub mask: u32,
    pub mean_reward: Option<f64>,
    /// Next task (as `task{n}`) to probability.
    pub next: BTreeMap<String, f64>,
}

impl FdpEstimates {
    pub fn rows(&self) -> Vec<FdpRow> {
        let mut keys: Vec<(TaskId, MaskId)> = self.transition.keys().chain(self.reward.keys()).copied().collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|(m, f)| FdpRow {
                task: m.0,
                mask: f.0,
                mean_reward: self.mean_reward(m, f),
                next: self
                    .transition
                    .get(&(m, f))
                    .map(|row| row.iter().map(|(n, p)| (n.to_string(), *p)).collect())
                    .unwrap_or_default(),
            })
            .collect()
    }

    /// `P[m' | m, f]`, or `None` when `(m, f)` was never left.
    pub fn probability(&self, m: TaskId, f: MaskId, next: TaskId) -> Option<f64> {
        self.transition.get(&(m, f)).map(|row| row.get(&next).copied().unwrap_or(0.0))
    }

    /// Mean reward, or `None` when nothing was recorded for `(m, f)`.
    pub fn mean_reward(&self, m: TaskId, f: MaskId) -> Option<f64> {
        self.reward.get(&(m, f)).copied()
    }
}

impl FdpStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records that task `m` under mask `f` was followed by `next` and
    /// earned `rewards` meanwhile.
    pub fn record(&mut self, m: TaskId, f: MaskId, next: TaskId, rewards: &[f64]) {
        *self.transitions.entry((m, f)).or_default().entry(next).or_insert(0) += 1;
        self.record_rewards(m, f, rewards);
    }

    pub fn record_rewards(&mut self, m: TaskId, f: MaskId, rewards: &[f64]) {
        let entry = self.rewards.entry((m, f)).or_insert((0.0, 0));
        for r in rewards {
            entry.0 += r;
            entry.1 += 1;
        }
    }

    pub fn estimates(&self) -> FdpEstimates {
        let transition = self
            .transitions
            .iter()
            .map(|(&key, row)| {
                let total: u64 = row.values().sum();
                let probs = row.iter().map(|(&next, &c)| (next, c as f64 / total as f64)).collect();
                (key, probs)
            })
            .collect();
        let reward = self
            .rewards
            .iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(&key, &(sum, n))| (key, sum / n as f64))
            .collect();
        FdpEstimates { transition, reward }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const M0: TaskId = TaskId(0);
    const M1: TaskId = TaskId(1);
    const F: MaskId = MaskId(0);

    #[test]
    fn single_transition_and_mean_reward() {
        let mut s = FdpStats::new();
        s.record(M0, F, M1, &[2.0, 4.0]);
        let e = s.estimates();
        assert_eq!(e.probability(M0, F, M1), Some(1.0));
        assert_eq!(e.probability(M0, F, M0), Some(0.0));
        assert_eq!(e.mean_reward(M0, F), Some(3.0));
        assert_eq!(e.probability(M1, F, M0), None);
        assert_eq!(e.mean_reward(M1, F), None);
    }

    #[test]
    fn alternating_chain() {
        let mut s = FdpStats::new();
        for k in 0..10 {
            let (a, b) = if k % 2 == 0 { (M0, M1) } else { (M1, M0) };
            s.record(a, F, b, &[]);
        }
        let e = s.estimates();
        assert_eq!(e.probability(M0, F, M1), Some(1.0));
        assert_eq!(e.probability(M1, F, M0), Some(1.0));
        for row in e.transition.values() {
            assert!((row.values().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
