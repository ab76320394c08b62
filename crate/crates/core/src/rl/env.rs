//! Symbol-sequence environments.
//!
//! The agent reads the input tape one symbol per step and answers with an
//! action. Emitting the expected symbol earns +1 and moves on; any wrong
//! action ends the episode with reward 0. In the duplicate-dropping task a
//! symbol equal to its predecessor must be answered with the skip action,
//! which earns nothing but keeps the episode going.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AfmError, Result};

/// Fixed evaluation string for the copy task.
pub const COPY_PROBE: &str = "ADEBCADEBCEEDBACBAEBBDCAECBACBEAEAEBC";
/// Fixed evaluation input for the duplicate-dropping task.
pub const DROP_DUPLICATE_PROBE: &str = "AAADDDEEEEBBBCCAAAADDEEDDBBBBAACCBBAAEEBBBDDCC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Copy,
    DropDuplicate,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Copy => "copy",
            EnvKind::DropDuplicate => "drop-duplicate",
        }
    }
}

/// Symbol set laid into `capacity` one-hot slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    symbols: Vec<char>,
    capacity: usize,
}

impl Alphabet {
    pub fn new(symbols: &str, capacity: usize) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(AfmError::Config("alphabet is empty".into()));
        }
        if symbols.len() > capacity {
            return Err(AfmError::Config(format!(
                "alphabet of {} symbols exceeds capacity {capacity}",
                symbols.len()
            )));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(AfmError::Config(format!("symbol `{c}` repeated in alphabet")));
            }
        }
        Ok(Self { symbols, capacity })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Index of the skip action.
    pub fn skip_action(&self) -> usize {
        self.symbols.len()
    }

    /// One-hot slots for the current and previous symbol plus the reward.
    pub fn state_width(&self) -> usize {
        2 * self.capacity + 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u8>> {
        text.chars()
            .map(|c| {
                self.symbols
                    .iter()
                    .position(|&s| s == c)
                    .map(|i| i as u8)
                    .ok_or_else(|| AfmError::Input(format!("symbol `{c}` is not in the alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, symbols: &[u8]) -> String {
        symbols.iter().map(|&s| self.symbols[s as usize]).collect()
    }
}

/// Collapses runs of equal symbols.
pub fn drop_duplicates(input: &[u8]) -> Vec<u8> {
    let mut out: Vec<u8> = Vec::with_capacity(input.len());
    for &s in input {
        if out.last() != Some(&s) {
            out.push(s);
        }
    }
    out
}

/// Agent observation, stored compactly and expanded on demand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub current: Option<u8>,
    pub last: Option<u8>,
    pub last_reward: f64,
}

impl AgentState {
    /// `[current one-hot | last one-hot | last reward]`.
    pub fn write_encoding(&self, capacity: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some(c) = self.current {
            out[c as usize] = 1.0;
        }
        if let Some(l) = self.last {
            out[capacity + l as usize] = 1.0;
        }
        out[2 * capacity] = self.last_reward;
    }

    pub fn encode(&self, capacity: usize) -> Vec<f64> {
        let mut v = vec![0.0; 2 * capacity + 1];
        self.write_encoding(capacity, &mut v);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub state: AgentState,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct AlgorithmicEnv {
    pub kind: EnvKind,
    alphabet: Alphabet,
    num_actions: usize,
    input: Vec<u8>,
    target: Vec<u8>,
    /// Next input symbol to read.
    cursor: usize,
    /// Target symbols emitted so far.
    emitted: usize,
    episode_reward: f64,
    done: bool,
    last_reward: f64,
}

impl AlgorithmicEnv {
    pub fn new(kind: EnvKind, alphabet: Alphabet, num_actions: usize) -> Result<Self> {
        if num_actions <= alphabet.skip_action() {
            return Err(AfmError::Config(format!(
                "{num_actions} actions cannot cover {} symbols plus skip",
                alphabet.len()
            )));
        }
        Ok(Self {
            kind,
            alphabet,
            num_actions,
            input: Vec::new(),
            target: Vec::new(),
            cursor: 0,
            emitted: 0,
            episode_reward: 0.0,
            done: true,
            last_reward: 0.0,
        })
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn input(&self) -> &[u8] {
        &self.input
    }

    pub fn target(&self) -> &[u8] {
        &self.target
    }

    pub fn episode_reward(&self) -> f64 {
        self.episode_reward
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Highest reward an episode on the current input can earn.
    pub fn max_reward(&self) -> f64 {
        self.target.len() as f64
    }

    fn observe(&self) -> AgentState {
        let current = self.input.get(self.cursor).copied();
        match self.kind {
            EnvKind::Copy => AgentState {
                current,
                last: None,
                last_reward: 0.0,
            },
            EnvKind::DropDuplicate => AgentState {
                current,
                last: self.cursor.checked_sub(1).map(|i| self.input[i]),
                last_reward: self.last_reward,
            },
        }
    }

    /// Starts an episode on `input` (symbol indices).
    pub fn reset(&mut self, input: &[u8]) -> Result<AgentState> {
        if input.is_empty() {
            return Err(AfmError::Input("episode input is empty".into()));
        }
        if let Some(&bad) = input.iter().find(|&&s| s as usize >= self.alphabet.len()) {
            return Err(AfmError::Input(format!("symbol index {bad} outside the alphabet")));
        }
        self.input = input.to_vec();
        self.target = match self.kind {
            EnvKind::Copy => input.to_vec(),
            EnvKind::DropDuplicate => drop_duplicates(input),
        };
        self.cursor = 0;
        self.emitted = 0;
        self.episode_reward = 0.0;
        self.done = false;
        self.last_reward = 0.0;
        Ok(self.observe())
    }

    pub fn reset_text(&mut self, text: &str) -> Result<AgentState> {
        let input = self.alphabet.encode(text)?;
        self.reset(&input)
    }

    /// The action a perfect policy takes now.
    pub fn correct_action(&self) -> Option<usize> {
        if self.done {
            return None;
        }
        let current = self.input[self.cursor];
        let repeat = self.cursor > 0 && self.input[self.cursor - 1] == current;
        Some(match self.kind {
            EnvKind::DropDuplicate if repeat => self.alphabet.skip_action(),
            _ => current as usize,
        })
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(AfmError::State("step on a finished episode".into()));
        }
        if action >= self.num_actions {
            return Err(AfmError::Input(format!("action {action} outside [0, {})", self.num_actions)));
        }
        let correct = self.correct_action().expect("episode active");
        let reward = if action == correct {
            self.cursor += 1;
            if action == self.alphabet.skip_action() {
                0.0
            } else {
                self.emitted += 1;
                1.0
            }
        } else {
            self.done = true;
            0.0
        };
        if self.cursor == self.input.len() {
            self.done = true;
        }
        self.episode_reward += reward;
        self.last_reward = reward;
        Ok(StepResult {
            state: self.observe(),
            reward,
            terminal: self.done,
        })
    }
}

/// Training-episode generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeLengths {
    pub copy_min: usize,
    pub copy_max: usize,
    pub drop_target_min: usize,
    pub drop_target_max: usize,
    /// Each target symbol is repeated between 1 and this many times.
    pub drop_max_repeat: usize,
}

impl Default for EpisodeLengths {
    fn default() -> Self {
        Self {
            copy_min: 30,
            copy_max: 50,
            drop_target_min: 17,
            drop_target_max: 25,
            drop_max_repeat: 4,
        }
    }
}

/// Random episode input for `kind`.
pub fn sample_input<R: Rng + ?Sized>(kind: EnvKind, alphabet: &Alphabet, lengths: &EpisodeLengths, rng: &mut R) -> Vec<u8> {
    let k = alphabet.len() as u8;
    match kind {
        EnvKind::Copy => {
            let n = rng.random_range(lengths.copy_min..=lengths.copy_max);
            (0..n).map(|_| rng.random_range(0..k)).collect()
        }
        EnvKind::DropDuplicate => {
            let n = rng.random_range(lengths.drop_target_min..=lengths.drop_target_max);
            let mut out = Vec::new();
            let mut prev: Option<u8> = None;
            for _ in 0..n {
                let s = loop {
                    let s = rng.random_range(0..k);
                    if Some(s) != prev || k == 1 {
                        break s;
                    }
                };
                prev = Some(s);
                let reps = rng.random_range(1..=lengths.drop_max_repeat.max(1));
                out.extend(std::iter::repeat_n(s, reps));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(kind: EnvKind) -> AlgorithmicEnv {
        AlgorithmicEnv::new(kind, Alphabet::new("ABCDE", 13).unwrap(), 20).unwrap()
    }

    #[test]
    fn copy_rewards_and_termination() {
        let mut e = env(EnvKind::Copy);
        let s = e.reset_text("AB").unwrap();
        assert_eq!(s, AgentState { current: Some(0), last: None, last_reward: 0.0 });
        let a = e.step(0).unwrap();
        assert_eq!((a.reward, a.terminal), (1.0, false));
        let b = e.step(1).unwrap();
        assert_eq!((b.reward, b.terminal), (1.0, true));
        assert_eq!(e.episode_reward(), 2.0);

        e.reset_text("AB").unwrap();
        let wrong = e.step(1).unwrap();
        assert_eq!((wrong.reward, wrong.terminal), (0.0, true));
        assert!(matches!(e.step(0), Err(AfmError::State(_))));
    }

    #[test]
    fn probe_targets() {
        let mut e = env(EnvKind::DropDuplicate);
        e.reset_text(DROP_DUPLICATE_PROBE).unwrap();
        // collapsing the probe keeps the `D` before the final `C`
        assert_eq!(e.alphabet().decode(e.target()), "ADEBCADEDBACBAEBDC");
        let mut c = env(EnvKind::Copy);
        let s = c.reset_text(COPY_PROBE).unwrap();
        assert_eq!(s.current, Some(0));
        assert_eq!(COPY_PROBE.len(), 37);
    }

    #[test]
    fn perfect_policy_earns_target_length() {
        for (kind, text) in [(EnvKind::Copy, COPY_PROBE), (EnvKind::DropDuplicate, DROP_DUPLICATE_PROBE)] {
            let mut e = env(kind);
            e.reset_text(text).unwrap();
            while let Some(a) = e.correct_action() {
                e.step(a).unwrap();
            }
            assert_eq!(e.episode_reward(), e.max_reward());
        }
    }

    #[test]
    fn input_errors() {
        assert!(matches!(Alphabet::new("", 13), Err(AfmError::Config(_))));
        let mut e = env(EnvKind::Copy);
        assert!(matches!(e.reset_text("AXB"), Err(AfmError::Input(_))));
        e.reset_text("A").unwrap();
        assert!(matches!(e.step(20), Err(AfmError::Input(_))));
    }

    #[test]
    fn drop_duplicate_state_carries_previous_symbol_and_reward() {
        let mut e = env(EnvKind::DropDuplicate);
        e.reset_text("AAB").unwrap();
        let s = e.step(0).unwrap().state;
        assert_eq!(s, AgentState { current: Some(0), last: Some(0), last_reward: 1.0 });
        let s = e.step(e.alphabet().skip_action()).unwrap();
        assert_eq!((s.reward, s.state.last_reward, s.terminal), (0.0, 0.0, false));
        assert!(e.step(1).unwrap().terminal);
        assert_eq!(e.episode_reward(), 2.0);
    }

    #[test]
    fn encoding_layout() {
        let s = AgentState { current: Some(2), last: Some(4), last_reward: 1.0 };
        let v = s.encode(13);
        assert_eq!(v.len(), 27);
        assert_eq!((v[2], v[13 + 4], v[26]), (1.0, 1.0, 1.0));
        assert_eq!(v.iter().sum::<f64>(), 3.0);
    }
}
