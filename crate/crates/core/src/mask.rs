//! Binary neuron masks: the unit of task identity.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{AfmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task{}", self.0)
    }
}

/// Binary vector over a forgetting layer's neurons. Length is fixed at
/// creation; bits can be flipped but never added or removed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeuronMask {
    bits: Vec<bool>,
    task_id: Option<TaskId>,
}

impl NeuronMask {
    pub fn ones(width: usize) -> Self {
        Self {
            bits: vec![true; width],
            task_id: None,
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            bits: vec![false; width],
            task_id: None,
        }
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        Self {
            bits,
            task_id: None,
        }
    }

    /// Accepts only 0/1 entries.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let bits = bits
            .iter()
            .enumerate()
            .map(|(i, &b)| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(AfmError::Input(format!("mask bit {i} is {other}, not 0/1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_bools(bits))
    }

    pub fn with_task(mut self, task: TaskId) -> Self {
        self.task_id = Some(task);
        self
    }

    pub fn task_id(&self) -> Option<TaskId> {
        self.task_id
    }

    pub fn set_task_id(&mut self, task: Option<TaskId>) {
        self.task_id = task;
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, on: bool) {
        self.bits[i] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }

    /// 1.0 for active neurons, 0.0 for gated ones.
    pub fn as_gate(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn is_all_zero(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    fn check_width(&self, other: &NeuronMask) -> Result<()> {
        if self.len() != other.len() {
            return Err(AfmError::Shape(format!(
                "mask widths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn and(&self, other: &NeuronMask) -> Result<NeuronMask> {
        self.check_width(other)?;
        Ok(Self::from_bools(
            self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        ))
    }

    pub fn or(&self, other: &NeuronMask) -> Result<NeuronMask> {
        self.check_width(other)?;
        Ok(Self::from_bools(
            self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        ))
    }

    pub fn complement(&self) -> NeuronMask {
        Self::from_bools(self.bits.iter().map(|b| !b).collect())
    }

    /// Number of neurons active in both masks.
    pub fn overlap(&self, other: &NeuronMask) -> Result<usize> {
        Ok(self.and(other)?.count_active())
    }

    /// Union of a set of masks, or all-zero of `width` when the set is empty.
    pub fn union_of<'a>(width: usize, masks: impl IntoIterator<Item = &'a NeuronMask>) -> Result<NeuronMask> {
        let mut acc = NeuronMask::zeros(width);
        for m in masks {
            acc = acc.or(m)?;
        }
        Ok(acc)
    }
}

impl fmt::Display for NeuronMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary() {
        assert!(NeuronMask::from_bits(&[0, 1, 2]).is_err());
        let m = NeuronMask::from_bits(&[0, 1, 1]).unwrap();
        assert_eq!(m.count_active(), 2);
        assert_eq!(m.to_string(), "011");
    }

    #[test]
    fn set_algebra() {
        let a = NeuronMask::from_bits(&[1, 1, 0, 0]).unwrap();
        let b = NeuronMask::from_bits(&[0, 1, 1, 0]).unwrap();
        assert_eq!(a.overlap(&b).unwrap(), 1);
        assert_eq!(a.or(&b).unwrap().to_u8(), vec![1, 1, 1, 0]);
        assert_eq!(a.complement().to_u8(), vec![0, 0, 1, 1]);
        assert_eq!(a.and(&a.complement()).unwrap().count_active(), 0);
        assert!(a.and(&NeuronMask::ones(3)).is_err());
        let u = NeuronMask::union_of(4, [&a, &b]).unwrap();
        assert_eq!(u.count_active(), 3);
    }
}
