//! Hidden-state memory: uniform sampling, averaging and eviction.

use crate::block::BlockState;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::ssm::StateTag;

/// 1-based indices `⌊i·(m−1)/(n_h−1)⌋ + 1` for `i = 0..n_h`, deduplicated
/// in order. `n_h ≤ 1` selects the first entry only.
pub fn sample_memory_indices(memory_size: usize, n_h: usize) -> Vec<usize> {
    if memory_size == 0 {
        return Vec::new();
    }
    if n_h <= 1 {
        return vec![1];
    }
    let mut out: Vec<usize> = Vec::with_capacity(n_h);
    for i in 0..n_h {
        let idx = i * (memory_size - 1) / (n_h - 1) + 1;
        if out.last() != Some(&idx) {
            out.push(idx);
        }
    }
    out
}

/// Elementwise mean per block and direction.
pub fn average_states<T: Scalar>(states: &[&[BlockState<T>]]) -> Result<Vec<BlockState<T>>> {
    ensure!(!states.is_empty(), "cannot average an empty set of states");
    let first = states[0];
    for s in states {
        ensure!(s.len() == first.len(), "state sets cover different block counts");
        for (a, b) in s.iter().zip(first) {
            ensure!(
                a.forward.data.len() == b.forward.data.len() && a.backward.data.len() == b.backward.data.len(),
                "state shapes differ"
            );
        }
    }
    let inv = T::one() / T::c(states.len() as f64);
    let mut out = first.to_vec();
    for (k, blk) in out.iter_mut().enumerate() {
        for (dir, h) in [&mut blk.forward, &mut blk.backward].into_iter().enumerate() {
            for (j, v) in h.data.iter_mut().enumerate() {
                let sum: T = states
                    .iter()
                    .map(|s| {
                        if dir == 0 {
                            s[k].forward.data[j]
                        } else {
                            s[k].backward.data[j]
                        }
                    })
                    .sum();
                *v = sum * inv;
            }
            h.tag = StateTag::PostInteraction;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry<T> {
    pub frame_index: usize,
    pub states: Vec<BlockState<T>>,
}

/// Frame-ordered store of per-block states with a size cap.
#[derive(Clone, Debug, PartialEq)]
pub struct StateMemory<T> {
    pub cap: usize,
    pub entries: Vec<MemoryEntry<T>>,
}

impl<T: Scalar> StateMemory<T> {
    pub fn new(cap: usize) -> Self {
        StateMemory {
            cap: cap.max(1),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frame_indexes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }

    /// Appends an entry, then evicts down to the cap.
    pub fn push(&mut self, frame_index: usize, states: Vec<BlockState<T>>) -> Result<()> {
        if let Some(last) = self.entries.last() {
            ensure!(
                frame_index > last.frame_index,
                "memory frame {frame_index} does not follow {}",
                last.frame_index
            );
        }
        self.entries.push(MemoryEntry { frame_index, states });
        while self.entries.len() > self.cap {
            self.evict();
        }
        Ok(())
    }

    /// Removes the later entry of the closest adjacent pair; ties go to the
    /// later pair. The first entry is never removed.
    pub fn evict(&mut self) {
        if let Some(i) = eviction_target(&self.frame_indexes()) {
            self.entries.remove(i);
        }
    }

    /// Mean of the uniformly sampled entries.
    pub fn sample_average(&self, n_h: usize) -> Result<Vec<BlockState<T>>> {
        let picked: Vec<&[BlockState<T>]> = sample_memory_indices(self.len(), n_h)
            .into_iter()
            .map(|i| self.entries[i - 1].states.as_slice())
            .collect();
        average_states(&picked)
    }
}

/// Position to evict from a frame-index list, if it has at least two entries.
pub fn eviction_target(indexes: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, w) in indexes.windows(2).enumerate() {
        let gap = w[1] - w[0];
        if best.is_none_or(|(g, _)| gap <= g) {
            best = Some((gap, i + 1));
        }
    }
    best.map(|(_, i)| i)
}
