use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Frame indices of a `t`-frame clip from a sequence of `len` frames:
/// a contiguous window at a uniform offset, or cyclic repetition when the
/// sequence is shorter than `t`.
pub fn sample_clip<R: Rng + ?Sized>(len: usize, t: usize, rng: &mut R) -> Vec<usize> {
    assert!(len >= 1 && t >= 1, "sample_clip needs len >= 1 and t >= 1");
    if len >= t {
        let start = rng.random_range(0..=len - t);
        (start..start + t).collect()
    } else {
        (0..t).map(|i| i % len).collect()
    }
}

/// One training batch: sequence indices and dense subject labels, grouped
/// by subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub sequences: Vec<usize>,
    pub subjects: Vec<usize>,
}

/// Draws `p` distinct subjects and `k` sequences from each.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    /// Sequence indices per subject, subject labels are positions.
    groups: Vec<Vec<usize>>,
    p: usize,
    k: usize,
}

impl BatchSampler {
    pub fn new(groups: Vec<Vec<usize>>, p: usize, k: usize) -> Result<Self> {
        let usable = groups.iter().filter(|g| !g.is_empty()).count();
        if p == 0 || k == 0 || usable < p || usable != groups.len() {
            return Err(Error::Data(format!(
                "batch spec infeasible: ({p}, {k}) over {usable} subjects"
            )));
        }
        Ok(Self { groups, p, k })
    }

    pub fn subjects(&self) -> usize {
        self.groups.len()
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Batch {
        let mut sequences = Vec::with_capacity(self.p * self.k);
        let mut subjects = Vec::with_capacity(self.p * self.k);
        for s in index::sample(rng, self.groups.len(), self.p) {
            let g = &self.groups[s];
            if g.len() >= self.k {
                sequences.extend(index::sample(rng, g.len(), self.k).into_iter().map(|i| g[i]));
            } else {
                sequences.extend((0..self.k).map(|_| g[rng.random_range(0..g.len())]));
            }
            subjects.extend(std::iter::repeat_n(s, self.k));
        }
        Batch { sequences, subjects }
    }
}

/// Sampler over `indices` of a dataset, grouped by subject in sorted order.
pub fn batch_sampler(dataset: &Dataset, indices: &[usize], p: usize, k: usize) -> Result<BatchSampler> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        groups.entry(dataset.manifest.entries[i].subject.as_str()).or_default().push(i);
    }
    BatchSampler::new(groups.into_values().collect(), p, k)
}
