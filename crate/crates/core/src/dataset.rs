//! Train/validation/test assignment, sequence windows and k-fold partitions.

use std::collections::BTreeSet;
use std::io::Write;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Set {
    Train,
    Val,
    Test,
}

impl Set {
    pub fn name(self) -> &'static str {
        match self {
            Set::Train => "train",
            Set::Val => "val",
            Set::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub jump: usize,
    pub observation_timesteps: Vec<usize>,
}

impl SplitAssignment {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_of(&self, t: usize) -> Option<Set> {
        if self.train.binary_search(&t).is_ok() {
            Some(Set::Train)
        } else if self.val.binary_search(&t).is_ok() {
            Some(Set::Val)
        } else if self.test.binary_search(&t).is_ok() {
            Some(Set::Test)
        } else {
            None
        }
    }

    /// `timestep,set` manifest, one row per timestep in order.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "timestep,set")?;
        for t in 0..self.len() {
            let set = self.set_of(t).expect("split covers every timestep");
            writeln!(out, "{t},{}", set.name())?;
        }
        Ok(())
    }
}

/// Observation timesteps go to the test set. The remaining timesteps are
/// scanned in order: two consecutive ones go to training, then `jump`
/// timesteps are set aside, alternately to validation and test (starting
/// with validation). The alternation runs across the whole scan.
pub fn split(total: usize, jump: usize, observation_timesteps: &[usize]) -> Result<SplitAssignment> {
    if total < 4 {
        return Err(Error::Invalid(format!("need at least 4 timesteps, got {total}")));
    }
    if jump == 0 {
        return Err(Error::Invalid("jump must be at least 1".into()));
    }
    let obs: BTreeSet<usize> = observation_timesteps.iter().copied().collect();
    if let Some(&bad) = obs.iter().find(|&&t| t >= total) {
        return Err(Error::Invalid(format!(
            "observation timestep {bad} is outside 0..{total}"
        )));
    }
    let mut train = vec![];
    let mut val = vec![];
    let mut test: Vec<usize> = obs.iter().copied().collect();
    let mut in_cycle = 0usize;
    let mut next_is_val = true;
    for t in (0..total).filter(|t| !obs.contains(t)) {
        if in_cycle < 2 {
            train.push(t);
        } else {
            if next_is_val {
                val.push(t);
            } else {
                test.push(t);
            }
            next_is_val = !next_is_val;
        }
        in_cycle = (in_cycle + 1) % (2 + jump);
    }
    test.sort_unstable();
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Invalid(format!(
            "{total} timesteps with jump {jump} leave an empty set \
             (train {}, val {}, test {})",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    Ok(SplitAssignment {
        train,
        val,
        test,
        jump,
        observation_timesteps: obs.into_iter().collect(),
    })
}

/// `q` consecutive inputs and the element that follows them.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample<T> {
    pub start: usize,
    pub inputs: Vec<T>,
    pub target: T,
}

impl<T> SequenceSample<T> {
    pub fn target_index(&self) -> usize {
        self.start + self.inputs.len()
    }
}

/// All `len - q` windows of an ordered series; window `i` reads
/// `i..i + q` and targets `i + q`.
pub fn window<T: Clone>(series: &[T], q: usize) -> Result<Vec<SequenceSample<T>>> {
    if q == 0 {
        return Err(Error::Invalid("look-back must be at least 1".into()));
    }
    if series.len() < q + 1 {
        return Err(Error::Invalid(format!(
            "series of length {} is too short for look-back {q}",
            series.len()
        )));
    }
    Ok((0..series.len() - q)
        .map(|i| SequenceSample {
            start: i,
            inputs: series[i..i + q].to_vec(),
            target: series[i + q].clone(),
        })
        .collect())
}

/// Maximal runs of consecutive values in a sorted index list.
pub fn contiguous_runs(sorted: &[usize]) -> Vec<Range<usize>> {
    let mut runs: Vec<Range<usize>> = vec![];
    for &t in sorted {
        match runs.last_mut() {
            Some(r) if r.end == t => r.end = t + 1,
            _ => runs.push(t..t + 1),
        }
    }
    runs
}

/// Windows taken inside each maximal run of consecutive indices.
pub fn windows_within_runs<T: Clone>(series: &[T], indices: &[usize], q: usize) -> Vec<SequenceSample<T>> {
    contiguous_runs(indices)
        .into_iter()
        .filter(|r| r.len() > q && r.end <= series.len())
        .flat_map(|r| {
            let offset = r.start;
            window(&series[r], q)
                .expect("run is longer than q")
                .into_iter()
                .map(move |mut s| {
                    s.start += offset;
                    s
                })
        })
        .collect()
}

/// Windows over the full contiguous series whose *target* lies in
/// `targets`. Inputs are the `q` timesteps immediately before each target.
pub fn windows_for_targets<T: Clone>(series: &[T], targets: &[usize], q: usize) -> Vec<SequenceSample<T>> {
    targets
        .iter()
        .filter(|&&t| t >= q && t < series.len())
        .map(|&t| SequenceSample {
            start: t - q,
            inputs: series[t - q..t].to_vec(),
            target: series[t].clone(),
        })
        .collect()
}

/// Shuffles once with `seed`, then cuts into `k` holdouts whose sizes
/// differ by at most one (larger folds first).
pub fn kfold(indices: &[usize], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Invalid(format!("k must be at least 2, got {k}")));
    }
    if indices.len() < k {
        return Err(Error::Invalid(format!(
            "cannot make {k} folds from {} items",
            indices.len()
        )));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = shuffled.len() / k;
    let extra = shuffled.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let holdout = shuffled[start..start + size].to_vec();
        let train = shuffled[..start]
            .iter()
            .chain(&shuffled[start + size..])
            .copied()
            .collect();
        folds.push((train, holdout));
        start += size;
    }
    Ok(folds)
}
