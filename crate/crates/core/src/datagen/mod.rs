//! Seeded benchmark data: sorted sequences, grammar sentences, their
//! corruptions, and the denoising noiser.

mod corrupt;
mod grammar;
mod io;
mod rng;
mod vocab;

pub use corrupt::{
    adjacent_swap, apply_edit, gen_sorted_sequence, inject_cfg_errors, inject_sort_errors,
    noise_sequence, rounded_gaussian, Edit,
};
pub use grammar::{
    cfg_accepts, count_cfg_sentences, sample_cfg_sentence, Grammar, LanguageCounts, Symbol,
    BENCHMARK_GRAMMAR,
};
pub use io::{read_meta, read_sequences, write_meta, write_sequences, DatasetMeta};
pub use rng::SeededRng;
pub use vocab::{Vocab, EOS, PAD, SOS, TASK_OFFSET};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sort,
    Cfg,
}

/// Sentences of the grammar task are strictly shorter than this.
pub const CFG_LENGTH_LIMIT: usize = 20;

/// Generator parameters for one benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: Task,
    /// Sorting: sequence length.
    #[serde(default = "default_sort_len")]
    pub sort_len: usize,
    /// Sorting: values are drawn from `0..=sort_max_value`.
    #[serde(default = "default_sort_max")]
    pub sort_max_value: u32,
    /// Mean of the per-sequence error count.
    pub error_mean: f64,
    pub error_sd: f64,
}

fn default_sort_len() -> usize {
    20
}

fn default_sort_max() -> u32 {
    50
}

impl TaskSpec {
    pub fn sort(len: usize, max_value: u32) -> Self {
        Self {
            task: Task::Sort,
            sort_len: len,
            sort_max_value: max_value,
            error_mean: 8.0,
            error_sd: 4.0,
        }
    }

    pub fn cfg() -> Self {
        Self {
            task: Task::Cfg,
            sort_len: default_sort_len(),
            sort_max_value: default_sort_max(),
            error_mean: 5.0,
            error_sd: 2.0,
        }
    }

    pub fn vocab(&self) -> Vocab {
        match self.task {
            Task::Sort => Vocab::new(self.sort_max_value as usize + 1, 0),
            Task::Cfg => Vocab::new(Grammar::benchmark().terminals().len(), 1),
        }
        .expect("task vocabularies are nonempty")
    }

    /// Longest clean sequence the task can produce, in task tokens.
    pub fn max_len(&self) -> usize {
        match self.task {
            Task::Sort => self.sort_len,
            Task::Cfg => CFG_LENGTH_LIMIT - 1,
        }
    }
}

/// Draws clean sequences and their corruptions for one task.
pub struct PairSource {
    spec: TaskSpec,
    grammar: Grammar,
    counts: Option<LanguageCounts>,
    terminals: Vec<u32>,
}

impl PairSource {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let grammar = Grammar::benchmark();
        let counts = match spec.task {
            Task::Cfg => Some(count_cfg_sentences(&grammar, CFG_LENGTH_LIMIT)?),
            Task::Sort => {
                // validates the domain up front
                gen_sorted_sequence(&mut SeededRng::new(0), spec.sort_len, spec.sort_max_value)?;
                None
            }
        };
        let terminals = grammar.terminals();
        Ok(Self {
            spec,
            grammar,
            counts,
            terminals,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn clean<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<u32> {
        match &self.counts {
            Some(c) => sample_cfg_sentence(rng, &self.grammar, c),
            None => gen_sorted_sequence(rng, self.spec.sort_len, self.spec.sort_max_value)
                .expect("domain checked in constructor"),
        }
    }

    pub fn corrupt<R: rand::Rng + ?Sized>(&self, clean: &[u32], rng: &mut R) -> Vec<u32> {
        let (m, s) = (self.spec.error_mean, self.spec.error_sd);
        match self.spec.task {
            Task::Sort => inject_sort_errors(clean, rng, m, s),
            Task::Cfg => inject_cfg_errors(clean, rng, &self.terminals, m, s),
        }
    }

    /// `n` aligned `(bad, good)` pairs.
    pub fn pairs<R: rand::Rng + ?Sized>(&self, rng: &mut R, n: usize) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
        let mut bad = Vec::with_capacity(n);
        let mut good = Vec::with_capacity(n);
        for _ in 0..n {
            let y = self.clean(rng);
            bad.push(self.corrupt(&y, rng));
            good.push(y);
        }
        (bad, good)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_pairs() {
        for spec in [TaskSpec::sort(10, 20), TaskSpec::cfg()] {
            let src = PairSource::new(spec).unwrap();
            let a = src.pairs(&mut SeededRng::new(11), 200);
            let b = src.pairs(&mut SeededRng::new(11), 200);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cfg_pairs_have_grammatical_targets() {
        let src = PairSource::new(TaskSpec::cfg()).unwrap();
        let g = Grammar::benchmark();
        let (bad, good) = src.pairs(&mut SeededRng::new(2), 500);
        assert!(good.iter().all(|y| cfg_accepts(y, &g)));
        assert!(bad.iter().all(|x| !x.is_empty()));
        let v = src.spec().vocab();
        assert_eq!(v.size(), 26);
        assert!(bad.iter().flatten().all(|&s| v.id(s).is_ok()));
    }

    #[test]
    fn oversized_sort_domain_is_rejected() {
        assert!(PairSource::new(TaskSpec::sort(30, 10)).is_err());
    }
}
