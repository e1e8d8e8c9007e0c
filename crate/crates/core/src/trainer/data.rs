use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::datagen::{read_meta, read_sequences, DatasetMeta, SeededRng, TaskSpec};
use crate::error::{ensure, Error, Result};

/// One split of a generated dataset, as unframed token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub bad: Vec<Vec<usize>>,
    pub good: Vec<Vec<usize>>,
}

impl Split {
    /// `(bad, good)` pairs; errors unless both sides have the same length.
    pub fn pairs(&self) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        ensure!(
            self.bad.len() == self.good.len(),
            Data,
            "paired data needs equal line counts, got {} bad and {} good",
            self.bad.len(),
            self.good.len()
        );
        Ok(self.bad.iter().cloned().zip(self.good.iter().cloned()).collect())
    }
}

pub fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{split}.bad.txt")), dir.join(format!("{split}.good.txt")))
}

pub fn meta_path(dir: &Path) -> PathBuf {
    dir.join("meta.json")
}

/// Reads `<split>.bad.txt`, `<split>.good.txt` and the sidecar from `dir`,
/// checking the sidecar against the run's task.
pub fn load_split(dir: &Path, split: &str, task: &TaskSpec) -> Result<Split> {
    let meta: DatasetMeta = read_meta(&meta_path(dir))?;
    let vocab = task.vocab();
    ensure!(
        meta.spec.task == task.task && meta.vocab_size == vocab.size(),
        Config,
        "dataset in {} is {:?} with vocabulary {}, run expects {:?} with vocabulary {}",
        dir.display(),
        meta.spec.task,
        meta.vocab_size,
        task.task,
        vocab.size()
    );
    let (bad_path, good_path) = split_paths(dir, split);
    let encode = |path: &Path| -> Result<Vec<Vec<usize>>> {
        let seqs = read_sequences(path)?;
        ensure!(!seqs.is_empty(), Data, "{}: no sequences", path.display());
        seqs.iter()
            .enumerate()
            .map(|(i, s)| {
                ensure!(!s.is_empty(), Data, "{}:{}: empty sequence", path.display(), i + 1);
                vocab
                    .encode(s)
                    .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect()
    };
    Ok(Split {
        bad: encode(&bad_path)?,
        good: encode(&good_path)?,
    })
}

/// The first `len` tokens.
pub fn clip(seq: &[usize], len: usize) -> Vec<usize> {
    seq[..seq.len().min(len)].to_vec()
}

/// Endless reshuffled pass over `n` items: every index appears once
/// before any repeats.
pub struct Cycle {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl Cycle {
    pub fn new(n: usize, rng: SeededRng) -> Self {
        let mut c = Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        c.refill();
        c
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.refill();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{write_meta, write_sequences};

    #[test]
    fn cycle_covers_before_repeating() {
        let mut c = Cycle::new(10, SeededRng::new(2));
        let mut first: Vec<usize> = c.next_batch(4);
        first.extend(c.next_batch(6));
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(c.next_batch(25).len(), 25);
    }

    #[test]
    fn clip_preserves_prefix() {
        let s = vec![5, 6, 7, 8];
        assert_eq!(clip(&s, 2), vec![5, 6]);
        assert_eq!(clip(&s, 9), s);
    }

    #[test]
    fn load_checks_vocab_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TaskSpec::sort(4, 9);
        let meta = DatasetMeta {
            spec: spec.clone(),
            vocab_size: spec.vocab().size(),
            seed: 1,
            train_pairs: 2,
            test_pairs: 0,
        };
        write_meta(&meta_path(dir.path()), &meta).unwrap();
        let (b, g) = split_paths(dir.path(), "train");
        write_sequences(&b, &[vec![2, 1, 3, 4], vec![1, 2, 4, 3]]).unwrap();
        write_sequences(&g, &[vec![1, 2, 3, 4]]).unwrap();
        let s = load_split(dir.path(), "train", &spec).unwrap();
        assert_eq!(s.bad[0], vec![5, 4, 6, 7]);
        assert!(matches!(s.pairs(), Err(Error::Data(_))));
        assert!(matches!(load_split(dir.path(), "train", &TaskSpec::sort(4, 20)), Err(Error::Config(_))));
        assert!(matches!(load_split(dir.path(), "test", &spec), Err(Error::Io { .. })));
    }
}
