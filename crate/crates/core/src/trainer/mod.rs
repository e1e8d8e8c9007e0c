//! Training loops, evaluation, diagnostics and run artifacts.

mod checkpoint;
mod config;
mod data;
mod diagnose;
mod evaluate;
mod gan;
mod pretrain;
mod seq2seq;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use checkpoint::{Checkpoint, CheckpointKind, OptimizerScalars, Progress, Trailer, MAGIC, VERSION};
pub use config::{
    curriculum_advance, CriticShape, CurriculumConfig, CurriculumState, DataConfig, DecayConfig, DiagnoseConfig,
    GeneratorShape, ModelKind, NoiseConfig, TrainConfig,
};
pub use data::{clip, load_split, meta_path, split_paths, Cycle, Split};
pub use diagnose::{diagnose, Diagnosis};
pub use evaluate::{decode_output, eval_max_len, evaluate, evaluate_generator};
pub use gan::{critic_steps_per_epoch, GanRun, Phase};
pub use pretrain::{pretrain, PretrainRun};
pub use seq2seq::Seq2SeqRun;

use crate::critic::{one_hot_batch, soft_batch, Critic};
use crate::datagen::SeededRng;
use crate::error::{Error, Result};
use crate::seqmodel::{frame, Generator};
use crate::tensor::{Graph, Tensor};

/// Keys for the per-purpose random streams of a run.
pub(crate) mod purpose {
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const HELDOUT: u64 = 3;
    pub const GAN: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const SEQ2SEQ: u64 = 6;
    pub const DIAGNOSE: u64 = 7;
}

/// CSV table with a fixed header, one row per epoch or probe.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsLog {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn cell(x: f64) -> String {
    format!("{x}")
}

pub(crate) fn opt_cell(x: Option<f64>) -> String {
    x.map(cell).unwrap_or_default()
}

pub(crate) fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

pub(crate) fn ensure_finite(x: f64, what: &str, epoch: usize, batch: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {x} at epoch {epoch}, batch {batch}")))
    }
}

pub(crate) fn ensure_finite_tensor(t: &Tensor<f32>, what: &str, epoch: usize, batch: usize) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at epoch {epoch}, batch {batch}")))
    }
}

/// Soft critic input `[B, width, V]` for free-running generation on
/// `inputs` (unframed ids), with no gradient tracking.
pub(crate) fn fake_batch(gen: &Generator<f32>, inputs: &[Vec<usize>], width: usize) -> Result<Tensor<f32>> {
    let framed: Vec<Vec<usize>> = inputs.iter().map(|x| frame(x)).collect();
    let mut g = Graph::new();
    let vars = gen.bind(&mut g, false);
    let enc = gen.encode(&mut g, &vars, &framed)?;
    let out = gen.generate(&mut g, &vars, &enc, width - 1)?;
    let v = gen.config().vocab_size;
    let fake = soft_batch(&mut g, &out, inputs.len(), width, v)?;
    Ok(g.value(fake).clone())
}

pub(crate) fn real_batch(seqs: &[Vec<usize>], width: usize, v: usize) -> Result<Tensor<f32>> {
    let framed: Vec<Vec<usize>> = seqs.iter().map(|y| frame(y)).collect();
    one_hot_batch(&framed, width, v)
}

/// Fraction of `(real, fake)` probe pairs the critic ranks correctly.
pub(crate) fn probe_accuracy(
    critic: &Critic<f32>,
    gen: &Generator<f32>,
    bad: &[Vec<usize>],
    good: &[Vec<usize>],
    len: usize,
    size: usize,
    batch: usize,
    rng: SeededRng,
) -> Result<f64> {
    let width = len + 2;
    let v = gen.config().vocab_size;
    let mut bad_idx = Cycle::new(bad.len(), rng.substream(&[0]));
    let mut good_idx = Cycle::new(good.len(), rng.substream(&[1]));
    let mut hits = 0usize;
    let mut done = 0usize;
    while done < size {
        let n = batch.min(size - done);
        let xs: Vec<Vec<usize>> = bad_idx.next_batch(n).into_iter().map(|i| clip(&bad[i], len)).collect();
        let ys: Vec<Vec<usize>> = good_idx.next_batch(n).into_iter().map(|i| clip(&good[i], len)).collect();
        let fake = critic.score_values(fake_batch(gen, &xs, width)?)?;
        let real = critic.score_values(real_batch(&ys, width, v)?)?;
        hits += real.iter().zip(&fake).filter(|(r, f)| r > f).count();
        done += n;
    }
    Ok(hits as f64 / size as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_csv_layout() {
        let mut log = MetricsLog::new(&["epoch", "loss"]);
        log.push(vec!["0".into(), cell(0.5)]);
        log.push(vec!["1".into(), opt_cell(None)]);
        assert_eq!(log.to_csv(), "epoch,loss\n0,0.5\n1,\n");
        assert_eq!(log.column("loss").unwrap(), vec!["0.5", ""]);
    }

    #[test]
    fn non_finite_names_batch() {
        let e = ensure_finite(f64::NAN, "critic loss", 3, 17).unwrap_err();
        assert!(e.to_string().contains("batch 17"));
    }
}
