//! Repair metrics and critic diagnostics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::critic::{one_hot_batch, soft_batch, Critic};
use crate::datagen::{cfg_accepts, Grammar, Task, EOS};
use crate::error::{ensure, Error, Result};
use crate::seqmodel::{frame, Generator};
use crate::tensor::{Graph, Scalar};

/// Fraction of exact matches.
pub fn sequence_accuracy<S: PartialEq>(preds: &[Vec<S>], targets: &[Vec<S>]) -> Result<f64> {
    ensure!(!preds.is_empty(), Contract, "sequence_accuracy: empty prediction set");
    ensure!(
        preds.len() == targets.len(),
        Contract,
        "sequence_accuracy: {} predictions for {} targets",
        preds.len(),
        targets.len()
    );
    let hits = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of predictions that are strictly increasing (the empty
/// sequence counts as ordered).
pub fn order_accuracy<S: PartialOrd>(preds: &[Vec<S>]) -> Result<f64> {
    ensure!(!preds.is_empty(), Contract, "order_accuracy: empty prediction set");
    let ok = preds.iter().filter(|p| p.windows(2).all(|w| w[0] < w[1])).count();
    Ok(ok as f64 / preds.len() as f64)
}

/// Fraction of predictions the grammar accepts.
pub fn cfg_validity_rate(preds: &[Vec<u32>], grammar: &Grammar) -> Result<f64> {
    ensure!(!preds.is_empty(), Contract, "cfg_validity_rate: empty prediction set");
    let ok = preds.iter().filter(|p| cfg_accepts(p, grammar)).count();
    Ok(ok as f64 / preds.len() as f64)
}

fn ngram_counts<S: Eq + Hash + Clone>(s: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4: clipped 1–4-gram precisions pooled over the corpus,
/// uniform weights, brevity penalty, no smoothing.
pub fn bleu4<S: Eq + Hash + Clone>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    ensure!(!candidates.is_empty(), Contract, "bleu4: empty corpus");
    ensure!(
        candidates.len() == references.len(),
        Contract,
        "bleu4: {} candidates for {} references",
        candidates.len(),
        references.len()
    );
    let mut log_p = 0.0;
    for n in 1..=4 {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let rc = ngram_counts(r, n);
            for (gram, k) in ngram_counts(c, n) {
                matched += k.min(rc.get(gram).copied().unwrap_or(0));
            }
            total += c.len().saturating_sub(n - 1);
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_p += 0.25 * (matched as f64 / total as f64).ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_p.exp())
}

/// Hoyer sparsity of a nonnegative profile: 1 for a single spike, 0 for a
/// flat profile. An all-zero profile scores 0; a length-1 profile scores 1.
pub fn hoyer_sparsity(profile: &[f64]) -> f64 {
    let n = profile.len() as f64;
    if profile.len() <= 1 {
        return 1.0;
    }
    let l1: f64 = profile.iter().map(|x| x.abs()).sum();
    let l2 = profile.iter().map(|x| x * x).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return 0.0;
    }
    ((n.sqrt() - l1 / l2) / (n.sqrt() - 1.0)).clamp(0.0, 1.0)
}

/// `value_incorrect / value_correct`, absent when either value is missing,
/// the denominator is zero, or the result is not finite.
pub fn loss_ratio(value_incorrect: Option<f64>, value_correct: Option<f64>) -> Option<f64> {
    let (i, c) = (value_incorrect?, value_correct?);
    let r = i / c;
    (c != 0.0 && r.is_finite()).then_some(r)
}

/// Critic loss values on pairs the generator repairs correctly vs not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRatioReport {
    pub correct: usize,
    pub incorrect: usize,
    /// `mean D(y) − mean D(G(x))` on each partition.
    pub value_correct: Option<f64>,
    pub value_incorrect: Option<f64>,
    pub ratio: Option<f64>,
}

/// Splits `(x, y)` id pairs by whether the greedy output equals `y`, then
/// evaluates the Wasserstein value on each part. `width` is the critic
/// window; inputs and targets are task ids without framing.
pub fn loss_ratio_diagnostic<T: Scalar>(
    critic: &Critic<T>,
    generator: &Generator<T>,
    pairs: &[(Vec<usize>, Vec<usize>)],
    width: usize,
    batch: usize,
) -> Result<LossRatioReport> {
    ensure!(!pairs.is_empty() && batch > 0, Contract, "loss_ratio_diagnostic: empty probe set");
    let v = generator.config().vocab_size;
    let max_len = width - 1;
    let mut sums = [(0.0f64, 0usize); 2];
    for chunk in pairs.chunks(batch) {
        let xs: Vec<Vec<usize>> = chunk.iter().map(|(x, _)| frame(x)).collect();
        let mut g = Graph::new();
        let gv = generator.bind(&mut g, false);
        let enc = generator.encode(&mut g, &gv, &xs)?;
        let out = generator.generate(&mut g, &gv, &enc, max_len)?;
        let fake = soft_batch(&mut g, &out, chunk.len(), width, v)?;
        let cv = critic.bind(&mut g, false);
        let fs = critic.score(&mut g, &cv, fake)?;
        let ys: Vec<Vec<usize>> = chunk.iter().map(|(_, y)| frame(y)).collect();
        let real = g.constant(one_hot_batch(&ys, width, v)?);
        let rs = critic.score(&mut g, &cv, real)?;
        let (fv, rv) = (g.value(fs).data(), g.value(rs).data());
        for (b, (_, y)) in chunk.iter().enumerate() {
            let mut want = y.clone();
            want.push(EOS);
            let part = usize::from(out.tokens[b] != want);
            sums[part].0 += (rv[b] - fv[b]).as_f64();
            sums[part].1 += 1;
        }
    }
    let value = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    let (vc, vi) = (value(sums[0]), value(sums[1]));
    Ok(LossRatioReport {
        correct: sums[0].1,
        incorrect: sums[1].1,
        value_correct: vc,
        value_incorrect: vi,
        ratio: loss_ratio(vi, vc),
    })
}

/// Temporal profile of one first-layer filter.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterProfile {
    pub filter: usize,
    /// Per-position L2 norm across input channels, divided by the largest.
    pub weights: Vec<f64>,
    pub sparsity: f64,
}

/// Profiles of every first-layer filter with kernel size `kernel`.
pub fn export_filter_weights<T: Scalar>(critic: &Critic<T>, kernel: usize) -> Result<Vec<FilterProfile>> {
    let w = critic
        .first_layer(kernel)
        .ok_or_else(|| Error::Config(format!("critic has no kernel of size {kernel}")))?;
    let f = w.cols();
    let c = critic.config().vocab_size;
    let mut out = Vec::with_capacity(f);
    for fi in 0..f {
        let profile: Vec<f64> = (0..kernel)
            .map(|j| {
                (0..c)
                    .map(|ch| w.data()[(j * c + ch) * f + fi].as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let peak = profile.iter().copied().fold(0.0, f64::max);
        let weights = profile.iter().map(|&p| if peak > 0.0 { p / peak } else { 0.0 }).collect();
        out.push(FilterProfile {
            filter: fi,
            weights,
            sparsity: hoyer_sparsity(&profile),
        });
    }
    Ok(out)
}

pub fn mean_sparsity(profiles: &[FilterProfile]) -> f64 {
    if profiles.is_empty() {
        return 0.0;
    }
    profiles.iter().map(|p| p.sparsity).sum::<f64>() / profiles.len() as f64
}

/// `filter,position,weight,sparsity` rows; `header` lines are written first
/// as `#` comments.
pub fn filter_csv(profiles: &[FilterProfile], header: &[String]) -> String {
    let mut s = String::new();
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    s.push_str("filter,position,weight,sparsity\n");
    for p in profiles {
        for (j, w) in p.weights.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", p.filter, j, w, p.sparsity);
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub metrics: Vec<Metric>,
}

impl EvalReport {
    pub fn new(task: Task) -> Self {
        Self { task, metrics: Vec::new() }
    }

    pub fn push(&mut self, name: &str, value: f64, count: usize) {
        self.metrics.push(Metric {
            name: name.to_string(),
            value,
            count,
        });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,count\n");
        for m in &self.metrics {
            let _ = writeln!(s, "{},{},{}", m.name, m.value, m.count);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
