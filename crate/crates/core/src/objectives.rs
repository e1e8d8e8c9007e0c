//! Losses: the Wasserstein critic and generator terms, the autoencoder and
//! token-frequency regularizers, and per-token likelihood losses.
//!
//! Each loss has a plain function over values (used by tests and
//! diagnostics) and a graph builder used in training.

use serde::{Deserialize, Serialize};

use crate::datagen::{EOS, PAD, SOS};
use crate::error::{ensure, Error, Result};
use crate::seqmodel::{Generation, SoftSequence};
use crate::tensor::{Graph, Scalar, Tensor, Var, PROB_FLOOR};

/// Which regularizer joins the generator's adversarial loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    Base,
    Auto,
    Freq,
}

impl std::str::FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(RegMode::Base),
            "auto" => Ok(RegMode::Auto),
            "freq" => Ok(RegMode::Freq),
            other => Err(Error::Config(format!("unknown regularizer mode {other:?}"))),
        }
    }
}

/// Per-batch loss values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub wgan_d: Option<f64>,
    pub wgan_g: Option<f64>,
    pub auto: Option<f64>,
    pub freq: Option<f64>,
    pub pretrain: Option<f64>,
    pub nll: Option<f64>,
    pub lambda: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.wgan_d, self.wgan_g, self.auto, self.freq, self.pretrain, self.nll]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::of(xs.len() as f64)
}

/// `(critic_loss, generator_loss) = (−(mean real − mean fake), −mean fake)`.
pub fn wgan_losses<T: Scalar>(real: &[T], fake: &[T]) -> Result<(T, T)> {
    ensure!(!real.is_empty() && !fake.is_empty(), Contract, "wgan_losses: empty score batch");
    let (r, f) = (mean(real), mean(fake));
    Ok((-(r - f), -f))
}

/// Graph form of the critic loss over `[B, 1]` score blocks.
pub fn wgan_critic_loss<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var) -> Var {
    let r = g.mean(real);
    let f = g.mean(fake);
    g.sub(f, r)
}

/// Graph form of the generator's adversarial loss.
pub fn wgan_generator_loss<T: Scalar>(g: &mut Graph<T>, fake: Var) -> Var {
    let f = g.mean(fake);
    g.scale(f, -T::one())
}

/// Eq.-1 style minimax value `E[ln D(y)] + E[ln(1 − D(G(x)))]` for
/// discriminator probabilities. Reference only; training uses the
/// Wasserstein form.
pub fn gan_value<T: Scalar>(d_real: &[T], d_fake: &[T]) -> Result<T> {
    ensure!(!d_real.is_empty() && !d_fake.is_empty(), Contract, "gan_value: empty batch");
    let floor = T::of(PROB_FLOOR);
    let lr: Vec<T> = d_real.iter().map(|&d| d.max(floor).ln()).collect();
    let lf: Vec<T> = d_fake.iter().map(|&d| (T::one() - d).max(floor).ln()).collect();
    Ok(mean(&lr) + mean(&lf))
}

/// Mean over positions of `−ln rows[t][target[t]]`, probabilities floored.
pub fn token_nll<T: Scalar>(rows: &SoftSequence<T>, target: &[usize]) -> Result<T> {
    ensure!(
        rows.len() == target.len() && !target.is_empty(),
        Contract,
        "token_nll: {} rows for {} targets",
        rows.len(),
        target.len()
    );
    let floor = T::of(PROB_FLOOR);
    let mut total = T::zero();
    for (t, &y) in target.iter().enumerate() {
        let row = rows.row(t);
        if y >= row.len() {
            return Err(Error::Index { index: y, len: row.len() });
        }
        total -= row[y].max(floor).ln();
    }
    Ok(total / T::of(target.len() as f64))
}

/// Autoencoder regularizer: rows teacher-forced on `x` scored against `x`.
pub fn auto_loss<T: Scalar>(rows: &SoftSequence<T>, x: &[usize]) -> Result<T> {
    token_nll(rows, x)
}

/// Denoising loss: rows from a noised input, teacher-forced on `y`.
pub fn denoise_pretrain_loss<T: Scalar>(rows: &SoftSequence<T>, y: &[usize]) -> Result<T> {
    token_nll(rows, y)
}

/// Paired likelihood loss for the supervised baseline.
pub fn nll_seq2seq_loss<T: Scalar>(rows: &SoftSequence<T>, y: &[usize]) -> Result<T> {
    token_nll(rows, y)
}

/// Batched per-token NLL over teacher-forced rows `[B, n, V]`; PAD
/// positions beyond each target are masked. Each sequence contributes its
/// per-token mean; the batch is averaged.
pub fn masked_nll<T: Scalar>(g: &mut Graph<T>, rows: Var, targets: &[Vec<usize>]) -> Result<Var> {
    let shape = g.shape(rows).to_vec();
    ensure!(shape.len() == 3 && shape[0] == targets.len(), Contract, "masked_nll: rows {shape:?} for {} targets", targets.len());
    let n = shape[1];
    let b = targets.len() as f64;
    let mut idx = Vec::with_capacity(targets.len() * n);
    let mut weights = Vec::with_capacity(targets.len() * n);
    for y in targets {
        ensure!(!y.is_empty() && y.len() <= n, Contract, "masked_nll: target length {} for {n} rows", y.len());
        let w = -1.0 / (b * y.len() as f64);
        for t in 0..n {
            idx.push(y.get(t).copied().unwrap_or(PAD));
            weights.push(T::of(if t < y.len() { w } else { 0.0 }));
        }
    }
    let p = g.pick(rows, &idx);
    let lp = g.log_floor(p, T::of(PROB_FLOOR));
    Ok(g.dot_const(lp, weights))
}

fn histogram<T: Scalar>(x: &[usize], v: usize, excluded: &[usize]) -> Result<Vec<T>> {
    let mut h = vec![T::zero(); v];
    let kept: Vec<usize> = x.iter().copied().filter(|i| !excluded.contains(i)).collect();
    ensure!(!kept.is_empty(), Contract, "freq_loss: input has no countable tokens");
    for &i in &kept {
        if i >= v {
            return Err(Error::Index { index: i, len: v });
        }
        h[i] += T::one();
    }
    let n = T::of(kept.len() as f64);
    h.iter_mut().for_each(|c| *c = *c / n);
    Ok(h)
}

/// `Σ_i (freq(x, i) − freq(out, i))²` with normalized frequencies: counts
/// over `|x|` and column sums of `out` over its row count. Ids in
/// `excluded` are left out of both histograms.
pub fn freq_loss<T: Scalar>(x: &[usize], out: &SoftSequence<T>, excluded: &[usize]) -> Result<T> {
    ensure!(!out.is_empty(), Contract, "freq_loss: empty output");
    let v = out.vocab_size();
    let hx = histogram::<T>(x, v, excluded)?;
    let tp = T::of(out.len() as f64);
    let mut loss = T::zero();
    for i in 0..v {
        if excluded.contains(&i) {
            continue;
        }
        let fo = (0..out.len()).map(|t| out.row(t)[i]).sum::<T>() / tp;
        let d = hx[i] - fo;
        loss += d * d;
    }
    Ok(loss)
}

/// Framework specials, excluded from frequency histograms.
pub const SPECIALS: [usize; 3] = [PAD, SOS, EOS];

/// Batched frequency loss against free-running output. A sequence's
/// output rows are those before its EOS row (all rows if it never emitted
/// EOS, at least one). Averaged over the batch.
pub fn freq_loss_batch<T: Scalar>(g: &mut Graph<T>, inputs: &[Vec<usize>], out: &Generation) -> Result<Var> {
    ensure!(!out.rows.is_empty(), Contract, "freq_loss: empty output");
    let bsz = inputs.len();
    ensure!(bsz == out.tokens.len(), Contract, "freq_loss: batch size mismatch");
    let v = g.value(out.rows[0]).cols();
    let steps = out.rows.len();
    let mut target = Vec::with_capacity(bsz * v);
    let mut weights = vec![T::zero(); bsz * steps];
    for (b, x) in inputs.iter().enumerate() {
        target.extend(histogram::<T>(x, v, &SPECIALS)?);
        let toks = &out.tokens[b];
        let content = if toks.last() == Some(&EOS) { toks.len() - 1 } else { toks.len() };
        let content = content.max(1).min(steps);
        let w = T::one() / T::of(content as f64);
        for t in 0..content {
            weights[b * steps + t] = w;
        }
    }
    let rows = g.stack(&out.rows);
    let f = g.time_sum(rows, weights);
    let mut keep = vec![T::one(); bsz * v];
    for b in 0..bsz {
        for &s in &SPECIALS {
            keep[b * v + s] = T::zero();
        }
    }
    let keep = g.constant(Tensor::from_parts(vec![bsz, v], keep));
    let f = g.mul(f, keep);
    let tgt = g.constant(Tensor::from_parts(vec![bsz, v], target));
    let d = g.sub(tgt, f);
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, T::one() / T::of(bsz as f64)))
}

/// `wgan_g + λ·reg` for the auto and freq modes, `wgan_g` for base.
pub fn combined_generator_loss<T: Scalar>(wgan_g: T, reg: T, mode: RegMode, lambda: f64) -> Result<T> {
    ensure!(lambda >= 0.0, Config, "lambda must be nonnegative, got {lambda}");
    Ok(match mode {
        RegMode::Base => wgan_g,
        RegMode::Auto | RegMode::Freq => wgan_g + T::of(lambda) * reg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SeededRng;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn soft(rows: Vec<Vec<f64>>) -> SoftSequence<f64> {
        let v = rows[0].len();
        let n = rows.len();
        SoftSequence::new(Tensor::new(vec![n, v], rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn wgan_examples() {
        let (d, g) = wgan_losses(&[1.0, 0.5], &[0.25, 0.25]).unwrap();
        assert_eq!((d, g), (-0.5, -0.25));
        let (d, _) = wgan_losses(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert_eq!(d, 0.0);
        let (d1, _): (f64, f64) = wgan_losses(&[1.0, 0.5], &[0.25, 0.75]).unwrap();
        let (d2, _) = wgan_losses(&[4.0, 3.5], &[3.25, 3.75]).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
        assert!(wgan_losses::<f64>(&[], &[1.0]).is_err());

        let mut gr = Graph::<f64>::new();
        let r = gr.constant(Tensor::new(vec![2, 1], vec![1.0, 0.5]).unwrap());
        let f = gr.constant(Tensor::new(vec![2, 1], vec![0.25, 0.25]).unwrap());
        let cl = wgan_critic_loss(&mut gr, r, f);
        let gl = wgan_generator_loss(&mut gr, f);
        assert_eq!(gr.value(cl).item(), -0.5);
        assert_eq!(gr.value(gl).item(), -0.25);
    }

    #[test]
    fn gan_value_reference() {
        let v = gan_value(&[0.5], &[0.5]).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let perfect = gan_value(&[1.0], &[0.0]).unwrap();
        assert_eq!(perfect, 0.0);
    }

    #[test]
    fn likelihood_examples() {
        let exact = soft(vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]);
        assert_eq!(auto_loss(&exact, &[1, 3]).unwrap(), 0.0);
        assert_eq!(denoise_pretrain_loss(&exact, &[1, 3]).unwrap(), 0.0);
        let uni = soft(vec![vec![0.25; 4]; 3]);
        for f in [auto_loss, denoise_pretrain_loss, nll_seq2seq_loss] {
            assert!((f(&uni, &[0, 2, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        }
        assert!(auto_loss(&uni, &[0, 1]).is_err());
        let worse = soft(vec![vec![0.4, 0.6]]);
        let better = soft(vec![vec![0.3, 0.7]]);
        assert!(nll_seq2seq_loss(&better, &[1]).unwrap() < nll_seq2seq_loss(&worse, &[1]).unwrap());
    }

    #[test]
    fn masked_nll_ignores_padding() {
        let mut g = Graph::<f64>::new();
        let mut data = vec![0.25; 2 * 4 * 4];
        // sequence 0 has 2 real targets; its padded rows hold garbage
        for v in &mut data[8..16] {
            *v = 0.9;
        }
        let rows = g.constant(Tensor::new(vec![2, 4, 4], data).unwrap());
        let l = masked_nll(&mut g, rows, &[vec![1, 2], vec![0, 1, 2, 3]]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn freq_examples() {
        let out = soft(vec![vec![0.5, 0.5]]);
        assert!((freq_loss(&[0], &out, &[]).unwrap() - 0.5).abs() < 1e-12);
        let x = [3, 4, 4, 5];
        let same = SoftSequence::<f64>::one_hot(&x, 6).unwrap();
        assert_eq!(freq_loss(&x, &same, &SPECIALS).unwrap(), 0.0);
        let perm = SoftSequence::<f64>::one_hot(&[4, 5, 3, 4], 6).unwrap();
        assert_eq!(freq_loss(&x, &perm, &SPECIALS).unwrap(), 0.0);
        assert!(freq_loss(&[], &perm, &SPECIALS).is_err());
    }

    #[test]
    fn freq_batch_matches_single() {
        let mut rng = SeededRng::new(3);
        let v = 7;
        let mut g = Graph::<f64>::new();
        let steps = 4;
        let mut rows = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..steps {
            let mut d: Vec<f64> = (0..2 * v).map(|_| rng.random_range(0.01..1.0)).collect();
            for r in d.chunks_mut(v) {
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|x| *x /= s);
            }
            raw.push(d.clone());
            rows.push(g.constant(Tensor::new(vec![2, v], d).unwrap()));
        }
        // sequence 0 emitted EOS at step 3, sequence 1 never did
        let out = Generation { rows, tokens: vec![vec![3, 4, EOS], vec![5, 5, 6, 3]] };
        let inputs = vec![vec![3, 4, 4], vec![5, 6]];
        let l = freq_loss_batch(&mut g, &inputs, &out).unwrap();
        let single = |b: usize, n: usize| {
            let data: Vec<f64> = (0..n).flat_map(|t| raw[t][b * v..(b + 1) * v].to_vec()).collect();
            let s = SoftSequence::new(Tensor::new(vec![n, v], data).unwrap()).unwrap();
            freq_loss(&inputs[b], &s, &SPECIALS).unwrap()
        };
        let want = 0.5 * (single(0, 2) + single(1, 4));
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_generator_loss(-0.25, 0.5, RegMode::Freq, 1.0).unwrap(), 0.25);
        for m in [RegMode::Base, RegMode::Auto, RegMode::Freq] {
            assert_eq!(combined_generator_loss(-0.7, 3.0, m, 0.0).unwrap(), -0.7);
        }
        assert_eq!(combined_generator_loss(-1.0, 2.0, RegMode::Auto, 0.5).unwrap(), 0.0);
        assert!("gan".parse::<RegMode>().is_err());
        assert!(combined_generator_loss(0.0, 0.0, RegMode::Auto, -1.0).is_err());
    }

    #[test]
    fn freq_permutation_invariance_on_random_sequences() {
        let mut rng = SeededRng::new(21);
        for _ in 0..1000 {
            let n = rng.random_range(1..20);
            let x: Vec<usize> = (0..n).map(|_| rng.random_range(3..12)).collect();
            let mut y: Vec<usize> = (0..rng.random_range(1..20)).map(|_| rng.random_range(3..12)).collect();
            let base = freq_loss(&x, &SoftSequence::<f64>::one_hot(&y, 12).unwrap(), &SPECIALS).unwrap();
            y.shuffle(&mut rng);
            let shuffled = freq_loss(&x, &SoftSequence::<f64>::one_hot(&y, 12).unwrap(), &SPECIALS).unwrap();
            assert_eq!(base, shuffled);
        }
    }

    proptest! {
        #[test]
        fn freq_zero_iff_equal_histograms(x in prop::collection::vec(3usize..8, 1..12), y in prop::collection::vec(3usize..8, 1..12)) {
            let l = freq_loss(&x, &SoftSequence::<f64>::one_hot(&y, 8).unwrap(), &SPECIALS).unwrap();
            let hx = histogram::<f64>(&x, 8, &SPECIALS).unwrap();
            let hy = histogram::<f64>(&y, 8, &SPECIALS).unwrap();
            let equal = hx.iter().zip(&hy).all(|(a, b)| (a - b).abs() < 1e-9);
            prop_assert_eq!(l < 1e-18, equal);
        }

        #[test]
        fn combined_is_linear_in_lambda(g0 in -5.0f64..5.0, r in 0.0f64..5.0, l1 in 0.0f64..3.0, l2 in 0.0f64..3.0) {
            let f = |l| combined_generator_loss(g0, r, RegMode::Freq, l).unwrap();
            prop_assert!((f(l1 + l2) - (f(l1) + f(l2) - f(0.0))).abs() < 1e-9);
        }
    }
}
