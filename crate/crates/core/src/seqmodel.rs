//! The generator: an LSTM encoder–decoder with global dot attention that
//! emits one softmax row per output position.
//!
//! Everything is batched. Sequences are given as token ids already framed
//! with `SOS … EOS`; shorter sequences are right-padded and masked so a
//! padded batch gives the same per-sequence results as running each
//! sequence alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{EOS, PAD, SOS};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

/// Additive attention-score bias for padded encoder positions.
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab_size > EOS, Config, "vocabulary too small: {}", self.vocab_size);
        ensure!(self.hidden > 0 && self.layers > 0, Config, "generator needs hidden > 0 and layers > 0");
        Ok(())
    }
}

/// Xavier-uniform `[fan_in, fan_out]` matrix.
pub fn xavier<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-a..a)))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

/// LSTM bias `[4d]` in gate order i, f, g, o with the forget block at one.
pub fn lstm_bias<T: Scalar>(hidden: usize) -> Tensor<T> {
    let mut b = Tensor::zeros(&[4 * hidden]);
    for v in &mut b.data_mut()[hidden..2 * hidden] {
        *v = T::one();
    }
    b
}

/// One LSTM step for a batch: `x: [B, in]`, `h, c: [B, d]`,
/// `w: [in + d, 4d]`, `b: [4d]`. Returns the new `(h, c)`.
pub fn lstm_cell<T: Scalar>(g: &mut Graph<T>, x: Var, h: Var, c: Var, w: Var, b: Var) -> (Var, Var) {
    let d = g.value(h).cols();
    let xh = g.concat(&[x, h]);
    let z = g.matmul(xh, w);
    let z = g.add_bias(z, b);
    let i = g.slice(z, 0, d);
    let f = g.slice(z, d, d);
    let gg = g.slice(z, 2 * d, d);
    let o = g.slice(z, 3 * d, d);
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let gg = g.tanh(gg);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c);
    let write = g.mul(i, gg);
    let c_new = g.add(keep, write);
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc);
    (h_new, c_new)
}

/// Dot attention: `scores = keys · query`, softmax, weighted sum.
/// `mask_bias` (same shape as the scores) is added before the softmax.
pub fn attend<T: Scalar>(g: &mut Graph<T>, query: Var, keys: Var, mask_bias: Option<Var>) -> (Var, Var) {
    let mut scores = g.attn_scores(keys, query);
    if let Some(m) = mask_bias {
        scores = g.add(scores, m);
    }
    let w = g.softmax_rows(scores);
    let ctx = g.attn_context(w, keys);
    (ctx, w)
}

/// Per-layer `(h, c)` for a batch.
#[derive(Clone, Debug)]
pub struct RnnState {
    pub layers: Vec<(Var, Var)>,
}

/// Encoder output for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Top-layer states `[B, T, d]`.
    pub keys: Var,
    /// `[B, T]` additive mask, absent when no sequence is padded.
    pub mask_bias: Option<Var>,
    pub lengths: Vec<usize>,
    pub final_state: RnnState,
}

/// Graph handles for one generator's parameters.
#[derive(Clone, Debug)]
pub struct GenVars {
    pub embed: Var,
    pub enc: Vec<(Var, Var)>,
    pub dec: Vec<(Var, Var)>,
    pub out_w: Var,
    pub out_b: Var,
    pub all: Vec<Var>,
}

/// Result of batched free-running generation.
#[derive(Clone, Debug)]
pub struct Generation {
    /// One `[B, V]` row block per step. Rows after a sequence's EOS row are
    /// the PAD one-hot.
    pub rows: Vec<Var>,
    /// Argmax tokens per sequence, up to and including EOS when emitted.
    pub tokens: Vec<Vec<usize>>,
}

impl Generation {
    /// Rows emitted by sequence `b`, counting its EOS row.
    pub fn emitted(&self, b: usize) -> usize {
        self.tokens[b].len()
    }
}

/// `T′ × V` matrix of output distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSequence<T> {
    rows: Tensor<T>,
}

impl<T: Scalar> SoftSequence<T> {
    pub fn new(rows: Tensor<T>) -> Result<Self> {
        ensure!(rows.shape().len() == 2, Contract, "soft sequence must be 2-D, got {:?}", rows.shape());
        Ok(Self { rows })
    }

    /// One-hot rows for hard token ids.
    pub fn one_hot(ids: &[usize], vocab_size: usize) -> Result<Self> {
        ensure!(!ids.is_empty(), Contract, "one_hot of an empty sequence");
        let mut rows = Tensor::zeros(&[ids.len(), vocab_size]);
        for (t, &i) in ids.iter().enumerate() {
            if i >= vocab_size {
                return Err(Error::Index { index: i, len: vocab_size });
            }
            rows.data_mut()[t * vocab_size + i] = T::one();
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, t: usize) -> &[T] {
        let v = self.vocab_size();
        &self.rows.data()[t * v..(t + 1) * v]
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.len()).map(|t| argmax(self.row(t))).collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `SOS ids EOS`.
pub fn frame(ids: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(SOS);
    out.extend_from_slice(ids);
    out.push(EOS);
    out
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    config: GeneratorConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.hidden);
        let mut params = ParamStore::new();
        params.push("gen.embed", xavier(rng, v, d));
        for side in ["enc", "dec"] {
            for l in 0..config.layers {
                params.push(format!("gen.{side}.{l}.w"), xavier(rng, 2 * d, 4 * d));
                params.push(format!("gen.{side}.{l}.b"), lstm_bias(d));
            }
        }
        params.push("gen.out.w", xavier(rng, 2 * d, v));
        params.push("gen.out.b", Tensor::zeros(&[v]));
        Ok(Self { config, params })
    }

    /// All parameters zero.
    pub fn zeroed(config: GeneratorConfig) -> Result<Self> {
        let mut g = Self::new(config, &mut crate::datagen::SeededRng::new(0))?;
        for p in g.params.values_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        Ok(g)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Places the parameters on `g`.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> GenVars {
        let all = self.params.bind(g, requires_grad);
        let n = self.config.layers;
        let pair = |i: usize| (all[i], all[i + 1]);
        let enc = (0..n).map(|l| pair(1 + 2 * l)).collect();
        let dec = (0..n).map(|l| pair(1 + 2 * n + 2 * l)).collect();
        GenVars {
            embed: all[0],
            enc,
            dec,
            out_w: all[1 + 4 * n],
            out_b: all[2 + 4 * n],
            all,
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        for &i in ids {
            if i >= self.config.vocab_size {
                return Err(Error::Index { index: i, len: self.config.vocab_size });
            }
        }
        Ok(())
    }

    /// Runs the encoder over a batch of (framed) sequences.
    pub fn encode(&self, g: &mut Graph<T>, vars: &GenVars, batch: &[Vec<usize>]) -> Result<Encoded> {
        ensure!(!batch.is_empty(), Contract, "encode: empty batch");
        let lengths: Vec<usize> = batch.iter().map(Vec::len).collect();
        ensure!(lengths.iter().all(|&l| l > 0), Contract, "encode: empty input sequence");
        for s in batch {
            self.check_ids(s)?;
        }
        let bsz = batch.len();
        let d = self.config.hidden;
        let tmax = *lengths.iter().max().expect("nonempty");
        let ragged = lengths.iter().any(|&l| l != tmax);
        let zero = g.constant(Tensor::zeros(&[bsz, d]));
        let mut state: Vec<(Var, Var)> = vec![(zero, zero); self.config.layers];
        let mut tops = Vec::with_capacity(tmax);
        for t in 0..tmax {
            let ids: Vec<usize> = batch.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let mut x = g.gather(vars.embed, &ids);
            let mask = ragged.then(|| {
                let m: Vec<T> = lengths.iter().map(|&l| if t < l { T::one() } else { T::zero() }).collect();
                g.constant(Tensor::from_parts(vec![bsz, 1], m))
            });
            for (l, &(w, b)) in vars.enc.iter().enumerate() {
                let (h0, c0) = state[l];
                let (mut h, mut c) = lstm_cell(g, x, h0, c0, w, b);
                if let Some(m) = mask {
                    h = hold(g, h, h0, m);
                    c = hold(g, c, c0, m);
                }
                state[l] = (h, c);
                x = h;
            }
            tops.push(x);
        }
        let keys = g.stack(&tops);
        let mask_bias = ragged.then(|| {
            let bias: Vec<T> = lengths
                .iter()
                .flat_map(|&l| (0..tmax).map(move |t| if t < l { T::zero() } else { T::of(MASKED_SCORE) }))
                .collect();
            g.constant(Tensor::from_parts(vec![bsz, tmax], bias))
        });
        Ok(Encoded {
            keys,
            mask_bias,
            lengths,
            final_state: RnnState { layers: state },
        })
    }

    /// One decoder step: returns the `[B, V]` output distribution and the new
    /// state.
    pub fn decode_step(
        &self,
        g: &mut Graph<T>,
        vars: &GenVars,
        enc: &Encoded,
        prev: &[usize],
        state: &RnnState,
    ) -> Result<(Var, RnnState)> {
        self.check_ids(prev)?;
        ensure!(prev.len() == enc.lengths.len(), Contract, "decode_step: batch size mismatch");
        let mut x = g.gather(vars.embed, prev);
        let mut next = Vec::with_capacity(self.config.layers);
        for (l, &(w, b)) in vars.dec.iter().enumerate() {
            let (h0, c0) = state.layers[l];
            let (h, c) = lstm_cell(g, x, h0, c0, w, b);
            next.push((h, c));
            x = h;
        }
        let (ctx, _) = attend(g, x, enc.keys, enc.mask_bias);
        let hc = g.concat(&[x, ctx]);
        let logits = g.matmul(hc, vars.out_w);
        let logits = g.add_bias(logits, vars.out_b);
        let probs = g.softmax_rows(logits);
        Ok((probs, RnnState { layers: next }))
    }

    /// Free-running generation with argmax feedback for at most `max_len`
    /// steps; stops early once every sequence has emitted EOS.
    pub fn generate(&self, g: &mut Graph<T>, vars: &GenVars, enc: &Encoded, max_len: usize) -> Result<Generation> {
        ensure!(max_len >= 1, Contract, "generate: max_len must be at least 1");
        let bsz = enc.lengths.len();
        let v = self.config.vocab_size;
        let mut state = enc.final_state.clone();
        let mut prev = vec![SOS; bsz];
        let mut alive = vec![true; bsz];
        let mut tokens = vec![Vec::new(); bsz];
        let mut rows = Vec::with_capacity(max_len);
        for _ in 0..max_len {
            if !alive.iter().any(|&a| a) {
                break;
            }
            let (probs, next) = self.decode_step(g, vars, enc, &prev, &state)?;
            state = next;
            let row = if alive.iter().all(|&a| a) {
                probs
            } else {
                let keep: Vec<T> = alive.iter().map(|&a| if a { T::one() } else { T::zero() }).collect();
                let keep = g.constant(Tensor::from_parts(vec![bsz, 1], keep));
                let kept = g.mul_col(probs, keep);
                let mut pads = Tensor::zeros(&[bsz, v]);
                for (b, &a) in alive.iter().enumerate() {
                    if !a {
                        pads.data_mut()[b * v + PAD] = T::one();
                    }
                }
                let pads = g.constant(pads);
                g.add(kept, pads)
            };
            rows.push(row);
            let pv = g.value(probs).data();
            for b in 0..bsz {
                let tok = if alive[b] { argmax(&pv[b * v..(b + 1) * v]) } else { PAD };
                if alive[b] {
                    tokens[b].push(tok);
                    if tok == EOS {
                        alive[b] = false;
                    }
                }
                prev[b] = tok;
            }
        }
        Ok(Generation { rows, tokens })
    }

    /// Teacher-forced rows: the decoder reads `SOS, y₁ … y_{n−1}` and emits
    /// one row per target position. Targets are right-padded with PAD; the
    /// returned rows have shape `[B, n_max, V]`.
    pub fn teacher_forced(
        &self,
        g: &mut Graph<T>,
        vars: &GenVars,
        enc: &Encoded,
        targets: &[Vec<usize>],
    ) -> Result<Var> {
        ensure!(targets.len() == enc.lengths.len(), Contract, "teacher_forced: batch size mismatch");
        ensure!(targets.iter().all(|y| !y.is_empty()), Contract, "teacher_forced: empty target");
        for y in targets {
            self.check_ids(y)?;
        }
        let n = targets.iter().map(Vec::len).max().expect("nonempty");
        let mut state = enc.final_state.clone();
        let mut prev = vec![SOS; targets.len()];
        let mut rows = Vec::with_capacity(n);
        for t in 0..n {
            let (probs, next) = self.decode_step(g, vars, enc, &prev, &state)?;
            state = next;
            rows.push(probs);
            for (p, y) in prev.iter_mut().zip(targets) {
                *p = y.get(t).copied().unwrap_or(PAD);
            }
        }
        Ok(g.stack(&rows))
    }

    /// Single-sequence generation on a private graph.
    pub fn generate_one(&self, x: &[usize], max_len: usize) -> Result<SoftSequence<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let enc = self.encode(&mut g, &vars, &[x.to_vec()])?;
        let out = self.generate(&mut g, &vars, &enc, max_len)?;
        let v = self.config.vocab_size;
        let mut data = Vec::with_capacity(out.rows.len() * v);
        for r in &out.rows {
            data.extend_from_slice(g.value(*r).data());
        }
        SoftSequence::new(Tensor::from_parts(vec![out.rows.len(), v], data))
    }

    /// Single-sequence teacher forcing on a private graph.
    pub fn teacher_forced_one(&self, x: &[usize], y: &[usize]) -> Result<SoftSequence<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let enc = self.encode(&mut g, &vars, &[x.to_vec()])?;
        let rows = self.teacher_forced(&mut g, &vars, &enc, &[y.to_vec()])?;
        let v = self.config.vocab_size;
        SoftSequence::new(g.value(rows).clone().reshaped(vec![y.len(), v]))
    }

    /// Hard outputs for a batch of framed inputs, each truncated after EOS.
    pub fn greedy(&self, batch: &[Vec<usize>], max_len: &[usize]) -> Result<Vec<Vec<usize>>> {
        ensure!(batch.len() == max_len.len(), Contract, "greedy: one max_len per input");
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let enc = self.encode(&mut g, &vars, batch)?;
        let longest = max_len.iter().copied().max().unwrap_or(1).max(1);
        let out = self.generate(&mut g, &vars, &enc, longest)?;
        Ok(out
            .tokens
            .into_iter()
            .zip(max_len)
            .map(|(mut t, &m)| {
                t.truncate(m);
                t
            })
            .collect())
    }
}

/// `m ? new : old` row-wise for a `[B, 1]` 0/1 mask.
fn hold<T: Scalar>(g: &mut Graph<T>, new: Var, old: Var, mask: Var) -> Var {
    let delta = g.sub(new, old);
    let delta = g.mul_col(delta, mask);
    g.add(old, delta)
}
