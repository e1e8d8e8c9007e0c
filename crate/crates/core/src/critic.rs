//! The Wasserstein critic: parallel 1-D convolution banks over the token
//! axis, max pooling over time, then a two-layer head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{PAD, SOS};
use crate::error::{ensure, Result};
use crate::seqmodel::{xavier, Generation};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub vocab_size: usize,
    /// Convolution layers per bank: 1 or 3.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_kernels")]
    pub kernels: Vec<usize>,
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_depth() -> usize {
    1
}

fn default_kernels() -> Vec<usize> {
    vec![3, 7, 11]
}

fn default_filters() -> usize {
    300
}

fn default_hidden() -> usize {
    512
}

/// Kernel size of the deeper convolution layers.
pub const DEEP_KERNEL: usize = 3;

impl CriticConfig {
    pub fn new(vocab_size: usize, depth: usize) -> Self {
        Self {
            vocab_size,
            depth,
            kernels: default_kernels(),
            filters: default_filters(),
            hidden: default_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth == 1 || self.depth == 3, Config, "critic depth must be 1 or 3, got {}", self.depth);
        ensure!(!self.kernels.is_empty(), Config, "critic needs at least one kernel size");
        ensure!(
            self.kernels.iter().all(|&k| k % 2 == 1),
            Config,
            "critic kernel sizes must be odd: {:?}",
            self.kernels
        );
        ensure!(self.filters > 0 && self.hidden > 0 && self.vocab_size > 0, Config, "critic sizes must be positive");
        Ok(())
    }
}

/// Graph handles for a critic's parameters.
#[derive(Clone, Debug)]
pub struct CriticVars {
    /// Per bank: `(kernel, [(filters, bias)] per layer)`.
    pub banks: Vec<(usize, Vec<(Var, Var)>)>,
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
    pub all: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Critic<T> {
    config: CriticConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Critic<T> {
    pub fn new<R: Rng + ?Sized>(config: CriticConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, f) = (config.vocab_size, config.filters);
        let mut params = ParamStore::new();
        for &k in &config.kernels {
            params.push(format!("critic.k{k}.0.w"), xavier(rng, k * v, f));
            params.push(format!("critic.k{k}.0.b"), Tensor::zeros(&[f]));
            for l in 1..config.depth {
                params.push(format!("critic.k{k}.{l}.w"), xavier(rng, DEEP_KERNEL * f, f));
                params.push(format!("critic.k{k}.{l}.b"), Tensor::zeros(&[f]));
            }
        }
        let pooled = f * config.kernels.len();
        params.push("critic.fc1.w", xavier(rng, pooled, config.hidden));
        params.push("critic.fc1.b", Tensor::zeros(&[config.hidden]));
        params.push("critic.fc2.w", xavier(rng, config.hidden, 1));
        params.push("critic.fc2.b", Tensor::zeros(&[1]));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// First-layer filters of kernel size `k` as `[k*V, F]`, tap-major.
    pub fn first_layer(&self, k: usize) -> Option<&Tensor<T>> {
        self.params.by_name(&format!("critic.k{k}.0.w"))
    }

    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> CriticVars {
        let all = self.params.bind(g, requires_grad);
        let mut i = 0;
        let mut banks = Vec::with_capacity(self.config.kernels.len());
        for &k in &self.config.kernels {
            let layers = (0..self.config.depth)
                .map(|_| {
                    i += 2;
                    (all[i - 2], all[i - 1])
                })
                .collect();
            banks.push((k, layers));
        }
        CriticVars {
            banks,
            fc1: (all[i], all[i + 1]),
            fc2: (all[i + 2], all[i + 3]),
            all,
        }
    }

    /// Scores a `[B, W, V]` batch of row-stochastic sequences; returns `[B, 1]`.
    pub fn score(&self, g: &mut Graph<T>, vars: &CriticVars, input: Var) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        ensure!(
            shape.len() == 3 && shape[2] == self.config.vocab_size,
            Contract,
            "critic input must be [B, W, {}], got {shape:?}",
            self.config.vocab_size
        );
        let mut pooled = Vec::with_capacity(vars.banks.len());
        for (k, layers) in &vars.banks {
            let (w0, b0) = layers[0];
            let mut h = g.conv1d(input, w0, *k);
            h = g.add_bias(h, b0);
            for &(w, b) in &layers[1..] {
                h = g.relu(h);
                h = g.conv1d(h, w, DEEP_KERNEL);
                h = g.add_bias(h, b);
            }
            if layers.len() > 1 {
                h = g.relu(h);
            }
            pooled.push(g.max_time(h));
        }
        let feat = g.concat(&pooled);
        let (w1, b1) = vars.fc1;
        let z = g.matmul(feat, w1);
        let z = g.add_bias(z, b1);
        let z = g.relu(z);
        let (w2, b2) = vars.fc2;
        let s = g.matmul(z, w2);
        Ok(g.add_bias(s, b2))
    }

    /// Scores on a private graph, one value per sequence.
    pub fn score_values(&self, input: Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input);
        let s = self.score(&mut g, &vars, x)?;
        Ok(g.value(s).data().to_vec())
    }
}

/// One-hot `[B, W, V]` input for hard framed sequences, PAD-filled.
pub fn one_hot_batch<T: Scalar>(seqs: &[Vec<usize>], width: usize, vocab_size: usize) -> Result<Tensor<T>> {
    ensure!(!seqs.is_empty(), Contract, "one_hot_batch: empty batch");
    let mut t = Tensor::zeros(&[seqs.len(), width, vocab_size]);
    let data = t.data_mut();
    for (b, s) in seqs.iter().enumerate() {
        ensure!(s.len() <= width, Contract, "sequence of length {} exceeds critic width {width}", s.len());
        for pos in 0..width {
            let tok = s.get(pos).copied().unwrap_or(PAD);
            ensure!(tok < vocab_size, Contract, "token {tok} outside vocabulary {vocab_size}");
            data[(b * width + pos) * vocab_size + tok] = T::one();
        }
    }
    Ok(t)
}

/// Critic input for generated rows: the SOS one-hot, the generated rows,
/// then PAD one-hots up to `width`.
pub fn soft_batch<T: Scalar>(g: &mut Graph<T>, out: &Generation, batch: usize, width: usize, vocab_size: usize) -> Result<Var> {
    ensure!(
        out.rows.len() < width,
        Contract,
        "{} generated rows do not fit critic width {width}",
        out.rows.len()
    );
    let block = |token: usize| {
        let mut t = Tensor::zeros(&[batch, vocab_size]);
        for b in 0..batch {
            t.data_mut()[b * vocab_size + token] = T::one();
        }
        t
    };
    let mut parts = Vec::with_capacity(width);
    parts.push(g.constant(block(SOS)));
    parts.extend_from_slice(&out.rows);
    if parts.len() < width {
        let pad = g.constant(block(PAD));
        parts.resize(width, pad);
    }
    Ok(g.stack(&parts))
}
