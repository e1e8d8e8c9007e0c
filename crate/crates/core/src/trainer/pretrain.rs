use rand::seq::SliceRandom;

use super::checkpoint::{Checkpoint, CheckpointKind, Progress};
use super::config::TrainConfig;
use super::{cell, ensure_finite, purpose, MetricsLog};
use crate::datagen::{noise_sequence, SeededRng, EOS, TASK_OFFSET};
use crate::error::{ensure, Error, Result};
use crate::objectives::masked_nll;
use crate::seqmodel::{frame, Generator};
use crate::tensor::{Adam, AdamHyper, Graph};

/// Denoising autoencoder pretraining of the generator on clean sequences.
pub struct PretrainRun {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub opt: Adam<f32>,
    pub progress: Progress,
    pub log: MetricsLog,
}

fn noised_pairs(
    ys: &[&Vec<usize>],
    rng: &mut SeededRng,
    symbols: &[u32],
    cfg: &TrainConfig,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut inputs = Vec::with_capacity(ys.len());
    let mut targets = Vec::with_capacity(ys.len());
    for y in ys {
        let raw: Vec<u32> = y.iter().map(|&i| i as u32).collect();
        let noised = noise_sequence(&raw, rng, symbols, cfg.noise.p_drop, cfg.noise.rate);
        let ids: Vec<usize> = noised.into_iter().map(|i| i as usize).collect();
        inputs.push(frame(&ids));
        let mut t = (*y).clone();
        t.push(EOS);
        targets.push(t);
    }
    (inputs, targets)
}

impl PretrainRun {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = SeededRng::new(config.seed);
        let generator = Generator::new(config.generator_config(), &mut root.substream(&[purpose::INIT]))?;
        let opt = Adam::new(AdamHyper::with_lr(config.lr_pretrain), generator.params());
        Ok(Self {
            config,
            generator,
            opt,
            progress: Progress::default(),
            log: Self::empty_log(),
        })
    }

    fn empty_log() -> MetricsLog {
        MetricsLog::new(&["epoch", "loss", "heldout_loss"])
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ensure!(ck.trailer.kind == CheckpointKind::Pretrain, Checkpoint, "not a pretraining checkpoint");
        let generator = ck.generator()?;
        let opt = ck
            .adam("generator", generator.params())?
            .ok_or_else(|| Error::Checkpoint("missing generator optimizer".into()))?;
        Ok(Self {
            config: ck.trailer.config.clone(),
            generator,
            opt,
            progress: ck.trailer.progress.clone(),
            log: Self::empty_log(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointKind::Pretrain, self.config.clone());
        ck.push_params(self.generator.params());
        ck.push_adam("generator", &self.opt, self.generator.params());
        ck.trailer.progress = self.progress.clone();
        ck
    }

    pub fn finished(&self) -> bool {
        self.progress.epoch >= self.config.pretrain_epochs
    }

    fn symbols(&self) -> Vec<u32> {
        (TASK_OFFSET..self.config.vocab_size()).map(|i| i as u32).collect()
    }

    /// Mean per-sequence denoising loss on `heldout`, with noise fixed by
    /// the run seed.
    pub fn heldout_loss(&self, heldout: &[Vec<usize>]) -> Result<f64> {
        ensure!(!heldout.is_empty(), Data, "empty held-out set");
        let mut rng = SeededRng::new(self.config.seed).substream(&[purpose::HELDOUT]);
        let symbols = self.symbols();
        let mut total = 0.0;
        for chunk in heldout.chunks(self.config.batch_size) {
            let refs: Vec<&Vec<usize>> = chunk.iter().collect();
            let (inputs, targets) = noised_pairs(&refs, &mut rng, &symbols, &self.config);
            let mut g = Graph::new();
            let vars = self.generator.bind(&mut g, false);
            let enc = self.generator.encode(&mut g, &vars, &inputs)?;
            let rows = self.generator.teacher_forced(&mut g, &vars, &enc, &targets)?;
            let loss = masked_nll(&mut g, rows, &targets)?;
            total += g.value(loss).item() as f64 * chunk.len() as f64;
        }
        Ok(total / heldout.len() as f64)
    }

    pub fn run_epoch(&mut self, good: &[Vec<usize>], heldout: &[Vec<usize>]) -> Result<()> {
        ensure!(!good.is_empty(), Data, "empty pretraining set");
        let epoch = self.progress.epoch;
        let mut rng = SeededRng::new(self.config.seed).substream(&[purpose::PRETRAIN, epoch as u64]);
        let mut order: Vec<usize> = (0..good.len()).collect();
        order.shuffle(&mut rng);
        let symbols = self.symbols();
        let (mut sum, mut n) = (0.0, 0usize);
        for (bi, idx) in order.chunks(self.config.batch_size).enumerate() {
            let ys: Vec<&Vec<usize>> = idx.iter().map(|&i| &good[i]).collect();
            let (inputs, targets) = noised_pairs(&ys, &mut rng, &symbols, &self.config);
            let mut g = Graph::new();
            let vars = self.generator.bind(&mut g, true);
            let enc = self.generator.encode(&mut g, &vars, &inputs)?;
            let rows = self.generator.teacher_forced(&mut g, &vars, &enc, &targets)?;
            let loss = masked_nll(&mut g, rows, &targets)?;
            let value = g.value(loss).item() as f64;
            ensure_finite(value, "pretraining loss", epoch, bi)?;
            let mut grads = g.backward(loss)?;
            let grads = self.generator.params().collect_grads(&vars.all, &mut grads);
            self.opt.step(self.generator.params_mut(), &grads)?;
            sum += value * idx.len() as f64;
            n += idx.len();
        }
        let held = if heldout.is_empty() { None } else { Some(self.heldout_loss(heldout)?) };
        self.log.push(vec![
            epoch.to_string(),
            cell(sum / n as f64),
            held.map(cell).unwrap_or_default(),
        ]);
        self.progress.epoch += 1;
        Ok(())
    }

    pub fn run(&mut self, good: &[Vec<usize>], heldout: &[Vec<usize>]) -> Result<()> {
        while !self.finished() {
            self.run_epoch(good, heldout)?;
        }
        Ok(())
    }
}

/// Full pretraining run from scratch.
pub fn pretrain(config: &TrainConfig, good: &[Vec<usize>], heldout: &[Vec<usize>]) -> Result<(Checkpoint, MetricsLog)> {
    let mut run = PretrainRun::new(config.clone())?;
    run.run(good, heldout)?;
    Ok((run.checkpoint(), run.log))
}
