use super::checkpoint::{Checkpoint, CheckpointKind, Progress};
use super::config::{curriculum_advance, CurriculumState, ModelKind, TrainConfig};
use super::data::{clip, Cycle};
use super::{cell, ensure_finite, ensure_finite_tensor, fake_batch, mean, opt_cell, probe_accuracy, purpose, real_batch, MetricsLog};
use crate::critic::{soft_batch, Critic};
use crate::datagen::{SeededRng, EOS};
use crate::error::{ensure, Error, Result};
use crate::objectives::{freq_loss_batch, masked_nll, wgan_critic_loss, wgan_generator_loss, RegMode};
use crate::seqmodel::{frame, Generator};
use crate::tensor::{clip_weights, Graph, RmsProp, RmsPropHyper};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Retrain,
    Adversarial,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Retrain => "retrain",
            Phase::Adversarial => "adversarial",
        }
    }
}

/// Critic updates in one epoch: one pass over the clean data, rounded up to
/// a whole number of generator updates.
pub fn critic_steps_per_epoch(n_good: usize, batch: usize, ratio: usize) -> usize {
    n_good.div_ceil(batch).max(1).div_ceil(ratio) * ratio
}

/// State of one adversarial training run.
pub struct GanRun {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub critic: Critic<f32>,
    pub gen_opt: RmsProp<f32>,
    pub critic_opt: RmsProp<f32>,
    pub curriculum: CurriculumState,
    pub progress: Progress,
    pub log: MetricsLog,
}

#[derive(Default)]
struct EpochStats {
    critic_loss: f64,
    critic_steps: usize,
    gen_loss: f64,
    reg: f64,
    gen_steps: usize,
}

impl GanRun {
    pub fn new(config: TrainConfig, pretrained: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let mode = config.model.reg_mode();
        ensure!(mode.is_some(), Config, "model {} is not adversarial", config.model.name());
        ensure!(
            pretrained.trailer.config.generator_config() == config.generator_config(),
            Config,
            "pretrained generator {:?} does not match configured {:?}",
            pretrained.trailer.config.generator_config(),
            config.generator_config()
        );
        let generator = pretrained.generator()?;
        let root = SeededRng::new(config.seed);
        let critic = Critic::new(config.critic_config(config.critic.depth), &mut root.substream(&[purpose::INIT, 1]))?;
        let gen_opt = RmsProp::new(RmsPropHyper::with_lr(config.lr_generator), generator.params());
        let critic_opt = RmsProp::new(RmsPropHyper::with_lr(config.lr_critic), critic.params());
        let curriculum = CurriculumState::new(&config.curriculum, config.task.max_len());
        let progress = Progress {
            lr_generator: Some(config.lr_generator),
            ..Progress::default()
        };
        Ok(Self {
            config,
            generator,
            critic,
            gen_opt,
            critic_opt,
            curriculum,
            progress,
            log: Self::empty_log(),
        })
    }

    fn empty_log() -> MetricsLog {
        MetricsLog::new(&[
            "epoch",
            "phase",
            "length",
            "critic_steps",
            "generator_steps",
            "wgan_d",
            "wgan_g",
            "reg",
            "accuracy",
            "lr_generator",
            "critic_max_abs",
        ])
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ensure!(ck.trailer.kind == CheckpointKind::Gan, Checkpoint, "not an adversarial checkpoint");
        let generator = ck.generator()?;
        let critic = ck.critic()?;
        let missing = |n: &str| Error::Checkpoint(format!("missing {n} optimizer"));
        let gen_opt = ck.rmsprop("generator", generator.params())?.ok_or_else(|| missing("generator"))?;
        let critic_opt = ck.rmsprop("critic", critic.params())?.ok_or_else(|| missing("critic"))?;
        let curriculum = ck
            .trailer
            .curriculum
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing curriculum state".into()))?;
        Ok(Self {
            config: ck.trailer.config.clone(),
            generator,
            critic,
            gen_opt,
            critic_opt,
            curriculum,
            progress: ck.trailer.progress.clone(),
            log: Self::empty_log(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointKind::Gan, self.config.clone());
        ck.push_params(self.generator.params());
        ck.push_params(self.critic.params());
        ck.push_rmsprop("generator", &self.gen_opt, self.generator.params());
        ck.push_rmsprop("critic", &self.critic_opt, self.critic.params());
        ck.trailer.curriculum = Some(self.curriculum.clone());
        ck.trailer.progress = self.progress.clone();
        ck
    }

    pub fn finished(&self) -> bool {
        self.progress.adversarial_epochs >= self.config.epochs
    }

    pub fn phase(&self) -> Phase {
        if self.progress.epoch < self.config.warmup_epochs {
            Phase::Warmup
        } else if self.progress.pending_retrain > 0 {
            Phase::Retrain
        } else {
            Phase::Adversarial
        }
    }

    fn critic_step(&mut self, xs: &[Vec<usize>], ys: &[Vec<usize>], len: usize, at: (usize, usize)) -> Result<f64> {
        let width = len + 2;
        let v = self.config.vocab_size();
        let fake = fake_batch(&self.generator, xs, width)?;
        ensure_finite_tensor(&fake, "generator output", at.0, at.1)?;
        let real = real_batch(ys, width, v)?;
        let mut g = Graph::new();
        let vars = self.critic.bind(&mut g, true);
        let real = g.constant(real);
        let fake = g.constant(fake);
        let rs = self.critic.score(&mut g, &vars, real)?;
        let fs = self.critic.score(&mut g, &vars, fake)?;
        let loss = wgan_critic_loss(&mut g, rs, fs);
        let value = g.value(loss).item() as f64;
        if value.is_finite() {
            let mut grads = g.backward(loss)?;
            let grads = self.critic.params().collect_grads(&vars.all, &mut grads);
            self.critic_opt.step(self.critic.params_mut(), &grads)?;
            clip_weights(self.critic.params_mut(), self.config.clip)?;
        }
        Ok(value)
    }

    fn generator_step(&mut self, xs: &[Vec<usize>], ys: &[Vec<usize>], len: usize) -> Result<(f64, f64)> {
        let width = len + 2;
        let v = self.config.vocab_size();
        let mode = self.config.model.reg_mode().expect("checked in constructor");
        let framed: Vec<Vec<usize>> = xs.iter().map(|x| frame(x)).collect();
        let mut g = Graph::new();
        let gv = self.generator.bind(&mut g, true);
        let enc = self.generator.encode(&mut g, &gv, &framed)?;
        let out = self.generator.generate(&mut g, &gv, &enc, width - 1)?;
        let fake = soft_batch(&mut g, &out, xs.len(), width, v)?;
        let cv = self.critic.bind(&mut g, false);
        let fs = self.critic.score(&mut g, &cv, fake)?;
        let wg = wgan_generator_loss(&mut g, fs);
        let reg = match mode {
            RegMode::Base => None,
            RegMode::Freq => Some(freq_loss_batch(&mut g, xs, &out)?),
            RegMode::Auto => {
                let inputs: Vec<Vec<usize>> = ys.iter().map(|y| frame(y)).collect();
                let targets: Vec<Vec<usize>> = ys
                    .iter()
                    .map(|y| {
                        let mut t = y.clone();
                        t.push(EOS);
                        t
                    })
                    .collect();
                let enc = self.generator.encode(&mut g, &gv, &inputs)?;
                let rows = self.generator.teacher_forced(&mut g, &gv, &enc, &targets)?;
                Some(masked_nll(&mut g, rows, &targets)?)
            }
        };
        let wg_value = g.value(wg).item() as f64;
        let (loss, reg_value) = match reg {
            None => (wg, 0.0),
            Some(r) => {
                let scaled = g.scale(r, self.config.lambda as f32);
                (g.add(wg, scaled), g.value(r).item() as f64)
            }
        };
        if g.value(loss).item().is_finite() {
            let mut grads = g.backward(loss)?;
            let grads = self.generator.params().collect_grads(&gv.all, &mut grads);
            self.gen_opt.step(self.generator.params_mut(), &grads)?;
        }
        Ok((wg_value, reg_value))
    }

    /// One epoch of whichever phase the run is in.
    pub fn run_epoch(&mut self, bad: &[Vec<usize>], good: &[Vec<usize>]) -> Result<Phase> {
        ensure!(!bad.is_empty() && !good.is_empty(), Data, "adversarial training needs bad and good data");
        let epoch = self.progress.epoch;
        let phase = self.phase();
        let len = self.curriculum.length;
        let batch = self.config.batch_size;
        let ratio = self.config.critic_ratio;
        let rng = SeededRng::new(self.config.seed).substream(&[purpose::GAN, epoch as u64]);
        let mut bad_idx = Cycle::new(bad.len(), rng.substream(&[0]));
        let mut good_idx = Cycle::new(good.len(), rng.substream(&[1]));
        let take = |idx: &mut Cycle, data: &[Vec<usize>]| -> Vec<Vec<usize>> {
            idx.next_batch(batch).into_iter().map(|i| clip(&data[i], len)).collect()
        };
        let mut stats = EpochStats::default();
        let steps = critic_steps_per_epoch(good.len(), batch, ratio);
        for s in 0..steps {
            let xs = take(&mut bad_idx, bad);
            let ys = take(&mut good_idx, good);
            let d = self.critic_step(&xs, &ys, len, (epoch, s))?;
            ensure_finite(d, "critic loss", epoch, s)?;
            stats.critic_loss += d;
            stats.critic_steps += 1;
            if phase == Phase::Adversarial && (s + 1) % ratio == 0 {
                let xs = take(&mut bad_idx, bad);
                let ys = take(&mut good_idx, good);
                let (wg, reg) = self.generator_step(&xs, &ys, len)?;
                ensure_finite(wg, "generator loss", epoch, s)?;
                ensure_finite(reg, "regularizer", epoch, s)?;
                ensure!(
                    self.generator.params().is_finite(),
                    NonFinite,
                    "generator parameters after update at epoch {epoch}, batch {s}"
                );
                stats.gen_loss += wg;
                stats.reg += reg;
                stats.gen_steps += 1;
            }
        }
        self.progress.critic_steps += stats.critic_steps as u64;
        self.progress.generator_steps += stats.gen_steps as u64;

        let accuracy = probe_accuracy(
            &self.critic,
            &self.generator,
            bad,
            good,
            len,
            self.config.probe_size,
            batch,
            SeededRng::new(self.config.seed).substream(&[purpose::PROBE, epoch as u64]),
        )?;
        let has_reg = self.config.model != ModelKind::GanBase;
        self.log.push(vec![
            epoch.to_string(),
            phase.name().to_string(),
            len.to_string(),
            stats.critic_steps.to_string(),
            stats.gen_steps.to_string(),
            opt_cell(mean(stats.critic_loss, stats.critic_steps)),
            opt_cell(mean(stats.gen_loss, stats.gen_steps)),
            opt_cell(mean(stats.reg, stats.gen_steps).filter(|_| has_reg)),
            cell(accuracy),
            opt_cell(self.progress.lr_generator),
            cell(self.critic.params().max_abs() as f64),
        ]);
        self.curriculum.accuracy = Some(accuracy);

        match phase {
            Phase::Warmup => {}
            Phase::Retrain => self.progress.pending_retrain -= 1,
            Phase::Adversarial => {
                self.progress.adversarial_epochs += 1;
                let was_complete = self.curriculum.complete();
                if self.config.curriculum.enabled && !was_complete {
                    let c = &self.config.curriculum;
                    let next = curriculum_advance(
                        &self.curriculum,
                        accuracy,
                        self.curriculum.epochs_at_level + 1,
                        c.step,
                        c.accuracy_threshold,
                        c.patience,
                    );
                    if next.length > self.curriculum.length {
                        self.progress.pending_retrain = c.retrain_epochs;
                    }
                    self.curriculum = next;
                }
                if was_complete {
                    self.progress.epochs_since_complete += 1;
                    if self.progress.epochs_since_complete % self.config.decay.every == 0 {
                        let lr = self.gen_opt.hyper.lr * self.config.decay.factor;
                        self.gen_opt.hyper.lr = lr;
                        self.progress.lr_generator = Some(lr);
                    }
                }
            }
        }
        self.progress.epoch += 1;
        Ok(phase)
    }

    pub fn run(&mut self, bad: &[Vec<usize>], good: &[Vec<usize>]) -> Result<()> {
        while !self.finished() {
            self.run_epoch(bad, good)?;
        }
        Ok(())
    }

    /// Runs until `done` returns true after an epoch or the run finishes.
    pub fn run_until(
        &mut self,
        bad: &[Vec<usize>],
        good: &[Vec<usize>],
        mut done: impl FnMut(&GanRun) -> bool,
    ) -> Result<()> {
        while !self.finished() {
            self.run_epoch(bad, good)?;
            if done(self) {
                break;
            }
        }
        Ok(())
    }
}
