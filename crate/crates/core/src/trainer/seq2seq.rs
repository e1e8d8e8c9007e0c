use rand::seq::SliceRandom;

use super::checkpoint::{Checkpoint, CheckpointKind, Progress};
use super::config::{curriculum_advance, CurriculumState, ModelKind, TrainConfig};
use super::data::clip;
use super::{cell, ensure_finite, purpose, MetricsLog};
use crate::datagen::{SeededRng, EOS};
use crate::error::{ensure, Error, Result};
use crate::objectives::masked_nll;
use crate::seqmodel::{frame, Generator};
use crate::tensor::{Adam, AdamHyper, Graph};

/// Supervised baseline: teacher-forced likelihood on aligned pairs.
pub struct Seq2SeqRun {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub opt: Adam<f32>,
    pub curriculum: CurriculumState,
    pub progress: Progress,
    pub log: MetricsLog,
}

impl Seq2SeqRun {
    pub fn new(config: TrainConfig, pretrained: &Checkpoint) -> Result<Self> {
        config.validate()?;
        ensure!(config.model == ModelKind::Seq2Seq, Config, "model {} is not seq2seq", config.model.name());
        ensure!(
            pretrained.trailer.config.generator_config() == config.generator_config(),
            Config,
            "pretrained generator {:?} does not match configured {:?}",
            pretrained.trailer.config.generator_config(),
            config.generator_config()
        );
        let generator = pretrained.generator()?;
        let opt = Adam::new(AdamHyper::with_lr(config.lr_seq2seq), generator.params());
        let curriculum = CurriculumState::new(&config.curriculum, config.task.max_len());
        Ok(Self {
            config,
            generator,
            opt,
            curriculum,
            progress: Progress::default(),
            log: Self::empty_log(),
        })
    }

    fn empty_log() -> MetricsLog {
        MetricsLog::new(&["epoch", "length", "loss", "first_batch_loss"])
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ensure!(ck.trailer.kind == CheckpointKind::Seq2seq, Checkpoint, "not a seq2seq checkpoint");
        let generator = ck.generator()?;
        let opt = ck
            .adam("generator", generator.params())?
            .ok_or_else(|| Error::Checkpoint("missing generator optimizer".into()))?;
        let curriculum = ck
            .trailer
            .curriculum
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing curriculum state".into()))?;
        Ok(Self {
            config: ck.trailer.config.clone(),
            generator,
            opt,
            curriculum,
            progress: ck.trailer.progress.clone(),
            log: Self::empty_log(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointKind::Seq2seq, self.config.clone());
        ck.push_params(self.generator.params());
        ck.push_adam("generator", &self.opt, self.generator.params());
        ck.trailer.curriculum = Some(self.curriculum.clone());
        ck.trailer.progress = self.progress.clone();
        ck
    }

    pub fn finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs
    }

    pub fn run_epoch(&mut self, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<()> {
        ensure!(!pairs.is_empty(), Data, "empty paired training set");
        let epoch = self.progress.epoch;
        let len = self.curriculum.length;
        let mut rng = SeededRng::new(self.config.seed).substream(&[purpose::SEQ2SEQ, epoch as u64]);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        let mut first = None;
        for (bi, idx) in order.chunks(self.config.batch_size).enumerate() {
            let inputs: Vec<Vec<usize>> = idx.iter().map(|&i| frame(&clip(&pairs[i].0, len))).collect();
            let targets: Vec<Vec<usize>> = idx
                .iter()
                .map(|&i| {
                    let mut t = clip(&pairs[i].1, len);
                    t.push(EOS);
                    t
                })
                .collect();
            let mut g = Graph::new();
            let vars = self.generator.bind(&mut g, true);
            let enc = self.generator.encode(&mut g, &vars, &inputs)?;
            let rows = self.generator.teacher_forced(&mut g, &vars, &enc, &targets)?;
            let loss = masked_nll(&mut g, rows, &targets)?;
            let value = g.value(loss).item() as f64;
            ensure_finite(value, "seq2seq loss", epoch, bi)?;
            first.get_or_insert(value);
            let mut grads = g.backward(loss)?;
            let grads = self.generator.params().collect_grads(&vars.all, &mut grads);
            self.opt.step(self.generator.params_mut(), &grads)?;
            sum += value * idx.len() as f64;
            n += idx.len();
        }
        self.log.push(vec![
            epoch.to_string(),
            len.to_string(),
            cell(sum / n as f64),
            cell(first.expect("nonempty epoch")),
        ]);
        if self.config.curriculum.enabled && !self.curriculum.complete() {
            let c = &self.config.curriculum;
            let mut next = curriculum_advance(&self.curriculum, 1.0, self.curriculum.epochs_at_level + 1, c.step, c.accuracy_threshold, c.patience);
            next.accuracy = None;
            self.curriculum = next;
        }
        self.progress.epoch += 1;
        Ok(())
    }

    pub fn run(&mut self, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<()> {
        while !self.finished() {
            self.run_epoch(pairs)?;
        }
        Ok(())
    }
}
