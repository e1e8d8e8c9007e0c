use super::checkpoint::{Checkpoint, CheckpointKind};
use super::config::TrainConfig;
use super::data::{Cycle, Split};
use super::{cell, fake_batch, opt_cell, purpose, real_batch, ensure_finite, MetricsLog};
use crate::critic::Critic;
use crate::datagen::SeededRng;
use crate::error::{ensure, Result};
use crate::eval::{export_filter_weights, filter_csv, loss_ratio_diagnostic, mean_sparsity, FilterProfile, LossRatioReport};
use crate::objectives::wgan_critic_loss;
use crate::seqmodel::Generator;
use crate::tensor::{clip_weights, Graph, RmsProp, RmsPropHyper};

/// Loss-ratio time series and filter profiles of one diagnostic critic.
pub struct Diagnosis {
    pub depth: usize,
    pub kernel: usize,
    pub critic: Critic<f32>,
    pub series: MetricsLog,
    pub reports: Vec<LossRatioReport>,
    pub filters: Vec<FilterProfile>,
}

impl Diagnosis {
    pub fn mean_sparsity(&self) -> f64 {
        mean_sparsity(&self.filters)
    }

    fn header(&self) -> Vec<String> {
        vec![format!("depth={}", self.depth), format!("kernel={}", self.kernel)]
    }

    pub fn series_csv(&self) -> String {
        let mut s: String = self.header().iter().map(|h| format!("# {h}\n")).collect();
        s.push_str(&self.series.to_csv());
        s
    }

    pub fn filters_csv(&self) -> String {
        filter_csv(&self.filters, &self.header())
    }

    /// Generator and critic, for later inspection.
    pub fn checkpoint(&self, config: &TrainConfig, generator: &Generator<f32>) -> Checkpoint {
        let mut cfg = config.clone();
        cfg.critic.depth = self.depth;
        let mut ck = Checkpoint::new(CheckpointKind::Diagnose, cfg);
        ck.push_params(generator.params());
        ck.push_params(self.critic.params());
        ck
    }
}

/// Trains a fresh clipped critic of `depth` against the frozen generator
/// on full-length training data, probing the loss ratio on `probe` every
/// `diagnose.probe_every` critic steps.
pub fn diagnose(
    config: &TrainConfig,
    generator: &Generator<f32>,
    depth: usize,
    train: &Split,
    probe: &[(Vec<usize>, Vec<usize>)],
) -> Result<Diagnosis> {
    ensure!(depth == 1 || depth == 3, Config, "diagnostic critic depth must be 1 or 3, got {depth}");
    ensure!(!probe.is_empty(), Data, "empty probe set");
    ensure!(!train.bad.is_empty() && !train.good.is_empty(), Data, "empty training data");
    ensure!(
        generator.config() == &config.generator_config(),
        Config,
        "generator {:?} does not match configured {:?}",
        generator.config(),
        config.generator_config()
    );
    let d = &config.diagnose;
    let root = SeededRng::new(config.seed).substream(&[purpose::DIAGNOSE, depth as u64]);
    let mut critic = Critic::new(config.critic_config(depth), &mut root.substream(&[0]))?;
    let mut opt = RmsProp::new(RmsPropHyper::with_lr(config.lr_critic), critic.params());
    let mut bad_idx = Cycle::new(train.bad.len(), root.substream(&[1]));
    let mut good_idx = Cycle::new(train.good.len(), root.substream(&[2]));
    let len = config.task.max_len();
    let width = len + 2;
    let v = config.vocab_size();
    let b = config.batch_size;
    let mut series = MetricsLog::new(&["step", "critic_loss", "correct", "incorrect", "value_correct", "value_incorrect", "ratio"]);
    let mut reports = Vec::with_capacity(d.probes);
    let mut step = 0usize;
    for _ in 0..d.probes {
        let mut loss_sum = 0.0;
        for _ in 0..d.probe_every {
            let xs: Vec<Vec<usize>> = bad_idx.next_batch(b).into_iter().map(|i| train.bad[i].clone()).collect();
            let ys: Vec<Vec<usize>> = good_idx.next_batch(b).into_iter().map(|i| train.good[i].clone()).collect();
            let fake = fake_batch(generator, &xs, width)?;
            let real = real_batch(&ys, width, v)?;
            let mut g = Graph::new();
            let vars = critic.bind(&mut g, true);
            let real = g.constant(real);
            let fake = g.constant(fake);
            let rs = critic.score(&mut g, &vars, real)?;
            let fs = critic.score(&mut g, &vars, fake)?;
            let loss = wgan_critic_loss(&mut g, rs, fs);
            let value = g.value(loss).item() as f64;
            ensure_finite(value, "critic loss", 0, step)?;
            let mut grads = g.backward(loss)?;
            let grads = critic.params().collect_grads(&vars.all, &mut grads);
            opt.step(critic.params_mut(), &grads)?;
            clip_weights(critic.params_mut(), config.clip)?;
            loss_sum += value;
            step += 1;
        }
        let r = loss_ratio_diagnostic(&critic, generator, probe, width, b)?;
        series.push(vec![
            step.to_string(),
            cell(loss_sum / d.probe_every as f64),
            r.correct.to_string(),
            r.incorrect.to_string(),
            opt_cell(r.value_correct),
            opt_cell(r.value_incorrect),
            opt_cell(r.ratio),
        ]);
        reports.push(r);
    }
    let kernel = *config.critic.kernels.iter().max().expect("validated kernels");
    let filters = export_filter_weights(&critic, kernel)?;
    Ok(Diagnosis {
        depth,
        kernel,
        critic,
        series,
        reports,
        filters,
    })
}
