use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use seqrepair::datagen::{write_meta, write_sequences, DatasetMeta, PairSource, SeededRng};
use seqrepair::trainer::{
    diagnose, evaluate, load_split, meta_path, split_paths, Checkpoint, CheckpointKind, GanRun, MetricsLog, ModelKind,
    PretrainRun, Seq2SeqRun, TrainConfig,
};

#[derive(Parser)]
#[command(name = "seqrepair", version, about = "Unpaired sequence repair with a Wasserstein critic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test splits for the configured task.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Denoising pretraining of the generator on clean training sequences.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretraining checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// GAN or paired seq2seq training from a pretrained generator.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint, or a training checkpoint to resume.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        curriculum: Option<Switch>,
    },
    /// Metrics of a checkpoint's generator on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Loss-ratio and filter diagnostics of a fresh critic against a frozen generator.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Critic depth, 1 or 3.
        #[arg(long)]
        depth: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

/// Appends the last row of `log` to `path`, writing the header first when
/// `fresh`.
fn append_row(path: &Path, log: &MetricsLog, fresh: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{}", log.columns.join(","))?;
    }
    if let Some(row) = log.rows.last() {
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    cfg.validate()?;
    let out = common.out_dir()?;
    let src = PairSource::new(cfg.task.clone())?;
    let root = SeededRng::new(cfg.seed);
    for (i, (split, n)) in [("train", cfg.data.train_pairs), ("test", cfg.data.test_pairs)].into_iter().enumerate() {
        let (bad, good) = src.pairs(&mut root.substream(&[i as u64]), n);
        let (bp, gp) = split_paths(out, split);
        write_sequences(&bp, &bad)?;
        write_sequences(&gp, &good)?;
    }
    let meta = DatasetMeta {
        spec: cfg.task.clone(),
        vocab_size: cfg.vocab_size(),
        seed: cfg.seed,
        train_pairs: cfg.data.train_pairs,
        test_pairs: cfg.data.test_pairs,
    };
    write_meta(&meta_path(out), &meta)?;
    eprintln!("wrote {} train and {} test pairs to {}", meta.train_pairs, meta.test_pairs, out.display());
    Ok(())
}

fn pretrain(common: &Common, data: &Path, init: Option<&Path>) -> Result<()> {
    let out = common.out_dir()?;
    let mut run = match init {
        Some(p) => PretrainRun::from_checkpoint(&Checkpoint::load(p)?)?,
        None => PretrainRun::new(common.config()?)?,
    };
    let train = load_split(data, "train", &run.config.task)?;
    let test = load_split(data, "test", &run.config.task)?;
    let ck_path = out.join("pretrain.ckpt");
    let metrics = out.join("metrics.csv");
    let mut fresh = init.is_none() || !metrics.exists();
    while !run.finished() {
        run.run_epoch(&train.good, &test.good)?;
        append_row(&metrics, &run.log, fresh)?;
        fresh = false;
        run.checkpoint().save(&ck_path)?;
        eprintln!("pretrain {}", run.log.rows.last().map(|r| r.join(" ")).unwrap_or_default());
    }
    run.checkpoint().save(&ck_path)?;
    Ok(())
}

/// Configuration for continuing a run: the checkpoint's, with `epochs`
/// taken from `--config` when one is given. Anything else must agree.
fn resume_config(saved: &TrainConfig, common: &Common) -> Result<TrainConfig> {
    let mut cfg = saved.clone();
    if common.config.is_some() {
        let given = common.config()?;
        let mut cmp = given.clone();
        cmp.epochs = saved.epochs;
        ensure!(cmp == *saved, "--config differs from the resumed checkpoint's configuration beyond `epochs`");
        cfg.epochs = given.epochs;
    }
    ensure!(common.seed.is_none_or(|s| s == saved.seed), "--seed differs from the resumed checkpoint's seed");
    Ok(cfg)
}

fn train(common: &Common, data: &Path, init: &Path, model: Option<ModelKind>, curriculum: Option<Switch>) -> Result<()> {
    let out = common.out_dir()?;
    let ck = Checkpoint::load(init)?;
    let resume = matches!(ck.trailer.kind, CheckpointKind::Gan | CheckpointKind::Seq2seq);
    let cfg = if resume {
        let cfg = resume_config(&ck.trailer.config, common)?;
        ensure!(model.is_none_or(|m| m == cfg.model), "--model differs from the resumed run's model");
        if let Some(c) = curriculum {
            ensure!(matches!(c, Switch::On) == cfg.curriculum.enabled, "--curriculum differs from the resumed run");
        }
        cfg
    } else {
        ensure!(ck.trailer.kind == CheckpointKind::Pretrain, "--init must be a pretraining, GAN or seq2seq checkpoint");
        let mut cfg = common.config()?;
        if let Some(m) = model {
            cfg.model = m;
        }
        if let Some(c) = curriculum {
            cfg.curriculum.enabled = matches!(c, Switch::On);
        }
        cfg
    };
    let train = load_split(data, "train", &cfg.task)?;
    let ck_path = out.join("model.ckpt");
    let metrics = out.join("metrics.csv");
    let mut fresh = !resume || !metrics.exists();
    if cfg.model == ModelKind::Seq2Seq {
        let mut run = if resume {
            let mut r = Seq2SeqRun::from_checkpoint(&ck)?;
            r.config = cfg;
            r
        } else {
            Seq2SeqRun::new(cfg, &ck)?
        };
        let pairs = train.pairs()?;
        while !run.finished() {
            run.run_epoch(&pairs)?;
            append_row(&metrics, &run.log, fresh)?;
            fresh = false;
            run.checkpoint().save(&ck_path)?;
            eprintln!("seq2seq {}", run.log.rows.last().map(|r| r.join(" ")).unwrap_or_default());
        }
        run.checkpoint().save(&ck_path)?;
    } else {
        let mut run = if resume {
            ensure!(ck.trailer.kind == CheckpointKind::Gan, "cannot resume {} from a seq2seq checkpoint", cfg.model.name());
            let mut r = GanRun::from_checkpoint(&ck)?;
            r.config = cfg;
            r
        } else {
            GanRun::new(cfg, &ck)?
        };
        while !run.finished() {
            run.run_epoch(&train.bad, &train.good)?;
            append_row(&metrics, &run.log, fresh)?;
            fresh = false;
            run.checkpoint().save(&ck_path)?;
            eprintln!("{} {}", run.config.model.name(), run.log.rows.last().map(|r| r.join(" ")).unwrap_or_default());
        }
        run.checkpoint().save(&ck_path)?;
    }
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let out = common.out_dir()?;
    let ck = Checkpoint::load(checkpoint)?;
    let test = load_split(data, "test", &ck.trailer.config.task)?;
    let report = evaluate(&ck, &test)?;
    report.write_csv(&out.join("report.csv"))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn run_diagnose(common: &Common, checkpoint: &Path, data: &Path, depth: Option<usize>) -> Result<()> {
    let out = common.out_dir()?;
    let ck = Checkpoint::load(checkpoint)?;
    let generator = ck.generator()?;
    let mut cfg = ck.trailer.config.clone();
    if common.config.is_some() {
        let given = common.config()?;
        ensure!(
            given.generator_config() == cfg.generator_config(),
            "--config describes a different generator than the checkpoint"
        );
        cfg = given;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let depth = depth.unwrap_or(cfg.diagnose.depth);
    let train = load_split(data, "train", &cfg.task)?;
    let test = load_split(data, "test", &cfg.task)?;
    let mut probe = test.pairs()?;
    probe.truncate(cfg.diagnose.probe_pairs);
    if probe.is_empty() {
        bail!("no probe pairs in {}", data.display());
    }
    let d = diagnose(&cfg, &generator, depth, &train, &probe)?;
    let write = |name: String, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write(format!("ratio_depth{depth}.csv"), d.series_csv())?;
    write(format!("filters_depth{depth}.csv"), d.filters_csv())?;
    d.checkpoint(&cfg, &generator).save(&out.join(format!("critic_depth{depth}.ckpt")))?;
    let last = d.reports.last().and_then(|r| r.ratio);
    println!(
        "depth {depth}: final ratio {}, mean sparsity {:.4}",
        last.map(|r| format!("{r:.4}")).unwrap_or_else(|| "undefined".into()),
        d.mean_sparsity()
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData { common } => gen_data(common),
        Command::Pretrain { common, data, init } => pretrain(common, data, init.as_deref()),
        Command::Train {
            common,
            data,
            init,
            model,
            curriculum,
        } => train(common, data, init, *model, *curriculum),
        Command::Eval { common, checkpoint, data } => eval(common, checkpoint, data),
        Command::Diagnose {
            common,
            checkpoint,
            data,
            depth,
        } => run_diagnose(common, checkpoint, data, *depth),
    }
}
