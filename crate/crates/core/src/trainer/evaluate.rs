use super::checkpoint::Checkpoint;
use super::data::Split;
use crate::datagen::{Grammar, Task, TaskSpec, Vocab, EOS};
use crate::error::{ensure, Result};
use crate::eval::{bleu4, cfg_validity_rate, order_accuracy, sequence_accuracy, EvalReport};
use crate::seqmodel::{frame, Generator};

/// Decoding budget for an input of `input_len` tokens, counting the EOS
/// row: `⌈1.5·n⌉ + 5`, at most `task_max + 1`.
pub fn eval_max_len(input_len: usize, task_max: usize) -> usize {
    ((3 * input_len).div_ceil(2) + 5).min(task_max + 1)
}

/// Task symbols of a hard output, without its EOS. `None` when a
/// framework token appears before EOS.
pub fn decode_output(tokens: &[usize], vocab: &Vocab) -> Option<Vec<u32>> {
    let body = match tokens.split_last() {
        Some((&EOS, rest)) => rest,
        _ => tokens,
    };
    body.iter().map(|&t| vocab.symbol(t)).collect()
}

fn fraction_of(valid: usize, total: usize, rate_on_valid: f64) -> f64 {
    rate_on_valid * valid as f64 / total as f64
}

/// Metric set for the task on greedy outputs for every test input.
pub fn evaluate_generator(gen: &Generator<f32>, task: &TaskSpec, test: &Split, batch: usize) -> Result<EvalReport> {
    let vocab = task.vocab();
    ensure!(
        gen.config().vocab_size == vocab.size(),
        Config,
        "generator vocabulary {} does not match task vocabulary {}",
        gen.config().vocab_size,
        vocab.size()
    );
    ensure!(!test.bad.is_empty() && batch > 0, Data, "empty test set");
    let task_max = task.max_len();
    let mut outputs = Vec::with_capacity(test.bad.len());
    for chunk in test.bad.chunks(batch) {
        let framed: Vec<Vec<usize>> = chunk.iter().map(|x| frame(x)).collect();
        let budgets: Vec<usize> = chunk.iter().map(|x| eval_max_len(x.len(), task_max)).collect();
        outputs.extend(gen.greedy(&framed, &budgets)?);
    }
    let preds: Vec<Option<Vec<u32>>> = outputs.iter().map(|t| decode_output(t, &vocab)).collect();
    let valid: Vec<Vec<u32>> = preds.iter().flatten().cloned().collect();
    let n = preds.len();
    let mut report = EvalReport::new(task.task);
    report.push("well_formed", valid.len() as f64 / n as f64, n);
    match task.task {
        Task::Sort => {
            let targets: Vec<Vec<Option<u32>>> = test
                .bad
                .iter()
                .map(|x| {
                    let mut s = vocab.decode(x);
                    s.sort_unstable();
                    s.into_iter().map(Some).collect()
                })
                .collect();
            let tokens: Vec<Vec<Option<u32>>> = outputs
                .iter()
                .map(|t| t.strip_suffix(&[EOS]).unwrap_or(t).iter().map(|&i| vocab.symbol(i)).collect())
                .collect();
            report.push("seq_acc", sequence_accuracy(&tokens, &targets)?, n);
            let ordered = if valid.is_empty() { 0.0 } else { order_accuracy(&valid)? };
            report.push("order_acc", fraction_of(valid.len(), n, ordered), n);
        }
        Task::Cfg => {
            ensure!(test.good.len() == n, Data, "{} test inputs but {} references", n, test.good.len());
            let cands: Vec<Vec<u32>> = outputs
                .iter()
                .map(|t| vocab.decode(t.strip_suffix(&[EOS]).unwrap_or(t)))
                .collect();
            let refs: Vec<Vec<u32>> = test.good.iter().map(|y| vocab.decode(y)).collect();
            report.push("bleu4", bleu4(&cands, &refs)?, n);
            let grammar = Grammar::benchmark();
            let ok = if valid.is_empty() { 0.0 } else { cfg_validity_rate(&valid, &grammar)? };
            report.push("cfg_validity", fraction_of(valid.len(), n, ok), n);
        }
    }
    Ok(report)
}

/// Evaluates a checkpoint's generator on a test split of its task.
pub fn evaluate(ck: &Checkpoint, test: &Split) -> Result<EvalReport> {
    let cfg = &ck.trailer.config;
    evaluate_generator(&ck.generator()?, &cfg.task, test, cfg.batch_size)
}
