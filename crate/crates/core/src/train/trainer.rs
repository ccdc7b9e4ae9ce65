use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ModelConfig, Seq2SeqModel};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tape::GradTape;

use super::optim::{clip_global_norm, AdamState, LrSchedule};
use super::task::{Example, Split, SyntheticTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_steps")]
    pub steps: usize,
    /// Sequences per step.
    #[serde(default = "TrainConfig::default_batch")]
    pub batch: usize,
    #[serde(default = "TrainConfig::default_warmup")]
    pub warmup: usize,
    #[serde(default = "TrainConfig::default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "TrainConfig::default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "TrainConfig::default_clip")]
    pub clip_norm: f64,
    /// Held-out examples used for evaluation.
    #[serde(default = "TrainConfig::default_eval_size")]
    pub eval_size: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// Stop after a periodic evaluation reaches this token accuracy.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    fn default_steps() -> usize {
        2000
    }
    fn default_batch() -> usize {
        32
    }
    fn default_warmup() -> usize {
        100
    }
    fn default_peak_lr() -> f64 {
        1e-3
    }
    fn default_smoothing() -> f64 {
        0.1
    }
    fn default_clip() -> f64 {
        1.0
    }
    fn default_eval_size() -> usize {
        200
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            warmup: self.warmup,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(self.peak_lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("peak_lr and clip_norm must be positive".into()));
        }
        if self.eval_size == 0 {
            return Err(Error::Config("eval_size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: Self::default_steps(),
            batch: Self::default_batch(),
            warmup: Self::default_warmup(),
            peak_lr: Self::default_peak_lr(),
            label_smoothing: Self::default_smoothing(),
            clip_norm: Self::default_clip(),
            eval_size: Self::default_eval_size(),
            eval_every: 0,
            target_accuracy: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Fraction of target tokens (end marker included) reproduced at the
    /// right position by greedy decoding.
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: TrainConfig,
    pub steps: Vec<StepLog>,
    /// `(step, metrics)` for every periodic evaluation.
    pub evals: Vec<(usize, EvalMetrics)>,
    pub final_eval: EvalMetrics,
}

impl TrainingReport {
    /// One row per step: `step,loss,grad_norm,lr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,grad_norm,lr\n");
        for l in &self.steps {
            s.push_str(&format!("{},{},{},{}\n", l.step, l.loss, l.grad_norm, l.lr));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A freshly initialised model drawn from the `Init` stream of `seed`.
pub fn init_model<S: Scalar>(config: ModelConfig, seed: u64) -> Result<Seq2SeqModel<S>> {
    Seq2SeqModel::new(config, &mut stream(seed, Stream::Init))
}

fn check_compatible<S: Scalar>(model: &Seq2SeqModel<S>, task: &SyntheticTask) -> Result<()> {
    task.validate()?;
    let cfg = model.config();
    if task.vocab() > cfg.vocab {
        return Err(Error::Config(format!(
            "task needs vocab {}, model has {}",
            task.vocab(),
            cfg.vocab
        )));
    }
    // BOS plus the target without its end marker must fit.
    if task.max_len + 1 > cfg.max_len {
        return Err(Error::Config(format!(
            "task length {} exceeds model max_len {}",
            task.max_len + 1,
            cfg.max_len
        )));
    }
    Ok(())
}

/// Greedy-decodes every example and scores it against its target.
pub fn evaluate<S: Scalar>(model: &Seq2SeqModel<S>, examples: &[Example]) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut tape = GradTape::new();
    let bound = model.params().bind(&mut tape, false);
    let (mut correct, mut total, mut exact) = (0usize, 0usize, 0usize);
    for e in examples {
        let want = &e.tgt[..e.tgt.len() - 1];
        let got = model.greedy_decode_on(&mut tape, &bound, &e.src, want.len() + 1)?;
        correct += want.iter().zip(&got).filter(|(a, b)| a == b).count();
        // The end marker counts as correct when decoding stopped exactly there.
        if got.len() == want.len() {
            correct += 1;
        }
        total += e.tgt.len();
        exact += usize::from(got == want);
    }
    Ok(EvalMetrics {
        token_accuracy: correct as f64 / total as f64,
        exact_match: exact as f64 / examples.len() as f64,
        examples: examples.len(),
    })
}

/// Trains `model` in place on `task`.
pub fn train<S: Scalar>(model: &mut Seq2SeqModel<S>, task: &SyntheticTask, cfg: &TrainConfig) -> Result<TrainingReport> {
    train_with(model, task, cfg, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with<S: Scalar>(
    model: &mut Seq2SeqModel<S>,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainingReport> {
    cfg.validate()?;
    check_compatible(model, task)?;
    let held_out = task.test_set(cfg.eval_size)?;
    let schedule = cfg.schedule();
    let mut data_rng = stream(cfg.seed, Stream::Data);
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let use_dropout = model.config().dropout > 0.0;
    let smoothing = S::from_f64_lossy(cfg.label_smoothing);
    let mut adam = AdamState::<S>::new(model.params().iter().map(|(_, t)| t.numel()));

    let mut steps = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    for step in 1..=cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| task.sample(&mut data_rng, Split::Train))
            .collect::<Result<Vec<_>>>()?;
        let tokens: usize = batch.iter().map(|e| e.tgt.len()).sum();

        let mut tape = GradTape::new();
        let bound = model.params().bind(&mut tape, true);
        let mut opts = ForwardOptions {
            dropout: use_dropout.then_some(&mut dropout_rng),
            capture: None,
        };
        let mut loss = None;
        for e in &batch {
            let forward = (|| {
                let mem = model.encode_on(&mut tape, &bound, &e.src, &mut opts)?;
                let logits = model.decode_on(&mut tape, &bound, mem, &e.decoder_input(), &mut opts)?;
                tape.cross_entropy(logits, &e.tgt, smoothing)
            })();
            let ce = match forward {
                // Non-finite activations reach the dynamic mask before the loss.
                Err(Error::DegenerateRow { sum, .. }) if !sum.is_finite() => {
                    return Err(Error::Divergence { step, loss: sum })
                }
                r => r?,
            };
            // Token-weighted so the batch loss is the mean over all target tokens.
            let ce = tape.scale(ce, S::from_f64_lossy(e.tgt.len() as f64 / tokens as f64));
            loss = Some(match loss {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
        }
        let loss = loss.expect("batch is non-empty");
        let loss_value = tape.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        tape.backward(loss)?;

        let mut grads: Vec<Vec<S>> = bound
            .iter()
            .zip(model.params().iter())
            .map(|(&v, (_, t))| tape.grad(v).map_or_else(|| vec![S::zero(); t.numel()], <[S]>::to_vec))
            .collect();
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step, loss: grad_norm });
        }
        let lr = schedule.lr(step);
        adam.step(
            lr,
            model
                .params_mut()
                .iter_mut()
                .zip(&grads)
                .map(|((_, p), g)| (p.data_mut(), g.as_slice())),
        );

        let log = StepLog {
            step,
            loss: loss_value,
            grad_norm,
            lr,
        };
        on_step(&log);
        steps.push(log);

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < cfg.steps {
            let m = evaluate(model, &held_out)?;
            evals.push((step, m));
            if cfg.target_accuracy.is_some_and(|t| m.token_accuracy >= t) {
                break;
            }
        }
    }
    let final_eval = evaluate(model, &held_out)?;
    Ok(TrainingReport {
        config: cfg.clone(),
        steps,
        evals,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockOrdering, EOS};
    use crate::train::task::TaskKind;

    fn tiny() -> (ModelConfig, SyntheticTask) {
        let task = SyntheticTask {
            kind: TaskKind::Copy,
            symbols: 4,
            min_len: 2,
            max_len: 4,
            window: 0,
            rule: Default::default(),
            seed: 3,
        };
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            max_len: 8,
            radius: 4,
            ordering: BlockOrdering::preset("C5").unwrap(),
            ..ModelConfig::new(task.vocab())
        };
        (cfg, task)
    }

    fn short() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch: 4,
            warmup: 3,
            eval_size: 8,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let (mc, task) = tiny();
        let run = || {
            let mut m = init_model::<f64>(mc.clone(), 1).unwrap();
            train(&mut m, &task, &short()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.steps.len(), 6);
        assert!(a.steps.iter().all(|l| l.loss.is_finite() && l.grad_norm >= 0.0));
        assert_eq!(a.steps[2].lr, 1e-3);
    }

    #[test]
    fn loss_falls_on_copy() {
        let (mc, task) = tiny();
        let mut m = init_model::<f64>(ModelConfig { dropout: 0.0, ..mc }, 2).unwrap();
        let cfg = TrainConfig {
            steps: 60,
            peak_lr: 3e-3,
            ..short()
        };
        let r = train(&mut m, &task, &cfg).unwrap();
        let head: f64 = r.steps[..5].iter().map(|l| l.loss).sum();
        let tail: f64 = r.steps[55..].iter().map(|l| l.loss).sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn divergence_names_the_step() {
        let (mc, task) = tiny();
        let mut m = init_model::<f64>(mc, 1).unwrap();
        // Row 0 of the embedding is BOS, which every decoder input starts with.
        m.params_mut().by_name_mut("embed").unwrap().data_mut()[0] = f64::NAN;
        match train(&mut m, &task, &short()) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_scores_the_end_marker() {
        let (mc, _) = tiny();
        // All-zero weights always emit BOS (id 0), never the end marker.
        let m = Seq2SeqModel::<f64>::zeroed(mc).unwrap();
        let ex = Example {
            src: vec![2, 3],
            tgt: vec![0, 3, EOS],
        };
        let r = evaluate(&m, &[ex]).unwrap();
        assert!((r.token_accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.exact_match, 0.0);
        assert!(evaluate(&m, &[]).is_err());
    }

    #[test]
    fn incompatible_task_is_config_error() {
        let (mc, mut task) = tiny();
        task.max_len = 20;
        task.min_len = 20;
        let mut m = init_model::<f64>(mc, 1).unwrap();
        assert!(matches!(train(&mut m, &task, &short()), Err(Error::Config(_))));
        let bad = TrainConfig { batch: 0, ..short() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
