use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{forward_trial, slot_accuracy, LossBreakdown};
use super::optim::{optimizer_step, AdamState, AdamWConfig};
use super::schedule::{lr_at, Schedule};
use crate::domain::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Model, PreparedTrial};
use crate::numerics::{Gradients, Graph, ParamStore};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    /// Warmup length as a fraction of the total optimizer steps.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    /// Trials per micro-batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 3e-4,
            lr_min: 1e-6,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_accum: 8,
            batch_size: 1,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grad_accum == 0 || self.batch_size == 0 {
            return Err(Error::Config("grad_accum and batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must be in [0, 1)".into()));
        }
        if !(0.0..=self.lr0).contains(&self.lr_min) {
            return Err(Error::Config("need 0 ≤ lr_min ≤ lr0".into()));
        }
        Ok(())
    }

    pub fn trials_per_step(&self) -> usize {
        self.grad_accum * self.batch_size
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.trials_per_step())
    }

    pub fn schedule(&self, n_train: usize) -> Schedule {
        let total_steps = (self.epochs * self.steps_per_epoch(n_train)).max(1);
        let warmup_steps = ((self.warmup_frac * total_steps as f64).round() as usize).min(total_steps - 1);
        Schedule {
            lr0: self.lr0,
            lr_min: self.lr_min,
            warmup_steps,
            total_steps,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub losses: LossBreakdown,
    pub slot_accuracy: f64,
}

/// Epoch 0 is the untrained model; epoch `e ≥ 1` is measured after `e`
/// passes over the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: Option<LossBreakdown>,
    pub val: Option<EvalStats>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch,step,l_txt,l_xy,l_token,l_total,lr`, one row per optimizer step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,l_txt,l_xy,l_token,l_total,lr\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.epoch, s.step, s.losses.l_txt, s.losses.l_xy, s.losses.l_token, s.losses.l_total, s.lr
            ));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamState,
    pub log: TrainLog,
    pub steps_done: usize,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

fn check_finite(l: &LossBreakdown, step: usize) -> Result<()> {
    for (term, v) in [("l_txt", l.l_txt), ("l_xy", l.l_xy), ("l_token", l.l_token), ("l_total", l.l_total)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term, step });
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one teacher-forced trial.
pub fn trial_gradients(store: &ParamStore, cfg: &ModelConfig, trial: &PreparedTrial, step: usize) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Graph::new();
    let fwd = forward_trial(&mut g, store, cfg, trial)?;
    let losses = fwd.losses.values(&g);
    check_finite(&losses, step)?;
    assert!(
        (losses.l_total - (losses.l_txt + losses.l_xy + losses.l_token)).abs() <= 1e-12,
        "l_total is not the sum of its terms: {losses:?}"
    );
    let grads = g.gradients(fwd.losses.total, store)?;
    Ok((losses, grads))
}

/// Mean teacher-forced losses and slot-validity accuracy over `trials`.
pub fn evaluate_losses(model: &Model, trials: &[PreparedTrial]) -> Result<EvalStats> {
    let per_trial = par::map(trials, |t| -> Result<(LossBreakdown, usize, usize)> {
        let mut g = Graph::new();
        let fwd = forward_trial(&mut g, &model.params, &model.config, t)?;
        let (correct, total) = slot_accuracy(&g, &fwd.packs, &t.targets, model.config.decode_threshold);
        Ok((fwd.losses.values(&g), correct, total))
    });
    let mut losses = Vec::with_capacity(trials.len());
    let (mut correct, mut total) = (0, 0);
    for r in per_trial {
        let (l, c, t) = r?;
        losses.push(l);
        correct += c;
        total += t;
    }
    Ok(EvalStats {
        losses: LossBreakdown::mean(&losses),
        slot_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    })
}

/// Teacher-forced training from a freshly initialized model.
pub fn train(
    train_set: &[PreparedTrial],
    val_set: Option<&[PreparedTrial]>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = Model::new(model_cfg.clone(), cfg.seed)?;
    train_model(model, train_set, val_set, cfg)
}

/// Trials are shuffled each epoch with a seeded RNG. Every group of
/// `grad_accum · batch_size` trials produces one optimizer step; per-trial
/// gradients inside a group are computed in parallel and summed in trial
/// order, so the run is bitwise reproducible at any thread count.
pub fn train_model(
    mut model: Model,
    train_set: &[PreparedTrial],
    val_set: Option<&[PreparedTrial]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = cfg.schedule(train_set.len());
    let adamw = cfg.adamw();
    let mut optimizer = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut step = 0usize;

    let eval = |m: &Model| val_set.map(|v| evaluate_losses(m, v)).transpose();
    log.epochs.push(EpochRecord {
        epoch: 0,
        train: None,
        val: eval(&model)?,
    });

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::with_capacity(train_set.len());
        for group in order.chunks(cfg.trials_per_step()) {
            let trials: Vec<&PreparedTrial> = group.iter().map(|&i| &train_set[i]).collect();
            let results = par::map(&trials, |t| trial_gradients(&model.params, &model.config, t, step));
            let mut sum: Option<Gradients> = None;
            let mut group_losses = Vec::with_capacity(trials.len());
            for r in results {
                let (l, g) = r?;
                group_losses.push(l);
                match &mut sum {
                    Some(acc) => acc.add(&g)?,
                    None => sum = Some(g),
                }
            }
            let mut grads = sum.expect("non-empty group");
            grads.scale(1.0 / trials.len() as f64);
            model.params.zero_grads();
            model.params.accumulate(&grads)?;
            let lr = lr_at(step, &schedule);
            optimizer_step(&mut model.params, &mut optimizer, lr, &adamw);
            let mean = LossBreakdown::mean(&group_losses);
            log.steps.push(StepRecord {
                epoch,
                step,
                losses: mean,
                lr,
            });
            epoch_losses.extend(group_losses);
            step += 1;
        }
        log.epochs.push(EpochRecord {
            epoch,
            train: Some(LossBreakdown::mean(&epoch_losses)),
            val: eval(&model)?,
        });
    }
    model.params.zero_grads();
    Ok(TrainOutcome {
        model,
        optimizer,
        log,
        steps_done: step,
        rng_seed: cfg.seed,
        rng_word_pos: rng.get_word_pos(),
    })
}
