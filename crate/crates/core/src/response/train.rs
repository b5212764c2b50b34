use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dropout, Example, Trainable};
use crate::error::ModelError;
use crate::types::PriceSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Users per minibatch.
    pub batch_size: usize,
    pub max_steps: usize,
    /// Probability of keeping a unit under dropout (1.0 disables dropout).
    pub keep_prob: f64,
    pub validation_fraction: f64,
    /// Upper bound on validation users, to keep evaluation cheap.
    pub max_validation: usize,
    /// Steps between validation evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 64,
            max_steps: 2000,
            keep_prob: 0.75,
            validation_fraction: 0.1,
            max_validation: 2000,
            eval_every: 50,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad("keep probability must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must be in [0, 1)");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        Ok(())
    }
}

/// Adam with the usual defaults (`β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One descent step on `params` given the loss gradient.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    /// Mean negative log-likelihood per label on the minibatch.
    pub train_loss: f64,
    /// Mean negative log-likelihood per label on the validation split, when
    /// evaluated at this step.
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
    pub best_step: usize,
    pub best_validation_loss: Option<f64>,
    pub stopped_early: bool,
}

fn mean_nll<M: Trainable>(model: &M, examples: &[&Example<'_>], prices: &PriceSeries) -> f64 {
    let mut ll = 0.0;
    let mut n = 0usize;
    for ex in examples {
        ll += super::log_likelihood(&model.predict_all(ex, prices), ex.labels);
        n += ex.labels.len();
    }
    -ll / n.max(1) as f64
}

/// Maximizes the log-likelihood with minibatch Adam, keeping the parameters
/// with the best validation loss.
///
/// All randomness (split, batch order, dropout) derives from `config.seed`.
pub fn train<M: Trainable>(
    mut model: M,
    examples: &[Example<'_>],
    prices: &PriceSeries,
    config: &TrainConfig,
) -> Result<(M, TrainLog), ModelError> {
    config.validate()?;
    let mut log = TrainLog::default();
    if config.max_steps == 0 {
        return Ok((model, log));
    }
    let has_pos = examples.iter().any(|e| e.labels.iter().any(|&y| y != 0));
    let has_neg = examples.iter().any(|e| e.labels.contains(&0));
    if !(has_pos && has_neg) {
        return Err(ModelError::DegenerateLabels);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((examples.len() as f64 * config.validation_fraction) as usize)
        .min(config.max_validation)
        .min(examples.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let validation: Vec<&Example<'_>> = val_idx.iter().map(|&i| &examples[i]).collect();
    let mut train_idx = train_idx.to_vec();

    let mut dropout = (config.keep_prob < 1.0).then(|| Dropout {
        keep: config.keep_prob,
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15),
    });
    let mut adam = Adam::new(model.params().len(), config.learning_rate);
    let mut grad = vec![0.0; model.params().len()];
    let mut best = model.params().to_vec();
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    let mut cursor = train_idx.len();

    for step in 1..=config.max_steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut ll = 0.0;
        let mut labels = 0usize;
        for _ in 0..config.batch_size {
            if cursor == train_idx.len() {
                train_idx.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &examples[train_idx[cursor]];
            cursor += 1;
            ll += model.accumulate_gradient(ex, prices, &mut grad, dropout.as_mut());
            labels += ex.labels.len();
        }
        let train_loss = -ll / labels as f64;
        if !train_loss.is_finite() {
            return Err(ModelError::Diverged { step });
        }
        // ascent on L is descent on -L / labels
        let scale = -1.0 / labels as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        adam.step(model.params_mut(), &grad);
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(ModelError::Diverged { step });
        }

        let mut validation_loss = None;
        if step % config.eval_every == 0 || step == config.max_steps {
            let loss = if validation.is_empty() {
                train_loss
            } else {
                mean_nll(&model, &validation, prices)
            };
            if !loss.is_finite() {
                return Err(ModelError::Diverged { step });
            }
            validation_loss = Some(loss);
            if loss < best_loss {
                best_loss = loss;
                best.copy_from_slice(model.params());
                log.best_step = step;
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        log.steps.push(TrainStep {
            step,
            train_loss,
            validation_loss,
        });
        if config.patience > 0 && since_best >= config.patience {
            log.stopped_early = true;
            break;
        }
    }
    model.params_mut().copy_from_slice(&best);
    log.best_validation_loss = Some(best_loss);
    Ok((model, log))
}
