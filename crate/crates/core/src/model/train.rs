use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::transformer::{check_tokens, run_backward, run_forward};
use super::{Checkpoint, ModelConfig, ModelError, ParamLayout};
use crate::parallel::par_map;

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub context_len: usize,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ModelError::InvalidPlan(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 || self.context_len == 0
        {
            return Err(ModelError::InvalidPlan(
                "epochs, batch_size, grad_accum and context_len must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Sequences consumed per optimizer step.
    pub fn sequences_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn steps_per_epoch(&self, sequences: usize) -> usize {
        sequences.div_ceil(self.sequences_per_step())
    }

    /// Reinforcement run of the 7B-scale recipe: 3 epochs at 3e-6, batch 8 × 16 accumulation, 512 context.
    pub fn large_scale_reinforce() -> Self {
        TrainPlan {
            learning_rate: 3e-6,
            epochs: 3,
            batch_size: 8,
            grad_accum: 16,
            context_len: 512,
        }
    }

    /// Unlearning fine-tune of the 7B-scale recipe: 2 epochs at 1e-6.
    pub fn large_scale_unlearn() -> Self {
        TrainPlan {
            learning_rate: 1e-6,
            epochs: 2,
            batch_size: 8,
            grad_accum: 16,
            context_len: 512,
        }
    }
}

/// One training sequence with row-aligned targets: row `r` is trained to
/// predict `targets[r]` with weight `weights[r]` (zero drops the row, a
/// negative weight ascends instead of descends).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub weights: Vec<f32>,
}

impl TrainExample {
    pub fn next_token(tokens: &[u32]) -> Self {
        TrainExample::shifted(tokens, 1.0)
    }

    /// Negated cross-entropy on the sequence's own next tokens.
    pub fn reversed(tokens: &[u32]) -> Self {
        TrainExample::shifted(tokens, -1.0)
    }

    fn shifted(tokens: &[u32], weight: f32) -> Self {
        let n = tokens.len();
        let mut targets = vec![0u32; n];
        let mut weights = vec![0.0f32; n];
        for r in 0..n.saturating_sub(1) {
            targets[r] = tokens[r + 1];
            weights[r] = weight;
        }
        TrainExample {
            tokens: tokens.to_vec(),
            targets,
            weights,
        }
    }

    /// Row `i-1` is trained toward `labels[i]` unless `mask[i] == 0`.
    pub fn from_labels(tokens: &[u32], labels: &[u32], mask: &[u8]) -> Result<Self, ModelError> {
        let n = tokens.len();
        if labels.len() != n || mask.len() != n {
            return Err(ModelError::ShapeMismatch(format!(
                "tokens {n}, labels {}, mask {}",
                labels.len(),
                mask.len()
            )));
        }
        let mut targets = vec![0u32; n];
        let mut weights = vec![0.0f32; n];
        for i in 1..n {
            targets[i - 1] = labels[i];
            weights[i - 1] = if mask[i] == 0 { 0.0 } else { 1.0 };
        }
        Ok(TrainExample {
            tokens: tokens.to_vec(),
            targets,
            weights,
        })
    }

    fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        check_tokens(cfg, &self.tokens)?;
        let n = self.tokens.len();
        if self.targets.len() != n || self.weights.len() != n {
            return Err(ModelError::ShapeMismatch(format!(
                "tokens {n}, targets {}, weights {}",
                self.targets.len(),
                self.weights.len()
            )));
        }
        if let Some(&id) = self.targets.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        Ok(())
    }
}

/// Summed loss and gradient over a batch. `count` is the total absolute
/// weight, so `loss_sum / count` is the mean per-position loss.
#[derive(Clone, Debug)]
pub struct BatchGrad<S> {
    pub loss_sum: f64,
    pub count: f64,
    pub grad: Vec<S>,
}

impl<S> BatchGrad<S> {
    pub fn mean_loss(&self) -> f64 {
        if self.count == 0.0 {
            0.0
        } else {
            self.loss_sum / self.count
        }
    }
}

fn sequence_grad<S: Scalar>(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    params: &[S],
    ex: &TrainExample,
) -> BatchGrad<S> {
    let acts = run_forward(cfg, layout, params, &ex.tokens);
    let v = cfg.vocab_size;
    let mut dlogits = vec![S::zero(); acts.n * v];
    let mut loss_sum = 0.0f64;
    let mut count = 0.0f64;
    for r in 0..acts.n {
        let w = ex.weights[r];
        if w == 0.0 {
            continue;
        }
        let row = &acts.logits[r * v..(r + 1) * v];
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut z = S::zero();
        let d = &mut dlogits[r * v..(r + 1) * v];
        for (dj, &x) in d.iter_mut().zip(row) {
            *dj = (x - max).exp();
            z += *dj;
        }
        let t = ex.targets[r] as usize;
        let log_p = (row[t] - max).to_f64() - z.to_f64().ln();
        loss_sum += -(w as f64) * log_p;
        count += (w as f64).abs();
        let inv = S::one() / z;
        let ws = S::from_f32(w);
        for dj in d.iter_mut() {
            *dj = *dj * inv * ws;
        }
        d[t] -= ws;
    }
    let mut grad = vec![S::zero(); params.len()];
    run_backward(cfg, layout, params, &acts, &dlogits, &mut grad);
    BatchGrad {
        loss_sum,
        count,
        grad,
    }
}

/// Loss and analytic gradient for any float width. Per-sequence gradients are
/// computed independently and summed in batch order.
pub fn loss_and_grad_with<S: Scalar>(
    cfg: &ModelConfig,
    params: &[S],
    batch: &[TrainExample],
) -> Result<BatchGrad<S>, ModelError> {
    let layout = ParamLayout::new(cfg);
    if params.len() != layout.total {
        return Err(ModelError::ShapeMismatch(format!(
            "{} parameters, expected {}",
            params.len(),
            layout.total
        )));
    }
    for ex in batch {
        ex.check(cfg)?;
    }
    let parts = par_map(batch, |ex| sequence_grad(cfg, &layout, params, ex));
    let mut total = BatchGrad {
        loss_sum: 0.0,
        count: 0.0,
        grad: vec![S::zero(); layout.total],
    };
    for part in parts {
        total.loss_sum += part.loss_sum;
        total.count += part.count;
        for (t, g) in total.grad.iter_mut().zip(&part.grad) {
            *t += *g;
        }
    }
    Ok(total)
}

pub fn loss_and_grad(
    model: &Checkpoint,
    batch: &[TrainExample],
) -> Result<BatchGrad<f32>, ModelError> {
    loss_and_grad_with(&model.config, &model.parameters, batch)
}

/// Adam optimizer state plus the checkpoint being trained.
pub struct Trainer {
    model: Checkpoint,
    plan: TrainPlan,
    m: Vec<f32>,
    v: Vec<f32>,
    adam_t: i32,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Checkpoint, plan: TrainPlan, seed: u64) -> Result<Self, ModelError> {
        plan.validate()?;
        let n = model.parameters.len();
        Ok(Trainer {
            model,
            plan,
            m: vec![0.0; n],
            v: vec![0.0; n],
            adam_t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn model(&self) -> &Checkpoint {
        &self.model
    }

    pub fn into_model(self) -> Checkpoint {
        self.model
    }

    /// One optimizer step over `examples`, split into micro-batches of
    /// `batch_size`. Returns the mean loss of the step.
    pub fn step(&mut self, examples: &[TrainExample]) -> Result<f64, ModelError> {
        let mut grad = vec![0.0f32; self.model.parameters.len()];
        let mut loss_sum = 0.0;
        let mut count = 0.0;
        for micro in examples.chunks(self.plan.batch_size) {
            let g = loss_and_grad(&self.model, micro)?;
            loss_sum += g.loss_sum;
            count += g.count;
            for (a, b) in grad.iter_mut().zip(&g.grad) {
                *a += *b;
            }
        }
        let step = self.model.step_count + 1;
        if !loss_sum.is_finite() {
            return Err(ModelError::Divergence { step });
        }
        if count > 0.0 {
            let scale = (1.0 / count) as f32;
            self.adam_update(&grad, scale);
        }
        self.model.step_count = step;
        Ok(if count > 0.0 { loss_sum / count } else { 0.0 })
    }

    fn adam_update(&mut self, grad: &[f32], scale: f32) {
        self.adam_t += 1;
        let lr = self.plan.learning_rate as f32;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.adam_t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.adam_t);
        for (((p, m), v), &g) in self
            .model
            .parameters
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(grad)
        {
            let g = g * scale;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }

    /// Runs every epoch of the plan, reshuffling the corpus each epoch. `hook`
    /// sees the model after every optimizer step together with the run-local
    /// step number (starting at 1) and that step's mean loss.
    pub fn run<E, F>(&mut self, corpus: &[TrainExample], hook: F) -> Result<(), E>
    where
        E: From<ModelError>,
        F: FnMut(&Checkpoint, u64, f64) -> Result<(), E>,
    {
        self.run_limited(corpus, None, hook)
    }

    /// Like [`Trainer::run`], stopping early once `max_steps` optimizer steps are done.
    pub fn run_limited<E, F>(
        &mut self,
        corpus: &[TrainExample],
        max_steps: Option<u64>,
        mut hook: F,
    ) -> Result<(), E>
    where
        E: From<ModelError>,
        F: FnMut(&Checkpoint, u64, f64) -> Result<(), E>,
    {
        if corpus.is_empty() {
            return Ok(());
        }
        for ex in corpus {
            if ex.tokens.len() > self.plan.context_len {
                return Err(ModelError::OverLength {
                    len: ex.tokens.len(),
                    context_len: self.plan.context_len,
                }
                .into());
            }
        }
        let mut local = 0u64;
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for _ in 0..self.plan.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.plan.sequences_per_step()) {
                if max_steps.is_some_and(|m| local >= m) {
                    return Ok(());
                }
                let batch: Vec<TrainExample> = chunk.iter().map(|&i| corpus[i].clone()).collect();
                let loss = self.step(&batch)?;
                local += 1;
                hook(&self.model, local, loss)?;
            }
        }
        Ok(())
    }
}

/// Trains `model` on `corpus` for the whole plan and returns the updated checkpoint.
pub fn train(
    model: Checkpoint,
    corpus: &[TrainExample],
    plan: TrainPlan,
    seed: u64,
) -> Result<Checkpoint, ModelError> {
    train_with_hook(model, corpus, plan, seed, |_, _, _| Ok(()))
}

pub fn train_with_hook<F>(
    model: Checkpoint,
    corpus: &[TrainExample],
    plan: TrainPlan,
    seed: u64,
    hook: F,
) -> Result<Checkpoint, ModelError>
where
    F: FnMut(&Checkpoint, u64, f64) -> Result<(), ModelError>,
{
    let mut trainer = Trainer::new(model, plan, seed)?;
    trainer.run(corpus, hook)?;
    Ok(trainer.into_model())
}
