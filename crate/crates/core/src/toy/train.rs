use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::loss_and_gradients;
use super::model::{CheckpointMeta, ToyCheckpoint, ToyConfig};
use super::task::{SyntheticTask, TaskPhase};
use crate::error::{arg, Error, Result};
use crate::exec::Exec;
use crate::store::Stage;

/// Adam with the usual default coefficients.
#[derive(Debug, Clone)]
pub struct Adam {
    m: ToyCheckpoint,
    v: ToyCheckpoint,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(model: &ToyCheckpoint) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, model: &mut ToyCheckpoint, grads: &ToyCheckpoint, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let params = model.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One training stage with its own warmup + cosine learning-rate cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub stage: Stage,
    pub task: TaskPhase,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    /// Evenly spaced checkpoints emitted in this phase (the last one at
    /// its final step).
    pub checkpoints: usize,
}

impl Phase {
    fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let progress = (step - self.warmup) as f64 / span;
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    fn marks(&self) -> Vec<usize> {
        (1..=self.checkpoints).map(|i| self.steps * i / self.checkpoints).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl StageSchedule {
    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() || self.total_steps() == 0 {
            return Err(arg("training schedule has no steps"));
        }
        if self.batch_size == 0 {
            return Err(arg("batch_size must be at least 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(arg("clip_norm must be positive"));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.steps == 0 || p.checkpoints == 0 || p.checkpoints > p.steps {
                return Err(arg(format!(
                    "phase {i}: need steps >= 1 and 1 <= checkpoints <= steps"
                )));
            }
            if !(p.peak_lr > 0.0 && p.peak_lr.is_finite()) || p.warmup > p.steps {
                return Err(arg(format!("phase {i}: bad learning-rate settings")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoints: Vec<ToyCheckpoint>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Trains from `config`'s random init through every phase in order.
/// Each phase restarts Adam and draws its documents from a phase-seeded
/// stream, so a run is a pure function of its inputs.
pub fn train_synthetic(config: &ToyConfig, task: &SyntheticTask, schedule: &StageSchedule, exec: Exec) -> Result<TrainRun> {
    schedule.validate()?;
    if config.vocab_size != task.vocab_size() {
        return Err(arg(format!(
            "config vocab_size {} but the task needs {}",
            config.vocab_size,
            task.vocab_size()
        )));
    }
    let mut model = ToyCheckpoint::init_random(config)?;
    let mut checkpoints = Vec::new();
    let mut losses = Vec::with_capacity(schedule.total_steps());
    let mut tokens_seen = 0u64;
    let mut global_step = 0u64;
    for (pi, phase) in schedule.phases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (0x5EED_0000 + pi as u64));
        let mut opt = Adam::new(&model);
        let marks = phase.marks();
        for step in 0..phase.steps {
            let batch: Vec<_> = (0..schedule.batch_size).map(|_| task.example(phase.task, &mut rng)).collect();
            let mut g = loss_and_gradients(&model, &batch, exec)?;
            let norm = g.grads.squared_norm().sqrt();
            if !g.loss.is_finite() || !norm.is_finite() {
                return Err(Error::Training(format!("non-finite loss at step {global_step}")));
            }
            if norm > schedule.clip_norm {
                g.grads.scale(schedule.clip_norm / norm);
            }
            opt.step(&mut model, &g.grads, phase.lr(step));
            losses.push(g.loss);
            tokens_seen += batch.iter().map(|e| e.tokens.len() as u64).sum::<u64>();
            global_step += 1;
            if marks.contains(&(step + 1)) {
                model.meta = CheckpointMeta {
                    stage: phase.stage,
                    step: global_step,
                    training_tokens: tokens_seen,
                };
                checkpoints.push(model.clone());
            }
        }
    }
    if !model.is_finite() {
        return Err(Error::Training("parameters became non-finite".into()));
    }
    Ok(TrainRun { checkpoints, losses })
}
