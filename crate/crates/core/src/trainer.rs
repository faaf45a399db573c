//! Compressor-critic optimization.
//!
//! Three phases run in order:
//!
//! 1. the critic is frozen while the compressor learns from the critic's loss;
//! 2. both networks train jointly while the threshold `τ` climbs by `Δ` every
//!    `T` rounds, softly suppressing low keep-probabilities, until the
//!    deterministic masks `1[p > τ]` leave at most a fraction `α` of the
//!    parameters;
//! 3. the critic is fine-tuned under those fixed masks.
//!
//! Compressor gradients use the score-function estimator with the loss
//! centred by its moving average `c` and scaled by `max(1, √v)`.

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compressor::{final_masks, sample_masks, Compressor, DropoutPolicy, PolicyPass, SampledMasks};
use crate::data::{Batch, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::layers::{count_params, CriticNetwork, ForwardPass, LossKind, Mask};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_PERIOD: usize = 100;
pub const DEFAULT_RHO: f64 = 0.9;

/// Scalar knobs of the compression loop and the running signal statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionSchedule {
    /// Decay applied to keep-probabilities at or below `tau`.
    pub gamma: f64,
    pub tau: f64,
    /// Threshold increment.
    pub delta: f64,
    /// Rounds between threshold increments.
    pub period: usize,
    /// Target remaining-parameter fraction.
    pub alpha: f64,
    /// Learning rate.
    pub beta: f64,
    /// Moving average of the loss.
    pub c: f64,
    /// Moving average of the loss variance.
    pub v: f64,
    pub rho: f64,
    rounds: usize,
}

impl CompressionSchedule {
    pub fn new(alpha: f64, beta: f64) -> Self {
        CompressionSchedule {
            gamma: DEFAULT_GAMMA,
            tau: 0.0,
            delta: DEFAULT_DELTA,
            period: DEFAULT_PERIOD,
            alpha,
            beta,
            c: 0.0,
            v: 0.0,
            rho: DEFAULT_RHO,
            rounds: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1)");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if self.period == 0 {
            return bad("period T must be >= 1");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1)");
        }
        Ok(())
    }

    /// `c ← ρc + (1−ρ)L`, then `v ← ρv + (1−ρ)(L−c)²` against the new `c`.
    pub fn update_moving_stats(&mut self, loss: f64) {
        self.c = self.rho * self.c + (1.0 - self.rho) * loss;
        let d = loss - self.c;
        self.v = self.rho * self.v + (1.0 - self.rho) * d * d;
    }

    pub fn signal(&self, loss: f64) -> LearningSignal {
        LearningSignal::new(loss, self.c, self.v)
    }

    /// Phase-2 rounds completed so far.
    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Counts one phase-2 round; `τ = Δ·⌊k/T⌋` after `k` rounds.
    pub fn advance(&mut self) {
        self.rounds += 1;
        self.tau = self.delta * (self.rounds / self.period) as f64;
    }
}

/// Critic loss and its centred, variance-normalized form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningSignal {
    pub raw: f64,
    pub normalized: f64,
}

impl LearningSignal {
    pub fn new(raw: f64, c: f64, v: f64) -> Self {
        LearningSignal {
            raw,
            normalized: (raw - c) / v.sqrt().max(1.0),
        }
    }
}

/// One row of the per-round metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// 0 = pre-training, 1–3 = compression phases.
    pub phase: u8,
    pub round: usize,
    pub tau: f64,
    pub loss: f64,
    pub signal: f64,
    pub c: f64,
    pub v: f64,
    pub accuracy: f64,
    pub param_fraction: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "phase,round,tau,loss,signal,c,v,accuracy,param_fraction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.9},{:.9},{:.9},{:.9},{:.6},{:.9}",
            self.phase, self.round, self.tau, self.loss, self.signal, self.c, self.v, self.accuracy, self.param_fraction
        )
    }
}

/// Records the masked forward pass and mean cross-entropy of `batch`.
pub fn critic_loss(tape: &mut Tape, net: &CriticNetwork, batch: &Batch, trainable: bool) -> Result<(Var, ForwardPass)> {
    if net.loss != LossKind::CrossEntropy {
        return Err(Error::Contract("only cross-entropy critics can be trained".into()));
    }
    let pass = net.forward(tape, &batch.inputs, trainable)?;
    let loss = tape.softmax_cross_entropy(pass.logits, &batch.labels)?;
    Ok((loss, pass))
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
}

/// Mean loss and accuracy of the (masked) critic over `data`.
pub fn evaluate(net: &CriticNetwork, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let (mut loss, mut hits) = (0.0, 0.0);
    for batch in data.batches(batch_size) {
        let mut tape = Tape::new();
        let (l, pass) = critic_loss(&mut tape, net, &batch, false)?;
        let n = batch.labels.len() as f64;
        loss += tape.value(l).data()[0] * n;
        hits += accuracy_of(tape.value(pass.logits), &batch.labels) * n;
    }
    let n = data.len() as f64;
    Ok((loss / n, hits / n))
}

/// SGD over the critic with optional heavy-ball momentum (0 = plain SGD).
#[derive(Clone, Debug)]
pub struct CriticOptimizer {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<[Vec<f64>; 2]>,
}

impl CriticOptimizer {
    pub fn new(lr: f64, momentum: f64) -> Self {
        CriticOptimizer {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies and clears the gradients accumulated on `net`.
    pub fn step(&mut self, net: &mut CriticNetwork) {
        if self.momentum == 0.0 {
            net.sgd_step(self.lr);
            return;
        }
        if self.velocity.len() != net.layers.len() {
            self.velocity = net
                .layers
                .iter()
                .map(|l| [vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]])
                .collect();
        }
        for (layer, vel) in net.layers.iter_mut().zip(&mut self.velocity) {
            for (t, v) in [&mut layer.weight, &mut layer.bias].into_iter().zip(vel.iter_mut()) {
                if let Some(g) = t.grad().map(<[f64]>::to_vec) {
                    for ((w, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                        *v = self.momentum * *v + g;
                        *w -= self.lr * *v;
                    }
                }
                t.zero_grad();
            }
        }
    }
}

/// One masked SGD step on the critic. Returns the batch loss and whether
/// the update was applied (it is skipped when any gradient is non-finite).
pub fn critic_gradient_step(
    net: &mut CriticNetwork,
    batch: &Batch,
    optimizer: &mut CriticOptimizer,
) -> Result<(f64, f64, bool)> {
    let mut tape = Tape::new();
    let (loss, pass) = critic_loss(&mut tape, net, batch, true)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    let acc = accuracy_of(tape.value(pass.logits), &batch.labels);
    net.accumulate_grads(&tape, &pass.params)?;
    if !value.is_finite() || !net.grads_finite() {
        warn!("non-finite critic gradient; update skipped");
        net.zero_grads();
        return Ok((value, acc, false));
    }
    optimizer.step(net);
    Ok((value, acc, true))
}

/// `φ ← φ − β·∇φ ln μ(z)·signal` for the masks `sample` drawn from `pass`.
/// Returns whether the update was applied.
pub fn compressor_gradient_step(
    compressor: &mut Compressor,
    tape: &mut Tape,
    pass: &PolicyPass,
    sample: &SampledMasks,
    signal: LearningSignal,
    beta: f64,
) -> Result<bool> {
    if !signal.normalized.is_finite() {
        warn!("non-finite learning signal {:?}; compressor update skipped", signal);
        return Ok(false);
    }
    let lp = compressor.log_prob(tape, pass, sample)?;
    tape.backward(lp)?;
    compressor.accumulate_grads(tape, &pass.vars)?;
    if !compressor.grads_finite() {
        warn!("non-finite compressor gradient; update skipped");
        compressor.zero_grads();
        return Ok(false);
    }
    compressor.apply_grads(beta * signal.normalized);
    Ok(true)
}

/// Loop controls beyond the schedule itself.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub batch_size: usize,
    /// Rounds between validation checks in phases 1 and 3.
    pub eval_interval: usize,
    /// Checks without a `min_delta` improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub phase1_max_rounds: usize,
    pub phase3_max_rounds: usize,
    /// Hard cap on phase-2 rounds (0 = only the threshold schedule bounds it).
    pub phase2_max_rounds: usize,
    /// Mask draws averaged per phase-1 validation check.
    pub eval_mask_samples: usize,
    /// Validation examples used per check.
    pub eval_examples: usize,
    /// Compressor learning rate; `None` uses the schedule's `beta`.
    pub compressor_beta: Option<f64>,
    /// Critic momentum during phase 3 only; 0 is plain SGD.
    pub finetune_momentum: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 64,
            eval_interval: 50,
            patience: 5,
            min_delta: 1e-4,
            phase1_max_rounds: 1000,
            phase3_max_rounds: 2000,
            phase2_max_rounds: 0,
            eval_mask_samples: 4,
            eval_examples: 1000,
            compressor_beta: None,
            finetune_momentum: 0.0,
        }
    }
}

/// Stops after `patience` checks without improving by more than `min_delta`.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    best: f64,
    stale: usize,
    patience: usize,
    min_delta: f64,
}

impl EarlyStop {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStop {
            best: f64::INFINITY,
            stale: 0,
            patience,
            min_delta,
        }
    }

    /// Feeds one validation loss; true once training should stop.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub rounds: usize,
    pub final_valid_loss: Option<f64>,
}

/// What one phase-1/2 round observed.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub signal: LearningSignal,
    pub sample: SampledMasks,
    pub policy: DropoutPolicy,
    pub accuracy: f64,
}

/// Owns the critic, the compressor and every source of randomness of a run.
pub struct Trainer<'d> {
    pub net: CriticNetwork,
    pub compressor: Compressor,
    pub schedule: CompressionSchedule,
    pub config: TrainerConfig,
    pub metrics: Vec<MetricsRecord>,
    rng: ChaCha8Rng,
    eval_seed: u64,
    train: &'d Dataset,
    valid: Dataset,
    stream: BatchStream,
    critic_opt: CriticOptimizer,
    full_params: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(
        net: CriticNetwork,
        compressor: Compressor,
        schedule: CompressionSchedule,
        config: TrainerConfig,
        train: &'d Dataset,
        valid: &Dataset,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        if compressor.steps() != net.droppable_count() {
            return Err(Error::dim(
                "trainer",
                &[compressor.steps()],
                &[net.droppable_count()],
            ));
        }
        let full_params = count_params(&net, None);
        let stream = BatchStream::new(train.len(), config.batch_size);
        let critic_opt = CriticOptimizer::new(schedule.beta, 0.0);
        Ok(Trainer {
            valid: valid.take(config.eval_examples),
            net,
            compressor,
            schedule,
            config,
            metrics: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            eval_seed: seed ^ 0x5eed_e7a1,
            train,
            stream,
            critic_opt,
            full_params,
        })
    }

    fn compressor_beta(&self) -> f64 {
        self.config.compressor_beta.unwrap_or(self.schedule.beta)
    }

    /// Remaining-parameter fraction under `masks`.
    pub fn param_fraction(&self, masks: &[Mask]) -> f64 {
        count_params(&self.net, Some(masks)) as f64 / self.full_params as f64
    }

    pub fn policy(&self) -> Result<DropoutPolicy> {
        self.compressor.policy(&self.net.compressor_views()?)
    }

    fn next_batch(&mut self) -> Batch {
        let idx = self.stream.next_indices(&mut self.rng);
        self.train.batch(&idx)
    }

    /// Sample masks, score the critic under them, and take one compressor
    /// step (plus one critic step when `train_critic`).
    pub fn round(&mut self, train_critic: bool) -> Result<RoundOutcome> {
        let views = self.net.compressor_views()?;
        let mut ctape = Tape::new();
        let pass = self.compressor.forward(&mut ctape, &views, true)?;
        let policy = pass.policy(&ctape);
        let sample = sample_masks(&policy, self.schedule.gamma, self.schedule.tau, &mut self.rng);
        self.net.set_masks(&sample.masks)?;
        self.net.set_keep_probs(&policy.probs);
        let batch = self.next_batch();

        let (loss, accuracy) = if train_critic {
            let mut tape = Tape::new();
            let (loss, fwd) = critic_loss(&mut tape, &self.net, &batch, true)?;
            tape.backward(loss)?;
            self.net.accumulate_grads(&tape, &fwd.params)?;
            (tape.value(loss).data()[0], accuracy_of(tape.value(fwd.logits), &batch.labels))
        } else {
            let mut tape = Tape::new();
            let (loss, fwd) = critic_loss(&mut tape, &self.net, &batch, false)?;
            (tape.value(loss).data()[0], accuracy_of(tape.value(fwd.logits), &batch.labels))
        };

        self.schedule.update_moving_stats(loss);
        let signal = self.schedule.signal(loss);
        let beta = self.compressor_beta();
        compressor_gradient_step(&mut self.compressor, &mut ctape, &pass, &sample, signal, beta)?;

        if train_critic {
            if loss.is_finite() && self.net.grads_finite() {
                self.critic_opt.step(&mut self.net);
            } else {
                warn!("non-finite critic gradient; update skipped");
                self.net.zero_grads();
            }
        }
        self.net.clear_masks();
        Ok(RoundOutcome {
            signal,
            sample,
            policy,
            accuracy,
        })
    }

    /// Expected validation loss under the current policy, estimated with a
    /// fixed stream of mask draws so successive checks are comparable.
    pub fn expected_valid_loss(&mut self) -> Result<f64> {
        let policy = self.policy()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.eval_seed);
        let draws = self.config.eval_mask_samples.max(1);
        let mut total = 0.0;
        for _ in 0..draws {
            let sample = sample_masks(&policy, self.schedule.gamma, self.schedule.tau, &mut rng);
            self.net.set_masks(&sample.masks)?;
            total += evaluate(&self.net, &self.valid, 250)?.0;
        }
        self.net.clear_masks();
        Ok(total / draws as f64)
    }

    fn record(&mut self, phase: u8, round: usize, out: &RoundOutcome, fraction: f64) {
        self.metrics.push(MetricsRecord {
            phase,
            round,
            tau: self.schedule.tau,
            loss: out.signal.raw,
            signal: out.signal.normalized,
            c: self.schedule.c,
            v: self.schedule.v,
            accuracy: out.accuracy,
            param_fraction: fraction,
        });
    }

    /// Compressor initialization against the frozen critic.
    pub fn run_phase1(&mut self, max_rounds: usize) -> Result<PhaseReport> {
        let mut stop = EarlyStop::new(self.config.patience, self.config.min_delta);
        let mut last = None;
        let mut rounds = 0;
        while rounds < max_rounds {
            let out = self.round(false)?;
            rounds += 1;
            self.record(1, rounds, &out, 1.0);
            if rounds % self.config.eval_interval.max(1) == 0 {
                let l = self.expected_valid_loss()?;
                debug!("phase 1 round {rounds}: expected valid loss {l:.5}");
                last = Some(l);
                if stop.update(l) {
                    break;
                }
            }
        }
        Ok(PhaseReport {
            rounds,
            final_valid_loss: last,
        })
    }

    /// Joint compression until `1[p > τ]` keeps at most `α` of the
    /// parameters. Returns those final masks.
    pub fn run_phase2(&mut self) -> Result<Vec<Mask>> {
        let mut rounds = 0;
        loop {
            let policy = self.policy()?;
            let (masks, _) = final_masks(&policy, self.schedule.tau);
            let fraction = self.param_fraction(&masks);
            if fraction <= self.schedule.alpha {
                self.net.set_keep_probs(&policy.probs);
                return Ok(masks);
            }
            if self.schedule.tau >= 1.0 {
                return Err(Error::InfeasibleSchedule(format!(
                    "tau reached {} after {rounds} rounds with {:.4} of parameters left (alpha {})",
                    self.schedule.tau, fraction, self.schedule.alpha
                )));
            }
            if self.config.phase2_max_rounds > 0 && rounds >= self.config.phase2_max_rounds {
                return Err(Error::InfeasibleSchedule(format!(
                    "round cap {} hit at tau {} with {:.4} of parameters left (alpha {})",
                    rounds, self.schedule.tau, fraction, self.schedule.alpha
                )));
            }
            let out = self.round(true)?;
            rounds += 1;
            self.record(2, rounds, &out, fraction);
            self.schedule.advance();
        }
    }

    /// Fine-tunes the critic under fixed masks; the compressor is untouched.
    pub fn run_phase3(&mut self, masks: &[Mask], max_rounds: usize) -> Result<PhaseReport> {
        self.net.set_masks(masks)?;
        let fraction = self.param_fraction(masks);
        let mut opt = CriticOptimizer::new(self.schedule.beta, self.config.finetune_momentum);
        let mut stop = EarlyStop::new(self.config.patience, self.config.min_delta);
        let mut last = None;
        let mut rounds = 0;
        while rounds < max_rounds {
            let batch = self.next_batch();
            let (loss, acc, _) = critic_gradient_step(&mut self.net, &batch, &mut opt)?;
            rounds += 1;
            self.metrics.push(MetricsRecord {
                phase: 3,
                round: rounds,
                tau: self.schedule.tau,
                loss,
                signal: 0.0,
                c: self.schedule.c,
                v: self.schedule.v,
                accuracy: acc,
                param_fraction: fraction,
            });
            if rounds % self.config.eval_interval.max(1) == 0 {
                let l = evaluate(&self.net, &self.valid, 250)?.0;
                debug!("phase 3 round {rounds}: valid loss {l:.5}");
                last = Some(l);
                if stop.update(l) {
                    break;
                }
            }
        }
        Ok(PhaseReport {
            rounds,
            final_valid_loss: last,
        })
    }
}

/// Plain supervised training of the uncompressed critic (phase 0).
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    net: &mut CriticNetwork,
    train: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    seed: u64,
    metrics: &mut Vec<MetricsRecord>,
) -> Result<()> {
    net.clear_masks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = BatchStream::new(train.len(), batch_size);
    let mut opt = CriticOptimizer::new(lr, momentum);
    let steps_per_epoch = train.len().div_ceil(batch_size.max(1));
    let mut round = 0;
    for epoch in 0..epochs {
        // linear decay to a tenth of the base rate over the run
        opt.lr = lr * (1.0 - 0.9 * epoch as f64 / epochs.max(1) as f64);
        for _ in 0..steps_per_epoch {
            let batch = train.batch(&stream.next_indices(&mut rng));
            let (loss, acc, _) = critic_gradient_step(net, &batch, &mut opt)?;
            round += 1;
            metrics.push(MetricsRecord {
                phase: 0,
                round,
                tau: 0.0,
                loss,
                signal: 0.0,
                c: 0.0,
                v: 0.0,
                accuracy: acc,
                param_fraction: 1.0,
            });
        }
    }
    Ok(())
}
