//! Client-side training.
//!
//! A client round draws `inner_epochs` random batches from the private
//! dataset. Each batch takes one optimizer step on the mean cross-entropy,
//! plus `alpha` times the logit-matching loss once the server has answered
//! at least once. Logits from the training forward passes are collected into
//! the accumulator and finalized into the round's upload.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{sample_batch, DataError, Dataset, Sample};
use crate::nn::{cross_entropy, logit_loss, Gradients, Mode, Model, NnError, Parameters};
use crate::protocol::{AverageLogits, ClassLogitAccumulator, LogitUpdate, ProtocolError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("client {0} has no average logits yet; use a private-only step")]
    ColdStart(usize),
    #[error("client {client}: {message}")]
    Mismatch { client: usize, message: String },
}

/// Mean losses over one batch. `logit` averages over the whole batch, with
/// instances lacking a target contributing zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLosses {
    pub private: f64,
    pub logit: f64,
}

/// Losses of a single instance, evaluated without dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceLoss {
    pub private: f64,
    pub logit: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub round: u64,
    pub mean_private_loss: f64,
    pub mean_logit_loss: f64,
    /// `mean_private_loss + alpha · mean_logit_loss`.
    pub mean_total_loss: f64,
    pub batches: usize,
    pub transmitted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConfig {
    pub inner_epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
}

/// Batch objective with its gradient and the logits seen on the way.
#[derive(Debug, Clone)]
pub struct Objective {
    pub losses: BatchLosses,
    pub gradients: Gradients,
    pub logits: Vec<(Vec<f64>, usize)>,
}

/// Mean over `samples` of `cross_entropy + alpha · logit_loss(p, target_y)`.
///
/// Instances whose class has no target in `average` contribute
/// cross-entropy only. With `alpha == 0` the logit term is reported but adds
/// nothing to the gradient.
pub fn batch_objective(
    model: &Model,
    samples: &[&Sample],
    average: Option<&AverageLogits>,
    alpha: f64,
    mut mode: Mode<'_>,
) -> Result<Objective, NnError> {
    let mut gradients = Parameters::zeros_for(model.spec());
    let mut logits = Vec::with_capacity(samples.len());
    let mut private_sum = 0.0;
    let mut logit_sum = 0.0;
    for sample in samples {
        let pass = match &mut mode {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(&mut **rng),
        };
        let trace = model.forward(&sample.x, pass)?;
        let ce = cross_entropy(&trace, sample.y)?;
        private_sum += ce.loss;
        let mut grad = ce.grad;
        if let Some(target) = average.and_then(|a| a.get(sample.y)) {
            let matched = logit_loss(trace.logits(), target)?;
            logit_sum += matched.loss;
            if alpha != 0.0 {
                grad.iter_mut()
                    .zip(&matched.grad)
                    .for_each(|(g, m)| *g += alpha * m);
            }
        }
        model.backward_into(&trace, &grad, &mut gradients)?;
        logits.push((trace.logits().to_vec(), sample.y));
    }
    let n = samples.len().max(1) as f64;
    gradients.scale(1.0 / n);
    Ok(Objective {
        losses: BatchLosses {
            private: private_sum / n,
            logit: logit_sum / n,
        },
        gradients,
        logits,
    })
}

/// One client: its model, private data, logit accumulator and random stream.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: usize,
    model: Model,
    dataset: Arc<Dataset>,
    accumulator: ClassLogitAccumulator,
    latest_average: Option<AverageLogits>,
    rng: ChaCha8Rng,
    speed: f64,
    lr: f64,
    rounds_completed: u64,
}

impl ClientState {
    pub fn new(
        id: usize,
        model: Model,
        dataset: Arc<Dataset>,
        rng: ChaCha8Rng,
        speed: f64,
        lr: f64,
    ) -> Result<Self, TrainError> {
        let mismatch = |message: String| TrainError::Mismatch {
            client: id,
            message,
        };
        if model.spec().class_count() != dataset.class_count() {
            return Err(mismatch(format!(
                "model has {} classes, dataset has {}",
                model.spec().class_count(),
                dataset.class_count()
            )));
        }
        if model.spec().input_dim() != dataset.input_dim() {
            return Err(mismatch(format!(
                "model input width {} does not match data width {}",
                model.spec().input_dim(),
                dataset.input_dim()
            )));
        }
        if !(speed > 0.0 && speed.is_finite()) {
            return Err(mismatch(format!("speed must be positive, got {speed}")));
        }
        let classes = dataset.class_count();
        Ok(Self {
            id,
            model,
            dataset,
            accumulator: ClassLogitAccumulator::new(classes),
            latest_average: None,
            rng,
            speed,
            lr,
            rounds_completed: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn accumulator(&self) -> &ClassLogitAccumulator {
        &self.accumulator
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn rounds_completed(&self) -> u64 {
        self.rounds_completed
    }

    pub fn latest_average(&self) -> Option<&AverageLogits> {
        self.latest_average.as_ref()
    }

    pub fn set_average(&mut self, average: Option<AverageLogits>) {
        self.latest_average = average;
    }

    pub fn take_average(&mut self) -> Option<AverageLogits> {
        self.latest_average.take()
    }

    /// Draws a batch of indices into the private dataset.
    pub fn draw_batch(&mut self, batch_size: usize) -> Result<Vec<usize>, TrainError> {
        Ok(sample_batch(&self.dataset, batch_size, &mut self.rng)?)
    }

    fn train_batch(
        &mut self,
        batch: &[usize],
        average: Option<&AverageLogits>,
        alpha: f64,
    ) -> Result<BatchLosses, TrainError> {
        let dataset = Arc::clone(&self.dataset);
        let samples: Vec<&Sample> = batch.iter().map(|&i| dataset.get(i)).collect();
        let objective = batch_objective(
            &self.model,
            &samples,
            average,
            alpha,
            Mode::Train(&mut self.rng),
        )?;
        self.accumulator
            .accumulate(objective.logits.iter().map(|(p, y)| (p.as_slice(), *y)))?;
        self.model.optimizer_step(&objective.gradients, self.lr)?;
        Ok(objective.losses)
    }

    /// One step on mean cross-entropy; the batch's logits go into the accumulator.
    pub fn train_private_batch(&mut self, batch: &[usize]) -> Result<BatchLosses, TrainError> {
        self.train_batch(batch, None, 0.0)
    }

    /// One step on mean `cross_entropy + alpha · logit_loss`, using the
    /// average logits most recently installed with [`set_average`](Self::set_average).
    pub fn train_combined_batch(
        &mut self,
        batch: &[usize],
        alpha: f64,
    ) -> Result<BatchLosses, TrainError> {
        let average = self
            .latest_average
            .take()
            .ok_or(TrainError::ColdStart(self.id))?;
        let result = self.train_batch(batch, Some(&average), alpha);
        self.latest_average = Some(average);
        result
    }

    /// Runs `inner_epochs` batches (combined when `average` is present,
    /// private-only otherwise), then finalizes the accumulator into an upload.
    pub fn client_round(
        &mut self,
        average: Option<AverageLogits>,
        cfg: &RoundConfig,
        round: u64,
    ) -> Result<(LogitUpdate, TrainReport), TrainError> {
        if let Some(avg) = average {
            self.latest_average = Some(avg);
        }
        let (mut private, mut logit) = (0.0, 0.0);
        for _ in 0..cfg.inner_epochs {
            let batch = self.draw_batch(cfg.batch_size)?;
            let losses = if self.latest_average.is_some() {
                self.train_combined_batch(&batch, cfg.alpha)?
            } else {
                self.train_private_batch(&batch)?
            };
            private += losses.private;
            logit += losses.logit;
        }
        let update = self.accumulator.finalize(self.id)?;
        self.rounds_completed += 1;
        let n = cfg.inner_epochs.max(1) as f64;
        let (private, logit) = (private / n, logit / n);
        Ok((
            update,
            TrainReport {
                round,
                mean_private_loss: private,
                mean_logit_loss: logit,
                mean_total_loss: private + cfg.alpha * logit,
                batches: cfg.inner_epochs,
                transmitted: true,
            },
        ))
    }

    /// One step on mean `logit_loss(p_i, consensus_i)` over public samples.
    /// Returns the loss before the step.
    pub fn train_consensus_step(
        &mut self,
        public: &[&Sample],
        consensus: &[Vec<f64>],
    ) -> Result<f64, TrainError> {
        if public.len() != consensus.len() {
            return Err(TrainError::Mismatch {
                client: self.id,
                message: format!(
                    "{} public samples but {} consensus vectors",
                    public.len(),
                    consensus.len()
                ),
            });
        }
        let mut gradients = Parameters::zeros_for(self.model.spec());
        let mut loss = 0.0;
        for (sample, target) in public.iter().zip(consensus) {
            let trace = self.model.forward(&sample.x, Mode::Train(&mut self.rng))?;
            let matched = logit_loss(trace.logits(), target)?;
            loss += matched.loss;
            self.model
                .backward_into(&trace, &matched.grad, &mut gradients)?;
        }
        let n = public.len().max(1) as f64;
        gradients.scale(1.0 / n);
        self.model.optimizer_step(&gradients, self.lr)?;
        Ok(loss / n)
    }

    /// Losses of one private sample in evaluation mode.
    pub fn instance_loss(
        &self,
        index: usize,
        average: Option<&AverageLogits>,
        alpha: f64,
    ) -> Result<InstanceLoss, TrainError> {
        let sample = self.dataset.get(index);
        let trace = self.model.forward(&sample.x, Mode::Eval)?;
        let private = cross_entropy(&trace, sample.y)?.loss;
        let logit = match average.and_then(|a| a.get(sample.y)) {
            Some(target) => logit_loss(trace.logits(), target)?.loss,
            None => 0.0,
        };
        Ok(InstanceLoss {
            private,
            logit,
            combined: private + alpha * logit,
        })
    }
}
