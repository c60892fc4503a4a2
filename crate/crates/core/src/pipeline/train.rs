//! SGD over virtual batches.
//!
//! A mini-batch of `N` samples is processed as consecutive virtual batches
//! of at most `k`. Each virtual batch's decoded gradient is sealed into a
//! page held by the untrusted side with weight `k_v/N`; once the whole
//! mini-batch is done the pages are read back, combined, and one update is
//! applied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::NoiseSpec;
use crate::tensor::Tensor;

use super::boundary::{BoundaryObserver, SecretAudit};
use super::data::Dataset;
use super::integrity::{self, IntegrityReport, IntegrityStatus, DEFAULT_THRESHOLD};
use super::loss::Loss;
use super::model::Model;
use super::pages::GradientPage;
use super::split::{backward_split, forward_split, Mode};
use super::trusted::{TrustedConfig, TrustedContext};
use super::untrusted::UntrustedContext;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    /// Virtual batch size.
    pub k: usize,
    /// Samples per weight update; defaults to `k`.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub loss: Loss,
    pub seed: u64,
    #[serde(default)]
    pub integrity: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub noise: NoiseSpec,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl TrainConfig {
    pub fn new(eta: f64, k: usize, epochs: usize, loss: Loss, seed: u64, noise: NoiseSpec) -> Self {
        TrainConfig {
            eta,
            k,
            batch_size: None,
            epochs,
            loss,
            seed,
            integrity: false,
            threshold: DEFAULT_THRESHOLD,
            noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::param(format!("learning rate must be > 0, got {}", self.eta)));
        }
        if self.k == 0 {
            return Err(Error::param("virtual batch size k must be >= 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::param("batch size must be >= 1"));
        }
        integrity::validate_threshold(self.threshold)?;
        self.noise.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(self.k)
    }

    fn trusted(&self) -> TrustedConfig {
        TrustedConfig { noise: self.noise, seed: self.seed, integrity: self.integrity, threshold: self.threshold }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub integrity: IntegrityReport,
}

/// Euclidean norm over all gradient entries.
pub fn aggregate_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.l2_norm().powi(2)).sum::<f64>().sqrt()
}

/// Gradient of one mini-batch as computed by [`Trainer::batch_gradient`].
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub integrity: IntegrityReport,
}

#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    trusted: TrustedContext,
    untrusted: UntrustedContext,
    steps: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let trusted = TrustedContext::new(model.specs(), cfg.trusted())?;
        Ok(Trainer { cfg, trusted, untrusted: UntrustedContext::new(model), steps: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        self.untrusted.model()
    }

    pub fn into_model(self) -> Model {
        self.untrusted.into_model()
    }

    pub fn set_observer(&mut self, observer: Box<dyn BoundaryObserver>) {
        self.untrusted.set_observer(observer);
    }

    pub fn set_audit(&mut self, audit: Box<dyn SecretAudit>) {
        self.trusted.set_audit(audit);
    }

    pub fn untrusted_mut(&mut self) -> &mut UntrustedContext {
        &mut self.untrusted
    }

    /// Mean loss and mean gradient of one mini-batch, without updating.
    /// An integrity violation aborts with [`Error::Integrity`].
    pub fn batch_gradient(&mut self, inputs: &[Tensor], targets: &[Tensor]) -> Result<BatchGradient> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::protocol(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
        }
        let n = inputs.len() as f64;
        let loss_fn = self.cfg.loss;
        let mut total_loss = 0.0;
        let mut status: Option<IntegrityStatus> = None;
        let mut page_ids = Vec::new();
        for (xs, ts) in inputs.chunks(self.cfg.k).zip(targets.chunks(self.cfg.k)) {
            let out = forward_split(xs, &mut self.trusted, &mut self.untrusted, Mode::Training)?;
            if let Some(s) = out.integrity {
                if let IntegrityStatus::Violation { layer, max_residual } = s {
                    self.trusted.take_session(out.batch).ok();
                    self.untrusted.release(out.batch);
                    return Err(Error::Integrity { layer, residual: max_residual });
                }
                status = Some(status.map_or(s, |p| p.combine(s)));
            }
            let mut loss_grads = Vec::with_capacity(xs.len());
            for (y, t) in out.logits.iter().zip(ts) {
                total_loss += loss_fn.value(y, t)?;
                loss_grads.push(loss_fn.grad(y, t)?);
            }
            let grads = backward_split(out.batch, &loss_grads, &mut self.trusted, &mut self.untrusted)?;
            let page = GradientPage { weight: xs.len() as f64 / n, grads };
            let (id, blob) = self.trusted.seal(&page)?;
            self.untrusted.store_page(id, blob);
            page_ids.push(id);
        }

        let mut acc: Option<Vec<Tensor>> = None;
        for id in page_ids {
            let blob = self.untrusted.load_page(id)?;
            let page = self.trusted.unseal(&blob)?;
            match acc.as_mut() {
                None => acc = Some(page.grads.iter().map(|g| g.scale(page.weight)).collect()),
                Some(acc) => {
                    if acc.len() != page.grads.len() {
                        return Err(Error::Format("gradient page has the wrong layer count".into()));
                    }
                    for (a, g) in acc.iter_mut().zip(&page.grads) {
                        a.add_scaled(page.weight, g)?;
                    }
                }
            }
        }
        let grads = acc.expect("non-empty batch");
        Ok(BatchGradient { loss: total_loss / n, grads, integrity: status.into() })
    }

    /// Gradient plus one weight update in the untrusted context.
    pub fn step(&mut self, inputs: &[Tensor], targets: &[Tensor], epoch: usize) -> Result<MetricRecord> {
        let bg = self.batch_gradient(inputs, targets)?;
        self.untrusted.apply_update(&bg.grads, self.cfg.eta)?;
        self.steps += 1;
        Ok(MetricRecord {
            step: self.steps,
            epoch,
            loss: bg.loss,
            grad_norm: aggregate_norm(&bg.grads),
            integrity: bg.integrity,
        })
    }

    /// All configured epochs over `data` in order.
    pub fn run(&mut self, data: &Dataset) -> Result<Vec<MetricRecord>> {
        let batch = self.cfg.batch_size();
        let mut history = Vec::new();
        for epoch in 0..self.cfg.epochs {
            for (x, t) in data.batches(batch) {
                history.push(self.step(x, t, epoch)?);
            }
        }
        Ok(history)
    }
}

/// Trains `model` on `data` and returns the final model with its metrics.
pub fn train(model: Model, data: &Dataset, cfg: TrainConfig) -> Result<(Model, Vec<MetricRecord>)> {
    let mut trainer = Trainer::new(model, cfg)?;
    let history = trainer.run(data)?;
    Ok((trainer.into_model(), history))
}
