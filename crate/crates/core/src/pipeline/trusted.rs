//! The enclave side: owns all secret material and runs every nonlinear step.

use std::collections::HashMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad_codec::GradCodec;
use crate::masking::{BlindingKey, NoiseSpec};
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

use super::boundary::{SecretAudit, SecretKind};
use super::integrity::{self, DEFAULT_THRESHOLD};
use super::model::LayerSpec;
use super::pages::{self, GradientPage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrustedConfig {
    pub noise: NoiseSpec,
    pub seed: u64,
    pub integrity: bool,
    pub threshold: f64,
}

impl TrustedConfig {
    pub fn new(noise: NoiseSpec, seed: u64) -> Self {
        TrustedConfig { noise, seed, integrity: false, threshold: DEFAULT_THRESHOLD }
    }

    pub fn with_integrity(mut self, threshold: f64) -> Self {
        self.integrity = true;
        self.threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        integrity::validate_threshold(self.threshold)
    }
}

/// What the backward pass needs from one forward layer.
#[derive(Debug)]
pub(super) enum LayerTrace {
    Linear { codec: Option<GradCodec>, operand_shape: Vec<usize>, input_shape: Vec<usize> },
    Relu { inputs: Vec<Tensor> },
    Pool { argmax: Vec<Vec<usize>>, input_shape: Vec<usize> },
}

#[derive(Debug)]
pub(super) struct Session {
    pub k: usize,
    pub output_shape: Vec<usize>,
    pub layers: Vec<LayerTrace>,
}

pub struct TrustedContext {
    specs: Vec<LayerSpec>,
    cfg: TrustedConfig,
    a_rng: DetRng,
    noise_rng: DetRng,
    sessions: HashMap<u64, Session>,
    next_batch: u64,
    next_page: u64,
    page_key: [u8; 32],
    audit: Option<Box<dyn SecretAudit>>,
}

impl std::fmt::Debug for TrustedContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrustedContext")
            .field("layers", &self.specs.len())
            .field("integrity", &self.cfg.integrity)
            .field("threshold", &self.cfg.threshold)
            .field("open_sessions", &self.sessions.len())
            .finish_non_exhaustive()
    }
}

impl TrustedContext {
    pub fn new(specs: Vec<LayerSpec>, cfg: TrustedConfig) -> Result<Self> {
        cfg.validate()?;
        for s in &specs {
            s.validate()?;
        }
        let mut key_rng = rng::seeded_stream(cfg.seed, 33);
        let mut page_key = [0u8; 32];
        key_rng.fill_bytes(&mut page_key);
        Ok(TrustedContext {
            specs,
            a_rng: rng::seeded_stream(cfg.seed, 31),
            noise_rng: rng::seeded_stream(cfg.noise.seed ^ cfg.seed.rotate_left(32), 32),
            cfg,
            sessions: HashMap::new(),
            next_batch: 0,
            next_page: 0,
            page_key,
            audit: None,
        })
    }

    pub fn set_audit(&mut self, audit: Box<dyn SecretAudit>) {
        self.audit = Some(audit);
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn integrity(&self) -> bool {
        self.cfg.integrity
    }

    pub fn threshold(&self) -> f64 {
        self.cfg.threshold
    }

    /// Number of forward passes still awaiting their backward pass.
    pub fn open_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub(super) fn audit(&mut self, kind: SecretKind, t: &Tensor) {
        if let Some(a) = self.audit.as_mut() {
            a.secret(kind, t.fingerprint());
        }
    }

    pub(super) fn next_batch_id(&mut self) -> u64 {
        let id = self.next_batch;
        self.next_batch += 1;
        id
    }

    /// Fresh key (and, when training, codec sharing its `A`) for one layer.
    pub(super) fn layer_secrets(
        &mut self,
        k: usize,
        operand_shape: &[usize],
        training: bool,
    ) -> Result<(BlindingKey, Option<GradCodec>)> {
        let (key, codec) = if training {
            let codec = GradCodec::generate(k, &mut self.a_rng)?;
            let key = BlindingKey::with_square(
                codec.a().clone(),
                operand_shape,
                &self.cfg.noise,
                self.cfg.integrity,
                &mut self.a_rng,
                &mut self.noise_rng,
            )?;
            (key, Some(codec))
        } else {
            let key = BlindingKey::generate(
                k,
                operand_shape,
                &self.cfg.noise,
                self.cfg.integrity,
                &mut self.a_rng,
                &mut self.noise_rng,
            )?;
            (key, None)
        };
        if self.audit.is_some() {
            self.audit(SecretKind::MixingMatrix, key.a());
            self.audit(SecretKind::MixingMatrix, key.a_inv());
            self.audit(SecretKind::Noise, key.noise());
            if let Some(c) = &codec {
                self.audit(SecretKind::MixingMatrix, c.a());
                self.audit(SecretKind::Gamma, &Tensor::vector(c.gamma().to_vec())?);
            }
        }
        Ok((key, codec))
    }

    pub(super) fn open_session(&mut self, batch: u64, session: Session) {
        self.sessions.insert(batch, session);
    }

    pub(super) fn take_session(&mut self, batch: u64) -> Result<Session> {
        self.sessions
            .remove(&batch)
            .ok_or_else(|| Error::protocol(format!("no forward pass recorded for batch {batch}")))
    }

    pub(super) fn seal(&mut self, page: &GradientPage) -> Result<(u64, Vec<u8>)> {
        let id = self.next_page;
        self.next_page += 1;
        Ok((id, pages::seal_page(page, &self.page_key, id)?))
    }

    pub(super) fn unseal(&self, blob: &[u8]) -> Result<GradientPage> {
        pages::unseal_page(blob, &self.page_key)
    }
}
