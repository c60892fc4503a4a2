//! The four subcommands. Each returns a JSON report that embeds the
//! resolved configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::time::Instant;

use darknight::io::read_tensor;
use darknight::leakage::{leakage_bound, reproduce_noise_table, LeakageParams, RowStatus};
use darknight::pipeline::{
    accuracy, forward_split, inject_tamper, load_model, plain_forward, save_model, synthetic_blobs, synthetic_xor,
    Dataset, IntegrityStatus, LayerResidual, LayerSpec, Mode, Model, PlainTrainer, TrainConfig, Trainer,
    TrustedConfig, TrustedContext, UntrustedContext,
};
use darknight::tensor::max_rel_error;
use darknight::{Error, Result, Tensor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, Synthetic};

pub struct Outcome {
    pub report: Value,
    /// An integrity check failed; the process exits with status 2.
    pub violation: bool,
}

fn inputs(cfg: &RunConfig) -> Result<Vec<Tensor>> {
    if cfg.data.inputs.is_empty() {
        Ok(dataset(cfg)?.inputs().to_vec())
    } else {
        cfg.data.inputs.iter().map(read_tensor).collect()
    }
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data.inputs.is_empty() {
        return match cfg.data.synthetic {
            Synthetic::Blobs => synthetic_blobs(cfg.data.samples, cfg.data.seed),
            Synthetic::Xor => synthetic_xor(),
        };
    }
    if cfg.data.targets.is_empty() {
        return Err(Error::Param("training from files needs data.targets".into()));
    }
    let xs = cfg.data.inputs.iter().map(read_tensor).collect::<Result<Vec<_>>>()?;
    let ts = cfg.data.targets.iter().map(read_tensor).collect::<Result<Vec<_>>>()?;
    Dataset::new(xs, ts)
}

/// The configured model, or a seeded two-layer MLP sized to the inputs.
fn model(cfg: &RunConfig, input_shape: &[usize], outputs: usize) -> Result<Model> {
    if let Some(path) = &cfg.model.manifest {
        return load_model(path);
    }
    let specs = match &cfg.model.layers {
        Some(l) => l.clone(),
        None => vec![
            LayerSpec::Dense { inputs: input_shape.iter().product(), outputs: cfg.model.hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: cfg.model.hidden, outputs },
        ],
    };
    Model::init(&specs, cfg.model.seed)
}

fn check_k(cfg: &RunConfig, samples: usize) -> Result<()> {
    if cfg.k > samples {
        return Err(Error::Param(format!("k = {} exceeds the {samples} available samples", cfg.k)));
    }
    Ok(())
}

fn trusted_config(cfg: &RunConfig, integrity: bool) -> Result<TrustedConfig> {
    let t = TrustedConfig::new(cfg.noise_spec()?, cfg.seed);
    Ok(if integrity { t.with_integrity(cfg.integrity.threshold) } else { t })
}

#[derive(Serialize)]
struct BatchResidual {
    batch: usize,
    layer: usize,
    residual: f64,
}

struct SplitRun {
    outputs: Vec<Tensor>,
    status: Option<IntegrityStatus>,
    residuals: Vec<BatchResidual>,
}

/// Forward passes over consecutive virtual batches of `k`.
fn run_split(
    xs: &[Tensor],
    cfg: &RunConfig,
    trusted: &mut TrustedContext,
    untrusted: &mut UntrustedContext,
) -> Result<SplitRun> {
    let mut run = SplitRun { outputs: Vec::with_capacity(xs.len()), status: None, residuals: Vec::new() };
    for (b, chunk) in xs.chunks(cfg.k).enumerate() {
        let out = forward_split(chunk, trusted, untrusted, Mode::Inference)?;
        run.outputs.extend(out.logits);
        if let Some(s) = out.integrity {
            run.status = Some(run.status.map_or(s, |p| p.combine(s)));
        }
        run.residuals.extend(
            out.residuals.into_iter().map(|LayerResidual { layer, residual }| BatchResidual { batch: b, layer, residual }),
        );
    }
    Ok(run)
}

pub fn infer(cfg: &RunConfig, check_plain: bool) -> Result<Outcome> {
    let start = Instant::now();
    let xs = inputs(cfg)?;
    check_k(cfg, xs.len())?;
    let model = model(cfg, xs[0].shape(), 2)?;
    let mut trusted = TrustedContext::new(model.specs(), trusted_config(cfg, cfg.integrity.enabled)?)?;
    let mut untrusted = UntrustedContext::new(model);
    let run = run_split(&xs, cfg, &mut trusted, &mut untrusted)?;

    let plain = if check_plain {
        let mut worst: f64 = 0.0;
        for (x, y) in xs.iter().zip(&run.outputs) {
            let (p, _) = plain_forward(untrusted.model(), x)?;
            worst = worst.max(max_rel_error(y, &p));
        }
        Some(json!({ "max_rel_error": worst }))
    } else {
        None
    };
    let violation = run.status.is_some_and(|s| !s.is_ok());
    let report = json!({
        "command": "infer",
        "config": cfg,
        "samples": xs.len(),
        "output_shape": run.outputs[0].shape(),
        "outputs": run.outputs.iter().map(Tensor::data).collect::<Vec<_>>(),
        "check_plain": plain,
        "integrity": run.status,
        "residuals": run.residuals,
        "elapsed_s": start.elapsed().as_secs_f64(),
    });
    Ok(Outcome { report, violation })
}

pub fn verify(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let xs = inputs(cfg)?;
    check_k(cfg, xs.len())?;
    let tamper = cfg.tamper()?;
    let model = model(cfg, xs[0].shape(), 2)?;
    let mut trusted = TrustedContext::new(model.specs(), trusted_config(cfg, true)?)?;
    let mut untrusted = UntrustedContext::new(model);
    if let Some(policy) = tamper {
        if policy.equation > cfg.k + 1 {
            return Err(Error::Param(format!(
                "tamper equation {} out of range for k = {} (0..={})",
                policy.equation,
                cfg.k,
                cfg.k + 1
            )));
        }
        inject_tamper(&mut untrusted, policy)?;
    }
    let run = run_split(&xs, cfg, &mut trusted, &mut untrusted)?;
    let status = run.status.ok_or_else(|| Error::Protocol("model has no linear layer to verify".into()))?;
    let report = json!({
        "command": "verify",
        "config": cfg,
        "tamper": tamper,
        "threshold": cfg.integrity.threshold,
        "result": status,
        "residuals": run.residuals,
        "elapsed_s": start.elapsed().as_secs_f64(),
    });
    Ok(Outcome { report, violation: !status.is_ok() })
}

pub fn train(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let data = dataset(cfg)?;
    check_k(cfg, data.len())?;
    let init = model(cfg, data.input_shape(), data.targets()[0].numel())?;
    let tc = TrainConfig {
        eta: cfg.train.eta,
        k: cfg.k,
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        loss: cfg.train.loss,
        seed: cfg.seed,
        integrity: cfg.integrity.enabled,
        threshold: cfg.integrity.threshold,
        noise: cfg.noise_spec()?,
    };
    let mut trainer = Trainer::new(init.clone(), tc)?;
    let mut oracle = if cfg.train.oracle { Some(PlainTrainer::new(init, tc)?) } else { None };

    fs::create_dir_all(&cfg.train.output)?;
    let metrics_path = cfg.train.output.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut divergence: f64 = 0.0;
    let mut steps = 0;
    let mut last_loss = None;
    for epoch in 0..tc.epochs {
        for (x, t) in data.batches(tc.batch_size()) {
            let record = match trainer.step(x, t, epoch) {
                Ok(r) => r,
                Err(e) => {
                    metrics.flush()?;
                    return Err(e);
                }
            };
            serde_json::to_writer(&mut metrics, &record).map_err(|e| Error::Format(e.to_string()))?;
            metrics.write_all(b"\n")?;
            if let Some(plain) = oracle.as_mut() {
                plain.step(x, t, epoch)?;
                for (a, b) in trainer.model().parameters().iter().zip(plain.model().parameters()) {
                    divergence = divergence.max(max_rel_error(a, b));
                }
            }
            steps += 1;
            last_loss = Some(record.loss);
        }
    }
    metrics.flush()?;
    let model = trainer.into_model();
    let manifest = save_model(&model, cfg.train.output.join("model"))?;
    let report = json!({
        "command": "train",
        "config": cfg,
        "samples": data.len(),
        "steps": steps,
        "final_loss": last_loss,
        "accuracy": accuracy(&model, &data)?,
        "oracle": oracle.map(|_| json!({ "max_divergence": divergence })),
        "model_manifest": manifest,
        "metrics_log": metrics_path,
        "elapsed_s": start.elapsed().as_secs_f64(),
    });
    Ok(Outcome { report, violation: false })
}

pub fn bound(cfg: &RunConfig, table: bool) -> Result<Outcome> {
    let sigma_sq = cfg.bound.sigma_sq.unwrap_or(cfg.noise.variance);
    let params = LeakageParams::new(cfg.k, cfg.bound.c1, cfg.bound.ratio, sigma_sq)?;
    let b = leakage_bound(&params)?;
    let mut report = json!({
        "command": "bound",
        "config": cfg,
        "params": params,
        "nats": b.nats,
        "bits": b.bits(),
    });
    let mut failed = false;
    if table {
        let rows = reproduce_noise_table(cfg.bound.tolerance);
        failed = rows.iter().any(|r| r.status == RowStatus::Fail);
        report["table"] = json!({
            "tolerance": cfg.bound.tolerance,
            "rows": rows,
            "all_pass_or_known": !failed,
        });
    }
    if failed {
        return Err(Error::Param(format!("noise table reproduction failed: {report}")));
    }
    Ok(Outcome { report, violation: false })
}
