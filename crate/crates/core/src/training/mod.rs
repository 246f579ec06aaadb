//! Optimizer, schedule and the pretraining / Stage I / Stage II loops.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::instruct::Stage;
use crate::params::ParamSet;
use crate::seed::derive_seed;
use crate::toylm::grad::example_grad;
use crate::toylm::{LmParams, SpanFill};

pub use data::{
    build_example, build_examples, text_examples, Example, FcnStore, TextExample, TextFill,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn stage_one() -> Self {
        Self {
            stage: Stage::One,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 1,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            seed: 0,
            deterministic: true,
        }
    }

    pub fn stage_two() -> Self {
        Self {
            stage: Stage::Two,
            learning_rate: 1e-5,
            ..Self::stage_one()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 over `ceil(warmup_ratio * total)` steps, then cosine
/// decay reaching 0 at step `total - 1`.
pub fn lr_factor(step: usize, total: usize, warmup_ratio: f64) -> f64 {
    if total <= 1 {
        return if warmup_ratio > 0.0 { 0.0 } else { 1.0 };
    }
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    let span = (total - 1).saturating_sub(warmup);
    if span == 0 {
        return if step >= total - 1 { 0.0 } else { 1.0 };
    }
    let progress = (step.min(total - 1) - warmup) as f64 / span as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adaptive-moment optimizer with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<P: ParamSet> {
    m: P,
    v: P,
    t: u64,
}

impl<P: ParamSet> Adam<P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let g = grads.tensors();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for (((_, mut p), (_, g)), ((_, mut m), (_, mut v))) in params
            .tensors_mut()
            .into_iter()
            .zip(g)
            .zip(m.into_iter().zip(v))
        {
            Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    *p -= lr * (update + weight_decay * *p);
                });
        }
    }
}

/// Encoder and language model together.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub lm: LmParams,
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut t = self.encoder.tensors();
        t.extend(self.lm.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.lm.tensors_mut());
        t
    }
}

/// Gradients for one batch. `lm` is absent when the language model is frozen.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: f64,
    pub encoder: EncoderParams,
    pub lm: Option<LmParams>,
}

impl BatchGrad {
    fn add(mut self, other: &BatchGrad) -> BatchGrad {
        self.loss += other.loss;
        self.encoder.add_scaled(&other.encoder, 1.0);
        if let (Some(a), Some(b)) = (self.lm.as_mut(), other.lm.as_ref()) {
            a.add_scaled(b, 1.0);
        }
        self
    }

    fn scale(&mut self, f: f64) {
        self.loss *= f;
        self.encoder.scale(f);
        if let Some(lm) = self.lm.as_mut() {
            lm.scale(f);
        }
    }
}

/// Loss and gradients of one example through encoder and language model.
pub fn single_grad(
    model: &ModelParams,
    store: &FcnStore,
    ex: &Example,
    train_lm: bool,
) -> Result<BatchGrad> {
    let prepared = ex
        .fcns
        .iter()
        .map(|&id| store.prepare(id))
        .collect::<Result<Vec<_>>>()?;
    let forwards: Vec<_> = prepared.iter().map(|p| p.forward(&model.encoder)).collect();
    let fills: Vec<SpanFill<'_>> = forwards
        .iter()
        .map(|(t, _)| SpanFill::Tokens(t.view()))
        .collect();
    let g = example_grad(&model.lm, &ex.asm, &fills, train_lm)?;
    let mut enc = model.encoder.zeros_like();
    for ((prep, (_, cache)), d) in prepared.iter().zip(&forwards).zip(&g.spans) {
        let d: &Array2<f64> = d.as_ref().expect("encoder span");
        prep.backward(&model.encoder, cache, d, &mut enc);
    }
    Ok(BatchGrad {
        loss: g.loss,
        encoder: enc,
        lm: g.lm,
    })
}

/// Mean loss and gradient over a batch. Per-example gradients are computed in
/// parallel; with `deterministic` the sum runs sequentially in batch order.
pub fn batch_grad(
    model: &ModelParams,
    store: &FcnStore,
    batch: &[&Example],
    train_lm: bool,
    deterministic: bool,
) -> Result<BatchGrad> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let run = |ex: &&Example| single_grad(model, store, ex, train_lm);
    let mut total = if deterministic {
        let parts = batch.par_iter().map(run).collect::<Result<Vec<_>>>()?;
        let mut it = parts.into_iter();
        let first = it.next().expect("non-empty");
        it.fold(first, |acc, g| acc.add(&g))
    } else {
        batch
            .par_iter()
            .map(run)
            .try_reduce_with(|a, b| Ok(a.add(&b)))
            .expect("non-empty")?
    };
    total.scale(1.0 / batch.len() as f64);
    if !total.loss.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
        return Err(Error::Training(format!(
            "non-finite loss {} on batch {ids:?}",
            total.loss
        )));
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn append_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "epoch", epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn total_steps(n: usize, cfg: &TrainConfig) -> usize {
    cfg.epochs * n.div_ceil(cfg.batch_size)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::One => "stage1",
        Stage::Two => "stage2",
    }
}

/// Stage I: only the encoder is updated; the language model is read-only.
pub fn train_stage1(
    model: &mut ModelParams,
    store: &FcnStore,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Dataset("no training examples".into()));
    }
    let total = total_steps(examples.len(), cfg);
    let mut opt = Adam::new(&model.encoder);
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(examples.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let g = batch_grad(model, store, &batch, false, cfg.deterministic)?;
            let lr = cfg.learning_rate * lr_factor(step, total, cfg.warmup_ratio);
            opt.step(&mut model.encoder, &g.encoder, lr, cfg.weight_decay);
            log.push(LogRecord {
                stage: stage_name(Stage::One).into(),
                step,
                lr,
                loss: g.loss,
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Stage II: encoder and language model are updated jointly.
pub fn train_stage2(
    model: &mut ModelParams,
    store: &FcnStore,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Dataset("no training examples".into()));
    }
    let total = total_steps(examples.len(), cfg);
    let mut opt = Adam::new(&*model);
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(examples.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let g = batch_grad(model, store, &batch, true, cfg.deterministic)?;
            let grads = ModelParams {
                encoder: g.encoder,
                lm: g.lm.expect("language model gradients requested"),
            };
            let lr = cfg.learning_rate * lr_factor(step, total, cfg.warmup_ratio);
            opt.step(model, &grads, lr, cfg.weight_decay);
            log.push(LogRecord {
                stage: stage_name(Stage::Two).into(),
                step,
                lr,
                loss: g.loss,
            });
            step += 1;
        }
    }
    Ok(log)
}

fn text_grad(lm: &LmParams, ex: &TextExample) -> Result<(f64, LmParams)> {
    let fills: Vec<SpanFill<'_>> = ex.fills.iter().map(TextFill::as_span_fill).collect();
    let g = example_grad(lm, &ex.asm, &fills, true)?;
    Ok((g.loss, g.lm.expect("requested")))
}

/// Text-only pretraining of the language model.
pub fn pretrain_lm(
    lm: &mut LmParams,
    examples: &[TextExample],
    cfg: &TrainConfig,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Dataset("no pretraining examples".into()));
    }
    let total = total_steps(examples.len(), cfg);
    let mut opt = Adam::new(&*lm);
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(examples.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let parts = chunk
                .par_iter()
                .map(|&i| text_grad(lm, &examples[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut it = parts.into_iter();
            let (mut loss, mut grads) = it.next().expect("non-empty chunk");
            for (l, g) in it {
                loss += l;
                grads.add_scaled(&g, 1.0);
            }
            let inv = 1.0 / chunk.len() as f64;
            grads.scale(inv);
            loss *= inv;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite pretraining loss at step {step}"
                )));
            }
            let lr = cfg.learning_rate * lr_factor(step, total, cfg.warmup_ratio);
            opt.step(lm, &grads, lr, cfg.weight_decay);
            log.push(LogRecord {
                stage: "pretrain".into(),
                step,
                lr,
                loss,
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Mean loss over examples without updating anything.
pub fn mean_loss(model: &ModelParams, store: &FcnStore, examples: &[Example]) -> Result<f64> {
    let losses = examples
        .par_iter()
        .map(|ex| {
            let prepared = ex
                .fcns
                .iter()
                .map(|&id| store.prepare(id))
                .collect::<Result<Vec<_>>>()?;
            let tokens: Vec<_> = prepared
                .iter()
                .map(|p| p.forward(&model.encoder).0)
                .collect();
            let fills: Vec<SpanFill<'_>> =
                tokens.iter().map(|t| SpanFill::Tokens(t.view())).collect();
            let x = crate::toylm::embed(&model.lm, &ex.asm, &fills)?;
            crate::toylm::masked_loss(
                crate::toylm::logits(x.view(), &model.lm).view(),
                &ex.asm.targets,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}
