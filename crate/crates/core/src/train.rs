//! Mini-batch training with Adam, per-document priors and early stopping.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{build_indicator, expert_prior, TopicLabelVector};
use crate::corpus::{BowCorpus, BowDoc};
use crate::dirichlet::DirichletParams;
use crate::error::{Error, Result};
use crate::model::{author_batch, count_batch, objective, ArchConfig, Dims, LatentMode, ModelParams, Slot, Variant};
use crate::nn::Graph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Floor for structurally-zero prior coordinates.
    pub floor: f64,
    /// Stop after this many epochs without a validation improvement.
    /// `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    pub adam: AdamConfig,
    #[serde(flatten)]
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            alpha: 0.02,
            beta: 2.0,
            learning_rate: 1e-3,
            max_epochs: 100,
            seed: 0,
            floor: crate::dirichlet::DEFAULT_FLOOR,
            early_stop_patience: Some(10),
            adam: AdamConfig::default(),
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Every problem with the configuration, each naming its field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive, got {v}"));
            }
        };
        positive("alpha", self.alpha);
        positive("learning_rate", self.learning_rate);
        positive("floor", self.floor);
        positive("adam.eps", self.adam.eps);
        positive("bn_eps", self.arch.bn_eps);
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            out.push(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.batch_size < 2 {
            out.push(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.arch.hidden == 0 {
            out.push("hidden must be positive".into());
        }
        if self.arch.embed_dim == 0 {
            out.push("embed_dim must be positive".into());
        }
        if !(self.arch.keep_prob > 0.0 && self.arch.keep_prob <= 1.0) {
            out.push(format!("keep_prob must be in (0, 1], got {}", self.arch.keep_prob));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) {
            out.push(format!("adam.beta1 must be in [0, 1), got {}", self.adam.beta1));
        }
        if !(0.0..1.0).contains(&self.adam.beta2) {
            out.push(format!("adam.beta2 must be in [0, 1), got {}", self.adam.beta2));
        }
        if !(0.0..=1.0).contains(&self.arch.bn_momentum) {
            out.push(format!("bn_momentum must be in [0, 1], got {}", self.arch.bn_momentum));
        }
        if self.floor >= self.alpha {
            out.push(format!("floor ({}) must be below alpha ({})", self.floor, self.alpha));
        }
        if self.early_stop_patience == Some(0) {
            out.push("early_stop_patience must be positive when set".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// One Adam step on a flat parameter. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    name: &str,
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    if param.len() != grad.len() || m.len() != grad.len() || v.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_update",
            detail: format!("{name}: {} params, {} grads", param.len(), grad.len()),
        });
    }
    if step == 0 {
        return Err(Error::InvalidArgument("adam step counts from 1".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("gradient of {name} at index {i}"),
        });
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam moments for every trainable parameter of a model.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<Slot, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn apply(&mut self, model: &mut ModelParams, grads: &BTreeMap<Slot, Tensor>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let trainable: Vec<Slot> = model.params().map(|(s, _)| s).filter(|s| model.trainable(*s)).collect();
        for (slot, param) in model.params_mut() {
            if !trainable.contains(&slot) {
                continue;
            }
            let Some(g) = grads.get(&slot) else { continue };
            let (m, v) = self
                .moments
                .entry(slot)
                .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
            adam_update(slot.name(), param.data_mut(), g.data(), m, v, lr, cfg, self.step)?;
        }
        Ok(())
    }
}

/// Prior for one document: the label-dependent γ for aligned variants, the
/// symmetric α prior otherwise.
pub fn document_prior(
    variant: Variant,
    topics: &TopicLabelVector,
    doc: &BowDoc,
    alpha: f64,
    floor: f64,
) -> Result<DirichletParams> {
    if variant.aligned() {
        let ind = build_indicator(topics, &doc.labels).map_err(|e| match e {
            Error::Unrepresentable { reason, .. } => Error::Unrepresentable {
                doc: doc.id.clone(),
                reason,
            },
            other => other,
        })?;
        expert_prior(alpha, &ind, floor)
    } else {
        DirichletParams::symmetric(alpha, topics.num_topics(), floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    ZeroEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Batch means of the training-loss components.
    pub kl: f64,
    pub doc_nll: f64,
    pub auth_nll: f64,
    /// Mean eval-mode posterior mass on floored prior coordinates, over the
    /// training documents. Only for aligned variants.
    pub disallowed_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub seed: u64,
    pub num_topics: usize,
    pub train_docs: usize,
    pub val_docs: usize,
    /// Documents left out because none of their tokens is in the vocabulary.
    pub skipped_docs: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    /// `"best_validation"` or `"last_epoch"` (no validation split).
    pub checkpoint: String,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,kl,doc_nll,auth_nll";

    pub fn csv_line(r: &EpochRecord) -> String {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", r.epoch, r.train_loss, val, r.kl, r.doc_nll, r.auth_nll)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.epochs {
            writeln!(w, "{}", Self::csv_line(r))?;
        }
        Ok(())
    }
}

/// Data for [`train_model`]. `topics` fixes K (and, for aligned variants, the
/// topic labels).
pub struct TrainData<'d> {
    pub train: &'d BowCorpus,
    pub val: Option<&'d BowCorpus>,
    pub topics: &'d TopicLabelVector,
    pub word_embeddings: Option<&'d Tensor>,
}

/// Documents with at least one in-vocabulary token, plus their priors.
struct Prepared<'d> {
    docs: Vec<&'d BowDoc>,
    priors: Vec<Vec<f64>>,
    zero: Vec<Vec<bool>>,
}

fn prepare<'d>(
    corpus: &'d BowCorpus,
    variant: Variant,
    topics: &TopicLabelVector,
    cfg: &TrainConfig,
    skipped: &mut Vec<String>,
) -> Result<Prepared<'d>> {
    let mut out = Prepared {
        docs: Vec::new(),
        priors: Vec::new(),
        zero: Vec::new(),
    };
    for doc in &corpus.docs {
        if doc.is_empty() && !variant.dense_input() {
            skipped.push(doc.id.clone());
            continue;
        }
        let prior = document_prior(variant, topics, doc, cfg.alpha, cfg.floor)?;
        out.zero.push(prior.structural_zero().to_vec());
        out.priors.push(prior.concentration().to_vec());
        out.docs.push(doc);
    }
    Ok(out)
}

fn model_dims(variant: Variant, corpus: &BowCorpus, k: usize) -> Result<Dims> {
    let input_dim = if variant.dense_input() {
        corpus.dense_dim().ok_or_else(|| Error::Unsupported {
            variant: variant.to_string(),
            what: "a corpus without dense document features".into(),
        })?
    } else {
        corpus.vocab_size
    };
    Ok(Dims {
        input_dim,
        vocab_size: corpus.vocab_size,
        num_topics: k,
        num_authors: corpus.num_authors,
    })
}

/// Architecture with the encoder shift resolved against the prior.
pub fn resolved_arch(cfg: &TrainConfig) -> ArchConfig {
    let mut arch = cfg.arch.clone();
    if arch.encoder_shift_init.is_none() {
        arch.encoder_shift_init = Some(crate::model::inverse_softplus(cfg.alpha));
    }
    arch
}

/// Batches over a shuffled order; a trailing singleton joins the batch before
/// it so that batch norm never sees a single row.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(batch_size).map(|s| s..(s + batch_size).min(n)).collect();
    if out.len() > 1 && out.last().map(|r| r.len()) == Some(1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// Shuffled training order for one epoch; a pure function of (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mix = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn prior_batch(p: &Prepared<'_>, idx: &[usize], k: usize) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * k);
    for &i in idx {
        data.extend_from_slice(&p.priors[i]);
    }
    Tensor::from_vec(&[idx.len(), k], data)
}

struct BatchLoss {
    total: f64,
    doc_nll: f64,
    auth_nll: f64,
    kl: f64,
}

fn check_finite(batch: usize, parts: &[(&str, f64)]) -> Result<()> {
    for (name, v) in parts {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                location: format!("{name} term of batch {batch}"),
            });
        }
    }
    Ok(())
}

fn mean(t: &Tensor) -> f64 {
    t.sum() / t.len().max(1) as f64
}

/// One optimizer step. Returns the batch-mean loss components.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut ModelParams,
    adam: &mut AdamState,
    prepared: &Prepared<'_>,
    idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    batch_no: usize,
) -> Result<BatchLoss> {
    let docs: Vec<&BowDoc> = idx.iter().map(|&i| prepared.docs[i]).collect();
    let input = model.input_batch(&docs)?;
    let counts = count_batch(&docs, model.dims.vocab_size);
    let authors = model
        .variant
        .has_authors()
        .then(|| author_batch(&docs, model.dims.num_authors));
    let prior = prior_batch(prepared, idx, model.dims.num_topics);

    let mut bn = Vec::new();
    let (loss, grads) = {
        let mut g = Graph::new();
        let x = g.constant(&input);
        let fwd = model.forward(&mut g, x, true, LatentMode::Sample, rng, &mut bn)?;
        let lv = objective(&mut g, &fwd, counts, authors, prior, cfg.beta)?;
        let loss = BatchLoss {
            total: g.value(lv.total).item(),
            doc_nll: mean(g.value(lv.doc_nll)),
            auth_nll: lv.author_nll.map(|v| mean(g.value(v))).unwrap_or(0.0),
            kl: mean(g.value(lv.kl)),
        };
        check_finite(
            batch_no,
            &[("doc_nll", loss.doc_nll), ("auth_nll", loss.auth_nll), ("kl", loss.kl), ("total", loss.total)],
        )?;
        let grads = g.backward(lv.total)?;
        (loss, model.param_gradients(&grads))
    };
    model.apply_bn_updates(&bn);
    adam.apply(model, &grads, cfg.learning_rate, &cfg.adam)?;
    Ok(loss)
}

/// Eval-mode loss with the posterior mean as `z`, averaged over documents.
pub fn evaluation_loss(model: &ModelParams, docs: &[&BowDoc], priors: &[Vec<f64>], beta: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let k = model.dims.num_topics;
    for (chunk, pchunk) in docs.chunks(256).zip(priors.chunks(256)) {
        let input = model.input_batch(chunk)?;
        let counts = count_batch(chunk, model.dims.vocab_size);
        let authors = model
            .variant
            .has_authors()
            .then(|| author_batch(chunk, model.dims.num_authors));
        let prior = Tensor::from_vec(&[chunk.len(), k], pchunk.concat());
        let mut g = Graph::new();
        let x = g.constant(&input);
        let fwd = model.forward(&mut g, x, false, LatentMode::Mean, &mut rng, &mut Vec::new())?;
        let lv = objective(&mut g, &fwd, counts, authors, prior, beta)?;
        total += g.value(lv.total).item() * chunk.len() as f64;
    }
    Ok(total / docs.len().max(1) as f64)
}

fn disallowed_mass(model: &ModelParams, prepared: &Prepared<'_>) -> Result<f64> {
    let mut total = 0.0;
    let mut start = 0;
    for chunk in prepared.docs.chunks(512) {
        let input = model.input_batch(chunk)?;
        let alpha = model.encode(&input, false, 0)?;
        for r in 0..alpha.rows() {
            let row = alpha.row(r);
            let sum: f64 = row.iter().sum();
            let zero = &prepared.zero[start + r];
            total += row.iter().zip(zero).filter(|(_, z)| **z).map(|(a, _)| a).sum::<f64>() / sum;
        }
        start += chunk.len();
    }
    Ok(total / prepared.docs.len().max(1) as f64)
}

/// Trains `variant` and returns the best-validation model (the final one when
/// there is no validation split) together with the per-epoch report.
pub fn train_model(data: &TrainData<'_>, variant: Variant, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let k = data.topics.num_topics();
    let mut skipped = Vec::new();
    let train = prepare(data.train, variant, data.topics, cfg, &mut skipped)?;
    for id in &skipped {
        log::warn!("skipping document {id:?}: no in-vocabulary tokens");
    }
    if train.docs.len() < 2 {
        return Err(Error::CorpusTooSmall(format!(
            "training needs at least 2 non-empty documents, got {}",
            train.docs.len()
        )));
    }
    let mut val_skipped = Vec::new();
    let val = match data.val {
        Some(v) => Some(prepare(v, variant, data.topics, cfg, &mut val_skipped)?).filter(|p| !p.docs.is_empty()),
        None => None,
    };

    let dims = model_dims(variant, data.train, k)?;
    let mut model = ModelParams::init(variant, dims, resolved_arch(cfg), data.word_embeddings, cfg.seed)?;
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut report = TrainReport {
        variant,
        seed: cfg.seed,
        num_topics: k,
        train_docs: train.docs.len(),
        val_docs: val.as_ref().map(|v| v.docs.len()).unwrap_or(0),
        skipped_docs: skipped,
        epochs: Vec::new(),
        checkpoint: if val.is_some() { "best_validation" } else { "last_epoch" }.into(),
        best_epoch: None,
        stop_reason: if cfg.max_epochs == 0 { StopReason::ZeroEpochs } else { StopReason::MaxEpochs },
        wall_clock_seconds: 0.0,
    };
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0;
    let mut batch_no = 0;

    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(train.docs.len(), cfg.seed, epoch);
        let (mut tot, mut doc, mut auth, mut kl, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for range in batch_ranges(order.len(), cfg.batch_size) {
            let idx = &order[range];
            let l = train_step(&mut model, &mut adam, &train, idx, cfg, &mut rng, batch_no)?;
            batch_no += 1;
            let w = idx.len() as f64;
            tot += l.total * w;
            doc += l.doc_nll * w;
            auth += l.auth_nll * w;
            kl += l.kl * w;
            n += w;
        }
        let val_loss = match &val {
            Some(v) => Some(evaluation_loss(&model, &v.docs, &v.priors, cfg.beta)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: tot / n,
            val_loss,
            kl: kl / n,
            doc_nll: doc / n,
            auth_nll: auth / n,
            disallowed_mass: if variant.aligned() { Some(disallowed_mass(&model, &train)?) } else { None },
        };
        log::info!("{}", TrainReport::csv_line(&record));
        report.epochs.push(record);

        if let Some(vl) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, model.clone()));
                report.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
                    report.stop_reason = StopReason::EarlyStopping;
                    break;
                }
            }
        } else {
            report.best_epoch = Some(epoch);
        }
    }
    if let Some((_, m)) = best {
        model = m;
    }
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((model, report))
}
