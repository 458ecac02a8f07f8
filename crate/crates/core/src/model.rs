//! Encoder, decoders and training objective of the Dirichlet-VAE topic models.
//!
//! Every variant shares one encoder:
//!
//! ```text
//! h     = ReLU(L1 · x + b1)
//! h'    = dropout(h, keep_prob)
//! alpha = Softplus(BatchNorm(L2 · h' + b2))
//! ```
//!
//! Text is reconstructed either by a linear decoder,
//! `LogSoftmax(BatchNorm(L3 · z + b3))`, or by an embedding decoder,
//! `LogSoftmax(BatchNorm(z · η · δᵀ))`. Author-aware variants add a second
//! head of the same shape over the author vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::BowDoc;
use crate::dirichlet;
use crate::error::{Error, Result};
use crate::nn::{BatchNormConfig, BatchNormState, BatchStats, Gradients, Graph, Noise, SamplerKind, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Unaligned Dirichlet VAE with a linear decoder.
    #[serde(rename = "dvae")]
    Dvae,
    /// Unaligned, embedding decoder.
    #[serde(rename = "etm")]
    Etm,
    /// Unaligned, dense document features as encoder input.
    #[serde(rename = "ctm")]
    Ctm,
    /// Label-aligned prior, linear decoder.
    #[serde(rename = "fantom_l")]
    FantomL,
    /// Author decoder, unaligned prior.
    #[serde(rename = "fantom_a")]
    FantomA,
    /// Label-aligned prior plus author decoder.
    #[serde(rename = "fantom")]
    Fantom,
    /// Label-aligned prior, author decoder, embedding decoders for both heads.
    #[serde(rename = "fantom_etm")]
    FantomEtm,
    /// Label-aligned prior, author decoder, dense-feature input.
    #[serde(rename = "fantom_ctm")]
    FantomCtm,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Dvae,
        Variant::Etm,
        Variant::Ctm,
        Variant::FantomL,
        Variant::FantomA,
        Variant::Fantom,
        Variant::FantomEtm,
        Variant::FantomCtm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dvae => "dvae",
            Variant::Etm => "etm",
            Variant::Ctm => "ctm",
            Variant::FantomL => "fantom_l",
            Variant::FantomA => "fantom_a",
            Variant::Fantom => "fantom",
            Variant::FantomEtm => "fantom_etm",
            Variant::FantomCtm => "fantom_ctm",
        }
    }

    /// Uses the label-dependent prior instead of the symmetric one.
    pub fn aligned(self) -> bool {
        matches!(self, Variant::FantomL | Variant::Fantom | Variant::FantomEtm | Variant::FantomCtm)
    }

    pub fn has_authors(self) -> bool {
        matches!(self, Variant::FantomA | Variant::Fantom | Variant::FantomEtm | Variant::FantomCtm)
    }

    pub fn embedding_decoder(self) -> bool {
        matches!(self, Variant::Etm | Variant::FantomEtm)
    }

    pub fn dense_input(self) -> bool {
        matches!(self, Variant::Ctm | Variant::FantomCtm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = if s == "ctm-input" { "ctm" } else { s };
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::InvalidArgument(format!("unknown variant {s:?}; valid variants: {}", valid.join(", ")))
        })
    }
}

/// Architecture settings independent of the data dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub keep_prob: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Learnable per-feature scale in the encoder batch norm.
    pub encoder_bn_scale: bool,
    /// Learnable per-feature scale in the batch norms feeding log-softmax
    /// heads. Shifts are always learned.
    pub decoder_bn_scale: bool,
    /// Initial encoder batch-norm shift. The trainer fills an unset value
    /// with `softplus⁻¹(alpha)`, so initial posteriors sit at the prior's
    /// scale; [`ModelParams::init`] treats unset as zero.
    pub encoder_shift_init: Option<f64>,
    /// Lower clamp on posterior concentrations.
    pub posterior_floor: f64,
    pub sampler: SamplerKind,
    pub freeze_word_embeddings: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: 512,
            embed_dim: 300,
            keep_prob: 0.25,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            encoder_bn_scale: true,
            decoder_bn_scale: false,
            encoder_shift_init: None,
            posterior_floor: dirichlet::DEFAULT_FLOOR,
            sampler: SamplerKind::Implicit,
            freeze_word_embeddings: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Encoder input width: vocabulary size, or dense feature width.
    pub input_dim: usize,
    pub vocab_size: usize,
    pub num_topics: usize,
    pub num_authors: usize,
}

/// Named parameter tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    EncL1Weight,
    EncL1Bias,
    EncL2Weight,
    EncL2Bias,
    EncBnShift,
    EncBnScale,
    DecWeight,
    DecBias,
    TopicEmbedding,
    WordEmbedding,
    DecBnShift,
    DecBnScale,
    AuthWeight,
    AuthBias,
    AuthorEmbedding,
    AuthBnShift,
    AuthBnScale,
}

impl Slot {
    pub const ALL: [Slot; 17] = [
        Slot::EncL1Weight,
        Slot::EncL1Bias,
        Slot::EncL2Weight,
        Slot::EncL2Bias,
        Slot::EncBnShift,
        Slot::EncBnScale,
        Slot::DecWeight,
        Slot::DecBias,
        Slot::TopicEmbedding,
        Slot::WordEmbedding,
        Slot::DecBnShift,
        Slot::DecBnScale,
        Slot::AuthWeight,
        Slot::AuthBias,
        Slot::AuthorEmbedding,
        Slot::AuthBnShift,
        Slot::AuthBnScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::EncL1Weight => "encoder.l1.weight",
            Slot::EncL1Bias => "encoder.l1.bias",
            Slot::EncL2Weight => "encoder.l2.weight",
            Slot::EncL2Bias => "encoder.l2.bias",
            Slot::EncBnShift => "encoder.bn.shift",
            Slot::EncBnScale => "encoder.bn.scale",
            Slot::DecWeight => "text_decoder.weight",
            Slot::DecBias => "text_decoder.bias",
            Slot::TopicEmbedding => "text_decoder.topic_embeddings",
            Slot::WordEmbedding => "text_decoder.word_embeddings",
            Slot::DecBnShift => "text_decoder.bn.shift",
            Slot::DecBnScale => "text_decoder.bn.scale",
            Slot::AuthWeight => "author_decoder.weight",
            Slot::AuthBias => "author_decoder.bias",
            Slot::AuthorEmbedding => "author_decoder.author_embeddings",
            Slot::AuthBnShift => "author_decoder.bn.shift",
            Slot::AuthBnScale => "author_decoder.bn.scale",
        }
    }

    pub(crate) fn id(self) -> usize {
        self as usize
    }

    fn from_name(name: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnLayer {
    Encoder,
    Text,
    Author,
}

impl BnLayer {
    fn prefix(self) -> &'static str {
        match self {
            BnLayer::Encoder => "encoder.bn",
            BnLayer::Text => "text_decoder.bn",
            BnLayer::Author => "author_decoder.bn",
        }
    }
}

/// All trainable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    pub dims: Dims,
    pub arch: ArchConfig,
    params: Vec<(Slot, Tensor)>,
    pub enc_bn: BatchNormState,
    pub text_bn: BatchNormState,
    pub author_bn: Option<BatchNormState>,
}

/// `x` with `softplus(x) = y`, for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect())
}

/// What the text and author heads reconstruct from.
#[derive(Clone, Copy)]
pub enum LatentMode<'t> {
    /// Fresh Dirichlet draws.
    Sample,
    /// Draws pinned to the given per-entry CDF levels.
    Levels(&'t Tensor),
    /// Posterior mean `alpha / sum(alpha)`; no gradient flows through it.
    Mean,
}

/// Handles into the graph built by [`ModelParams::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub alpha: Var,
    pub z: Var,
    pub doc_logp: Var,
    pub author_logp: Option<Var>,
}

/// Per-document loss pieces on the graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    /// Batch mean of `doc_nll + author_nll + beta * kl`.
    pub total: Var,
    pub doc_nll: Var,
    pub author_nll: Option<Var>,
    pub kl: Var,
}

/// Concrete values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub alpha: Tensor,
    pub z: Tensor,
    pub doc_logprobs: Tensor,
    pub author_logprobs: Option<Tensor>,
}

impl ModelParams {
    /// Fresh model with Glorot-uniform weights, zero biases and shifts, unit
    /// scales. `word_embeddings` (|V|×E) seeds the embedding decoder.
    pub fn init(variant: Variant, dims: Dims, arch: ArchConfig, word_embeddings: Option<&Tensor>, seed: u64) -> Result<Self> {
        if dims.num_topics == 0 || dims.vocab_size == 0 || dims.input_dim == 0 {
            return Err(Error::InvalidArgument(format!("degenerate model dimensions {dims:?}")));
        }
        if variant.has_authors() && dims.num_authors == 0 {
            return Err(Error::Unsupported {
                variant: variant.to_string(),
                what: "a corpus without authors".into(),
            });
        }
        if !(arch.keep_prob > 0.0 && arch.keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!("keep_prob must be in (0, 1], got {}", arch.keep_prob)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, v, h, e) = (dims.num_topics, dims.vocab_size, arch.hidden, arch.embed_dim);
        let mut params = vec![
            (Slot::EncL1Weight, glorot(&mut rng, h, dims.input_dim)),
            (Slot::EncL1Bias, Tensor::zeros(&[h])),
            (Slot::EncL2Weight, glorot(&mut rng, k, h)),
            (Slot::EncL2Bias, Tensor::zeros(&[k])),
            (Slot::EncBnShift, Tensor::full(&[k], arch.encoder_shift_init.unwrap_or(0.0))),
        ];
        if arch.encoder_bn_scale {
            params.push((Slot::EncBnScale, Tensor::full(&[k], 1.0)));
        }
        if variant.embedding_decoder() {
            let words = match word_embeddings {
                Some(w) => {
                    if w.shape() != [v, e] {
                        return Err(Error::ShapeMismatch {
                            op: "init",
                            detail: format!("word embeddings {:?}, expected [{v}, {e}]", w.shape()),
                        });
                    }
                    w.clone()
                }
                None => Tensor::from_vec(&[v, e], (0..v * e).map(|_| rng.random_range(-0.05..=0.05)).collect()),
            };
            params.push((Slot::TopicEmbedding, glorot(&mut rng, k, e)));
            params.push((Slot::WordEmbedding, words));
        } else {
            params.push((Slot::DecWeight, glorot(&mut rng, v, k)));
            params.push((Slot::DecBias, Tensor::zeros(&[v])));
        }
        params.push((Slot::DecBnShift, Tensor::zeros(&[v])));
        if arch.decoder_bn_scale {
            params.push((Slot::DecBnScale, Tensor::full(&[v], 1.0)));
        }
        let bn_cfg = BatchNormConfig {
            momentum: arch.bn_momentum,
            eps: arch.bn_eps,
        };
        let author_bn = if variant.has_authors() {
            let a = dims.num_authors;
            if variant.embedding_decoder() {
                params.push((
                    Slot::AuthorEmbedding,
                    Tensor::from_vec(&[a, e], (0..a * e).map(|_| rng.random_range(-0.05..=0.05)).collect()),
                ));
            } else {
                params.push((Slot::AuthWeight, glorot(&mut rng, a, k)));
                params.push((Slot::AuthBias, Tensor::zeros(&[a])));
            }
            params.push((Slot::AuthBnShift, Tensor::zeros(&[a])));
            if arch.decoder_bn_scale {
                params.push((Slot::AuthBnScale, Tensor::full(&[a], 1.0)));
            }
            Some(BatchNormState::new(a, &bn_cfg))
        } else {
            None
        };
        params.sort_by_key(|(s, _)| *s);
        Ok(ModelParams {
            variant,
            dims,
            enc_bn: BatchNormState::new(k, &bn_cfg),
            text_bn: BatchNormState::new(v, &bn_cfg),
            author_bn,
            arch,
            params,
        })
    }

    pub fn get(&self, slot: Slot) -> Option<&Tensor> {
        self.params.iter().find(|(s, _)| *s == slot).map(|(_, t)| t)
    }

    fn req(&self, slot: Slot) -> Result<&Tensor> {
        self.get(slot).ok_or_else(|| Error::Unsupported {
            variant: self.variant.to_string(),
            what: format!("parameter {}", slot.name()),
        })
    }

    pub fn get_mut(&mut self, slot: Slot) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(s, _)| *s == slot).map(|(_, t)| t)
    }

    /// Parameters in canonical order.
    pub fn params(&self) -> impl Iterator<Item = (Slot, &Tensor)> {
        self.params.iter().map(|(s, t)| (*s, t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (Slot, &mut Tensor)> {
        self.params.iter_mut().map(|(s, t)| (*s, t))
    }

    /// Whether `slot` is updated by the optimizer.
    pub fn trainable(&self, slot: Slot) -> bool {
        !(slot == Slot::WordEmbedding && self.arch.freeze_word_embeddings)
    }

    /// Gradient of every parameter that reached the loss in `grads`.
    pub fn param_gradients(&self, grads: &Gradients) -> BTreeMap<Slot, Tensor> {
        self.params().filter_map(|(s, _)| grads.param(s.id()).map(|t| (s, t))).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    fn var<'a>(&'a self, g: &mut Graph<'a>, slot: Slot) -> Result<Var> {
        let t = self.req(slot)?;
        Ok(if self.trainable(slot) { g.param(slot.id(), t) } else { g.constant(t) })
    }

    fn opt_var<'a>(&'a self, g: &mut Graph<'a>, slot: Slot) -> Option<Var> {
        self.get(slot).map(|t| if self.trainable(slot) { g.param(slot.id(), t) } else { g.constant(t) })
    }

    pub fn bn_state(&self, layer: BnLayer) -> Option<&BatchNormState> {
        match layer {
            BnLayer::Encoder => Some(&self.enc_bn),
            BnLayer::Text => Some(&self.text_bn),
            BnLayer::Author => self.author_bn.as_ref(),
        }
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(BnLayer, BatchStats)]) {
        for (layer, stats) in updates {
            match layer {
                BnLayer::Encoder => self.enc_bn.update(stats),
                BnLayer::Text => self.text_bn.update(stats),
                BnLayer::Author => {
                    if let Some(s) = &mut self.author_bn {
                        s.update(stats)
                    }
                }
            }
        }
    }

    /// Posterior concentrations for an input batch already on the graph.
    pub fn encode_graph<'a, R: Rng + ?Sized>(
        &'a self,
        g: &mut Graph<'a>,
        input: Var,
        training: bool,
        rng: &mut R,
        bn_updates: &mut Vec<(BnLayer, BatchStats)>,
    ) -> Result<Var> {
        let width = g.value(input).cols();
        if width != self.dims.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                detail: format!("input width {width}, encoder expects {}", self.dims.input_dim),
            });
        }
        let (w1, b1) = (self.var(g, Slot::EncL1Weight)?, self.var(g, Slot::EncL1Bias)?);
        let h = g.affine(input, w1, b1)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.arch.keep_prob, training, rng)?;
        let (w2, b2) = (self.var(g, Slot::EncL2Weight)?, self.var(g, Slot::EncL2Bias)?);
        let o = g.affine(h, w2, b2)?;
        let shift = self.var(g, Slot::EncBnShift)?;
        let scale = self.opt_var(g, Slot::EncBnScale);
        let (o, stats) = g.batch_norm(o, shift, scale, &self.enc_bn, training)?;
        if let Some(s) = stats {
            bn_updates.push((BnLayer::Encoder, s));
        }
        let alpha = g.softplus(o);
        let alpha = g.clamp_min(alpha, self.arch.posterior_floor);
        if !g.value(alpha).all_finite() {
            return Err(Error::NonFinite {
                location: "encoder output (softplus)".into(),
            });
        }
        Ok(alpha)
    }

    pub fn decode_doc_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        z: Var,
        training: bool,
        bn_updates: &mut Vec<(BnLayer, BatchStats)>,
    ) -> Result<Var> {
        let pre = if self.variant.embedding_decoder() {
            let topics = self.var(g, Slot::TopicEmbedding)?;
            let words = self.var(g, Slot::WordEmbedding)?;
            let ze = g.matmul(z, topics)?;
            g.matmul_t(ze, words)?
        } else {
            let (w, b) = (self.var(g, Slot::DecWeight)?, self.var(g, Slot::DecBias)?);
            g.affine(z, w, b)?
        };
        let shift = self.var(g, Slot::DecBnShift)?;
        let scale = self.opt_var(g, Slot::DecBnScale);
        let (x, stats) = g.batch_norm(pre, shift, scale, &self.text_bn, training)?;
        if let Some(s) = stats {
            bn_updates.push((BnLayer::Text, s));
        }
        Ok(g.log_softmax(x))
    }

    pub fn decode_author_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        z: Var,
        training: bool,
        bn_updates: &mut Vec<(BnLayer, BatchStats)>,
    ) -> Result<Var> {
        let Some(state) = &self.author_bn else {
            return Err(Error::Unsupported {
                variant: self.variant.to_string(),
                what: "author decoding".into(),
            });
        };
        let pre = if self.variant.embedding_decoder() {
            let topics = self.var(g, Slot::TopicEmbedding)?;
            let authors = self.var(g, Slot::AuthorEmbedding)?;
            let ze = g.matmul(z, topics)?;
            g.matmul_t(ze, authors)?
        } else {
            let (w, b) = (self.var(g, Slot::AuthWeight)?, self.var(g, Slot::AuthBias)?);
            g.affine(z, w, b)?
        };
        let shift = self.var(g, Slot::AuthBnShift)?;
        let scale = self.opt_var(g, Slot::AuthBnScale);
        let (x, stats) = g.batch_norm(pre, shift, scale, state, training)?;
        if let Some(s) = stats {
            bn_updates.push((BnLayer::Author, s));
        }
        Ok(g.log_softmax(x))
    }

    /// Full forward pass: encode, draw `z`, decode text (and authors).
    pub fn forward<'a, R: Rng + ?Sized>(
        &'a self,
        g: &mut Graph<'a>,
        input: Var,
        training: bool,
        latent: LatentMode<'a>,
        rng: &mut R,
        bn_updates: &mut Vec<(BnLayer, BatchStats)>,
    ) -> Result<ForwardVars> {
        let alpha = self.encode_graph(g, input, training, rng, bn_updates)?;
        let z = match latent {
            LatentMode::Mean => {
                let a = g.value(alpha);
                let mut z = a.clone();
                for r in 0..z.rows() {
                    let total: f64 = a.row(r).iter().sum();
                    z.row_mut(r).iter_mut().for_each(|v| *v /= total);
                }
                g.constant_owned(z)
            }
            LatentMode::Levels(levels) => g.dirichlet_sample::<R>(alpha, Noise::Levels(levels))?,
            LatentMode::Sample => match self.arch.sampler {
                SamplerKind::Implicit => g.dirichlet_sample(alpha, Noise::Sample(rng))?,
                SamplerKind::Laplace => g.laplace_sample(alpha, rng),
            },
        };
        let doc_logp = self.decode_doc_graph(g, z, training, bn_updates)?;
        let author_logp = if self.variant.has_authors() {
            Some(self.decode_author_graph(g, z, training, bn_updates)?)
        } else {
            None
        };
        Ok(ForwardVars {
            alpha,
            z,
            doc_logp,
            author_logp,
        })
    }

    /// Posterior concentrations for a batch (`B × input_dim`).
    pub fn encode(&self, input: &Tensor, training: bool, seed: u64) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = self.encode_graph(&mut g, x, training, &mut rng, &mut Vec::new())?;
        Ok(g.value(alpha).clone())
    }

    /// Word log-probabilities for a batch of topic proportions (`B × K`).
    pub fn decode_doc(&self, z: &Tensor, training: bool) -> Result<Tensor> {
        self.check_simplex(z)?;
        let mut g = Graph::new();
        let zv = g.constant(z);
        let out = self.decode_doc_graph(&mut g, zv, training, &mut Vec::new())?;
        Ok(g.value(out).clone())
    }

    /// Author log-probabilities for a batch of topic proportions.
    pub fn decode_author(&self, z: &Tensor, training: bool) -> Result<Tensor> {
        self.check_simplex(z)?;
        let mut g = Graph::new();
        let zv = g.constant(z);
        let out = self.decode_author_graph(&mut g, zv, training, &mut Vec::new())?;
        Ok(g.value(out).clone())
    }

    fn check_simplex(&self, z: &Tensor) -> Result<()> {
        if z.cols() != self.dims.num_topics {
            return Err(Error::ShapeMismatch {
                op: "decode",
                detail: format!("z has {} columns, model has {} topics", z.cols(), self.dims.num_topics),
            });
        }
        Ok(())
    }

    /// Eval-mode forward pass returning concrete values.
    pub fn infer(&self, input: &Tensor, latent: LatentMode<'_>, seed: u64) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vars = self.forward(&mut g, x, false, latent, &mut rng, &mut Vec::new())?;
        Ok(ForwardOutput {
            alpha: g.value(vars.alpha).clone(),
            z: g.value(vars.z).clone(),
            doc_logprobs: g.value(vars.doc_logp).clone(),
            author_logprobs: vars.author_logp.map(|v| g.value(v).clone()),
        })
    }

    /// Posterior-mean topic proportions for each document (eval mode).
    pub fn doc_topics(&self, docs: &[BowDoc]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(docs.len() * self.dims.num_topics);
        let refs: Vec<&BowDoc> = docs.iter().collect();
        for chunk in refs.chunks(512) {
            let input = self.input_batch(chunk)?;
            let alpha = self.encode(&input, false, 0)?;
            for r in 0..alpha.rows() {
                let total: f64 = alpha.row(r).iter().sum();
                rows.extend(alpha.row(r).iter().map(|a| a / total));
            }
        }
        Ok(Tensor::from_vec(&[docs.len(), self.dims.num_topics], rows))
    }

    /// Topic-word distributions: softmax of the eval-mode decoder response to
    /// each one-hot topic. Rows are on the simplex.
    pub fn topic_word_matrix(&self) -> Result<Tensor> {
        let eye = identity(self.dims.num_topics);
        Ok(self.decode_doc(&eye, false)?.map(f64::exp))
    }

    /// Topic-author distributions, built the same way from the author head.
    pub fn topic_author_matrix(&self) -> Result<Tensor> {
        let eye = identity(self.dims.num_topics);
        Ok(self.decode_author(&eye, false)?.map(f64::exp))
    }

    /// Encoder input rows for `docs`: raw counts, or dense features.
    pub fn input_batch(&self, docs: &[&BowDoc]) -> Result<Tensor> {
        if self.variant.dense_input() {
            dense_batch(docs, self.dims.input_dim)
        } else {
            Ok(count_batch(docs, self.dims.vocab_size))
        }
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let arrays = self.named_arrays();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            variant: self.variant,
            vocab_size: self.dims.vocab_size,
            num_topics: self.dims.num_topics,
            num_authors: self.dims.num_authors,
            hidden: self.arch.hidden,
            dims: self.dims,
            arch: self.arch.clone(),
            arrays: arrays
                .iter()
                .map(|(name, shape, _)| ArrayEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let io = |e: std::io::Error| Error::io("<checkpoint writer>", e);
        let json = serde_json::to_string(&header).map_err(|e| io(e.into()))?;
        w.write_all(json.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
        for (_, _, data) in &arrays {
            let mut buf = Vec::with_capacity(data.len() * 8);
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    fn named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .params
            .iter()
            .map(|(s, t)| (s.name().to_string(), t.shape().to_vec(), t.data().to_vec()))
            .collect();
        for layer in [BnLayer::Encoder, BnLayer::Text, BnLayer::Author] {
            if let Some(st) = self.bn_state(layer) {
                let n = st.running_mean.len();
                out.push((format!("{}.running_mean", layer.prefix()), vec![n], st.running_mean.clone()));
                out.push((format!("{}.running_var", layer.prefix()), vec![n], st.running_var.clone()));
            }
        }
        out
    }

    pub fn load<R: BufRead>(mut r: R, context: &str) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(context, e))?;
        let header: CheckpointHeader = serde_json::from_str(&line).map_err(|e| Error::Parse {
            context: context.to_string(),
            line: 1,
            message: e.to_string(),
        })?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                context: context.to_string(),
                line: 1,
                message: format!("unsupported checkpoint version {}", header.version),
            });
        }
        let mut model = ModelParams::init(header.variant, header.dims, header.arch.clone(), None, 0)?;
        let expected: BTreeSet<String> = model.named_arrays().into_iter().map(|(n, _, _)| n).collect();
        let listed: BTreeSet<String> = header.arrays.iter().map(|a| a.name.clone()).collect();
        if expected != listed {
            return Err(Error::Parse {
                context: context.to_string(),
                line: 1,
                message: format!("checkpoint arrays {listed:?} do not match variant layout {expected:?}"),
            });
        }
        for entry in &header.arrays {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|e| Error::io(context, e))?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            model.set_array(&entry.name, &entry.shape, data, context)?;
        }
        Ok(model)
    }

    fn set_array(&mut self, name: &str, shape: &[usize], data: Vec<f64>, context: &str) -> Result<()> {
        let bad = |msg: String| Error::Parse {
            context: context.to_string(),
            line: 1,
            message: msg,
        };
        if let Some(slot) = Slot::from_name(name) {
            let t = self.get_mut(slot).ok_or_else(|| bad(format!("unexpected array {name}")))?;
            if t.shape() != shape {
                return Err(bad(format!("array {name} has shape {shape:?}, expected {:?}", t.shape())));
            }
            *t = Tensor::from_vec(shape, data);
            return Ok(());
        }
        let (prefix, stat) = name.rsplit_once('.').ok_or_else(|| bad(format!("bad array name {name}")))?;
        let layer = [BnLayer::Encoder, BnLayer::Text, BnLayer::Author]
            .into_iter()
            .find(|l| l.prefix() == prefix)
            .ok_or_else(|| bad(format!("bad array name {name}")))?;
        let state = match layer {
            BnLayer::Encoder => &mut self.enc_bn,
            BnLayer::Text => &mut self.text_bn,
            BnLayer::Author => self.author_bn.as_mut().ok_or_else(|| bad(format!("unexpected array {name}")))?,
        };
        let target = match stat {
            "running_mean" => &mut state.running_mean,
            "running_var" => &mut state.running_var,
            _ => return Err(bad(format!("bad array name {name}"))),
        };
        if target.len() != data.len() {
            return Err(bad(format!("array {name} has {} values, expected {}", data.len(), target.len())));
        }
        *target = data;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    variant: Variant,
    #[serde(rename = "V")]
    vocab_size: usize,
    #[serde(rename = "K")]
    num_topics: usize,
    #[serde(rename = "A")]
    num_authors: usize,
    hidden: usize,
    dims: Dims,
    arch: ArchConfig,
    arrays: Vec<ArrayEntry>,
}

pub fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.set(i, i, 1.0);
    }
    t
}

/// Dense `B × V` word counts.
pub fn count_batch(docs: &[&BowDoc], vocab_size: usize) -> Tensor {
    let mut t = Tensor::zeros(&[docs.len(), vocab_size]);
    for (r, d) in docs.iter().enumerate() {
        let row = t.row_mut(r);
        for (&j, &c) in d.indices.iter().zip(&d.counts) {
            row[j as usize] = c as f64;
        }
    }
    t
}

/// Dense `B × |A|` author multi-hot rows.
pub fn author_batch(docs: &[&BowDoc], num_authors: usize) -> Tensor {
    let mut t = Tensor::zeros(&[docs.len(), num_authors]);
    for (r, d) in docs.iter().enumerate() {
        for &a in &d.authors {
            t.set(r, a as usize, 1.0);
        }
    }
    t
}

pub fn dense_batch(docs: &[&BowDoc], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(docs.len() * dim);
    for d in docs {
        match &d.dense {
            Some(f) if f.len() == dim => data.extend_from_slice(f),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "dense_batch",
                    detail: format!("document {:?} lacks a {dim}-dimensional feature vector", d.id),
                })
            }
        }
    }
    Ok(Tensor::from_vec(&[docs.len(), dim], data))
}

/// Builds the objective on the graph: per-document word NLL, author NLL
/// (when the model has an author head) and KL to `prior`, combined as
/// `mean(doc_nll + author_nll + beta * kl)`.
pub fn objective(
    g: &mut Graph<'_>,
    fwd: &ForwardVars,
    counts: Tensor,
    authors: Option<Tensor>,
    prior: Tensor,
    beta: f64,
) -> Result<LossVars> {
    let doc_nll = g.weighted_nll(fwd.doc_logp, counts)?;
    let author_nll = match (fwd.author_logp, authors) {
        (Some(lp), Some(a)) => Some(g.weighted_nll(lp, a)?),
        (None, None) => None,
        (Some(_), None) => {
            return Err(Error::ShapeMismatch {
                op: "objective",
                detail: "author head present but no author targets given".into(),
            })
        }
        (None, Some(_)) => {
            return Err(Error::ShapeMismatch {
                op: "objective",
                detail: "author targets given but model has no author head".into(),
            })
        }
    };
    let kl = g.dirichlet_kl(fwd.alpha, prior)?;
    let weighted_kl = g.scale(kl, beta);
    let mut per_doc = g.add(doc_nll, weighted_kl)?;
    if let Some(a) = author_nll {
        per_doc = g.add(per_doc, a)?;
    }
    let total = g.mean(per_doc);
    Ok(LossVars {
        total,
        doc_nll,
        author_nll,
        kl,
    })
}

/// Loss components of one document, evaluated on concrete values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub doc_nll: f64,
    pub author_nll: f64,
    pub kl: f64,
}

/// `−Σ x·log p(word) − Σ a·log p(author) + β·KL(α_p ‖ γ)` for one document.
/// `author_logprobs` may be omitted when `authors` is all zero.
pub fn loss_value(
    counts: &[f64],
    authors: &[f64],
    doc_logprobs: &[f64],
    author_logprobs: Option<&[f64]>,
    posterior: &dirichlet::DirichletParams,
    prior: &dirichlet::DirichletParams,
    beta: f64,
) -> Result<LossValue> {
    if counts.len() != doc_logprobs.len() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            detail: format!("{} counts vs {} word log-probs", counts.len(), doc_logprobs.len()),
        });
    }
    let doc_nll = -counts.iter().zip(doc_logprobs).map(|(x, l)| x * l).sum::<f64>();
    let author_nll = match author_logprobs {
        Some(lp) => {
            if lp.len() != authors.len() {
                return Err(Error::ShapeMismatch {
                    op: "loss",
                    detail: format!("{} authors vs {} author log-probs", authors.len(), lp.len()),
                });
            }
            -authors.iter().zip(lp).map(|(a, l)| a * l).sum::<f64>()
        }
        None if authors.iter().all(|a| *a == 0.0) => 0.0,
        None => {
            return Err(Error::ShapeMismatch {
                op: "loss",
                detail: "authors given without author log-probs".into(),
            })
        }
    };
    let kl = dirichlet::kl(posterior, prior)?;
    Ok(LossValue {
        total: doc_nll + author_nll + beta * kl,
        doc_nll,
        author_nll,
        kl,
    })
}
