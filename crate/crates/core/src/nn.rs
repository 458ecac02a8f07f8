//! A small reverse-mode autodiff tape over [`Tensor`] values.
//!
//! The tape records each operation with whatever it needs for its backward
//! rule. Parameters are borrowed, not copied, so building a graph over a large
//! model is cheap. Everything is single threaded and deterministic.

use std::borrow::Cow;

use rand::Rng;

use crate::dirichlet;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which draws feed the Dirichlet sampling node.
pub enum Noise<'r, R: Rng + ?Sized> {
    /// Fresh Gamma draws from the generator.
    Sample(&'r mut R),
    /// Fixed per-entry CDF levels (`ln u`), one per output coordinate.
    Levels(&'r Tensor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Normalized Gamma draws with implicit reparameterization gradients.
    #[default]
    Implicit,
    /// Logistic-normal approximation of the Dirichlet.
    Laplace,
}

enum Op {
    Input,
    Param(usize),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulT {
        a: Var,
        b: Var,
    },
    Relu(Var),
    Softplus(Var),
    ClampMin {
        x: Var,
        min: f64,
    },
    LogSoftmax(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        shift: Var,
        scale: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    DirichletSample {
        alpha: Var,
        dlg: Vec<f64>,
    },
    LaplaceSample {
        alpha: Var,
        eps: Vec<f64>,
        sigma: Vec<f64>,
    },
    WeightedNll {
        logp: Var,
        weights: Tensor,
    },
    DirichletKl {
        alpha: Var,
        prior: Tensor,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Mean(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::MatMulT { .. } => "matmul_t",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::ClampMin { .. } => "clamp_min",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Dropout { .. } => "dropout",
            Op::BatchNorm { .. } => "batch_norm",
            Op::DirichletSample { .. } => "dirichlet_sample",
            Op::LaplaceSample { .. } => "laplace_sample",
            Op::WeightedNll { .. } => "weighted_nll",
            Op::DirichletKl { .. } => "dirichlet_kl",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm node.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Running statistics and configuration of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(features: usize, cfg: &BatchNormConfig) -> Self {
        BatchNormState {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: cfg.momentum,
            eps: cfg.eps,
        }
    }

    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, v) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of the parameter registered under `id`, summed over all of
    /// its registrations.
    pub fn param(&self, id: usize) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; gradients with respect to it are still tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Input, true)
    }

    /// Constant that never receives a gradient (data, frozen weights).
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Input, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Input, false)
    }

    /// Trainable parameter, identified by `id` when reading gradients.
    pub fn param(&mut self, id: usize, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Param(id), true)
    }

    /// `x · Wᵀ + b` with `x: B×m`, `W: n×m`, `b: n`. Zero entries of `x` are
    /// skipped, which makes sparse bag-of-words inputs cheap.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, m) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.cols() != m || bv.len() != wv.rows() {
            return Err(shape_err(
                "affine",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let n = wv.rows();
        let mut out = vec![0.0; batch * n];
        let mut nz = Vec::with_capacity(m);
        for r in 0..batch {
            let row = xv.row(r);
            nz.clear();
            nz.extend(
                row.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, _)| j),
            );
            let orow = &mut out[r * n..(r + 1) * n];
            let wd = wv.data();
            for (i, o) in orow.iter_mut().enumerate() {
                let wrow = &wd[i * m..(i + 1) * m];
                let mut acc = bv.data()[i];
                for &j in &nz {
                    acc += row[j] * wrow[j];
                }
                *o = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Cow::Owned(Tensor::from_vec(&[batch, n], out)),
            Op::Affine { x, w, b },
            needs,
        ))
    }

    /// `a · b` for matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} · {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = av.matmul(bv);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul { a, b }, needs))
    }

    /// `a · bᵀ` for matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err(
                "matmul_t",
                format!("{:?} · {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let out = av.matmul_t(bv);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::MatMulT { a, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(Cow::Owned(out), Op::Relu(x), needs)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        let needs = self.needs(x);
        self.push(Cow::Owned(out), Op::Softplus(x), needs)
    }

    /// Elementwise `max(x, min)`; the gradient is blocked where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let out = self.value(x).map(|v| v.max(min));
        let needs = self.needs(x);
        self.push(Cow::Owned(out), Op::ClampMin { x, min }, needs)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..xv.rows() {
            log_softmax_row(xv.row(r), out.row_mut(r));
        }
        let needs = self.needs(x);
        self.push(Cow::Owned(out), Op::LogSoftmax(x), needs)
    }

    /// Inverted dropout: survivors are scaled by `1/keep_prob`. Identity when
    /// not training or when `keep_prob == 1`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        keep_prob: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep_prob must be in (0, 1], got {keep_prob}"
            )));
        }
        if !training || keep_prob == 1.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let scale = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < keep_prob {
                    scale
                } else {
                    0.0
                }
            })
            .collect();
        let out: Vec<f64> = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(xv.shape(), out);
        let needs = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::Dropout { x, mask }, needs))
    }

    /// Batch normalization over the batch axis of `x: B×n`, with a learnable
    /// per-feature shift and optional learnable scale. In training mode the
    /// batch statistics are returned so the caller can fold them into the
    /// running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        shift: Var,
        scale: Option<Var>,
        state: &BatchNormState,
        training: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (batch, n) = (xv.rows(), xv.cols());
        if self.value(shift).len() != n
            || scale.is_some_and(|s| self.value(s).len() != n)
            || state.running_mean.len() != n
        {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "input {:?}, features {}",
                    xv.shape(),
                    state.running_mean.len()
                ),
            ));
        }
        if batch == 0 {
            return Err(shape_err("batch_norm", "empty batch".into()));
        }
        let mut xhat = vec![0.0; batch * n];
        let mut inv_std = vec![0.0; n];
        let mut stats = None;
        if training {
            let mut mean = vec![0.0; n];
            let mut var = vec![0.0; n];
            for r in 0..batch {
                for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= batch as f64);
            for r in 0..batch {
                for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let biased: Vec<f64> = var.iter().map(|s| s / batch as f64).collect();
            for j in 0..n {
                inv_std[j] = 1.0 / (biased[j] + state.eps).sqrt();
            }
            for r in 0..batch {
                for j in 0..n {
                    xhat[r * n + j] = (xv.data()[r * n + j] - mean[j]) * inv_std[j];
                }
            }
            let unbiased = if batch > 1 {
                var.iter().map(|s| s / (batch - 1) as f64).collect()
            } else {
                biased
            };
            stats = Some(BatchStats {
                mean,
                var: unbiased,
            });
        } else {
            for (s, v) in inv_std.iter_mut().zip(&state.running_var) {
                *s = 1.0 / (v + state.eps).sqrt();
            }
            for r in 0..batch {
                for j in 0..n {
                    xhat[r * n + j] = (xv.data()[r * n + j] - state.running_mean[j]) * inv_std[j];
                }
            }
        }
        let shift_v = self.value(shift).data();
        let scale_v = scale.map(|s| self.value(s).data());
        let mut out = vec![0.0; batch * n];
        for r in 0..batch {
            for j in 0..n {
                let g = scale_v.map_or(1.0, |s| s[j]);
                out[r * n + j] = xhat[r * n + j] * g + shift_v[j];
            }
        }
        let out = Tensor::from_vec(&[batch, n], out);
        let needs = self.needs(x) || self.needs(shift) || scale.is_some_and(|s| self.needs(s));
        let v = self.push(
            Cow::Owned(out),
            Op::BatchNorm {
                x,
                shift,
                scale,
                xhat,
                inv_std,
                training,
            },
            needs,
        );
        Ok((v, stats))
    }

    /// Draws `z ~ Dir(alpha)` row by row.
    pub fn dirichlet_sample<R: Rng + ?Sized>(
        &mut self,
        alpha: Var,
        noise: Noise<'_, R>,
    ) -> Result<Var> {
        let av = self.value(alpha);
        let (batch, k) = (av.rows(), av.cols());
        let mut z = Tensor::zeros(&[batch, k]);
        let mut dlg = vec![0.0; batch * k];
        let mut rng_noise = noise;
        for r in 0..batch {
            let conc = av.row(r);
            if conc.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
                return Err(Error::NonFinite {
                    location: format!("dirichlet_sample: concentration row {r} = {conc:?}"),
                });
            }
            let draw = match &mut rng_noise {
                Noise::Sample(rng) => {
                    let lg: Vec<f64> = conc
                        .iter()
                        .map(|&a| dirichlet::sample_log_gamma(a, *rng))
                        .collect();
                    dirichlet::SimplexSample {
                        values: dirichlet::normalize_log_gammas(&lg),
                        log_gammas: lg,
                    }
                }
                Noise::Levels(levels) => {
                    if levels.shape() != av.shape() {
                        return Err(shape_err(
                            "dirichlet_sample",
                            format!("levels {:?} vs {:?}", levels.shape(), av.shape()),
                        ));
                    }
                    dirichlet::sample_from_levels(conc, levels.row(r))
                }
            };
            z.row_mut(r).copy_from_slice(&draw.values);
            let d = dirichlet::dlog_gammas(conc, &draw.log_gammas);
            dlg[r * k..(r + 1) * k].copy_from_slice(&d);
        }
        let needs = self.needs(alpha);
        Ok(self.push(Cow::Owned(z), Op::DirichletSample { alpha, dlg }, needs))
    }

    /// Logistic-normal approximation to a Dirichlet draw.
    pub fn laplace_sample<R: Rng + ?Sized>(&mut self, alpha: Var, rng: &mut R) -> Var {
        let av = self.value(alpha);
        let (batch, k) = (av.rows(), av.cols());
        let mut z = Tensor::zeros(&[batch, k]);
        let mut eps = vec![0.0; batch * k];
        let mut sigma = vec![0.0; batch * k];
        for r in 0..batch {
            let (mu, var) = dirichlet::laplace_moments(av.row(r));
            let mut h = vec![0.0; k];
            for j in 0..k {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                eps[r * k + j] = e;
                sigma[r * k + j] = var[j].sqrt();
                h[j] = mu[j] + sigma[r * k + j] * e;
            }
            let mut lz = vec![0.0; k];
            log_softmax_row(&h, &mut lz);
            for (o, l) in z.row_mut(r).iter_mut().zip(lz) {
                *o = l.exp();
            }
        }
        let needs = self.needs(alpha);
        self.push(
            Cow::Owned(z),
            Op::LaplaceSample { alpha, eps, sigma },
            needs,
        )
    }

    /// Per-row `−Σⱼ weights[r][j] · logp[r][j]`, shape `B`.
    pub fn weighted_nll(&mut self, logp: Var, weights: Tensor) -> Result<Var> {
        let lv = self.value(logp);
        if lv.shape() != weights.shape() {
            return Err(shape_err(
                "weighted_nll",
                format!("{:?} vs {:?}", lv.shape(), weights.shape()),
            ));
        }
        let out: Vec<f64> = (0..lv.rows())
            .map(|r| -dot(weights.row(r), lv.row(r)))
            .collect();
        let needs = self.needs(logp);
        Ok(self.push(
            Cow::Owned(Tensor::from_vec(&[out.len()], out)),
            Op::WeightedNll { logp, weights },
            needs,
        ))
    }

    /// Per-row KL(Dir(alpha[r]) ‖ Dir(prior[r])), shape `B`.
    pub fn dirichlet_kl(&mut self, alpha: Var, prior: Tensor) -> Result<Var> {
        let av = self.value(alpha);
        if av.shape() != prior.shape() {
            return Err(shape_err(
                "dirichlet_kl",
                format!("{:?} vs {:?}", av.shape(), prior.shape()),
            ));
        }
        let mut out = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            out.push(dirichlet::kl_divergence(av.row(r), prior.row(r))?);
        }
        let needs = self.needs(alpha);
        Ok(self.push(
            Cow::Owned(Tensor::from_vec(&[out.len()], out)),
            Op::DirichletKl { alpha, prior },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(av.shape(), out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(Cow::Owned(out), Op::Scale(x, c), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / xv.len() as f64);
        let needs = self.needs(x);
        self.push(Cow::Owned(out), Op::Mean(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(Cow::Owned(out), Op::Sum(x), needs)
    }

    /// Reverse sweep from the scalar `loss`. Gradients of values used more
    /// than once are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        if !self.needs(loss) {
            return Err(Error::Detached {
                op: self.nodes[loss.0].op.name(),
                detail: "loss has no path to any parameter or input".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, m, n) = (xv.rows(), xv.cols(), wv.rows());
                    if self.needs(*b) {
                        let mut gb = vec![0.0; n];
                        for r in 0..batch {
                            for (a, v) in gb.iter_mut().zip(g.row(r)) {
                                *a += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::from_vec(self.value(*b).shape(), gb));
                    }
                    if self.needs(*w) {
                        let mut gw = vec![0.0; n * m];
                        for r in 0..batch {
                            let xr = xv.row(r);
                            let nz: Vec<usize> = (0..m).filter(|&j| xr[j] != 0.0).collect();
                            for (i, &gi) in g.row(r).iter().enumerate() {
                                if gi == 0.0 {
                                    continue;
                                }
                                let row = &mut gw[i * m..(i + 1) * m];
                                for &j in &nz {
                                    row[j] += gi * xr[j];
                                }
                            }
                        }
                        accumulate(&mut grads, *w, Tensor::from_vec(wv.shape(), gw));
                    }
                    if self.needs(*x) {
                        let mut gx = vec![0.0; batch * m];
                        for r in 0..batch {
                            let gxr = &mut gx[r * m..(r + 1) * m];
                            for (i, &gi) in g.row(r).iter().enumerate() {
                                if gi == 0.0 {
                                    continue;
                                }
                                for (a, wv) in gxr.iter_mut().zip(wv.row(i)) {
                                    *a += gi * wv;
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), gx));
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.matmul_t(bv));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, av.transpose().matmul(&g));
                    }
                }
                Op::MatMulT { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.matmul(bv));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.transpose().matmul(av));
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let gx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), gx));
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x);
                    let gx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, v)| g * sigmoid(*v))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), gx));
                }
                Op::ClampMin { x, min } => {
                    let xv = self.value(*x);
                    let gx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, v)| if *v >= *min { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), gx));
                }
                Op::LogSoftmax(x) => {
                    let mut gx = Tensor::zeros(out.shape());
                    for r in 0..out.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        for ((o, gi), l) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(out.row(r)) {
                            *o = gi - l.exp() * gs;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    let gx: Vec<f64> = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(out.shape(), gx));
                }
                Op::BatchNorm {
                    x,
                    shift,
                    scale,
                    xhat,
                    inv_std,
                    training,
                } => {
                    let (batch, n) = (out.rows(), out.cols());
                    if self.needs(*shift) {
                        let mut gs = vec![0.0; n];
                        for r in 0..batch {
                            for (a, v) in gs.iter_mut().zip(g.row(r)) {
                                *a += v;
                            }
                        }
                        accumulate(
                            &mut grads,
                            *shift,
                            Tensor::from_vec(self.value(*shift).shape(), gs),
                        );
                    }
                    let gamma: Vec<f64> = match scale {
                        Some(s) => self.value(*s).data().to_vec(),
                        None => vec![1.0; n],
                    };
                    if let Some(s) = scale {
                        if self.needs(*s) {
                            let mut gsc = vec![0.0; n];
                            for r in 0..batch {
                                for j in 0..n {
                                    gsc[j] += g.data()[r * n + j] * xhat[r * n + j];
                                }
                            }
                            accumulate(
                                &mut grads,
                                *s,
                                Tensor::from_vec(self.value(*s).shape(), gsc),
                            );
                        }
                    }
                    if self.needs(*x) {
                        let mut gx = vec![0.0; batch * n];
                        if *training {
                            let bf = batch as f64;
                            for j in 0..n {
                                let mut sum_d = 0.0;
                                let mut sum_dx = 0.0;
                                for r in 0..batch {
                                    let d = g.data()[r * n + j] * gamma[j];
                                    sum_d += d;
                                    sum_dx += d * xhat[r * n + j];
                                }
                                for r in 0..batch {
                                    let d = g.data()[r * n + j] * gamma[j];
                                    gx[r * n + j] = inv_std[j] / bf
                                        * (bf * d - sum_d - xhat[r * n + j] * sum_dx);
                                }
                            }
                        } else {
                            for r in 0..batch {
                                for j in 0..n {
                                    gx[r * n + j] = g.data()[r * n + j] * gamma[j] * inv_std[j];
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(out.shape(), gx));
                    }
                }
                Op::DirichletSample { alpha, dlg } => {
                    let k = out.cols();
                    let mut ga = Tensor::zeros(out.shape());
                    for r in 0..out.rows() {
                        dirichlet::backprop_sample(
                            out.row(r),
                            &dlg[r * k..(r + 1) * k],
                            g.row(r),
                            ga.row_mut(r),
                        );
                    }
                    accumulate(&mut grads, *alpha, ga);
                }
                Op::LaplaceSample { alpha, eps, sigma } => {
                    let av = self.value(*alpha);
                    let k = out.cols();
                    let kf = k as f64;
                    let mut ga = Tensor::zeros(av.shape());
                    for r in 0..out.rows() {
                        let z = out.row(r);
                        let a = av.row(r);
                        let weighted: f64 = g.row(r).iter().zip(z).map(|(g, z)| g * z).sum();
                        let gh: Vec<f64> =
                            (0..k).map(|j| z[j] * (g.row(r)[j] - weighted)).collect();
                        let gh_sum: f64 = gh.iter().sum();
                        let cross: f64 = (0..k)
                            .map(|j| gh[j] * eps[r * k + j] / (2.0 * sigma[r * k + j]))
                            .sum();
                        for j in 0..k {
                            let e = eps[r * k + j];
                            let s = sigma[r * k + j];
                            let dmu = gh[j] / a[j] - gh_sum / (kf * a[j]);
                            let dsig_diag =
                                gh[j] * e * (-(1.0 - 2.0 / kf) / (a[j] * a[j])) / (2.0 * s);
                            let dsig_common = cross * (-1.0 / (kf * kf * a[j] * a[j]));
                            ga.row_mut(r)[j] = dmu + dsig_diag + dsig_common;
                        }
                    }
                    accumulate(&mut grads, *alpha, ga);
                }
                Op::WeightedNll { logp, weights } => {
                    let mut gl = Tensor::zeros(weights.shape());
                    for r in 0..weights.rows() {
                        let gr = g.data()[r];
                        for (o, w) in gl.row_mut(r).iter_mut().zip(weights.row(r)) {
                            *o = -gr * w;
                        }
                    }
                    accumulate(&mut grads, *logp, gl);
                }
                Op::DirichletKl { alpha, prior } => {
                    let av = self.value(*alpha);
                    let mut ga = Tensor::zeros(av.shape());
                    for r in 0..av.rows() {
                        let gr = g.data()[r];
                        dirichlet::kl_grad_posterior(av.row(r), prior.row(r), ga.row_mut(r));
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                    }
                    accumulate(&mut grads, *alpha, ga);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g.map(|v| v * c)),
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::full(xv.shape(), g.item() / xv.len() as f64),
                    );
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), g.item()));
                }
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}
