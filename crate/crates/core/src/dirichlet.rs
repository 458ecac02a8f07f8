//! Dirichlet distributions: sampling, KL divergence and pathwise gradients.
//!
//! Draws are generated as normalized Gamma(αₖ, 1) variables, kept in log
//! space. Gradients of a draw with respect to the concentrations use implicit
//! reparameterization of each Gamma coordinate (see
//! [`special::dlog_gamma_draw_dshape`]).

use rand::Rng;
use rand_distr::{Open01, StandardNormal};

use crate::error::{Error, Result};
use crate::special::{self, digamma, ln_gamma, trigamma};

/// Default lower bound used in place of structural zeros.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Concentration parameters of a Dirichlet distribution.
///
/// `structural_zero[k]` marks coordinates that were requested as exactly zero
/// and have been clamped to `floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    concentration: Vec<f64>,
    structural_zero: Vec<bool>,
    floor: f64,
}

impl DirichletParams {
    pub fn new(concentration: Vec<f64>, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "floor must be positive, got {floor}"
            )));
        }
        if concentration.is_empty() {
            return Err(Error::InvalidArgument("empty concentration vector".into()));
        }
        if let Some(bad) = concentration
            .iter()
            .find(|c| !(c.is_finite() && **c >= 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "concentration {bad} is not a finite nonnegative value"
            )));
        }
        let structural_zero = concentration.iter().map(|&c| c < floor).collect();
        let concentration = concentration.into_iter().map(|c| c.max(floor)).collect();
        Ok(DirichletParams {
            concentration,
            structural_zero,
            floor,
        })
    }

    /// Symmetric Dirichlet(α, …, α) over `k` topics.
    pub fn symmetric(alpha: f64, k: usize, floor: f64) -> Result<Self> {
        DirichletParams::new(vec![alpha; k], floor)
    }

    pub fn dim(&self) -> usize {
        self.concentration.len()
    }

    /// Effective concentrations (structural zeros replaced by the floor).
    pub fn concentration(&self) -> &[f64] {
        &self.concentration
    }

    pub fn structural_zero(&self) -> &[bool] {
        &self.structural_zero
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn mean(&self) -> Vec<f64> {
        let total: f64 = self.concentration.iter().sum();
        self.concentration.iter().map(|c| c / total).collect()
    }
}

/// A point on the simplex together with the log-Gamma draws behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexSample {
    pub values: Vec<f64>,
    pub log_gammas: Vec<f64>,
}

/// Marsaglia–Tsang squeeze/rejection for shape ≥ 1, with the
/// `G(a) = G(a+1) · U^{1/a}` boost below 1. Returns the log of the draw.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.sample(Open01);
        return sample_log_gamma(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.sample(Open01);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return (d * v).ln();
        }
    }
}

/// Softmax of log-Gamma draws, i.e. the normalized Gamma vector.
pub fn normalize_log_gammas(log_gammas: &[f64]) -> Vec<f64> {
    let max = log_gammas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_gammas.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sample<R: Rng + ?Sized>(params: &DirichletParams, rng: &mut R) -> SimplexSample {
    if params.dim() == 1 {
        return SimplexSample {
            values: vec![1.0],
            log_gammas: vec![sample_log_gamma(params.concentration[0], rng)],
        };
    }
    let log_gammas: Vec<f64> = params
        .concentration
        .iter()
        .map(|&a| sample_log_gamma(a, rng))
        .collect();
    SimplexSample {
        values: normalize_log_gammas(&log_gammas),
        log_gammas,
    }
}

/// Deterministic draw from per-coordinate CDF levels (`ln u`), via the Gamma
/// quantile function. Used to hold the randomness fixed while the
/// concentrations move.
pub fn sample_from_levels(concentration: &[f64], log_levels: &[f64]) -> SimplexSample {
    let log_gammas: Vec<f64> = concentration
        .iter()
        .zip(log_levels)
        .map(|(&a, &lu)| special::ln_gamma_quantile(a, lu))
        .collect();
    SimplexSample {
        values: normalize_log_gammas(&log_gammas),
        log_gammas,
    }
}

fn kl_raw(a: &[f64], b: &[f64]) -> f64 {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let psi_sa = digamma(sa);
    let mut kl = ln_gamma(sa) - ln_gamma(sb);
    for (&ak, &bk) in a.iter().zip(b) {
        kl += ln_gamma(bk) - ln_gamma(ak) + (ak - bk) * (digamma(ak) - psi_sa);
    }
    kl
}

/// KL(Dir(a) ‖ Dir(b)) on raw concentration slices.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "dirichlet_kl",
            detail: format!("posterior has {} coordinates, prior {}", a.len(), b.len()),
        });
    }
    if a.iter().chain(b).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument(
            "KL needs strictly positive concentrations".into(),
        ));
    }
    Ok(kl_raw(a, b))
}

pub fn kl(posterior: &DirichletParams, prior: &DirichletParams) -> Result<f64> {
    kl_divergence(posterior.concentration(), prior.concentration())
}

/// ∂ KL(Dir(a) ‖ Dir(b)) / ∂a, written into `out`.
pub fn kl_grad_posterior(a: &[f64], b: &[f64], out: &mut [f64]) {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let common = (sa - sb) * trigamma(sa);
    for ((o, &ak), &bk) in out.iter_mut().zip(a).zip(b) {
        *o = (ak - bk) * trigamma(ak) - common;
    }
}

/// `d ln gₖ / d αₖ` for each coordinate of a draw.
pub fn dlog_gammas(concentration: &[f64], log_gammas: &[f64]) -> Vec<f64> {
    concentration
        .iter()
        .zip(log_gammas)
        .map(|(&a, &lg)| special::dlog_gamma_draw_dshape(a, lg))
        .collect()
}

/// Jacobian of a normalized-Gamma draw, one row per concentration:
/// `J[j][i] = ∂zᵢ/∂αⱼ`. Rows sum to zero since the draw stays on the simplex.
pub fn dsample_dconc(params: &DirichletParams, sample: &SimplexSample) -> Vec<Vec<f64>> {
    let k = params.dim();
    if k == 1 {
        return vec![vec![0.0]];
    }
    let dlg = dlog_gammas(params.concentration(), &sample.log_gammas);
    let z = &sample.values;
    (0..k)
        .map(|j| {
            (0..k)
                .map(|i| {
                    if z[j] == 0.0 {
                        return 0.0;
                    }
                    let delta = if i == j { 1.0 } else { 0.0 };
                    z[i] * (delta - z[j]) * dlg[j]
                })
                .collect()
        })
        .collect()
}

/// Backpropagates `upstream = ∂L/∂z` through a normalized-Gamma draw into
/// `∂L/∂α`. Coordinates whose value underflowed to zero contribute nothing.
pub fn backprop_sample(z: &[f64], dlg: &[f64], upstream: &[f64], out: &mut [f64]) {
    let weighted: f64 = upstream.iter().zip(z).map(|(g, zi)| g * zi).sum();
    for j in 0..z.len() {
        out[j] = if z[j] == 0.0 || z.len() == 1 {
            0.0
        } else {
            dlg[j] * z[j] * (upstream[j] - weighted)
        };
    }
}

/// Logistic-normal (Laplace) approximation of Dir(α): mean and variance of
/// the softmax-basis Gaussian.
pub fn laplace_moments(alpha: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = alpha.len() as f64;
    let mean_log: f64 = alpha.iter().map(|a| a.ln()).sum::<f64>() / k;
    let inv_sum: f64 = alpha.iter().map(|a| 1.0 / a).sum();
    let mu = alpha.iter().map(|a| a.ln() - mean_log).collect();
    let var = alpha
        .iter()
        .map(|a| (1.0 / a) * (1.0 - 2.0 / k) + inv_sum / (k * k))
        .collect();
    (mu, var)
}
