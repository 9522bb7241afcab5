//! Loss functions and their adjoints.
//!
//! Every loss comes in a value form (matching the public contract) and, where
//! the network needs it, a gradient form returning the partial derivatives
//! with respect to its inputs. The model composes these into end-to-end
//! per-sample gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Value returned by the ZINB loss when the likelihood underflows.
pub const ZINB_LOSS_CAP: f64 = 1e10;

/// Norms below this are treated as degenerate when normalizing.
pub const MIN_NORM: f64 = 1e-12;

/// Cluster frequencies below this make the target distribution undefined.
pub const MIN_CLUSTER_FREQUENCY: f64 = 1e-12;

/// Raw counts and size factors the decoder is asked to explain.
#[derive(Debug, Clone, Copy)]
pub struct ZinbTarget<'a> {
    pub counts: ArrayView2<'a, f64>,
    pub size_factors: ArrayView1<'a, f64>,
}

impl ZinbTarget<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.counts.nrows() != self.size_factors.len() {
            return Err(Error::ShapeMismatch {
                context: "zinb target size factors",
                expected: self.counts.nrows(),
                actual: self.size_factors.len(),
            });
        }
        if self.counts.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::domain("counts must be finite and nonnegative"));
        }
        if self.size_factors.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::domain("size factors must be positive"));
        }
        Ok(())
    }
}

/// Weights of the two composite losses.
///
/// `rho` mixes reconstruction and instance contrast in the first stage;
/// `beta` mixes reconstruction, KL clustering and cluster contrast in the second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rho: f64,
    pub beta: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rho: 0.5,
            beta: [0.5, 0.3, 0.2],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::domain(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.beta.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::domain("each beta must lie in [0, 1]"));
        }
        let sum: f64 = self.beta.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("beta weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Negative log-likelihood of one count under ZINB(π, μ, θ).
pub fn zinb_nll(x: f64, mean: f64, dispersion: f64, dropout: f64) -> Result<f64> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::domain(format!("count must be nonnegative, got {x}")));
    }
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::domain(format!("mean must be positive, got {mean}")));
    }
    if !(dispersion > 0.0 && dispersion.is_finite()) {
        return Err(Error::domain(format!("dispersion must be positive, got {dispersion}")));
    }
    if !(0.0..=1.0).contains(&dropout) {
        return Err(Error::domain(format!("dropout must lie in [0, 1], got {dropout}")));
    }
    let ln_nb = nb_log_pmf(x, mean, dispersion);
    let prob = if x == 0.0 {
        dropout + (1.0 - dropout) * ln_nb.exp()
    } else {
        (1.0 - dropout) * ln_nb.exp()
    };
    let nll = -prob.ln();
    Ok(cap(nll))
}

fn cap(nll: f64) -> f64 {
    if nll.is_finite() {
        nll.min(ZINB_LOSS_CAP)
    } else {
        ZINB_LOSS_CAP
    }
}

/// `ln NB(x | μ, θ)` via log-Γ.
pub fn nb_log_pmf(x: f64, mean: f64, dispersion: f64) -> f64 {
    let t = dispersion;
    let log_ratio = (mean / t).ln_1p(); // ln((θ+μ)/θ)
    let mut out = -t * log_ratio;
    if x > 0.0 {
        out += ln_gamma(x + t) - ln_gamma(x + 1.0) - ln_gamma(t) + x * (mean.ln() - (t + mean).ln());
    }
    out
}

/// Mean ZINB loss over every entry of a count matrix.
pub fn zinb_nll_matrix(
    counts: ArrayView2<f64>,
    mean: ArrayView2<f64>,
    dispersion: ArrayView2<f64>,
    dropout: ArrayView2<f64>,
) -> Result<f64> {
    let shape = counts.shape();
    for m in [&mean, &dispersion, &dropout] {
        if m.shape() != shape {
            return Err(Error::ShapeMismatch {
                context: "zinb parameter matrix",
                expected: counts.len(),
                actual: m.len(),
            });
        }
    }
    if counts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (((&x, &mu), &th), &pi) in counts.iter().zip(&mean).zip(&dispersion).zip(&dropout) {
        total += zinb_nll(x, mu, th, pi)?;
    }
    Ok(total / counts.len() as f64)
}

/// ZINB loss with the dropout probability given as a logit, plus its partial
/// derivatives `(value, ∂/∂μ, ∂/∂θ, ∂/∂logit)`.
///
/// Working with the logit keeps `ln π` and `ln(1−π)` finite when the dropout
/// head saturates.
pub fn zinb_nll_logit_grad(x: f64, mean: f64, dispersion: f64, logit: f64) -> (f64, f64, f64, f64) {
    let t = dispersion;
    let ln_pi = -softplus(-logit);
    let ln_1m_pi = -softplus(logit);
    let log_ratio = (mean / t).ln_1p();
    let frac = mean / (t + mean);
    if x == 0.0 {
        let ln_nb0 = -t * log_ratio;
        let nb_branch = ln_1m_pi + ln_nb0;
        let ln_p0 = log_add_exp(ln_pi, nb_branch);
        let value = -ln_p0;
        // share of the zero mass explained by the NB component
        let w = (nb_branch - ln_p0).exp();
        let d_mean = w * t / (t + mean);
        let d_disp = -w * (-log_ratio + frac);
        let d_logit = -(ln_pi - ln_p0).exp() * ln_1m_pi.exp() * (-(ln_nb0.exp_m1()));
        (cap(value), d_mean, d_disp, d_logit)
    } else {
        let ln_nb = nb_log_pmf(x, mean, t);
        let value = -ln_1m_pi - ln_nb;
        let d_mean = -(x / mean - (t + x) / (t + mean));
        let d_disp = -(digamma(x + t) - digamma(t) - log_ratio + (mean - x) / (t + mean));
        let d_logit = sigmoid(logit);
        (cap(value), d_mean, d_disp, d_logit)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Negative cosine similarity of two embeddings.
pub fn instance_loss(z1: ArrayView1<f64>, z2: ArrayView1<f64>) -> Result<f64> {
    instance_loss_grad(z1, z2).map(|(v, _, _)| v)
}

/// Negative cosine similarity and its gradients with respect to both inputs.
pub fn instance_loss_grad(
    z1: ArrayView1<f64>,
    z2: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    if z1.len() != z2.len() {
        return Err(Error::ShapeMismatch {
            context: "instance loss embeddings",
            expected: z1.len(),
            actual: z2.len(),
        });
    }
    let n1 = norm(z1);
    let n2 = norm(z2);
    for (index, n) in [(0, n1), (1, n2)] {
        if !(n > MIN_NORM) {
            return Err(Error::Degenerate {
                what: "embedding",
                index,
                norm: n,
            });
        }
    }
    let u1 = &z1 / n1;
    let u2 = &z2 / n2;
    let cos = u1.dot(&u2);
    let g1 = -(&u2 - &(&u1 * cos)) / n1;
    let g2 = -(&u1 - &(&u2 * cos)) / n2;
    Ok((-cos, g1, g2))
}

/// Mean pairwise cosine similarity of the cluster centers, diagonal included.
pub fn cluster_loss(centers: ArrayView2<f64>) -> Result<f64> {
    cluster_loss_grad(centers).map(|(v, _)| v)
}

/// [`cluster_loss`] and its gradient with respect to every center.
pub fn cluster_loss_grad(centers: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let s = centers.nrows();
    if s == 0 {
        return Err(Error::domain("cluster loss needs at least one center"));
    }
    let norms: Vec<f64> = centers.outer_iter().map(norm).collect();
    if let Some((index, &n)) = norms.iter().enumerate().find(|(_, n)| !(**n > MIN_NORM)) {
        return Err(Error::Degenerate {
            what: "cluster center",
            index,
            norm: n,
        });
    }
    let mut units = centers.to_owned();
    for (mut row, &n) in units.outer_iter_mut().zip(&norms) {
        row /= n;
    }
    // (1/s²) Σ_ij u_i·u_j = ‖Σ_i u_i‖² / s²
    let total = units.sum_axis(Axis(0));
    let s2 = (s * s) as f64;
    let value = total.dot(&total) / s2;
    let mut grad = Array2::zeros(centers.raw_dim());
    for ((mut g, u), &n) in grad.outer_iter_mut().zip(units.outer_iter()).zip(&norms) {
        let proj = u.dot(&total);
        g.assign(&((&total - &(&u * proj)) * (2.0 / (s2 * n))));
    }
    Ok((value, grad))
}

/// Student-t kernels `(1 + ‖z − λ_j‖²)^-1` for one embedding.
fn student_kernels(z: ArrayView1<f64>, centers: ArrayView2<f64>) -> Array1<f64> {
    centers
        .outer_iter()
        .map(|c| {
            let d = &z - &c;
            1.0 / (1.0 + d.dot(&d))
        })
        .collect()
}

/// Soft assignment of every embedding to every center.
pub fn soft_assign(z: ArrayView2<f64>, centers: ArrayView2<f64>) -> Result<Array2<f64>> {
    if centers.nrows() == 0 {
        return Err(Error::domain("soft assignment needs at least one center"));
    }
    if z.ncols() != centers.ncols() {
        return Err(Error::ShapeMismatch {
            context: "soft assignment latent width",
            expected: centers.ncols(),
            actual: z.ncols(),
        });
    }
    let mut q = Array2::zeros((z.nrows(), centers.nrows()));
    for (zi, mut qi) in z.outer_iter().zip(q.outer_iter_mut()) {
        let k = student_kernels(zi, centers);
        let total = k.sum();
        qi.assign(&(k / total));
    }
    Ok(q)
}

/// Sharpened self-training target: `p_ij ∝ q_ij² / f_j` with `f_j = Σ_i q_ij`.
pub fn target_distribution(q: ArrayView2<f64>) -> Result<Array2<f64>> {
    let freq = q.sum_axis(Axis(0));
    if let Some((cluster, &frequency)) = freq
        .iter()
        .enumerate()
        .find(|(_, f)| !(**f >= MIN_CLUSTER_FREQUENCY))
    {
        return Err(Error::EmptyCluster { cluster, frequency });
    }
    let mut p = q.mapv(|v| v * v);
    p /= &freq;
    for mut row in p.outer_iter_mut() {
        let total = row.sum();
        row /= total;
    }
    Ok(p)
}

/// `Σ_j p_j ln(p_j / q_j)` for one row, with `0 ln 0 = 0`.
pub fn kl_row(p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            context: "kl row",
            expected: p.len(),
            actual: q.len(),
        });
    }
    let mut total = 0.0;
    for (&pj, &qj) in p.iter().zip(&q) {
        if pj > 0.0 {
            if !(qj > 0.0) {
                return Err(Error::domain("KL support violation: q = 0 where p > 0"));
            }
            total += pj * (pj / qj).ln();
        }
    }
    Ok(total)
}

/// `KL(P‖Q)` averaged over rows.
pub fn kl_clustering(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            context: "kl matrices",
            expected: p.len(),
            actual: q.len(),
        });
    }
    if p.nrows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (pi, qi) in p.outer_iter().zip(q.outer_iter()) {
        total += kl_row(pi, qi)?;
    }
    Ok(total / p.nrows() as f64)
}

/// Per-sample KL clustering loss for embedding `z` against fixed target row
/// `p`, with gradients with respect to `z` and to every center.
pub fn kl_sample_grad(
    z: ArrayView1<f64>,
    centers: ArrayView2<f64>,
    p: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>, Array2<f64>)> {
    if p.len() != centers.nrows() {
        return Err(Error::ShapeMismatch {
            context: "target row",
            expected: centers.nrows(),
            actual: p.len(),
        });
    }
    let k = student_kernels(z, centers);
    let q = &k / k.sum();
    let value = kl_row(p, q.view())?;
    let mut dz = Array1::zeros(z.len());
    let mut dc = Array2::zeros(centers.raw_dim());
    for (j, c) in centers.outer_iter().enumerate() {
        let coef = 2.0 * (p[j] - q[j]) * k[j];
        let diff = &z - &c;
        dz.scaled_add(coef, &diff);
        dc.row_mut(j).scaled_add(-coef, &diff);
    }
    Ok((value, dz, dc))
}

/// First-stage loss `ρ·zinb + (1−ρ)·inst`.
pub fn hybrid_instance(zinb: f64, inst: f64, w: &LossWeights) -> f64 {
    w.rho * zinb + (1.0 - w.rho) * inst
}

/// Second-stage loss `β1·zinb + β2·cls + β3·cc`.
pub fn hybrid_cluster(zinb: f64, cls: f64, cc: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.beta[0] * zinb + w.beta[1] * cls + w.beta[2] * cc)
}
