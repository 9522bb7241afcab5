//! Rényi-DP accounting for the sampled Gaussian mechanism.
//!
//! A training run is a composition of Poisson-subsampled Gaussian steps.
//! Each step contributes a per-order RDP bound; bounds add across steps
//! and stages, and the total is converted to an `(ε, δ)` guarantee by
//! minimizing the conversion expression over a fixed integer order grid.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

/// Lower end of the noise-multiplier search range used by [`calibrate_sigma`].
pub const SIGMA_SEARCH_MIN: f64 = 0.3;
/// Upper end of the noise-multiplier search range used by [`calibrate_sigma`].
pub const SIGMA_SEARCH_MAX: f64 = 1000.0;
/// Bisection stops once the bracket is narrower than this.
pub const SIGMA_TOLERANCE: f64 = 1e-4;

/// The integer order grid `{2..=64} ∪ {80, 96, 128, 256}`.
pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([80, 96, 128, 256]).collect()
}

/// Parameters of one (or `steps` repeated) sampled Gaussian mechanism steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgmParams {
    pub sample_rate: f64,
    /// Noise standard deviation in units of the clipping bound.
    pub noise_scale: f64,
    pub steps: u64,
}

impl SgmParams {
    pub fn new(sample_rate: f64, noise_scale: f64, steps: u64) -> Result<Self> {
        let params = Self {
            sample_rate,
            noise_scale,
            steps,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::domain(format!(
                "sample rate must lie in (0, 1], got {}",
                self.sample_rate
            )));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::domain(format!(
                "noise scale must be positive and finite, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Per-order RDP bounds `R(α)` in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<u32>,
    values: Vec<f64>,
}

impl RdpCurve {
    /// All-zero curve over `orders`, which must be strictly increasing and ≥ 2.
    pub fn zero(orders: Vec<u32>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::domain("order grid is empty"));
        }
        if orders[0] < 2 || orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain(
                "orders must be strictly increasing integers >= 2",
            ));
        }
        let values = vec![0.0; orders.len()];
        Ok(Self { orders, values })
    }

    /// All-zero curve over [`default_orders`].
    pub fn zero_default() -> Self {
        Self::zero(default_orders()).expect("default grid is valid")
    }

    pub fn from_parts(orders: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        let mut curve = Self::zero(orders)?;
        if values.len() != curve.orders.len() {
            return Err(Error::ShapeMismatch {
                context: "rdp curve values",
                expected: curve.orders.len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::domain("RDP values must be finite and nonnegative"));
        }
        curve.values = values;
        Ok(curve)
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.orders.iter().copied().zip(self.values.iter().copied())
    }

    /// Composition with another curve on the same grid.
    pub fn compose(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(Error::domain("cannot compose curves on different order grids"));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(RdpCurve {
            orders: self.orders.clone(),
            values,
        })
    }
}

/// Per-step RDP of the sampled Gaussian mechanism at integer order `order`:
///
/// `R = ln( Σ_k C(α,k) (1−q)^(α−k) q^k exp((k²−k)/(2σ²)) ) / (α−1)`.
///
/// Since the binomial weights sum to one, the sum equals
/// `1 + Σ_{k≥2} C(α,k)(1−q)^(α−k) q^k expm1((k²−k)/(2σ²))`; every term of
/// the tail is nonnegative, so it is accumulated with a log-sum-exp and the
/// final `ln(1 + ·)` is taken as a softplus. This stays finite for the whole
/// order grid and keeps full relative precision when `q` is small.
pub fn sgm_rdp_step(sample_rate: f64, noise_scale: f64, order: u32) -> Result<f64> {
    SgmParams {
        sample_rate,
        noise_scale,
        steps: 1,
    }
    .validate()?;
    if order < 2 {
        return Err(Error::domain(format!("order must be >= 2, got {order}")));
    }
    let q = sample_rate;
    let alpha = u64::from(order);
    let inv_two_var = 1.0 / (2.0 * noise_scale * noise_scale);
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();

    let log_terms: Vec<f64> = (2..=alpha)
        .filter_map(|k| {
            let tail = alpha - k;
            if tail > 0 && q == 1.0 {
                return None;
            }
            let kf = k as f64;
            let exponent = (kf * kf - kf) * inv_two_var;
            let mut t = ln_binomial(alpha, k) + kf * ln_q + ln_expm1(exponent);
            if tail > 0 {
                t += tail as f64 * ln_1mq;
            }
            Some(t)
        })
        .collect();

    let log_tail = log_sum_exp(&log_terms);
    Ok(softplus(log_tail) / (alpha - 1) as f64)
}

/// `ln(e^x − 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Adds `params.steps` compositions of the sampled Gaussian mechanism to `curve`.
pub fn accumulate(curve: &RdpCurve, params: &SgmParams) -> Result<RdpCurve> {
    params.validate()?;
    let mut out = curve.clone();
    if params.steps == 0 {
        return Ok(out);
    }
    let steps = params.steps as f64;
    for (value, &order) in out.values.iter_mut().zip(&curve.orders) {
        *value += steps * sgm_rdp_step(params.sample_rate, params.noise_scale, order)?;
    }
    Ok(out)
}

/// An `(ε, δ)` guarantee and the order that attained it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub best_order: u32,
}

/// Converts an RDP curve to `(ε, δ)`-DP:
/// `ε(α) = R(α) + ln((α−1)/α) − (ln δ + ln α)/(α−1)`, minimized over the grid.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<DpBudget> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    let ln_delta = delta.ln();
    let mut best: Option<DpBudget> = None;
    for (order, r) in curve.iter() {
        let a = f64::from(order);
        let eps = r + ((a - 1.0) / a).ln() - (ln_delta + a.ln()) / (a - 1.0);
        if best.is_none_or(|b| eps < b.epsilon) {
            best = Some(DpBudget {
                epsilon: eps,
                delta,
                best_order: order,
            });
        }
    }
    best.ok_or_else(|| Error::domain("empty RDP curve"))
}

/// ε after `compositions` SGM steps at `(q, σ)` on the default grid.
pub fn epsilon_after(
    sample_rate: f64,
    noise_scale: f64,
    compositions: u64,
    delta: f64,
) -> Result<DpBudget> {
    let params = SgmParams::new(sample_rate, noise_scale, compositions)?;
    rdp_to_dp(&accumulate(&RdpCurve::zero_default(), &params)?, delta)
}

/// Smallest noise multiplier in `[SIGMA_SEARCH_MIN, SIGMA_SEARCH_MAX]` (to
/// within [`SIGMA_TOLERANCE`]) whose accounted ε after `total_steps` steps does
/// not exceed `target_epsilon`.
pub fn calibrate_sigma(
    target_epsilon: f64,
    delta: f64,
    sample_rate: f64,
    total_steps: u64,
) -> Result<f64> {
    if !(target_epsilon > 0.0 && target_epsilon.is_finite()) {
        return Err(Error::domain(format!(
            "target epsilon must be positive, got {target_epsilon}"
        )));
    }
    if total_steps == 0 {
        return Err(Error::domain("total_steps must be >= 1"));
    }
    let eps = |sigma: f64| epsilon_after(sample_rate, sigma, total_steps, delta).map(|b| b.epsilon);

    let mut lo = SIGMA_SEARCH_MIN;
    let mut hi = SIGMA_SEARCH_MAX;
    if eps(lo)? <= target_epsilon {
        return Ok(lo);
    }
    let eps_hi = eps(hi)?;
    if eps_hi > target_epsilon {
        return Err(Error::Calibration(format!(
            "epsilon {target_epsilon} unreachable: sigma = {hi} still gives {eps_hi:.6}"
        )));
    }
    while hi - lo > SIGMA_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// How a run's output relates to the accounted guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrivacyStatus {
    /// Every released parameter was trained under the accounted noise.
    Private,
    /// Noise covered only part of the encoder; the ε does not protect the release.
    NonPrivateScope,
    /// No clipping, no noise.
    NonPrivate,
}

/// The privacy claim attached to a training run or an accounting query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub status: PrivacyStatus,
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub sigma: f64,
    pub clip_bound: Option<f64>,
    pub sample_rate: f64,
    pub steps_stage1: u64,
    pub steps_stage2: u64,
    /// SGM compositions charged per training step (2 when the whole network is noised).
    pub compositions_per_step: u64,
    /// Total SGM compositions charged; `(steps_stage1 + steps_stage2) * compositions_per_step`.
    pub sgm_steps: u64,
    pub best_order: Option<u32>,
    pub rdp_curve: Vec<(u32, f64)>,
}

impl PrivacyReport {
    /// Builds a report from an accumulated curve.
    #[allow(clippy::too_many_arguments)]
    pub fn from_curve(
        status: PrivacyStatus,
        curve: &RdpCurve,
        delta: f64,
        sigma: f64,
        clip_bound: Option<f64>,
        sample_rate: f64,
        steps: (u64, u64),
        compositions_per_step: u64,
    ) -> Result<Self> {
        let (epsilon, best_order) = match status {
            PrivacyStatus::NonPrivate => (None, None),
            _ => {
                let budget = rdp_to_dp(curve, delta)?;
                (Some(budget.epsilon), Some(budget.best_order))
            }
        };
        Ok(Self {
            status,
            epsilon,
            delta,
            sigma,
            clip_bound,
            sample_rate,
            steps_stage1: steps.0,
            steps_stage2: steps.1,
            compositions_per_step,
            sgm_steps: (steps.0 + steps.1) * compositions_per_step,
            best_order,
            rdp_curve: curve.iter().collect(),
        })
    }

    /// Report for a standalone `(q, σ, steps, δ)` accounting query.
    pub fn for_query(sample_rate: f64, sigma: f64, steps: u64, delta: f64) -> Result<Self> {
        let params = SgmParams::new(sample_rate, sigma, steps)?;
        let curve = accumulate(&RdpCurve::zero_default(), &params)?;
        Self::from_curve(
            PrivacyStatus::Private,
            &curve,
            delta,
            sigma,
            None,
            sample_rate,
            (steps, 0),
            1,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_sampling_reduces_to_gaussian() {
        let r = sgm_rdp_step(1.0, 2.0, 4).unwrap();
        assert!((r - 0.5).abs() < 1e-14);
    }

    #[test]
    fn vanishing_sample_rate_gives_zero() {
        for order in [2, 10, 64, 256] {
            let r = sgm_rdp_step(1e-200, 1.0, order).unwrap();
            assert!(r < 1e-18, "order {order}: {r}");
        }
    }

    #[test]
    fn order_two_matches_closed_form() {
        // A_2 = 1 + q^2 (exp(1/σ²) − 1)
        let (q, sigma) = (0.01_f64, 2.0_f64);
        let expected = (q * q * (1.0 / (sigma * sigma)).exp_m1()).ln_1p();
        let r = sgm_rdp_step(q, sigma, 2).unwrap();
        assert!(((r - expected) / expected).abs() < 1e-12);
        assert!((r - 2.84e-5).abs() < 1e-7);
    }

    #[test]
    fn large_orders_stay_finite() {
        for sigma in [0.3, 0.5, 1.0] {
            for q in [0.01, 0.5, 1.0] {
                let r = sgm_rdp_step(q, sigma, 256).unwrap();
                assert!(r.is_finite() && r >= 0.0, "q={q} sigma={sigma}: {r}");
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(sgm_rdp_step(0.0, 1.0, 2).is_err());
        assert!(sgm_rdp_step(1.1, 1.0, 2).is_err());
        assert!(sgm_rdp_step(0.5, 0.0, 2).is_err());
        assert!(sgm_rdp_step(0.5, 1.0, 1).is_err());
        assert!(rdp_to_dp(&RdpCurve::zero_default(), 0.0).is_err());
        assert!(rdp_to_dp(&RdpCurve::zero_default(), 1.0).is_err());
        assert!(RdpCurve::zero(vec![3, 2]).is_err());
        assert!(RdpCurve::zero(vec![1, 2]).is_err());
    }

    #[test]
    fn accumulate_gaussian_closed_form() {
        let params = SgmParams::new(1.0, 2.0, 10).unwrap();
        let curve = accumulate(&RdpCurve::zero_default(), &params).unwrap();
        for (order, r) in curve.iter() {
            let expected = 10.0 * f64::from(order) / 8.0;
            assert!((r - expected).abs() < 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn accumulate_zero_steps_is_identity() {
        let base = accumulate(
            &RdpCurve::zero_default(),
            &SgmParams::new(0.3, 1.1, 7).unwrap(),
        )
        .unwrap();
        let same = accumulate(&base, &SgmParams::new(0.9, 0.4, 0).unwrap()).unwrap();
        assert_eq!(base, same);
    }

    #[test]
    fn accumulate_is_linear_in_steps() {
        let zero = RdpCurve::zero_default();
        let five = SgmParams::new(0.05, 1.3, 5).unwrap();
        let ten = SgmParams::new(0.05, 1.3, 10).unwrap();
        let twice = accumulate(&accumulate(&zero, &five).unwrap(), &five).unwrap();
        let once = accumulate(&zero, &ten).unwrap();
        for (a, b) in twice.values().iter().zip(once.values()) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn compose_rejects_mismatched_grids() {
        let a = RdpCurve::zero(vec![2, 3]).unwrap();
        let b = RdpCurve::zero(vec![2, 4]).unwrap();
        assert!(a.compose(&b).is_err());
    }

    #[test]
    fn conversion_spot_value() {
        let curve = RdpCurve::from_parts(vec![10], vec![1.0]).unwrap();
        let budget = rdp_to_dp(&curve, 1e-5).unwrap();
        assert_eq!(budget.best_order, 10);
        assert!((budget.epsilon - 1.918010).abs() < 1e-6);
    }

    #[test]
    fn conversion_overhead_is_positive() {
        let budget = rdp_to_dp(&RdpCurve::zero_default(), 1e-5).unwrap();
        assert!(budget.epsilon > 0.0);
    }

    #[test]
    fn calibration_rejects_unreachable_target() {
        let err = calibrate_sigma(1e-3, 1e-5, 1.0, 100_000).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)));
    }

    #[test]
    fn calibration_round_trip() {
        let sigma = calibrate_sigma(8.0, 1e-5, 0.1, 2000).unwrap();
        let eps = epsilon_after(0.1, sigma, 2000, 1e-5).unwrap().epsilon;
        assert!(eps <= 8.0 && 8.0 - eps < 1e-3, "sigma={sigma} eps={eps}");
    }

    #[test]
    fn calibration_needs_more_noise_for_more_steps() {
        let a = calibrate_sigma(4.0, 1e-5, 0.1, 500).unwrap();
        let b = calibrate_sigma(4.0, 1e-5, 0.1, 5000).unwrap();
        assert!(b > a);
    }

    #[test]
    fn non_private_report_has_no_epsilon() {
        let report = PrivacyReport::from_curve(
            PrivacyStatus::NonPrivate,
            &RdpCurve::zero_default(),
            1e-5,
            0.0,
            None,
            0.1,
            (3, 4),
            1,
        )
        .unwrap();
        assert_eq!(report.epsilon, None);
        assert_eq!(report.sgm_steps, 7);
    }

    proptest! {
        #[test]
        fn rdp_monotone_in_q_alpha_sigma(
            q in 0.001f64..0.99,
            dq in 0.0f64..0.5,
            sigma in 0.3f64..8.0,
            dsigma in 0.0f64..4.0,
            idx in 0usize..66,
        ) {
            let orders = default_orders();
            let a = orders[idx];
            let b = orders[idx + 1];
            let q2 = (q + dq).min(1.0);
            let r = sgm_rdp_step(q, sigma, a).unwrap();
            let tol = 1e-12 * r.max(1e-300);
            prop_assert!(sgm_rdp_step(q2, sigma, a).unwrap() >= r - tol);
            prop_assert!(sgm_rdp_step(q, sigma, b).unwrap() >= r - tol);
            prop_assert!(sgm_rdp_step(q, sigma + dsigma, a).unwrap() <= r + tol);
        }

        #[test]
        fn epsilon_monotone(
            q in 0.01f64..1.0,
            sigma in 0.5f64..5.0,
            steps in 1u64..2000,
            extra in 1u64..500,
        ) {
            let e = epsilon_after(q, sigma, steps, 1e-5).unwrap().epsilon;
            prop_assert!(epsilon_after(q, sigma, steps + extra, 1e-5).unwrap().epsilon >= e);
            prop_assert!(epsilon_after(q, sigma * 1.5, steps, 1e-5).unwrap().epsilon <= e);
            prop_assert!(epsilon_after(q, sigma, steps, 1e-4).unwrap().epsilon <= e);
        }

        #[test]
        fn composition_commutes_and_associates(
            qs in proptest::collection::vec(0.01f64..1.0, 3),
            sigmas in proptest::collection::vec(0.5f64..4.0, 3),
        ) {
            let zero = RdpCurve::zero_default();
            let curves: Vec<RdpCurve> = qs.iter().zip(&sigmas)
                .map(|(&q, &s)| accumulate(&zero, &SgmParams::new(q, s, 3).unwrap()).unwrap())
                .collect();
            let ab = curves[0].compose(&curves[1]).unwrap();
            let ba = curves[1].compose(&curves[0]).unwrap();
            prop_assert_eq!(&ab, &ba);
            let left = ab.compose(&curves[2]).unwrap();
            let right = curves[0].compose(&curves[1].compose(&curves[2]).unwrap()).unwrap();
            for (x, y) in left.values().iter().zip(right.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
            }
        }
    }
}
