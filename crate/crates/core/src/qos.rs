//! Admission logic for the power/delay-aware query phase, NTT estimation,
//! and the metric-composition algebra.

use std::fmt;

use crate::types::ms_to_us;

/// QoS constraint attached to a flow: the minimum residual-power fraction
/// required at every forwarding node, and the end-to-end delay budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QosConstraint {
    /// Fraction of initial battery charge, in `[0, 1]`.
    pub min_power_fraction: f64,
    /// Delay budget in microseconds.
    pub max_delay_us: u64,
}

impl QosConstraint {
    pub fn new(min_power_fraction: f64, max_delay_ms: u64) -> Self {
        QosConstraint {
            min_power_fraction,
            max_delay_us: ms_to_us(max_delay_ms),
        }
    }
}

/// Outcome of evaluating a query at one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdmissionResult {
    /// Forward the query with this much budget left.
    Admit { remaining_budget_us: u64 },
    /// Residual power below the query's threshold.
    RejectPower,
    /// Budget cannot cover this node (or its estimated path to the
    /// destination).
    RejectDelay,
}

/// How per-link values compose into a path value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Additive,
    Concave,
    Multiplicative,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MetricKind::Additive => "additive",
            MetricKind::Concave => "concave",
            MetricKind::Multiplicative => "multiplicative",
        };
        f.write_str(s)
    }
}

/// Evaluate a query at a forwarding node.
///
/// Power is checked first: a residual fraction strictly below the threshold
/// rejects (equality admits). Otherwise the node's traverse time — and, when
/// known, its cached delay estimate to the destination — must fit the
/// remaining budget; on admission the traverse time is subtracted from it.
pub fn admit_query(
    residual_fraction: f64,
    budget_us: u64,
    ntt_us: u64,
    qos: &QosConstraint,
    est_delay_to_dst_us: Option<u64>,
) -> AdmissionResult {
    if residual_fraction < qos.min_power_fraction {
        return AdmissionResult::RejectPower;
    }
    if est_delay_to_dst_us.is_some_and(|est| est > budget_us) || ntt_us > budget_us {
        return AdmissionResult::RejectDelay;
    }
    AdmissionResult::Admit {
        remaining_budget_us: budget_us - ntt_us,
    }
}

/// Exponentially weighted moving average over observed per-packet delays,
/// seeded with the configured static NTT. An empty observation sequence
/// returns the seed.
pub fn estimate_ntt(observed_ms: &[f64], alpha: f64, static_ntt_ms: f64) -> f64 {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
    observed_ms
        .iter()
        .fold(static_ntt_ms, |est, &d| alpha * d + (1.0 - alpha) * est)
}

/// Compose per-link metric values into a path value: sum, min, or product.
pub fn compose_metric(kind: MetricKind, per_link_values: &[f64]) -> f64 {
    assert!(
        !per_link_values.is_empty(),
        "compose_metric requires at least one link value"
    );
    match kind {
        MetricKind::Additive => per_link_values.iter().sum(),
        MetricKind::Concave => per_link_values.iter().copied().fold(f64::INFINITY, f64::min),
        MetricKind::Multiplicative => per_link_values.iter().product(),
    }
}

/// Per-node NTT state: either a fixed configured value or an EWMA over the
/// node's own transmission delays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NttMode {
    Static,
    Ewma,
}

#[derive(Clone, Debug)]
pub struct NttEstimator {
    mode: NttMode,
    alpha: f64,
    estimate_us: f64,
}

impl NttEstimator {
    pub fn new(mode: NttMode, static_ntt_us: u64, alpha: f64) -> Self {
        NttEstimator {
            mode,
            alpha,
            estimate_us: static_ntt_us as f64,
        }
    }

    /// Current estimate, rounded to whole microseconds so budget arithmetic
    /// stays exact.
    pub fn current_us(&self) -> u64 {
        self.estimate_us.round() as u64
    }

    /// Feed one observed per-packet delay (queue wait plus serialization).
    pub fn observe(&mut self, delay_us: u64) {
        if self.mode == NttMode::Ewma {
            self.estimate_us = self.alpha * delay_us as f64 + (1.0 - self.alpha) * self.estimate_us;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qos() -> QosConstraint {
        QosConstraint::new(0.2, 250)
    }

    #[test]
    fn admits_and_subtracts_ntt() {
        let r = admit_query(0.5, ms_to_us(250), ms_to_us(10), &qos(), None);
        assert_eq!(
            r,
            AdmissionResult::Admit {
                remaining_budget_us: ms_to_us(240)
            }
        );
    }

    #[test]
    fn rejects_below_power_threshold() {
        let r = admit_query(0.15, ms_to_us(250), ms_to_us(10), &qos(), None);
        assert_eq!(r, AdmissionResult::RejectPower);
    }

    #[test]
    fn rejects_when_ntt_exceeds_budget() {
        let r = admit_query(0.5, ms_to_us(8), ms_to_us(10), &qos(), None);
        assert_eq!(r, AdmissionResult::RejectDelay);
    }

    #[test]
    fn residual_equal_to_threshold_admits() {
        // Boundary: the power gate drops only when residual is strictly
        // below the threshold, so 0.2 against 0.2 passes.
        let r = admit_query(0.2, ms_to_us(250), ms_to_us(10), &qos(), None);
        assert_eq!(
            r,
            AdmissionResult::Admit {
                remaining_budget_us: ms_to_us(240)
            }
        );
    }

    #[test]
    fn cached_estimate_beyond_budget_rejects() {
        let r = admit_query(0.9, ms_to_us(100), ms_to_us(10), &qos(), Some(ms_to_us(120)));
        assert_eq!(r, AdmissionResult::RejectDelay);
        let r = admit_query(0.9, ms_to_us(100), ms_to_us(10), &qos(), Some(ms_to_us(90)));
        assert_eq!(
            r,
            AdmissionResult::Admit {
                remaining_budget_us: ms_to_us(90)
            }
        );
    }

    #[test]
    fn ntt_seed_fixed_point_and_single_step() {
        assert_eq!(estimate_ntt(&[], 0.5, 10.0), 10.0);
        assert_eq!(estimate_ntt(&[10.0, 10.0, 10.0], 0.5, 10.0), 10.0);
        assert_eq!(estimate_ntt(&[20.0], 0.5, 10.0), 15.0);
    }

    #[test]
    fn estimator_static_mode_ignores_observations() {
        let mut e = NttEstimator::new(NttMode::Static, 10_000, 0.5);
        e.observe(50_000);
        assert_eq!(e.current_us(), 10_000);
        let mut e = NttEstimator::new(NttMode::Ewma, 10_000, 0.5);
        e.observe(20_000);
        assert_eq!(e.current_us(), 15_000);
    }

    #[test]
    fn compose_matches_sum_min_product() {
        assert_eq!(
            compose_metric(MetricKind::Additive, &[10.0, 20.0, 20.0]),
            50.0
        );
        assert_eq!(compose_metric(MetricKind::Concave, &[0.9, 0.3, 0.7]), 0.3);
        let p = compose_metric(MetricKind::Multiplicative, &[0.9, 0.9]);
        assert!((p - 0.81).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "at least one link value")]
    fn compose_rejects_empty_sequence() {
        compose_metric(MetricKind::Additive, &[]);
    }

    proptest! {
        #[test]
        fn admit_never_returns_negative_budget(
            res in 0.0f64..1.0,
            budget in 0u64..400_000,
            ntt in 0u64..50_000,
            est in proptest::option::of(0u64..500_000),
        ) {
            if let AdmissionResult::Admit { remaining_budget_us } =
                admit_query(res, budget, ntt, &qos(), est)
            {
                prop_assert!(remaining_budget_us <= budget);
                prop_assert_eq!(remaining_budget_us, budget - ntt);
            }
        }

        /// More residual power never flips an admit into a reject; a smaller
        /// budget never flips a delay-reject into an admit.
        #[test]
        fn admission_is_monotone(
            res in 0.0f64..1.0,
            extra in 0.0f64..1.0,
            budget in 0u64..400_000,
            shrink in 0u64..400_000,
            ntt in 0u64..50_000,
            est in proptest::option::of(0u64..500_000),
        ) {
            let q = qos();
            let base = admit_query(res, budget, ntt, &q, est);
            if matches!(base, AdmissionResult::Admit { .. }) {
                let higher = (res + extra).min(1.0);
                prop_assert!(matches!(
                    admit_query(higher, budget, ntt, &q, est),
                    AdmissionResult::Admit { .. }
                ));
            }
            if base == AdmissionResult::RejectDelay {
                let smaller = budget.saturating_sub(shrink);
                prop_assert_eq!(
                    admit_query(res, smaller, ntt, &q, est),
                    AdmissionResult::RejectDelay
                );
            }
        }

        #[test]
        fn additive_is_permutation_invariant(mut vals in proptest::collection::vec(0.0f64..100.0, 1..12)) {
            let direct = compose_metric(MetricKind::Additive, &vals);
            vals.reverse();
            let reversed = compose_metric(MetricKind::Additive, &vals);
            prop_assert!((direct - reversed).abs() < 1e-9);
        }

        #[test]
        fn concave_is_idempotent_and_multiplicative_keeps_identity(
            x in 0.0f64..10.0,
            vals in proptest::collection::vec(0.01f64..2.0, 1..8),
        ) {
            prop_assert_eq!(compose_metric(MetricKind::Concave, &[x, x]), x);
            let mut with_one = vals.clone();
            with_one.push(1.0);
            let a = compose_metric(MetricKind::Multiplicative, &vals);
            let b = compose_metric(MetricKind::Multiplicative, &with_one);
            prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }
    }
}
