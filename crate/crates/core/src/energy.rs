//! Battery model: linear per-bit transmit/receive drain with node death on
//! first zero crossing.

use crate::types::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrainKind {
    Tx,
    Rx,
}

/// What a single drain call did, so the kernel can keep its energy ledger
/// exact (the clamp at zero loses part of the nominal cost).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DrainOutcome {
    pub drained_j: f64,
    pub clamped_j: f64,
    pub died: bool,
}

#[derive(Clone, Debug)]
pub struct EnergyState {
    pub initial_j: f64,
    pub residual_j: f64,
    pub tx_cost_j_per_bit: f64,
    pub rx_cost_j_per_bit: f64,
    pub dead_at: Option<SimTime>,
}

impl EnergyState {
    pub fn new(initial_j: f64, tx_cost_j_per_bit: f64, rx_cost_j_per_bit: f64) -> Self {
        EnergyState {
            initial_j,
            residual_j: initial_j,
            tx_cost_j_per_bit,
            rx_cost_j_per_bit,
            dead_at: None,
        }
    }

    pub fn is_dead(&self) -> bool {
        self.dead_at.is_some()
    }

    /// Residual charge as a fraction of the initial charge.
    pub fn residual_fraction(&self) -> f64 {
        assert!(self.initial_j > 0.0, "initial energy must be positive");
        self.residual_j / self.initial_j
    }

    /// Drain the battery for one transmission or reception. A dead node is
    /// inert; the first drain that reaches zero records the time of death.
    pub fn drain(&mut self, kind: DrainKind, size_bits: u64, now: SimTime) -> DrainOutcome {
        debug_assert!(size_bits > 0);
        if self.is_dead() {
            return DrainOutcome::default();
        }
        let per_bit = match kind {
            DrainKind::Tx => self.tx_cost_j_per_bit,
            DrainKind::Rx => self.rx_cost_j_per_bit,
        };
        let cost = per_bit * size_bits as f64;
        let drained = cost.min(self.residual_j);
        self.residual_j -= drained;
        let died = self.residual_j <= 0.0;
        if died {
            self.residual_j = 0.0;
            self.dead_at = Some(now);
        }
        DrainOutcome {
            drained_j: drained,
            clamped_j: cost - drained,
            died,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const UJ: f64 = 1e-6;

    #[test]
    fn linear_tx_drain() {
        let mut e = EnergyState::new(20.0, UJ, 0.5 * UJ);
        let out = e.drain(DrainKind::Tx, 1_000_000, SimTime::from_ms(5));
        assert!((e.residual_j - 19.0).abs() < 1e-12);
        assert!(!out.died);
        assert_eq!(out.clamped_j, 0.0);
    }

    #[test]
    fn clamps_at_zero_and_records_death() {
        let mut e = EnergyState::new(20.0, UJ, 0.5 * UJ);
        e.residual_j = 0.5 * UJ;
        let out = e.drain(DrainKind::Tx, 1, SimTime::from_ms(42));
        assert_eq!(e.residual_j, 0.0);
        assert!(out.died);
        assert_eq!(e.dead_at, Some(SimTime::from_ms(42)));
        assert!((out.clamped_j - 0.5 * UJ).abs() < 1e-18);
    }

    #[test]
    fn dead_node_is_inert() {
        let mut e = EnergyState::new(20.0, UJ, 0.5 * UJ);
        e.drain(DrainKind::Tx, 100_000_000, SimTime::from_ms(1));
        assert!(e.is_dead());
        let before = e.residual_j;
        let out = e.drain(DrainKind::Rx, 1_000, SimTime::from_ms(2));
        assert_eq!(e.residual_j, before);
        assert_eq!(out, DrainOutcome::default());
        assert_eq!(e.dead_at, Some(SimTime::from_ms(1)));
    }

    #[test]
    fn residual_fraction_examples() {
        let mut e = EnergyState::new(20.0, UJ, UJ);
        assert_eq!(e.residual_fraction(), 1.0);
        e.residual_j = 4.0;
        assert!((e.residual_fraction() - 0.2).abs() < 1e-15);
        e.residual_j = 0.0;
        assert_eq!(e.residual_fraction(), 0.0);
    }

    #[test]
    #[should_panic(expected = "initial energy")]
    fn zero_initial_energy_is_a_contract_violation() {
        let e = EnergyState::new(0.0, UJ, UJ);
        let _ = e.residual_fraction();
    }
}
