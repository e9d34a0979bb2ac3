use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TransportError;

/// Seeded network impairment applied by the simulated bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultProfile {
    pub loss_probability: f64,
    /// Inclusive `(min, max)` one-way delay in milliseconds.
    pub delay_ms: (u32, u32),
    pub reorder_probability: f64,
    pub seed: u64,
}

impl Default for FaultProfile {
    fn default() -> Self {
        FaultProfile::perfect(0)
    }
}

impl FaultProfile {
    pub fn perfect(seed: u64) -> Self {
        FaultProfile { loss_probability: 0.0, delay_ms: (0, 0), reorder_probability: 0.0, seed }
    }

    pub fn lossy(loss_probability: f64, seed: u64) -> Self {
        FaultProfile { loss_probability, ..FaultProfile::perfect(seed) }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(TransportError::InvalidProfile("loss_probability outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.reorder_probability) {
            return Err(TransportError::InvalidProfile("reorder_probability outside [0, 1]"));
        }
        if self.delay_ms.0 > self.delay_ms.1 {
            return Err(TransportError::InvalidProfile("delay min exceeds max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultDecision {
    pub drop: bool,
    pub delay_ms: u32,
    pub reorder: bool,
}

/// Deterministic fault decision stream.
///
/// Every datagram consumes exactly three draws in a fixed order (loss,
/// delay, reorder) whatever the outcome, so equal seeds and equal send
/// sequences give equal decisions.
#[derive(Debug, Clone)]
pub struct FaultInjector {
    profile: FaultProfile,
    rng: ChaCha8Rng,
}

impl FaultInjector {
    pub fn new(profile: FaultProfile) -> Result<Self, TransportError> {
        profile.validate()?;
        Ok(FaultInjector { profile, rng: ChaCha8Rng::seed_from_u64(profile.seed) })
    }

    pub fn profile(&self) -> &FaultProfile {
        &self.profile
    }

    pub fn decide(&mut self) -> FaultDecision {
        let loss_draw: f64 = self.rng.gen();
        let (lo, hi) = self.profile.delay_ms;
        let delay_ms = self.rng.gen_range(lo..=hi);
        let reorder_draw: f64 = self.rng.gen();
        FaultDecision {
            drop: loss_draw < self.profile.loss_probability,
            delay_ms,
            reorder: reorder_draw < self.profile.reorder_probability,
        }
    }
}
