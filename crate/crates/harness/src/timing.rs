//! Deterministic stand-in for wall-clock time.

use fedacnnl_core::fed::{self, ClientWork, RoundClock, RoundInput, RoundTiming};
use fedacnnl_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CostConfig, LinkConfig, SpeedProfile};

/// Per-client rates from a profile, drawn with `seed`.
pub fn client_speeds(profile: &SpeedProfile, clients: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speeds: Vec<f64> = match profile {
        SpeedProfile::Equal => vec![1.0; clients],
        SpeedProfile::Cores { max_cores } => (0..clients)
            .map(|_| rng.random_range(1..=*max_cores) as f64 / *max_cores as f64)
            .collect(),
        SpeedProfile::Uniform { min, max } => (0..clients).map(|_| rng.random_range(*min..=*max)).collect(),
        SpeedProfile::Fixed { values } => {
            if values.len() != clients {
                return Err(Error::Domain(format!("{} speeds for {clients} clients", values.len())));
            }
            values.clone()
        }
    };
    if let Some(bad) = speeds.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::Domain(format!("client speed {bad} must be positive")));
    }
    Ok(speeds)
}

/// Compute time is `(batches · per_batch_s + rows · flops_per_sample ·
/// per_flop_s) / speed`; a transfer costs `latency + 8 · floats / bandwidth`.
///
/// The per-batch overhead makes a round strictly cheaper with fewer, larger
/// batches, so a slow client can catch up by raising its batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedClock {
    pub speeds: Vec<f64>,
    pub cost: CostConfig,
    pub link: LinkConfig,
}

impl SimulatedClock {
    pub fn new(speeds: Vec<f64>, cost: CostConfig, link: LinkConfig) -> Result<Self> {
        if let Some(bad) = speeds.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("client speed {bad} must be positive")));
        }
        Ok(SimulatedClock { speeds, cost, link })
    }

    fn speed(&self, client: usize) -> Result<f64> {
        self.speeds
            .get(client)
            .copied()
            .ok_or_else(|| Error::Domain(format!("no speed for client {client}")))
    }

    fn transfer(&self, floats: usize) -> f64 {
        self.link.latency_s + 8.0 * floats as f64 / self.link.bandwidth_bps
    }
}

impl RoundClock for SimulatedClock {
    fn compute_seconds(&self, w: &ClientWork) -> Result<f64> {
        let busy = w.ops.batches as f64 * self.cost.per_batch_s
            + w.ops.rows as f64 * w.flops_per_sample * self.cost.per_flop_s;
        Ok(busy / self.speed(w.client_id)?)
    }

    fn upload_seconds(&self, client: usize, floats: usize) -> Result<f64> {
        self.speed(client)?;
        Ok(self.transfer(floats))
    }

    fn download_seconds(&self, client: usize, floats: usize) -> Result<f64> {
        self.speed(client)?;
        Ok(self.transfer(floats))
    }
}

/// Times a sequence of rounds under this clock.
pub fn simulate_timing(rounds: &[Vec<RoundInput>], clock: &SimulatedClock) -> Result<RoundTiming> {
    fed::simulate_timing(rounds, clock)
}
