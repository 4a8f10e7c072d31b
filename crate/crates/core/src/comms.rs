//! Uplink failure model: each client fails to deliver its update with its own
//! fixed probability, independently every round. The downlink never fails.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngStream;

const ROUNDS_TAG: u64 = 0x726F_756E_6473;

#[derive(Debug, Clone)]
pub struct CommErrorModel {
    probs: Vec<f64>,
    rounds: RngStream,
}

impl CommErrorModel {
    /// Explicit per-client failure probabilities. Round draws come from a
    /// child of `stream`.
    pub fn new(probs: Vec<f64>, stream: &RngStream) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!(
                "failure probability {p} outside [0, 1]"
            )));
        }
        Ok(CommErrorModel {
            probs,
            rounds: stream.child(ROUNDS_TAG),
        })
    }

    /// A model where every update always arrives.
    pub fn reliable(k: usize, stream: &RngStream) -> Self {
        CommErrorModel::new(alloc::vec![0.0; k], stream).expect("zeros are valid probabilities")
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_clients(&self) -> usize {
        self.probs.len()
    }

    /// Availability of round `t`. One uniform is drawn per client in id
    /// order from a stream derived from `t`, so the outcome is a pure
    /// function of the seed and the round.
    pub fn sample_round(&self, t: usize) -> RoundAvailability {
        let mut stream = self.rounds.child(t as u64);
        let mut received = Vec::new();
        let mut failed = Vec::new();
        for (k, &p) in self.probs.iter().enumerate() {
            if stream.uniform() < p {
                failed.push(k);
            } else {
                received.push(k);
            }
        }
        RoundAvailability { received, failed }
    }
}

/// Draws `p_k ~ Uniform[0, p_e]` independently for each of `k` clients.
pub fn sample_error_probs(k: usize, p_e: f64, stream: &mut RngStream) -> Result<CommErrorModel> {
    if !(0.0..=1.0).contains(&p_e) {
        return Err(Error::invalid(format!("p_e = {p_e} outside [0, 1]")));
    }
    let probs = (0..k).map(|_| p_e * stream.uniform()).collect();
    CommErrorModel::new(probs, stream)
}

/// Received set `R(t)` and failed set `N(t)`, each sorted by client id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundAvailability {
    pub received: Vec<usize>,
    pub failed: Vec<usize>,
}

impl RoundAvailability {
    pub fn all_received(k: usize) -> Self {
        RoundAvailability {
            received: (0..k).collect(),
            failed: Vec::new(),
        }
    }

    pub fn num_clients(&self) -> usize {
        self.received.len() + self.failed.len()
    }

    pub fn is_failed(&self, k: usize) -> bool {
        self.failed.binary_search(&k).is_ok()
    }
}
