//! Direct (transport-free) federation driver. Client steps run in parallel.

use rayon::prelude::*;

use crate::client::{client_step, ClientState};
use crate::error::Result;
use crate::exp_family::NatGaussian;
use crate::server::{check_convergence, ClientUpdate, ServerState};

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub round: u64,
    pub updates: Vec<ClientUpdate>,
    /// Local posteriors in client order.
    pub client_posteriors: Vec<NatGaussian>,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct Federation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl Federation {
    pub fn new(server: ServerState, mut clients: Vec<ClientState>) -> Self {
        clients.sort_by_key(|c| c.client_id);
        Federation { server, clients }
    }

    /// One synchronous round. On error the federation is left unchanged.
    pub fn round(&mut self) -> Result<RoundOutcome> {
        if self.clients.is_empty() {
            return Ok(RoundOutcome {
                round: self.server.round,
                updates: Vec::new(),
                client_posteriors: Vec::new(),
                converged: true,
            });
        }
        let round = self.server.round + 1;
        let q_s = &self.server.posterior;
        let steps = self
            .clients
            .par_iter()
            .map(|c| client_step(q_s, c, round))
            .collect::<Result<Vec<_>>>()?;
        let updates: Vec<ClientUpdate> = steps
            .iter()
            .map(|s| ClientUpdate {
                client_id: s.state.client_id,
                round,
                delta: s.delta.clone(),
            })
            .collect();
        let next = self.server.step(&updates)?;
        let converged = check_convergence(&updates, self.server.config.tolerance);
        self.server = next;
        let client_posteriors = steps.iter().map(|s| s.posterior.clone()).collect();
        self.clients = steps.into_iter().map(|s| s.state).collect();
        Ok(RoundOutcome {
            round,
            updates,
            client_posteriors,
            converged,
        })
    }

    /// Runs rounds until the updates converge or `max_rounds` is reached.
    /// Returns the number of rounds executed.
    pub fn run(&mut self, max_rounds: u64) -> Result<u64> {
        for r in 1..=max_rounds {
            if self.round()?.converged {
                return Ok(r);
            }
        }
        Ok(max_rounds)
    }
}
