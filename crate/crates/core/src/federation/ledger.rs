use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub upload_bytes: u64,
    pub download_bytes: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.upload_bytes + self.download_bytes
    }
}

/// Byte counts of every serialized message, per round and per client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    n_clients: usize,
    rounds: Vec<Vec<Traffic>>,
    totals: Vec<Traffic>,
    /// Bytes one client would exchange per round under the uncompressed
    /// teacher-architecture baseline.
    reference_round_bytes: Option<u64>,
}

impl CommLedger {
    pub fn new(n_clients: usize) -> Self {
        Self {
            n_clients,
            rounds: Vec::new(),
            totals: vec![Traffic::default(); n_clients],
            reference_round_bytes: None,
        }
    }

    pub fn with_reference(mut self, round_bytes: u64) -> Self {
        self.reference_round_bytes = Some(round_bytes);
        self
    }

    pub fn reference_round_bytes(&self) -> Option<u64> {
        self.reference_round_bytes
    }

    pub fn begin_round(&mut self) {
        self.rounds.push(vec![Traffic::default(); self.n_clients]);
    }

    fn slot(&mut self, client: usize) -> Result<&mut Traffic> {
        let n = self.n_clients;
        self.rounds
            .last_mut()
            .ok_or_else(|| Error::Protocol("ledger has no open round".into()))?
            .get_mut(client)
            .ok_or_else(|| Error::Protocol(format!("client {client} outside 0..{n}")))
    }

    pub fn record_upload(&mut self, client: usize, bytes: usize) -> Result<()> {
        self.slot(client)?.upload_bytes += bytes as u64;
        self.totals[client].upload_bytes += bytes as u64;
        Ok(())
    }

    pub fn record_download(&mut self, client: usize, bytes: usize) -> Result<()> {
        self.slot(client)?.download_bytes += bytes as u64;
        self.totals[client].download_bytes += bytes as u64;
        Ok(())
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn rounds(&self) -> &[Vec<Traffic>] {
        &self.rounds
    }

    pub fn totals(&self) -> &[Traffic] {
        &self.totals
    }

    pub fn total_bytes(&self) -> u64 {
        self.totals.iter().map(Traffic::total).sum()
    }

    /// Mean over clients of their total exchanged bytes.
    pub fn mean_client_bytes(&self) -> f64 {
        self.total_bytes() as f64 / self.n_clients as f64
    }

    /// Reference bytes over the recorded rounds divided by the mean
    /// per-client bytes actually exchanged.
    pub fn ratio_vs_reference(&self) -> Option<f64> {
        let r = self.reference_round_bytes? as f64 * self.rounds.len() as f64;
        let used = self.mean_client_bytes();
        (used > 0.0).then(|| r / used)
    }

    /// Recomputes totals from the per-round records.
    pub fn is_consistent(&self) -> bool {
        (0..self.n_clients).all(|c| {
            let up: u64 = self.rounds.iter().map(|r| r[c].upload_bytes).sum();
            let down: u64 = self.rounds.iter().map(|r| r[c].download_bytes).sum();
            self.totals[c]
                == Traffic {
                    upload_bytes: up,
                    download_bytes: down,
                }
        })
    }
}
