//! The federated protocol: server and client state, rounds, aggregation,
//! synthetic generation and fine-tuning.

mod client;
mod run;
mod server;
mod synth;

pub use client::{client_local_round, fine_tune, fine_tune_epoch, ClientState, ClientUpload};
pub use run::{
    run_experiment, write_run_dir, write_samples, ClientLoss, MetricsRecord, Phase, RunArtifacts, RunGlobals,
    DUMP_SAMPLES, LEDGER_FILE, METRICS_FILE,
};
pub use server::{
    aggregate_decoder, aggregate_prototypes, aggregate_sigma, broadcast_round_state, select_clients, RoundMessage,
    ServerState,
};
pub use synth::{generate_synthetic, sample_latents, save_png_grid, SyntheticDataset};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// When the decoders travel to the server.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcMode {
    /// Once, after the last round.
    Singular,
    /// Every round, by each participant.
    Regular,
}

/// Which decoder objective the clients optimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Reconstruction and KL only.
    ElboOnly,
    /// Adds the distribution-matching term.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// FL rounds `T`.
    pub rounds: usize,
    /// Fine-tuning passes over the synthetic set; 0 disables fine-tuning.
    pub fine_tune_rounds: usize,
    /// Local epochs `E` per round.
    pub local_epochs: usize,
    /// Number of clients `K`.
    pub clients: usize,
    /// Clients sampled per round.
    pub participants: usize,
    /// Step size for the classification loss and fine-tuning.
    pub learning_rate: f64,
    /// Step size for the decoder objective: the extractor's share of it,
    /// the decoder and the spread.
    pub tc_learning_rate: f64,
    /// Weight of the distribution-matching term.
    pub lambda: f64,
    /// Synthetic samples `S` per client.
    pub synthetic_samples: usize,
    pub batch_size: usize,
    pub tc_mode: TcMode,
    pub train_mode: TrainMode,
    /// Number of distinct client architectures.
    pub clusters: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rounds: 20,
            fine_tune_rounds: 5,
            local_epochs: 5,
            clients: 10,
            participants: 3,
            learning_rate: 0.05,
            tc_learning_rate: 1e-3,
            lambda: 0.1,
            synthetic_samples: 100,
            batch_size: 16,
            tc_mode: TcMode::Singular,
            train_mode: TrainMode::Full,
            clusters: 2,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rounds", self.rounds),
            ("clients", self.clients),
            ("participants", self.participants),
            ("synthetic_samples", self.synthetic_samples),
            ("batch_size", self.batch_size),
            ("clusters", self.clusters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.participants > self.clients {
            return Err(Error::Config(format!(
                "participants ({}) exceed clients ({})",
                self.participants, self.clients
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("tc_learning_rate", self.tc_learning_rate),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Effective λ: zero when the distribution-matching term is disabled.
    pub fn effective_lambda(&self) -> f64 {
        match self.train_mode {
            TrainMode::Full => self.lambda,
            TrainMode::ElboOnly => 0.0,
        }
    }
}

/// Independent random streams of a run.
pub(crate) mod stream {
    pub const SELECTION: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const DECODER_INIT: u64 = 3;
    pub const CLIENT: u64 = 4;
    pub const DUMP: u64 = 5;
}

/// Mixes a run seed with a stream tag and index (splitmix64 finalizer).
pub(crate) fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
