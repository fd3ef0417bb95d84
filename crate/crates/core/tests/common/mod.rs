#![allow(dead_code)]

use std::collections::BTreeSet;

use fedvtc::accounting::{ledger_total, CommLedger, Direction, LedgerFilter, PayloadKind};
use fedvtc::datapart::{dirichlet_partition, synthetic_bundle, DatasetBundle, PartitionSpec};
use fedvtc::modelzoo::DatasetProfile;
use fedvtc::orchestrator::{RunConfig, TcMode};

/// Small, quick protocol configuration on the procedural image set.
pub fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        rounds: 5,
        fine_tune_rounds: 2,
        local_epochs: 1,
        clients: 5,
        participants: 2,
        learning_rate: 0.001,
        tc_learning_rate: 0.001,
        synthetic_samples: 20,
        batch_size: 8,
        seed,
        ..RunConfig::default()
    }
}

pub fn tiny_bundle(seed: u64) -> DatasetBundle<f32> {
    synthetic_bundle(&DatasetProfile::tiny(10), 150, 40, seed).unwrap()
}

pub fn tiny_partition(bundle: &DatasetBundle<f32>, cfg: &RunConfig) -> PartitionSpec {
    dirichlet_partition(&bundle.train_labels, cfg.clients, 0.1, cfg.seed).unwrap()
}

/// Decoder elements from the block layout alone: four transposed
/// convolutions (weights and bias), each followed by a normalization layer
/// with scale, shift and two running statistics per channel.
pub fn decoder_elements(profile: &DatasetProfile) -> u64 {
    let [c1, c2, c3] = profile.decoder_channels;
    let blocks = [
        (profile.latent[0], c1, 3),
        (c1, c2, 4),
        (c2, c3, 3),
        (c3, profile.input[0], 4),
    ];
    blocks
        .iter()
        .map(|&(cin, cout, k)| (cin * cout * k * k + cout + 4 * cout) as u64)
        .sum()
}

/// Byte totals per direction and payload kind.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LedgerTotals {
    pub prototype_up: u64,
    pub prototype_down: u64,
    pub sigma_up: u64,
    pub sigma_down: u64,
    pub decoder_up: u64,
    pub decoder_down: u64,
}

impl LedgerTotals {
    pub fn total(&self) -> u64 {
        self.prototype_up + self.prototype_down + self.sigma_up + self.sigma_down + self.decoder_up + self.decoder_down
    }

    pub fn of(ledger: &CommLedger) -> Self {
        let f = |direction, kind| {
            ledger_total(
                ledger,
                &LedgerFilter {
                    direction: Some(direction),
                    kind: Some(kind),
                    round: None,
                },
            )
        };
        LedgerTotals {
            prototype_up: f(Direction::Up, PayloadKind::Prototype),
            prototype_down: f(Direction::Down, PayloadKind::Prototype),
            sigma_up: f(Direction::Up, PayloadKind::Sigma),
            sigma_down: f(Direction::Down, PayloadKind::Sigma),
            decoder_up: f(Direction::Up, PayloadKind::Decoder),
            decoder_down: f(Direction::Down, PayloadKind::Decoder),
        }
    }
}

/// Closed-form traffic of a run given only the partition, the per-round
/// client selection and the sizes involved.
pub fn expected_ledger(
    cfg: &RunConfig,
    partition: &PartitionSpec,
    labels: &[usize],
    trace: &[Vec<usize>],
    p: u64,
    decoder: u64,
) -> LedgerTotals {
    let classes: Vec<BTreeSet<usize>> = partition
        .shards
        .iter()
        .map(|s| s.iter().map(|&i| labels[i]).collect())
        .collect();
    let k = cfg.clients as u64;
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut out = LedgerTotals::default();
    for selected in trace {
        let n = selected.len() as u64;
        out.sigma_down += n * p * 4;
        for &c in selected {
            out.prototype_down += classes[c].intersection(&seen).count() as u64 * p * 4;
        }
        for &c in selected {
            out.prototype_up += classes[c].len() as u64 * p * 4;
            out.sigma_up += p * 4;
            seen.extend(classes[c].iter().copied());
        }
        if cfg.tc_mode == TcMode::Regular {
            out.decoder_up += n * decoder * 4;
        }
    }
    if cfg.tc_mode == TcMode::Singular {
        out.decoder_up += k * decoder * 4;
    }
    out.decoder_down += k * decoder * 4;
    out.prototype_down += k * seen.len() as u64 * p * 4;
    out.sigma_down += k * p * 4;
    out
}

/// Plain arithmetic mean in f64, summed left to right.
pub fn brute_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.into_iter().map(|a| a / n).collect()
}

/// Largest deviation from the brute-force mean, relative to the larger of
/// the mean and the mean magnitude of the averaged entries.
pub fn mean_rel_err(got: &[f64], rows: &[Vec<f64>]) -> f64 {
    let want = brute_mean(rows);
    let scale = brute_mean(
        &rows
            .iter()
            .map(|r| r.iter().map(|v| v.abs()).collect())
            .collect::<Vec<_>>(),
    );
    got.iter()
        .zip(&want)
        .zip(&scale)
        .map(|((g, w), s)| (g - w).abs() / w.abs().max(*s).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}
