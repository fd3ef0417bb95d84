use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{client_local_round, fine_tune_epoch, ClientState, ClientUpload};
use super::server::{
    aggregate_decoder, aggregate_prototypes, aggregate_sigma, broadcast_round_state, select_clients, ServerState,
};
use super::synth::{generate_synthetic, save_png_grid, SyntheticDataset};
use super::{derive_seed, stream, RunConfig, TcMode};
use crate::accounting::{ledger_total, CommLedger, LedgerFilter, PayloadKind};
use crate::checkpoint::{save_decoder, save_local_model};
use crate::datapart::{DatasetBundle, PartitionSpec};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_generalization;
use crate::math::ClassId;
use crate::modelzoo::{build_local_model, build_vtc_decoder, ArchCluster, VtcDecoder};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of synthetic samples dumped as images per run.
pub const DUMP_SAMPLES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fl,
    FineTune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub dm: f64,
    pub total: f64,
    pub classification: f64,
}

/// One evaluation point. FL rounds are numbered `1..=T`, fine-tuning
/// passes continue at `T+1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run: String,
    pub seed: u64,
    pub phase: Phase,
    pub round: usize,
    /// Clients that trained at this point.
    pub selected: Vec<usize>,
    /// Percent.
    pub mean_accuracy: f64,
    pub client_accuracy: Vec<f64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub losses: Vec<ClientLoss>,
    /// Bytes on the ledger so far.
    pub ledger_bytes: u64,
}

/// Server statistics after the last round, as broadcast to the clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunGlobals {
    pub prototypes: BTreeMap<ClassId, Vec<f64>>,
    pub sigma: Vec<f64>,
}

pub struct RunArtifacts<T> {
    pub name: String,
    pub config: RunConfig,
    pub partition: PartitionSpec,
    pub metrics: Vec<MetricsRecord>,
    pub ledger: CommLedger,
    pub clients: Vec<ClientState<T>>,
    pub decoder: VtcDecoder<T>,
    pub globals: RunGlobals,
    /// Selected clients per FL round.
    pub trace: Vec<Vec<usize>>,
    pub dump: SyntheticDataset<T>,
}

impl<T: Scalar> RunArtifacts<T> {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.mean_accuracy)
    }
}

fn loss_row<T>(u: &ClientUpload<T>) -> ClientLoss {
    ClientLoss {
        client: u.client,
        reconstruction: u.loss.reconstruction,
        kl: u.loss.kl,
        dm: u.loss.dm,
        total: u.loss.total,
        classification: u.classification,
    }
}

/// Runs the full protocol: `T` rounds of local training and statistics
/// aggregation, decoder transmission, then per-client generation and
/// fine-tuning. Every client is evaluated on the test split after each
/// round and after each fine-tuning pass.
pub fn run_experiment<T: Scalar>(
    name: &str,
    config: &RunConfig,
    bundle: &DatasetBundle<T>,
    partition: &PartitionSpec,
) -> Result<RunArtifacts<T>> {
    config.validate()?;
    partition.validate(bundle.train_labels.len())?;
    if partition.clients() != config.clients {
        return Err(Error::Config(format!(
            "partition has {} shards for {} clients",
            partition.clients(),
            config.clients
        )));
    }
    let profile = &bundle.profile;
    let p = profile.latent_dim();
    let k_total = config.clients;
    let seed = config.seed;
    let labels = &bundle.train_labels;

    let decoder0 = build_vtc_decoder::<T>(profile, p, derive_seed(seed, stream::DECODER_INIT, 0))?;
    let mut clients = (0..k_total)
        .map(|k| {
            let arch = ArchCluster::for_client(k, k_total, config.clusters)?;
            let model = build_local_model(arch, profile, p, derive_seed(seed, stream::MODEL_INIT, k as u64))?;
            Ok(ClientState::new(
                k,
                model,
                decoder0.clone(),
                partition.shards[k].clone(),
                labels,
                derive_seed(seed, stream::CLIENT, k as u64),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut server = ServerState::<T>::new(partition, labels, p);
    let mut selection_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SELECTION, 0));
    let mut ledger = CommLedger::new();
    let mut metrics = Vec::new();
    let mut trace = Vec::new();
    let mut pool: Vec<VtcDecoder<T>> = match config.tc_mode {
        TcMode::Regular => vec![decoder0.clone(); k_total],
        TcMode::Singular => Vec::new(),
    };
    let dsize = decoder0.state_count();

    let evaluate = |clients: &[ClientState<T>]| {
        let models: Vec<_> = clients.iter().map(|c| &c.model).collect();
        evaluate_generalization(&models, &bundle.test_images, &bundle.test_labels)
    };
    let record = |phase, round, selected: Vec<usize>, losses, ledger: &CommLedger, clients: &[ClientState<T>]| {
        let e = evaluate(clients)?;
        Ok::<_, Error>(MetricsRecord {
            run: name.to_string(),
            seed,
            phase,
            round,
            selected,
            mean_accuracy: e.mean,
            client_accuracy: e.per_client,
            per_class_accuracy: e.per_class,
            losses,
            ledger_bytes: ledger_total(ledger, &LedgerFilter::all()),
        })
    };

    for t in 1..=config.rounds {
        server.round = t;
        let selected = select_clients(k_total, config.participants, &mut selection_rng)?;
        let msgs = broadcast_round_state(&server, &selected, &mut ledger);
        let mut chosen: Vec<&mut ClientState<T>> = clients.iter_mut().filter(|c| selected.contains(&c.id)).collect();
        let uploads = chosen
            .par_iter_mut()
            .zip(msgs.par_iter())
            .map(|(c, m)| {
                client_local_round(c, m, bundle, config).map_err(|e| e.context(format!("round {t}, client {}", c.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        for u in &uploads {
            ledger.upload(t, u.client, PayloadKind::Prototype, u.prototypes.len() * p);
            ledger.upload(t, u.client, PayloadKind::Sigma, p);
            if config.tc_mode == TcMode::Regular {
                ledger.upload(t, u.client, PayloadKind::Decoder, dsize);
                pool[u.client] = clients[u.client].decoder.clone();
            }
        }
        let protos: Vec<_> = uploads.iter().map(|u| &u.prototypes).collect();
        server.prototypes = aggregate_prototypes(&protos, &server.prototypes)?;
        let sigmas: Vec<_> = uploads.iter().map(|u| &u.sigma).collect();
        server.sigma = aggregate_sigma(&sigmas)?;
        if config.tc_mode == TcMode::Regular {
            server.decoder =
                Some(aggregate_decoder(&pool.iter().collect::<Vec<_>>()).map_err(|e| e.context(format!("round {t}")))?);
        }
        let losses = uploads.iter().map(loss_row).collect();
        let rec = record(Phase::Fl, t, selected.clone(), losses, &ledger, &clients)?;
        log::info!(
            "{name} round {t}/{}: mean accuracy {:.2}%",
            config.rounds,
            rec.mean_accuracy
        );
        metrics.push(rec);
        trace.push(selected);
    }

    let final_round = config.rounds + 1;
    server.round = final_round;
    if config.tc_mode == TcMode::Singular {
        for c in &clients {
            ledger.upload(final_round, c.id, PayloadKind::Decoder, dsize);
        }
        let decs: Vec<_> = clients.iter().map(|c| &c.decoder).collect();
        server.decoder = Some(aggregate_decoder(&decs)?);
    }
    let global = server
        .decoder
        .clone()
        .ok_or_else(|| Error::Protocol("no aggregated decoder after the last round".into()))?;
    for c in &mut clients {
        ledger.download(final_round, c.id, PayloadKind::Decoder, dsize);
        if !server.prototypes.is_empty() {
            ledger.download(final_round, c.id, PayloadKind::Prototype, server.prototypes.len() * p);
        }
        ledger.download(final_round, c.id, PayloadKind::Sigma, p);
        c.decoder = global.clone();
        c.sigma = server.sigma.clone();
    }

    if config.fine_tune_rounds > 0 {
        if server.prototypes.len() < profile.classes {
            log::warn!(
                "{name}: only {} of {} classes have prototypes; generating for those",
                server.prototypes.len(),
                profile.classes
            );
        }
        let synth = clients
            .par_iter_mut()
            .map(|c| {
                generate_synthetic(
                    &global,
                    &server.prototypes,
                    &server.sigma,
                    config.synthetic_samples,
                    &mut c.rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let everyone: Vec<usize> = (0..k_total).collect();
        for e in 1..=config.fine_tune_rounds {
            let losses = clients
                .par_iter_mut()
                .zip(synth.par_iter())
                .map(|(c, s)| {
                    let ce = fine_tune_epoch(&mut c.model, s, config.learning_rate, config.batch_size, &mut c.rng)
                        .map_err(|err| err.context(format!("fine-tuning pass {e}, client {}", c.id)))?;
                    Ok(ClientLoss {
                        client: c.id,
                        reconstruction: 0.0,
                        kl: 0.0,
                        dm: 0.0,
                        total: ce,
                        classification: ce,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let rec = record(
                Phase::FineTune,
                config.rounds + e,
                everyone.clone(),
                losses,
                &ledger,
                &clients,
            )?;
            log::info!(
                "{name} fine-tune {e}/{}: mean accuracy {:.2}%",
                config.fine_tune_rounds,
                rec.mean_accuracy
            );
            metrics.push(rec);
        }
    }

    let mut dump_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::DUMP, 0));
    let dump = generate_synthetic(&global, &server.prototypes, &server.sigma, DUMP_SAMPLES, &mut dump_rng)?;
    let globals = RunGlobals {
        prototypes: server
            .prototypes
            .iter()
            .map(|(&y, c)| (y, c.iter().map(|v| v.as_f64()).collect()))
            .collect(),
        sigma: server.sigma.iter().map(|v| v.as_f64()).collect(),
    };
    Ok(RunArtifacts {
        name: name.to_string(),
        config: config.clone(),
        partition: partition.clone(),
        metrics,
        ledger,
        clients,
        decoder: global,
        globals,
        trace,
        dump,
    })
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LEDGER_FILE: &str = "ledger.tsv";

/// Writes the run directory:
///
/// ```text
/// config.json         resolved run configuration
/// partition.txt       partition manifest
/// metrics.jsonl       one record per evaluation point
/// ledger.tsv          communication ledger with totals
/// globals.json        final prototypes and spread
/// checkpoints/        client_<k>.tar per client, decoder.tar
/// synthetic/          sample_<i>.png (64 samples) and grid.png
/// ```
pub fn write_run_dir<T: Scalar>(art: &RunArtifacts<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("synthetic"))?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&art.config)? + "\n",
    )?;
    fs::write(dir.join("partition.txt"), art.partition.to_manifest())?;
    let mut metrics = fs::File::create(dir.join(METRICS_FILE))?;
    for m in &art.metrics {
        writeln!(metrics, "{}", serde_json::to_string(m)?)?;
    }
    fs::write(dir.join(LEDGER_FILE), art.ledger.to_tsv())?;
    fs::write(
        dir.join("globals.json"),
        serde_json::to_string_pretty(&art.globals)? + "\n",
    )?;
    for c in &art.clients {
        save_local_model(
            &dir.join(format!("checkpoints/client_{:03}.tar", c.id)),
            &c.model,
            art.config.seed,
        )?;
    }
    save_decoder(&dir.join("checkpoints/decoder.tar"), &art.decoder, art.config.seed)?;
    write_samples(&art.dump.images, &dir.join("synthetic"))
}

/// One PNG per sample plus `grid.png`.
pub fn write_samples<T: Scalar>(images: &Tensor<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let shape = images.sample_shape().to_vec();
    for i in 0..images.batch() {
        let one = Tensor::stack(&shape, std::iter::once(images.sample(i)))?;
        save_png_grid(&one, 1, 1, &dir.join(format!("sample_{i:02}.png")))?;
    }
    save_png_grid(images, images.batch(), 8, &dir.join("grid.png"))
}
