use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::Serialize;

use crate::accounting::{CommLedger, PayloadKind};
use crate::datapart::PartitionSpec;
use crate::error::{Error, Result};
use crate::math::{ClassId, PrototypeMap, StdVec};
use crate::modelzoo::VtcDecoder;
use crate::scalar::Scalar;

/// Global statistics held by the server. Classes missing from
/// `prototypes` are uninitialized.
#[derive(Clone, Debug)]
pub struct ServerState<T> {
    pub prototypes: PrototypeMap<T>,
    pub sigma: StdVec<T>,
    /// The aggregated decoder, once one exists.
    pub decoder: Option<VtcDecoder<T>>,
    /// `K_y`: clients holding samples of class `y`.
    pub registry: BTreeMap<ClassId, BTreeSet<usize>>,
    pub round: usize,
    pub latent_dim: usize,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(partition: &PartitionSpec, labels: &[ClassId], latent_dim: usize) -> Self {
        let mut registry: BTreeMap<ClassId, BTreeSet<usize>> = BTreeMap::new();
        for (k, shard) in partition.shards.iter().enumerate() {
            for &i in shard {
                registry.entry(labels[i]).or_default().insert(k);
            }
        }
        ServerState {
            prototypes: PrototypeMap::new(),
            sigma: StdVec::ones(latent_dim),
            decoder: None,
            registry,
            round: 0,
            latent_dim,
        }
    }

    /// `Y_k` as recorded in the registry.
    pub fn client_classes(&self, k: usize) -> BTreeSet<ClassId> {
        self.registry
            .iter()
            .filter(|(_, ks)| ks.contains(&k))
            .map(|(&y, _)| y)
            .collect()
    }

    pub fn is_initialized(&self, y: ClassId) -> bool {
        self.prototypes.contains_key(&y)
    }
}

/// Uniform sample of `count` distinct client ids, in ascending order.
pub fn select_clients<R: Rng>(clients: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count > clients {
        return Err(Error::invalid(format!("cannot select {count} of {clients} clients")));
    }
    let mut ids = rand::seq::index::sample(rng, clients, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// What one client receives at the start of a round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundMessage<T> {
    pub client: usize,
    pub prototypes: PrototypeMap<T>,
    pub sigma: StdVec<T>,
}

/// Sends each selected client the global σ and the initialized prototypes
/// of the classes it holds, logging every message.
pub fn broadcast_round_state<T: Scalar>(
    server: &ServerState<T>,
    selected: &[usize],
    ledger: &mut CommLedger,
) -> Vec<RoundMessage<T>> {
    let p = server.latent_dim;
    selected
        .iter()
        .map(|&k| {
            let prototypes: PrototypeMap<T> = server
                .client_classes(k)
                .into_iter()
                .filter_map(|y| server.prototypes.get(&y).map(|c| (y, c.clone())))
                .collect();
            if !prototypes.is_empty() {
                ledger.download(server.round, k, PayloadKind::Prototype, prototypes.len() * p);
            }
            ledger.download(server.round, k, PayloadKind::Sigma, p);
            RoundMessage {
                client: k,
                prototypes,
                sigma: server.sigma.clone(),
            }
        })
        .collect()
}

/// Unweighted mean of equal-length vectors, accumulated as offsets from the
/// first so that identical inputs reproduce themselves exactly.
fn mean_of<T: Scalar>(vectors: &[&[T]]) -> Vec<T> {
    let first = vectors[0];
    let n = T::of_usize(vectors.len());
    let mut acc = vec![T::zero(); first.len()];
    for v in &vectors[1..] {
        for ((a, &x), &f) in acc.iter_mut().zip(*v).zip(first) {
            *a += x - f;
        }
    }
    first.iter().zip(acc).map(|(&f, a)| f + a / n).collect()
}

/// Per class, the unweighted mean over the uploads holding that class.
/// Classes nobody uploaded keep their `previous` value.
pub fn aggregate_prototypes<T: Scalar>(
    uploads: &[&PrototypeMap<T>],
    previous: &PrototypeMap<T>,
) -> Result<PrototypeMap<T>> {
    let mut by_class: BTreeMap<ClassId, Vec<&[T]>> = BTreeMap::new();
    for up in uploads {
        for (&y, c) in up.iter() {
            let list = by_class.entry(y).or_default();
            if let Some(first) = list.first() {
                if first.len() != c.len() {
                    return Err(Error::Protocol(format!(
                        "prototype for class {y} has length {}, expected {}",
                        c.len(),
                        first.len()
                    )));
                }
            }
            list.push(c);
        }
    }
    let mut out = previous.clone();
    for (y, list) in by_class {
        out.insert(y, mean_of(&list));
    }
    Ok(out)
}

/// Elementwise mean of the uploaded spreads, floored.
pub fn aggregate_sigma<T: Scalar>(uploads: &[&StdVec<T>]) -> Result<StdVec<T>> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Protocol("no spread vectors to aggregate".into()))?;
    let p = first.len();
    if let Some(s) = uploads.iter().find(|s| s.len() != p) {
        return Err(Error::Protocol(format!(
            "spread of length {} among length {p}",
            s.len()
        )));
    }
    let vs: Vec<&[T]> = uploads.iter().map(|s| s.values()).collect();
    Ok(StdVec::floored(mean_of(&vs)))
}

/// Parameterwise mean over decoders of one architecture, running
/// normalization statistics included.
pub fn aggregate_decoder<T: Scalar>(decoders: &[&VtcDecoder<T>]) -> Result<VtcDecoder<T>> {
    let first = decoders
        .first()
        .ok_or_else(|| Error::Protocol("no decoders to aggregate".into()))?;
    let sig = first.net.signature();
    if let Some(i) = decoders.iter().position(|d| d.net.signature() != sig) {
        return Err(Error::Protocol(format!(
            "decoder {i} differs in architecture from decoder 0"
        )));
    }
    let states: Vec<Vec<T>> = decoders.iter().map(|d| d.net.flat_state()).collect();
    let views: Vec<&[T]> = states.iter().map(Vec::as_slice).collect();
    let mut out = (*first).clone();
    out.net.load_flat_state(&mean_of(&views))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounting::{ledger_total, LedgerFilter};
    use crate::modelzoo::{build_vtc_decoder, DatasetProfile};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(shards: Vec<Vec<usize>>) -> PartitionSpec {
        PartitionSpec {
            shards,
            alpha: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn selection_is_sorted_distinct_and_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let s = select_clients(10, 3, &mut a).unwrap();
            assert_eq!(s, select_clients(10, 3, &mut b).unwrap());
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(select_clients(5, 5, &mut a).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(select_clients(2, 3, &mut a).is_err());
    }

    #[test]
    fn selection_frequencies_match_the_sampling_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut hits = [0usize; 10];
        for _ in 0..draws {
            for k in select_clients(10, 3, &mut rng).unwrap() {
                hits[k] += 1;
            }
        }
        let se = (0.3f64 * 0.7 / draws as f64).sqrt();
        for h in hits {
            assert!((h as f64 / draws as f64 - 0.3).abs() < 5.0 * se, "{hits:?}");
        }
    }

    #[test]
    fn broadcast_targets_held_classes() {
        // client 0 holds class 3 only, client 1 holds classes 0 and 3
        let labels = vec![3, 0, 3];
        let mut server = ServerState::<f64>::new(&spec(vec![vec![0], vec![1, 2]]), &labels, 4);
        server.round = 1;
        let mut ledger = CommLedger::new();
        let cold = broadcast_round_state(&server, &[0, 1], &mut ledger);
        assert!(cold.iter().all(|m| m.prototypes.is_empty()));
        assert_eq!(ledger_total(&ledger, &LedgerFilter::all()), 2 * 4 * 4);

        server.prototypes.insert(3, vec![1.0; 4]);
        server.prototypes.insert(2, vec![2.0; 4]);
        let mut ledger = CommLedger::new();
        let msgs = broadcast_round_state(&server, &[0, 1], &mut ledger);
        assert_eq!(msgs[0].prototypes.keys().copied().collect::<Vec<_>>(), vec![3]);
        assert_eq!(msgs[1].prototypes.keys().copied().collect::<Vec<_>>(), vec![3]);
        assert_eq!(msgs[0].sigma, server.sigma);
        // Σ_k (|received|·p + p)·4
        assert_eq!(ledger_total(&ledger, &LedgerFilter::all()), ((4 + 4) + (4 + 4)) * 4);
    }

    #[test]
    fn prototype_means() {
        let prev: PrototypeMap<f64> = [(9, vec![7.0, 7.0])].into_iter().collect();
        let a: PrototypeMap<f64> = [(1, vec![1.0, 1.0])].into_iter().collect();
        let b: PrototypeMap<f64> = [(1, vec![3.0, 3.0]), (2, vec![5.0, -5.0])].into_iter().collect();
        let g = aggregate_prototypes(&[&a, &b], &prev).unwrap();
        assert_eq!(g[&1], vec![2.0, 2.0]);
        assert_eq!(g[&2], vec![5.0, -5.0]);
        assert_eq!(g[&9], vec![7.0, 7.0]);
        let bad: PrototypeMap<f64> = [(1, vec![3.0])].into_iter().collect();
        assert!(matches!(
            aggregate_prototypes(&[&a, &bad], &prev),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn sigma_means() {
        let ones = StdVec::<f64>::ones(3);
        let threes = StdVec::new(vec![3.0; 3]).unwrap();
        assert_eq!(aggregate_sigma(&[&ones, &ones]).unwrap(), ones);
        assert_eq!(aggregate_sigma(&[&ones, &threes]).unwrap().values(), &[2.0; 3]);
        let short = StdVec::<f64>::ones(2);
        assert!(matches!(aggregate_sigma(&[&ones, &short]), Err(Error::Protocol(_))));
        assert!(aggregate_sigma::<f64>(&[]).is_err());
    }

    #[test]
    fn decoder_means() {
        let profile = DatasetProfile::tiny(2);
        let d = build_vtc_decoder::<f64>(&profile, 128, 1).unwrap();
        let same = aggregate_decoder(&[&d, &d, &d]).unwrap();
        assert_eq!(same.net.flat_state(), d.net.flat_state());
        let mut neg = d.clone();
        let flipped: Vec<f64> = d.net.flat_state().iter().map(|v| -v).collect();
        neg.net.load_flat_state(&flipped).unwrap();
        let zero = aggregate_decoder(&[&d, &neg]).unwrap();
        assert!(zero.net.flat_state().iter().all(|&v| v == 0.0));

        let other = build_vtc_decoder::<f64>(&DatasetProfile::mnist(), 980, 1).unwrap();
        assert!(matches!(aggregate_decoder(&[&d, &other]), Err(Error::Protocol(_))));
    }
}
