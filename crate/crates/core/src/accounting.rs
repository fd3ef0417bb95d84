//! Communication ledger and training-memory estimates.
//!
//! Every payload is counted as raw 32-bit floats: no compression, no
//! framing overhead. Each directed message is one ledger entry.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::modelzoo::{LocalModel, VtcDecoder};
use crate::nn::Sequential;
use crate::scalar::Scalar;

pub const BYTES_PER_ELEMENT: u64 = 4;

/// Client id used for the server side of a message.
pub const SERVER: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Prototype,
    Sigma,
    Decoder,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Up => "up",
            Direction::Down => "down",
        })
    }
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::Prototype => "prototype",
            PayloadKind::Sigma => "sigma",
            PayloadKind::Decoder => "decoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub direction: Direction,
    pub sender: usize,
    pub receiver: usize,
    pub kind: PayloadKind,
    pub elements: u64,
    pub bytes: u64,
}

/// Append-only record of simulated messages.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

/// Entry predicate for [`ledger_total`]; `None` fields match anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct LedgerFilter {
    pub direction: Option<Direction>,
    pub kind: Option<PayloadKind>,
    pub round: Option<usize>,
}

impl LedgerFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn kind(kind: PayloadKind) -> Self {
        Self {
            kind: Some(kind),
            ..Self::default()
        }
    }

    pub fn matches(&self, e: &LedgerEntry) -> bool {
        self.direction.is_none_or(|d| d == e.direction)
            && self.kind.is_none_or(|k| k == e.kind)
            && self.round.is_none_or(|r| r == e.round)
    }
}

fn party(id: usize) -> String {
    if id == SERVER {
        "server".into()
    } else {
        format!("client{id}")
    }
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        round: usize,
        direction: Direction,
        sender: usize,
        receiver: usize,
        kind: PayloadKind,
        elements: usize,
    ) {
        let elements = elements as u64;
        self.entries.push(LedgerEntry {
            round,
            direction,
            sender,
            receiver,
            kind,
            elements,
            bytes: elements * BYTES_PER_ELEMENT,
        });
    }

    /// Client-to-server message.
    pub fn upload(&mut self, round: usize, client: usize, kind: PayloadKind, elements: usize) {
        self.record(round, Direction::Up, client, SERVER, kind, elements);
    }

    /// Server-to-client message.
    pub fn download(&mut self, round: usize, client: usize, kind: PayloadKind, elements: usize) {
        self.record(round, Direction::Down, SERVER, client, kind, elements);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: CommLedger) {
        self.entries.extend(other.entries);
    }

    /// Tab-separated export, one entry per line, followed by `#`-prefixed
    /// totals per direction and payload kind.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("round\tdirection\tsender\treceiver\tkind\telements\tbytes\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.round,
                e.direction,
                party(e.sender),
                party(e.receiver),
                e.kind,
                e.elements,
                e.bytes
            );
        }
        for d in [Direction::Up, Direction::Down] {
            for k in [PayloadKind::Prototype, PayloadKind::Sigma, PayloadKind::Decoder] {
                let f = LedgerFilter {
                    direction: Some(d),
                    kind: Some(k),
                    round: None,
                };
                let _ = writeln!(s, "# total {d} {k}\t{}", ledger_total(self, &f));
            }
        }
        let _ = writeln!(s, "# total bytes\t{}", ledger_total(self, &LedgerFilter::all()));
        s
    }
}

/// Sum of `bytes` over entries matching `filter`.
pub fn ledger_total(ledger: &CommLedger, filter: &LedgerFilter) -> u64 {
    ledger
        .entries
        .iter()
        .filter(|e| filter.matches(e))
        .map(|e| e.bytes)
        .sum()
}

/// Element counts of one training step (forward plus backward) of a network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub params: u64,
    pub grads: u64,
    pub activations: u64,
}

impl Footprint {
    pub fn bytes(&self) -> u64 {
        (self.params + self.grads + self.activations) * BYTES_PER_ELEMENT
    }

    /// The network is only run forward/backward, its weights are not updated.
    pub fn frozen(self) -> Self {
        Footprint { grads: 0, ..self }
    }
}

impl std::ops::Add for Footprint {
    type Output = Footprint;
    fn add(self, o: Footprint) -> Footprint {
        Footprint {
            params: self.params + o.params,
            grads: self.grads + o.grads,
            activations: self.activations + o.activations,
        }
    }
}

/// Parameters (all state), gradients (trainable state) and layer outputs
/// for one step at `batch` samples of shape `input`.
pub fn estimate_memory<T: Scalar>(net: &Sequential<T>, input: &[usize], batch: usize) -> Result<Footprint> {
    let outputs: usize = net
        .output_shapes(input)?
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum();
    Ok(Footprint {
        params: net.state_count() as u64,
        grads: net.trainable_count() as u64,
        activations: (outputs * batch) as u64,
    })
}

/// Memory estimate of one client architecture next to the shared decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub arch_id: usize,
    pub batch: usize,
    pub extractor: Footprint,
    pub head: Footprint,
    /// Decoder plus the trainable spread vector.
    pub decoder: Footprint,
    pub step_a: u64,
    pub step_b: u64,
    pub alternating_peak: u64,
    pub simultaneous: u64,
}

/// Step A trains the classifier and back-propagates through the frozen
/// decoder; step B trains decoder and spread through the frozen extractor.
/// Training everything at once needs both full footprints together.
pub fn memory_entry<T: Scalar>(
    model: &LocalModel<T>,
    decoder: &VtcDecoder<T>,
    input: &[usize],
    batch: usize,
) -> Result<MemoryEntry> {
    let p = model.latent_dim;
    let extractor = estimate_memory(&model.extractor, input, batch)?;
    let head = estimate_memory(&model.head, &[p], batch)?;
    let sigma = Footprint {
        params: p as u64,
        grads: p as u64,
        activations: 0,
    };
    let decoder = estimate_memory(&decoder.net, &[p], batch)? + sigma;
    let step_a = (extractor + head + decoder.frozen()).bytes();
    let step_b = (decoder + extractor.frozen() + head.frozen()).bytes();
    let simultaneous = (extractor + head).bytes() + decoder.bytes();
    Ok(MemoryEntry {
        arch_id: model.arch.id,
        batch,
        extractor,
        head,
        decoder,
        step_a,
        step_b,
        alternating_peak: step_a.max(step_b),
        simultaneous,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub entries: Vec<MemoryEntry>,
}

impl MemoryReport {
    pub fn to_table(&self) -> String {
        let mut s =
            String::from("arch\tbatch\tmodel_bytes\tdecoder_bytes\tstep_a\tstep_b\talternating_peak\tsimultaneous\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.arch_id,
                e.batch,
                (e.extractor + e.head).bytes(),
                e.decoder.bytes(),
                e.step_a,
                e.step_b,
                e.alternating_peak,
                e.simultaneous
            );
        }
        s
    }
}
