//! Logit-exchange protocol.
//!
//! Clients sum the logits their model produces for each class while
//! training and divide by `count + 1` when the round ends. The server keeps
//! the received per-class vectors and answers every upload with the per-class
//! arithmetic mean of what it holds. [`CommLedger`] counts every float that
//! crosses the client/server boundary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("logit vector for class {class} has length {found}, expected {expected}")]
    Dimension {
        class: usize,
        expected: usize,
        found: usize,
    },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("update carries class {0} more than once")]
    DuplicateClass(usize),
    #[error("update for {found} classes sent to a store of {expected} classes")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("non-finite logit for class {0}")]
    NonFinite(usize),
    #[error("accumulator already finalized; accumulate before finalizing again")]
    AlreadyFinalized,
    #[error("unknown method '{0}' (expected fedhe, fedavg, fedmd or private)")]
    UnknownMethod(String),
    #[error("baseline cost must be positive")]
    ZeroBaseline,
}

/// Running per-class logit sums and counts for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogitAccumulator {
    class_count: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<u64>,
    consumed: bool,
}

impl ClassLogitAccumulator {
    pub fn new(class_count: usize) -> Self {
        Self {
            class_count,
            sums: vec![vec![0.0; class_count]; class_count],
            counts: vec![0; class_count],
            consumed: false,
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn sums(&self) -> &[Vec<f64>] {
        &self.sums
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn check(&self, logits: &[f64], class: usize) -> Result<(), ProtocolError> {
        if class >= self.class_count {
            return Err(ProtocolError::ClassOutOfRange {
                class,
                classes: self.class_count,
            });
        }
        if logits.len() != self.class_count {
            return Err(ProtocolError::Dimension {
                class,
                expected: self.class_count,
                found: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ProtocolError::NonFinite(class));
        }
        Ok(())
    }

    /// Adds a batch of `(logits, class)` pairs. The whole batch is validated
    /// before anything is added.
    pub fn accumulate<'a, I>(&mut self, batch: I) -> Result<(), ProtocolError>
    where
        I: IntoIterator<Item = (&'a [f64], usize)>,
    {
        let batch: Vec<_> = batch.into_iter().collect();
        for &(logits, class) in &batch {
            self.check(logits, class)?;
        }
        if batch.is_empty() {
            return Ok(());
        }
        self.consumed = false;
        for (logits, class) in batch {
            self.sums[class]
                .iter_mut()
                .zip(logits)
                .for_each(|(s, v)| *s += v);
            self.counts[class] += 1;
        }
        Ok(())
    }

    /// Emits `sum / (count + 1)` for every class and resets the sums.
    ///
    /// Classes with no instances yield the zero vector. A second call without
    /// an intervening [`accumulate`](Self::accumulate) or
    /// [`reset`](Self::reset) fails.
    pub fn finalize(&mut self, client: usize) -> Result<LogitUpdate, ProtocolError> {
        if self.consumed {
            return Err(ProtocolError::AlreadyFinalized);
        }
        let entries = (0..self.class_count)
            .map(|class| {
                let denom = self.counts[class] as f64 + 1.0;
                ClassLogits {
                    class,
                    count: self.counts[class],
                    logits: self.sums[class].iter().map(|s| s / denom).collect(),
                }
            })
            .collect();
        self.clear();
        self.consumed = true;
        Ok(LogitUpdate {
            client,
            class_count: self.class_count,
            entries,
        })
    }

    pub fn reset(&mut self) {
        self.clear();
        self.consumed = false;
    }

    fn clear(&mut self) {
        self.sums.iter_mut().for_each(|s| s.fill(0.0));
        self.counts.fill(0);
    }
}

/// One `(p_y, y)` pair of an update. `count` is the number of instances that
/// contributed; it is logged but not part of the wire payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogits {
    pub class: usize,
    pub count: u64,
    pub logits: Vec<f64>,
}

/// A client's per-round upload.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitUpdate {
    pub client: usize,
    pub class_count: usize,
    pub entries: Vec<ClassLogits>,
}

impl LogitUpdate {
    /// Floats on the wire: `C` logits plus one label per class carried.
    pub fn wire_floats(&self) -> u64 {
        (self.entries.len() * (self.class_count + 1)) as u64
    }

    pub fn csv_header(class_count: usize) -> String {
        let mut header = String::from("round,client,y,V");
        for c in 0..class_count {
            header.push_str(&format!(",p{c}"));
        }
        header
    }

    /// One CSV row per class: `round,client,y,V,p_0..p_{C-1}`.
    pub fn csv_rows(&self, round: u64) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| {
                let mut row = format!("{round},{},{},{}", self.client, e.class, e.count);
                for v in &e.logits {
                    row.push(',');
                    row.push_str(&v.to_string());
                }
                row
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreMode {
    /// Keep only the newest vector per `(client, class)`.
    #[default]
    Latest,
    /// Keep every vector ever received.
    Append,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredLogit {
    pub client: usize,
    pub logits: Vec<f64>,
}

/// Per-class logit store held by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerLogitStore {
    class_count: usize,
    mode: StoreMode,
    /// In `Latest` mode each class list is sorted by client id.
    classes: Vec<Vec<StoredLogit>>,
}

impl ServerLogitStore {
    pub fn new(class_count: usize, mode: StoreMode) -> Self {
        Self {
            class_count,
            mode,
            classes: vec![Vec::new(); class_count],
        }
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    pub fn entries(&self, class: usize) -> &[StoredLogit] {
        &self.classes[class]
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, update: &LogitUpdate) -> Result<(), ProtocolError> {
        if update.class_count != self.class_count {
            return Err(ProtocolError::ClassCountMismatch {
                expected: self.class_count,
                found: update.class_count,
            });
        }
        let mut seen = vec![false; self.class_count];
        for e in &update.entries {
            if e.class >= self.class_count {
                return Err(ProtocolError::ClassOutOfRange {
                    class: e.class,
                    classes: self.class_count,
                });
            }
            if std::mem::replace(&mut seen[e.class], true) {
                return Err(ProtocolError::DuplicateClass(e.class));
            }
            if e.logits.len() != self.class_count {
                return Err(ProtocolError::Dimension {
                    class: e.class,
                    expected: self.class_count,
                    found: e.logits.len(),
                });
            }
            if e.logits.iter().any(|v| !v.is_finite()) {
                return Err(ProtocolError::NonFinite(e.class));
            }
        }
        Ok(())
    }

    /// Stores an update. A malformed update leaves the store untouched.
    pub fn receive(&mut self, update: &LogitUpdate) -> Result<(), ProtocolError> {
        self.validate(update)?;
        for e in &update.entries {
            let stored = StoredLogit {
                client: update.client,
                logits: e.logits.clone(),
            };
            let list = &mut self.classes[e.class];
            match self.mode {
                StoreMode::Append => list.push(stored),
                StoreMode::Latest => {
                    match list.binary_search_by_key(&update.client, |s| s.client) {
                        Ok(pos) => list[pos] = stored,
                        Err(pos) => list.insert(pos, stored),
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-class arithmetic mean; classes with nothing stored are absent.
    pub fn average(&self) -> AverageLogits {
        let per_class = self
            .classes
            .iter()
            .map(|list| {
                if list.is_empty() {
                    return None;
                }
                let mut mean = vec![0.0; self.class_count];
                for s in list {
                    mean.iter_mut().zip(&s.logits).for_each(|(m, v)| *m += v);
                }
                let n = list.len() as f64;
                mean.iter_mut().for_each(|m| *m /= n);
                Some(mean)
            })
            .collect();
        AverageLogits {
            class_count: self.class_count,
            per_class,
        }
    }
}

/// The server's reply: one target vector per class that has data.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageLogits {
    class_count: usize,
    per_class: Vec<Option<Vec<f64>>>,
}

impl AverageLogits {
    pub fn new(
        class_count: usize,
        per_class: Vec<Option<Vec<f64>>>,
    ) -> Result<Self, ProtocolError> {
        if per_class.len() != class_count {
            return Err(ProtocolError::ClassCountMismatch {
                expected: class_count,
                found: per_class.len(),
            });
        }
        for (class, v) in per_class.iter().enumerate() {
            if let Some(v) = v {
                if v.len() != class_count {
                    return Err(ProtocolError::Dimension {
                        class,
                        expected: class_count,
                        found: v.len(),
                    });
                }
            }
        }
        Ok(Self {
            class_count,
            per_class,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.per_class.get(class).and_then(|v| v.as_deref())
    }

    pub fn present_classes(&self) -> usize {
        self.per_class.iter().filter(|v| v.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.present_classes() == 0
    }

    pub fn wire_floats(&self) -> u64 {
        (self.present_classes() * (self.class_count + 1)) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedHe,
    FedAvg,
    FedMd,
    Private,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::FedHe,
        Method::FedAvg,
        Method::FedMd,
        Method::Private,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedHe => "fedhe",
            Method::FedAvg => "fedavg",
            Method::FedMd => "fedmd",
            Method::Private => "private",
        }
    }

    /// Whether traffic of `kind` is part of the per-client per-round overhead
    /// reported for this method by [`comm_cost`].
    pub fn tabulates(self, kind: MessageKind) -> bool {
        use MessageKind::*;
        matches!(
            (self, kind),
            (Method::FedHe, LogitsUp)
                | (Method::FedAvg, WeightsUp)
                | (Method::FedMd, LogitsUp)
                | (Method::FedMd, SamplesDown)
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ProtocolError::UnknownMethod(s.to_string()))
    }
}

/// Inputs to [`comm_cost`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostParams {
    pub class_count: u64,
    pub input_dim: u64,
    pub param_count: u64,
    pub n_public: u64,
}

/// Floats per client per round, counted the way the overhead tables count
/// them: logits with their label for FedHe, one weight set for FedAvg, and
/// public samples plus their logits for FedMD.
pub fn comm_cost(method: Method, p: &CostParams) -> u64 {
    match method {
        Method::FedHe => p.class_count * (p.class_count + 1),
        Method::FedAvg => p.param_count,
        Method::FedMd => p.n_public * (p.class_count + p.input_dim),
        Method::Private => 0,
    }
}

/// `1 − method_cost / fedavg_cost`.
pub fn reduced_rate(method_cost: u64, fedavg_cost: u64) -> Result<f64, ProtocolError> {
    if fedavg_cost == 0 {
        return Err(ProtocolError::ZeroBaseline);
    }
    Ok(1.0 - method_cost as f64 / fedavg_cost as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    LogitsUp,
    LogitsDown,
    WeightsUp,
    WeightsDown,
    /// Public samples fetched by a FedMD client.
    SamplesDown,
    /// FedMD consensus logits sent back to clients.
    ConsensusDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerEntry {
    pub client: usize,
    pub round: u64,
    pub kind: MessageKind,
    pub floats: u64,
}

/// Exact float counts per `(client, round, message kind)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommLedger {
    method: Method,
    entries: Vec<LedgerEntry>,
    per_client: Vec<u64>,
}

impl CommLedger {
    pub fn new(method: Method, clients: usize) -> Self {
        Self {
            method,
            entries: Vec::new(),
            per_client: vec![0; clients],
        }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn charge(&mut self, client: usize, round: u64, kind: MessageKind, floats: u64) {
        self.per_client[client] += floats;
        self.entries.push(LedgerEntry {
            client,
            round,
            kind,
            floats,
        });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Running totals per client, all message kinds.
    pub fn client_totals(&self) -> &[u64] {
        &self.per_client
    }

    pub fn total(&self) -> u64 {
        self.per_client.iter().sum()
    }

    pub fn round_total(&self, round: u64) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.round == round)
            .map(|e| e.floats)
            .sum()
    }

    /// Floats of the kinds [`comm_cost`] accounts for.
    pub fn tabulated_total(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| self.method.tabulates(e.kind))
            .map(|e| e.floats)
            .sum()
    }

    pub fn tabulated_client_total(&self, client: usize) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.client == client && self.method.tabulates(e.kind))
            .map(|e| e.floats)
            .sum()
    }
}
