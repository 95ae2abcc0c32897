//! End-to-end experiment runs.
//!
//! FedHe and Private are asynchronous: every client trains on its own clock
//! (`speed` simulated seconds per round) and the server reacts to each
//! completion as it arrives, never waiting for the others. FedAvg and
//! FedMD-lite are synchronous: a round ends when the slowest client does.

mod events;
mod metrics;

use std::sync::Arc;

use thiserror::Error;

pub use events::{EventKind, EventQueue, SimEvent};
pub use metrics::{MetricsRow, RunSummary, SCHEMA_VERSION};

use crate::config::{ConfigError, DatasetConfig, ExperimentConfig, Method};
use crate::data::{self, DataError, Dataset, Partition, Sample};
use crate::nn::{cross_entropy, param_count, predict, Mode, Model, NnError, Parameters};
use crate::protocol::{
    comm_cost, reduced_rate, CommLedger, CostParams, LogitUpdate, MessageKind, ProtocolError,
    ServerLogitStore,
};
use crate::seed::{derive_rng, derive_seed};
use crate::trainer::{ClientState, RoundConfig, TrainError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl RunError {
    pub fn is_config(&self) -> bool {
        matches!(self, RunError::Config(_))
    }
}

fn config_error(field: &str, constraint: String) -> RunError {
    RunError::Config(ConfigError::Invalid {
        field: field.into(),
        constraint,
    })
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: Method,
    pub rows: Vec<MetricsRow>,
    pub ledger: CommLedger,
    pub rounds_per_client: Vec<u64>,
    pub server_events: u64,
    pub final_time: f64,
    /// Uploaded logits, one CSV row per class (FedHe only).
    pub logit_rows: Vec<String>,
    /// FedAvg global training loss after each round, when tracked.
    pub global_train_loss: Vec<f64>,
    pub summary: RunSummary,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> String {
        let clients = self.rounds_per_client.len();
        let mut out = MetricsRow::csv_header(clients);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn logits_csv(&self) -> String {
        let mut out = LogitUpdate::csv_header(self.summary.class_count);
        out.push('\n');
        for row in &self.logit_rows {
            out.push_str(row);
            out.push('\n');
        }
        out
    }

    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("every run emits a final row")
    }
}

/// Fraction of correct predictions per model, without dropout.
pub fn evaluate(models: &[&Model], test: &Dataset) -> Result<Vec<f64>, NnError> {
    models
        .iter()
        .map(|model| {
            if test.is_empty() {
                return Ok(0.0);
            }
            let mut correct = 0usize;
            for s in test.samples() {
                if predict(&model.forward(&s.x, Mode::Eval)?) == s.y {
                    correct += 1;
                }
            }
            Ok(correct as f64 / test.len() as f64)
        })
        .collect()
}

/// `Σ_k (n_k / N) · w_k`, computed as `(Σ_k n_k · w_k) / N`.
pub fn fedavg_aggregate(models: &[(&Parameters, usize)]) -> Result<Parameters, NnError> {
    let (first, _) = models
        .first()
        .ok_or(NnError::InvalidSpec("no models to aggregate".into()))?;
    let total: usize = models.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(NnError::InvalidSpec(
            "aggregation weights sum to zero".into(),
        ));
    }
    let mut acc = (*first).clone();
    acc.scale(0.0);
    for (params, n) in models {
        acc.add_scaled(params, *n as f64)?;
    }
    let total = total as f64;
    acc.iter_mut().for_each(|v| *v /= total);
    Ok(acc)
}

/// Per-instance mean over clients. `client_logits[k][i]` is client `k`'s
/// logit vector for public instance `i`.
pub fn fedmd_consensus(client_logits: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let Some(first) = client_logits.first() else {
        return Vec::new();
    };
    let n = client_logits.len() as f64;
    (0..first.len())
        .map(|i| {
            let mut mean = vec![0.0; first[i].len()];
            for client in client_logits {
                mean.iter_mut().zip(&client[i]).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n);
            mean
        })
        .collect()
}

/// Prepared data and config for one run.
#[derive(Debug, Clone)]
pub struct Experiment {
    cfg: ExperimentConfig,
    partition: Partition,
    test: Dataset,
    public: Option<Dataset>,
    descriptor: String,
}

impl Experiment {
    /// Loads or generates the data, subtracts the training mean, holds out
    /// the FedMD public set when needed and partitions the rest IID.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let seed = cfg.seed;
        let (train, test, subtract, descriptor) = match &cfg.dataset {
            DatasetConfig::Synthetic {
                classes,
                input_dim,
                train_per_class,
                test_per_class,
                subtract_mean,
            } => {
                let train = data::gen_synthetic(
                    *classes,
                    *input_dim,
                    *train_per_class,
                    derive_seed(seed, "synthetic-train", 0),
                )?;
                let test = data::gen_synthetic(
                    *classes,
                    *input_dim,
                    *test_per_class,
                    derive_seed(seed, "synthetic-test", 0),
                )?;
                let desc = format!(
                    "synthetic:c{classes}:d{input_dim}:n{train_per_class}:t{test_per_class}"
                );
                (train, test, *subtract_mean, desc)
            }
            DatasetConfig::Idx {
                images,
                labels,
                test_images,
                test_labels,
                limit,
                test_count,
                subtract_mean,
            } => {
                let mut full = data::load_idx(images, labels)?;
                if let Some(limit) = limit {
                    full = full.truncated(*limit);
                }
                let (train, test) = match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => (full, data::load_idx(ti, tl)?),
                    _ => {
                        full.split_off(test_count.unwrap_or(0), derive_seed(seed, "holdout", 0))?
                    }
                };
                let desc = format!(
                    "idx:c{}:d{}:n{}:t{}",
                    train.class_count(),
                    train.input_dim(),
                    train.len(),
                    test.len()
                );
                (train, test, *subtract_mean, desc)
            }
        };
        if test.input_dim() != train.input_dim() {
            return Err(DataError::DimMismatch {
                expected: train.input_dim(),
                found: test.input_dim(),
            }
            .into());
        }
        let (train, test) = if subtract {
            let (train, mut others, _) = data::subtract_mean(&train, &[&test])?;
            (train, others.remove(0))
        } else {
            (train, test)
        };
        let (train, public) = if cfg.method == Method::FedMd {
            let held = ((train.len() as f64) * cfg.public_fraction)
                .round()
                .max(1.0) as usize;
            let (rest, public) = train.split_off(held, derive_seed(seed, "public", 0))?;
            if cfg.n_public > public.len() {
                return Err(config_error(
                    "n_public",
                    format!(
                        "{} exceeds the public set of {} samples",
                        cfg.n_public,
                        public.len()
                    ),
                ));
            }
            (rest, Some(public))
        } else {
            (train, None)
        };
        let partition =
            data::partition_iid(&train, cfg.clients, derive_seed(seed, "partition", 0))?;
        Self::from_parts(cfg.clone(), partition, test, public, descriptor)
    }

    /// Builds an experiment from already prepared data.
    pub fn from_parts(
        cfg: ExperimentConfig,
        partition: Partition,
        test: Dataset,
        public: Option<Dataset>,
        descriptor: String,
    ) -> Result<Self, RunError> {
        cfg.validate()?;
        if partition.client_datasets.len() != cfg.clients {
            return Err(config_error(
                "clients",
                format!(
                    "{} clients configured but {} partitions given",
                    cfg.clients,
                    partition.client_datasets.len()
                ),
            ));
        }
        if cfg.method == Method::FedMd {
            let public = public
                .as_ref()
                .ok_or_else(|| config_error("n_public", "fedmd needs a public set".into()))?;
            if cfg.n_public > public.len() {
                return Err(config_error(
                    "n_public",
                    format!(
                        "{} exceeds the public set of {} samples",
                        cfg.n_public,
                        public.len()
                    ),
                ));
            }
        }
        Ok(Self {
            cfg,
            partition,
            test,
            public,
            descriptor,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    fn class_count(&self) -> usize {
        self.test.class_count()
    }

    fn input_dim(&self) -> usize {
        self.test.input_dim()
    }

    fn round_config(&self) -> RoundConfig {
        RoundConfig {
            inner_epochs: self.cfg.inner_epochs,
            batch_size: self.cfg.batch_size,
            alpha: self.cfg.alpha,
        }
    }

    fn build_clients(&self) -> Result<Vec<ClientState>, RunError> {
        let speeds = self.cfg.client_speeds();
        let (classes, dim) = (self.class_count(), self.input_dim());
        self.cfg
            .client_specs
            .iter()
            .zip(&self.partition.client_datasets)
            .enumerate()
            .map(|(k, (spec_cfg, dataset))| {
                if self.cfg.batch_size > dataset.len() {
                    return Err(config_error(
                        "batch_size",
                        format!(
                            "{} exceeds client {k}'s {} samples",
                            self.cfg.batch_size,
                            dataset.len()
                        ),
                    ));
                }
                let spec = spec_cfg
                    .model_spec(dim, classes)
                    .map_err(|e| config_error(&format!("client[{k}]"), e.to_string()))?;
                let model = Model::new(spec, derive_seed(self.cfg.seed, "model", k as u64));
                Ok(ClientState::new(
                    k,
                    model,
                    Arc::new(dataset.clone()),
                    derive_rng(self.cfg.seed, "client", k as u64),
                    speeds[k],
                    self.cfg.lr,
                )?)
            })
            .collect()
    }

    fn cost_params(&self, param_count: u64) -> CostParams {
        CostParams {
            class_count: self.class_count() as u64,
            input_dim: self.input_dim() as u64,
            param_count,
            n_public: self.cfg.n_public as u64,
        }
    }

    fn row(
        &self,
        time: f64,
        round: u64,
        accuracies: Vec<f64>,
        losses: &[Option<f64>],
        ledger: &CommLedger,
    ) -> MetricsRow {
        let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        MetricsRow {
            time,
            round,
            accuracies,
            mean_accuracy,
            losses: losses.to_vec(),
            comm: ledger.client_totals().to_vec(),
            comm_total: ledger.total(),
        }
    }

    fn client_row(
        &self,
        time: f64,
        round: u64,
        clients: &[ClientState],
        losses: &[Option<f64>],
        ledger: &CommLedger,
    ) -> Result<MetricsRow, RunError> {
        let models: Vec<&Model> = clients.iter().map(ClientState::model).collect();
        let accuracies = evaluate(&models, &self.test)?;
        Ok(self.row(time, round, accuracies, losses, ledger))
    }

    fn push_final(
        rows: &mut Vec<MetricsRow>,
        row: impl FnOnce() -> Result<MetricsRow, RunError>,
        time: f64,
        round: u64,
    ) -> Result<(), RunError> {
        if rows
            .last()
            .is_none_or(|r| r.time != time || r.round != round)
        {
            rows.push(row()?);
        }
        Ok(())
    }

    pub fn run(&self) -> Result<RunOutput, RunError> {
        match self.cfg.method {
            Method::FedHe => self.run_fedhe(),
            Method::Private => self.run_private(),
            Method::FedAvg => self.run_fedavg(),
            Method::FedMd => self.run_fedmd_lite(),
        }
    }

    /// The asynchronous logit-exchange run; with `logit_exchange = false`
    /// clients train alone.
    pub fn run_fedhe(&self) -> Result<RunOutput, RunError> {
        self.run_async(Method::FedHe, self.cfg.logit_exchange)
    }

    pub fn run_private(&self) -> Result<RunOutput, RunError> {
        self.run_async(Method::Private, false)
    }

    fn run_async(&self, method: Method, exchange: bool) -> Result<RunOutput, RunError> {
        let cfg = &self.cfg;
        let k_count = cfg.clients;
        let mut clients = self.build_clients()?;
        let round_cfg = self.round_config();
        let mut store = ServerLogitStore::new(self.class_count(), cfg.store_mode);
        let mut ledger = CommLedger::new(method, k_count);
        let mut queue = EventQueue::new();
        for (k, client) in clients.iter().enumerate() {
            queue.schedule(client.speed(), EventKind::ClientFinishes(k));
        }
        queue.schedule(cfg.eval_every, EventKind::Evaluate);

        let horizon = cfg.horizon.unwrap_or(f64::INFINITY);
        let mut rows = Vec::new();
        let mut logit_rows = Vec::new();
        let mut losses = vec![None; k_count];
        let mut events = 0u64;
        let mut time = 0.0;
        while events < cfg.rounds {
            let event = queue.pop().expect("clients always reschedule");
            if event.time > horizon {
                break;
            }
            time = event.time;
            match event.kind {
                EventKind::Evaluate => {
                    rows.push(self.client_row(time, events, &clients, &losses, &ledger)?);
                    queue.schedule(time + cfg.eval_every, EventKind::Evaluate);
                }
                EventKind::ClientFinishes(k) => {
                    let client = &mut clients[k];
                    let average = client.take_average();
                    let own_round = client.rounds_completed();
                    let (update, report) = client.client_round(average, &round_cfg, own_round)?;
                    losses[k] = Some(report.mean_total_loss);
                    events += 1;
                    if exchange {
                        store.receive(&update)?;
                        ledger.charge(k, events, MessageKind::LogitsUp, update.wire_floats());
                        logit_rows.extend(update.csv_rows(events));
                        let reply = store.average();
                        ledger.charge(k, events, MessageKind::LogitsDown, reply.wire_floats());
                        client.set_average(Some(reply));
                    } else {
                        client.set_average(None);
                    }
                    queue.schedule(time + client.speed(), EventKind::ClientFinishes(k));
                }
            }
        }
        Self::push_final(
            &mut rows,
            || self.client_row(time, events, &clients, &losses, &ledger),
            time,
            events,
        )?;
        let rounds_per_client = clients.iter().map(ClientState::rounds_completed).collect();
        let param_counts = clients
            .iter()
            .map(|c| c.model().param_count() as u64)
            .collect();
        Ok(self.finish(
            method,
            rows,
            ledger,
            rounds_per_client,
            events,
            time,
            logit_rows,
            Vec::new(),
            param_counts,
        ))
    }

    /// Synchronous weight averaging; requires identical client specs.
    pub fn run_fedavg(&self) -> Result<RunOutput, RunError> {
        let cfg = &self.cfg;
        let odd = cfg.heterogeneous_clients();
        if !odd.is_empty() {
            return Err(config_error(
                "client",
                format!(
                    "fedavg requires identical client specs; clients {odd:?} differ from client 0"
                ),
            ));
        }
        let mut clients = self.build_clients()?;
        let spec = clients[0].model().spec().clone();
        let params_per_model = param_count(&spec) as u64;
        let mut global = Model::new(spec, derive_seed(cfg.seed, "global", 0));
        let sizes: Vec<usize> = self.partition.sizes();
        let round_cfg = self.round_config();
        let round_time = cfg.client_speeds().into_iter().fold(0.0, f64::max);
        let horizon = cfg.horizon.unwrap_or(f64::INFINITY);

        let mut ledger = CommLedger::new(Method::FedAvg, cfg.clients);
        let mut rows = Vec::new();
        let mut losses = vec![None; cfg.clients];
        let mut global_loss = Vec::new();
        let mut time = 0.0;
        let mut next_eval = cfg.eval_every;
        let mut rounds = 0u64;
        let global_row =
            |time, round, global: &Model, losses: &[Option<f64>], ledger: &CommLedger| {
                let acc = evaluate(&[global], &self.test)?[0];
                Ok::<_, RunError>(self.row(time, round, vec![acc; cfg.clients], losses, ledger))
            };
        while rounds < cfg.rounds && time + round_time <= horizon {
            rounds += 1;
            for (k, client) in clients.iter_mut().enumerate() {
                client
                    .model_mut()
                    .set_parameters(global.parameters().clone())?;
                ledger.charge(k, rounds, MessageKind::WeightsDown, params_per_model);
                let own_round = client.rounds_completed();
                let (_, report) = client.client_round(None, &round_cfg, own_round)?;
                losses[k] = Some(report.mean_total_loss);
                ledger.charge(k, rounds, MessageKind::WeightsUp, params_per_model);
            }
            let weighted: Vec<(&Parameters, usize)> = clients
                .iter()
                .zip(&sizes)
                .map(|(c, &n)| (c.model().parameters(), n))
                .collect();
            global.set_parameters(fedavg_aggregate(&weighted)?)?;
            time += round_time;
            if cfg.track_global_loss {
                global_loss.push(self.global_train_loss(&global)?);
            }
            if time >= next_eval {
                rows.push(global_row(time, rounds, &global, &losses, &ledger)?);
                while next_eval <= time {
                    next_eval += cfg.eval_every;
                }
            }
        }
        Self::push_final(
            &mut rows,
            || global_row(time, rounds, &global, &losses, &ledger),
            time,
            rounds,
        )?;
        let rounds_per_client = clients.iter().map(ClientState::rounds_completed).collect();
        let param_counts = vec![params_per_model; cfg.clients];
        Ok(self.finish(
            Method::FedAvg,
            rows,
            ledger,
            rounds_per_client,
            rounds,
            time,
            Vec::new(),
            global_loss,
            param_counts,
        ))
    }

    fn global_train_loss(&self, model: &Model) -> Result<f64, NnError> {
        let mut total = 0.0;
        let mut n = 0usize;
        for d in &self.partition.client_datasets {
            for s in d.samples() {
                total += cross_entropy(&model.forward(&s.x, Mode::Eval)?, s.y)?.loss;
                n += 1;
            }
        }
        Ok(total / n.max(1) as f64)
    }

    /// Synchronous public-set distillation: per round every client emits
    /// logits on `n_public` shared public samples, takes one step toward the
    /// per-instance consensus, then trains privately.
    pub fn run_fedmd_lite(&self) -> Result<RunOutput, RunError> {
        let cfg = &self.cfg;
        let public = self
            .public
            .as_ref()
            .ok_or_else(|| config_error("n_public", "fedmd needs a public set".into()))?;
        let mut clients = self.build_clients()?;
        let round_cfg = self.round_config();
        let round_time = cfg.client_speeds().into_iter().fold(0.0, f64::max);
        let horizon = cfg.horizon.unwrap_or(f64::INFINITY);
        let mut public_rng = derive_rng(cfg.seed, "fedmd-public", 0);
        let n = cfg.n_public as u64;
        let (c, d) = (self.class_count() as u64, self.input_dim() as u64);

        let mut ledger = CommLedger::new(Method::FedMd, cfg.clients);
        let mut rows = Vec::new();
        let mut losses = vec![None; cfg.clients];
        let mut time = 0.0;
        let mut next_eval = cfg.eval_every;
        let mut rounds = 0u64;
        while rounds < cfg.rounds && time + round_time <= horizon {
            rounds += 1;
            let picks = data::sample_batch(public, cfg.n_public, &mut public_rng)?;
            let samples: Vec<&Sample> = picks.iter().map(|&i| public.get(i)).collect();
            let mut emitted = Vec::with_capacity(clients.len());
            for (k, client) in clients.iter().enumerate() {
                ledger.charge(k, rounds, MessageKind::SamplesDown, n * d);
                let logits = samples
                    .iter()
                    .map(|s| Ok(client.model().forward(&s.x, Mode::Eval)?.logits().to_vec()))
                    .collect::<Result<Vec<_>, NnError>>()?;
                ledger.charge(k, rounds, MessageKind::LogitsUp, n * c);
                emitted.push(logits);
            }
            let consensus = fedmd_consensus(&emitted);
            for (k, client) in clients.iter_mut().enumerate() {
                ledger.charge(k, rounds, MessageKind::ConsensusDown, n * c);
                client.train_consensus_step(&samples, &consensus)?;
                let own_round = client.rounds_completed();
                let (_, report) = client.client_round(None, &round_cfg, own_round)?;
                losses[k] = Some(report.mean_total_loss);
            }
            time += round_time;
            if time >= next_eval {
                rows.push(self.client_row(time, rounds, &clients, &losses, &ledger)?);
                while next_eval <= time {
                    next_eval += cfg.eval_every;
                }
            }
        }
        Self::push_final(
            &mut rows,
            || self.client_row(time, rounds, &clients, &losses, &ledger),
            time,
            rounds,
        )?;
        let rounds_per_client = clients.iter().map(ClientState::rounds_completed).collect();
        let param_counts = clients
            .iter()
            .map(|c| c.model().param_count() as u64)
            .collect();
        Ok(self.finish(
            Method::FedMd,
            rows,
            ledger,
            rounds_per_client,
            rounds,
            time,
            Vec::new(),
            Vec::new(),
            param_counts,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        method: Method,
        rows: Vec<MetricsRow>,
        ledger: CommLedger,
        rounds_per_client: Vec<u64>,
        server_events: u64,
        final_time: f64,
        logit_rows: Vec<String>,
        global_train_loss: Vec<f64>,
        param_counts: Vec<u64>,
    ) -> RunOutput {
        let homogeneous = self.cfg.heterogeneous_clients().is_empty();
        let fedavg_param_count = homogeneous.then(|| param_counts[0]);
        let per_round_cost = comm_cost(method, &self.cost_params(fedavg_param_count.unwrap_or(0)));
        let reduced = fedavg_param_count.and_then(|p| reduced_rate(per_round_cost, p).ok());
        let last = rows.last().expect("final row pushed");
        let summary = RunSummary {
            schema_version: SCHEMA_VERSION,
            method,
            seed: self.cfg.seed,
            dataset: self.descriptor.clone(),
            clients: self.cfg.clients,
            class_count: self.class_count(),
            input_dim: self.input_dim(),
            n_public: self.cfg.n_public,
            server_events,
            final_time,
            rounds_per_client: rounds_per_client.clone(),
            final_accuracies: last.accuracies.clone(),
            final_mean_accuracy: last.mean_accuracy,
            comm_total: ledger.total(),
            comm_tabulated_total: ledger.tabulated_total(),
            per_round_cost,
            param_counts,
            fedavg_param_count,
            reduced_rate: reduced,
        };
        RunOutput {
            method,
            rows,
            ledger,
            rounds_per_client,
            server_events,
            final_time,
            logit_rows,
            global_train_loss,
            summary,
        }
    }
}

fn check_method(cfg: &ExperimentConfig, expected: Method) -> Result<(), RunError> {
    if cfg.method != expected {
        return Err(config_error(
            "method",
            format!("expected {expected}, config says {}", cfg.method),
        ));
    }
    Ok(())
}

pub fn run_fedhe(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    check_method(cfg, Method::FedHe)?;
    Experiment::prepare(cfg)?.run_fedhe()
}

pub fn run_private(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    check_method(cfg, Method::Private)?;
    Experiment::prepare(cfg)?.run_private()
}

pub fn run_fedavg(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    check_method(cfg, Method::FedAvg)?;
    Experiment::prepare(cfg)?.run_fedavg()
}

pub fn run_fedmd_lite(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    check_method(cfg, Method::FedMd)?;
    Experiment::prepare(cfg)?.run_fedmd_lite()
}

/// Runs whichever method the config names.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    Experiment::prepare(cfg)?.run()
}
