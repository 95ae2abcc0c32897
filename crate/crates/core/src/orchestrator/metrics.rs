use serde::{Deserialize, Serialize};

use crate::protocol::Method;

/// Version of the metrics CSV layout and run summary.
pub const SCHEMA_VERSION: u32 = 1;

/// One evaluation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub time: f64,
    /// Server events (asynchronous methods) or synchronous rounds so far.
    pub round: u64,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Loss of each client's latest round; `None` before its first round.
    pub losses: Vec<Option<f64>>,
    /// Cumulative floats per client, all message kinds.
    pub comm: Vec<u64>,
    pub comm_total: u64,
}

impl MetricsRow {
    pub fn csv_header(clients: usize) -> String {
        let mut cols = vec!["time".to_string(), "round".to_string()];
        cols.extend((0..clients).map(|k| format!("acc_{k}")));
        cols.push("mean_acc".into());
        cols.extend((0..clients).map(|k| format!("loss_{k}")));
        cols.extend((0..clients).map(|k| format!("comm_{k}")));
        cols.push("comm_total".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut cols = vec![self.time.to_string(), self.round.to_string()];
        cols.extend(self.accuracies.iter().map(|a| format!("{a:.6}")));
        cols.push(format!("{:.6}", self.mean_accuracy));
        cols.extend(
            self.losses
                .iter()
                .map(|l| l.map(|v| format!("{v:.6}")).unwrap_or_default()),
        );
        cols.extend(self.comm.iter().map(u64::to_string));
        cols.push(self.comm_total.to_string());
        cols.join(",")
    }
}

/// End-of-run figures, written next to the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub dataset: String,
    pub clients: usize,
    pub class_count: usize,
    pub input_dim: usize,
    pub n_public: usize,
    pub server_events: u64,
    pub final_time: f64,
    pub rounds_per_client: Vec<u64>,
    pub final_accuracies: Vec<f64>,
    pub final_mean_accuracy: f64,
    pub comm_total: u64,
    /// Floats of the tabulated message kinds, summed over clients and rounds.
    pub comm_tabulated_total: u64,
    /// Tabulated floats per client per round.
    pub per_round_cost: u64,
    pub param_counts: Vec<u64>,
    /// Set when every client shares one spec, so a FedAvg baseline exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fedavg_param_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduced_rate: Option<f64>,
}

impl RunSummary {
    pub fn line(&self) -> String {
        let accs: Vec<String> = self
            .final_accuracies
            .iter()
            .map(|a| format!("{a:.4}"))
            .collect();
        let rate = self
            .reduced_rate
            .map(|r| format!("{:.2}%", r * 100.0))
            .unwrap_or_else(|| "n/a".into());
        format!(
            "method={} final_acc=[{}] mean_acc={:.4} comm_total={} per_round={} reduced_rate={}",
            self.method,
            accs.join(","),
            self.final_mean_accuracy,
            self.comm_total,
            self.per_round_cost,
            rate
        )
    }
}
