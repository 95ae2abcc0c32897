//! Starter configurations for `fedhe gen-config`.

use std::path::Path;

use fedhe::config::{ActivationName, ClientSpecConfig, DatasetConfig, ExperimentConfig};
use fedhe::protocol::{Method, StoreMode};

pub const TEMPLATES: [&str; 3] = ["homogeneous", "heterogeneous", "synthetic-smoke"];

/// Hidden widths and dropout per client: five two-hidden-layer models and
/// five three-hidden-layer models, no two alike.
const HETEROGENEOUS: [(&[usize], f64); 10] = [
    (&[128, 256], 0.2),
    (&[128, 384], 0.2),
    (&[128, 512], 0.2),
    (&[256, 256], 0.3),
    (&[256, 512], 0.4),
    (&[64, 128, 256], 0.2),
    (&[64, 128, 192], 0.2),
    (&[128, 192, 256], 0.2),
    (&[128, 128, 128], 0.3),
    (&[128, 128, 198], 0.3),
];

const HOMOGENEOUS: (&[usize], f64) = (&[128, 128, 198], 0.3);

fn client(hidden: &[usize], dropout: f64) -> ClientSpecConfig {
    ClientSpecConfig {
        hidden: hidden.to_vec(),
        activation: ActivationName::Relu,
        dropout,
    }
}

fn base(
    method: Method,
    clients: Vec<ClientSpecConfig>,
    dataset: DatasetConfig,
    rounds: u64,
    eval_every: f64,
) -> ExperimentConfig {
    ExperimentConfig {
        method,
        clients: clients.len(),
        seed: 1,
        rounds,
        horizon: None,
        batch_size: 32,
        inner_epochs: 3,
        alpha: 1.0,
        lr: 0.001,
        store_mode: StoreMode::Latest,
        eval_every,
        n_public: 10,
        public_fraction: 0.1,
        logit_exchange: true,
        track_global_loss: false,
        speeds: None,
        dataset,
        client_specs: clients,
    }
}

fn mnist(data_dir: &Path) -> DatasetConfig {
    DatasetConfig::Idx {
        images: data_dir.join("images-idx3-ubyte"),
        labels: data_dir.join("labels-idx1-ubyte"),
        test_images: None,
        test_labels: None,
        limit: None,
        test_count: Some(2000),
        subtract_mean: true,
    }
}

/// Builds the named template; `data_dir` holds the IDX files used by the
/// MNIST templates.
pub fn generate(name: &str, data_dir: &Path) -> Option<ExperimentConfig> {
    let cfg = match name {
        "homogeneous" => base(
            Method::FedHe,
            (0..10)
                .map(|_| client(HOMOGENEOUS.0, HOMOGENEOUS.1))
                .collect(),
            mnist(data_dir),
            1000,
            10.0,
        ),
        "heterogeneous" => base(
            Method::FedHe,
            HETEROGENEOUS.iter().map(|(h, d)| client(h, *d)).collect(),
            mnist(data_dir),
            1000,
            10.0,
        ),
        "synthetic-smoke" => base(
            Method::FedHe,
            (0..10).map(|k| client(&[16 + 4 * k], 0.0)).collect(),
            DatasetConfig::Synthetic {
                classes: 10,
                input_dim: 8,
                train_per_class: 100,
                test_per_class: 20,
                subtract_mean: true,
            },
            1000,
            20.0,
        ),
        _ => return None,
    };
    Some(cfg)
}

pub fn render(name: &str, cfg: &ExperimentConfig) -> String {
    format!(
        "# fedhe experiment config, generated from the '{name}' template.\n\
         # Override any field on the command line with --set key=value.\n\n{}",
        cfg.to_toml()
    )
}
