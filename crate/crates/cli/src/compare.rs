//! Side-by-side report over finished runs.

use std::fs;
use std::path::{Path, PathBuf};

use fedhe::orchestrator::{RunSummary, SCHEMA_VERSION};
use fedhe::protocol::{reduced_rate, Method};

use crate::artifacts::RunManifest;
use crate::CliError;

#[derive(Debug)]
pub struct Loaded {
    pub manifest_path: PathBuf,
    pub summary: RunSummary,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn check_version(path: &Path, found: u32) -> Result<(), CliError> {
    if found != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "{}: schema_version {found} is not supported (expected {SCHEMA_VERSION})",
            path.display()
        )));
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = read(path)?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let version = table
        .get("schema_version")
        .and_then(toml::Value::as_integer)
        .ok_or_else(|| CliError::Config(format!("{}: missing schema_version", path.display())))?;
    check_version(path, u32::try_from(version).unwrap_or(u32::MAX))?;
    let manifest: RunManifest = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))?;
    let summary_path = &manifest.artifacts.summary;
    let summary: RunSummary = toml::from_str(&read(summary_path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", summary_path.display())))?;
    check_version(summary_path, summary.schema_version)?;
    Ok(Loaded {
        manifest_path: path.to_path_buf(),
        summary,
    })
}

/// Formats a reduction the way the overhead tables do: one decimal, with
/// reductions that round up to 100% shown as `>99.9%`.
pub fn format_rate(rate: f64) -> String {
    let pct = rate * 100.0;
    if pct > 99.9 && pct < 100.0 {
        ">99.9%".into()
    } else {
        format!("{pct:.1}%")
    }
}

/// Builds the comparison table. The FedAvg baseline cost is `param_count`
/// when given, otherwise the per-round cost of a FedAvg run in the set.
pub fn report(runs: &[Loaded], param_count: Option<u64>) -> Result<String, CliError> {
    if runs.len() < 2 {
        return Err(CliError::Config(
            "compare needs at least two manifests".into(),
        ));
    }
    let first = &runs[0];
    for run in &runs[1..] {
        if run.summary.dataset != first.summary.dataset {
            return Err(CliError::Config(format!(
                "dataset mismatch: {} uses '{}' but {} uses '{}'",
                first.manifest_path.display(),
                first.summary.dataset,
                run.manifest_path.display(),
                run.summary.dataset
            )));
        }
    }
    let baseline = param_count.or_else(|| {
        runs.iter()
            .find(|r| r.summary.method == Method::FedAvg)
            .map(|r| r.summary.per_round_cost)
    });
    let mut out = format!(
        "{:<8} {:>6} {:>10} {:>16} {:>13}\n",
        "method", "seed", "mean_acc", "floats_per_round", "reduced_rate"
    );
    for run in runs {
        let s = &run.summary;
        let rate = match baseline {
            Some(b) => reduced_rate(s.per_round_cost, b)
                .map(format_rate)
                .unwrap_or_else(|_| "n/a".into()),
            None => "n/a".into(),
        };
        out.push_str(&format!(
            "{:<8} {:>6} {:>10.4} {:>16} {:>13}\n",
            s.method.name(),
            s.seed,
            s.final_mean_accuracy,
            s.per_round_cost,
            rate
        ));
    }
    if let Some(b) = baseline {
        out.push_str(&format!("baseline: {b} floats per client per round\n"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_round_to_one_decimal() {
        assert_eq!(format_rate(1.0 - 7940.0 / 324_672.0), "97.6%");
        assert_eq!(format_rate(1.0 - 110.0 / 324_672.0), ">99.9%");
        assert_eq!(format_rate(0.0), "0.0%");
    }
}
