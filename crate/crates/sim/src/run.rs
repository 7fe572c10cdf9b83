//! One-shot experiment runs: register, publish, simulate a cohort, export.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tracing::info;
use vrlab_client::{Client, ClientError};
use vrlab_core::config::{bundled, ExperimentConfig};
use vrlab_core::dataplane::{ExportFormat, ExportKind};

use crate::cohort::{run_cohort, CohortOptions, CohortSpec};
use crate::SimError;

/// Bundled experiment configuration by id.
pub fn bundled_experiment(id: &str) -> Option<ExperimentConfig> {
    match id {
        "hand_redirection" => Some(bundled::hand_redirection()),
        "proteus_drumming" => Some(bundled::proteus_drumming()),
        "fitts_3d" => Some(bundled::fitts_3d()),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct RunPlan {
    pub config: ExperimentConfig,
    pub cohort: CohortSpec,
    /// Cohort size; the spec's own size when absent.
    pub n: Option<usize>,
    pub seed: u64,
    pub options: CohortOptions,
    /// Exports land in `<out_dir>/<experiment id>/`.
    pub out_dir: PathBuf,
    pub format: ExportFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment_id: String,
    pub sessions: usize,
    pub completed: usize,
    pub dropped: usize,
    pub failures: Vec<String>,
    pub export_dir: PathBuf,
    pub seconds: f64,
}

/// Registers (or reuses) and publishes the experiment, runs the cohort and
/// writes every export kind.
pub fn run_experiment(client: &Client, plan: &RunPlan) -> Result<RunSummary, SimError> {
    let started = Instant::now();
    let mut config = plan.config.clone();
    if let Some(rate) = plan.cohort.tracking_rate_hz {
        config.meta.tracking_rate_hz = Some(rate);
    }
    let id = match client.register_experiment(&config) {
        Ok(id) => id,
        Err(ClientError::Api { status: 409, .. }) => {
            let id = config.meta.id.clone().expect("only slugged experiments conflict");
            info!(experiment = %id, "already registered; reusing");
            id
        }
        Err(e) => return Err(e.into()),
    };
    client.set_published(&id, true)?;
    let n = plan.n.unwrap_or_else(|| plan.cohort.size());
    let outcome = run_cohort(client, &id, &plan.cohort, n, plan.seed, plan.options)?;
    let dir = plan.out_dir.join(&id);
    export_all(client, &id, plan.format, &dir)?;
    let sessions = client.sessions(&id)?;
    Ok(RunSummary {
        sessions: sessions.len(),
        completed: sessions
            .iter()
            .filter(|s| s.status == vrlab_core::dataplane::SessionStatus::Completed)
            .count(),
        dropped: sessions
            .iter()
            .filter(|s| s.status == vrlab_core::dataplane::SessionStatus::Dropped)
            .count(),
        failures: outcome
            .failures
            .iter()
            .map(|(i, e)| format!("participant {i}: {e}"))
            .collect(),
        experiment_id: id,
        export_dir: dir,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Writes `<kind>.<ext>` for every export kind into `dir`.
pub fn export_all(client: &Client, experiment_id: &str, format: ExportFormat, dir: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(dir).map_err(|e| SimError::Io(e.to_string()))?;
    for kind in ExportKind::ALL {
        let bytes = client.export(experiment_id, kind, format)?;
        let path = dir.join(format!("{kind}.{}", format.extension()));
        std::fs::write(&path, bytes).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
