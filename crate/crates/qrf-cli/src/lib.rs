//! Configuration, suite planning and report output behind the `qrf` binary.

pub mod config;
pub mod run;

use qrf_core::kinspace::KinError;
use qrf_core::models::{ModelError, ModelKind, ModelSpec};
use thiserror::Error;

pub use config::{parse_config, parse_config_str, Exact, Parameters, RunConfig, StateConfig, Suite};
pub use run::{plan, run, run_suite, selftest, Outcome, SuiteRun};

/// Exit status for a run whose checks all pass.
pub const EXIT_PASS: i32 = 0;
/// Exit status when some residual exceeds its tolerance.
pub const EXIT_TOLERANCE: i32 = 1;
/// Exit status for configuration, model-construction and I/O errors.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("{source_name}: field `{field}`: {message}")]
    Schema { source_name: String, field: String, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("suite {suite} does not apply to model {model}")]
    Unsupported { suite: Suite, model: ModelKind },
    #[error("{model} model: {source}{}", hint.as_ref().map(|h| format!("\nhint: {h}")).unwrap_or_default())]
    Model {
        model: ModelKind,
        #[source]
        source: ModelError,
        hint: Option<String>,
    },
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        EXIT_CONFIG
    }

    /// Wraps a model error, attaching a remediation hint where one is known.
    pub fn model(spec: &ModelSpec, source: ModelError) -> Self {
        let hint = match &source {
            ModelError::Kin(KinError::IncommensurableSpectrum { unit, .. }) if spec.kind == ModelKind::Su2 => {
                let step = config::beta_step(spec);
                Some(format!(
                    "β·ℏ·m must be an integer multiple of dp = {unit} for every m in −j..j; with spin {} choose beta as a \
                     multiple of {step}·dp/ℏ = {}",
                    config::spin_of(spec),
                    *step.numer() as f64 * spec.dp / spec.hbar / *step.denom() as f64,
                ))
            }
            ModelError::Kin(KinError::IncommensurableSpectrum { unit, .. }) => {
                Some(format!("every generator eigenvalue must be an integer multiple of dp = {unit}; adjust dp, hbar or the energies"))
            }
            _ => None,
        };
        CliError::Model { model: spec.kind, source, hint }
    }
}
