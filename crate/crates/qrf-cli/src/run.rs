//! Suite planning, execution and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use qrf_core::models::{
    build_model, run_degenerate_suite, run_equivalence_suite, run_hbar_scaling, run_projector_suite, run_spin_suite,
    run_variance_experiment, DegenerateOptions, EquivalenceOptions, ModelKind, ProjectorOptions, Report, ScalingOptions, SpinOptions,
    VarianceOptions,
};

use crate::config::{RunConfig, Suite};
use crate::{CliError, EXIT_PASS, EXIT_TOLERANCE};

/// One suite executed on one model.
#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub model: ModelKind,
    pub suite: Suite,
    pub lattice: usize,
    pub report: Report,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub runs: Vec<SuiteRun>,
}

/// The (model, suite) pairs a configuration selects, in a fixed order.
/// Naming both a model and a suite that does not apply to it is an error;
/// leaving either open selects only the combinations that apply.
pub fn plan(config: &RunConfig) -> Result<Vec<(ModelKind, Suite)>, CliError> {
    let models: Vec<ModelKind> = config.model.map_or(ModelKind::ALL.to_vec(), |m| vec![m]);
    let suites: Vec<Suite> = config.suites.clone().unwrap_or_else(|| Suite::ALL.to_vec());
    let mut out = Vec::new();
    for &suite in &suites {
        if out.iter().any(|&(_, s)| s == suite) {
            continue;
        }
        let applicable: Vec<ModelKind> = models.iter().copied().filter(|&m| suite.applies_to(m)).collect();
        match (config.model, config.suites.is_some()) {
            (Some(model), true) if applicable.is_empty() => return Err(CliError::Unsupported { suite, model }),
            _ => out.extend(applicable.into_iter().map(|m| (m, suite))),
        }
    }
    out.sort_by_key(|&(m, s)| (m, s));
    Ok(out)
}

/// Runs one suite with the configuration's parameters and tolerances.
pub fn run_suite(config: &RunConfig, kind: ModelKind, suite: Suite) -> Result<SuiteRun, CliError> {
    if !suite.applies_to(kind) {
        return Err(CliError::Unsupported { suite, model: kind });
    }
    let spec = config.spec_for(kind, suite);
    let wrap = |e| CliError::model(&spec, e);
    let (seed, tol) = (config.seed, config.tolerance);
    let report = if suite == Suite::Scaling {
        let opts = ScalingOptions {
            ladder: config.hbar_ladder.clone(),
            lattice: spec.lattice,
            tol: config.slope_tolerance,
            ..ScalingOptions::default()
        };
        run_hbar_scaling(&opts).map_err(wrap)?.1
    } else {
        let model = build_model(&spec).map_err(wrap)?;
        match suite {
            Suite::Equivalence => {
                let opts = EquivalenceOptions { observables: config.observables, states: config.states, seed, tol };
                run_equivalence_suite(&model, &opts)
            }
            Suite::Variance => run_variance_experiment(&model, &VarianceOptions { states: config.states, seed, tol }),
            Suite::Spin => run_spin_suite(&model, &SpinOptions { seed, tol }),
            Suite::Degenerate => run_degenerate_suite(&model, &DegenerateOptions { seed, tol }),
            Suite::Projector => {
                let opts = ProjectorOptions { seed, tol, flow_tol: config.flow_tolerance, ..ProjectorOptions::default() };
                run_projector_suite(&model, &opts)
            }
            Suite::Scaling => unreachable!("handled above"),
        }
        .map_err(wrap)?
    };
    Ok(SuiteRun { model: kind, suite, lattice: spec.lattice, report })
}

/// Runs every planned suite in order.
pub fn run(config: &RunConfig) -> Result<Outcome, CliError> {
    let runs = plan(config)?.into_iter().map(|(m, s)| run_suite(config, m, s)).collect::<Result<_, _>>()?;
    Ok(Outcome { runs })
}

/// A fast battery over every model at small lattices.
pub fn selftest(config: &RunConfig) -> Result<Outcome, CliError> {
    let battery = [
        (ModelKind::Newtonian, Suite::Equivalence, 8),
        (ModelKind::NParticle, Suite::Equivalence, 4),
        (ModelKind::Su2, Suite::Equivalence, 8),
        (ModelKind::Su2, Suite::Spin, 8),
        (ModelKind::Degenerate, Suite::Degenerate, 8),
        (ModelKind::Newtonian, Suite::Projector, 8),
        (ModelKind::NParticle, Suite::Projector, 4),
        (ModelKind::Su2, Suite::Projector, 8),
        (ModelKind::Degenerate, Suite::Projector, 8),
    ];
    let mut runs = Vec::new();
    for (kind, suite, lattice) in battery {
        let mut c = config.clone();
        c.parameters.lattice = Some(lattice);
        c.observables = c.observables.min(5);
        c.states = c.states.min(2);
        runs.push(run_suite(&c, kind, suite)?);
    }
    Ok(Outcome { runs })
}

impl SuiteRun {
    pub fn file_stem(&self) -> String {
        format!("{}-{}", self.model, self.suite)
    }
}

impl Outcome {
    pub fn passes(&self) -> bool {
        self.runs.iter().all(|r| r.report.passes())
    }

    pub fn exit_code(&self) -> i32 {
        if self.passes() {
            EXIT_PASS
        } else {
            EXIT_TOLERANCE
        }
    }

    /// Overview table followed by each suite's section.
    pub fn summary_markdown(&self) -> String {
        let mut s = String::from("# qrf report\n\n");
        if self.runs.is_empty() {
            s.push_str("No suites selected.\n");
            return s;
        }
        s.push_str("| model | suite | lattice | rows | failing | max residual | status |\n|---|---|---|---|---|---|---|\n");
        for r in &self.runs {
            let failing = r.report.failures().len();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {:.3e} | {} |",
                r.model,
                r.suite,
                r.lattice,
                r.report.rows.len(),
                failing,
                r.report.max_residual(),
                if failing == 0 { "pass" } else { "FAIL" }
            );
        }
        s.push('\n');
        for r in &self.runs {
            let mut titled = r.report.clone();
            titled.suite = format!("{} on {} (lattice {})", r.suite, r.model, r.lattice);
            s.push_str(&titled.to_markdown());
        }
        s
    }

    /// Writes `<model>-<suite>.csv` per run and `summary.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        let werr = |p: &Path, e: String| CliError::Write { path: p.display().to_string(), message: e };
        fs::create_dir_all(dir).map_err(|e| werr(dir, e.to_string()))?;
        let mut written = Vec::new();
        for r in &self.runs {
            let path = dir.join(format!("{}.csv", r.file_stem()));
            let file = fs::File::create(&path).map_err(|e| werr(&path, e.to_string()))?;
            r.report.write_csv(file).map_err(|e| werr(&path, e.to_string()))?;
            written.push(path);
        }
        let path = dir.join("summary.md");
        fs::write(&path, self.summary_markdown()).map_err(|e| werr(&path, e.to_string()))?;
        written.push(path);
        Ok(written)
    }
}
