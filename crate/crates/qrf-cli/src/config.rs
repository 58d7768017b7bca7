//! Run configuration: the JSON file format, its defaults and validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num::rational::Rational64;
use num::{One, Signed};
use qrf_core::models::{ModelKind, ModelSpec, ScalingOptions, StateRecipe};
use serde::de::{self, Deserializer, Visitor};
use serde::Deserialize;

use crate::CliError;

/// One experiment family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Equivalence,
    Variance,
    Spin,
    Scaling,
    Degenerate,
    Projector,
}

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Equivalence, Suite::Variance, Suite::Spin, Suite::Scaling, Suite::Degenerate, Suite::Projector];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Variance => "variance",
            Suite::Spin => "spin",
            Suite::Scaling => "scaling",
            Suite::Degenerate => "degenerate",
            Suite::Projector => "projector",
        }
    }

    pub fn applies_to(&self, kind: ModelKind) -> bool {
        match self {
            Suite::Equivalence => kind != ModelKind::Degenerate,
            Suite::Variance => kind == ModelKind::NParticle,
            Suite::Spin | Suite::Scaling => kind == ModelKind::Su2,
            Suite::Degenerate => kind == ModelKind::Degenerate,
            Suite::Projector => true,
        }
    }

    /// The experiment `qrf model` runs when no suite is named.
    pub fn signature(kind: ModelKind) -> Suite {
        match kind {
            ModelKind::Newtonian => Suite::Equivalence,
            ModelKind::NParticle => Suite::Variance,
            ModelKind::Su2 => Suite::Spin,
            ModelKind::Degenerate => Suite::Degenerate,
        }
    }

    /// Lattice size used when the configuration does not fix one.
    pub fn default_lattice(&self, kind: ModelKind) -> usize {
        match (self, kind) {
            (Suite::Variance, _) => 48,
            (Suite::Scaling, _) => ScalingOptions::default().lattice,
            (Suite::Equivalence | Suite::Projector, ModelKind::NParticle) => 8,
            _ => 16,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An exact rational read from an integer or a string such as `"3"` or `"1/2"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exact(pub Rational64);

impl<'de> Deserialize<'de> for Exact {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Exact;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an integer or a rational string such as \"1/2\"")
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Exact, E> {
                Ok(Exact(Rational64::from_integer(v)))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Exact, E> {
                i64::try_from(v).map(|v| Exact(Rational64::from_integer(v))).map_err(|_| E::custom("integer out of range"))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Exact, E> {
                Err(E::custom(format!("{v} is a floating-point number; exact inputs take integers or strings such as \"1/2\"")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Exact, E> {
                Rational64::from_str(v.trim())
                    .map(Exact)
                    .map_err(|_| E::custom(format!("'{v}' is not an integer or rational such as \"1/2\"")))
            }
        }
        d.deserialize_any(V)
    }
}

impl fmt::Display for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Model parameters; anything left out keeps the model default.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameters {
    pub lattice: Option<usize>,
    pub dp: Option<f64>,
    pub hbar: Option<f64>,
    pub particles: Option<usize>,
    pub spin: Option<Exact>,
    pub beta: Option<Exact>,
    pub mass: Option<Exact>,
    pub energies: Option<Vec<Exact>>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    pub width: Option<f64>,
    #[serde(default)]
    pub centers: Vec<i64>,
    #[serde(default)]
    pub momenta: Vec<i64>,
    #[serde(default)]
    pub shear: i64,
}

fn default_tolerance() -> f64 {
    1e-10
}

fn default_slope_tolerance() -> f64 {
    ScalingOptions::default().tol
}

fn default_flow_tolerance() -> f64 {
    1e-6
}

fn default_ladder() -> Vec<f64> {
    ScalingOptions::default().ladder
}

fn default_observables() -> usize {
    20
}

fn default_states() -> usize {
    5
}

/// Everything one invocation needs.  `model: None` selects every model and
/// `suites: None` every suite that applies.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, deserialize_with = "model_kind")]
    pub model: Option<ModelKind>,
    #[serde(default)]
    pub parameters: Parameters,
    #[serde(default)]
    pub state: StateConfig,
    #[serde(default)]
    pub suites: Option<Vec<Suite>>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_slope_tolerance")]
    pub slope_tolerance: f64,
    #[serde(default = "default_flow_tolerance")]
    pub flow_tolerance: f64,
    #[serde(default = "default_ladder")]
    pub hbar_ladder: Vec<f64>,
    #[serde(default = "default_observables")]
    pub observables: usize,
    #[serde(default = "default_states")]
    pub states: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn model_kind<'de, D: Deserializer<'de>>(d: D) -> Result<Option<ModelKind>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    s.map(|s| s.parse::<ModelKind>().map_err(de::Error::custom)).transpose()
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_config_str("{}").expect("empty configuration is valid")
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Read { path: path.display().to_string(), message: e.to_string() })?;
    parse_config_str(&text).map_err(|e| match e {
        CliError::Schema { field, message, .. } => CliError::Schema { source_name: path.display().to_string(), field, message },
        other => other,
    })
}

/// Parses and validates configuration text.
pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        CliError::Schema { source_name: "config".into(), field, message: e.inner().to_string() }
    })?;
    config.validate()?;
    Ok(config)
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::Invalid { field: field.to_string(), message: message.into() }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(field, format!("must be a positive number, got {v}")))
            }
        };
        positive("tolerance", self.tolerance)?;
        positive("slope_tolerance", self.slope_tolerance)?;
        positive("flow_tolerance", self.flow_tolerance)?;
        if self.hbar_ladder.len() < 2 {
            return Err(invalid("hbar_ladder", "needs at least two values to fit a slope"));
        }
        for (i, &h) in self.hbar_ladder.iter().enumerate() {
            positive(&format!("hbar_ladder[{i}]"), h)?;
        }
        if self.observables == 0 || self.states == 0 {
            return Err(invalid(if self.observables == 0 { "observables" } else { "states" }, "must be at least 1"));
        }
        let p = &self.parameters;
        if let Some(dp) = p.dp {
            positive("parameters.dp", dp)?;
        }
        if let Some(h) = p.hbar {
            positive("parameters.hbar", h)?;
        }
        if let Some(Exact(j)) = p.spin {
            let two_j = j * 2;
            if !two_j.is_integer() || !j.is_positive() {
                return Err(invalid("parameters.spin", format!("must be a positive multiple of 1/2, got {j}")));
            }
        }
        if let Some(Exact(m)) = p.mass {
            if !m.is_positive() {
                return Err(invalid("parameters.mass", format!("must be positive, got {m}")));
            }
        }
        if let Some(es) = &p.energies {
            for (i, Exact(e)) in es.iter().enumerate() {
                if !e.is_integer() || !e.is_positive() {
                    return Err(invalid(&format!("parameters.energies[{i}]"), format!("must be a positive integer, got {e}")));
                }
            }
        }
        if let Some(w) = self.state.width {
            positive("state.width", w)?;
        }
        Ok(())
    }

    /// Model specification for one suite, with the suite's default lattice
    /// unless the configuration fixes one.
    pub fn spec_for(&self, kind: ModelKind, suite: Suite) -> ModelSpec {
        let p = &self.parameters;
        let mut spec = ModelSpec::new(kind);
        spec.lattice = p.lattice.unwrap_or_else(|| suite.default_lattice(kind));
        if let Some(dp) = p.dp {
            spec.dp = dp;
        }
        if let Some(h) = p.hbar {
            spec.hbar = h;
        }
        if let Some(n) = p.particles {
            spec.particles = n;
        }
        if let Some(Exact(j)) = p.spin {
            spec.two_j = (j * 2).to_integer() as usize;
        }
        if let Some(Exact(b)) = p.beta {
            spec.beta = b;
        }
        if let Some(Exact(m)) = p.mass {
            spec.mass = m;
        }
        if let Some(es) = &p.energies {
            spec.energies = es.iter().map(|Exact(e)| e.to_integer()).collect();
        }
        spec.state = StateRecipe {
            width: self.state.width,
            centers: self.state.centers.clone(),
            momenta: self.state.momenta.clone(),
            shear: self.state.shear,
        };
        spec
    }
}

/// `spin` as a rational, for messages.
pub fn spin_of(spec: &ModelSpec) -> Rational64 {
    Rational64::new(spec.two_j as i64, 2)
}

/// Smallest `β > 0` putting every `β ℏ m` on the `δp` lattice, as a multiple of `δp/ℏ`.
pub fn beta_step(spec: &ModelSpec) -> Rational64 {
    if spec.two_j % 2 == 1 {
        Rational64::from_integer(2)
    } else {
        Rational64::one()
    }
}
