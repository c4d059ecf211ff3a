//! Run configuration: one JSON document, optional `key=value` overrides on
//! dotted paths, and validation that names the offending field.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bounds::BoundConstants;
use crate::error::{Error, Result};
use crate::exhaustion::{InitialRecipe, SourceRecipe, SweepConfig};
use crate::heat::LinearSolveConfig;
use crate::hum::{HumConfig, ProbePolicy};
use crate::lattice::LatticeSpec;
use crate::semilinear::{FixedPointConfig, Nonlinearity};
use crate::time_measure::TimeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SolveLinear,
    SolveSemilinear,
    CostSweep,
    Observability,
    FrequencyCheck,
    Telescope,
    Bound,
    Exhaustion,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SolveLinear => "solve-linear",
            Self::SolveSemilinear => "solve-semilinear",
            Self::CostSweep => "cost-sweep",
            Self::Observability => "observability",
            Self::FrequencyCheck => "frequency-check",
            Self::Telescope => "telescope",
            Self::Bound => "bound",
            Self::Exhaustion => "exhaustion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeSection {
    pub dim: usize,
    pub r1: f64,
    pub r2: f64,
    /// Grid cells per lattice cell side.
    pub m: usize,
}

impl Default for LatticeSection {
    fn default() -> Self {
        Self { dim: 1, r1: 0.2, r2: 0.5, m: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    /// Cubes per axis of each centered box.
    pub sizes: Vec<usize>,
    /// Index of the reference box; the last one when absent.
    pub reference: Option<usize>,
}

impl Default for DomainSection {
    fn default() -> Self {
        Self { sizes: vec![2], reference: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSection {
    pub horizon: f64,
    pub steps: usize,
    /// Intervals of `E` as `[[a, b], ...]`.
    pub set: Vec<[f64; 2]>,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self { horizon: 1.0, steps: 100, set: vec![[0.0, 1.0]] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearitySection {
    /// `zero`, `linear`, `sin` or `tanh`, optionally followed by the parameter.
    pub name: String,
    /// Lipschitz constant (or slope for `linear`).
    pub lipschitz: Option<f64>,
}

impl Default for NonlinearitySection {
    fn default() -> Self {
        Self { name: "zero".into(), lipschitz: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialSection {
    /// Constant potential of the linear problems.
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservabilitySection {
    pub power_iterations: usize,
    pub inner_tolerance: f64,
    pub inner_max_iterations: usize,
}

impl Default for ObservabilitySection {
    fn default() -> Self {
        let p = ProbePolicy::default();
        Self {
            power_iterations: p.power_iterations,
            inner_tolerance: p.inner_tolerance,
            inner_max_iterations: p.inner_max_iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrequencyInitial {
    /// First Dirichlet eigenmode of the box.
    Eigenfunction,
    /// The configured `z0` recipe.
    Z0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrequencySection {
    pub lambda: f64,
    /// Ball center; the box center when absent.
    pub center: Option<Vec<f64>>,
    /// Ball radius; large enough to cover the box when absent.
    pub radius: Option<f64>,
    pub initial: FrequencyInitial,
}

impl Default for FrequencySection {
    fn default() -> Self {
        Self { lambda: 0.1, center: None, radius: None, initial: FrequencyInitial::Eigenfunction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TelescopeSection {
    /// Geometric ratio; `κ(θ)` of the bound section when absent.
    pub ratio: Option<f64>,
    pub count: usize,
}

impl Default for TelescopeSection {
    fn default() -> Self {
        Self { ratio: None, count: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSection {
    pub theta: f64,
    pub c3: f64,
    pub c: f64,
    pub c_tilde: f64,
    /// `‖a‖_∞` fed to the constant chain.
    pub a_norm: f64,
}

impl Default for BoundSection {
    fn default() -> Self {
        let b = BoundConstants::default();
        Self { theta: b.theta, c3: b.c3, c: b.c, c_tilde: b.c_tilde, a_norm: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExhaustionSection {
    /// Radius of the comparison ball around the origin.
    pub comparison_radius: f64,
    pub source: SourceRecipe,
}

impl Default for ExhaustionSection {
    fn default() -> Self {
        Self { comparison_radius: 1.0, source: SourceRecipe::None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Write measured wall time; off by default so that outputs are reproducible.
    pub timings: bool,
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub lattice: LatticeSection,
    pub domain: DomainSection,
    pub time: TimeSection,
    pub nonlinearity: NonlinearitySection,
    pub potential: PotentialSection,
    pub z0: InitialRecipe,
    pub hum: HumConfig,
    pub fixed_point: FixedPointConfig,
    pub solver: LinearSolveConfig,
    pub observability: ObservabilitySection,
    pub frequency: FrequencySection,
    pub telescope: TelescopeSection,
    pub bound: BoundSection,
    pub exhaustion: ExhaustionSection,
    pub report: ReportSection,
    pub seed: u64,
    /// Destination of the CSV; left out of the preamble so artifacts compare equal across destinations.
    #[serde(skip_serializing)]
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            lattice: LatticeSection::default(),
            domain: DomainSection::default(),
            time: TimeSection::default(),
            nonlinearity: NonlinearitySection::default(),
            potential: PotentialSection::default(),
            z0: InitialRecipe::Bump,
            hum: HumConfig::default(),
            fixed_point: FixedPointConfig::default(),
            solver: LinearSolveConfig::default(),
            observability: ObservabilitySection::default(),
            frequency: FrequencySection::default(),
            telescope: TelescopeSection::default(),
            bound: BoundSection::default(),
            exhaustion: ExhaustionSection::default(),
            report: ReportSection::default(),
            seed: 0,
            output: None,
        }
    }
}

fn field(name: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig(msg) if msg.starts_with(name) => Error::InvalidConfig(msg),
        Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{name}: {msg}")),
        other => other,
    }
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Parse { line: e.line(), column: e.column(), message: e.to_string() }
}

/// Parses a JSON document into a raw value.
pub fn parse_document(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(json_error)
}

/// Sets `path` (dot separated) to `raw`, read as JSON when possible and as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` must look like key=value")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::InvalidConfig(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(Error::InvalidConfig(format!("override `{path}`: `{}` is not a section", parts[..i].join("."))));
        }
        let map = cursor.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses, applies overrides, fills defaults and validates.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = parse_document(text)?;
    if !doc.is_object() {
        return Err(Error::Parse { line: 1, column: 1, message: "configuration must be a JSON object".into() });
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn spec(&self) -> Result<LatticeSpec> {
        LatticeSpec::new(self.lattice.dim, self.lattice.r1, self.lattice.r2).map_err(|e| field("lattice", e))
    }

    pub fn time_set(&self) -> Result<TimeSet> {
        TimeSet::new(self.time.horizon, self.time.set.iter().map(|i| (i[0], i[1])).collect())
            .map_err(|e| field("time.set", e))
    }

    pub fn nonlinearity(&self) -> Result<Nonlinearity> {
        Nonlinearity::from_name(&self.nonlinearity.name, self.nonlinearity.lipschitz).map_err(|e| field("nonlinearity", e))
    }

    pub fn probe_policy(&self) -> ProbePolicy {
        ProbePolicy {
            power_iterations: self.observability.power_iterations,
            seed: self.seed,
            inner_tolerance: self.observability.inner_tolerance,
            inner_max_iterations: self.observability.inner_max_iterations,
        }
    }

    pub fn bound_constants(&self) -> BoundConstants {
        BoundConstants { theta: self.bound.theta, c3: self.bound.c3, c: self.bound.c, c_tilde: self.bound.c_tilde }
    }

    pub fn reference_index(&self) -> usize {
        self.domain.reference.unwrap_or(self.domain.sizes.len().saturating_sub(1))
    }

    pub fn sweep(&self) -> Result<SweepConfig> {
        Ok(SweepConfig {
            spec: self.spec()?,
            m: self.lattice.m,
            sizes: self.domain.sizes.clone(),
            time_set: self.time_set()?,
            steps: self.time.steps,
            z0: self.z0,
            nonlinearity: self.nonlinearity()?,
            hum: self.hum,
            fixed_point: self.fixed_point,
            solve: self.solver,
            comparison_radius: self.exhaustion.comparison_radius,
            reference: self.reference_index(),
        })
    }

    /// Checks every field before any solve starts.
    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        if self.lattice.m < 2 {
            return Err(Error::InvalidConfig(format!("lattice.m must be at least 2, got {}", self.lattice.m)));
        }
        if !(self.time.horizon > 0.0 && self.time.horizon.is_finite()) {
            return Err(Error::InvalidConfig(format!("time.horizon must be positive, got {}", self.time.horizon)));
        }
        if self.time.steps == 0 {
            return Err(Error::InvalidConfig("time.steps must be positive".into()));
        }
        self.time_set()?;
        let f = self.nonlinearity()?;
        let tau_l = self.time.horizon / self.time.steps as f64 * f.lipschitz();
        if tau_l >= 1.0 {
            return Err(Error::InvalidConfig(format!("time.steps: tau * L = {tau_l} must stay below 1")));
        }
        if self.domain.sizes.is_empty() || self.domain.sizes.contains(&0) {
            return Err(Error::InvalidConfig("domain.sizes must list positive box sizes".into()));
        }
        if self.domain.sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("domain.sizes must be strictly increasing".into()));
        }
        if self.reference_index() >= self.domain.sizes.len() {
            return Err(Error::InvalidConfig("domain.reference is out of range".into()));
        }
        if !self.potential.constant.is_finite() {
            return Err(Error::InvalidConfig("potential.constant must be finite".into()));
        }
        self.hum.validate().map_err(|e| field("hum", e))?;
        self.fixed_point.validate().map_err(|e| field("fixed_point", e))?;
        self.solver.validate().map_err(|e| field("solver", e))?;
        if self.observability.inner_tolerance <= 0.0 || self.observability.inner_max_iterations == 0 {
            return Err(Error::InvalidConfig("observability: inner tolerance and iteration cap must be positive".into()));
        }
        if !(self.frequency.lambda > 0.0) {
            return Err(Error::InvalidConfig(format!("frequency.lambda must be positive, got {}", self.frequency.lambda)));
        }
        if let Some(c) = &self.frequency.center {
            if c.len() != self.lattice.dim {
                return Err(Error::InvalidConfig(format!(
                    "frequency.center has {} coordinates, lattice.dim is {}",
                    c.len(),
                    self.lattice.dim
                )));
            }
        }
        if let Some(r) = self.frequency.radius {
            if !(r > 0.0) {
                return Err(Error::InvalidConfig(format!("frequency.radius must be positive, got {r}")));
            }
        }
        if let Some(r) = self.telescope.ratio {
            if !(r > 1.0) {
                return Err(Error::InvalidConfig(format!("telescope.ratio must exceed 1, got {r}")));
            }
        }
        if self.telescope.count < 2 {
            return Err(Error::InvalidConfig("telescope.count must be at least 2".into()));
        }
        self.bound_constants().validate()?;
        if !(self.bound.a_norm >= 0.0 && self.bound.a_norm.is_finite()) {
            return Err(Error::InvalidConfig(format!("bound.a_norm must be nonnegative, got {}", self.bound.a_norm)));
        }
        if !(self.exhaustion.comparison_radius > 0.0) {
            return Err(Error::InvalidConfig("exhaustion.comparison_radius must be positive".into()));
        }
        Ok(())
    }
}
