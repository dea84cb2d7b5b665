//! Run configuration: strict JSON parsing and per-command validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use extctl::data::Schema;
use extctl::estimators::Method;
use extctl::nuisance::{CrossFitPlan, PropensityConfig};
use extctl::pipeline::PipelineSpec;
use extctl::simulation::{DgpSpec, McConfig, SweepConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Estimate,
    Design,
    Simulate,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Design => "design",
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub estimate: Option<EstimateConfig>,
    #[serde(default)]
    pub design: Option<DesignConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub sweep: Option<SweepJob>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateConfig {
    /// Pooled cohort CSV; relative paths resolve against the config file.
    pub data: PathBuf,
    pub schema: Schema,
    pub pipeline: PipelineSpec,
    /// Effect the estimators are expected to recover (0 for a null comparison).
    #[serde(default)]
    pub expected_effect: f64,
    #[serde(default)]
    pub inference: InferenceConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InferenceConfig {
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    #[serde(default)]
    pub psm_subsample: Option<SubsampleConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    /// Refit nuisances per replicate; the per-method default when absent.
    #[serde(default)]
    pub refit: Option<bool>,
    /// Methods to bootstrap; all requested methods when absent.
    #[serde(default)]
    pub methods: Option<Vec<Method>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsampleConfig {
    pub replicates: usize,
    #[serde(default)]
    pub size: Option<usize>,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_targets() -> Vec<f64> {
    vec![0.8, 0.9]
}

fn default_ratio_gammas() -> Vec<f64> {
    vec![0.25, 0.5, 0.75, 1.0]
}

fn default_ratio_n0() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 1e3, 1e4, 1e6]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub tau: f64,
    #[serde(default)]
    pub kappa_sq: Option<f64>,
    #[serde(default)]
    pub sigma0_sq: Option<f64>,
    #[serde(default)]
    pub rho0: f64,
    pub n1: f64,
    #[serde(default)]
    pub n0: Option<f64>,
    /// Exactly one of `gamma`, `gamma_inputs` and `pilot` supplies gamma.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub gamma_inputs: Option<GammaInputs>,
    #[serde(default)]
    pub pilot: Option<PilotConfig>,
    #[serde(default = "default_targets")]
    pub target_power: Vec<f64>,
    /// Effect sizes for the power table; `0, tau/10, ..., tau` when absent.
    #[serde(default)]
    pub tau_grid: Option<Vec<f64>>,
    /// Trial sizes for the power table; `[n1]` when absent.
    #[serde(default)]
    pub n1_grid: Option<Vec<f64>>,
    #[serde(default = "default_ratio_gammas")]
    pub ratio_gammas: Vec<f64>,
    #[serde(default = "default_ratio_n0")]
    pub ratio_n0_over_n1: Vec<f64>,
}

/// Summary statistics for the Gaussian-shift gamma approximation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaInputs {
    /// Standardized mean differences of continuous covariates.
    #[serde(default)]
    pub smds: Vec<f64>,
    /// `[trial proportion, control proportion]` of binary covariates.
    #[serde(default)]
    pub binary: Vec<(f64, f64)>,
}

/// Covariate CSV holding a proxy trial cohort and historical controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotConfig {
    pub data: PathBuf,
    /// 0/1 column, 1 marking the proxy trial cohort.
    pub cohort: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub propensity: PropensityConfig,
    #[serde(default)]
    pub crossfit: CrossFitPlan,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub dgp: DgpSpec,
    pub mc: McConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepJob {
    pub dgp: DgpSpec,
    pub sweep: SweepConfig,
}

fn escape(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

fn ignored_pointer(path: &serde_ignored::Path<'_>) -> String {
    use serde_ignored::Path as P;
    match path {
        P::Root => String::new(),
        P::Seq { parent, index } => format!("{}/{index}", ignored_pointer(parent)),
        P::Map { parent, key } => format!("{}/{}", ignored_pointer(parent), escape(key)),
        P::Some { parent } | P::NewtypeStruct { parent } | P::NewtypeVariant { parent } => ignored_pointer(parent),
    }
}

fn error_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", escape(key))),
            Segment::Enum { .. } | Segment::Unknown => {}
        }
    }
    if out.is_empty() {
        "/".into()
    } else {
        out
    }
}

/// Parses a config, rejecting unknown keys (all of them are listed) and
/// reporting type errors with a JSON pointer.
pub fn parse(text: &str) -> CliResult<RunConfig> {
    let mut unknown = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let parsed: Result<RunConfig, _> = {
        let mut track = |p: serde_ignored::Path<'_>| unknown.push(ignored_pointer(&p));
        let ignoring = serde_ignored::Deserializer::new(&mut de, &mut track);
        serde_path_to_error::deserialize(ignoring)
    };
    let config = parsed.map_err(|e| CliError::Config(format!("at {}: {}", error_pointer(e.path()), e.inner())))?;
    de.end().map_err(|e| CliError::Config(format!("trailing content: {e}")))?;
    if !unknown.is_empty() {
        return Err(CliError::Config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    Ok(config)
}

fn config_err(pointer: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("at {pointer}: {message}"))
}

impl RunConfig {
    /// Checks that exactly the block for `command` is present and that its
    /// settings are usable before any work starts.
    pub fn validate(&self) -> CliResult<()> {
        let blocks = [
            (Command::Estimate, self.estimate.is_some()),
            (Command::Design, self.design.is_some()),
            (Command::Simulate, self.simulate.is_some()),
            (Command::Sweep, self.sweep.is_some()),
        ];
        for (cmd, present) in blocks {
            if cmd == self.command && !present {
                return Err(config_err(
                    &format!("/{}", cmd.name()),
                    format!("command `{}` requires a `{}` block", cmd.name(), cmd.name()),
                ));
            }
            if cmd != self.command && present {
                return Err(config_err(
                    &format!("/{}", cmd.name()),
                    format!("block is not used by command `{}`", self.command.name()),
                ));
            }
        }
        if self.threads == Some(0) {
            return Err(config_err("/threads", "must be at least 1"));
        }
        match self.command {
            Command::Estimate => self.estimate.as_ref().expect("checked").validate(),
            Command::Design => self.design.as_ref().expect("checked").validate(),
            Command::Simulate => {
                let sim = self.simulate.as_ref().expect("checked");
                validate_dgp(&sim.dgp, "/simulate/dgp")?;
                validate_pipeline(&sim.mc.pipeline, "/simulate/mc/pipeline")?;
                if sim.mc.reps < 100 {
                    return Err(config_err(
                        "/simulate/mc/reps",
                        format!("at least 100 replications are required, got {}", sim.mc.reps),
                    ));
                }
                if !(sim.mc.alpha > 0.0 && sim.mc.alpha < 1.0) {
                    return Err(config_err("/simulate/mc/alpha", "must lie in (0, 1)"));
                }
                Ok(())
            }
            Command::Sweep => {
                let job = self.sweep.as_ref().expect("checked");
                validate_dgp(&job.dgp, "/sweep/dgp")?;
                validate_pipeline(&job.sweep.pipeline, "/sweep/sweep/pipeline")?;
                let grid = &job.sweep.beta_grid;
                if grid.is_empty() || grid.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
                    return Err(config_err("/sweep/sweep/beta_grid", "needs at least one finite, non-negative beta"));
                }
                if grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(config_err("/sweep/sweep/beta_grid", "must be strictly ascending"));
                }
                if job.sweep.resamples == 0 {
                    return Err(config_err("/sweep/sweep/resamples", "must be at least 1"));
                }
                Ok(())
            }
        }
    }
}

fn validate_pipeline(spec: &PipelineSpec, pointer: &str) -> CliResult<()> {
    if spec.crossfit.seed != 0 {
        return Err(config_err(
            &format!("{pointer}/crossfit/seed"),
            "all randomness comes from the top-level `seed`; remove this key",
        ));
    }
    if spec.methods.is_empty() {
        return Err(config_err(&format!("{pointer}/methods"), "no estimators requested"));
    }
    let needing: Vec<String> = spec.methods.iter().filter(|m| m.needs_outcome()).map(|m| m.to_string()).collect();
    if !needing.is_empty() && spec.outcome.is_none() {
        return Err(config_err(
            &format!("{pointer}/outcome"),
            format!("missing `outcome` block, required by {}", needing.join(", ")),
        ));
    }
    Ok(())
}

fn validate_dgp(dgp: &DgpSpec, pointer: &str) -> CliResult<()> {
    if dgp.seed != 0 {
        return Err(config_err(
            &format!("{pointer}/seed"),
            "all randomness comes from the top-level `seed`; remove this key",
        ));
    }
    dgp.validate().map_err(|e| config_err(pointer, e))
}

impl EstimateConfig {
    fn validate(&self) -> CliResult<()> {
        validate_pipeline(&self.pipeline, "/estimate/pipeline")?;
        if !self.expected_effect.is_finite() {
            return Err(config_err("/estimate/expected_effect", "must be finite"));
        }
        if let Some(b) = &self.inference.bootstrap {
            if b.replicates < 100 {
                return Err(config_err(
                    "/estimate/inference/bootstrap/replicates",
                    "at least 100 replicates are required",
                ));
            }
            if let Some(extra) = b.methods.iter().flatten().find(|m| !self.pipeline.methods.contains(m)) {
                return Err(config_err(
                    "/estimate/inference/bootstrap/methods",
                    format!("{extra} is not among the requested estimators"),
                ));
            }
        }
        if let Some(s) = &self.inference.psm_subsample {
            if !self.pipeline.methods.contains(&Method::Psm) {
                return Err(config_err(
                    "/estimate/inference/psm_subsample",
                    "PSM is not among the requested estimators",
                ));
            }
            if s.replicates < 100 {
                return Err(config_err(
                    "/estimate/inference/psm_subsample/replicates",
                    "at least 100 replicates are required",
                ));
            }
        }
        Ok(())
    }
}

impl DesignConfig {
    fn validate(&self) -> CliResult<()> {
        let sources = [self.gamma.is_some(), self.gamma_inputs.is_some(), self.pilot.is_some()];
        match sources.iter().filter(|&&s| s).count() {
            0 => {
                return Err(config_err(
                    "/design/gamma",
                    "gamma is missing and no pilot data was given; supply `gamma`, a `pilot` block, or \
                     `gamma_inputs` with standardized mean differences (`smds`) and binary proportions \
                     (`binary`) for the Gaussian-shift approximation",
                ))
            }
            1 => {}
            _ => return Err(config_err("/design", "give only one of `gamma`, `gamma_inputs` and `pilot`")),
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(config_err("/design/gamma", "must lie in (0, 1]"));
            }
        }
        if self.kappa_sq.is_none() && self.sigma0_sq.is_none() {
            return Err(config_err("/design/kappa_sq", "give `kappa_sq` or `sigma0_sq` (with `rho0`)"));
        }
        if self.target_power.iter().any(|&p| !(p > self.alpha && p < 1.0)) {
            return Err(config_err("/design/target_power", "every target must lie in (alpha, 1)"));
        }
        let positive = |xs: &[f64]| xs.iter().all(|&v| v > 0.0 && v.is_finite());
        if !positive(&self.ratio_gammas) || self.ratio_gammas.iter().any(|&g| g > 1.0) {
            return Err(config_err("/design/ratio_gammas", "values must lie in (0, 1]"));
        }
        if !positive(&self.ratio_n0_over_n1) {
            return Err(config_err("/design/ratio_n0_over_n1", "values must be positive"));
        }
        if self.n1_grid.as_deref().is_some_and(|g| g.iter().any(|&n| !(n >= 1.0))) {
            return Err(config_err("/design/n1_grid", "values must be at least 1"));
        }
        if self.tau_grid.as_deref().is_some_and(|g| g.iter().any(|t| !t.is_finite())) {
            return Err(config_err("/design/tau_grid", "values must be finite"));
        }
        Ok(())
    }
}

/// Resolves `path` against the directory of the config file.
pub fn resolve(config_path: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    config_path.parent().map_or_else(|| path.to_path_buf(), |dir| dir.join(path))
}
