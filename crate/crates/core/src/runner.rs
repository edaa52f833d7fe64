//! The batch front end behind the `kla` binary: configuration, dispatch of
//! the `plan`, `verify`, `mix` and `sample` commands, and artifact output.
//!
//! Output layout under `out`: `plan.json`, `reports/<name>.json` and
//! `traces/<name>.csv`. Every random draw comes from a stream keyed by the
//! master seed, so a rerun with the same seed writes byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    estimate_mixing, exit_frequency, lyapunov_drift_check, ou_moment_bounds, rejection_rate_epoch,
    start_state, stationarity_and_bias, verify_contraction, verify_energy_error,
    verify_leading_order, verify_one_shot, ComparisonStart, MixingOptions, StateSampler,
};
use crate::error::{KlaError, Result};
use crate::integrator::{makla_step_in_place, ukla_step_in_place, KernelParams, Workspace};
use crate::model::TargetModel;
use crate::planner::{
    admissible_step, build_plan, certificates, CertificateReport, EpochPlan, StartSpec, StepSearch,
};
use crate::rng::{fill_standard_normal, stream, uniform, Purpose};
use crate::stats::Welford;

/// Exit status of a successful run with no failed check.
pub const EXIT_OK: i32 = 0;
/// A deterministic check failed or a requested certificate was violated.
pub const EXIT_CHECK_FAILED: i32 = 1;
/// The configuration could not be parsed or is inconsistent.
pub const EXIT_CONFIG: i32 = 2;

pub const ALL_SUITES: [&str; 9] = [
    "contraction",
    "energy_error",
    "leading_order",
    "one_shot",
    "ou_moments",
    "lyapunov_drift",
    "exit_frequency",
    "rejection_rate",
    "stationarity",
];

/// The four commands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Plan,
    Verify,
    Mix,
    Sample,
}

impl FromStr for Command {
    type Err = KlaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plan" => Ok(Command::Plan),
            "verify" => Ok(Command::Verify),
            "mix" => Ok(Command::Mix),
            "sample" => Ok(Command::Sample),
            other => Err(KlaError::Config(format!("unknown command `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

/// A number or `"auto"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Setting {
    Auto(AutoTag),
    Value(f64),
}

impl Default for Setting {
    fn default() -> Self {
        Setting::Auto(AutoTag::Auto)
    }
}

impl FromStr for Setting {
    type Err = KlaError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Setting::Auto(AutoTag::Auto));
        }
        s.parse::<f64>()
            .map(Setting::Value)
            .map_err(|_| KlaError::Config(format!("expected a number or `auto`, got `{s}`")))
    }
}

/// Which chain `sample` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    Makla,
    Ukla,
}

fn default_model() -> String {
    "iso_gauss".into()
}
fn default_eps() -> f64 {
    0.1
}
fn default_replicas() -> usize {
    1000
}
fn default_out() -> PathBuf {
    PathBuf::from("kla-out")
}
fn default_one() -> f64 {
    1.0
}
fn default_warm_up_factor() -> u64 {
    10
}
fn default_trace_replicas() -> usize {
    4
}
fn default_max_steps() -> u64 {
    2_000_000_000
}

/// A run configuration. JSON keys match the field names; `L` is the
/// smoothness constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `iso_gauss`, `diag_gauss` or `perturbed`.
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(rename = "L", default)]
    pub l: Option<f64>,
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub diag: Option<Vec<f64>>,
    #[serde(default)]
    pub h: Setting,
    #[serde(default)]
    pub gamma: Setting,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Start law of the first chain; the point (minimiser, 0) when absent.
    #[serde(default)]
    pub start: Option<StartSpec>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; all cores when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Suites for `verify`; all of them when empty.
    #[serde(default)]
    pub suites: Vec<String>,
    /// Multiplier on the contraction rate in the contraction suite. Values
    /// other than 1 exist to exercise the failure path.
    #[serde(default = "default_one")]
    pub contraction_scale: f64,
    /// Overrides the default state sampler of the suites.
    #[serde(default)]
    pub sampler: Option<StateSampler>,
    #[serde(default)]
    pub n_pairs: Option<usize>,
    #[serde(default)]
    pub n_states: Option<usize>,
    #[serde(default)]
    pub n_trials: Option<usize>,
    /// Step grid of the stationarity suite; [h, 2h, 4h] when absent.
    #[serde(default)]
    pub h_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub n_steps: Option<u64>,
    #[serde(default)]
    pub burn_in: Option<u64>,
    #[serde(default)]
    pub thin: Option<u64>,
    #[serde(default)]
    pub chain: Option<ChainKind>,
    #[serde(default)]
    pub comparison: Option<ComparisonStart>,
    #[serde(default = "default_warm_up_factor")]
    pub warm_up_factor: u64,
    #[serde(default = "default_trace_replicas")]
    pub trace_replicas: usize,
    /// Refuse runs whose chain steps would exceed this total.
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub model: Option<String>,
    pub dim: Option<usize>,
    pub l: Option<f64>,
    pub h: Option<Setting>,
    pub gamma: Option<Setting>,
    pub eps: Option<f64>,
    pub replicas: Option<usize>,
    pub suites: Vec<String>,
    pub contraction_scale: Option<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| KlaError::Config(format!("config: {e}")))
    }

    /// Reads `path` (if any) and applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| KlaError::Config(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.threads {
            self.threads = Some(v);
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = &o.model {
            self.model = v.clone();
        }
        if let Some(v) = o.dim {
            self.d = Some(v);
        }
        if let Some(v) = o.l {
            self.l = Some(v);
        }
        if let Some(v) = o.h {
            self.h = v;
        }
        if let Some(v) = o.gamma {
            self.gamma = v;
        }
        if let Some(v) = o.eps {
            self.eps = v;
        }
        if let Some(v) = o.replicas {
            self.replicas = v;
        }
        if !o.suites.is_empty() {
            self.suites = o.suites.clone();
        }
        if let Some(v) = o.contraction_scale {
            self.contraction_scale = v;
        }
    }

    pub fn build_model(&self) -> Result<TargetModel> {
        let need_d = || {
            self.d
                .ok_or_else(|| KlaError::Config(format!("model {} needs `d`", self.model)))
        };
        match self.model.as_str() {
            "iso_gauss" => TargetModel::isotropic_gaussian(need_d()?, self.l.unwrap_or(1.0)),
            "diag_gauss" => {
                let diag = self
                    .diag
                    .clone()
                    .ok_or_else(|| KlaError::Config("model diag_gauss needs `diag`".into()))?;
                if self.d.is_some_and(|d| d != diag.len()) {
                    return Err(KlaError::Config(format!(
                        "`d` = {:?} but `diag` has {} entries",
                        self.d,
                        diag.len()
                    )));
                }
                if self.l.is_some() {
                    return Err(KlaError::Config(
                        "`L` is determined by `diag` for diag_gauss".into(),
                    ));
                }
                TargetModel::diagonal_gaussian(diag)
            }
            "perturbed" => {
                if self.l.is_some_and(|l| l != 3.0) {
                    return Err(KlaError::Config("the perturbed example has L = 3".into()));
                }
                TargetModel::perturbed_example(need_d()?)
            }
            other => Err(KlaError::Config(format!(
                "unknown model `{other}` (iso_gauss, diag_gauss, perturbed)"
            ))),
        }
        .map_err(|e| match e {
            KlaError::Config(_) => e,
            other => KlaError::Config(other.to_string()),
        })
    }

    fn start_spec(&self, model: &TargetModel) -> StartSpec {
        self.start.clone().unwrap_or_else(|| StartSpec::Dirac {
            x: model.minimizer(),
            v: vec![0.0; model.dim()],
        })
    }
}

/// γ, h and, when h was `auto`, the step search that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub gamma: f64,
    pub h: f64,
    pub step_search: Option<StepSearch>,
}

/// `auto` γ is 10·√L; `auto` h is the largest certified step.
pub fn resolve(cfg: &RunConfig, model: &TargetModel, log_nu: f64) -> Result<Resolved> {
    let gamma = match cfg.gamma {
        Setting::Auto(_) => 10.0 * model.l().sqrt(),
        Setting::Value(g) => g,
    };
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(KlaError::Config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    match cfg.h {
        Setting::Value(h) if h.is_finite() && h > 0.0 => Ok(Resolved {
            gamma,
            h,
            step_search: None,
        }),
        Setting::Value(h) => Err(KlaError::Config(format!("h must be positive, got {h}"))),
        Setting::Auto(_) => {
            let search = admissible_step(model, gamma, cfg.eps, log_nu);
            let h = search.h_bar.ok_or_else(|| {
                KlaError::Config(format!(
                    "no certified step size in [{:e}, {:e}] for gamma = {gamma}",
                    search.bracket.0, search.bracket.1
                ))
            })?;
            Ok(Resolved {
                gamma,
                h,
                step_search: Some(search),
            })
        }
    }
}

/// Contents of `plan.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanArtifact {
    pub model: String,
    pub d: usize,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub gamma: f64,
    pub h: f64,
    /// The bisected admissible step when h was `auto`.
    pub h_bar: Option<f64>,
    pub step_search: Option<StepSearch>,
    pub plan: EpochPlan,
    pub certificates: CertificateReport,
}

/// A finished command.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    /// One line per check or artifact, for the terminal.
    pub summary: Vec<String>,
}

/// Maps an error to its exit status.
pub fn exit_code_for(err: &KlaError) -> i32 {
    match err {
        KlaError::Config(_)
        | KlaError::Json(_)
        | KlaError::InvalidParameter(_)
        | KlaError::AssumptionViolated(_)
        | KlaError::DimensionMismatch { .. } => EXIT_CONFIG,
        _ => EXIT_CHECK_FAILED,
    }
}

struct Writer {
    root: PathBuf,
    artifacts: Vec<PathBuf>,
}

impl Writer {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text)?;
        self.artifacts.push(PathBuf::from(rel));
        Ok(())
    }

    /// Writes `header` and then one record per row, so the header is present
    /// even when there are no rows.
    fn csv<T: Serialize>(&mut self, rel: &str, header: &[&str], rows: &[T]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(csv_err)?;
        w.write_record(header).map_err(csv_err)?;
        for row in rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        self.artifacts.push(PathBuf::from(rel));
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> KlaError {
    KlaError::Io(std::io::Error::other(e.to_string()))
}

/// Runs `command` on a thread pool of `cfg.threads` workers.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        if t == 0 {
            return Err(KlaError::Config("threads must be at least 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| KlaError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Plan => run_plan(cfg),
        Command::Verify => run_verify(cfg),
        Command::Mix => run_mix(cfg),
        Command::Sample => run_sample(cfg),
    })
}

fn planned(cfg: &RunConfig) -> Result<(TargetModel, StartSpec, Resolved, KernelParams, EpochPlan)> {
    if !(cfg.eps > 0.0 && cfg.eps <= 0.5) {
        return Err(KlaError::Config(format!(
            "eps must lie in (0, 1/2], got {}",
            cfg.eps
        )));
    }
    let model = cfg.build_model()?;
    let start = cfg.start_spec(&model);
    let log_nu = start
        .log_lyapunov(&model)
        .map_err(|e| KlaError::Config(format!("start: {e}")))?;
    let resolved = resolve(cfg, &model, log_nu)?;
    let params = KernelParams::for_model(&model, resolved.h, resolved.gamma)?;
    let plan = build_plan(&model, &params, cfg.eps, log_nu)?;
    Ok((model, start, resolved, params, plan))
}

fn plan_artifact(
    model: &TargetModel,
    resolved: &Resolved,
    params: &KernelParams,
    plan: &EpochPlan,
) -> PlanArtifact {
    PlanArtifact {
        model: model.name().into(),
        d: model.dim(),
        l: model.l(),
        k: model.k(),
        gamma: resolved.gamma,
        h: resolved.h,
        h_bar: resolved.step_search.as_ref().and_then(|s| s.h_bar),
        step_search: resolved.step_search.clone(),
        plan: plan.clone(),
        certificates: certificates(model, params, plan),
    }
}

fn run_plan(cfg: &RunConfig) -> Result<Outcome> {
    let (model, _, resolved, params, plan) = planned(cfg)?;
    let artifact = plan_artifact(&model, &resolved, &params, &plan);
    let certs = artifact.certificates.clone();
    let mut w = Writer::new(&cfg.out)?;
    w.json("plan.json", &artifact)?;
    let summary = vec![
        format!(
            "plan: h = {:e}, gamma = {}, epoch = {}, k = {}, horizon = {}, R_U = {:e}",
            plan.h, plan.gamma, plan.epoch, plan.k, plan.horizon, plan.r_u
        ),
        format!(
            "certificates: assumptions {}, exit {}, rejection {} (budget {:e})",
            certs.assumptions.all_pass(),
            certs.exit_ok,
            certs.rejection_ok,
            certs.rejection_budget
        ),
    ];
    let exit_code = if certs.all_ok {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    };
    Ok(Outcome {
        exit_code,
        artifacts: w.artifacts,
        summary,
    })
}

fn guard(cfg: &RunConfig, what: &str, steps: u64) -> Result<()> {
    if steps > cfg.max_steps {
        return Err(KlaError::Config(format!(
            "{what} needs {steps} chain steps, above max_steps = {}; raise max_steps or reduce the work",
            cfg.max_steps
        )));
    }
    Ok(())
}

fn run_verify(cfg: &RunConfig) -> Result<Outcome> {
    let suites: Vec<String> = if cfg.suites.is_empty() {
        ALL_SUITES.iter().map(|s| s.to_string()).collect()
    } else {
        cfg.suites.clone()
    };
    for s in &suites {
        if !ALL_SUITES.contains(&s.as_str()) {
            return Err(KlaError::Config(format!(
                "unknown suite `{s}` (known: {})",
                ALL_SUITES.join(", ")
            )));
        }
    }
    let (model, start, resolved, params, plan) = planned(cfg)?;
    let seed = cfg.seed;
    let n_states = cfg.n_states.unwrap_or(256);
    let n_trials = cfg.n_trials.unwrap_or(1024);
    let in_domain = StateSampler::UniformInDomain { r_u: plan.r_u };
    let default_sampler = cfg
        .sampler
        .clone()
        .unwrap_or_else(|| StateSampler::default_for(&model, plan.r_u));
    let mut w = Writer::new(&cfg.out)?;
    w.json(
        "plan.json",
        &plan_artifact(&model, &resolved, &params, &plan),
    )?;
    let mut summary = Vec::new();
    let mut failed = false;

    for suite in &suites {
        let line = match suite.as_str() {
            "contraction" => {
                let mut rng = stream(seed, Purpose::States, 1);
                let n = cfg.n_pairs.unwrap_or(10_000);
                let r = verify_contraction(
                    &model,
                    &params,
                    n,
                    cfg.contraction_scale,
                    &default_sampler,
                    &mut rng,
                )?;
                failed |= !r.passed;
                w.json("reports/contraction.json", &r)?;
                format!(
                    "contraction: {} violations / {} (worst margin {:e})",
                    r.violations, r.trials, r.worst_margin
                )
            }
            "energy_error" => {
                let mut rng = stream(seed, Purpose::States, 2);
                let n = cfg.n_states.unwrap_or(100_000);
                let r = verify_energy_error(&model, params.h, n, &default_sampler, &mut rng)?;
                failed |= !r.passed;
                w.json("reports/energy_error.json", &r)?;
                format!("energy_error: {} violations / {}", r.violations, r.trials)
            }
            "leading_order" => {
                let reports = [1, 4, 16]
                    .iter()
                    .map(|&d| verify_leading_order(d, &[0.02, 0.01, 0.005]))
                    .collect::<Result<Vec<_>>>()?;
                let ok = reports.iter().all(|r| r.passed);
                failed |= !ok;
                w.json("reports/leading_order.json", &reports)?;
                format!("leading_order: {}", if ok { "pass" } else { "FAIL" })
            }
            "one_shot" => {
                let mut rng = stream(seed, Purpose::Trials, 1 << 40);
                let n = cfg.n_pairs.unwrap_or(10_000);
                let r = verify_one_shot(
                    &model,
                    &params,
                    0.01,
                    n,
                    32,
                    0.01,
                    &default_sampler,
                    &mut rng,
                )?;
                w.json("reports/one_shot.json", &r)?;
                format!(
                    "one_shot: meeting {} / {}, KS min p {:.3}, statistical {}",
                    r.met,
                    r.trials,
                    r.ks_min_p,
                    verdict(r.passed)
                )
            }
            "ou_moments" => {
                let r = ou_moment_bounds(&model, &params, n_states, n_trials, &in_domain, seed)?;
                w.json("reports/ou_moments.json", &r)?;
                format!("ou_moments: statistical {}", verdict(r.passed))
            }
            "lyapunov_drift" => {
                let r = lyapunov_drift_check(&model, &plan, n_states, n_trials, &in_domain, seed)?;
                w.json("reports/lyapunov_drift.json", &r)?;
                format!("lyapunov_drift: statistical {}", verdict(r.passed))
            }
            "exit_frequency" => {
                guard(
                    cfg,
                    "exit_frequency",
                    plan.horizon.saturating_mul(cfg.replicas as u64),
                )?;
                let r = exit_frequency(&model, &plan, &start, cfg.replicas, seed)?;
                w.json("reports/exit_frequency.json", &r)?;
                format!(
                    "exit_frequency: {} against bound exp({:e}), statistical {}",
                    r.metrics["frequency"],
                    r.metrics["log_bound"],
                    verdict(r.passed)
                )
            }
            "rejection_rate" => {
                let r = rejection_rate_epoch(&model, &plan, n_states, n_trials, &in_domain, seed)?;
                w.json("reports/rejection_rate.json", &r)?;
                format!(
                    "rejection_rate: epoch x sup rejection = {:e}, statistical {}",
                    r.metrics["sup_rejection"] * r.metrics["epoch"],
                    verdict(r.passed)
                )
            }
            "stationarity" => {
                if model.gaussian_precisions().is_none() {
                    summary.push("stationarity: skipped (needs a Gaussian model)".into());
                    continue;
                }
                let grid = cfg
                    .h_grid
                    .clone()
                    .unwrap_or_else(|| vec![params.h, 2.0 * params.h, 4.0 * params.h]);
                let n_steps = cfg.n_steps.unwrap_or(1_000_000);
                guard(
                    cfg,
                    "stationarity",
                    n_steps.saturating_mul(2 * grid.len() as u64),
                )?;
                let r = stationarity_and_bias(
                    &model,
                    params.gamma,
                    &grid,
                    n_steps,
                    cfg.burn_in.unwrap_or(1000),
                    seed,
                )?;
                w.json("reports/stationarity.json", &r)?;
                format!(
                    "stationarity: MAKLA exact {}, UKLA bias increasing {}",
                    r.makla_passed, r.ukla_increasing
                )
            }
            _ => unreachable!("suite names were validated"),
        };
        summary.push(line);
    }
    let exit_code = if failed { EXIT_CHECK_FAILED } else { EXIT_OK };
    Ok(Outcome {
        exit_code,
        artifacts: w.artifacts,
        summary,
    })
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "pass"
    } else {
        "FAIL"
    }
}

const TRACE_HEADER: [&str; 7] = [
    "replica",
    "step",
    "met",
    "in_domain",
    "rejected",
    "delta_H",
    "twisted_distance",
];

/// One row of `traces/mix_trace.csv`, in the order of [`TRACE_HEADER`].
#[derive(Serialize)]
struct TraceCsvRow {
    replica: u64,
    step: u64,
    met: bool,
    in_domain: bool,
    rejected: bool,
    #[serde(rename = "delta_H")]
    delta_h: f64,
    twisted_distance: f64,
}

fn run_mix(cfg: &RunConfig) -> Result<Outcome> {
    let (model, start, resolved, params, plan) = planned(cfg)?;
    let comparison = cfg.comparison.unwrap_or(ComparisonStart::WarmUp);
    let warm = if comparison == ComparisonStart::WarmUp {
        cfg.warm_up_factor * plan.epoch
    } else {
        0
    };
    guard(
        cfg,
        "mix",
        (warm + 2 * plan.horizon).saturating_mul(cfg.replicas as u64),
    )?;
    let mut opts = MixingOptions::new(cfg.replicas, start, cfg.seed);
    opts.comparison = comparison;
    opts.warm_up_factor = cfg.warm_up_factor;
    opts.traced_replicas = cfg.trace_replicas;
    let report = estimate_mixing(&model, &plan, &opts)?;
    let mut w = Writer::new(&cfg.out)?;
    w.json(
        "plan.json",
        &plan_artifact(&model, &resolved, &params, &plan),
    )?;
    w.json("reports/mix.json", &report)?;
    w.csv(
        "traces/mix_curve.csv",
        &["n", "raw", "value", "stderr"],
        &report.curve,
    )?;
    let rows: Vec<TraceCsvRow> = report
        .traces
        .iter()
        .flat_map(|t| {
            t.rows.iter().map(move |r| TraceCsvRow {
                replica: t.replica,
                step: r.step,
                met: r.met,
                in_domain: r.in_domain,
                rejected: r.rejected,
                delta_h: r.delta_h,
                twisted_distance: r.twisted_distance,
            })
        })
        .collect();
    w.csv("traces/mix_trace.csv", &TRACE_HEADER, &rows)?;
    let summary = vec![
        format!(
            "mix: {} / {} met, median meeting step {:?}, warm-up {} steps",
            report.met, report.n_replicas, report.meeting_quantiles[1], report.warm_up_steps
        ),
        format!(
            "TV curve at horizon {} = {} (eps {}), first-epoch failure {} (bound {:.5})",
            plan.horizon,
            report.at_horizon.value,
            plan.eps,
            report.epoch_failure.frequency,
            report.epoch_failure.bound
        ),
    ];
    Ok(Outcome {
        exit_code: EXIT_OK,
        artifacts: w.artifacts,
        summary,
    })
}

/// Moments of one coordinate of a `sample` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateSummary {
    pub name: String,
    pub mean: f64,
    pub variance: f64,
}

/// Contents of `reports/sample.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub model: String,
    pub chain: ChainKind,
    pub h: f64,
    pub gamma: f64,
    pub n_steps: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub chains: u64,
    pub acceptance_rate: Option<f64>,
    pub coordinates: Vec<CoordinateSummary>,
}

fn run_sample(cfg: &RunConfig) -> Result<Outcome> {
    let model = cfg.build_model()?;
    let start = cfg.start_spec(&model);
    let log_nu = start
        .log_lyapunov(&model)
        .map_err(|e| KlaError::Config(format!("start: {e}")))?;
    let resolved = resolve(cfg, &model, log_nu)?;
    let params = KernelParams::for_model(&model, resolved.h, resolved.gamma)?;
    let chain = cfg.chain.unwrap_or(ChainKind::Makla);
    let n_steps = cfg.n_steps.unwrap_or(10_000);
    let burn_in = cfg.burn_in.unwrap_or(0);
    let thin = cfg.thin.unwrap_or(1).max(1);
    let chains = cfg.replicas.max(1);
    guard(
        cfg,
        "sample",
        (n_steps + burn_in).saturating_mul(chains as u64),
    )?;
    let d = model.dim();

    let mut header = vec!["chain".to_string(), "step".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    header.extend((0..d).map(|i| format!("v{i}")));
    header.push("accepted".into());
    header.push("delta_H".into());

    let mut moments = vec![Welford::default(); 2 * d];
    let mut accepted = 0u64;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for c in 0..chains as u64 {
        let mut rng = stream(cfg.seed, Purpose::Chain, c);
        let z = start_state(&model, &start, &mut rng)?;
        let (mut x, mut v) = (z.x, z.v);
        let mut ws = Workspace::new(d);
        let mut grad = vec![0.0; d];
        let (mut xi1, mut xi2) = (vec![0.0; d], vec![0.0; d]);
        for step in 1..=burn_in + n_steps {
            fill_standard_normal(&mut rng, &mut xi1);
            fill_standard_normal(&mut rng, &mut xi2);
            let (acc, dh) = match chain {
                ChainKind::Makla => {
                    let u = uniform(&mut rng);
                    let info = makla_step_in_place(
                        &model, &params, &mut x, &mut v, &xi1, &xi2, u, &mut ws,
                    )?;
                    (Some(info.accepted), info.delta_h)
                }
                ChainKind::Ukla => {
                    ukla_step_in_place(&model, &params, &mut x, &mut v, &xi1, &xi2, &mut grad);
                    if !x.iter().chain(&v).all(|c| c.is_finite()) {
                        return Err(KlaError::Diverged { delta_h: f64::NAN });
                    }
                    (None, f64::NAN)
                }
            };
            if step <= burn_in {
                continue;
            }
            accepted += u64::from(acc == Some(true));
            for (m, val) in moments.iter_mut().zip(x.iter().chain(&v)) {
                m.push(*val);
            }
            if (step - burn_in).is_multiple_of(thin) {
                let mut row = vec![c.to_string(), (step - burn_in).to_string()];
                row.extend(x.iter().chain(&v).map(|a| a.to_string()));
                row.push(acc.map_or(String::new(), |a| a.to_string()));
                row.push(if dh.is_nan() {
                    String::new()
                } else {
                    dh.to_string()
                });
                rows.push(row);
            }
        }
    }

    let coordinates = moments
        .iter()
        .enumerate()
        .map(|(i, m)| CoordinateSummary {
            name: if i < d {
                format!("x{i}")
            } else {
                format!("v{}", i - d)
            },
            mean: m.mean(),
            variance: m.variance(),
        })
        .collect();
    let total = n_steps * chains as u64;
    let report = SampleReport {
        model: model.name().into(),
        chain,
        h: params.h,
        gamma: params.gamma,
        n_steps,
        burn_in,
        thin,
        chains: chains as u64,
        acceptance_rate: (chain == ChainKind::Makla && total > 0)
            .then(|| accepted as f64 / total as f64),
        coordinates,
    };
    let mut w = Writer::new(&cfg.out)?;
    w.json("reports/sample.json", &report)?;
    let path = cfg.out.join("traces/chain.csv");
    fs::create_dir_all(path.parent().expect("has a parent"))?;
    let mut csvw = csv::Writer::from_path(&path).map_err(csv_err)?;
    csvw.write_record(&header).map_err(csv_err)?;
    for row in &rows {
        csvw.write_record(row).map_err(csv_err)?;
    }
    csvw.flush()?;
    w.artifacts.push(PathBuf::from("traces/chain.csv"));
    let summary = vec![format!(
        "sample: {} chain(s) x {} steps of {:?}, acceptance {:?}",
        chains, n_steps, chain, report.acceptance_rate
    )];
    Ok(Outcome {
        exit_code: EXIT_OK,
        artifacts: w.artifacts,
        summary,
    })
}
