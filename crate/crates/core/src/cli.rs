//! Batch front end: a JSON run configuration in; certificates, cached gains
//! and CSV time series out.
//!
//! Files written to the output directory:
//!
//! | file | written by |
//! |---|---|
//! | `analysis_<name>.json` | `analyze` |
//! | `synthesis_<kind>.json`, `gains_<kind>.json` | `synthesize` (and `simulate` on a cache miss) |
//! | `summary_<name>.csv`, `costs_<name>.csv`, `run_meta.json` | `simulate` |
//! | `comparison.csv` | `compare` |
//!
//! Exit codes are part of the interface: 0 success or feasible, 2 infeasible,
//! 3 inconclusive, 64 configuration error, 66 missing input, 74 I/O failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{cost_bound, drift_constants, guaranteed_cost_gamma, ms_spectral_radius, ms_stability_test, DriftConstants, GammaCertificate, StabilityCertificate};
use crate::error::Error;
use crate::lmi::default_backend_id;
use crate::matrix::{serde_matrix_vec, serde_opt_matrix};
use crate::model::{close_loop, validate_model, Controller, PemAdmModel};
use crate::scenarios::{build_car_following, collision_metrics, physical_gap, IdmPolicy, ScenarioFile};
use crate::sim::{monte_carlo, BiasSignal, MonteCarloConfig, MonteCarloSummary, Policy};
use crate::synthesis::{refine_guaranteed_cost, synthesize_sogcc, synthesize_ssc, RefineOptions, SynthesisStatus, DEFAULT_LAMBDA};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_INCONCLUSIVE: i32 = 3;
pub const EXIT_CONFIG: i32 = 64;
pub const EXIT_MISSING_INPUT: i32 = 66;
pub const EXIT_IO: i32 = 74;

/// Environment variable with the Monte Carlo worker count.
pub const THREADS_ENV: &str = "PEMADM_THREADS";

/// Trials may diverge by design (unstable baselines); beyond this fraction
/// the run metadata carries a warning.
const DIVERGENCE_WARNING_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InfeasibleCertificate => EXIT_INFEASIBLE,
            Error::Lmi(_) => EXIT_INCONCLUSIVE,
            Error::MissingInput(_) => EXIT_MISSING_INPUT,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_INPUT,
            Error::Io(_) | Error::Csv(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// A controller in the run: a named pipeline stage (`ssc`, `sogcc`,
/// `refined`, `idm`) or explicit gains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControllerSpec {
    Named(String),
    Explicit {
        name: String,
        #[serde(with = "serde_matrix_vec")]
        gains: Vec<DMatrix<f64>>,
    },
}

const STAGES: [&str; 4] = ["ssc", "sogcc", "refined", "idm"];

impl ControllerSpec {
    pub fn named(name: &str) -> Self {
        Self::Named(name.to_string())
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Named(n) | Self::Explicit { name: n, .. } => n,
        }
    }
}

/// Synthesis routes available on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Mean-square stabilizing gains.
    Ssc,
    /// Guaranteed-cost gains from the fixed-λ LMI.
    Sogcc,
    /// Guaranteed-cost descent started from the stabilizing gains.
    Refined,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Ssc => "ssc",
            SynthKind::Sogcc => "sogcc",
            SynthKind::Refined => "refined",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "ssc" => Some(SynthKind::Ssc),
            "sogcc" => Some(SynthKind::Sogcc),
            "refined" => Some(SynthKind::Refined),
            _ => None,
        }
    }
}

fn default_r0() -> usize {
    1
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_horizon() -> usize {
    3000
}
fn default_trials() -> usize {
    200
}
fn default_seed() -> u64 {
    20_240_601
}
fn default_controllers() -> Vec<ControllerSpec> {
    ["ssc", "refined", "idm"].iter().map(|n| ControllerSpec::named(n)).collect()
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a run needs. Either `scenario` (car following) or `model`
/// (a raw model with `x0`, `bias` and optionally `dt`) describes the plant;
/// with neither, the default car-following scenario is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PemAdmModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasSignal>,
    /// Time step of a raw model, used for the `time_s` column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Initial mode.
    #[serde(default = "default_r0")]
    pub r0: usize,
    /// State weight; `10·I` when absent.
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none", with = "serde_opt_matrix")]
    pub q: Option<DMatrix<f64>>,
    /// Input weight; `I` when absent.
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none", with = "serde_opt_matrix")]
    pub r: Option<DMatrix<f64>>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    #[serde(default = "default_controllers")]
    pub controllers: Vec<ControllerSpec>,
    #[serde(default)]
    pub refine: RefineOptions,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            model: None,
            x0: None,
            bias: None,
            dt: None,
            r0: default_r0(),
            q: None,
            r: None,
            lambda: default_lambda(),
            horizon: default_horizon(),
            trials: default_trials(),
            master_seed: default_seed(),
            controllers: default_controllers(),
            refine: RefineOptions::default(),
            out_dir: default_out(),
        }
    }
}

/// The plant and experiment a [`RunConfig`] resolves to.
#[derive(Clone, Debug)]
pub struct Problem {
    pub model: PemAdmModel,
    pub x0: DVector<f64>,
    pub bias: BiasSignal,
    pub dt: f64,
    pub scenario: Option<ScenarioFile>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl RunConfig {
    /// Missing file → exit 66; unreadable or invalid JSON → exit 64.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            let code = if e.kind() == std::io::ErrorKind::NotFound { EXIT_MISSING_INPUT } else { EXIT_CONFIG };
            CliError::new(code, format!("{}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.scenario.is_some() && self.model.is_some() {
            return Err(CliError::config("give either \"scenario\" or \"model\", not both"));
        }
        if self.model.is_none() && (self.x0.is_some() || self.bias.is_some() || self.dt.is_some()) {
            return Err(CliError::config("\"x0\", \"bias\" and \"dt\" only apply to a raw \"model\""));
        }
        if self.horizon == 0 || self.trials == 0 {
            return Err(CliError::config("horizon and trials must be at least 1"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(CliError::config(format!("lambda must be positive, got {}", self.lambda)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.controllers {
            let name = c.name();
            let valid = !name.is_empty() && name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-');
            if !valid {
                return Err(CliError::config(format!("controller name {name:?} must be alphanumeric, '_' or '-'")));
            }
            match c {
                ControllerSpec::Named(n) if !STAGES.contains(&n.as_str()) => {
                    return Err(CliError::config(format!(
                        "unknown controller {n:?}; expected one of {STAGES:?} or explicit gains"
                    )));
                }
                ControllerSpec::Explicit { name, .. } if STAGES.contains(&name.as_str()) => {
                    return Err(CliError::config(format!("explicit gains may not use the reserved name {name:?}")));
                }
                _ => {}
            }
            if !seen.insert(name.to_string()) {
                return Err(CliError::config(format!("controller {name:?} listed twice")));
            }
        }
        Ok(())
    }

    pub fn problem(&self) -> CliResult<Problem> {
        let (model, x0, bias, dt, scenario) = match &self.model {
            Some(m) => {
                let report = validate_model(m);
                if !report.is_valid() {
                    return Err(CliError::config(format!("invalid model: {report}")));
                }
                let x0 = self.x0.clone().ok_or_else(|| CliError::config("a raw model needs \"x0\""))?;
                if x0.len() != m.state_dim() {
                    return Err(CliError::config(format!("x0 has {} entries, the state has {}", x0.len(), m.state_dim())));
                }
                let dt = self.dt.unwrap_or(1.0);
                if !(dt > 0.0 && dt.is_finite()) {
                    return Err(CliError::config("dt must be positive"));
                }
                (m.clone(), DVector::from_vec(x0), self.bias.clone().unwrap_or(BiasSignal::Zero), dt, None)
            }
            None => {
                let sc = self.scenario.clone().unwrap_or_else(|| ScenarioFile {
                    car_following: Default::default(),
                    idm: Default::default(),
                });
                let (m, x0) = build_car_following(&sc.car_following)?;
                (m, x0, sc.car_following.bias.clone(), sc.car_following.h, Some(sc))
            }
        };
        if self.r0 >= model.mode_count() {
            return Err(CliError::config(format!("r0 = {} but the model has {} modes", self.r0, model.mode_count())));
        }
        let (n1, n2) = (model.state_dim(), model.input_dim());
        let q = self.q.clone().unwrap_or_else(|| DMatrix::identity(n1, n1) * 10.0);
        let r = self.r.clone().unwrap_or_else(|| DMatrix::identity(n2, n2));
        if q.shape() != (n1, n1) || r.shape() != (n2, n2) {
            return Err(CliError::config(format!("Q must be {n1}x{n1} and R {n2}x{n2}")));
        }
        bias.check_bound(self.horizon, model.bias_bound)?;
        Ok(Problem { model, x0, bias, dt, scenario, q, r })
    }

    /// Replaces the controller list by `names`, keeping explicit gains
    /// defined in the file under those names.
    pub fn select_controllers(&mut self, names: &[String]) -> CliResult<()> {
        let picked = names
            .iter()
            .map(|n| {
                self.controllers
                    .iter()
                    .find(|c| c.name() == n)
                    .cloned()
                    .unwrap_or_else(|| ControllerSpec::named(n))
            })
            .collect();
        self.controllers = picked;
        self.validate()
    }
}

/// Cached gains of a synthesis stage, tied to the model they were made for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainsFile {
    pub kind: SynthKind,
    pub controller: Controller,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub backend: String,
    pub model: PemAdmModel,
}

fn gains_path(out: &Path, kind: SynthKind) -> PathBuf {
    out.join(format!("gains_{}.json", kind.name()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_cached_gains(out: &Path, kind: SynthKind, model: &PemAdmModel) -> CliResult<Option<Controller>> {
    let path = gains_path(out, kind);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let cached: GainsFile =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if cached.model != *model {
        return Err(CliError::config(format!(
            "{} was synthesized for a different model; remove it or use another output directory",
            path.display()
        )));
    }
    cached.controller.check_against(model)?;
    Ok(Some(cached.controller))
}

/// Result of one synthesis stage: exit code, report and gains if any.
struct SynthesisOutcome {
    code: i32,
    report: serde_json::Value,
    gains: Option<GainsFile>,
    summary: String,
}

fn code_for(status: SynthesisStatus) -> i32 {
    match status {
        SynthesisStatus::Feasible => EXIT_OK,
        SynthesisStatus::Infeasible => EXIT_INFEASIBLE,
        SynthesisStatus::Inconclusive | SynthesisStatus::Failed => EXIT_INCONCLUSIVE,
    }
}

fn run_synthesis(cfg: &RunConfig, p: &Problem, kind: SynthKind) -> CliResult<SynthesisOutcome> {
    let backend = default_backend_id();
    match kind {
        SynthKind::Ssc | SynthKind::Sogcc => {
            let res = match kind {
                SynthKind::Ssc => synthesize_ssc(&p.model)?,
                _ => synthesize_sogcc(&p.model, &p.q, &p.r, cfg.lambda)?,
            };
            let summary = match (&res.controller, res.status) {
                (Some(k), SynthesisStatus::Feasible) => format!(
                    "{}: feasible, gains {}{}",
                    kind.name(),
                    format_gains(k),
                    res.gamma.map(|g| format!(", gamma {g:.6}")).unwrap_or_default()
                ),
                _ => format!("{}: {:?}: {}", kind.name(), res.status, res.message),
            };
            let gains = res.controller.clone().filter(|_| res.is_feasible()).map(|controller| GainsFile {
                kind,
                controller,
                gamma: res.gamma,
                lambda: res.lambda,
                backend: backend.clone(),
                model: p.model.clone(),
            });
            Ok(SynthesisOutcome {
                code: code_for(res.status),
                report: serde_json::to_value(&res).map_err(Error::from)?,
                gains,
                summary,
            })
        }
        SynthKind::Refined => {
            let initial = match load_cached_gains(&cfg.out_dir, SynthKind::Ssc, &p.model)? {
                Some(k) => k,
                None => {
                    let ssc = run_synthesis(cfg, p, SynthKind::Ssc)?;
                    let Some(g) = ssc.gains else {
                        return Ok(SynthesisOutcome {
                            code: ssc.code,
                            summary: format!("refined: no stabilizing initial gains ({})", ssc.summary),
                            report: json!({ "kind": "refined", "status": "no_initial_gains", "ssc": ssc.report }),
                            gains: None,
                        });
                    };
                    write_outcome(&cfg.out_dir, SynthKind::Ssc, &ssc.report, Some(&g))?;
                    g.controller
                }
            };
            let res = refine_guaranteed_cost(&p.model, &p.q, &p.r, &initial, &cfg.refine)?;
            let ok = res.status == SynthesisStatus::Feasible;
            let summary = if ok {
                format!("refined: gains {}, gamma {:.6} ({})", format_gains(&res.controller), res.gamma, res.message)
            } else {
                format!("refined: {:?}: {}", res.status, res.message)
            };
            let gains = ok.then(|| GainsFile {
                kind,
                controller: res.controller.clone(),
                gamma: Some(res.gamma),
                lambda: None,
                backend: backend.clone(),
                model: p.model.clone(),
            });
            let mut report = serde_json::to_value(&res).map_err(Error::from)?;
            report["kind"] = json!("refined");
            report["initial"] = serde_json::to_value(&initial).map_err(Error::from)?;
            Ok(SynthesisOutcome { code: code_for(res.status), report, gains, summary })
        }
    }
}

fn write_outcome(out: &Path, kind: SynthKind, report: &serde_json::Value, gains: Option<&GainsFile>) -> CliResult<()> {
    write_json(&out.join(format!("synthesis_{}.json", kind.name())), report)?;
    if let Some(g) = gains {
        write_json(&gains_path(out, kind), g)?;
    }
    Ok(())
}

fn format_gains(k: &Controller) -> String {
    let parts: Vec<String> = k
        .gains
        .iter()
        .map(|g| {
            let rows: Vec<String> = (0..g.nrows())
                .map(|i| (0..g.ncols()).map(|j| format!("{:.4}", g[(i, j)])).collect::<Vec<_>>().join(", "))
                .collect();
            format!("[{}]", rows.join("; "))
        })
        .collect();
    parts.join(" ")
}

/// Gains of a linear controller. Synthesis stages come from the cache; on a
/// miss they are synthesized (and cached) only if `synthesize` is set.
fn linear_controller(cfg: &RunConfig, p: &Problem, spec: &ControllerSpec, synthesize: bool) -> CliResult<Controller> {
    match spec {
        ControllerSpec::Explicit { gains, .. } => {
            let k = Controller::new(gains.clone());
            k.check_against(&p.model)?;
            Ok(k)
        }
        ControllerSpec::Named(n) => {
            let kind = SynthKind::from_name(n).ok_or_else(|| CliError::config(format!("{n} is not a linear controller")))?;
            if let Some(k) = load_cached_gains(&cfg.out_dir, kind, &p.model)? {
                return Ok(k);
            }
            if !synthesize {
                return Err(CliError::new(
                    EXIT_MISSING_INPUT,
                    format!("no cached gains for {n}; run `pemadm synthesize {n}` first"),
                ));
            }
            log::info!("no cached gains for {n}; synthesizing");
            let outcome = run_synthesis(cfg, p, kind)?;
            write_outcome(&cfg.out_dir, kind, &outcome.report, outcome.gains.as_ref())?;
            eprintln!("{}", outcome.summary);
            match outcome.gains {
                Some(g) => Ok(g.controller),
                None => Err(CliError::new(outcome.code, format!("no gains for {n}: {}", outcome.summary))),
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalysisReport {
    pub controller: String,
    pub gains: Controller,
    pub stability: StabilityCertificate,
    pub spectral_radius: f64,
    pub guaranteed_cost: Option<GammaCertificate>,
    /// Bound on the expected cost over the configured horizon.
    pub cost_bound: Option<f64>,
    /// Drift constants of the stability certificate for the bias at `k = 0`.
    pub drift: Option<DriftConstants>,
}

/// Stability and guaranteed-cost certificates for every linear controller in
/// the configuration (explicit gains or cached synthesis results).
pub fn cmd_analyze(cfg: &RunConfig) -> CliResult<i32> {
    let p = cfg.problem()?;
    let linear: Vec<&ControllerSpec> = cfg.controllers.iter().filter(|c| c.name() != "idm").collect();
    if linear.is_empty() {
        return Err(CliError::config("no linear controller to analyze"));
    }
    let mut code = EXIT_OK;
    for spec in linear {
        let k = linear_controller(cfg, &p, spec, false)?;
        let cl = close_loop(&p.model, &k)?;
        let stability = ms_stability_test(&cl);
        let rho = ms_spectral_radius(&cl);
        let (gc, bound, drift) = if stability.feasible {
            let gc = guaranteed_cost_gamma(&cl, &k, &p.model, &p.q, &p.r)?;
            let bound = if gc.feasible {
                Some(cost_bound(&gc, &p.x0, cfg.r0, cfg.horizon, &p.bias, p.model.noise_dim())?)
            } else {
                None
            };
            let v0 = p.bias.value_in(0, p.model.modes[0].e.ncols())?;
            (Some(gc), bound, drift_constants(&cl, &stability.p, &v0).ok())
        } else {
            (None, None, None)
        };
        let this = if stability.feasible {
            EXIT_OK
        } else if stability.inconclusive {
            EXIT_INCONCLUSIVE
        } else {
            EXIT_INFEASIBLE
        };
        println!(
            "{}: {} (margin {:.3e}, spectral radius {:.6}){}{}",
            spec.name(),
            match this {
                EXIT_OK => "mean-square stable",
                EXIT_INFEASIBLE => "not certified (infeasible)",
                _ => "inconclusive",
            },
            stability.margin,
            rho,
            gc.as_ref().filter(|g| g.feasible).map(|g| format!(", gamma {:.6}", g.gamma)).unwrap_or_default(),
            bound.map(|b| format!(", cost bound {b:.4}")).unwrap_or_default(),
        );
        let report = AnalysisReport {
            controller: spec.name().to_string(),
            gains: k,
            stability,
            spectral_radius: rho,
            guaranteed_cost: gc,
            cost_bound: bound,
            drift,
        };
        write_json(&cfg.out_dir.join(format!("analysis_{}.json", spec.name())), &report)?;
        code = code.max(this);
    }
    Ok(code)
}

/// Runs one synthesis route and writes its report and gain cache.
pub fn cmd_synthesize(cfg: &RunConfig, kind: SynthKind) -> CliResult<i32> {
    let p = cfg.problem()?;
    let outcome = run_synthesis(cfg, &p, kind)?;
    write_outcome(&cfg.out_dir, kind, &outcome.report, outcome.gains.as_ref())?;
    println!("{}", outcome.summary);
    Ok(outcome.code)
}

enum Resolved {
    Linear(Controller),
    Idm(IdmPolicy),
}

impl Resolved {
    fn policy(&self) -> &dyn Policy {
        match self {
            Resolved::Linear(k) => k,
            Resolved::Idm(p) => p,
        }
    }
}

fn resolve(cfg: &RunConfig, p: &Problem, spec: &ControllerSpec) -> CliResult<Resolved> {
    if spec.name() == "idm" {
        let sc = p.scenario.as_ref().ok_or_else(|| CliError::config("the idm baseline needs a car-following scenario"))?;
        return Ok(Resolved::Idm(IdmPolicy::new(sc.idm.clone(), &sc.car_following)?));
    }
    Ok(Resolved::Linear(linear_controller(cfg, p, spec, true)?))
}

/// Locale-independent float text: shortest round-trip digits, exponent
/// notation outside `[1e-4, 1e15)`.
fn fmt_f64(v: f64) -> String {
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&v.abs()) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn summary_header(p: &Problem) -> Vec<String> {
    let mut h = vec!["step".to_string(), "time_s".into(), "rmse".into()];
    for i in 1..=p.model.state_dim() {
        h.push(format!("x{i}_mean"));
        h.push(format!("x{i}_std"));
    }
    if p.model.input_dim() == 1 {
        h.push("u_mean".into());
        h.push("u_std".into());
    } else {
        for j in 1..=p.model.input_dim() {
            h.push(format!("u{j}_mean"));
            h.push(format!("u{j}_std"));
        }
    }
    if p.scenario.is_some() {
        h.push("gap_mean".into());
        h.push("gap_std".into());
    }
    h
}

fn write_summary_csv(path: &Path, p: &Problem, s: &MonteCarloSummary) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(summary_header(p))?;
    for k in 0..s.rmse.len() {
        let mut row = vec![k.to_string(), fmt_f64(k as f64 * p.dt), fmt_f64(s.rmse[k])];
        for c in 0..p.model.state_dim() {
            row.push(fmt_f64(s.x_mean[k][c]));
            row.push(fmt_f64(s.x_std[k][c]));
        }
        for c in 0..p.model.input_dim() {
            row.push(fmt_f64(s.u_mean[k][c]));
            row.push(fmt_f64(s.u_std[k][c]));
        }
        if let Some(sc) = &p.scenario {
            row.push(fmt_f64(physical_gap(s.x_mean[k][0], sc.car_following.delta_d)));
            row.push(fmt_f64(s.x_std[k][0]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_costs_csv(path: &Path, s: &MonteCarloSummary, collided: Option<&[bool]>) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["trial", "cost", "collided"])?;
    for (m, t) in s.trials.iter().enumerate() {
        // A truncated trajectory has no meaningful cost.
        let cost = if t.diverged_at.is_some() { f64::NAN } else { t.cost };
        let col = collided.map(|c| c[m].to_string()).unwrap_or_default();
        w.write_record([t.trial.to_string(), fmt_f64(cost), col])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct ControllerMeta {
    name: String,
    gains: Option<Controller>,
    trials: usize,
    diverged: usize,
    divergence_warning: bool,
    flagged_steps: usize,
    mean_cost: f64,
    collision_fraction: Option<f64>,
}

/// Monte Carlo ensemble per controller; writes the summary and cost CSVs and
/// `run_meta.json`. `threads` only changes scheduling, never the results.
pub fn cmd_simulate(cfg: &RunConfig, threads: Option<usize>) -> CliResult<i32> {
    let p = cfg.problem()?;
    if cfg.controllers.is_empty() {
        return Err(CliError::config("no controllers to simulate"));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let mut metas = Vec::new();
    let mut warnings = Vec::new();
    for spec in &cfg.controllers {
        let name = spec.name();
        let resolved = resolve(cfg, &p, spec)?;
        let mc = MonteCarloConfig {
            x0: p.x0.iter().copied().collect(),
            r0: cfg.r0,
            horizon: cfg.horizon,
            bias: p.bias.clone(),
            trials: cfg.trials,
            master_seed: cfg.master_seed,
            q: Some(p.q.clone()),
            r: Some(p.r.clone()),
            workers: threads,
            keep_trajectories: p.scenario.is_some(),
        };
        let summary = monte_carlo(&p.model, resolved.policy(), &mc)?;
        let collisions = p.scenario.as_ref().map(|sc| collision_metrics(&summary.trajectories, &sc.car_following));
        write_summary_csv(&cfg.out_dir.join(format!("summary_{name}.csv")), &p, &summary)?;
        write_costs_csv(
            &cfg.out_dir.join(format!("costs_{name}.csv")),
            &summary,
            collisions.as_ref().map(|c| c.collided.as_slice()),
        )?;
        let diverged = summary.diverged_count();
        let warn = diverged as f64 > DIVERGENCE_WARNING_FRACTION * cfg.trials as f64;
        if warn {
            warnings.push(format!("{name}: {diverged} of {} trials diverged", cfg.trials));
        }
        let last = summary.rmse.last().copied().unwrap_or(f64::NAN);
        println!(
            "{name}: final rmse {:.6}, mean cost {:.4}, diverged {diverged}/{}{}",
            last,
            summary.mean_cost(),
            cfg.trials,
            collisions.as_ref().map(|c| format!(", collisions {}/{}", c.count, cfg.trials)).unwrap_or_default()
        );
        metas.push(ControllerMeta {
            name: name.to_string(),
            gains: match &resolved {
                Resolved::Linear(k) => Some(k.clone()),
                Resolved::Idm(_) => None,
            },
            trials: cfg.trials,
            diverged,
            divergence_warning: warn,
            flagged_steps: summary.trials.iter().map(|t| t.flagged_steps).sum(),
            mean_cost: summary.mean_cost(),
            collision_fraction: collisions.map(|c| c.fraction),
        });
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let meta = json!({
        "master_seed": cfg.master_seed,
        "versions": { "pemadm": env!("CARGO_PKG_VERSION"), "lmi_backend": default_backend_id() },
        "config": cfg,
        "controllers": metas,
        "warnings": warnings,
    });
    write_json(&cfg.out_dir.join("run_meta.json"), &meta)?;
    Ok(EXIT_OK)
}

/// One line of the overview printed by `compare`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub controller: String,
    pub initial_rmse: f64,
    pub final_rmse: f64,
    /// Mean RMSE over the last tenth of the horizon.
    pub steady_rmse: f64,
    pub mean_cost: f64,
    pub collision_fraction: Option<f64>,
}

fn read_csv(path: &Path) -> CliResult<(csv::StringRecord, Vec<csv::StringRecord>)> {
    if !path.exists() {
        return Err(CliError::new(EXIT_MISSING_INPUT, format!("missing {}; run `pemadm simulate` first", path.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

fn column(header: &csv::StringRecord, name: &str, path: &Path) -> CliResult<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::config(format!("{} has no {name} column", path.display())))
}

fn parse_f64(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

/// Merges the per-controller summaries into `comparison.csv` (one block of
/// rows per controller, with its collision fraction and mean cost appended)
/// and returns the overview.
pub fn compare_outputs(out: &Path, names: &[&str]) -> CliResult<Vec<ComparisonRow>> {
    let mut merged: Option<csv::Writer<fs::File>> = None;
    let mut expected_header: Option<csv::StringRecord> = None;
    let mut overview = Vec::new();
    let mut inputs = Vec::new();
    for name in names {
        let sp = out.join(format!("summary_{name}.csv"));
        let cp = out.join(format!("costs_{name}.csv"));
        inputs.push((name, read_csv(&sp)?, read_csv(&cp)?, sp, cp));
    }
    for (name, (sh, srows), (ch, crows), sp, cp) in inputs {
        let cost_col = column(&ch, "cost", &cp)?;
        let col_col = column(&ch, "collided", &cp)?;
        let costs: Vec<f64> = crows.iter().map(|r| parse_f64(&r[cost_col])).filter(|c| c.is_finite()).collect();
        let mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;
        let flags: Vec<&str> = crows.iter().map(|r| &r[col_col]).filter(|s| !s.is_empty()).collect();
        let collision_fraction = (!flags.is_empty())
            .then(|| flags.iter().filter(|&&f| f == "true").count() as f64 / crows.len() as f64);

        let rmse_col = column(&sh, "rmse", &sp)?;
        let rmse: Vec<f64> = srows.iter().map(|r| parse_f64(&r[rmse_col])).collect();
        if rmse.is_empty() {
            return Err(CliError::config(format!("{} is empty", sp.display())));
        }
        let tail = (rmse.len() / 10).max(1);
        overview.push(ComparisonRow {
            controller: name.to_string(),
            initial_rmse: rmse[0],
            final_rmse: rmse[rmse.len() - 1],
            steady_rmse: rmse[rmse.len() - tail..].iter().sum::<f64>() / tail as f64,
            mean_cost,
            collision_fraction,
        });

        match &expected_header {
            Some(h) if *h != sh => {
                return Err(CliError::config(format!("{} has different columns than the other summaries", sp.display())))
            }
            Some(_) => {}
            None => expected_header = Some(sh.clone()),
        }
        if merged.is_none() {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_path(out.join("comparison.csv"))?;
            let mut header = vec!["controller"];
            header.extend(sh.iter());
            header.extend(["collision_fraction", "mean_cost"]);
            w.write_record(&header)?;
            merged = Some(w);
        }
        let w = merged.as_mut().expect("writer");
        let cf = collision_fraction.map(fmt_f64).unwrap_or_default();
        let mc = fmt_f64(mean_cost);
        for row in &srows {
            let mut rec = vec![name.to_string()];
            rec.extend(row.iter().map(str::to_string));
            rec.push(cf.clone());
            rec.push(mc.clone());
            w.write_record(&rec)?;
        }
    }
    if let Some(mut w) = merged {
        w.flush()?;
    }
    Ok(overview)
}

/// Compares the controllers of the configuration from a previous `simulate`
/// run in the output directory, or after a fresh one if `run` is set.
pub fn cmd_compare(cfg: &RunConfig, threads: Option<usize>, run: bool) -> CliResult<i32> {
    if run {
        cmd_simulate(cfg, threads)?;
    }
    let names: Vec<&str> = cfg.controllers.iter().map(|c| c.name()).collect();
    let rows = compare_outputs(&cfg.out_dir, &names)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{:<16} {:>12} {:>12} {:>12} {:>12} {:>10}", "controller", "rmse(0)", "rmse(end)", "steady", "mean cost", "collided")?;
    for r in &rows {
        writeln!(
            stdout,
            "{:<16} {:>12.5} {:>12.5} {:>12.5} {:>12.3} {:>10}",
            r.controller,
            r.initial_rmse,
            r.final_rmse,
            r.steady_rmse,
            r.mean_cost,
            r.collision_fraction.map(|f| format!("{f:.3}")).unwrap_or_else(|| "-".into())
        )?;
    }
    Ok(EXIT_OK)
}

#[derive(Parser, Debug)]
#[command(name = "pemadm", version, about = "Analyze, synthesize and simulate perception-error driving loops")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(clap::Args, Debug, Default)]
pub struct CommonArgs {
    /// Run configuration (JSON); the default car-following run without it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed of the Monte Carlo trials.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of Monte Carlo trials.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Simulated steps per trial.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// λ of the guaranteed-cost synthesis.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Controllers to use (ssc, sogcc, refined, idm or a name with explicit
    /// gains in the configuration).
    #[arg(long = "controller", global = true, num_args = 1..)]
    pub controllers: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Certify mean-square stability and the guaranteed cost of the configured gains.
    Analyze,
    /// Synthesize gains and cache them in the output directory.
    Synthesize {
        #[arg(value_enum)]
        kind: SynthKind,
    },
    /// Monte Carlo simulation of every configured controller.
    Simulate,
    /// Merge simulation summaries into comparison.csv.
    Compare {
        /// Run the simulation first instead of reading earlier outputs.
        #[arg(long)]
        run: bool,
    },
}

/// Configuration from `--config` (or defaults) with the command-line
/// overrides applied.
pub fn resolve_config(args: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(h) = args.horizon {
        cfg.horizon = h;
    }
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if !args.controllers.is_empty() {
        cfg.select_controllers(&args.controllers)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Parses the arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = resolve_config(&cli.common).and_then(|cfg| {
        let threads = threads_from_env()?;
        match cli.command {
            Command::Analyze => cmd_analyze(&cfg),
            Command::Synthesize { kind } => cmd_synthesize(&cfg, kind),
            Command::Simulate => cmd_simulate(&cfg, threads),
            Command::Compare { run } => cmd_compare(&cfg, threads, run),
        }
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_text() {
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(1.5), "1.5");
        assert_eq!(fmt_f64(-2.5e-7), "-2.5e-7");
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let args = CommonArgs { trials: Some(3), controllers: vec!["ssc".into()], ..Default::default() };
        let cfg = resolve_config(&args).unwrap();
        assert_eq!(cfg.trials, 3);
        assert_eq!(cfg.controllers, vec![ControllerSpec::named("ssc")]);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            r#"{"horizon": 0}"#,
            r#"{"controllers": ["lqr"]}"#,
            r#"{"controllers": ["ssc", "ssc"]}"#,
            r#"{"controllers": [{"name": "ssc", "gains": [[[1.0]]]}]}"#,
            r#"{"x0": [1.0]}"#,
            r#"{"lambda": -1}"#,
        ];
        for b in bad {
            let cfg: RunConfig = serde_json::from_str(b).unwrap();
            assert_eq!(cfg.validate().unwrap_err().code, EXIT_CONFIG, "{b}");
        }
        assert!(serde_json::from_str::<RunConfig>(r#"{"unknown": 1}"#).is_err());
    }

    #[test]
    fn explicit_gains_parse() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"controllers": [{"name": "reference", "gains": [[[0, -3.6]], [[-1.22, -2.66]]]}]}"#)
                .unwrap();
        match &cfg.controllers[0] {
            ControllerSpec::Explicit { name, gains } => {
                assert_eq!(name, "reference");
                assert_eq!(gains[1][(0, 1)], -2.66);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::InfeasibleCertificate).code, EXIT_INFEASIBLE);
        assert_eq!(CliError::from(Error::MissingInput("x".into())).code, EXIT_MISSING_INPUT);
        assert_eq!(CliError::from(Error::Config("x".into())).code, EXIT_CONFIG);
        let nf = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(CliError::from(nf).code, EXIT_MISSING_INPUT);
    }
}
