//! Acceptance checks. Each criterion prints one `PASS`/`FAIL` line followed by
//! indented detail lines; the process exits nonzero if any criterion fails.
//! Tolerances are pinned in the constants below.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pemadm::analysis::{cost_bound, drift_constants, guaranteed_cost_gamma, ms_spectral_radius, ms_stability_test};
use pemadm::cli::{cmd_simulate, ControllerSpec, RunConfig};
use pemadm::model::{close_loop, Controller, PemAdmModel};
use pemadm::scenarios::{
    collision_metrics, physical_gap, reference_sogcc_controller, reference_ssc_controller, CarFollowingParams,
    IdmParams, IdmPolicy,
};
use pemadm::sim::{monte_carlo, rollout, trial_seed, MonteCarloConfig, MonteCarloSummary, Policy};
use pemadm::synthesis::{refine_guaranteed_cost, synthesize_sogcc, synthesize_ssc, RefineOptions};

const ORACLE_INSTANCES: usize = 200;
const ORACLE_BAND: f64 = 0.05;
const ORACLE_RHO_RANGE: (f64, f64) = (0.2, 2.5);
const ORACLE_BUDGET: Duration = Duration::from_secs(120);
const SOGCC_LAMBDA: f64 = 1e-5;
const GAMMA_SLACK: f64 = 1.05;
const MC_TRIALS: usize = 200;
const MC_HORIZON: usize = 3000;
const MC_SEED: u64 = 20240601;
const RMSE_RATIO: f64 = 0.25;
const GAP_TARGET: f64 = 5.0;
const GAP_TOL: f64 = 0.5;
const DRIFT_TRANSITIONS: usize = 10_000;
const DRIFT_SIGMAS: f64 = 3.0;

struct Report {
    failed: usize,
}

impl Report {
    fn criterion(&mut self, name: &str, pass: bool, details: &[String]) {
        println!("{} {name}", if pass { "PASS" } else { "FAIL" });
        for d in details {
            println!("    {d}");
        }
        if !pass {
            self.failed += 1;
        }
    }
}

struct Setup {
    model: PemAdmModel,
    x0: DVector<f64>,
    params: CarFollowingParams,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Setup {
    fn mc(&self, keep_trajectories: bool) -> MonteCarloConfig {
        MonteCarloConfig {
            x0: self.x0.iter().copied().collect(),
            r0: 1,
            horizon: MC_HORIZON,
            bias: self.params.bias.clone(),
            trials: MC_TRIALS,
            master_seed: MC_SEED,
            q: Some(self.q.clone()),
            r: Some(self.r.clone()),
            workers: None,
            keep_trajectories,
        }
    }

    /// `(passes stability test, spectral radius)` of the closed loop.
    fn stable(&self, k: &Controller) -> (bool, f64) {
        let cl = close_loop(&self.model, k).unwrap();
        (ms_stability_test(&cl).feasible, ms_spectral_radius(&cl))
    }

    fn gamma(&self, k: &Controller) -> pemadm::analysis::GammaCertificate {
        let cl = close_loop(&self.model, k).unwrap();
        guaranteed_cost_gamma(&cl, k, &self.model, &self.q, &self.r).unwrap()
    }

    /// `(empirical mean cost, bound)`; the bound is `None` without a certificate.
    fn bound_check(&self, k: &Controller) -> (f64, Option<f64>) {
        let cfg = self.mc(false);
        let summary = monte_carlo(&self.model, k, &cfg).unwrap();
        let cert = self.gamma(k);
        let bound = cert
            .feasible
            .then(|| cost_bound(&cert, &self.x0, cfg.r0, cfg.horizon, &cfg.bias, self.model.noise_dim()).unwrap());
        (summary.mean_cost(), bound)
    }
}

fn oracle_agreement(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let (mut checked, mut disagreements) = (0, 0);
    for _ in 0..ORACLE_INSTANCES {
        let target = rng.random_range(ORACLE_RHO_RANGE.0..ORACLE_RHO_RANGE.1);
        let (cl, rho) = common::random_closed_loop(&mut rng, target);
        if (rho - 1.0).abs() <= ORACLE_BAND {
            continue;
        }
        checked += 1;
        if ms_stability_test(&cl).feasible != (rho < 1.0) {
            disagreements += 1;
        }
    }
    let elapsed = start.elapsed();
    report.criterion(
        "oracle agreement",
        disagreements == 0 && elapsed < ORACLE_BUDGET,
        &[format!(
            "{checked} of {ORACLE_INSTANCES} instances outside the band, {disagreements} disagreements, {:.2} s",
            elapsed.as_secs_f64()
        )],
    );
}

fn reference_gains(report: &mut Report, s: &Setup) {
    let mut pass = true;
    let mut details = Vec::new();
    for (name, k) in [("ssc", reference_ssc_controller()), ("sogcc", reference_sogcc_controller())] {
        let (feasible, rho) = s.stable(&k);
        pass &= feasible && rho < 1.0;
        details.push(format!("{name}: stability test {feasible}, spectral radius {rho:.6}"));
    }
    report.criterion("reference gain verification", pass, &details);
}

fn synthesis_soundness(report: &mut Report, s: &Setup) {
    let mut details = Vec::new();
    let ssc = synthesize_ssc(&s.model).unwrap();
    let ssc_ok = match &ssc.controller {
        Some(k) => {
            let (feasible, rho) = s.stable(k);
            details.push(format!("ssc: gains {:?}, stability test {feasible}, spectral radius {rho:.6}", gains(k)));
            feasible && rho < 1.0
        }
        None => {
            details.push(format!("ssc: {}", ssc.message));
            false
        }
    };

    let reference_gamma = s.gamma(&reference_sogcc_controller()).gamma;
    let limit = GAMMA_SLACK * reference_gamma;
    let sogcc = synthesize_sogcc(&s.model, &s.q, &s.r, SOGCC_LAMBDA).unwrap();
    let sogcc_ok = match (&sogcc.controller, sogcc.gamma) {
        (Some(k), Some(gamma)) if sogcc.is_feasible() => {
            let (feasible, rho) = s.stable(k);
            details.push(format!(
                "sogcc: gains {:?}, stability test {feasible}, spectral radius {rho:.6}, gamma {gamma:.6} (limit {limit:.6})",
                gains(k)
            ));
            feasible && rho < 1.0 && gamma <= limit
        }
        _ => {
            details.push(format!("sogcc at lambda {SOGCC_LAMBDA:e}: {:?}, {}", sogcc.status, sogcc.message));
            false
        }
    };

    let refined = refine_guaranteed_cost(&s.model, &s.q, &s.r, ssc.controller.as_ref().unwrap(), &RefineOptions::default())
        .unwrap();
    details.push(format!(
        "info: descent from the ssc gains reaches gamma {:.6} against limit {limit:.6} (reference gamma {reference_gamma:.6})",
        refined.gamma
    ));
    report.criterion("synthesis soundness", ssc_ok && sogcc_ok, &details);
}

fn bound_validity(report: &mut Report, s: &Setup) {
    let mut details = Vec::new();
    let sogcc = synthesize_sogcc(&s.model, &s.q, &s.r, SOGCC_LAMBDA).unwrap();
    let pass = match &sogcc.controller {
        Some(k) if sogcc.is_feasible() => {
            let (mean, bound) = s.bound_check(k);
            details.push(format!("synthesized sogcc: mean cost {mean:.1}, bound {bound:?}"));
            bound.is_some_and(|b| mean <= b)
        }
        _ => {
            details.push(format!("no synthesized sogcc controller at lambda {SOGCC_LAMBDA:e}: {:?}", sogcc.status));
            false
        }
    };
    for (name, k) in [("descent", common::refined_controller()), ("reference sogcc", reference_sogcc_controller())] {
        let (mean, bound) = s.bound_check(&k);
        let bound = bound.map_or("none".to_string(), |b| format!("{b:.1}"));
        details.push(format!("info: {name} gains: mean cost {mean:.1}, bound {bound}"));
    }
    report.criterion("guaranteed-cost bound validity", pass, &details);
}

fn final_gap(summary: &MonteCarloSummary, params: &CarFollowingParams) -> f64 {
    physical_gap(summary.x_mean.last().unwrap()[0], params.delta_d)
}

fn trend(report: &mut Report, s: &Setup) {
    let cfg = s.mc(true);
    let sogcc = monte_carlo(&s.model, &reference_sogcc_controller(), &cfg).unwrap();
    let ssc = monte_carlo(&s.model, &reference_ssc_controller(), &cfg).unwrap();
    let idm_policy = IdmPolicy::new(IdmParams::default(), &s.params).unwrap();
    let idm = monte_carlo(&s.model, &idm_policy as &dyn Policy, &cfg).unwrap();

    let (r0, r_end) = (sogcc.rmse[0], *sogcc.rmse.last().unwrap());
    let ssc_end = *ssc.rmse.last().unwrap();
    let gap = final_gap(&sogcc, &s.params);
    let sogcc_hits = collision_metrics(&sogcc.trajectories, &s.params);
    let idm_hits = collision_metrics(&idm.trajectories, &s.params);

    let checks = [
        (r_end < RMSE_RATIO * r0, format!("sogcc rmse {r0:.4} -> {r_end:.4} (limit {:.4})", RMSE_RATIO * r0)),
        (r_end < ssc_end, format!("sogcc final rmse {r_end:.4} vs ssc {ssc_end:.4}")),
        ((gap - GAP_TARGET).abs() <= GAP_TOL, format!("sogcc final mean gap {gap:.4} m (target {GAP_TARGET} ± {GAP_TOL})")),
        (sogcc_hits.count == 0, format!("sogcc collisions {}/{}", sogcc_hits.count, cfg.trials)),
        (idm_hits.fraction > 0.0, format!("idm collision fraction {} ({}/{})", idm_hits.fraction, idm_hits.count, cfg.trials)),
    ];
    let pass = checks.iter().all(|(ok, _)| *ok);
    let details: Vec<String> =
        checks.into_iter().map(|(ok, d)| format!("{} {d}", if ok { "ok  " } else { "miss" })).collect();
    report.criterion("trend reproduction", pass, &details);
}

fn determinism(report: &mut Report) {
    let base = tempfile::TempDir::new().unwrap();
    let explicit = |name: &str, k: Controller| ControllerSpec::Explicit { name: name.into(), gains: k.gains };
    let mut cfg = RunConfig {
        controllers: vec![
            explicit("reference_ssc", reference_ssc_controller()),
            explicit("reference_sogcc", reference_sogcc_controller()),
            ControllerSpec::named("idm"),
        ],
        trials: MC_TRIALS,
        horizon: MC_HORIZON,
        ..RunConfig::default()
    };
    let mut outputs = Vec::new();
    for threads in [1, 4] {
        cfg.out_dir = base.path().join(format!("threads{threads}"));
        cmd_simulate(&cfg, Some(threads)).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&cfg.out_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        outputs.push(files);
    }
    let identical = outputs[0] == outputs[1];
    let bytes: usize = outputs[0].iter().map(|(_, b)| b.len()).sum();
    report.criterion(
        "determinism",
        identical && !outputs[0].is_empty(),
        &[format!("{} csv files, {bytes} bytes, 1 vs 4 workers identical: {identical}", outputs[0].len())],
    );
}

/// Realized one-step Lyapunov differences along sampled paths, compared with
/// the averaged drift inequality `E[ΔV + c₂V − c₃] ≤ 0`.
fn drift(report: &mut Report, s: &Setup) {
    let k = reference_sogcc_controller();
    let cl = close_loop(&s.model, &k).unwrap();
    let cert = ms_stability_test(&cl);
    if !cert.feasible {
        report.criterion("lyapunov drift", false, &[format!("no stability certificate: {}", cert.diagnostics.message)]);
        return;
    }
    let v = s.params.bias.value_in(0, s.model.modes[0].e.ncols()).unwrap();
    let c = drift_constants(&cl, &cert.p, &v).unwrap();
    let lyap = |x: &DVector<f64>, r: usize| (x.transpose() * &cert.p[r] * x)[(0, 0)];

    // 100 paths of 100 transitions from random initial states around x0.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (paths, steps) = (100, DRIFT_TRANSITIONS / 100);
    let mut samples = Vec::with_capacity(DRIFT_TRANSITIONS);
    for trial in 0..paths {
        let scale = rng.random_range(0.0..2.0);
        let x0 = s.x0.map(|x| x * scale + rng.random_range(-1.0..1.0));
        let r0 = rng.random_range(0..s.model.mode_count());
        let traj = rollout(&s.model, &k, &x0, r0, steps, &s.params.bias, trial_seed(7, trial as u64)).unwrap();
        for t in 0..steps {
            let now = lyap(&traj.x[t], traj.r[t]);
            let next = lyap(&traj.x[t + 1], traj.r[t + 1]);
            samples.push(next - now + c.c2 * now - c.c3);
        }
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let upper = mean + DRIFT_SIGMAS * sd / n.sqrt();
    let pass = c.c2 > 0.0 && c.c2 < 1.0 && c.c3 > 0.0 && upper <= 0.0;
    report.criterion(
        "lyapunov drift",
        pass,
        &[
            format!("c2 {:.6e}, c3 {:.6e}", c.c2, c.c3),
            format!("{} transitions: mean of dV + c2 V - c3 = {mean:.6e}, 3 sigma upper {upper:.6e}", samples.len()),
        ],
    );
}

fn gains(k: &Controller) -> Vec<Vec<f64>> {
    k.gains.iter().map(|g| g.iter().map(|v| (v * 1e4).round() / 1e4).collect()).collect()
}

fn main() -> ExitCode {
    let (model, x0, params) = common::car_following();
    let (q, r) = common::weights();
    let setup = Setup { model, x0, params, q, r };
    let mut report = Report { failed: 0 };

    oracle_agreement(&mut report);
    reference_gains(&mut report, &setup);
    synthesis_soundness(&mut report, &setup);
    bound_validity(&mut report, &setup);
    trend(&mut report, &setup);
    determinism(&mut report);
    drift(&mut report, &setup);

    println!("{} of 7 criteria failed", report.failed);
    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
