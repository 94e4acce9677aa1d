//! Trajectory ensembles, outcome statistics and the statistical checks of the
//! driving system.
//!
//! Every ensemble is a deterministic function of its seed base: trajectory
//! `i` uses seed `seed_base + i`, the work is split into fixed chunks and the
//! chunk tallies are combined in index order, so the worker count never
//! changes a result.

use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{
    free_arc_probability_raw, greens_half_plane, greens_mix, hit_free_arc_probability, sqrt_upper, BoundaryConfig,
};
use crate::loewner::{flow_point, trace_curve, DrivingPath};
use crate::rng::{trajectory_rng, trajectory_seed};
use crate::sde::{observables, Dynamics, Integrator, Outcome, OutcomeRecord, StepControl, Stop};

const CHUNK: u64 = 64;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes` out of `total`.
pub fn wilson_interval(successes: u64, total: u64, z: f64) -> Result<(f64, f64)> {
    if total == 0 {
        return Err(Error::InvalidConfig("Wilson interval needs at least one trial".into()));
    }
    if successes > total {
        return Err(Error::InvalidConfig(format!("{successes} successes out of {total} trials")));
    }
    let n = total as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let low = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if successes == total { 1.0 } else { (center + half).min(1.0) };
    Ok((low, high))
}

/// Outcome tallies of an ensemble together with the derived estimates.
///
/// Derived fields are always recomputed from the counts, so merging is exact
/// and associative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub n_total: u64,
    pub n_free: u64,
    /// `n_point[i - 1]` counts terminations at `b_i` for `i` of opposite parity.
    pub n_point: Vec<u64>,
    pub n_anomaly: u64,
    pub n_censored: u64,
    pub total_steps: u64,
    /// Free-arc frequency among uncensored runs.
    pub p_free_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub censored_fraction: f64,
    pub anomaly_rate: f64,
    pub seed_base: u64,
}

impl McSummary {
    pub fn empty(n: usize, seed_base: u64) -> Self {
        let mut s = Self {
            n_total: 0,
            n_free: 0,
            n_point: vec![0; n],
            n_anomaly: 0,
            n_censored: 0,
            total_steps: 0,
            p_free_hat: 0.0,
            ci_low: 0.0,
            ci_high: 1.0,
            censored_fraction: 0.0,
            anomaly_rate: 0.0,
            seed_base,
        };
        s.refresh();
        s
    }

    pub fn record(&mut self, rec: &OutcomeRecord) {
        self.n_total += 1;
        self.total_steps += rec.steps;
        match rec.outcome {
            Outcome::FreeArc => self.n_free += 1,
            Outcome::SwallowedPoint(i) => self.n_point[i - 1] += 1,
            Outcome::AnomalousSamePolarity(_) => self.n_anomaly += 1,
            Outcome::Censored(_) => self.n_censored += 1,
        }
        self.refresh();
    }

    /// Sum of the counts of `self` and `other`; derived fields are recomputed.
    pub fn merge(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.n_total += other.n_total;
        out.n_free += other.n_free;
        out.n_anomaly += other.n_anomaly;
        out.n_censored += other.n_censored;
        out.total_steps += other.total_steps;
        for (a, b) in out.n_point.iter_mut().zip(&other.n_point) {
            *a += b;
        }
        out.refresh();
        out
    }

    pub fn completed(&self) -> u64 {
        self.n_total - self.n_censored
    }

    /// Standard error of `p_free_hat` under probability `p`.
    pub fn binomial_sigma(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.completed().max(1) as f64).sqrt()
    }

    fn refresh(&mut self) {
        let done = self.completed();
        if done > 0 {
            self.p_free_hat = self.n_free as f64 / done as f64;
            let (lo, hi) = wilson_interval(self.n_free, done, Z95).expect("valid counts");
            self.ci_low = lo;
            self.ci_high = hi;
            self.anomaly_rate = self.n_anomaly as f64 / done as f64;
        } else {
            self.p_free_hat = 0.0;
            self.ci_low = 0.0;
            self.ci_high = 1.0;
            self.anomaly_rate = 0.0;
        }
        self.censored_fraction = if self.n_total > 0 { self.n_censored as f64 / self.n_total as f64 } else { 0.0 };
    }
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))
}

/// Maps `f` over trajectory indices `0..n` in fixed chunks on `workers`
/// threads and returns the chunk results in index order.
fn map_chunks<T, F>(n: u64, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(std::ops::Range<u64>) -> T + Sync + Send,
{
    let chunks: Vec<_> = (0..n.div_ceil(CHUNK)).map(|c| c * CHUNK..((c + 1) * CHUNK).min(n)).collect();
    let pool = worker_pool(workers)?;
    Ok(pool.install(|| chunks.into_par_iter().map(&f).collect()))
}

/// Runs `n_traj` trajectories of the coupled system and tallies outcomes.
pub fn estimate(
    config: &BoundaryConfig,
    ctrl: &StepControl,
    n_traj: u64,
    seed_base: u64,
    workers: usize,
) -> Result<McSummary> {
    if n_traj == 0 {
        return Err(Error::InvalidConfig("n_traj must be at least 1".into()));
    }
    let integ = Integrator::new(config, ctrl)?;
    let parts = map_chunks(n_traj, workers, |range| {
        let mut s = McSummary::empty(config.n(), seed_base);
        for i in range {
            s.record(&integ.run(trajectory_seed(seed_base, i)));
        }
        s
    })?;
    Ok(parts.iter().fold(McSummary::empty(config.n(), seed_base), |acc, p| acc.merge(p)))
}

/// Per-trajectory records of an ensemble, in index order.
pub fn run_ensemble(
    config: &BoundaryConfig,
    ctrl: &StepControl,
    n_traj: u64,
    seed_base: u64,
    workers: usize,
) -> Result<Vec<OutcomeRecord>> {
    let integ = Integrator::new(config, ctrl)?;
    let parts = map_chunks(n_traj, workers, |range| {
        range.map(|i| integ.run(trajectory_seed(seed_base, i))).collect::<Vec<_>>()
    })?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn summarize(records: &[OutcomeRecord], n: usize, seed_base: u64) -> McSummary {
    let mut s = McSummary::empty(n, seed_base);
    for r in records {
        s.record(r);
    }
    s
}

/// CSV of per-trajectory outcomes: `index,seed,outcome,point,t_end,steps`.
pub fn write_outcomes_csv<W: Write>(records: &[OutcomeRecord], seed_base: u64, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "index,seed,outcome,point,t_end,steps")?;
    for (i, r) in records.iter().enumerate() {
        let (label, point) = match r.outcome {
            Outcome::FreeArc => ("free_arc".to_string(), String::new()),
            Outcome::SwallowedPoint(p) => ("swallowed_point".to_string(), p.to_string()),
            Outcome::AnomalousSamePolarity(p) => ("anomalous_same_polarity".to_string(), p.to_string()),
            Outcome::Censored(reason) => (format!("censored_{reason:?}").to_lowercase(), String::new()),
        };
        let seed = trajectory_seed(seed_base, i as u64);
        writeln!(out, "{i},{seed},{label},{point},{},{}", r.t_end, r.steps)?;
    }
    Ok(())
}

/// Outcome of one statistical check.
///
/// `statistic` is normalized so that the check passes when it does not exceed
/// `threshold`; inconclusive checks never pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
    #[serde(default)]
    pub inconclusive: bool,
    pub details: String,
}

impl CheckReport {
    pub fn new(name: &str, statistic: f64, threshold: f64, details: String) -> Self {
        Self {
            name: name.to_string(),
            statistic,
            threshold,
            passed: statistic <= threshold,
            inconclusive: false,
            details,
        }
    }

    pub fn inconclusive(name: &str, statistic: f64, threshold: f64, details: String) -> Self {
        Self { inconclusive: true, passed: false, ..Self::new(name, statistic, threshold, details) }
    }

    /// One line for terminal output.
    pub fn line(&self) -> String {
        let status = if self.inconclusive {
            "INCONCLUSIVE"
        } else if self.passed {
            "PASS"
        } else {
            "FAIL"
        };
        format!("{status} {}: statistic {:.4} (threshold {}) {}", self.name, self.statistic, self.threshold, self.details)
    }
}

/// Running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn add(&mut self, o: &Self) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    fn std_error(&self) -> f64 {
        if self.n < 2.0 {
            return f64::INFINITY;
        }
        let var = (self.sum_sq - self.sum * self.sum / self.n) / (self.n - 1.0);
        (var.max(0.0) / self.n).sqrt()
    }
}

/// Free-arc probability at a possibly collided state: `w` is clamped between
/// its neighbours, so the value is the limit seen from the side it came from.
fn m_tilde_clamped(state: &crate::sde::DrivingState, config: &BoundaryConfig) -> f64 {
    let k = config.k();
    let mut b = state.b_img.clone();
    let lo = if k == 1 { state.a_img } else { b[k - 2] };
    let hi = if k < b.len() { b[k] } else { f64::INFINITY };
    b[k - 1] = state.w.clamp(lo, hi);
    let g = free_arc_probability_raw(state.a_img, &b, k);
    if g.is_nan() {
        0.0
    } else {
        g.min(1.0)
    }
}

/// Per-checkpoint statistics of the stopped free-arc probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStat {
    pub t: f64,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleStudy {
    pub initial: f64,
    pub checkpoints: Vec<CheckpointStat>,
    pub free_terminal_mean: f64,
    pub point_terminal_mean: f64,
    pub n_free: u64,
    pub n_point: u64,
    pub n_censored: u64,
}

impl MartingaleStudy {
    /// Passes when every checkpoint mean lies within 2 standard errors of the
    /// initial value and the terminal means are at least 0.9 (free arc) and
    /// at most 0.1 (Dirichlet point).
    pub fn report(&self) -> CheckReport {
        let mut worst: f64 = 0.0;
        let mut details = String::new();
        for c in &self.checkpoints {
            let z = (c.mean - self.initial).abs() / c.std_error;
            worst = worst.max(z / 2.0);
            details.push_str(&format!("t={:.4}: {:.5}±{:.5}; ", c.t, c.mean, c.std_error));
        }
        if self.n_free > 0 {
            worst = worst.max((1.0 - self.free_terminal_mean) / 0.1);
        }
        if self.n_point > 0 {
            worst = worst.max(self.point_terminal_mean / 0.1);
        }
        details.push_str(&format!(
            "initial {:.5}; terminal means free {:.4} (n={}), point {:.4} (n={})",
            self.initial, self.free_terminal_mean, self.n_free, self.point_terminal_mean, self.n_point
        ));
        CheckReport::new("martingale", worst, 1.0, details)
    }
}

/// Stopped values of the free-arc probability along the coupled system:
/// at each checkpoint (scaled by nothing, in Loewner time), at the guard time
/// `T_n` or at the terminal time, whichever comes first; plus the terminal
/// values split by outcome.
pub fn martingale_study(
    config: &BoundaryConfig,
    ctrl: &StepControl,
    n_traj: u64,
    checkpoints: &[f64],
    n_guard: u32,
    seed_base: u64,
    workers: usize,
) -> Result<MartingaleStudy> {
    if n_traj == 0 {
        return Err(Error::InvalidConfig("n_traj must be at least 1".into()));
    }
    if checkpoints.is_empty() || checkpoints.windows(2).any(|w| !(w[0] < w[1])) || !(checkpoints[0] > 0.0) {
        return Err(Error::InvalidConfig("checkpoints must be positive and increasing".into()));
    }
    if n_guard < 3 {
        return Err(Error::InvalidConfig("n_guard must be at least 3".into()));
    }
    let integ = Integrator::new(config, ctrl)?;
    let initial = hit_free_arc_probability(config);
    let m = checkpoints.len();
    type Acc = (Vec<Moments>, Moments, Moments, u64);
    let parts: Vec<Acc> = map_chunks(n_traj, workers, |range| {
        let mut at = vec![Moments::default(); m];
        let (mut free, mut point, mut censored) = (Moments::default(), Moments::default(), 0u64);
        for i in range {
            let seed = trajectory_seed(seed_base, i);
            let mut traj = integ.start(seed, Dynamics::Coupled);
            let mut frozen: Option<f64> = None;
            for (c, &t) in checkpoints.iter().enumerate() {
                let value = match frozen {
                    Some(v) => v,
                    None => match traj.advance_to(t, Some(n_guard), &mut |_| {}) {
                        Stop::Reached => m_tilde_clamped(traj.state(), config),
                        Stop::Guard | Stop::Terminal(_) => {
                            let v = m_tilde_clamped(traj.state(), config);
                            frozen = Some(v);
                            v
                        }
                    },
                };
                at[c].push(value);
            }
            let rec = traj.into_record();
            let terminal = m_tilde_clamped(&rec.final_state, config);
            match rec.outcome {
                Outcome::FreeArc => free.push(terminal),
                Outcome::SwallowedPoint(_) => point.push(terminal),
                Outcome::Censored(_) => censored += 1,
                Outcome::AnomalousSamePolarity(_) => {}
            }
        }
        (at, free, point, censored)
    })?;
    let mut at = vec![Moments::default(); m];
    let (mut free, mut point, mut censored) = (Moments::default(), Moments::default(), 0);
    for (a, f, p, c) in &parts {
        for (x, y) in at.iter_mut().zip(a) {
            x.add(y);
        }
        free.add(f);
        point.add(p);
        censored += c;
    }
    Ok(MartingaleStudy {
        initial,
        checkpoints: checkpoints
            .iter()
            .zip(&at)
            .map(|(&t, mo)| CheckpointStat { t, mean: mo.mean(), std_error: mo.std_error() })
            .collect(),
        free_terminal_mean: if free.n > 0.0 { free.mean() } else { f64::NAN },
        point_terminal_mean: if point.n > 0.0 { point.mean() } else { f64::NAN },
        n_free: free.n as u64,
        n_point: point.n as u64,
        n_censored: censored,
    })
}

/// Checkpoint constancy and terminal dichotomy of the free-arc probability
/// along the coupled system.
#[allow(clippy::too_many_arguments)]
pub fn martingale_constancy(
    config: &BoundaryConfig,
    ctrl: &StepControl,
    n_traj: u64,
    checkpoints: &[f64],
    n_guard: u32,
    seed_base: u64,
    workers: usize,
) -> Result<CheckReport> {
    Ok(martingale_study(config, ctrl, n_traj, checkpoints, n_guard, seed_base, workers)?.report())
}

/// `w` at `t ∧ T_n ∧ T` under the coupled system, and `(w, M / M_0)` at the
/// same stopping time under the reference system; `T_n` is the guard exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GirsanovSamples {
    pub direct: Vec<f64>,
    pub reference: Vec<(f64, f64)>,
}

fn weight_at(state: &crate::sde::DrivingState, config: &BoundaryConfig, epsilon: f64, log_m0: f64) -> f64 {
    let mut s = state.clone();
    let k = config.k();
    let (left, right) = s.neighbour_gaps(k);
    if left < epsilon {
        s.w += epsilon - left;
    } else if right < epsilon {
        s.w -= epsilon - right;
    }
    s.b_img[k - 1] = s.w;
    match observables(&s, config) {
        Ok(o) => (o.log_z / 4.0 - s.j_sq_integral / 8.0 - log_m0).exp(),
        Err(_) => 0.0,
    }
}

pub fn girsanov_samples(
    config: &BoundaryConfig,
    ctrl: &StepControl,
    n_traj: u64,
    t_check: f64,
    n_guard: u32,
    seed_base: u64,
    workers: usize,
) -> Result<GirsanovSamples> {
    if !(t_check > 0.0) {
        return Err(Error::InvalidConfig("t_check must be positive".into()));
    }
    let integ = Integrator::new(config, ctrl)?;
    let log_m0 = observables(&crate::sde::DrivingState::initial(config), config)?.log_z / 4.0;
    // the reference ensemble uses an independent block of seeds
    let ref_base = seed_base.wrapping_add(1 << 40);
    let parts = map_chunks(n_traj, workers, |range| {
        let mut direct = Vec::new();
        let mut reference = Vec::new();
        for i in range {
            let mut a = integ.start(trajectory_seed(seed_base, i), Dynamics::Coupled);
            a.advance_to(t_check, Some(n_guard), &mut |_| {});
            direct.push(a.state().w);
            let mut b = integ.start(trajectory_seed(ref_base, i), Dynamics::Reference);
            b.advance_to(t_check, Some(n_guard), &mut |_| {});
            reference.push((b.state().w, weight_at(b.state(), config, ctrl.epsilon, log_m0)));
        }
        (direct, reference)
    })?;
    let mut out = GirsanovSamples { direct: Vec::new(), reference: Vec::new() };
    for (d, r) in parts {
        out.direct.extend(d);
        out.reference.extend(r);
    }
    Ok(out)
}

/// Compares the law of `w(t_check ∧ T_n)` under the coupled system with the
/// reference law reweighted by `M / M_0`: weighted against plain means
/// (within 3 combined standard errors) and a ten-bin histogram distance
/// (L¹ below 0.05). An effective sample size below 10% makes the check
/// inconclusive.
#[allow(clippy::too_many_arguments)]
pub fn girsanov_check(
    config: &BoundaryConfig,
    ctrl: &StepControl,
    n_traj: u64,
    t_check: f64,
    n_guard: u32,
    seed_base: u64,
    workers: usize,
) -> Result<CheckReport> {
    if n_traj < 10 {
        return Err(Error::InvalidConfig("girsanov check needs at least 10 trajectories".into()));
    }
    let s = girsanov_samples(config, ctrl, n_traj, t_check, n_guard, seed_base, workers)?;
    Ok(compare_reweighted(&s))
}

pub fn compare_reweighted(s: &GirsanovSamples) -> CheckReport {
    let n = s.direct.len() as f64;
    let mut direct = Moments::default();
    for &x in &s.direct {
        direct.push(x);
    }
    let sw: f64 = s.reference.iter().map(|r| r.1).sum();
    let sw2: f64 = s.reference.iter().map(|r| r.1 * r.1).sum();
    let ess = sw * sw / sw2;
    let wmean = s.reference.iter().map(|r| r.0 * r.1).sum::<f64>() / sw;
    let wvar = s.reference.iter().map(|r| r.1 * r.1 * (r.0 - wmean).powi(2)).sum::<f64>() / (sw * sw);
    let se = (direct.std_error().powi(2) + wvar).sqrt();
    let mean_stat = (direct.mean() - wmean).abs() / (3.0 * se);

    let mut sorted = s.direct.clone();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..10).map(|q| sorted[(q * sorted.len()) / 10]).collect();
    let bin = |x: f64| edges.partition_point(|&e| e <= x);
    let mut p_direct = [0.0; 10];
    let mut p_ref = [0.0; 10];
    for &x in &s.direct {
        p_direct[bin(x)] += 1.0 / n;
    }
    for &(x, w) in &s.reference {
        p_ref[bin(x)] += w / sw;
    }
    let l1: f64 = p_direct.iter().zip(&p_ref).map(|(a, b)| (a - b).abs()).sum();
    let statistic = mean_stat.max(l1 / 0.05);
    let details = format!(
        "direct mean {:.5}, weighted mean {:.5}, combined se {:.5}, histogram L1 {:.4}, ess {:.1}%",
        direct.mean(),
        wmean,
        se,
        l1,
        100.0 * ess / n
    );
    if !ess.is_finite() || ess < 0.1 * n {
        CheckReport::inconclusive("girsanov", statistic, 1.0, details)
    } else {
        CheckReport::new("girsanov", statistic, 1.0, details)
    }
}

/// Collision or guard-exit time quantile of the coupled system, used to pick
/// a Girsanov horizon that most runs reach undisturbed.
pub fn stopping_time_quantile(
    config: &BoundaryConfig,
    ctrl: &StepControl,
    n_traj: u64,
    n_guard: u32,
    q: f64,
    seed_base: u64,
    workers: usize,
) -> Result<f64> {
    if n_traj == 0 || !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidConfig("need n_traj >= 1 and q in [0, 1]".into()));
    }
    let integ = Integrator::new(config, ctrl)?;
    let parts = map_chunks(n_traj, workers, |range| {
        range
            .map(|i| {
                let mut traj = integ.start(trajectory_seed(seed_base, i), Dynamics::Coupled);
                traj.advance_to(f64::INFINITY, Some(n_guard), &mut |_| {});
                traj.state().t
            })
            .collect::<Vec<_>>()
    })?;
    let mut times: Vec<f64> = parts.into_iter().flatten().collect();
    times.sort_by(f64::total_cmp);
    Ok(times[((times.len() - 1) as f64 * q) as usize])
}

/// Realized against predicted quadratic variation of `log Z` under the
/// reference system, and the step residual `Δ log Z - 2 J ΔB`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticVariation {
    pub realized: f64,
    pub predicted: f64,
    pub residual_mean: f64,
    pub residual_std_error: f64,
    pub steps: u64,
}

impl QuadraticVariation {
    /// Passes when the relative QV error is below 5% and the mean residual is
    /// within 3 standard errors of zero.
    pub fn report(&self) -> CheckReport {
        let rel = (self.realized / self.predicted - 1.0).abs();
        let z = self.residual_mean.abs() / self.residual_std_error;
        CheckReport::new(
            "quadratic_variation",
            (rel / 0.05).max(z / 3.0),
            1.0,
            format!(
                "realized QV {:.6}, predicted {:.6} (rel err {:.4}); residual mean {:.3e} ± {:.3e} over {} steps",
                self.realized, self.predicted, rel, self.residual_mean, self.residual_std_error, self.steps
            ),
        )
    }
}

/// Integrates the reference system up to `t_end ∧ T_n ∧ T` and accumulates
/// `Σ (Δ log Z)^2` against `4 Σ J^2 dt`, averaged over trajectories.
#[allow(clippy::too_many_arguments)]
pub fn quadratic_variation_study(
    config: &BoundaryConfig,
    ctrl: &StepControl,
    n_traj: u64,
    t_end: f64,
    n_guard: u32,
    seed_base: u64,
    workers: usize,
) -> Result<QuadraticVariation> {
    if n_traj == 0 || !(t_end > 0.0) {
        return Err(Error::InvalidConfig("need n_traj >= 1 and t_end > 0".into()));
    }
    let integ = Integrator::new(config, ctrl)?;
    let parts = map_chunks(n_traj, workers, |range| {
        let (mut realized, mut predicted, mut res, mut steps) = (0.0, 0.0, Moments::default(), 0u64);
        for i in range {
            let mut traj = integ.start(trajectory_seed(seed_base, i), Dynamics::Reference);
            traj.advance_to(t_end, Some(n_guard), &mut |info| {
                let (Ok(o0), Ok(o1)) = (observables(info.before, config), observables(info.after, config)) else {
                    return;
                };
                let dlz = o1.log_z - o0.log_z;
                if !dlz.is_finite() {
                    return;
                }
                realized += dlz * dlz;
                predicted += 4.0 * info.j * info.j * info.dt;
                res.push(dlz - 2.0 * info.j * info.db);
                steps += 1;
            });
        }
        (realized, predicted, res, steps)
    })?;
    let (mut realized, mut predicted, mut res, mut steps) = (0.0, 0.0, Moments::default(), 0);
    for (r, p, m, s) in &parts {
        realized += r;
        predicted += p;
        res.add(m);
        steps += s;
    }
    Ok(QuadraticVariation {
        realized: realized / n_traj as f64,
        predicted: predicted / n_traj as f64,
        residual_mean: res.mean(),
        residual_std_error: res.std_error(),
        steps,
    })
}

/// Symmetry and image-sum identity of the mixed Green function on random
/// pairs, and its Dirichlet limit far from the free arc.
pub fn green_check(n_pairs: usize, seed: u64) -> CheckReport {
    let mut rng = trajectory_rng(seed);
    let a = 0.0;
    let mut sym: f64 = 0.0;
    let mut image: f64 = 0.0;
    let mut limit: f64 = 0.0;
    let point = |rng: &mut crate::rng::TrajectoryRng| Complex64::new(rng.random_range(-5.0..5.0), rng.random_range(0.05..5.0));
    for _ in 0..n_pairs {
        let z = point(&mut rng);
        let w = point(&mut rng);
        let g = greens_mix(z, w, a).expect("interior points");
        let scale = g.abs().max(1.0);
        sym = sym.max((g - greens_mix(w, z, a).expect("interior points")).abs() / scale);
        let (u, v) = (sqrt_upper(z - a), sqrt_upper(w - a));
        let oracle = greens_half_plane(u, v) + greens_half_plane(u, -v.conj());
        image = image.max((g - oracle).abs() / scale);
        let far = greens_mix(z, w, -1e8).expect("interior points");
        let dirichlet = greens_half_plane(z, w);
        limit = limit.max((far - dirichlet).abs() / dirichlet.abs());
    }
    let statistic = (sym / 1e-12).max(image / 1e-12).max(limit / 1e-3);
    CheckReport::new(
        "green",
        statistic,
        1.0,
        format!("symmetry {sym:.2e}, image identity {image:.2e}, Dirichlet limit rel {limit:.2e} over {n_pairs} pairs"),
    )
}

/// Constant driving: `g_1(3i) = i√5`, `τ(i) = 1/4` and the traced tip `2i`.
pub fn loewner_check() -> Result<CheckReport> {
    let path = DrivingPath::constant(0.0, 1.0, 1000)?;
    let slit = (flow_point(&path, Complex64::new(0.0, 3.0))?.value - Complex64::new(0.0, 5f64.sqrt())).norm();
    let tau = match flow_point(&path, Complex64::new(0.0, 1.0))?.tau {
        Some(t) => (t - 0.25).abs(),
        None => f64::INFINITY,
    };
    let tip = (trace_curve(&path)?.tip() - Complex64::new(0.0, 2.0)).norm();
    let worst = slit.max(tau).max(tip);
    Ok(CheckReport::new(
        "loewner",
        worst,
        1e-6,
        format!("|g_1(3i) - i√5| {slit:.2e}, |τ(i) - 1/4| {tau:.2e}, |tip - 2i| {tip:.2e}"),
    ))
}

/// Estimates at successive refinements of `(epsilon, dt_base)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementLevel {
    pub factor: f64,
    pub summary: McSummary,
}

pub fn refinement_study(
    config: &BoundaryConfig,
    ctrl: &StepControl,
    factors: &[f64],
    n_traj: u64,
    seed_base: u64,
    workers: usize,
) -> Result<Vec<RefinementLevel>> {
    factors
        .iter()
        .map(|&f| {
            Ok(RefinementLevel { factor: f, summary: estimate(config, &ctrl.refined(f), n_traj, seed_base, workers)? })
        })
        .collect()
}

/// Anomaly rate below 1% at the first level and non-increasing along the
/// refinement sequence.
pub fn refinement_report(levels: &[RefinementLevel]) -> CheckReport {
    let rates: Vec<f64> = levels.iter().map(|l| l.summary.anomaly_rate).collect();
    let monotone = rates.windows(2).all(|w| w[1] <= w[0]);
    let statistic = rates.first().copied().unwrap_or(0.0) / 0.01;
    let details = format!(
        "anomaly rates {:?} at factors {:?}",
        rates.iter().map(|r| format!("{r:.5}")).collect::<Vec<_>>(),
        levels.iter().map(|l| l.factor).collect::<Vec<_>>()
    );
    let mut report = CheckReport::new("refinement", statistic, 1.0, details);
    report.passed &= monotone;
    report
}

/// Agreement of the estimated free-arc frequency with the closed form:
/// `|p̂ - g| <= 3 sqrt(g (1 - g) / n)`.
pub fn formula_agreement(config: &BoundaryConfig, summary: &McSummary) -> CheckReport {
    let g = hit_free_arc_probability(config);
    let sigma = summary.binomial_sigma(g);
    let statistic = if sigma > 0.0 {
        (summary.p_free_hat - g).abs() / (3.0 * sigma)
    } else if summary.p_free_hat == g {
        0.0
    } else {
        f64::INFINITY
    };
    CheckReport::new(
        "formula",
        statistic,
        1.0,
        format!(
            "p_hat {:.5} [{:.5}, {:.5}] vs g {:.5}; censored {:.3}%, anomalous {:.3}%",
            summary.p_free_hat,
            summary.ci_low,
            summary.ci_high,
            g,
            100.0 * summary.censored_fraction,
            100.0 * summary.anomaly_rate
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(a: f64, b: &[f64], k: usize) -> BoundaryConfig {
        BoundaryConfig::new(a, b.to_vec(), k).unwrap()
    }

    #[test]
    fn wilson_examples() {
        let (lo, _) = wilson_interval(0, 100, 1.96).unwrap();
        assert_eq!(lo, 0.0);
        let (_, hi) = wilson_interval(100, 100, 1.96).unwrap();
        assert_eq!(hi, 1.0);
        let (lo, hi) = wilson_interval(50, 100, 1.96).unwrap();
        // center 0.5, half-width 1.96/(1+0.0384) * sqrt(0.0025 + 0.0000960)
        let half = 1.96 / (1.0 + 1.96f64.powi(2) / 100.0) * (0.0025f64 + 1.96f64.powi(2) / 40000.0).sqrt();
        assert!((lo - (0.5 - half)).abs() < 1e-15 && (hi - (0.5 + half)).abs() < 1e-15);
        assert!((lo - 0.404).abs() < 1e-3 && (hi - 0.596).abs() < 1e-3);
        assert!(wilson_interval(1, 0, 1.96).is_err());
        assert!(wilson_interval(3, 2, 1.96).is_err());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let c = cfg(0.0, &[1.0, 4.0], 1);
        let mut ctrl = StepControl::for_config(&c);
        ctrl.dt_base *= 8.0;
        let one = estimate(&c, &ctrl, 150, 11, 1).unwrap();
        let four = estimate(&c, &ctrl, 150, 11, 4).unwrap();
        assert_eq!(one, four);
        assert_eq!(one.n_total, 150);
        let total = one.n_free + one.n_point.iter().sum::<u64>() + one.n_anomaly + one.n_censored;
        assert_eq!(total, one.n_total);
        assert!(one.ci_low <= one.p_free_hat && one.p_free_hat <= one.ci_high);
    }

    #[test]
    fn ensemble_records_match_estimate() {
        let c = cfg(0.0, &[1.0, 4.0], 1);
        let mut ctrl = StepControl::for_config(&c);
        ctrl.dt_base *= 8.0;
        let recs = run_ensemble(&c, &ctrl, 70, 3, 2).unwrap();
        assert_eq!(summarize(&recs, 2, 3), estimate(&c, &ctrl, 70, 3, 1).unwrap());
        let mut buf = Vec::new();
        write_outcomes_csv(&recs, 3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 71);
        assert!(text.lines().nth(1).unwrap().starts_with("0,3,"));
    }

    #[test]
    fn single_point_always_reaches_free_arc() {
        let c = cfg(0.0, &[1.0], 1);
        let mut ctrl = StepControl::for_config(&c);
        ctrl.dt_base *= 8.0;
        let s = estimate(&c, &ctrl, 100, 0, 1).unwrap();
        assert_eq!(s.n_free + s.n_censored, 100);
        assert_eq!(formula_agreement(&c, &s).statistic, 0.0);
    }

    #[test]
    fn merge_recomputes_estimates() {
        let mut a = McSummary::empty(2, 0);
        let mut b = McSummary::empty(2, 0);
        a.n_total = 10;
        a.n_free = 4;
        a.n_point[1] = 6;
        b.n_total = 5;
        b.n_free = 1;
        b.n_censored = 1;
        b.n_point[1] = 3;
        let m = a.merge(&b);
        assert_eq!((m.n_total, m.n_free, m.n_censored, m.n_point[1]), (15, 5, 1, 9));
        assert!((m.p_free_hat - 5.0 / 14.0).abs() < 1e-15);
        assert!((m.censored_fraction - 1.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn reports_normalize_statistics() {
        assert!(CheckReport::new("x", 0.5, 1.0, String::new()).passed);
        assert!(!CheckReport::new("x", 1.5, 1.0, String::new()).passed);
        let r = CheckReport::inconclusive("x", 0.1, 1.0, String::new());
        assert!(!r.passed && r.inconclusive);
        assert!(r.line().starts_with("INCONCLUSIVE"));
    }

    #[test]
    fn green_and_loewner_checks_pass() {
        let g = green_check(200, 5);
        assert!(g.passed, "{}", g.details);
        let l = loewner_check().unwrap();
        assert!(l.passed, "{}", l.details);
    }

    #[test]
    fn single_point_weights_are_trivial() {
        let c = cfg(0.0, &[1.0], 1);
        let ctrl = StepControl::for_config(&c);
        let s = girsanov_samples(&c, &ctrl, 20, 0.01, 1000, 0, 1).unwrap();
        assert!(s.reference.iter().all(|r| (r.1 - 1.0).abs() < 1e-12));
        assert_eq!(s.direct.len(), 20);
    }

    #[test]
    fn argument_validation() {
        let c = cfg(0.0, &[1.0, 4.0], 1);
        let ctrl = StepControl::for_config(&c);
        assert!(estimate(&c, &ctrl, 0, 0, 1).is_err());
        assert!(martingale_study(&c, &ctrl, 10, &[0.2, 0.1], 10, 0, 1).is_err());
        assert!(girsanov_check(&c, &ctrl, 10, 0.0, 1000, 0, 1).is_err());
    }
}
