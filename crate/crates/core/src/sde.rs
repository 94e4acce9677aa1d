//! Driving diffusion of the level line and its martingale observables.
//!
//! The driving function `w = b_k(t)` solves
//!
//! ```text
//! dw   = 2 dB + [ -1/(w - a) + J ] dt,      J = Σ_{I_k \ k} F(w, b_i, a) - Σ_{J_k} F(w, b_i, a)
//! da   = 2 dt / (a - w)
//! db_i = 2 dt / (b_i - w),                  i != k
//! ```
//!
//! and is integrated by Euler–Maruyama with a gap-adaptive step
//! `dt = dt_base * (gap / gap_0)^p`, where `gap` is the distance from `w` to
//! its nearest tracked neighbour. With the default `p = 2` the per-step
//! displacement is a fixed fraction of the current gap, so the scheme costs a
//! bounded number of steps per decade of scale on the way into a collision and
//! on long excursions alike.
//!
//! The same stepper also runs the reference dynamics `SLE_4(-1)` with force
//! point `a` (drift `-1/(w - a)` only) while tracking every marked point
//! passively; that is the measure under which `log Z` is a local martingale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{force_term_unchecked, free_arc_probability_raw, BoundaryConfig};
use crate::rng::{standard_normal, trajectory_rng, TrajectoryRng};

/// Separation factor that decides whether a point belongs to the cluster
/// swallowed together with the nearest one (see [`detect_collision_with`]).
pub const DEFAULT_CLUSTER_RATIO: f64 = 1e4;

/// State of the driving system at time `t`.
///
/// `b_img` holds the images of all `n` marked points in index order; entry
/// `k - 1` mirrors the driving value `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingState {
    pub t: f64,
    pub w: f64,
    pub a_img: f64,
    pub b_img: Vec<f64>,
    pub j_sq_integral: f64,
}

impl DrivingState {
    pub fn initial(config: &BoundaryConfig) -> Self {
        Self {
            t: 0.0,
            w: config.start(),
            a_img: config.a(),
            b_img: config.b().to_vec(),
            j_sq_integral: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.w.is_finite()
            && self.a_img.is_finite()
            && self.j_sq_integral.is_finite()
            && self.b_img.iter().all(|x| x.is_finite())
    }

    /// Nearest tracked point on the left of `w` (`b_{k-1}`, or `a` when `k = 1`).
    fn left_neighbour(&self, k: usize) -> f64 {
        if k == 1 {
            self.a_img
        } else {
            self.b_img[k - 2]
        }
    }

    /// Distances from `w` to its nearest tracked neighbours (left, right).
    pub fn neighbour_gaps(&self, k: usize) -> (f64, f64) {
        let left = self.w - self.left_neighbour(k);
        let right = if k < self.b_img.len() { self.b_img[k] - self.w } else { f64::INFINITY };
        (left, right)
    }

    fn ordered(&self, k: usize) -> bool {
        let n = self.b_img.len();
        if self.a_img > self.b_img[0] && k != 1 {
            return false;
        }
        (0..n.saturating_sub(1)).all(|i| {
            let (lo, hi) = (self.b_img[i], self.b_img[i + 1]);
            // the pair straddling w is checked through the gaps
            i + 1 == k - 1 || i == k - 1 || lo <= hi
        })
    }
}

/// Parameters of the plain two-point system `SLE_κ(ρ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SleParams {
    pub kappa: f64,
    pub rho: f64,
    pub x0: f64,
    pub y0: f64,
}

impl SleParams {
    pub fn new(kappa: f64, rho: f64, x0: f64, y0: f64) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::InvalidConfig(format!("kappa must be positive, got {kappa}")));
        }
        if !(y0 <= x0) {
            return Err(Error::InvalidConfig(format!("force point {y0} must not exceed start {x0}")));
        }
        Ok(Self { kappa, rho, x0, y0 })
    }
}

/// One Euler step of `dW = sqrt(κ) dB + ρ/(W - V) dt`, `dV = 2/(V - W) dt`.
pub fn step_sle_kappa_rho(w: f64, v: f64, params: &SleParams, db: f64, dt: f64) -> Result<(f64, f64)> {
    if w == v {
        return Err(Error::Domain("driving value coincides with the force point".into()));
    }
    let w_next = w + params.kappa.sqrt() * db + params.rho * dt / (w - v);
    let v_next = v + 2.0 * dt / (v - w);
    Ok((w_next, v_next))
}

/// Numerical controls of the Euler–Maruyama integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepControl {
    /// Step used while the nearest gap equals the initial gap.
    pub dt_base: f64,
    /// Collision threshold, in the units of the marked points.
    pub epsilon: f64,
    /// Exponent `p` in `dt = dt_base * (gap / gap_0)^p`.
    pub adapt_power: f64,
    /// Censoring horizon in Loewner time.
    pub t_max: f64,
    /// Censoring bound on the number of steps.
    pub max_steps: u64,
    #[serde(default = "default_cluster_ratio")]
    pub cluster_ratio: f64,
}

fn default_cluster_ratio() -> f64 {
    DEFAULT_CLUSTER_RATIO
}

impl StepControl {
    pub const DEFAULT_DT_FRACTION: f64 = 2.5e-4;
    pub const DEFAULT_EPSILON_FRACTION: f64 = 1e-4;

    /// Defaults scaled to the initial gap `g` around `b_k`:
    /// `dt_base = 2.5e-4 g^2`, `epsilon = 1e-4 g`, `t_max = 1e14 g^2`.
    pub fn for_config(config: &BoundaryConfig) -> Self {
        let g = config.start_gap();
        Self {
            dt_base: Self::DEFAULT_DT_FRACTION * g * g,
            epsilon: Self::DEFAULT_EPSILON_FRACTION * g,
            adapt_power: 2.0,
            t_max: 1e14 * g * g,
            max_steps: 20_000_000,
            cluster_ratio: DEFAULT_CLUSTER_RATIO,
        }
    }

    /// Same controls with `dt_base` and `epsilon` divided by `factor`.
    pub fn refined(&self, factor: f64) -> Self {
        Self { dt_base: self.dt_base / factor, epsilon: self.epsilon / factor, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidControl(what.to_string()));
        if !(self.dt_base > 0.0) {
            return bad("dt_base must be positive");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.t_max > 0.0) {
            return bad("t_max must be positive");
        }
        if !(self.adapt_power >= 0.0) {
            return bad("adapt_power must be non-negative");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if !(self.cluster_ratio >= 1.0) {
            return bad("cluster_ratio must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensorReason {
    /// `t_max` reached.
    Horizon,
    /// `max_steps` reached.
    MaxSteps,
    /// The state stopped being finite.
    Nonfinite,
    /// Two tracked points swapped order without touching `w`.
    OrderViolation,
}

/// Terminal classification of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// The curve ended on the free arc `(-inf, a)`.
    FreeArc,
    /// The curve ended at `b_i`, `i` of the opposite parity to `k`.
    SwallowedPoint(usize),
    /// The curve ended at `b_i` with `i` of the same parity as `k`; a
    /// discretisation artefact, probability zero for the continuum process.
    AnomalousSamePolarity(usize),
    Censored(CensorReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub outcome: Outcome,
    /// Terminal (or censoring) time.
    pub t_end: f64,
    #[serde(rename = "final")]
    pub final_state: DrivingState,
    pub steps: u64,
}

/// Martingale observables of a state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    /// Diffusion coefficient `J` of `log Z` (up to the factor 2).
    pub j: f64,
    pub log_z: f64,
    /// `N = exp(-∫J^2/8)`.
    pub n_weight: f64,
    /// `M = Z^{1/4} N`.
    pub m: f64,
    /// Free-arc probability evaluated at the current images.
    pub m_tilde: f64,
}

fn check_uncollided(state: &DrivingState, k: usize) -> Result<()> {
    let (l, r) = state.neighbour_gaps(k);
    if !(l > 0.0 && r > 0.0) {
        return Err(Error::Domain(format!("collided state (gaps {l}, {r})")));
    }
    Ok(())
}

/// `J = Σ_{I_k \ k} F(w, b_i, a) - Σ_{J_k} F(w, b_i, a)`.
pub fn coupling_sum(state: &DrivingState, config: &BoundaryConfig) -> Result<f64> {
    check_uncollided(state, config.k())?;
    Ok(coupling_sum_unchecked(state, config.k()))
}

#[inline]
fn coupling_sum_unchecked(state: &DrivingState, k: usize) -> f64 {
    let (w, a) = (state.w, state.a_img);
    let mut j = 0.0;
    for (idx, &bi) in state.b_img.iter().enumerate() {
        let i = idx + 1;
        if i == k {
            continue;
        }
        let f = force_term_unchecked(w, bi, a);
        if i % 2 == k % 2 {
            j += f;
        } else {
            j -= f;
        }
    }
    j
}

/// Drift of the driving function: `-1/(w - a) + J`.
pub fn drift_general(state: &DrivingState, config: &BoundaryConfig) -> Result<f64> {
    Ok(-1.0 / (state.w - state.a_img) + coupling_sum(state, config)?)
}

/// One Euler–Maruyama step of the coupled system with Brownian increment `db`.
///
/// Collisions are not detected here; see [`detect_collision`].
pub fn step_general(state: &DrivingState, config: &BoundaryConfig, db: f64, dt: f64) -> Result<DrivingState> {
    if !(dt >= 0.0) {
        return Err(Error::Domain(format!("negative time step {dt}")));
    }
    let j = coupling_sum(state, config)?;
    let mut next = state.clone();
    advance_state(&mut next, config.k(), -1.0 / (state.w - state.a_img) + j, j, db, dt);
    Ok(next)
}

#[inline]
fn advance_state(state: &mut DrivingState, k: usize, drift: f64, j: f64, db: f64, dt: f64) {
    let w = state.w;
    let n = state.b_img.len();
    // Points are advanced outward from w. Each one is placed relative to its
    // inner neighbour through the exact gap factor, so that deeply squeezed
    // pairs keep their order even below the resolution of their positions.
    let mut inner = state.b_img[k - 1];
    let mut inner_new = inner;
    for idx in (0..k).rev() {
        let p = if idx == 0 { state.a_img } else { state.b_img[idx - 1] };
        let p_new = if idx + 1 == k {
            p + 2.0 * dt / (p - w)
        } else {
            let gap = inner - p;
            let factor = 1.0 - 2.0 * dt / ((inner - w) * (p - w));
            inner_new - gap * factor
        };
        if idx == 0 {
            state.a_img = p_new;
        } else {
            state.b_img[idx - 1] = p_new;
        }
        inner = p;
        inner_new = p_new;
    }
    let mut inner = state.b_img[k - 1];
    let mut inner_new = inner;
    for idx in k..n {
        let p = state.b_img[idx];
        let p_new = if idx == k {
            p + 2.0 * dt / (p - w)
        } else {
            let gap = p - inner;
            let factor = 1.0 - 2.0 * dt / ((inner - w) * (p - w));
            inner_new + gap * factor
        };
        state.b_img[idx] = p_new;
        inner = p;
        inner_new = p_new;
    }
    state.w = w + 2.0 * db + drift * dt;
    state.b_img[k - 1] = state.w;
    state.j_sq_integral += j * j * dt;
    state.t += dt;
}

fn classify_index(config: &BoundaryConfig, i: usize) -> Outcome {
    if i % 2 == config.k() % 2 {
        Outcome::AnomalousSamePolarity(i)
    } else {
        Outcome::SwallowedPoint(i)
    }
}

/// Collision test with the default cluster ratio.
pub fn detect_collision(state: &DrivingState, config: &BoundaryConfig, epsilon: f64) -> Option<Outcome> {
    detect_collision_with(state, config, epsilon, DEFAULT_CLUSTER_RATIO)
}

/// Terminal classification once `w` comes within `epsilon` of a tracked point.
///
/// Hitting the boundary swallows every marked point between the hitting
/// point and `b_k` at once. Seen from `w`, the images of the swallowed points
/// sit at essentially the same distance as the nearest one (their mutual
/// gaps vanish faster than the gap to `w`), while the first point outside the
/// pocket stays at a distance that is large by comparison. With `d_1` the
/// nearest gap and `d_j` the distance to the `j`-th point on the same side,
/// a point joins the cluster when `d_j - d_1 <= d_1 / cluster_ratio` and ends
/// it when `d_j - d_1 >= d_1 * cluster_ratio`. Anything in between is not yet
/// decided and `None` is returned so integration continues.
///
/// Near a cluster, `w` feels the summed drift coefficient of its members
/// (`-1` for `a`, `-2` for opposite-parity points, `+2` for same-parity
/// points). The gap to the cluster then behaves like a Bessel process of
/// dimension `2 + ρ/2`, which reaches zero only for `ρ < 0`; clusters with
/// `ρ >= 0` are not terminal and integration continues. The outermost member
/// of a terminal cluster is the terminal point; on the left that may be `a`
/// itself, which means the curve closed on the free arc.
///
/// If `w` has stepped across a neighbour, or `d_1` has shrunk by a further
/// factor of `1e8` below `epsilon` without the cluster being decided, the cut
/// is forced at `d_j - d_1 = d_1` and the outermost point is returned
/// regardless of the drift balance.
pub fn detect_collision_with(
    state: &DrivingState,
    config: &BoundaryConfig,
    epsilon: f64,
    cluster_ratio: f64,
) -> Option<Outcome> {
    let k = config.k();
    let n = config.n();
    let (left, right) = state.neighbour_gaps(k);
    let nearest = left.min(right);
    if nearest > epsilon {
        return None;
    }
    let crossed = nearest <= 0.0;
    let deep = nearest <= epsilon * 1e-8;
    let d1 = nearest.max(0.0);
    let on_left = left <= right;
    // distance of the j-th point beyond the nearest one, on the nearest side
    let side_len = if on_left { k - 1 } else { n - k - 1 };
    let index_at = |j: usize| if on_left { k - 1 - j } else { k + 1 + j };
    let gap_at = |j: usize| -> f64 {
        let idx = index_at(j);
        if idx == 0 {
            state.w - state.a_img
        } else if on_left {
            state.w - state.b_img[idx - 1]
        } else {
            state.b_img[idx - 1] - state.w
        }
    };
    let weight = |idx: usize| -> i32 {
        if idx == 0 {
            -1
        } else if idx % 2 == k % 2 {
            2
        } else {
            -2
        }
    };
    let mut members = 0;
    let mut drift = weight(index_at(0));
    while members < side_len {
        let excess = gap_at(members + 1) - d1;
        let inside = if crossed || deep { excess <= d1 } else { excess <= d1 / cluster_ratio };
        if inside {
            members += 1;
            drift += weight(index_at(members));
        } else if crossed || deep || excess >= d1 * cluster_ratio {
            break;
        } else {
            return None;
        }
    }
    if drift >= 0 && !crossed {
        return None;
    }
    let outer = index_at(members);
    if outer == 0 {
        Some(Outcome::FreeArc)
    } else {
        Some(classify_index(config, outer))
    }
}

/// Whether the localisation time `T_n` has been reached: some ratio
/// `(w - a)/(b_i - a)`, `i > k`, or `(b_i - a)/(w - a)`, `i < k`, has left
/// `(1/n, 1 - 1/n)`.
pub fn guard_time_hit(state: &DrivingState, config: &BoundaryConfig, n_guard: u32) -> bool {
    let lo = 1.0 / n_guard as f64;
    let hi = 1.0 - lo;
    let k = config.k();
    let base = state.w - state.a_img;
    state.b_img.iter().enumerate().any(|(idx, &bi)| {
        let i = idx + 1;
        let ratio = if i > k {
            base / (bi - state.a_img)
        } else if i < k {
            (bi - state.a_img) / base
        } else {
            return false;
        };
        !(ratio > lo && ratio < hi)
    })
}

/// `log Z = 2 [ Σ_{I_k \ k} log(|q_i - p| / (q_i + p)) + Σ_{J_k} log((q_i + p) / |q_i - p|) ]`
/// with `p = sqrt(w - a)`, `q_i = sqrt(b_i - a)`.
fn log_z(state: &DrivingState, k: usize) -> f64 {
    let p = (state.w - state.a_img).sqrt();
    let mut sum = 0.0;
    for (idx, &bi) in state.b_img.iter().enumerate() {
        let i = idx + 1;
        if i == k {
            continue;
        }
        let q = (bi - state.a_img).sqrt();
        let plus = q + p;
        let minus = (bi - state.w).abs() / plus;
        let term = minus.ln() - plus.ln();
        if i % 2 == k % 2 {
            sum += term;
        } else {
            sum -= term;
        }
    }
    2.0 * sum
}

pub fn observables(state: &DrivingState, config: &BoundaryConfig) -> Result<Observables> {
    let k = config.k();
    check_uncollided(state, k)?;
    let j = coupling_sum_unchecked(state, k);
    let log_z = log_z(state, k);
    let n_weight = (-state.j_sq_integral / 8.0).exp();
    Ok(Observables {
        j,
        log_z,
        n_weight,
        m: (log_z / 4.0).exp() * n_weight,
        m_tilde: free_arc_probability_raw(state.a_img, &state.b_img, k),
    })
}

/// Which law drives `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// The level-line driving system with all force points.
    Coupled,
    /// `SLE_4(-1)` with force point `a`; the other points are only tracked.
    Reference,
}

/// Why [`Trajectory::advance_to`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Reached,
    Guard,
    Terminal(Outcome),
}

/// One accepted step, handed to observers.
pub struct StepInfo<'s> {
    pub before: &'s DrivingState,
    pub after: &'s DrivingState,
    /// Coupling sum `J` at the start of the step.
    pub j: f64,
    pub db: f64,
    pub dt: f64,
}

/// Precomputed per-configuration data shared by every trajectory.
#[derive(Debug, Clone)]
pub struct Integrator {
    config: BoundaryConfig,
    ctrl: StepControl,
    gap0: f64,
}

impl Integrator {
    pub fn new(config: &BoundaryConfig, ctrl: &StepControl) -> Result<Self> {
        ctrl.validate()?;
        Ok(Self { config: config.clone(), ctrl: *ctrl, gap0: config.start_gap() })
    }

    pub fn config(&self) -> &BoundaryConfig {
        &self.config
    }

    pub fn control(&self) -> &StepControl {
        &self.ctrl
    }

    pub fn start(&self, seed: u64, dynamics: Dynamics) -> Trajectory<'_> {
        Trajectory {
            integrator: self,
            state: DrivingState::initial(&self.config),
            rng: trajectory_rng(seed),
            steps: 0,
            dynamics,
            stopped: None,
        }
    }

    /// Runs the coupled system from the initial configuration to its terminal event.
    pub fn run(&self, seed: u64) -> OutcomeRecord {
        let mut traj = self.start(seed, Dynamics::Coupled);
        traj.advance_to(f64::INFINITY, None, &mut |_| {});
        traj.into_record()
    }

    #[inline]
    fn step_size(&self, gap: f64) -> f64 {
        let rel = gap / self.gap0;
        let p = self.ctrl.adapt_power;
        let factor = if p == 2.0 {
            rel * rel
        } else if p == 0.0 {
            1.0
        } else {
            rel.powf(p)
        };
        self.ctrl.dt_base * factor
    }
}

/// A single trajectory being integrated.
pub struct Trajectory<'a> {
    integrator: &'a Integrator,
    state: DrivingState,
    rng: TrajectoryRng,
    steps: u64,
    dynamics: Dynamics,
    stopped: Option<Outcome>,
}

impl<'a> Trajectory<'a> {
    pub fn state(&self) -> &DrivingState {
        &self.state
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn terminal(&self) -> Option<Outcome> {
        self.stopped
    }

    /// Integrates until `t_target`, the localisation guard `T_n` (if given),
    /// a collision, or censoring, whichever comes first. Once a terminal
    /// event has occurred further calls return it immediately.
    pub fn advance_to(
        &mut self,
        t_target: f64,
        guard: Option<u32>,
        observer: &mut dyn FnMut(&StepInfo<'_>),
    ) -> Stop {
        if let Some(outcome) = self.stopped {
            return Stop::Terminal(outcome);
        }
        let integ = self.integrator;
        let cfg = &integ.config;
        let ctrl = &integ.ctrl;
        let k = cfg.k();
        if let Some(n) = guard {
            if guard_time_hit(&self.state, cfg, n) {
                return Stop::Guard;
            }
        }
        let t_stop = t_target.min(ctrl.t_max);
        let mut before = self.state.clone();
        loop {
            if self.state.t >= t_stop {
                if self.state.t >= ctrl.t_max {
                    return self.finish(Outcome::Censored(CensorReason::Horizon));
                }
                return Stop::Reached;
            }
            if self.steps >= ctrl.max_steps {
                return self.finish(Outcome::Censored(CensorReason::MaxSteps));
            }
            let (left, right) = self.state.neighbour_gaps(k);
            let mut dt = integ.step_size(left.min(right));
            let remaining = t_stop - self.state.t;
            let landing = dt >= remaining;
            if landing {
                dt = remaining;
            }
            let j = coupling_sum_unchecked(&self.state, k);
            let drift = match self.dynamics {
                Dynamics::Coupled => -1.0 / (self.state.w - self.state.a_img) + j,
                Dynamics::Reference => -1.0 / (self.state.w - self.state.a_img),
            };
            let db = dt.sqrt() * standard_normal(&mut self.rng);
            before.clone_from(&self.state);
            advance_state(&mut self.state, k, drift, j, db, dt);
            if landing {
                self.state.t = t_stop;
            }
            self.steps += 1;

            if !self.state.is_finite() {
                return self.finish(Outcome::Censored(CensorReason::Nonfinite));
            }
            if let Some(outcome) = detect_collision_with(&self.state, cfg, ctrl.epsilon, ctrl.cluster_ratio) {
                observer(&StepInfo { before: &before, after: &self.state, j, db, dt });
                return self.finish(outcome);
            }
            if !self.state.ordered(k) {
                return self.finish(Outcome::Censored(CensorReason::OrderViolation));
            }
            observer(&StepInfo { before: &before, after: &self.state, j, db, dt });
            if let Some(n) = guard {
                if guard_time_hit(&self.state, cfg, n) {
                    return Stop::Guard;
                }
            }
        }
    }

    fn finish(&mut self, outcome: Outcome) -> Stop {
        self.stopped = Some(outcome);
        Stop::Terminal(outcome)
    }

    /// Runs to the terminal event and returns the record.
    pub fn into_record(mut self) -> OutcomeRecord {
        let outcome = match self.stopped {
            Some(o) => o,
            None => match self.advance_to(f64::INFINITY, None, &mut |_| {}) {
                Stop::Terminal(o) => o,
                _ => unreachable!("unbounded advance ends in a terminal event"),
            },
        };
        OutcomeRecord { outcome, t_end: self.state.t, final_state: self.state, steps: self.steps }
    }
}

/// Integrates the coupled system from `config` until a terminal event.
pub fn run_trajectory(config: &BoundaryConfig, ctrl: &StepControl, seed: u64) -> Result<OutcomeRecord> {
    Ok(Integrator::new(config, ctrl)?.run(seed))
}

/// Header of the per-step diagnostic CSV stream.
pub fn diagnostic_header(config: &BoundaryConfig) -> String {
    let mut cols = vec!["t".to_string(), "w".into(), "a_img".into()];
    cols.extend((1..=config.n()).map(|i| format!("b{i}")));
    cols.extend(["J", "logZ", "N", "M", "M_tilde"].iter().map(|s| s.to_string()));
    cols.join(",")
}

/// One CSV row `(t, w, a_img, b_1…b_n, J, logZ, N, M, M_tilde)`; observables are
/// left empty for a collided state.
pub fn diagnostic_row(state: &DrivingState, config: &BoundaryConfig) -> String {
    let mut cols = vec![state.t.to_string(), state.w.to_string(), state.a_img.to_string()];
    cols.extend(state.b_img.iter().map(|x| x.to_string()));
    match observables(state, config) {
        Ok(o) => cols.extend([o.j, o.log_z, o.n_weight, o.m, o.m_tilde].iter().map(|x| x.to_string())),
        Err(_) => cols.extend(std::iter::repeat_n(String::new(), 5)),
    }
    cols.join(",")
}

/// Runs one trajectory and writes the diagnostic stream, one row per step.
pub fn write_diagnostics<W: std::io::Write>(
    config: &BoundaryConfig,
    ctrl: &StepControl,
    seed: u64,
    out: &mut W,
) -> std::io::Result<OutcomeRecord> {
    let integ = Integrator::new(config, ctrl).map_err(std::io::Error::other)?;
    let mut traj = integ.start(seed, Dynamics::Coupled);
    writeln!(out, "{}", diagnostic_header(config))?;
    writeln!(out, "{}", diagnostic_row(traj.state(), config))?;
    let mut err = None;
    traj.advance_to(f64::INFINITY, None, &mut |info| {
        if err.is_none() {
            if let Err(e) = writeln!(out, "{}", diagnostic_row(info.after, config)) {
                err = Some(e);
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(traj.into_record()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(a: f64, b: &[f64], k: usize) -> BoundaryConfig {
        BoundaryConfig::new(a, b.to_vec(), k).unwrap()
    }

    fn state(w: f64, a: f64, b: &[f64]) -> DrivingState {
        DrivingState { t: 0.0, w, a_img: a, b_img: b.to_vec(), j_sq_integral: 0.0 }
    }

    #[test]
    fn drift_examples() {
        let c = cfg(0.0, &[1.0], 1);
        assert_eq!(drift_general(&DrivingState::initial(&c), &c).unwrap(), -1.0);
        let c = cfg(0.0, &[1.0, 4.0], 1);
        let d = drift_general(&DrivingState::initial(&c), &c).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
        // independent re-evaluation of the sum for (a=0, b=(1,4,9), k=2)
        let c = cfg(0.0, &[1.0, 4.0, 9.0], 2);
        let f41 = 2.0 / (4.0 - 1.0) * (1.0f64 / 4.0).sqrt();
        let f49 = 2.0 / (4.0 - 9.0) * (9.0f64 / 4.0).sqrt();
        let expected = -0.25 - f41 - f49;
        let d = drift_general(&DrivingState::initial(&c), &c).unwrap();
        assert!((d - expected).abs() < 1e-15, "{d} vs {expected}");
        let collided = state(1.0, 1.0, &[1.0]);
        assert!(drift_general(&collided, &cfg(0.0, &[1.0], 1)).is_err());
    }

    #[test]
    fn single_euler_step() {
        let c = cfg(0.0, &[1.0], 1);
        let s = step_general(&DrivingState::initial(&c), &c, 0.0, 1e-4).unwrap();
        assert!((s.w - 0.9999).abs() < 1e-15);
        assert!((s.a_img + 2e-4).abs() < 1e-15);
        assert_eq!(s.b_img[0], s.w);
        assert_eq!(s.t, 1e-4);
        let same = step_general(&DrivingState::initial(&c), &c, 0.0, 0.0).unwrap();
        assert_eq!(same, DrivingState::initial(&c));
    }

    #[test]
    fn sle_kappa_rho_step() {
        let p = SleParams::new(4.0, -1.0, 1.0, 0.0).unwrap();
        let (w, v) = step_sle_kappa_rho(1.0, 0.0, &p, 0.0, 1e-4).unwrap();
        assert!((w - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((v + 2e-4).abs() < 1e-15);
        let free = SleParams::new(4.0, 0.0, 1.0, 0.0).unwrap();
        let (w, _) = step_sle_kappa_rho(1.0, 0.0, &free, 0.3, 1e-2).unwrap();
        assert!((w - 1.6).abs() < 1e-15);
        assert!(step_sle_kappa_rho(1.0, 1.0, &p, 0.0, 1e-4).is_err());
        assert!(SleParams::new(0.0, 0.0, 1.0, 0.0).is_err());
        assert!(SleParams::new(4.0, 0.0, 0.0, 1.0).is_err());

        // n = 1 general system coincides with SLE_4(-1)
        let c = cfg(0.0, &[1.0], 1);
        for (db, dt) in [(0.01, 1e-3), (-0.02, 5e-4)] {
            let s = step_general(&DrivingState::initial(&c), &c, db, dt).unwrap();
            let (w, v) = step_sle_kappa_rho(1.0, 0.0, &p, db, dt).unwrap();
            assert_eq!((s.w, s.a_img), (w, v));
        }
    }

    #[test]
    fn collision_threshold() {
        let eps = 1e-4;
        let c = cfg(0.0, &[1.0], 1);
        assert_eq!(detect_collision(&state(eps / 2.0, 0.0, &[eps / 2.0]), &c, eps), Some(Outcome::FreeArc));
        assert_eq!(detect_collision(&DrivingState::initial(&c), &c, eps), None);

        let c = cfg(0.0, &[1.0, 4.0, 9.0], 1);
        let s = state(4.0 - eps / 2.0, -5.0, &[4.0 - eps / 2.0, 4.0, 9.0]);
        assert_eq!(detect_collision(&s, &c, eps), Some(Outcome::SwallowedPoint(2)));
        let s = state(1.0, 0.0, &[1.0, 4.0, 9.0]);
        assert_eq!(detect_collision(&s, &c, eps), None);
    }

    #[test]
    fn collision_clusters() {
        let eps = 1e-4;
        let c = cfg(0.0, &[1.0, 2.0, 3.0, 4.0], 3);
        let w = 10.0;
        let d = 0.5e-4;
        // free arc: a and b_1 squeezed into the pocket behind b_2
        let s = state(w, w - d - 2e-9, &[w - d - 1e-9, w - d, w, w + 5.0]);
        assert_eq!(detect_collision(&s, &c, eps), Some(Outcome::FreeArc));
        // b_2 hit: a and b_1 stay far away
        let s = state(w, w - 3.0, &[w - 2.0, w - d, w, w + 5.0]);
        assert_eq!(detect_collision(&s, &c, eps), Some(Outcome::SwallowedPoint(2)));
        // b_1 squeezed against b_2: the opposite drifts cancel, no collision
        let s = state(w, w - 3.0, &[w - d - 1e-9, w - d, w, w + 5.0]);
        assert_eq!(detect_collision(&s, &c, eps), None);
        // stepping across both of them is classified at the outer one
        let s = state(w, w - 3.0, &[w + 1e-10, w + 2e-10, w, w + 5.0]);
        assert_eq!(detect_collision(&s, &c, eps), Some(Outcome::AnomalousSamePolarity(1)));
        // undecided while the next gap is comparable to the nearest one
        let s = state(w, w - 3.0, &[w - 2.0 * d, w - d, w, w + 5.0]);
        assert_eq!(detect_collision(&s, &c, eps), None);
        // far below epsilon the cut is forced at twice the nearest gap
        let tiny = eps * 1e-9;
        let s = state(w, w - 3.0, &[w - 2.5 * tiny, w - tiny, w, w + 5.0]);
        assert_eq!(detect_collision(&s, &c, eps), Some(Outcome::SwallowedPoint(2)));
        let s = state(w, w - 3.0, &[w - 1.5 * tiny, w - tiny, w, w + 5.0]);
        assert_eq!(detect_collision(&s, &c, eps), None);
        // right side
        let s = state(w, w - 3.0, &[w - 2.0, w - 1.0, w, w + d]);
        assert_eq!(detect_collision(&s, &c, eps), Some(Outcome::SwallowedPoint(4)));
        // overshoot counts as a collision
        let s = state(w, w - 3.0, &[w - 2.0, w + 1e-3, w, w + 5.0]);
        assert_eq!(detect_collision(&s, &c, eps), Some(Outcome::SwallowedPoint(2)));
    }

    #[test]
    fn squeezed_points_keep_their_order() {
        let c = cfg(0.0, &[1.0, 4.0, 9.0], 2);
        let mut s = state(4.0, 100.0 - 1e-13, &[100.0, 4.0, 9.0]);
        s.a_img = 100.0 - 1e-13;
        s.b_img[0] = 100.0;
        s.w = 101.0;
        s.b_img[1] = 101.0;
        s.b_img[2] = 109.0;
        let next = step_general(&s, &c, 0.0, 1e-4).unwrap();
        assert!(next.a_img <= next.b_img[0]);
        assert!(next.b_img[0] - next.a_img < 1e-13);
    }

    #[test]
    fn guard_examples() {
        let c = cfg(0.0, &[1.0, 4.0], 1);
        let s0 = DrivingState::initial(&c);
        assert!(!guard_time_hit(&s0, &c, 10));
        assert!(guard_time_hit(&s0, &c, 2));
        let s = state(3.8, 0.0, &[3.8, 4.0]);
        assert!(guard_time_hit(&s, &c, 10));
        let single = cfg(0.0, &[1.0], 1);
        assert!(!guard_time_hit(&DrivingState::initial(&single), &single, 2));
    }

    #[test]
    fn observables_at_start() {
        let c = cfg(0.0, &[1.0, 4.0], 1);
        let o = observables(&DrivingState::initial(&c), &c).unwrap();
        assert!((o.m_tilde - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(o.n_weight, 1.0);
        assert!((o.m - (o.log_z / 4.0).exp()).abs() < 1e-15);
        let single = cfg(-2.0, &[3.0], 1);
        let o = observables(&DrivingState::initial(&single), &single).unwrap();
        assert_eq!((o.j, o.log_z, o.m_tilde), (0.0, 0.0, 1.0));
    }

    #[test]
    fn m_tilde_is_inverse_square_root_of_z() {
        let c = cfg(-0.3, &[0.5, 1.0, 2.5, 6.0, 7.0], 3);
        let s = state(1.3, -1.0, &[0.1, 0.9, 1.3, 2.0, 8.0]);
        let o = observables(&s, &c).unwrap();
        assert!((o.m_tilde - (-0.5 * o.log_z).exp()).abs() < 1e-13);
    }

    #[test]
    fn log_z_gradient_is_j() {
        // d log Z / dw = J (so the martingale part of d log Z is 2 J dB).
        let c = cfg(0.0, &[1.0, 2.0, 5.0, 7.0], 2);
        let s = state(2.2, -0.1, &[0.8, 2.2, 4.0, 9.0]);
        let h = 1e-6;
        let shift = |dw: f64| {
            let mut t = s.clone();
            t.w += dw;
            t.b_img[1] = t.w;
            observables(&t, &c).unwrap().log_z
        };
        let fd = (shift(h) - shift(-h)) / (2.0 * h);
        let j = coupling_sum(&s, &c).unwrap();
        assert!((fd - j).abs() < 1e-6 * j.abs().max(1.0), "{fd} vs {j}");
    }

    #[test]
    fn trajectories_are_deterministic() {
        let c = cfg(0.0, &[1.0, 4.0], 1);
        let ctrl = StepControl::for_config(&c);
        let r1 = run_trajectory(&c, &ctrl, 42).unwrap();
        let r2 = run_trajectory(&c, &ctrl, 42).unwrap();
        assert_eq!(r1, r2);
        assert!(!matches!(r1.outcome, Outcome::Censored(_)));
    }

    #[test]
    fn control_validation() {
        let c = cfg(0.0, &[1.0], 1);
        let ok = StepControl::for_config(&c);
        assert!(ok.validate().is_ok());
        assert!(StepControl { dt_base: 0.0, ..ok }.validate().is_err());
        assert!(StepControl { epsilon: -1.0, ..ok }.validate().is_err());
        assert!(StepControl { adapt_power: -1.0, ..ok }.validate().is_err());
        assert!(StepControl { t_max: 0.0, ..ok }.validate().is_err());
    }

    #[test]
    fn diagnostics_stream() {
        let c = cfg(0.0, &[1.0, 4.0], 1);
        let ctrl = StepControl::for_config(&c);
        let mut buf = Vec::new();
        let rec = write_diagnostics(&c, &ctrl, 3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,w,a_img,b1,b2,J,logZ,N,M,M_tilde");
        assert_eq!(text.lines().count() as u64, rec.steps + 2);
    }
}
