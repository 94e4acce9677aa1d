//! Chordal Loewner flow driven by a sampled function.
//!
//! Within a step `(t_{i-1}, t_i]` the driving function moves from `U_{i-1}`
//! to `U_i` along the path whose hull is a straight slit based at `U_{i-1}`,
//! leaving the real line at angle `απ` (the tilted slit of half-plane
//! capacity `2Δt`). The inverse map of one step is explicit,
//!
//! ```text
//! f_i(z) = U_{i-1} + (z - x_l)^{1-α} (z - x_r)^α,
//! ```
//!
//! with `x_l < U_i < x_r` fixed by the capacity and by `f_i(U_i)` being the
//! tip. Consecutive slits are attached tip to tip, so the traced curve is
//! continuous for any sampled driving function. When `U_i = U_{i-1}` the
//! step is the vertical slit `(g - U)^2 ↦ (g - U)^2 + 4Δt`, evaluated in
//! closed form.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::{Dynamics, Integrator, OutcomeRecord};

/// Relative threshold below which `|g - U|` counts as a blow-up.
pub const BLOWUP_TOLERANCE: f64 = 1e-8;

/// Sampled driving function on an increasing time grid starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingPath {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl DrivingPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidPath("times and values must be non-empty and of equal length".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidPath("the time grid must start at 0".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidPath("times must be strictly increasing".into()));
        }
        if times.iter().chain(&values).any(|x| !x.is_finite()) {
            return Err(Error::InvalidPath("times and values must be finite".into()));
        }
        Ok(Self { times, values })
    }

    /// `W ≡ value` on `[0, t_end]` with `steps` uniform steps.
    pub fn constant(value: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(t_end > 0.0) {
            return Err(Error::InvalidPath("need at least one step of positive length".into()));
        }
        let times = (0..=steps).map(|i| t_end * i as f64 / steps as f64).collect();
        Self::new(times, vec![value; steps + 1])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of steps (grid points minus one).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    /// The path restricted to its first `steps` steps.
    pub fn prefix(&self, steps: usize) -> Self {
        let len = (steps + 1).min(self.times.len());
        Self { times: self.times[..len].to_vec(), values: self.values[..len].to_vec() }
    }

    /// Keeps at most `max_steps` steps, spread evenly over the grid index,
    /// always retaining the first and last sample.
    pub fn thinned(&self, max_steps: usize) -> Self {
        let m = self.steps();
        if m <= max_steps || max_steps == 0 {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..=max_steps).map(|i| i * m / max_steps).collect();
        idx.dedup();
        Self {
            times: idx.iter().map(|&i| self.times[i]).collect(),
            values: idx.iter().map(|&i| self.values[i]).collect(),
        }
    }

    /// Keeps about `max_steps` steps spread evenly in time plus about
    /// `max_steps` spread evenly over the grid index, so that both the long
    /// excursions and the finely resolved approach to a collision survive.
    pub fn thinned_balanced(&self, max_steps: usize) -> Self {
        let m = self.steps();
        if m <= 2 * max_steps || max_steps == 0 {
            return self.clone();
        }
        let t_end = self.end_time();
        let mut keep = vec![0];
        let (mut time_bin, mut index_bin) = (0, 0);
        for i in 1..=m {
            let tb = ((self.times[i] / t_end) * max_steps as f64) as usize;
            let ib = i * max_steps / m;
            if tb > time_bin || ib > index_bin || i == m {
                keep.push(i);
                time_bin = tb;
                index_bin = ib;
            }
        }
        Self {
            times: keep.iter().map(|&i| self.times[i]).collect(),
            values: keep.iter().map(|&i| self.values[i]).collect(),
        }
    }
}

/// Runs one trajectory of the coupled system and records its driving values.
pub fn record_driving_path(integrator: &Integrator, seed: u64) -> (OutcomeRecord, DrivingPath) {
    let mut traj = integrator.start(seed, Dynamics::Coupled);
    let mut times = vec![0.0];
    let mut values = vec![traj.state().w];
    traj.advance_to(f64::INFINITY, None, &mut |step| {
        times.push(step.after.t);
        values.push(step.after.w);
    });
    let record = traj.into_record();
    let path = DrivingPath { times, values };
    (record, path)
}

/// Image of a point under the flow and its blow-up time, if reached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowResult {
    pub value: Complex64,
    pub tau: Option<f64>,
}

fn pick_root(root: Complex64, reference: Complex64) -> Complex64 {
    if root.im > 0.0 {
        root
    } else if root.im < 0.0 {
        -root
    } else if (root.re >= 0.0) == (reference.re >= 0.0) {
        root
    } else {
        -root
    }
}

const NEWTON_ITERATIONS: usize = 200;

/// One step of the chain as a tilted slit map.
#[derive(Debug, Clone, Copy)]
struct SlitStep {
    base: f64,
    drive: f64,
    dt: f64,
    alpha: f64,
    left: f64,
    right: f64,
}

impl SlitStep {
    fn new(base: f64, drive: f64, dt: f64) -> Self {
        let d = (drive - base) / (2.0 * dt.sqrt());
        let s = (4.0 + d * d).sqrt();
        let alpha = if d >= 0.0 { 2.0 / (s * (s + d)) } else { 1.0 - 2.0 / (s * (s - d)) };
        let len = 2.0 * (dt / (alpha * (1.0 - alpha))).sqrt();
        Self { base, drive, dt, alpha, left: base - alpha * len, right: base + (1.0 - alpha) * len }
    }

    fn vertical(&self) -> bool {
        self.drive == self.base
    }

    /// Unnormalized `(z - x_l)^{1-α} (z - x_r)^α` on the closed upper half plane.
    fn power(&self, z: Complex64) -> Complex64 {
        // arg((z - x_r)/(z - x_l)) lies in [0, π] on the closed upper half plane
        let near = z - self.left;
        near * ((z - self.right) / near).ln().scale(self.alpha).exp()
    }

    /// Inverse map of the step, from the later domain to the earlier one.
    fn inverse(&self, z: Complex64) -> Complex64 {
        if self.vertical() {
            let d = z - self.drive;
            return self.drive + pick_root((d * d - 4.0 * self.dt).sqrt(), d);
        }
        self.base + self.power(z)
    }

    /// Tip of the slit relative to its base.
    fn tip_offset(&self) -> Complex64 {
        if self.vertical() {
            return Complex64::new(0.0, 2.0 * self.dt.sqrt());
        }
        let modulus = (self.drive - self.left).powf(1.0 - self.alpha) * (self.right - self.drive).powf(self.alpha);
        Complex64::from_polar(modulus, self.alpha * std::f64::consts::PI)
    }

    /// Forward map of the step for a point off the slit.
    fn forward(&self, g: Complex64) -> Complex64 {
        let d = g - self.base;
        if self.vertical() {
            return self.drive + pick_root((d * d + 4.0 * self.dt).sqrt(), d);
        }
        let mid = 0.5 * (self.left + self.right);
        let half = 0.5 * (self.right - self.left);
        let mut w = mid + pick_root((d * d + half * half).sqrt(), d);
        let scale = d.norm().max(half);
        for _ in 0..NEWTON_ITERATIONS {
            let p = self.power(w);
            let slope = p * ((1.0 - self.alpha) / (w - self.left) + self.alpha / (w - self.right));
            let mut next = w - (p - d) / slope;
            if next.im < 0.0 {
                next = Complex64::new(next.re, 0.5 * w.im);
            }
            let moved = (next - w).norm();
            w = next;
            if !(moved > 1e-15 * scale) {
                break;
            }
        }
        w
    }
}

fn slit_steps(path: &DrivingPath) -> Vec<SlitStep> {
    (1..path.times.len())
        .map(|i| SlitStep::new(path.values[i - 1], path.values[i], path.times[i] - path.times[i - 1]))
        .collect()
}

/// Forward Loewner flow `g_t(z)` up to the end of the path.
pub fn flow_point(path: &DrivingPath, z: Complex64) -> Result<FlowResult> {
    if !(z.im >= 0.0) || !z.re.is_finite() || !z.im.is_finite() {
        return Err(Error::Domain(format!("{z} is not in the closed upper half plane")));
    }
    let times = &path.times;
    let values = &path.values;
    let scale = values.iter().fold(z.norm(), |m, v| m.max(v.abs())).max(path.end_time().sqrt()).max(1.0);
    let tol = BLOWUP_TOLERANCE * scale;
    let mut g = z;
    if (g - values[0]).norm() < tol {
        return Ok(FlowResult { value: g, tau: Some(0.0) });
    }
    for (idx, step) in slit_steps(path).iter().enumerate() {
        let i = idx + 1;
        if (g - step.base).norm() < tol {
            return Ok(FlowResult { value: g, tau: Some(times[i - 1]) });
        }
        // a point on the slit grown during this step: the length of a tilted
        // slit of fixed angle grows like the square root of its capacity
        let tip = step.tip_offset();
        let along = (g - step.base) * tip.conj() / tip.norm();
        if along.im.abs() <= tol && along.re > 0.0 && along.re <= tip.norm() + tol {
            let frac = (along.re / tip.norm()).min(1.0);
            return Ok(FlowResult { value: Complex64::new(step.drive, 0.0), tau: Some(times[i - 1] + step.dt * frac * frac) });
        }
        g = step.forward(g);
        if !g.re.is_finite() || !g.im.is_finite() {
            return Err(Error::NonFinite { step: i });
        }
    }
    Ok(FlowResult { value: g, tau: None })
}

/// Polyline approximation of the Loewner curve with its time stamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTrace {
    pub points: Vec<Complex64>,
    pub times: Vec<f64>,
}

impl CurveTrace {
    pub fn tip(&self) -> Complex64 {
        *self.points.last().expect("non-empty trace")
    }

    /// CSV with columns `t,x,y`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "t,x,y")?;
        for (t, p) in self.times.iter().zip(&self.points) {
            writeln!(out, "{t},{},{}", p.re, p.im)?;
        }
        Ok(())
    }
}

/// Traces the curve generated by `path`: the point at `t_j` is
/// `f_1 ∘ … ∘ f_{j-1}` applied to the tip of the `j`-th slit.
///
/// Cost is quadratic in the number of steps.
pub fn trace_curve(path: &DrivingPath) -> Result<CurveTrace> {
    trace_curve_refined(path, 1)
}

/// Like [`trace_curve`], with `substeps` points per step spread evenly along
/// each straight slit before it is mapped back.
pub fn trace_curve_refined(path: &DrivingPath, substeps: usize) -> Result<CurveTrace> {
    if substeps == 0 {
        return Err(Error::InvalidPath("need at least one point per step".into()));
    }
    let steps = slit_steps(path);
    let mut points = Vec::with_capacity(steps.len() * substeps + 1);
    let mut times = Vec::with_capacity(steps.len() * substeps + 1);
    points.push(Complex64::new(path.values[0], 0.0));
    times.push(0.0);
    for (j, step) in steps.iter().enumerate() {
        let tip = step.tip_offset();
        for q in 1..=substeps {
            let frac = q as f64 / substeps as f64;
            let mut z = step.base + tip * frac;
            for earlier in steps[..j].iter().rev() {
                z = earlier.inverse(z);
            }
            if !z.re.is_finite() || !z.im.is_finite() {
                return Err(Error::NonFinite { step: j + 1 });
            }
            points.push(z);
            times.push(path.times[j] + step.dt * frac * frac);
        }
    }
    Ok(CurveTrace { points, times })
}

fn cross(a: Complex64, b: Complex64) -> f64 {
    a.re * b.im - a.im * b.re
}

fn point_segment_distance(p: Complex64, a: Complex64, b: Complex64) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_sqr();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let s = ((p - a).re * ab.re + (p - a).im * ab.im) / len2;
    (p - (a + ab * s.clamp(0.0, 1.0))).norm()
}

fn segments_intersect(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> bool {
    let d1 = cross(b - a, c - a);
    let d2 = cross(b - a, d - a);
    let d3 = cross(d - c, a - c);
    let d4 = cross(d - c, b - c);
    (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0) && d1 != 0.0 && d2 != 0.0 && d3 != 0.0 && d4 != 0.0
}

fn segment_distance(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// Heuristic simplicity test of a traced polyline.
///
/// Fails if two non-adjacent segments cross, or come within `tol` of each
/// other while the polyline between them is longer than `4 * tol` (closer
/// pairs are just neighbours along a finely sampled curve). Uses a sweep
/// over the x-extent of the segments.
pub fn simplicity_check(trace: &CurveTrace, tol: f64) -> bool {
    let pts = &trace.points;
    if pts.len() < 3 {
        return true;
    }
    let nseg = pts.len() - 1;
    let mut arc = vec![0.0; pts.len()];
    for i in 1..pts.len() {
        arc[i] = arc[i - 1] + (pts[i] - pts[i - 1]).norm();
    }
    let bbox = |i: usize| {
        let (a, b) = (pts[i], pts[i + 1]);
        (a.re.min(b.re) - tol, a.re.max(b.re) + tol, a.im.min(b.im) - tol, a.im.max(b.im) + tol)
    };
    let mut order: Vec<usize> = (0..nseg).collect();
    order.sort_by(|&i, &j| bbox(i).0.total_cmp(&bbox(j).0));
    let mut active: Vec<usize> = Vec::new();
    for &i in &order {
        let (x0, _, y0, y1) = bbox(i);
        active.retain(|&j| bbox(j).1 >= x0);
        for &j in &active {
            let (lo, hi) = (i.min(j), i.max(j));
            if hi - lo < 2 {
                continue;
            }
            let (_, _, v0, v1) = bbox(j);
            if v1 < y0 || v0 > y1 {
                continue;
            }
            let (a, b, c, d) = (pts[lo], pts[lo + 1], pts[hi], pts[hi + 1]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
            let between = arc[hi] - arc[lo + 1];
            if between > 4.0 * tol && segment_distance(a, b, c, d) < tol {
                return false;
            }
        }
        active.push(i);
    }
    true
}
