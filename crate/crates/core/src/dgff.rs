//! Discrete Gaussian free field with mixed boundary data, used as an
//! independent check of the continuum predictions.
//!
//! The field lives on the vertices of a `width × height` grid. Its precision
//! operator is the graph Laplacian with unit edge weights, whose inverse
//! behaves like `(1/2π) log(1/|x - y|)` at any mesh, the normalization of the
//! continuum Green function. Pinned vertices carry the boundary data, free
//! vertices on the free arc simply lack the neighbour outside the grid
//! (reflecting stencil), and everything else is Gaussian.
//!
//! Two embeddings are supported:
//!
//! * [`Embedding::HalfPlane`]: vertex `(i, j)` sits at `(x_left + i h, j h)`,
//!   the bottom row is the real axis;
//! * [`Embedding::Unfolded`]: vertex `(i, j)` sits at `u = (i h, j h)` in the
//!   coordinate `u = sqrt(z - a)`. The quadrant `Re u, Im u > 0` is the image
//!   of the upper half plane; the free arc becomes the left edge and the
//!   Dirichlet arcs the bottom edge. By conformal invariance the field in `u`
//!   is again a free field with the same boundary data.

use std::io::Write;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::ops::serial::spsolve_csc_lower_triangular;
use nalgebra_sparse::ops::Op;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{greens_mix, phi_unfolded, sqrt_upper, BoundaryConfig};
use crate::montecarlo::{wilson_interval, CheckReport, Z95};
use crate::rng::{standard_normal, trajectory_rng, trajectory_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Embedding {
    /// Rectangle `[x_left, x_left + width·mesh] × [0, height·mesh]` of the half plane.
    HalfPlane { x_left: f64 },
    /// Square `[0, width·mesh] × [0, height·mesh]` in `u = sqrt(z - a)`.
    Unfolded,
}

/// Data on the edges of the box away from the real axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FarBoundary {
    /// Pinned to 0.
    DirichletZero,
    /// Pinned to the continuum harmonic function of the boundary data.
    Matched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub config: BoundaryConfig,
    pub width: usize,
    pub height: usize,
    pub mesh: f64,
    pub embedding: Embedding,
    pub far_boundary: FarBoundary,
}

impl LatticeSpec {
    pub fn half_plane(
        config: &BoundaryConfig,
        width: usize,
        height: usize,
        mesh: f64,
        x_left: f64,
        far_boundary: FarBoundary,
    ) -> Result<Self> {
        let spec = Self {
            config: config.clone(),
            width,
            height,
            mesh,
            embedding: Embedding::HalfPlane { x_left },
            far_boundary,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square grid of `cells × cells` covering `[0, extent]^2` in `u`.
    pub fn unfolded(config: &BoundaryConfig, cells: usize, extent: f64, far_boundary: FarBoundary) -> Result<Self> {
        let spec = Self {
            config: config.clone(),
            width: cells,
            height: cells,
            mesh: extent / cells as f64,
            embedding: Embedding::Unfolded,
            far_boundary,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidLattice("the grid needs at least 2 cells in each direction".into()));
        }
        if !(self.mesh > 0.0) || !self.mesh.is_finite() {
            return Err(Error::InvalidLattice("mesh must be positive and finite".into()));
        }
        if let Embedding::HalfPlane { x_left } = self.embedding {
            if !x_left.is_finite() {
                return Err(Error::InvalidLattice("x_left must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        (self.width + 1) * (self.height + 1)
    }

    pub fn vertex(&self, i: usize, j: usize) -> usize {
        j * (self.width + 1) + i
    }

    /// Position in the upper half plane of the lattice point `(x, y)` (grid units).
    pub fn to_plane(&self, x: f64, y: f64) -> Complex64 {
        let p = Complex64::new(x * self.mesh, y * self.mesh);
        match self.embedding {
            Embedding::HalfPlane { x_left } => p + x_left,
            Embedding::Unfolded => self.config.a() + p * p,
        }
    }

    /// Grid coordinate along the bottom row of a real point `x >= a`.
    pub fn bottom_coordinate(&self, x: f64) -> f64 {
        match self.embedding {
            Embedding::HalfPlane { x_left } => (x - x_left) / self.mesh,
            Embedding::Unfolded => (x - self.config.a()).max(0.0).sqrt() / self.mesh,
        }
    }

    /// Smallest number of cells between consecutive marked points `a, b_1, …, b_n`
    /// along the bottom row.
    pub fn cells_per_gap(&self) -> f64 {
        let mut pos = vec![self.bottom_coordinate(self.config.a())];
        pos.extend(self.config.b().iter().map(|&b| self.bottom_coordinate(b)));
        pos.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    fn boundary_value(&self, x: f64) -> f64 {
        let arc = self.config.b().partition_point(|&b| b <= x);
        self.config.arc_value(arc)
    }

    fn far_value(&self, i: usize, j: usize) -> f64 {
        match self.far_boundary {
            FarBoundary::DirichletZero => 0.0,
            FarBoundary::Matched => {
                let z = self.to_plane(i as f64, j as f64);
                phi_unfolded(sqrt_upper(z - self.config.a()), &self.config)
            }
        }
    }

    /// Boundary value of a pinned vertex, `None` for unknowns.
    pub fn pinned_value(&self, i: usize, j: usize) -> Option<f64> {
        let (w, h) = (self.width, self.height);
        match self.embedding {
            Embedding::HalfPlane { .. } => {
                let x = self.to_plane(i as f64, 0.0).re;
                if j == 0 && x >= self.config.a() {
                    Some(self.boundary_value(x))
                } else if i == 0 || i == w || j == h {
                    Some(self.far_value(i, j))
                } else {
                    None
                }
            }
            Embedding::Unfolded => {
                if j == 0 && i > 0 {
                    Some(self.boundary_value(self.to_plane(i as f64, 0.0).re))
                } else if i == w || j == h {
                    Some(self.far_value(i, j))
                } else {
                    None
                }
            }
        }
    }
}

/// Graph Laplacian of the grid restricted to the unknown vertices, with the
/// pinned neighbours moved to the right-hand side.
#[derive(Debug, Clone)]
pub struct ReducedLaplacian {
    /// Unknown index of each vertex.
    pub unknown: Vec<Option<usize>>,
    pub precision: CscMatrix<f64>,
    pub rhs: Vec<f64>,
}

/// Assembles the reduced Laplacian of a `(width + 1) × (height + 1)` vertex
/// grid; `pinned[v]` is the value of vertex `v` or `None` if it is unknown.
/// Unknowns are numbered row by row.
pub fn reduced_laplacian(width: usize, height: usize, pinned: &[Option<f64>]) -> Result<ReducedLaplacian> {
    let nv = (width + 1) * (height + 1);
    if pinned.len() != nv {
        return Err(Error::InvalidLattice(format!("expected {nv} vertex values, got {}", pinned.len())));
    }
    if pinned.iter().all(Option::is_none) {
        return Err(Error::Singular("no pinned vertex: the Laplacian has constant functions in its kernel".into()));
    }
    let mut unknown = vec![None; nv];
    let mut count = 0;
    for (v, p) in pinned.iter().enumerate() {
        if p.is_none() {
            unknown[v] = Some(count);
            count += 1;
        }
    }
    let mut coo = CooMatrix::new(count, count);
    let mut rhs = vec![0.0; count];
    for j in 0..=height {
        for i in 0..=width {
            let v = j * (width + 1) + i;
            let Some(row) = unknown[v] else { continue };
            let mut neighbours = Vec::with_capacity(4);
            if i > 0 {
                neighbours.push(v - 1);
            }
            if i < width {
                neighbours.push(v + 1);
            }
            if j > 0 {
                neighbours.push(v - width - 1);
            }
            if j < height {
                neighbours.push(v + width + 1);
            }
            coo.push(row, row, neighbours.len() as f64);
            for u in neighbours {
                match (unknown[u], pinned[u]) {
                    (Some(col), _) => coo.push(row, col, -1.0),
                    (None, Some(value)) => rhs[row] += value,
                    (None, None) => unreachable!("every vertex is pinned or unknown"),
                }
            }
        }
    }
    Ok(ReducedLaplacian { unknown, precision: CscMatrix::from(&coo), rhs })
}

/// Factored precision operator of a lattice together with the mean field.
pub struct LatticeOperator {
    spec: LatticeSpec,
    pinned: Vec<Option<f64>>,
    laplacian: ReducedLaplacian,
    factor: CscCholesky<f64>,
    mean: Vec<f64>,
}

pub fn build_operator(spec: &LatticeSpec) -> Result<LatticeOperator> {
    spec.validate()?;
    let mut pinned = Vec::with_capacity(spec.vertex_count());
    for j in 0..=spec.height {
        for i in 0..=spec.width {
            pinned.push(spec.pinned_value(i, j));
        }
    }
    let laplacian = reduced_laplacian(spec.width, spec.height, &pinned)?;
    let factor = CscCholesky::factor(&laplacian.precision)
        .map_err(|e| Error::Singular(format!("Cholesky factorization failed: {e:?}")))?;
    let inner = factor.solve(&DVector::from_column_slice(&laplacian.rhs));
    let mean = expand(&laplacian.unknown, &pinned, inner.as_slice());
    Ok(LatticeOperator { spec: spec.clone(), pinned, laplacian, factor, mean })
}

fn expand(unknown: &[Option<usize>], pinned: &[Option<f64>], inner: &[f64]) -> Vec<f64> {
    unknown
        .iter()
        .zip(pinned)
        .map(|(u, p)| match (u, p) {
            (Some(idx), _) => inner[*idx],
            (None, Some(v)) => *v,
            (None, None) => unreachable!("every vertex is pinned or unknown"),
        })
        .collect()
}

impl LatticeOperator {
    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn unknowns(&self) -> usize {
        self.laplacian.rhs.len()
    }

    pub fn precision(&self) -> &CscMatrix<f64> {
        &self.laplacian.precision
    }

    /// Discrete harmonic extension of the boundary data (the mean field).
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn is_pinned(&self, v: usize) -> bool {
        self.pinned[v].is_some()
    }

    /// Centered Gaussian vector with covariance equal to the inverse precision,
    /// on all vertices (zero on pinned ones).
    pub fn sample_fluctuation(&self, seed: u64) -> Vec<f64> {
        let mut rng = trajectory_rng(seed);
        let mut xi = DVector::from_fn(self.unknowns(), |_, _| standard_normal(&mut rng));
        spsolve_csc_lower_triangular(Op::Transpose(self.factor.l()), &mut xi).expect("nonsingular factor");
        self.laplacian.unknown.iter().map(|u| u.map_or(0.0, |idx| xi[idx])).collect()
    }

    /// Exact covariance `Σ_{v,w} x_v C_{vw} y_w` of two weight vectors on the
    /// vertices (weights on pinned vertices are ignored).
    pub fn covariance(&self, x: &[f64], y: &[f64]) -> f64 {
        let pick = |w: &[f64]| {
            let mut out = DVector::zeros(self.unknowns());
            for (v, u) in self.laplacian.unknown.iter().enumerate() {
                if let Some(idx) = u {
                    out[*idx] = w[v];
                }
            }
            out
        };
        let solved = self.factor.solve(&pick(y));
        pick(x).dot(&solved)
    }
}

/// One realization of the field on all vertices, row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl FieldSample {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * (self.width + 1) + i]
    }

    /// CSV with columns `i,j,x,y,value` (`x + iy` the position in the half plane).
    pub fn write_csv<W: Write>(&self, spec: &LatticeSpec, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "i,j,x,y,value")?;
        for j in 0..=self.height {
            for i in 0..=self.width {
                let z = spec.to_plane(i as f64, j as f64);
                writeln!(out, "{i},{j},{},{},{}", z.re, z.im, self.value(i, j))?;
            }
        }
        Ok(())
    }
}

/// Mean field plus a fluctuation drawn from `seed`.
pub fn sample_field(op: &LatticeOperator, seed: u64) -> FieldSample {
    let values = op.sample_fluctuation(seed).iter().zip(&op.mean).map(|(f, m)| f + m).collect();
    FieldSample { width: op.spec.width, height: op.spec.height, values }
}

/// Where a traced level line left the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineEnd {
    FreeArc,
    /// Bottom-edge sign change nearest to `b_i`.
    Point(usize),
    /// Exit through a far edge of the box.
    Far,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelLine {
    pub end: LineEnd,
    /// Crossing points in the half plane.
    pub points: Vec<Complex64>,
}

impl LevelLine {
    /// CSV with columns `x,y`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "x,y")?;
        for p in &self.points {
            writeln!(out, "{},{}", p.re, p.im)?;
        }
        Ok(())
    }
}

// cell edges: 0 bottom, 1 right, 2 top, 3 left; corners counter-clockwise from bottom-left
const EDGE_CORNERS: [(usize, usize); 4] = [(0, 1), (1, 2), (2, 3), (3, 0)];

/// Follows the zero level set of the bilinear interpolant of `sample`,
/// starting on the bottom edge that straddles `b_start`.
///
/// Inside a cell the line leaves through the other edge with a sign change
/// (values `>= 0` count as positive). In a saddle cell the value at the
/// saddle point of the interpolant decides which diagonal pair of corners is
/// connected. The line ends when it leaves the grid: through the free arc,
/// through a bottom sign change (labelled by the nearest marked point) or
/// through a far edge.
pub fn trace_level_line(sample: &FieldSample, spec: &LatticeSpec, start: usize) -> Result<LevelLine> {
    let cfg = &spec.config;
    if start == 0 || start > cfg.n() {
        return Err(Error::IndexOutOfRange { index: start, n: cfg.n() });
    }
    if sample.width != spec.width || sample.height != spec.height {
        return Err(Error::InvalidLattice("sample and lattice sizes differ".into()));
    }
    let (w, h) = (spec.width, spec.height);
    let p = spec.bottom_coordinate(cfg.b()[start - 1]);
    let i0 = (p.ceil() as usize).saturating_sub(1);
    if !(p > 0.0) || i0 >= w {
        return Err(Error::InvalidLattice(format!("b_{start} is not on the bottom edge of the grid")));
    }
    let positive = |i: usize, j: usize| sample.value(i, j) >= 0.0;
    if positive(i0, 0) == positive(i0 + 1, 0) {
        return Err(Error::InvalidLattice(format!("no sign change on the bottom edge at b_{start}")));
    }
    let crossing = |(i1, j1): (usize, usize), (i2, j2): (usize, usize)| {
        let (f1, f2) = (sample.value(i1, j1), sample.value(i2, j2));
        let t = f1 / (f1 - f2);
        let x = i1 as f64 + t * (i2 as f64 - i1 as f64);
        let y = j1 as f64 + t * (j2 as f64 - j1 as f64);
        (x, y)
    };
    let (x, y) = crossing((i0, 0), (i0 + 1, 0));
    let mut points = vec![spec.to_plane(x, y)];
    let (mut ci, mut cj, mut entry) = (i0, 0usize, 0usize);
    for _ in 0..4 * w * h + 4 {
        let corners = [(ci, cj), (ci + 1, cj), (ci + 1, cj + 1), (ci, cj + 1)];
        let f: Vec<f64> = corners.iter().map(|&(i, j)| sample.value(i, j)).collect();
        let s: Vec<bool> = f.iter().map(|&v| v >= 0.0).collect();
        let changes: Vec<usize> = (0..4).filter(|&e| s[EDGE_CORNERS[e].0] != s[EDGE_CORNERS[e].1]).collect();
        let exit = if changes.len() == 4 {
            let saddle = (f[0] * f[2] - f[1] * f[3]) / (f[0] + f[2] - f[1] - f[3]);
            let diagonal_02_joined = (saddle >= 0.0) == s[0];
            match (diagonal_02_joined, entry) {
                (true, 0) => 1,
                (true, 1) => 0,
                (true, 2) => 3,
                (true, _) => 2,
                (false, 0) => 3,
                (false, 3) => 0,
                (false, 1) => 2,
                (false, _) => 1,
            }
        } else {
            *changes.iter().find(|&&e| e != entry).expect("a crossed cell has two sign changes")
        };
        let (c1, c2) = EDGE_CORNERS[exit];
        let (x, y) = crossing(corners[c1], corners[c2]);
        points.push(spec.to_plane(x, y));
        let unknown_end = |k: usize| spec.pinned_value(corners[k].0, corners[k].1).is_none();
        match exit {
            0 if cj == 0 => {
                let end = if unknown_end(c1) || unknown_end(c2) {
                    LineEnd::FreeArc
                } else {
                    let xr = spec.to_plane(x, 0.0).re;
                    let nearest = cfg
                        .b()
                        .iter()
                        .enumerate()
                        .min_by(|a, b| (a.1 - xr).abs().total_cmp(&(b.1 - xr).abs()))
                        .map(|(i, _)| i + 1)
                        .expect("non-empty");
                    LineEnd::Point(nearest)
                };
                return Ok(LevelLine { end, points });
            }
            3 if ci == 0 => {
                let free = matches!(spec.embedding, Embedding::Unfolded) && (unknown_end(c1) || unknown_end(c2));
                let end = if free { LineEnd::FreeArc } else { LineEnd::Far };
                return Ok(LevelLine { end, points });
            }
            1 if ci + 1 == w => return Ok(LevelLine { end: LineEnd::Far, points }),
            2 if cj + 1 == h => return Ok(LevelLine { end: LineEnd::Far, points }),
            0 => {
                cj -= 1;
                entry = 2;
            }
            1 => {
                ci += 1;
                entry = 3;
            }
            2 => {
                cj += 1;
                entry = 0;
            }
            _ => {
                ci -= 1;
                entry = 1;
            }
        }
    }
    Err(Error::InvalidLattice("level line did not leave the grid".into()))
}

/// Termination counts of level lines over independent samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineStudy {
    pub n_samples: u64,
    pub n_free: u64,
    /// `n_point[i - 1]` counts ends at `b_i`.
    pub n_point: Vec<u64>,
    pub n_far: u64,
    /// Free-arc frequency among lines that did not leave through the far boundary.
    pub p_free: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seed_base: u64,
}

pub fn level_line_study(op: &LatticeOperator, n_samples: u64, seed_base: u64, workers: usize) -> Result<LineStudy> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    let spec = &op.spec;
    let k = spec.config.k();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let ends: Vec<Result<LineEnd>> = pool.install(|| {
        (0..n_samples)
            .into_par_iter()
            .map(|s| {
                let field = sample_field(op, trajectory_seed(seed_base, s));
                trace_level_line(&field, spec, k).map(|l| l.end)
            })
            .collect()
    });
    let mut study = LineStudy {
        n_samples,
        n_free: 0,
        n_point: vec![0; spec.config.n()],
        n_far: 0,
        p_free: 0.0,
        ci_low: 0.0,
        ci_high: 1.0,
        seed_base,
    };
    for end in ends {
        match end? {
            LineEnd::FreeArc => study.n_free += 1,
            LineEnd::Point(i) => study.n_point[i - 1] += 1,
            LineEnd::Far => study.n_far += 1,
        }
    }
    let done = n_samples - study.n_far;
    if done > 0 {
        study.p_free = study.n_free as f64 / done as f64;
        (study.ci_low, study.ci_high) = wilson_interval(study.n_free, done, Z95)?;
    }
    Ok(study)
}

/// Square block of `size × size` vertices with lower-left vertex `(i0, j0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub i0: usize,
    pub j0: usize,
    pub size: usize,
}

impl Block {
    fn weights(&self, spec: &LatticeSpec) -> Vec<f64> {
        let mut w = vec![0.0; spec.vertex_count()];
        let share = 1.0 / (self.size * self.size) as f64;
        for j in self.j0..self.j0 + self.size {
            for i in self.i0..self.i0 + self.size {
                w[spec.vertex(i, j)] = share;
            }
        }
        w
    }

    fn overlaps(&self, other: &Block) -> bool {
        let apart = |s0: usize, s1: usize, o0: usize, o1: usize| s0 + s1 <= o0 || o0 + o1 <= s0;
        !(apart(self.i0, self.size, other.i0, other.size) || apart(self.j0, self.size, other.j0, other.size))
    }

    fn fits(&self, spec: &LatticeSpec) -> bool {
        self.size > 0 && self.i0 + self.size <= spec.width && self.j0 >= 1 && self.j0 + self.size <= spec.height
    }
}

/// Block-averaged covariance: sample estimate, exact lattice value and the
/// continuum quadrature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceCheck {
    pub empirical: f64,
    pub std_error: f64,
    pub lattice: f64,
    pub quadrature: f64,
    pub n_samples: u64,
}

impl CovarianceCheck {
    /// Passes when the sample estimate is within 3 standard errors of the
    /// quadrature value.
    pub fn report(&self) -> CheckReport {
        CheckReport::new(
            "dgff_covariance",
            (self.empirical - self.quadrature).abs() / (3.0 * self.std_error),
            1.0,
            format!(
                "empirical {:.5} ± {:.5}, lattice {:.5}, quadrature {:.5} over {} samples",
                self.empirical, self.std_error, self.lattice, self.quadrature, self.n_samples
            ),
        )
    }
}

/// Average of the mixed Green function over the cells represented by two
/// vertex blocks (each vertex stands for the unit grid square around it), by
/// tensor Gauss–Legendre quadrature of the given order per dimension.
///
/// The average is taken in grid coordinates: the Green function is conformally
/// invariant, so in the unfolded embedding it is evaluated at the images of
/// the grid points and no Jacobian enters.
pub fn block_green_quadrature(spec: &LatticeSpec, a: &Block, b: &Block, order: usize) -> Result<f64> {
    let order = NonZeroUsize::new(order).ok_or_else(|| Error::InvalidConfig("quadrature order must be positive".into()))?;
    let gl = GaussLegendre::new(order);
    let range = |start: usize, size: usize| (start as f64 - 0.5, (start + size) as f64 - 0.5);
    let (ax, ay) = (range(a.i0, a.size), range(a.j0, a.size));
    let (bx, by) = (range(b.i0, b.size), range(b.j0, b.size));
    let cfg = &spec.config;
    let mut failure = None;
    let total = gl.integrate(ax.0, ax.1, |x1| {
        gl.integrate(ay.0, ay.1, |y1| {
            let z = spec.to_plane(x1, y1);
            gl.integrate(bx.0, bx.1, |x2| {
                gl.integrate(by.0, by.1, |y2| match greens_mix(z, spec.to_plane(x2, y2), cfg.a()) {
                    Ok(g) => g,
                    Err(e) => {
                        failure = Some(e);
                        0.0
                    }
                })
            })
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(total / ((a.size * a.size) as f64 * (b.size * b.size) as f64))
}

/// Compares the sample covariance of two block averages of the fluctuation
/// with the exact lattice covariance and the continuum quadrature.
pub fn covariance_check(
    op: &LatticeOperator,
    a: &Block,
    b: &Block,
    n_samples: u64,
    seed_base: u64,
    workers: usize,
) -> Result<CovarianceCheck> {
    let spec = &op.spec;
    if !a.fits(spec) || !b.fits(spec) {
        return Err(Error::InvalidLattice("blocks must lie strictly above the bottom row inside the grid".into()));
    }
    if a.overlaps(b) {
        return Err(Error::InvalidLattice("blocks must be disjoint".into()));
    }
    if n_samples < 2 {
        return Err(Error::InvalidConfig("need at least 2 samples".into()));
    }
    let (wa, wb) = (a.weights(spec), b.weights(spec));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let products: Vec<f64> = pool.install(|| {
        (0..n_samples)
            .into_par_iter()
            .map(|s| {
                let f = op.sample_fluctuation(trajectory_seed(seed_base, s));
                let xa: f64 = f.iter().zip(&wa).map(|(x, w)| x * w).sum();
                let xb: f64 = f.iter().zip(&wb).map(|(x, w)| x * w).sum();
                xa * xb
            })
            .collect()
    });
    let n = n_samples as f64;
    let mean = products.iter().sum::<f64>() / n;
    let var = products.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(CovarianceCheck {
        empirical: mean,
        std_error: (var / n).sqrt(),
        lattice: op.covariance(&wa, &wb),
        quadrature: block_green_quadrature(spec, a, b, 6)?,
        n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn dense(m: &CscMatrix<f64>) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(m.nrows(), m.ncols());
        for (i, j, v) in m.triplet_iter() {
            d[(i, j)] += *v;
        }
        d
    }

    #[test]
    fn three_by_three_interior_matches_hand_built_laplacian() {
        // 4x4 cells: the 3x3 interior vertices are unknown, the frame is pinned to 1
        let (w, h) = (4, 4);
        let pinned: Vec<Option<f64>> = (0..25)
            .map(|v| {
                let (i, j) = (v % 5, v / 5);
                if i == 0 || j == 0 || i == w || j == h {
                    Some(1.0)
                } else {
                    None
                }
            })
            .collect();
        let lap = reduced_laplacian(w, h, &pinned).unwrap();
        let mut expected = DMatrix::<f64>::zeros(9, 9);
        for r in 0..3 {
            for c in 0..3 {
                let v = r * 3 + c;
                expected[(v, v)] = 4.0;
                if c > 0 {
                    expected[(v, v - 1)] = -1.0;
                }
                if c < 2 {
                    expected[(v, v + 1)] = -1.0;
                }
                if r > 0 {
                    expected[(v, v - 3)] = -1.0;
                }
                if r < 2 {
                    expected[(v, v + 3)] = -1.0;
                }
            }
        }
        assert_eq!(dense(&lap.precision), expected);
        // corner vertices see two pinned neighbours, edge midpoints one, the centre none
        assert_eq!(lap.rhs, vec![2.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn free_boundary_vertices_have_degree_three() {
        let cfg = BoundaryConfig::new(0.0, vec![1.0, 4.0], 1).unwrap();
        let spec = LatticeSpec::half_plane(&cfg, 16, 8, 0.5, -4.0, FarBoundary::DirichletZero).unwrap();
        let op = build_operator(&spec).unwrap();
        let q = dense(op.precision());
        // bottom vertex at x = -2 lies on the free arc
        let v = spec.vertex(4, 0);
        assert!(!op.is_pinned(v));
        let idx = op.laplacian.unknown[v].unwrap();
        assert_eq!(q[(idx, idx)], 3.0);
        // interior vertex keeps degree 4
        let idx = op.laplacian.unknown[spec.vertex(4, 3)].unwrap();
        assert_eq!(q[(idx, idx)], 4.0);
        // unfolded: the left column is free
        let spec = LatticeSpec::unfolded(&cfg, 16, 4.0, FarBoundary::Matched).unwrap();
        let op = build_operator(&spec).unwrap();
        let q = dense(op.precision());
        let idx = op.laplacian.unknown[spec.vertex(0, 5)].unwrap();
        assert_eq!(q[(idx, idx)], 3.0);
        let idx = op.laplacian.unknown[spec.vertex(0, 0)].unwrap();
        assert_eq!(q[(idx, idx)], 2.0);
    }

    #[test]
    fn all_free_grid_is_singular() {
        let pinned = vec![None; 16];
        assert!(matches!(reduced_laplacian(3, 3, &pinned), Err(Error::Singular(_))));
    }

    #[test]
    fn mean_is_discrete_harmonic_and_pins_boundary() {
        let cfg = BoundaryConfig::new(0.0, vec![1.0, 4.0], 1).unwrap();
        let spec = LatticeSpec::unfolded(&cfg, 24, 3.0, FarBoundary::Matched).unwrap();
        let op = build_operator(&spec).unwrap();
        let m = op.mean();
        for j in 1..spec.height {
            for i in 1..spec.width {
                let v = spec.vertex(i, j);
                let lap = 4.0 * m[v] - m[v - 1] - m[v + 1] - m[v - spec.width - 1] - m[v + spec.width + 1];
                assert!(lap.abs() < 1e-10);
            }
        }
        let lambda = cfg.lambda();
        // bottom arcs: (0,1) -> +λ, (1,4) -> -λ, (4,∞) -> +λ; u = i·h with h = 1/8
        assert_eq!(m[spec.vertex(4, 0)], lambda);
        assert_eq!(m[spec.vertex(12, 0)], -lambda);
        assert_eq!(m[spec.vertex(20, 0)], lambda);
        let sample = sample_field(&op, 3);
        for v in 0..spec.vertex_count() {
            if op.is_pinned(v) {
                assert_eq!(sample.values[v], m[v]);
            }
        }
    }

    #[test]
    fn covariance_is_symmetric_positive_definite() {
        let cfg = BoundaryConfig::new(0.0, vec![1.0, 4.0], 1).unwrap();
        let spec = LatticeSpec::half_plane(&cfg, 12, 12, 0.5, -1.0, FarBoundary::DirichletZero).unwrap();
        let op = build_operator(&spec).unwrap();
        let q = dense(op.precision());
        let cov = q.clone().try_inverse().unwrap();
        assert!((&cov - cov.transpose()).amax() < 1e-12);
        assert!(cov.symmetric_eigenvalues().min() > 0.0);
        // variance next to the pinned top edge is below that in the middle
        let n = spec.vertex_count();
        let unit = |v: usize| {
            let mut e = vec![0.0; n];
            e[v] = 1.0;
            e
        };
        let top = unit(spec.vertex(6, 11));
        let mid = unit(spec.vertex(6, 6));
        assert!(op.covariance(&top, &top) <= op.covariance(&mid, &mid));
        let idx = op.laplacian.unknown[spec.vertex(6, 6)].unwrap();
        assert!((op.covariance(&mid, &mid) - cov[(idx, idx)]).abs() < 1e-12);
    }

    #[test]
    fn sample_mean_matches_harmonic_extension() {
        let cfg = BoundaryConfig::new(0.0, vec![1.0, 4.0], 1).unwrap();
        let spec = LatticeSpec::unfolded(&cfg, 16, 4.0, FarBoundary::Matched).unwrap();
        let op = build_operator(&spec).unwrap();
        let v = spec.vertex(5, 3);
        let n = 4000;
        let mean: f64 = (0..n).map(|s| sample_field(&op, s).values[v]).sum::<f64>() / n as f64;
        let mut e = vec![0.0; spec.vertex_count()];
        e[v] = 1.0;
        let sd = op.covariance(&e, &e).sqrt();
        assert!((mean - op.mean()[v]).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    fn constant_field(spec: &LatticeSpec, f: impl Fn(usize, usize) -> f64) -> FieldSample {
        let mut values = Vec::new();
        for j in 0..=spec.height {
            for i in 0..=spec.width {
                values.push(f(i, j));
            }
        }
        FieldSample { width: spec.width, height: spec.height, values }
    }

    #[test]
    fn constructed_fields_end_where_expected() {
        let cfg = BoundaryConfig::new(0.0, vec![1.0, 4.0], 1).unwrap();
        let spec = LatticeSpec::half_plane(&cfg, 40, 20, 0.25, -4.0, FarBoundary::DirichletZero).unwrap();
        // x = -4 + i/4: b_1 = 1 sits at i = 20, a = 0 at i = 16, b_2 = 4 at i = 32.
        // Positive everywhere except a thin negative strip that runs up from
        // b_1, over, and down to the free arc at x = -2, plus the arc (b_1, b_2).
        let field = constant_field(&spec, |i, j| {
            if (j == 0 && i >= 20 && i < 32) || (j == 4 && (8..=20).contains(&i)) || (i == 20 && j <= 4) || (i == 8 && j <= 4) {
                -1.0
            } else {
                1.0
            }
        });
        let line = trace_level_line(&field, &spec, 1).unwrap();
        assert_eq!(line.end, LineEnd::FreeArc);
        assert!(line.points.iter().all(|p| p.im >= 0.0));

        // negative only on the arc (b_1, b_2): the line closes between them at b_2
        let field = constant_field(&spec, |i, j| if j == 0 && (20..32).contains(&i) { -1.0 } else { 1.0 });
        let line = trace_level_line(&field, &spec, 1).unwrap();
        assert_eq!(line.end, LineEnd::Point(2));
        let last = line.points.last().unwrap();
        assert!(last.re > 1.0 && last.re < 4.0 + spec.mesh && last.im == 0.0);

        // no sign change at the requested start
        let flat = constant_field(&spec, |_, _| 1.0);
        assert!(trace_level_line(&flat, &spec, 1).is_err());
    }

    #[test]
    fn saddle_cells_follow_the_bilinear_interpolant() {
        let cfg = BoundaryConfig::new(0.0, vec![0.5], 1).unwrap();
        let spec = LatticeSpec::half_plane(&cfg, 2, 2, 1.0, -0.5, FarBoundary::DirichletZero).unwrap();
        // cell (0,0) corners: (0,0)=+1, (1,0)=-1, (1,1)=+1, (0,1)=-1, strong positive centre
        let field = constant_field(&spec, |i, j| match (i, j) {
            (0, 0) => 1.0,
            (1, 0) => -1.0,
            (1, 1) => 3.0,
            (0, 1) => -1.0,
            _ => 1.0,
        });
        let line = trace_level_line(&field, &spec, 1).unwrap();
        // positive corners joined: entering at the bottom the line cuts off (1,0) and leaves right
        let second = line.points[1];
        assert!((second - Complex64::new(0.5, 0.25)).norm() < 1e-12, "{second}");
    }

    #[test]
    fn quadrature_matches_point_evaluation_for_small_blocks() {
        let cfg = BoundaryConfig::new(0.0, vec![1.0, 4.0], 1).unwrap();
        let spec = LatticeSpec::unfolded(&cfg, 64, 8.0, FarBoundary::Matched).unwrap();
        let a = Block { i0: 8, j0: 8, size: 1 };
        let b = Block { i0: 16, j0: 12, size: 1 };
        let q = block_green_quadrature(&spec, &a, &b, 6).unwrap();
        let g = greens_mix(spec.to_plane(8.0, 8.0), spec.to_plane(16.0, 12.0), 0.0).unwrap();
        assert!((q - g).abs() < 1e-3 * g.abs(), "{q} {g}");
    }

    #[test]
    fn resolution_counts_cells_between_marked_points() {
        let cfg = BoundaryConfig::new(0.0, vec![1.0, 4.0], 1).unwrap();
        let spec = LatticeSpec::unfolded(&cfg, 128, 8.0, FarBoundary::Matched).unwrap();
        assert!((spec.cells_per_gap() - 16.0).abs() < 1e-12);
    }
}
