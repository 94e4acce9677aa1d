//! Closed-form quantities attached to a boundary configuration.
//!
//! Everything here is a pure function of a [`BoundaryConfig`] (or of explicit
//! coordinates). The probability that the level line started at `b_k` ends on
//! the free arc is evaluated through the product
//!
//! ```text
//! g = Π_{i ∈ J_k} r_i / Π_{i ∈ I_k, i ≠ k} r_i,
//! r_i = |b_k - b_i| / (sqrt(b_i - a) + sqrt(b_k - a))^2
//! ```
//!
//! which is algebraically identical to the four-product form written with
//! `(1 ± sqrt(ratio))` factors, but has no cancellation when `a` is far away or
//! when two images are close together.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Amplitude of the alternating boundary data, `sqrt(pi / 8)`.
pub fn default_lambda() -> f64 {
    (PI / 8.0).sqrt()
}

/// Sign of the boundary data on the first Dirichlet arc `(a, b_1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    #[default]
    Plus,
    Minus,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Plus => 1.0,
            Polarity::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct RawBoundaryConfig {
    a: f64,
    b: Vec<f64>,
    k: usize,
    #[serde(default = "default_lambda")]
    lambda: f64,
    #[serde(default)]
    first_sign: Polarity,
}

/// Marked points `a < b_1 < … < b_n`, the start index `k` and the amplitude `λ`.
///
/// Indices are 1-based throughout the public API, matching the usual labelling
/// of the marked points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBoundaryConfig")]
pub struct BoundaryConfig {
    a: f64,
    b: Vec<f64>,
    k: usize,
    lambda: f64,
    first_sign: Polarity,
}

impl TryFrom<RawBoundaryConfig> for BoundaryConfig {
    type Error = Error;

    fn try_from(raw: RawBoundaryConfig) -> Result<Self> {
        BoundaryConfig::with_amplitude(raw.a, raw.b, raw.k, raw.lambda, raw.first_sign)
    }
}

impl BoundaryConfig {
    /// Configuration with the default amplitude and a `+λ` first arc.
    pub fn new(a: f64, b: Vec<f64>, k: usize) -> Result<Self> {
        Self::with_amplitude(a, b, k, default_lambda(), Polarity::Plus)
    }

    pub fn with_amplitude(
        a: f64,
        b: Vec<f64>,
        k: usize,
        lambda: f64,
        first_sign: Polarity,
    ) -> Result<Self> {
        if !a.is_finite() || b.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("coordinates must be finite".into()));
        }
        if b.is_empty() {
            return Err(Error::InvalidConfig("at least one point b_1 is required".into()));
        }
        if b[0] <= a {
            return Err(Error::InvalidConfig(format!("need a < b_1, got a = {a}, b_1 = {}", b[0])));
        }
        if let Some(w) = b.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "b must be strictly increasing (b_{} = {} >= b_{} = {})",
                w + 1,
                b[w],
                w + 2,
                b[w + 1]
            )));
        }
        if k == 0 || k > b.len() {
            return Err(Error::IndexOutOfRange { index: k, n: b.len() });
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self { a, b, k, lambda, first_sign })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.b.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn first_sign(&self) -> Polarity {
        self.first_sign
    }

    /// Starting point `b_k` of the level line.
    pub fn start(&self) -> f64 {
        self.b[self.k - 1]
    }

    pub fn parity(&self) -> ParitySplit {
        parity_split(self.n(), self.k).expect("validated config")
    }

    /// Smallest distance from `b_k` to a neighbouring marked point.
    pub fn start_gap(&self) -> f64 {
        let w = self.start();
        let left = if self.k == 1 { self.a } else { self.b[self.k - 2] };
        let mut gap = w - left;
        if self.k < self.n() {
            gap = gap.min(self.b[self.k] - w);
        }
        gap
    }

    /// Same configuration with the marked points mapped by `x -> scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Self> {
        Self::with_amplitude(
            scale * self.a + shift,
            self.b.iter().map(|x| scale * x + shift).collect(),
            self.k,
            self.lambda,
            self.first_sign,
        )
    }

    /// Boundary value of the harmonic function on `(b_i, b_{i+1})`, `b_0 = a`.
    pub fn arc_value(&self, i: usize) -> f64 {
        let parity = if i % 2 == 0 { 1.0 } else { -1.0 };
        self.first_sign.sign() * self.lambda * parity
    }
}

/// `I_k` (same parity as `k`, contains `k`) and `J_k` (the rest), both sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParitySplit {
    pub same: Vec<usize>,
    pub other: Vec<usize>,
}

impl ParitySplit {
    pub fn is_same(&self, i: usize) -> bool {
        self.same.binary_search(&i).is_ok()
    }
}

pub fn parity_split(n: usize, k: usize) -> Result<ParitySplit> {
    if k == 0 || k > n {
        return Err(Error::IndexOutOfRange { index: k, n });
    }
    let (same, other) = (1..=n).partition(|i| i % 2 == k % 2);
    Ok(ParitySplit { same, other })
}

/// `F(x, y, z) = 2 / (x - y) * sqrt((y - z) / (x - z))` for `z < x`, `z < y`, `x != y`.
pub fn force_term(x: f64, y: f64, z: f64) -> Result<f64> {
    if !(z < x && z < y) || x == y {
        return Err(Error::Domain(format!(
            "F(x, y, z) needs z < x, z < y and x != y; got ({x}, {y}, {z})"
        )));
    }
    Ok(force_term_unchecked(x, y, z))
}

#[inline]
pub(crate) fn force_term_unchecked(x: f64, y: f64, z: f64) -> f64 {
    2.0 / (x - y) * ((y - z) / (x - z)).sqrt()
}

/// One factor of the free-arc probability product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbabilityFactor {
    /// 1-based point index.
    pub index: usize,
    /// Whether `index` has the parity of `k`.
    pub same_parity: bool,
    /// The ratio under the square root: `(b_i - a)/(b_k - a)` if `i < k`,
    /// `(b_k - a)/(b_i - a)` if `i > k`.
    pub ratio: f64,
    pub value: f64,
}

/// `|b_k - b_i| / (sqrt(b_i - a) + sqrt(b_k - a))^2`, the `J`-type factor.
#[inline]
pub(crate) fn pair_ratio(a: f64, bk: f64, bi: f64) -> f64 {
    let s = (bi - a).sqrt() + (bk - a).sqrt();
    (bk - bi).abs() / (s * s)
}

/// Per-index factors of the free-arc probability, in index order, `k` omitted.
pub fn probability_factors(config: &BoundaryConfig) -> Vec<ProbabilityFactor> {
    let (a, k) = (config.a, config.k);
    let bk = config.start();
    config
        .b
        .iter()
        .enumerate()
        .map(|(idx, &bi)| (idx + 1, bi))
        .filter(|&(i, _)| i != k)
        .map(|(i, bi)| {
            let same_parity = i % 2 == k % 2;
            let ratio = if i < k { (bi - a) / (bk - a) } else { (bk - a) / (bi - a) };
            let r = pair_ratio(a, bk, bi);
            let value = if same_parity { 1.0 / r } else { r };
            ProbabilityFactor { index: i, same_parity, ratio, value }
        })
        .collect()
}

/// Probability that the level line from `b_k` terminates on the free arc `(-inf, a)`.
pub fn hit_free_arc_probability(config: &BoundaryConfig) -> f64 {
    free_arc_probability_raw(config.a, &config.b, config.k)
}

/// Same as [`hit_free_arc_probability`] on raw coordinates; `b` must be ordered
/// with `a < b_1`. Used on the moving images of the marked points.
pub fn free_arc_probability_raw(a: f64, b: &[f64], k: usize) -> f64 {
    log_free_arc_probability_raw(a, b, k).exp()
}

pub(crate) fn log_free_arc_probability_raw(a: f64, b: &[f64], k: usize) -> f64 {
    let bk = b[k - 1];
    let mut log_g = 0.0;
    for (idx, &bi) in b.iter().enumerate() {
        let i = idx + 1;
        if i == k {
            continue;
        }
        let lr = pair_ratio(a, bk, bi).ln();
        if i % 2 == k % 2 {
            log_g -= lr;
        } else {
            log_g += lr;
        }
    }
    log_g
}

fn check_increasing(b: &[f64]) -> Result<()> {
    if b.is_empty() {
        return Err(Error::InvalidConfig("empty point list".into()));
    }
    if b.iter().any(|x| !x.is_finite()) || b.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("b must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Limit of the free-arc probability as `a -> -inf` (all-Dirichlet boundary).
///
/// Each `J_k` factor decays like `|b_k - b_i| / (4A)` and each `I_k` factor
/// grows like `4A / |b_k - b_i|`. When `|J_k| = |I_k| - 1` the powers of `A`
/// cancel and the limit is `Π_J |b_k - b_i| / Π_{I \ k} |b_k - b_i|`; for
/// `k = 1` and odd `n` this is `(b_2-b_1)/(b_3-b_1) · … · (b_{n-1}-b_1)/(b_n-b_1)`.
/// Otherwise `|J_k| > |I_k| - 1` and the limit is zero.
pub fn dirichlet_limit_probability(b: &[f64], k: usize) -> Result<f64> {
    check_increasing(b)?;
    let split = parity_split(b.len(), k)?;
    if split.other.len() + 1 != split.same.len() {
        return Ok(0.0);
    }
    let bk = b[k - 1];
    let num: f64 = split.other.iter().map(|&i| (bk - b[i - 1]).abs()).product();
    let den: f64 = split
        .same
        .iter()
        .filter(|&&i| i != k)
        .map(|&i| (bk - b[i - 1]).abs())
        .product();
    Ok(num / den)
}

/// The free-arc probability evaluated with `a = -far`, `far` large.
pub fn dirichlet_limit_numeric(b: &[f64], k: usize, far: f64) -> Result<f64> {
    check_increasing(b)?;
    parity_split(b.len(), k)?;
    if !(-far < b[0]) {
        return Err(Error::Domain(format!("a = -{far} must lie left of b_1 = {}", b[0])));
    }
    Ok(free_arc_probability_raw(-far, b, k))
}

/// Square root with values in the closed upper half plane (cut along `[0, inf)`).
pub fn sqrt_upper(z: Complex64) -> Complex64 {
    let s = z.sqrt();
    if s.im < 0.0 {
        -s
    } else {
        s
    }
}

fn check_interior(z: Complex64, name: &str) -> Result<()> {
    if !(z.im > 0.0) || !z.re.is_finite() || !z.im.is_finite() {
        return Err(Error::Domain(format!("{name} = {z} is not in the open upper half plane")));
    }
    Ok(())
}

/// Dirichlet Green function of the upper half plane, `(1/2π) log |z - conj w| / |z - w|`.
pub fn greens_half_plane(z: Complex64, w: Complex64) -> f64 {
    ((z - w.conj()).norm() / (z - w).norm()).ln() / (2.0 * PI)
}

/// Green function with Dirichlet condition on `(a, inf)` and Neumann condition on `(-inf, a)`.
///
/// With `u = sqrt(z - a)`, `v = sqrt(w - a)` the defining cross ratio
/// `(u+v)(u-conj v) / ((u-v)(u+conj v))` equals
/// `(u+v)^2 (z - conj w) / ((z - w)(u + conj v)^2)`, which is what is evaluated:
/// the small differences `u - v`, `u - conj v` never get formed.
pub fn greens_mix(z: Complex64, w: Complex64, a: f64) -> Result<f64> {
    check_interior(z, "z")?;
    check_interior(w, "w")?;
    if z == w {
        return Err(Error::Domain("G_mix(z, w) is singular at z = w".into()));
    }
    let u = sqrt_upper(z - a);
    let v = sqrt_upper(w - a);
    let image = ((u + v).norm() / (u + v.conj()).norm()).ln();
    Ok(greens_half_plane(z, w) + image / PI)
}

/// Bounded harmonic function with data `first_sign · λ · (-1)^i` on `(b_i, b_{i+1})`
/// and zero normal derivative on `(-inf, a)`.
///
/// In the unfolded coordinate `u = sqrt(z - a)` the free arc is the positive
/// imaginary axis; reflecting the data evenly across it gives piecewise
/// constant Dirichlet data on the whole real `u`-line, whose harmonic
/// extension is a finite sum of arguments.
pub fn harmonic_phi(z: Complex64, config: &BoundaryConfig) -> Result<f64> {
    check_interior(z, "z")?;
    Ok(phi_unfolded(sqrt_upper(z - config.a), config))
}

/// Harmonic data extension evaluated at `u` in the closed upper half plane.
pub fn phi_unfolded(u: Complex64, config: &BoundaryConfig) -> f64 {
    let n = config.n();
    let mut h = config.arc_value(n);
    for i in 1..=n {
        let s = (config.b[i - 1] - config.a).sqrt();
        let jump = config.arc_value(i - 1) - config.arc_value(i);
        // breakpoint +s: left value v_{i-1}, right value v_i
        h += jump / PI * (u.im).atan2(u.re - s);
        // breakpoint -s: left value v_i, right value v_{i-1}
        h -= jump / PI * (u.im).atan2(u.re + s);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Free-arc probability written exactly as the four products with
    /// `(1 ± sqrt(ratio))` factors; test-only oracle.
    fn four_product_oracle(a: f64, b: &[f64], k: usize) -> f64 {
        let bk = b[k - 1];
        let mut g = 1.0;
        for (idx, &bi) in b.iter().enumerate() {
            let i = idx + 1;
            if i == k {
                continue;
            }
            let s = if i < k { ((bi - a) / (bk - a)).sqrt() } else { ((bk - a) / (bi - a)).sqrt() };
            if i % 2 == k % 2 {
                g *= (1.0 + s) / (1.0 - s);
            } else {
                g *= (1.0 - s) / (1.0 + s);
            }
        }
        g
    }

    #[test]
    fn parity_examples() {
        let s = parity_split(5, 2).unwrap();
        assert_eq!(s.same, vec![2, 4]);
        assert_eq!(s.other, vec![1, 3, 5]);
        let s = parity_split(1, 1).unwrap();
        assert_eq!(s.same, vec![1]);
        assert!(s.other.is_empty());
        let s = parity_split(4, 3).unwrap();
        assert_eq!(s.same, vec![1, 3]);
        assert_eq!(s.other, vec![2, 4]);
        assert!(parity_split(3, 0).is_err());
        assert!(parity_split(3, 4).is_err());
    }

    #[test]
    fn force_term_examples() {
        assert!((force_term(2.0, 1.0, 0.0).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((force_term(1.0, 4.0, 0.0).unwrap() + 4.0 / 3.0).abs() < 1e-15);
        assert!((force_term(4.0, 1.0, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let tiny = force_term(2.0, 1e-12, 0.0).unwrap();
        assert!(tiny > 0.0 && tiny < 1.1e-6);
        assert!(force_term(1.0, 1.0, 0.0).is_err());
        assert!(force_term(1.0, 2.0, 1.0).is_err());
        assert!(force_term(1.0, 2.0, 3.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BoundaryConfig::new(0.0, vec![1.0, 4.0], 1).is_ok());
        assert!(BoundaryConfig::new(1.0, vec![1.0, 4.0], 1).is_err());
        assert!(BoundaryConfig::new(0.0, vec![4.0, 1.0], 1).is_err());
        assert!(BoundaryConfig::new(0.0, vec![1.0, 1.0], 1).is_err());
        assert!(BoundaryConfig::new(0.0, vec![1.0, 4.0], 3).is_err());
        assert!(BoundaryConfig::new(0.0, vec![], 1).is_err());
        assert!(BoundaryConfig::with_amplitude(0.0, vec![1.0], 1, 0.0, Polarity::Plus).is_err());
        let err = serde_json::from_str::<BoundaryConfig>(r#"{"a":0,"b":[2,1],"k":1}"#);
        assert!(err.is_err());
        let cfg: BoundaryConfig = serde_json::from_str(r#"{"a":0,"b":[1,4],"k":1}"#).unwrap();
        assert_eq!(cfg.lambda(), default_lambda());
        assert_eq!(cfg.first_sign(), Polarity::Plus);
    }

    #[test]
    fn probability_examples() {
        let p = |a, b: &[f64], k| hit_free_arc_probability(&BoundaryConfig::new(a, b.to_vec(), k).unwrap());
        assert_eq!(p(0.0, &[1.0], 1), 1.0);
        assert_eq!(p(-3.5, &[7.25], 1), 1.0);
        assert!((p(0.0, &[1.0, 4.0], 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((p(0.0, &[1.0, 4.0, 9.0], 2) - 1.0 / 15.0).abs() < 1e-15);
        let g = p(0.0, &[1.0, 2.0, 5.0, 7.0], 1);
        assert!((g - four_product_oracle(0.0, &[1.0, 2.0, 5.0, 7.0], 1)).abs() < 1e-14);
        assert!((g - 0.2028).abs() < 5e-5, "{g}");
    }

    #[test]
    fn factors_multiply_to_probability() {
        let cfg = BoundaryConfig::new(-1.0, vec![0.5, 2.0, 3.0, 8.0, 9.5], 3).unwrap();
        let prod: f64 = probability_factors(&cfg).iter().map(|f| f.value).product();
        assert!((prod - hit_free_arc_probability(&cfg)).abs() < 1e-14);
        for f in probability_factors(&cfg) {
            assert!(f.ratio > 0.0 && f.ratio < 1.0);
            let s = f.ratio.sqrt();
            let naive = if f.same_parity { (1.0 + s) / (1.0 - s) } else { (1.0 - s) / (1.0 + s) };
            assert!((naive - f.value).abs() < 1e-13 * naive.max(1.0));
        }
    }

    #[test]
    fn dirichlet_limit_examples() {
        assert!((dirichlet_limit_probability(&[0.0, 1.0, 3.0], 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let num = dirichlet_limit_numeric(&[0.0, 1.0, 3.0], 1, 1e8).unwrap();
        assert!((num - 1.0 / 3.0).abs() < 1e-3 / 3.0);
        assert_eq!(dirichlet_limit_probability(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!(dirichlet_limit_numeric(&[0.0, 1.0], 1, 1e8).unwrap() < 1e-7);
        assert!(dirichlet_limit_probability(&[0.0, 2.0, 1.0], 1).is_err());
    }

    #[test]
    fn naive_dirichlet_evaluation_cancels() {
        // The (1 ± sqrt) form loses digits once a is far away; the ratio form does not.
        let far = 1e12;
        let naive = four_product_oracle(-far, &[0.0, 1.0, 3.0], 1);
        let stable = dirichlet_limit_numeric(&[0.0, 1.0, 3.0], 1, far).unwrap();
        assert!((3.0 * stable - 1.0).abs() < 1e-9);
        assert!((3.0 * naive - 1.0).abs() > 1e-5);
    }

    #[test]
    fn greens_mix_examples() {
        let (z, w) = (c(0.0, 1.0), c(0.0, 2.0));
        let g1 = greens_mix(z, w, 0.0).unwrap();
        let g2 = greens_mix(w, z, 0.0).unwrap();
        assert!((g1 - g2).abs() < 1e-15);
        let (u, v) = (sqrt_upper(z), sqrt_upper(w));
        let image = greens_half_plane(u, v) + greens_half_plane(u, -v.conj());
        assert!((g1 - image).abs() < 1e-14);
        // Dirichlet arc: vanishes as w approaches (a, inf)
        let near = greens_mix(c(1.0, 1.0), c(2.0, 1e-9), 0.0).unwrap();
        assert!(near.abs() < 1e-8);
        assert!(greens_mix(z, z, 0.0).is_err());
        assert!(greens_mix(c(1.0, 0.0), w, 0.0).is_err());
    }

    #[test]
    fn greens_mix_literal_cross_ratio() {
        // Literal Re log of the four-factor cross ratio.
        for &(z, w, a) in &[(c(0.3, 0.7), c(-1.2, 2.5), 0.1), (c(5.0, 0.01), c(-3.0, 4.0), 1.0)] {
            let (u, v) = (sqrt_upper(z - a), sqrt_upper(w - a));
            let ratio = (u + v) * (u - v.conj()) / ((u - v) * (u + v.conj()));
            let literal = ratio.ln().re / (2.0 * PI);
            assert!((literal - greens_mix(z, w, a).unwrap()).abs() < 1e-13);
        }
    }

    #[test]
    fn greens_mix_dirichlet_limit() {
        let (z, w) = (c(0.5, 1.0), c(-0.25, 0.5));
        let g = greens_mix(z, w, -1e8).unwrap();
        let gh = greens_half_plane(z, w);
        assert!(((g - gh) / gh).abs() < 1e-3);
    }

    #[test]
    fn sqrt_upper_branch() {
        assert_eq!(sqrt_upper(c(4.0, 0.0)), c(2.0, 0.0));
        assert!((sqrt_upper(c(-4.0, 0.0)) - c(0.0, 2.0)).norm() < 1e-15);
        let s = sqrt_upper(c(1.0, -1e-9));
        assert!(s.im >= 0.0 && s.re < 0.0);
        let s = sqrt_upper(c(-1.0, 1.0));
        assert!(s.im > 0.0 && s.re > 0.0);
    }

    fn sample_config() -> BoundaryConfig {
        BoundaryConfig::new(0.0, vec![1.0, 2.0, 5.0, 7.0], 2).unwrap()
    }

    #[test]
    fn phi_boundary_values() {
        let cfg = sample_config();
        let delta = 1e-7;
        for (x, arc) in [(0.5, 0), (1.5, 1), (3.0, 2), (6.0, 3), (20.0, 4)] {
            let v = harmonic_phi(c(x, delta), &cfg).unwrap();
            assert!((v - cfg.arc_value(arc)).abs() < 1e-5, "x={x}: {v}");
        }
        let minus = BoundaryConfig::with_amplitude(0.0, vec![1.0, 2.0], 1, 1.0, Polarity::Minus).unwrap();
        assert!((harmonic_phi(c(0.5, 1e-9), &minus).unwrap() + 1.0).abs() < 1e-6);
    }

    #[test]
    fn phi_neumann_on_free_arc() {
        let cfg = sample_config();
        let x = -1.5;
        // Centered difference across the unfolded free arc (the imaginary u-axis).
        let u0 = sqrt_upper(c(x - cfg.a(), 0.0));
        for delta in [1e-2, 1e-3] {
            let d = (phi_unfolded(u0 + delta, &cfg) - phi_unfolded(u0 - delta, &cfg)) / (2.0 * delta);
            assert!(d.abs() < 1e-12, "{d}");
        }
        // One-sided normal difference in the z-plane vanishes linearly.
        let slope = |delta: f64| {
            (harmonic_phi(c(x, 2.0 * delta), &cfg).unwrap() - harmonic_phi(c(x, delta), &cfg).unwrap()) / delta
        };
        let (s1, s2) = (slope(1e-3), slope(1e-4));
        assert!(s1.abs() < 1e-2 && s2.abs() < s1.abs() / 5.0, "{s1} {s2}");
    }

    #[test]
    fn phi_is_harmonic() {
        let cfg = sample_config();
        let h = 1e-3;
        for z in [c(0.3, 0.4), c(-2.0, 1.0), c(4.0, 0.2), c(10.0, 3.0)] {
            let f = |z: Complex64| harmonic_phi(z, &cfg).unwrap();
            let lap = (f(z + h) + f(z - h) + f(z + c(0.0, h)) + f(z - c(0.0, h)) - 4.0 * f(z)) / (h * h);
            assert!(lap.abs() < 1e-3, "{z}: {lap}");
            assert!(f(z).abs() <= cfg.lambda() + 1e-12);
        }
        assert!(harmonic_phi(c(1.0, 0.0), &cfg).is_err());
    }
}
