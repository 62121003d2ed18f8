//! Marchenko–Pastur null model, spiked covariance sampling and outlier logic.
//!
//! For an `n × p` matrix of i.i.d. entries with variance σ² and aspect
//! `c = p / n`, the spectrum of `(1/n) XᵀX` fills the bulk
//! `[σ²(1 − √c)², σ²(1 + √c)²]`. For `c > 1` a point mass `1 − 1/c` sits at
//! zero. The CDF is evaluated by adaptive Simpson quadrature after the change
//! of variables `λ = m − r·cos φ` (m, r the bulk midpoint and half-width),
//! which turns the square-root edge behaviour of the density into a smooth
//! integrand on `[0, π]`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::Rng64;

/// Absolute tolerance of the CDF quadrature.
pub const CDF_TOLERANCE: f64 = 1e-8;
/// Bracketing tolerance of quantile bisection.
pub const QUANTILE_TOLERANCE: f64 = 1e-8;
/// Default variance-initialization quantile.
pub const DEFAULT_FIT_QUANTILE: f64 = 0.5;

/// Fitted Marchenko–Pastur parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpModel {
    pub sigma_sq: f64,
    pub aspect: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
}

impl MpModel {
    pub fn new(sigma_sq: f64, aspect: f64) -> Result<Self> {
        let (lambda_minus, lambda_plus) = mp_bulk_edges(sigma_sq, aspect)?;
        Ok(Self {
            sigma_sq,
            aspect,
            lambda_minus,
            lambda_plus,
        })
    }

    /// Mass of the atom at zero (`1 − 1/c` for c > 1, else 0).
    pub fn point_mass(&self) -> f64 {
        (1.0 - 1.0 / self.aspect).max(0.0)
    }

    pub fn density(&self, lambda: f64) -> f64 {
        mp_density(lambda, self)
    }

    pub fn cdf(&self, lambda: f64) -> f64 {
        mp_cdf(lambda, self)
    }

    pub fn quantile(&self, p: f64) -> f64 {
        mp_quantile(p, self)
    }
}

/// Bulk edges `σ²(1 ∓ √c)²`.
pub fn mp_bulk_edges(sigma_sq: f64, aspect: f64) -> Result<(f64, f64)> {
    if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
        return Err(Error::Domain(format!("sigma_sq must be positive, got {sigma_sq}")));
    }
    if !(aspect > 0.0 && aspect.is_finite()) {
        return Err(Error::Domain(format!("aspect must be positive, got {aspect}")));
    }
    let s = aspect.sqrt();
    Ok((sigma_sq * (1.0 - s).powi(2), sigma_sq * (1.0 + s).powi(2)))
}

/// Absolutely continuous part of the MP density; zero outside the bulk.
pub fn mp_density(lambda: f64, model: &MpModel) -> f64 {
    if lambda <= model.lambda_minus || lambda >= model.lambda_plus || lambda <= 0.0 {
        return 0.0;
    }
    let num = ((model.lambda_plus - lambda) * (lambda - model.lambda_minus)).sqrt();
    num / (2.0 * PI * model.sigma_sq * model.aspect * lambda)
}

/// Density in the angle variable: `f(λ(φ)) · dλ/dφ`.
fn angular_density(phi: f64, model: &MpModel) -> f64 {
    let mid = 0.5 * (model.lambda_plus + model.lambda_minus);
    let half = 0.5 * (model.lambda_plus - model.lambda_minus);
    let lambda = mid - half * phi.cos();
    if lambda <= 0.0 {
        // Only reachable at φ = 0 when c = 1; the limit is finite.
        return half * 2.0 / (2.0 * PI * model.sigma_sq * model.aspect);
    }
    let s = phi.sin();
    half * half * s * s / (2.0 * PI * model.sigma_sq * model.aspect * lambda)
}

fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// Adaptive Simpson quadrature with Richardson correction.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (fa, fb) = (f(a), f(b));
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(fa, fm, fb, a, b);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(fa, flm, fm, a, m);
    let right = simpson(fm, frm, fb, m, b);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// MP cumulative distribution, including the atom at zero for c > 1.
pub fn mp_cdf(lambda: f64, model: &MpModel) -> f64 {
    if lambda < 0.0 {
        return 0.0;
    }
    let atom = model.point_mass();
    if lambda <= model.lambda_minus {
        return atom;
    }
    if lambda >= model.lambda_plus {
        return 1.0;
    }
    let mid = 0.5 * (model.lambda_plus + model.lambda_minus);
    let half = 0.5 * (model.lambda_plus - model.lambda_minus);
    let phi = ((mid - lambda) / half).clamp(-1.0, 1.0).acos();
    let mass = adaptive_simpson(&|t| angular_density(t, model), 0.0, phi, CDF_TOLERANCE);
    (atom + mass).clamp(0.0, 1.0)
}

/// Inverse CDF on `[λ₋, λ₊]`.
///
/// Bisection bracketing to 1e-8 (relative to λ₊), accelerated by Newton
/// steps on the density whenever they stay inside the bracket.
/// Probabilities at or below the zero atom map to 0.
pub fn mp_quantile(p: f64, model: &MpModel) -> f64 {
    mp_quantile_from(p, model, model.lambda_minus)
}

/// [`mp_quantile`] with a known lower bracket (e.g. the previous quantile
/// when inverting an increasing sequence of levels).
pub fn mp_quantile_from(p: f64, model: &MpModel, lower: f64) -> f64 {
    if p <= model.point_mass() {
        return 0.0;
    }
    if p >= 1.0 {
        return model.lambda_plus;
    }
    let tol = QUANTILE_TOLERANCE * model.lambda_plus.max(1.0);
    let (mut lo, mut hi) = (lower.max(model.lambda_minus), model.lambda_plus);
    let mut x = 0.5 * (lo + hi);
    while hi - lo > tol {
        let err = mp_cdf(x, model) - p;
        if err == 0.0 {
            return x;
        }
        if err < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = mp_density(x, model);
        let newton = x - err / slope;
        let step_ok = slope > 0.0 && newton > lo && newton < hi;
        let next = if step_ok { newton } else { 0.5 * (lo + hi) };
        if step_ok && (next - x).abs() <= 0.25 * tol {
            return next;
        }
        x = next;
    }
    0.5 * (lo + hi)
}

/// Probability level at which the q-th quantile of the nonzero part of a
/// spectrum sits: `q` itself for c ≤ 1, shifted past the zero atom otherwise.
pub fn effective_quantile_level(aspect: f64, quantile: f64) -> f64 {
    let atom = (1.0 - 1.0 / aspect).max(0.0);
    atom + quantile * (1.0 - atom)
}

/// Linear-interpolation (type 7) empirical quantile of an ascending slice.
pub fn empirical_quantile(ascending: &[f64], p: f64) -> f64 {
    let n = ascending.len();
    if n == 1 {
        return ascending[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    ascending[lo] + (h - lo as f64) * (ascending[hi] - ascending[lo])
}

fn check_descending(eigenvalues: &[f64]) -> Result<()> {
    if let Some(i) = eigenvalues.windows(2).position(|w| w[0] < w[1]) {
        return Err(Error::Contract(format!(
            "eigenvalues must be sorted descending (violated at index {i})"
        )));
    }
    Ok(())
}

fn validate_fit_inputs(eigenvalues: &[f64], aspect: f64, quantile: f64) -> Result<()> {
    if eigenvalues.len() < 8 {
        return Err(Error::Degenerate(format!(
            "need at least 8 eigenvalues to fit MP variance, got {}",
            eigenvalues.len()
        )));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Domain(format!("quantile must be in (0,1), got {quantile}")));
    }
    if !(aspect > 0.0 && aspect.is_finite()) {
        return Err(Error::Domain(format!("aspect must be positive, got {aspect}")));
    }
    if eigenvalues.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract("eigenvalues must be finite and nonnegative".into()));
    }
    check_descending(eigenvalues)
}

fn fit_with_unit_quantile(eigenvalues: &[f64], aspect: f64, level: f64, unit_q: f64) -> Result<MpModel> {
    let mut ascending = eigenvalues.to_vec();
    ascending.reverse();
    let empirical = empirical_quantile(&ascending, level);
    let mean = ascending.iter().sum::<f64>() / ascending.len() as f64;
    if mean <= 0.0 {
        return Err(Error::Degenerate("all eigenvalues are zero".into()));
    }
    // A rank-deficient spectrum can put the quantile on an exact zero.
    let sigma_sq = (empirical / unit_q).max(1e-12 * mean);
    MpModel::new(sigma_sq, aspect)
}

/// Quantile-initialized MP variance fit.
///
/// `σ² = Q_emp(q) / Q_MP(q; σ²=1, c)`, so a pure-noise spectrum returns
/// σ² ≈ 1. For `c > 1` the quantile is taken over the nonzero part of both
/// distributions (see [`effective_quantile_level`]). The estimate is floored
/// at `1e-12 · mean(λ)` so exactly low-rank spectra stay fittable.
pub fn fit_mp_sigma(eigenvalues: &[f64], aspect: f64, quantile: f64) -> Result<MpModel> {
    validate_fit_inputs(eigenvalues, aspect, quantile)?;
    let level = effective_quantile_level(aspect, quantile);
    let unit_q = mp_quantile(level, &MpModel::new(1.0, aspect)?);
    fit_with_unit_quantile(eigenvalues, aspect, level, unit_q)
}

/// Cache of unit-variance MP quantiles keyed by aspect and level, both
/// rounded to 1e-6. Serializes to JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct MpQuantileCache {
    entries: BTreeMap<String, BTreeMap<String, f64>>,
}

impl MpQuantileCache {
    fn key(x: f64) -> String {
        format!("{:.6}", x)
    }

    pub fn unit_quantile(&mut self, aspect: f64, level: f64) -> Result<f64> {
        let model = MpModel::new(1.0, aspect)?;
        let row = self.entries.entry(Self::key(aspect)).or_default();
        Ok(*row
            .entry(Self::key(level))
            .or_insert_with(|| mp_quantile(level, &model)))
    }

    /// [`fit_mp_sigma`] backed by this cache.
    pub fn fit(&mut self, eigenvalues: &[f64], aspect: f64, quantile: f64) -> Result<MpModel> {
        validate_fit_inputs(eigenvalues, aspect, quantile)?;
        let level = effective_quantile_level(aspect, quantile);
        let unit_q = self.unit_quantile(aspect, level)?;
        fit_with_unit_quantile(eigenvalues, aspect, level, unit_q)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Spike strength above which a sample eigenvalue leaves the bulk,
/// written as `σ²(1 + √c)`.
pub fn bbp_threshold(sigma_sq: f64, aspect: f64) -> f64 {
    sigma_sq * (1.0 + aspect.sqrt())
}

/// Number of eigenvalues strictly above `λ₊·(1 + margin)`.
pub fn count_outliers(eigenvalues: &[f64], model: &MpModel, margin: f64) -> Result<usize> {
    check_descending(eigenvalues)?;
    let edge = model.lambda_plus * (1.0 + margin);
    Ok(eigenvalues.iter().take_while(|&&v| v > edge).count())
}

/// One rank-one signal component of a spiked covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeSpec {
    pub strength: f64,
    pub direction: Vec<f64>,
}

/// Checks unit norms (1e-10) and pairwise orthogonality (1e-8).
pub fn validate_spikes(spikes: &[SpikeSpec], dim: usize) -> Result<()> {
    if spikes.len() > dim {
        return Err(Error::Contract(format!(
            "{} spikes do not fit in dimension {dim}",
            spikes.len()
        )));
    }
    for (i, s) in spikes.iter().enumerate() {
        if s.direction.len() != dim {
            return Err(Error::Contract(format!(
                "spike {i} direction has dimension {}, expected {dim}",
                s.direction.len()
            )));
        }
        if !(s.strength >= 0.0 && s.strength.is_finite()) {
            return Err(Error::Contract(format!("spike {i} strength {} invalid", s.strength)));
        }
        let norm = dot(&s.direction, &s.direction).sqrt();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::Contract(format!("spike {i} direction has norm {norm}")));
        }
        for (j, t) in spikes.iter().enumerate().skip(i + 1) {
            let ip = dot(&s.direction, &t.direction);
            if ip.abs() > 1e-8 {
                return Err(Error::Contract(format!(
                    "spike directions {i} and {j} not orthogonal (⟨u,v⟩ = {ip:.3e})"
                )));
            }
        }
    }
    Ok(())
}

/// `count` orthonormal directions in `dim` via Gram–Schmidt on Gaussian draws.
pub fn random_orthonormal(dim: usize, count: usize, rng: &mut Rng64) -> Vec<Vec<f64>> {
    assert!(count <= dim, "cannot draw {count} orthonormal vectors in {dim} dimensions");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        // Two passes of classical Gram–Schmidt keep orthogonality at 1e-15.
        for _ in 0..2 {
            for b in &basis {
                let ip = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= ip * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Spikes with the given strengths along freshly drawn orthonormal directions.
pub fn random_spikes(strengths: &[f64], dim: usize, rng: &mut Rng64) -> Vec<SpikeSpec> {
    random_orthonormal(dim, strengths.len(), rng)
        .into_iter()
        .zip(strengths)
        .map(|(direction, &strength)| SpikeSpec { strength, direction })
        .collect()
}

/// Writes one draw from `N(0, σ²I + Σ strengthᵢ uᵢuᵢᵀ)` into `out`.
///
/// Exactly `dim + spikes.len()` normals are consumed regardless of the
/// strengths, so streams with equal seeds stay aligned when strengths vary.
pub(crate) fn draw_spiked_row(
    out: &mut [f64],
    sigma: f64,
    spikes: &[SpikeSpec],
    strengths: &[f64],
    rng: &mut Rng64,
) {
    for x in out.iter_mut() {
        *x = sigma * rng.normal();
    }
    for (spike, &theta) in spikes.iter().zip(strengths) {
        let g = theta.sqrt() * rng.normal();
        for (x, u) in out.iter_mut().zip(&spike.direction) {
            *x += g * u;
        }
    }
}

/// `n` i.i.d. rows from the spiked population `σ²I + Σ θᵢuᵢuᵢᵀ`.
pub fn sample_spiked_population(
    n: usize,
    dim: usize,
    sigma_sq: f64,
    spikes: &[SpikeSpec],
    seed: u64,
) -> Result<Matrix> {
    if !(sigma_sq > 0.0) {
        return Err(Error::Domain(format!("sigma_sq must be positive, got {sigma_sq}")));
    }
    validate_spikes(spikes, dim)?;
    let mut rng = Rng64::new(seed);
    let sigma = sigma_sq.sqrt();
    let strengths: Vec<f64> = spikes.iter().map(|s| s.strength).collect();
    let mut m = Matrix::zeros(n, dim);
    for r in 0..n {
        draw_spiked_row(m.row_mut(r), sigma, spikes, &strengths, &mut rng);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sym_eig, window_spectrum, Window};

    fn model(s: f64, c: f64) -> MpModel {
        MpModel::new(s, c).unwrap()
    }

    #[test]
    fn bulk_edges_examples() {
        assert_eq!(mp_bulk_edges(1.0, 1.0).unwrap(), (0.0, 4.0));
        assert_eq!(mp_bulk_edges(1.0, 0.25).unwrap(), (0.25, 2.25));
        assert_eq!(mp_bulk_edges(2.0, 1.0).unwrap(), (0.0, 8.0));
        assert!(matches!(mp_bulk_edges(0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(mp_bulk_edges(1.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn density_examples() {
        assert!((mp_density(2.0, &model(1.0, 1.0)) - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert_eq!(mp_density(5.0, &model(1.0, 1.0)), 0.0);
        assert_eq!(mp_density(-1.0, &model(1.0, 0.5)), 0.0);
    }

    /// Independent oracle: composite Simpson in λ = u², which removes the
    /// square-root singularity at zero for c = 1.
    fn simpson_sqrt_substitution(m: &MpModel, upper: f64, panels: usize) -> f64 {
        let (a, b) = (m.lambda_minus.sqrt(), upper.sqrt());
        let h = (b - a) / panels as f64;
        // 2u·f(u²), written out so the oracle shares no code with mp_density.
        let g = |u: f64| {
            let upper = (m.lambda_plus - u * u).max(0.0).sqrt();
            let lower_over_u = if m.lambda_minus == 0.0 {
                1.0
            } else {
                (u * u - m.lambda_minus).max(0.0).sqrt() / u
            };
            upper * lower_over_u / (PI * m.sigma_sq * m.aspect)
        };
        let mut s = g(a) + g(b);
        for i in 1..panels {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * g(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn cdf_matches_oracles_at_two() {
        let m = model(1.0, 1.0);
        // Closed form for c = 1: F(x) = (2/π)(Θ + sinΘ cosΘ), sin²Θ = x/4.
        let analytic = 0.5 + 1.0 / PI;
        let oracle = simpson_sqrt_substitution(&m, 2.0, 20_000);
        assert!((oracle - analytic).abs() < 1e-8);
        assert!((mp_cdf(2.0, &m) - analytic).abs() < 1e-8);
    }

    #[test]
    fn cdf_edges() {
        let m = model(1.0, 0.25);
        assert!(mp_cdf(m.lambda_minus, &m).abs() < 1e-9);
        for (s, c) in [(1.0, 0.25), (2.0, 1.0), (0.5, 2.0), (1.0, 0.1)] {
            let m = model(s, c);
            assert!((mp_cdf(m.lambda_plus, &m) - 1.0).abs() < 1e-6);
            let just_below = m.lambda_plus * (1.0 - 1e-12);
            assert!((mp_cdf(just_below, &m) - 1.0).abs() < 1e-6);
        }
        let m = model(1.0, 2.0);
        assert_eq!(mp_cdf(-0.1, &m), 0.0);
        assert!((mp_cdf(0.0, &m) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn density_integrates_to_continuous_mass() {
        for s in [0.5, 1.0, 2.0] {
            for c in [0.1, 0.5, 1.0, 2.0] {
                let m = model(s, c);
                let mid = 0.5 * (m.lambda_plus + m.lambda_minus);
                let half = 0.5 * (m.lambda_plus - m.lambda_minus);
                let total = adaptive_simpson(&|t| angular_density(t, &m), 0.0, PI, 1e-10);
                let expected = if c <= 1.0 { 1.0 } else { 1.0 / c };
                assert!((total - expected).abs() < 1e-6, "s={s} c={c} total={total}");
                // Cross-check with the untransformed density away from edges.
                let plain = simpson_sqrt_substitution(&m, m.lambda_plus, 40_000);
                assert!((plain - expected).abs() < 1e-4, "plain {plain}");
                assert!(mid > 0.0 && half > 0.0);
            }
        }
    }

    #[test]
    fn cdf_monotone_on_grid() {
        for c in [0.1, 0.5, 1.0, 2.0] {
            let m = model(1.0, c);
            let mut prev = 0.0;
            for i in 0..=400 {
                let x = -0.5 + i as f64 * (m.lambda_plus + 1.0) / 400.0;
                let f = mp_cdf(x, &m);
                assert!(f >= prev - 1e-12, "c={c} x={x}");
                prev = f;
            }
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for c in [0.25, 1.0, 1.5] {
            let m = model(1.3, c);
            for p in [0.5, 0.7, 0.95] {
                let q = mp_quantile(p, &m);
                assert!((mp_cdf(q, &m) - p).abs() < 1e-6, "c={c} p={p}");
            }
        }
        assert_eq!(mp_quantile(0.2, &model(1.0, 2.0)), 0.0);
    }

    #[test]
    fn bbp_examples() {
        assert_eq!(bbp_threshold(1.0, 1.0), 2.0);
        assert_eq!(bbp_threshold(1.0, 0.25), 1.5);
        assert_eq!(bbp_threshold(2.0, 1.0), 4.0);
    }

    #[test]
    fn count_outliers_examples() {
        let m = model(1.0, 0.5);
        assert!((m.lambda_plus - 2.914213562373095).abs() < 1e-12);
        assert_eq!(count_outliers(&[5.0, 2.0, 1.0], &m, 0.0).unwrap(), 1);
        assert_eq!(count_outliers(&[2.9, 2.0, 1.0], &m, 0.0).unwrap(), 0);
        assert!(matches!(count_outliers(&[1.0, 2.0], &m, 0.0), Err(Error::Contract(_))));
    }

    fn noise_spectrum(n: usize, p: usize, seed: u64) -> Vec<f64> {
        let x = sample_spiked_population(n, p, 1.0, &[], seed).unwrap();
        window_spectrum(&Window::new(x).unwrap(), false, false)
            .unwrap()
            .eigenvalues
    }

    #[test]
    fn fit_recovers_unit_variance() {
        for seed in 0..5 {
            let eig = noise_spectrum(400, 200, seed);
            let fit = fit_mp_sigma(&eig, 0.5, 0.5).unwrap();
            assert!((0.93..=1.07).contains(&fit.sigma_sq), "seed {seed}: {}", fit.sigma_sq);
        }
    }

    #[test]
    fn fit_is_scale_equivariant() {
        let eig = noise_spectrum(300, 100, 3);
        let scaled: Vec<f64> = eig.iter().map(|v| 4.0 * v).collect();
        let a = fit_mp_sigma(&eig, 1.0 / 3.0, 0.5).unwrap();
        let b = fit_mp_sigma(&scaled, 1.0 / 3.0, 0.5).unwrap();
        assert!((b.sigma_sq - 4.0 * a.sigma_sq).abs() <= 1e-12 * b.sigma_sq);
    }

    #[test]
    fn fit_is_robust_to_planted_outliers() {
        let eig = noise_spectrum(300, 300, 21);
        let base = fit_mp_sigma(&eig, 1.0, 0.5).unwrap();
        let mut spiked = eig.clone();
        for v in spiked.iter_mut().take(3) {
            *v = 10.0 * base.lambda_plus;
        }
        let fit = fit_mp_sigma(&spiked, 1.0, 0.5).unwrap();
        assert!((fit.sigma_sq / base.sigma_sq - 1.0).abs() < 0.1);
    }

    #[test]
    fn fit_handles_wide_aspect() {
        // c = 4: only a quarter of the eigenvalues are nonzero.
        let eig = noise_spectrum(100, 400, 5);
        let fit = fit_mp_sigma(&eig, 4.0, 0.5).unwrap();
        assert!((0.85..=1.15).contains(&fit.sigma_sq), "{}", fit.sigma_sq);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_mp_sigma(&[3.0, 2.0, 1.0], 0.5, 0.5), Err(Error::Degenerate(_))));
        let eig = vec![1.0; 10];
        assert!(matches!(fit_mp_sigma(&eig, 0.5, 1.0), Err(Error::Domain(_))));
        assert!(matches!(fit_mp_sigma(&[0.0; 10], 0.5, 0.5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cache_matches_direct_fit_and_round_trips() {
        let eig = noise_spectrum(200, 100, 9);
        let mut cache = MpQuantileCache::default();
        let a = cache.fit(&eig, 0.5, 0.5).unwrap();
        let b = fit_mp_sigma(&eig, 0.5, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.len(), 1);
        let dir = std::env::temp_dir().join(format!("mpcache-{}.json", std::process::id()));
        cache.save(&dir).unwrap();
        assert_eq!(MpQuantileCache::load(&dir).unwrap(), cache);
        std::fs::remove_file(dir).ok();
    }

    #[test]
    fn pure_noise_rarely_has_outliers() {
        let mut clean = 0;
        for seed in 0..20 {
            let eig = noise_spectrum(1000, 100, 100 + seed);
            if count_outliers(&eig, &model(1.0, 0.1), 0.05).unwrap() == 0 {
                clean += 1;
            }
        }
        assert!(clean >= 18, "{clean}/20");
    }

    #[test]
    fn noise_sample_stays_in_bulk() {
        let m = model(1.0, 0.01);
        let mut inside = 0;
        for seed in 0..20 {
            let eig = noise_spectrum(5000, 50, seed);
            let eps = 0.15;
            if eig[0] <= m.lambda_plus + eps && *eig.last().unwrap() >= m.lambda_minus - eps {
                inside += 1;
            }
        }
        assert!(inside >= 18, "{inside}/20");
    }

    #[test]
    fn strong_spike_aligns_top_eigenvector() {
        let mut rng = Rng64::new(77);
        let spikes = random_spikes(&[10.0], 50, &mut rng);
        let x = sample_spiked_population(5000, 50, 1.0, &spikes, 4).unwrap();
        let spec = window_spectrum(&Window::new(x).unwrap(), false, true).unwrap();
        let v = spec.eigenvectors.unwrap().column(0);
        assert!(dot(&v, &spikes[0].direction).abs() >= 0.9);
    }

    #[test]
    fn spiked_sample_is_centered() {
        let x = sample_spiked_population(4000, 10, 1.0, &[], 12).unwrap();
        let bound = 5.0 / (4000f64).sqrt();
        for j in 0..10 {
            let mean = x.column(j).iter().sum::<f64>() / 4000.0;
            assert!(mean.abs() < bound);
        }
    }

    #[test]
    fn non_orthonormal_spikes_rejected() {
        let spikes = vec![
            SpikeSpec { strength: 1.0, direction: vec![1.0, 0.0, 0.0] },
            SpikeSpec { strength: 1.0, direction: vec![0.6, 0.8, 0.0] },
        ];
        assert!(matches!(
            sample_spiked_population(10, 3, 1.0, &spikes, 0),
            Err(Error::Contract(_))
        ));
        let bad_norm = vec![SpikeSpec { strength: 1.0, direction: vec![1.0, 1.0, 0.0] }];
        assert!(validate_spikes(&bad_norm, 3).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_spiked_population(20, 5, 1.0, &[], 3).unwrap();
        let b = sample_spiked_population(20, 5, 1.0, &[], 3).unwrap();
        assert_eq!(a, b);
        let _ = sym_eig(&a.t_matmul(&a).unwrap(), false).unwrap();
    }
}
