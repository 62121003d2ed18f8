//! Spectral descriptors of a windowed activation matrix.
//!
//! A descriptor summarizes one window's covariance spectrum with ten numbers:
//! dispersion (entropy), concentration (leading mass), eigengaps, divergence
//! from a Marchenko–Pastur baseline (histogram KL and Wasserstein-1), the
//! outlier count and the top eigenvalue. The serialized order is fixed by
//! [`FEATURE_NAMES`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{window_spectrum, Window};
use crate::rmt::{count_outliers, mp_quantile_from, MpModel};

/// Serialized feature order.
pub const FEATURE_NAMES: [&str; DESCRIPTOR_DIM] = [
    "entropy",
    "entropy_normalized",
    "leading_mass_1",
    "leading_mass_k",
    "max_eigengap_ratio",
    "top_gap_ratio",
    "kl_to_mp",
    "wasserstein_to_mp",
    "outlier_count",
    "top_eigenvalue",
];

pub const DESCRIPTOR_DIM: usize = 10;

/// Number of MP quantile points used by the Wasserstein grid.
pub const WASSERSTEIN_QUANTILE_POINTS: usize = 512;

const KL_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// k of `leading_mass_k`.
    pub leading_k: usize,
    /// Histogram bins of the KL estimate.
    pub bins: usize,
    /// Floor applied to eigenvalues before taking gap ratios.
    pub gap_floor: f64,
    /// Relative margin above λ₊ for the outlier count.
    pub outlier_margin: f64,
    /// Mean-center window columns before forming the covariance.
    pub centered: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            leading_k: 5,
            bins: 32,
            gap_floor: 1e-12,
            outlier_margin: 0.0,
            centered: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralDescriptor {
    pub entropy: f64,
    pub entropy_normalized: f64,
    pub leading_mass_1: f64,
    pub leading_mass_k: f64,
    pub max_eigengap_ratio: f64,
    pub top_gap_ratio: f64,
    pub kl_to_mp: f64,
    pub wasserstein_to_mp: f64,
    pub outlier_count: usize,
    pub top_eigenvalue: f64,
}

impl SpectralDescriptor {
    pub fn to_vector(&self) -> [f64; DESCRIPTOR_DIM] {
        [
            self.entropy,
            self.entropy_normalized,
            self.leading_mass_1,
            self.leading_mass_k,
            self.max_eigengap_ratio,
            self.top_gap_ratio,
            self.kl_to_mp,
            self.wasserstein_to_mp,
            self.outlier_count as f64,
            self.top_eigenvalue,
        ]
    }

    pub fn from_vector(v: &[f64; DESCRIPTOR_DIM]) -> Self {
        Self {
            entropy: v[0],
            entropy_normalized: v[1],
            leading_mass_1: v[2],
            leading_mass_k: v[3],
            max_eigengap_ratio: v[4],
            top_gap_ratio: v[5],
            kl_to_mp: v[6],
            wasserstein_to_mp: v[7],
            outlier_count: v[8].round().max(0.0) as usize,
            top_eigenvalue: v[9],
        }
    }
}

/// Shannon entropy (nats) of the normalized positive spectrum, and the same
/// value divided by `ln(#positive)`.
pub fn spectral_entropy(eigenvalues: &[f64]) -> Result<(f64, f64)> {
    let positive: Vec<f64> = eigenvalues.iter().copied().filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::Degenerate("spectrum has no positive eigenvalue".into()));
    }
    if positive.len() == 1 {
        return Ok((0.0, 0.0));
    }
    let total: f64 = positive.iter().sum();
    let h = -positive
        .iter()
        .map(|v| {
            let p = v / total;
            p * p.ln()
        })
        .sum::<f64>();
    let h = h.max(0.0);
    Ok((h, (h / (positive.len() as f64).ln()).clamp(0.0, 1.0)))
}

/// Share of total mass held by the `k` largest eigenvalues.
pub fn leading_mass(eigenvalues: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("leading_mass needs k ≥ 1".into()));
    }
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("spectrum has zero total mass".into()));
    }
    if k >= eigenvalues.len() {
        return Ok(1.0);
    }
    let head: f64 = eigenvalues[..k].iter().sum();
    Ok((head / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigengaps {
    pub max_ratio: f64,
    pub argmax: usize,
    pub top_ratio: f64,
}

/// Ratios `max(λᵢ, floor) / max(λᵢ₊₁, floor)` of a descending spectrum.
pub fn eigengaps(eigenvalues: &[f64], floor: f64) -> Result<Eigengaps> {
    if eigenvalues.len() < 2 {
        return Err(Error::Degenerate("eigengaps need at least 2 eigenvalues".into()));
    }
    if let Some(i) = eigenvalues.windows(2).position(|w| w[0] < w[1]) {
        return Err(Error::Contract(format!(
            "eigenvalues must be sorted descending (violated at index {i})"
        )));
    }
    let ratio = |i: usize| eigenvalues[i].max(floor) / eigenvalues[i + 1].max(floor);
    let mut best = Eigengaps {
        max_ratio: ratio(0),
        argmax: 0,
        top_ratio: ratio(0),
    };
    for i in 1..eigenvalues.len() - 1 {
        let r = ratio(i);
        if r > best.max_ratio {
            best.max_ratio = r;
            best.argmax = i;
        }
    }
    Ok(best)
}

/// MP mass per histogram bin; the zero atom (c > 1) lands in the first bin.
pub fn mp_bin_masses(model: &MpModel, upper: f64, bins: usize) -> Vec<f64> {
    let width = upper / bins as f64;
    let mut prev = 0.0;
    (1..=bins)
        .map(|i| {
            let edge = if i == bins { upper } else { i as f64 * width };
            let f = model.cdf(edge);
            let mass = (f - prev).max(0.0);
            prev = f;
            mass
        })
        .collect()
}

/// `Σ P ln(P/Q)` after additive ε-smoothing and renormalization of both.
pub fn kl_binned(p: &[f64], q: &[f64]) -> f64 {
    let smooth = |v: &[f64]| {
        let total: f64 = v.iter().map(|x| x + KL_SMOOTHING).sum();
        v.iter().map(|x| (x + KL_SMOOTHING) / total).collect::<Vec<_>>()
    };
    let (p, q) = (smooth(p), smooth(q));
    p.iter()
        .zip(&q)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Histogram KL(empirical ‖ MP) with per-value weights.
///
/// Bins are equal-width on `[0, max(λ₊, v_max) · 1.05]`, where `v_max` is the
/// largest value carrying positive weight.
pub fn kl_to_mp_weighted(values: &[f64], weights: &[f64], model: &MpModel, bins: usize) -> Result<f64> {
    if bins < 8 {
        return Err(Error::Config(format!("kl_to_mp needs at least 8 bins, got {bins}")));
    }
    if values.len() != weights.len() || values.is_empty() {
        return Err(Error::Contract("values and weights must be nonempty and equal length".into()));
    }
    let top = values
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&v, _)| v)
        .fold(0.0, f64::max);
    let upper = model.lambda_plus.max(top) * 1.05;
    let width = upper / bins as f64;
    let mut hist = vec![0.0; bins];
    for (&v, &w) in values.iter().zip(weights) {
        let idx = ((v.max(0.0) / width).floor() as usize).min(bins - 1);
        hist[idx] += w;
    }
    let total: f64 = hist.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("histogram has zero total weight".into()));
    }
    hist.iter_mut().for_each(|h| *h /= total);
    Ok(kl_binned(&hist, &mp_bin_masses(model, upper, bins)))
}

/// Histogram KL divergence of the eigenvalue distribution from the MP law.
pub fn kl_to_mp(eigenvalues: &[f64], model: &MpModel, bins: usize) -> Result<f64> {
    kl_to_mp_weighted(eigenvalues, &vec![1.0; eigenvalues.len()], model, bins)
}

/// An MP baseline with its quantile grid precomputed, so repeated
/// Wasserstein evaluations against one frozen baseline stay cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct MpReference {
    pub model: MpModel,
    /// (location, CDF value) pairs: bulk edges, the atom and the quantile grid.
    knots: Vec<(f64, f64)>,
}

impl MpReference {
    pub fn new(model: MpModel) -> Self {
        let atom = model.point_mass();
        let mut knots = vec![(model.lambda_minus, atom), (model.lambda_plus, 1.0)];
        if atom > 0.0 {
            knots.push((0.0, atom));
        }
        let n = WASSERSTEIN_QUANTILE_POINTS;
        let mut lo = model.lambda_minus;
        for i in 1..n {
            let p = i as f64 / n as f64;
            if p <= atom {
                continue;
            }
            let x = mp_quantile_from(p, &model, lo);
            lo = x;
            knots.push((x, model.cdf(x)));
        }
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        knots.dedup_by(|a, b| a.0 == b.0);
        Self { model, knots }
    }

    /// W₁ between the empirical distribution of `values` and the MP law.
    pub fn wasserstein(&self, values: &[f64]) -> Result<f64> {
        if values.is_empty() {
            return Err(Error::Degenerate("Wasserstein needs at least one value".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;

        // Merge eigenvalue jump points with the MP knots.
        let mut grid: Vec<(f64, f64)> = Vec::with_capacity(self.knots.len() + sorted.len());
        grid.extend_from_slice(&self.knots);
        for &v in &sorted {
            grid.push((v, self.model.cdf(v)));
        }
        grid.sort_by(|a, b| a.0.total_cmp(&b.0));
        grid.dedup_by(|a, b| a.0 == b.0);

        let mut below = 0usize;
        let mut total = 0.0;
        for pair in grid.windows(2) {
            let (x0, f0) = pair[0];
            let (x1, f1) = pair[1];
            while below < sorted.len() && sorted[below] <= x0 {
                below += 1;
            }
            // The empirical CDF is constant on [x0, x1).
            let fe = below as f64 / n;
            total += 0.5 * ((fe - f0).abs() + (fe - f1).abs()) * (x1 - x0);
        }
        Ok(total)
    }
}

/// Wasserstein-1 distance between the eigenvalue distribution and the MP law.
pub fn wasserstein_to_mp(eigenvalues: &[f64], model: &MpModel) -> Result<f64> {
    MpReference::new(*model).wasserstein(eigenvalues)
}

/// Descriptor of a window against a frozen MP baseline.
///
/// Entropy, leading mass, KL, Wasserstein and the outlier count use all `d`
/// eigenvalues (structural zeros included). Eigengaps use the strictly
/// positive part, since ratios across structural zeros only measure the
/// window's rank.
pub fn build_descriptor(
    window: &Window,
    baseline: &MpReference,
    config: &FeatureConfig,
) -> Result<SpectralDescriptor> {
    let spectrum = window_spectrum(window, config.centered, false)?;
    descriptor_from_eigenvalues(&spectrum.eigenvalues, baseline, config)
}

pub fn descriptor_from_eigenvalues(
    eig: &[f64],
    baseline: &MpReference,
    config: &FeatureConfig,
) -> Result<SpectralDescriptor> {
    let (entropy, entropy_normalized) = spectral_entropy(eig)?;
    let leading_mass_1 = leading_mass(eig, 1)?;
    let leading_mass_k = leading_mass(eig, config.leading_k)?;
    let positive = eig.iter().take_while(|&&v| v > 0.0).count();
    let gaps = if positive >= 2 {
        eigengaps(&eig[..positive], config.gap_floor)?
    } else {
        eigengaps(eig, config.gap_floor)?
    };
    let model = &baseline.model;
    let descriptor = SpectralDescriptor {
        entropy,
        entropy_normalized,
        leading_mass_1,
        leading_mass_k,
        max_eigengap_ratio: gaps.max_ratio,
        top_gap_ratio: gaps.top_ratio,
        kl_to_mp: kl_to_mp(eig, model, config.bins)?,
        wasserstein_to_mp: baseline.wasserstein(eig)?,
        outlier_count: count_outliers(eig, model, config.outlier_margin)?,
        top_eigenvalue: eig[0],
    };
    if descriptor.to_vector().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite descriptor {descriptor:?}")));
    }
    Ok(descriptor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::rmt::{random_spikes, sample_spiked_population};
    use crate::rng::Rng64;
    use proptest::prelude::*;

    fn mp(s: f64, c: f64) -> MpModel {
        MpModel::new(s, c).unwrap()
    }

    /// i.i.d. draws from the MP law by inverse-CDF sampling.
    fn mp_draws(model: &MpModel, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = Rng64::new(seed);
        let mut v: Vec<f64> = (0..n).map(|_| model.quantile(rng.uniform())).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    #[test]
    fn entropy_examples() {
        let (h, n) = spectral_entropy(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-15 && (n - 1.0).abs() < 1e-15);
        assert_eq!(spectral_entropy(&[7.0, 0.0, 0.0]).unwrap(), (0.0, 0.0));
        let (h, n) = spectral_entropy(&[2.0, 1.0, 1.0]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * 4f64.ln();
        assert!((h - expected).abs() < 1e-15);
        assert!((n - expected / 3f64.ln()).abs() < 1e-15);
        assert!((h - 1.03972).abs() < 1e-5 && (n - 0.94639).abs() < 1e-5);
        assert!(matches!(spectral_entropy(&[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn leading_mass_examples() {
        assert!((leading_mass(&[4.0, 3.0, 2.0, 1.0], 2).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(leading_mass(&[4.0, 3.0], 5).unwrap(), 1.0);
        assert_eq!(leading_mass(&[5.0, 0.0, 0.0], 1).unwrap(), 1.0);
        assert!(matches!(leading_mass(&[0.0, 0.0], 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn eigengap_examples() {
        let g = eigengaps(&[8.0, 2.0, 1.0], 1e-12).unwrap();
        assert_eq!((g.max_ratio, g.argmax, g.top_ratio), (4.0, 0, 4.0));
        let g = eigengaps(&[4.0, 4.0, 4.0], 1e-12).unwrap();
        assert_eq!((g.max_ratio, g.top_ratio), (1.0, 1.0));
        let g = eigengaps(&[9.0, 3.0, 1e-15], 1e-12).unwrap();
        assert_eq!(g.argmax, 1);
        assert!((g.max_ratio - 3e12).abs() < 1.0);
        assert!(matches!(eigengaps(&[1.0], 1e-12), Err(Error::Degenerate(_))));
    }

    #[test]
    fn kl_of_mp_samples_is_small() {
        let m = mp(1.0, 0.5);
        for seed in 0..20 {
            let v = mp_draws(&m, 2000, seed);
            let kl = kl_to_mp(&v, &m, 32).unwrap();
            assert!(kl <= 0.05, "seed {seed}: {kl}");
        }
    }

    #[test]
    fn kl_far_outside_bulk_is_large() {
        let kl = kl_to_mp(&[10.0; 100], &mp(1.0, 0.5), 32).unwrap();
        assert!(kl >= 5.0, "{kl}");
    }

    #[test]
    fn kl_self_distance_is_zero() {
        let m = mp(1.0, 0.5);
        let bins = 32;
        let upper = m.lambda_plus * 1.05;
        let q = mp_bin_masses(&m, upper, bins);
        let width = upper / bins as f64;
        // One representative per bin: its center, or λ₊ itself for the bin
        // holding the edge, so the histogram range is unchanged.
        let centers: Vec<f64> = (0..bins)
            .map(|i| ((i as f64 + 0.5) * width).min(m.lambda_plus))
            .collect();
        let kl = kl_to_mp_weighted(&centers, &q, &m, bins).unwrap();
        assert!(kl.abs() <= 1e-9, "{kl}");
        assert!(kl_binned(&q, &q).abs() <= 1e-12);
    }

    #[test]
    fn kl_needs_enough_bins() {
        assert!(matches!(kl_to_mp(&[1.0], &mp(1.0, 0.5), 4), Err(Error::Config(_))));
    }

    #[test]
    fn wasserstein_of_mp_samples_is_small() {
        let m = mp(1.0, 0.5);
        let reference = MpReference::new(m);
        for seed in 0..20 {
            let v = mp_draws(&m, 4000, seed);
            let w = reference.wasserstein(&v).unwrap();
            assert!(w <= 0.03, "seed {seed}: {w}");
        }
    }

    #[test]
    fn wasserstein_translation_beyond_bulk() {
        let m = mp(1.0, 0.5);
        let w0 = wasserstein_to_mp(&[m.lambda_plus + 0.5], &m).unwrap();
        let w1 = wasserstein_to_mp(&[m.lambda_plus + 1.0], &m).unwrap();
        assert!((w1 - w0 - 0.5).abs() < 1e-12, "{w0} {w1}");
    }

    #[test]
    fn wasserstein_of_quantile_grid_is_tiny() {
        let m = mp(1.0, 0.5);
        let n = 512;
        let grid: Vec<f64> = (0..n).map(|i| m.quantile((i as f64 + 0.5) / n as f64)).collect();
        let w = wasserstein_to_mp(&grid, &m).unwrap();
        assert!(w <= 2e-3, "{w}");
    }

    #[test]
    fn wasserstein_handles_zero_atom() {
        // c = 2: half of a pure-noise spectrum sits at zero.
        let m = mp(1.0, 2.0);
        let mut v = mp_draws(&m, 4000, 5);
        v.sort_by(|a, b| b.total_cmp(a));
        assert!(v.iter().filter(|&&x| x == 0.0).count() > 1800);
        assert!(wasserstein_to_mp(&v, &m).unwrap() < 0.05);
        assert!(kl_to_mp(&v, &m, 32).unwrap() < 0.05);
    }

    fn noise_window(n: usize, d: usize, seed: u64) -> Window {
        Window::new(sample_spiked_population(n, d, 1.0, &[], seed).unwrap()).unwrap()
    }

    #[test]
    fn noise_windows_look_like_mp() {
        let reference = MpReference::new(mp(1.0, 0.5));
        let cfg = FeatureConfig::default();
        let mut clean = 0;
        let (mut kl_noise, mut kl_spiked) = (0.0, 0.0);
        for seed in 0..20 {
            let noise = build_descriptor(&noise_window(30, 15, seed), &reference, &cfg).unwrap();
            if noise.outlier_count == 0 {
                clean += 1;
            }
            let mut rng = Rng64::new(seed);
            let spikes = random_spikes(&[25.0], 15, &mut rng);
            let x = sample_spiked_population(30, 15, 1.0, &spikes, seed).unwrap();
            let spiked = build_descriptor(&Window::new(x).unwrap(), &reference, &cfg).unwrap();
            kl_noise += noise.kl_to_mp / 20.0;
            kl_spiked += spiked.kl_to_mp / 20.0;
            assert!(noise.wasserstein_to_mp < spiked.wasserstein_to_mp, "seed {seed}");
        }
        // 15 eigenvalues over 32 bins make single-window KL noisy.
        assert!(kl_noise < kl_spiked, "{kl_noise} vs {kl_spiked}");
        // Edge fluctuations at N = 30 push λ_max past λ₊ in roughly one
        // window in five (16/20 clean for these seeds, ~80% over 200).
        assert!(clean >= 15, "{clean}/20");
    }

    #[test]
    fn planted_direction_concentrates_mass() {
        let reference = MpReference::new(mp(1.0, 0.5));
        let cfg = FeatureConfig::default();
        for seed in 0..20 {
            let mut rng = Rng64::new(seed);
            let spikes = random_spikes(&[25.0], 15, &mut rng);
            let x = sample_spiked_population(30, 15, 1.0, &spikes, seed).unwrap();
            let d = build_descriptor(&Window::new(x).unwrap(), &reference, &cfg).unwrap();
            assert!(d.leading_mass_1 >= 0.5, "seed {seed}: {d:?}");
            assert!(d.outlier_count >= 1);
        }
    }

    #[test]
    fn duplicated_rows_give_same_descriptor() {
        let reference = MpReference::new(mp(1.0, 4.0 / 3.0));
        let cfg = FeatureConfig::default();
        let w = noise_window(30, 40, 3);
        let mut doubled = w.matrix().data.clone();
        doubled.extend_from_slice(&w.matrix().data);
        let w2 = Window::new(Matrix::from_vec(60, 40, doubled).unwrap()).unwrap();
        let a = build_descriptor(&w, &reference, &cfg).unwrap().to_vector();
        let b = build_descriptor(&w2, &reference, &cfg).unwrap().to_vector();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{a:?}\n{b:?}");
        }
    }

    #[test]
    fn descriptor_is_deterministic() {
        let reference = MpReference::new(mp(1.0, 0.5));
        let cfg = FeatureConfig::default();
        let w = noise_window(30, 15, 8);
        let a = build_descriptor(&w, &reference, &cfg).unwrap();
        let b = build_descriptor(&w, &reference, &cfg).unwrap();
        assert_eq!(
            a.to_vector().map(f64::to_bits),
            b.to_vector().map(f64::to_bits)
        );
        assert_eq!(SpectralDescriptor::from_vector(&a.to_vector()), a);
    }

    fn spectrum_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..100.0, 2..40).prop_map(|mut v| {
            v.sort_by(|a, b| b.total_cmp(a));
            v
        })
    }

    proptest! {
        #[test]
        fn entropy_is_scale_invariant(v in spectrum_strategy(), alpha in 0.01f64..100.0) {
            let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
            let (h1, n1) = spectral_entropy(&v).unwrap();
            let (h2, n2) = spectral_entropy(&scaled).unwrap();
            prop_assert!((h1 - h2).abs() < 1e-10);
            prop_assert!((n1 - n2).abs() < 1e-10);
            prop_assert!((0.0..=1.0).contains(&n1));
        }

        #[test]
        fn leading_mass_monotone_in_k(v in spectrum_strategy()) {
            let mut prev = 0.0;
            for k in 1..=v.len() + 1 {
                let m = leading_mass(&v, k).unwrap();
                prop_assert!(m >= prev - 1e-15 && m <= 1.0);
                prev = m;
            }
        }

        #[test]
        fn gap_ratios_ordered(v in spectrum_strategy()) {
            let g = eigengaps(&v, 1e-12).unwrap();
            prop_assert!(g.max_ratio >= g.top_ratio && g.top_ratio >= 1.0);
        }

        #[test]
        fn divergences_nonnegative(v in spectrum_strategy()) {
            let m = mp(1.0, 0.5);
            prop_assert!(kl_to_mp(&v, &m, 32).unwrap() >= 0.0);
            prop_assert!(wasserstein_to_mp(&v, &m).unwrap() >= 0.0);
        }
    }
}
