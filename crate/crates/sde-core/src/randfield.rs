//! Random hydraulic conductivity fields.
//!
//! The conductivity tensor is diagonal, `K = diag(k11, k22)`, with entries
//! given either by prescribed constants or by a truncated Karhunen–Loève
//! expansion that varies in the vertical coordinate only:
//!
//! ```text
//! k(y, ω) = a0 + σ √λ0 Y0 + Σ_{i=1..nf} σ √λi [ Y_i cos(iπy) + Y_{nf+i} sin(iπy) ]
//! λ0 = √(π Lc) / 2,   λi = √π · Lc · exp(−(iπLc)²/4)
//! ```
//!
//! with `Y_0..Y_{2nf}` i.i.d. uniform on `[−√3, √3]` (zero mean, unit
//! variance). Sampling is fully reproducible: every sample is drawn from a
//! counter-based stream keyed by `(seed, level, sample)`, so the same triple
//! always produces the same realization regardless of evaluation order.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameters of the truncated Karhunen–Loève conductivity field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomFieldParams {
    /// Mean conductivity `a0`.
    pub mean: f64,
    /// Noise amplitude `σ`.
    pub sigma: f64,
    /// Physical correlation length `Lc`.
    pub corr_len: f64,
    /// Number of retained frequencies `nf` (the expansion has `2·nf + 1`
    /// random coefficients).
    pub n_frequencies: usize,
}

impl Default for RandomFieldParams {
    fn default() -> Self {
        RandomFieldParams {
            mean: 1.0,
            sigma: 0.15,
            corr_len: 0.25,
            n_frequencies: 3,
        }
    }
}

impl RandomFieldParams {
    /// Number of random coefficients in the expansion.
    pub fn n_modes(&self) -> usize {
        2 * self.n_frequencies + 1
    }

    /// Eigenvalues `[λ0, λ1, …, λ_nf]`.
    pub fn eigenvalues(&self) -> Vec<f64> {
        kl_eigenvalues(self.corr_len, self.n_frequencies)
    }

    /// Deterministic lower bound on the field over all realizations:
    /// every coefficient is bounded by `√3`, `|cos| + |sin| ≤ 2` per
    /// frequency pointwise-in-worst-case, hence
    /// `k ≥ a0 − σ√3 (√λ0 + 2 Σ √λi)`.
    pub fn positivity_floor(&self) -> f64 {
        let lam = self.eigenvalues();
        let mut reach = lam[0].sqrt();
        for &l in &lam[1..] {
            reach += 2.0 * l.sqrt();
        }
        self.mean - self.sigma * 3.0f64.sqrt() * reach
    }

    /// Variance of `k(y, ·)` at a fixed point (independent of `y` since
    /// `cos² + sin² = 1`).
    pub fn pointwise_variance(&self) -> f64 {
        self.sigma * self.sigma * self.eigenvalues().iter().sum::<f64>()
    }

    /// Reject parameter sets that cannot guarantee a positive conductivity.
    pub fn validate(&self) -> Result<()> {
        if !(self.mean > 0.0) || !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidInput(format!(
                "random field needs mean > 0 and sigma >= 0 (got mean={}, sigma={})",
                self.mean, self.sigma
            )));
        }
        if !(self.corr_len > 0.0) {
            return Err(Error::InvalidInput(format!(
                "correlation length must be positive (got {})",
                self.corr_len
            )));
        }
        let floor = self.positivity_floor();
        if floor <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "random field can reach non-positive values (worst case {floor:.6})"
            )));
        }
        Ok(())
    }
}

/// Karhunen–Loève eigenvalues `[λ0, λ1, …, λ_nf]` for correlation length
/// `corr_len`.
pub fn kl_eigenvalues(corr_len: f64, n_frequencies: usize) -> Vec<f64> {
    let mut lam = Vec::with_capacity(n_frequencies + 1);
    lam.push((std::f64::consts::PI * corr_len).sqrt() / 2.0);
    for i in 1..=n_frequencies {
        let arg = i as f64 * std::f64::consts::PI * corr_len;
        lam.push(std::f64::consts::PI.sqrt() * corr_len * (-arg * arg / 4.0).exp());
    }
    lam
}

/// One realization of the conductivity tensor, evaluable anywhere in the
/// porous domain.
#[derive(Debug, Clone, PartialEq)]
pub enum ConductivitySample {
    /// Spatially constant diagonal tensor.
    Constant { k11: f64, k22: f64 },
    /// Karhunen–Loève realization with `k11 = k22` varying in `y`.
    /// `amp0` is `σ√λ0·Y0`; `amp_cos[i-1]`/`amp_sin[i-1]` are
    /// `σ√λi·Y_i` / `σ√λi·Y_{nf+i}`.
    Field {
        mean: f64,
        amp0: f64,
        amp_cos: Vec<f64>,
        amp_sin: Vec<f64>,
        /// Realized standard variables in draw order `Y_0 … Y_{2nf}`.
        coeffs: Vec<f64>,
    },
}

impl ConductivitySample {
    /// Spatially constant sample (used by the deterministic test problems).
    pub fn constant(k11: f64, k22: f64) -> Self {
        ConductivitySample::Constant { k11, k22 }
    }

    fn field_value(&self, y: f64) -> f64 {
        match self {
            ConductivitySample::Constant { .. } => unreachable!(),
            ConductivitySample::Field {
                mean,
                amp0,
                amp_cos,
                amp_sin,
                ..
            } => {
                let mut v = mean + amp0;
                for (i, (&ac, &as_)) in amp_cos.iter().zip(amp_sin.iter()).enumerate() {
                    let arg = (i + 1) as f64 * std::f64::consts::PI * y;
                    v += ac * arg.cos() + as_ * arg.sin();
                }
                v
            }
        }
    }

    /// Horizontal conductivity at a point.
    pub fn k11(&self, x: [f64; 2]) -> f64 {
        match self {
            ConductivitySample::Constant { k11, .. } => *k11,
            _ => self.field_value(x[1]),
        }
    }

    /// Vertical conductivity at a point.
    pub fn k22(&self, x: [f64; 2]) -> f64 {
        match self {
            ConductivitySample::Constant { k22, .. } => *k22,
            _ => self.field_value(x[1]),
        }
    }

    /// Interface friction coefficient `η = α / √(τ·Kτ) = α / √k11` evaluated
    /// on the interface `y = 0` (where the field is constant in `x`).
    pub fn interface_friction(&self, alpha: f64) -> f64 {
        alpha / self.k11([0.0, 0.0]).sqrt()
    }

    /// Whether the sample varies in space.
    pub fn is_constant(&self) -> bool {
        matches!(self, ConductivitySample::Constant { .. })
    }
}

/// SplitMix64 finalizer: a bijective 64-bit mixer with full avalanche.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive a 256-bit stream key from the `(seed, level, sample)` triple.
/// Each component is folded in through the SplitMix64 finalizer before the
/// key words are generated, so streams for distinct triples are statistically
/// independent and the assignment is stable across runs and platforms.
pub fn stream_seed(seed: u64, level: u64, sample: u64) -> [u8; 32] {
    const GOLDEN: u64 = 0x9E3779B97F4A7C15;
    let mut state = mix64(seed.wrapping_add(GOLDEN));
    state = mix64(state ^ mix64(level.wrapping_add(0xA0761D6478BD642F)));
    state = mix64(state ^ mix64(sample.wrapping_add(0xE7037ED1A0B428DB)));
    let mut key = [0u8; 32];
    for w in 0..4 {
        state = state.wrapping_add(GOLDEN);
        key[8 * w..8 * w + 8].copy_from_slice(&mix64(state).to_le_bytes());
    }
    key
}

/// Counter-based RNG for the given `(seed, level, sample)` triple.
pub fn stream_rng(seed: u64, level: u64, sample: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_seed(seed, level, sample))
}

/// Draw one conductivity realization. The `2nf + 1` coefficients are drawn
/// in the fixed order `Y_0, Y_1, …, Y_{2nf}`, each uniform on `[−√3, √3]`.
pub fn sample_conductivity(
    params: &RandomFieldParams,
    seed: u64,
    level: u64,
    sample: u64,
) -> ConductivitySample {
    let mut rng = stream_rng(seed, level, sample);
    sample_conductivity_with(params, &mut rng)
}

/// Draw one conductivity realization from an already-positioned stream.
pub fn sample_conductivity_with(params: &RandomFieldParams, rng: &mut ChaCha8Rng) -> ConductivitySample {
    let s = 3.0f64.sqrt();
    let nf = params.n_frequencies;
    let coeffs: Vec<f64> = (0..2 * nf + 1)
        .map(|_| s * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    realize(params, &coeffs)
}

/// Build the sample determined by explicit standard variables `Y_0..Y_{2nf}`.
pub fn realize(params: &RandomFieldParams, coeffs: &[f64]) -> ConductivitySample {
    let nf = params.n_frequencies;
    assert_eq!(coeffs.len(), 2 * nf + 1, "expected 2·nf+1 coefficients");
    let lam = params.eigenvalues();
    let amp0 = params.sigma * lam[0].sqrt() * coeffs[0];
    let mut amp_cos = Vec::with_capacity(nf);
    let mut amp_sin = Vec::with_capacity(nf);
    for i in 1..=nf {
        let a = params.sigma * lam[i].sqrt();
        amp_cos.push(a * coeffs[i]);
        amp_sin.push(a * coeffs[nf + i]);
    }
    ConductivitySample::Field {
        mean: params.mean,
        amp0,
        amp_cos,
        amp_sin,
        coeffs: coeffs.to_vec(),
    }
}

/// Exact pointwise mean `K̄ = (1/J) Σ_j K_j` of an ensemble. Constant samples
/// average entrywise; Karhunen–Loève samples share the trigonometric basis,
/// so their mean is the field with averaged amplitudes. Mixing the two kinds
/// has no closed form in either representation and is rejected.
pub fn ensemble_mean(samples: &[ConductivitySample]) -> Result<ConductivitySample> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("ensemble must be non-empty".into()));
    }
    let n = samples.len() as f64;
    if samples.iter().all(|s| s.is_constant()) {
        let (mut m11, mut m22) = (0.0, 0.0);
        for s in samples {
            if let ConductivitySample::Constant { k11, k22 } = s {
                m11 += k11;
                m22 += k22;
            }
        }
        return Ok(ConductivitySample::constant(m11 / n, m22 / n));
    }
    if samples.iter().any(|s| s.is_constant()) {
        return Err(Error::InvalidInput(
            "cannot average constant and field conductivity samples together".into(),
        ));
    }
    let (mut mean, mut amp0) = (0.0, 0.0);
    let nf = match &samples[0] {
        ConductivitySample::Field { amp_cos, .. } => amp_cos.len(),
        _ => unreachable!(),
    };
    let mut cos_acc = vec![0.0; nf];
    let mut sin_acc = vec![0.0; nf];
    let mut coeff_acc: Option<Vec<f64>> = None;
    for s in samples {
        if let ConductivitySample::Field {
            mean: m,
            amp0: a0,
            amp_cos,
            amp_sin,
            coeffs,
        } = s
        {
            if amp_cos.len() != nf {
                return Err(Error::InvalidInput(
                    "conductivity samples have different mode counts".into(),
                ));
            }
            mean += m;
            amp0 += a0;
            for i in 0..nf {
                cos_acc[i] += amp_cos[i];
                sin_acc[i] += amp_sin[i];
            }
            match &mut coeff_acc {
                None => coeff_acc = Some(coeffs.clone()),
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(coeffs) {
                        *a += c;
                    }
                }
            }
        }
    }
    let mut coeffs = coeff_acc.unwrap();
    for c in &mut coeffs {
        *c /= n;
    }
    for i in 0..nf {
        cos_acc[i] /= n;
        sin_acc[i] /= n;
    }
    Ok(ConductivitySample::Field {
        mean: mean / n,
        amp0: amp0 / n,
        amp_cos: cos_acc,
        amp_sin: sin_acc,
        coeffs,
    })
}

/// Ensemble summary quantities used by the shared-coefficient solver and its
/// convergence diagnostics. Suprema over space are taken on a fine vertical
/// grid covering the porous depth (the fields vary only in `y`).
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    /// Ensemble size.
    pub n_samples: usize,
    /// Minimum over space of the mean friction coefficient `η̄` on the
    /// interface (constant there, so this is just `η̄`).
    pub eta_bar: f64,
    /// `max_j sup_x |η_j − η̄|`.
    pub eta_prime_max: f64,
    /// `max_j sup_x |K_j − K̄|` (diagonal tensors: max entrywise deviation).
    pub rho_prime_max: f64,
    /// `inf_x` of the smallest eigenvalue of `K̄`.
    pub kbar_min: f64,
    /// `inf_x` over all samples of the smallest eigenvalue of `K_j`.
    pub k_min: f64,
    /// `sup_x` over all samples of the largest eigenvalue of `K_j`.
    pub k_max: f64,
}

impl EnsembleStats {
    /// The two structural conditions behind the ensemble convergence theory:
    /// fluctuations must be dominated by the means, `η̄ > max_j sup|η_j − η̄|`
    /// and `inf K̄ > max_j sup|K_j − K̄|`.
    pub fn fluctuations_dominated(&self) -> bool {
        self.eta_prime_max < self.eta_bar && self.rho_prime_max < self.kbar_min
    }
}

/// Compute ensemble statistics for a set of realizations. `porous_y` is the
/// vertical extent of the porous domain; suprema are evaluated on `n_grid`
/// equispaced points (the fields are smooth 1-D trigonometric polynomials,
/// so a fine grid resolves them).
pub fn ensemble_stats(
    samples: &[ConductivitySample],
    alpha: f64,
    porous_y: (f64, f64),
    n_grid: usize,
) -> Result<EnsembleStats> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("ensemble must be non-empty".into()));
    }
    let n = samples.len();
    let etas: Vec<f64> = samples.iter().map(|s| s.interface_friction(alpha)).collect();
    let eta_bar = etas.iter().sum::<f64>() / n as f64;
    let eta_prime_max = etas
        .iter()
        .map(|e| (e - eta_bar).abs())
        .fold(0.0f64, f64::max);

    let mut rho_prime_max = 0.0f64;
    let mut kbar_min = f64::INFINITY;
    let mut k_min = f64::INFINITY;
    let mut k_max = 0.0f64;
    let grid = n_grid.max(2);
    for g in 0..grid {
        let y = porous_y.0 + (porous_y.1 - porous_y.0) * g as f64 / (grid - 1) as f64;
        let pt = [0.0, y];
        let mut m11 = 0.0;
        let mut m22 = 0.0;
        for s in samples {
            let (k11, k22) = (s.k11(pt), s.k22(pt));
            if k11 <= 0.0 || k22 <= 0.0 {
                return Err(Error::Sampling(format!(
                    "non-positive conductivity ({k11}, {k22}) at y = {y}"
                )));
            }
            m11 += k11;
            m22 += k22;
            k_min = k_min.min(k11.min(k22));
            k_max = k_max.max(k11.max(k22));
        }
        m11 /= n as f64;
        m22 /= n as f64;
        kbar_min = kbar_min.min(m11.min(m22));
        for s in samples {
            let d = (s.k11(pt) - m11).abs().max((s.k22(pt) - m22).abs());
            rho_prime_max = rho_prime_max.max(d);
        }
    }
    Ok(EnsembleStats {
        n_samples: n,
        eta_bar,
        eta_prime_max,
        rho_prime_max,
        kbar_min,
        k_min,
        k_max,
    })
}
