//! Gaussian-mixture noise sources with an exact covariance contract.
//!
//! A spec is a finite list of weighted Gaussian components. Construction
//! recenters the component means so the mixture mean is exactly zero and
//! applies one linear change of coordinates T = target^(1/2) pinv(raw^(1/2))
//! to every component, which maps the raw mixture covariance
//!
//!   raw = sum_i w_i (Sigma_i + mu_i mu_i')
//!
//! onto the requested target. Distinct specs with the same target therefore
//! sample different distributions with identical second moments, which is
//! what the outer-probability experiments vary.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::numerics::{self, SymMatrix};
use super::SimulatorError;

/// Largest covariance defect tolerated after the rescale.
pub const COV_TOL: f64 = 1e-10;
/// Component count of the randomized default spec.
pub const DEFAULT_COMPONENTS: usize = 3;

/// One mixture component after normalization.
#[derive(Debug, Clone)]
pub struct MixtureComponent {
    weight: f64,
    mean: DVector<f64>,
    cov: SymMatrix,
    chol: DMatrix<f64>,
}

impl MixtureComponent {
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.cov
    }
}

/// Zero-mean mixture with covariance pinned to `target_cov`.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    components: Vec<MixtureComponent>,
    target_cov: SymMatrix,
}

impl MixtureSpec {
    /// Normalizes weights, recenters means, and rescales so the mixture mean
    /// is zero and the mixture covariance equals `target_cov`.
    pub fn new(
        components: Vec<(f64, DVector<f64>, SymMatrix)>,
        target_cov: SymMatrix,
    ) -> Result<Self, SimulatorError> {
        if components.is_empty() {
            return Err(SimulatorError::Mixture("mixture needs at least one component".into()));
        }
        let dim = target_cov.dim();
        let total: f64 = components.iter().map(|(w, _, _)| *w).sum();
        if !total.is_finite() || total <= 0.0 {
            return Err(SimulatorError::Mixture(format!(
                "component weights must be positive with a positive sum, got sum {total}"
            )));
        }
        let mut weights = Vec::with_capacity(components.len());
        for (w, mean, cov) in &components {
            if !(w.is_finite() && *w > 0.0) {
                return Err(SimulatorError::Mixture(format!("component weight {w} is not positive")));
            }
            if mean.len() != dim || cov.dim() != dim {
                return Err(SimulatorError::Mixture(format!(
                    "component is {}-dimensional, target covariance is {dim}-dimensional",
                    mean.len()
                )));
            }
            weights.push(w / total);
        }

        let mut grand_mean = DVector::zeros(dim);
        for ((_, mean, _), w) in components.iter().zip(&weights) {
            grand_mean += mean * *w;
        }
        let centered: Vec<DVector<f64>> =
            components.iter().map(|(_, mean, _)| mean - &grand_mean).collect();

        let mut raw = DMatrix::zeros(dim, dim);
        for (((_, _, cov), mean), w) in components.iter().zip(&centered).zip(&weights) {
            raw += (cov.mat() + mean * mean.transpose()) * *w;
        }
        let raw_sqrt = numerics::psd_sqrt(&SymMatrix::from_average(&raw), numerics::CLAMP_TOL)?;
        let target_sqrt = numerics::psd_sqrt(&target_cov, numerics::CLAMP_TOL)?;
        let transform =
            target_sqrt.mat() * numerics::pinv(raw_sqrt.mat(), numerics::RANK_TOL)?.pinv();

        let mut normalized = Vec::with_capacity(components.len());
        let mut achieved = DMatrix::zeros(dim, dim);
        for (((_, _, cov), mean), w) in components.into_iter().zip(centered).zip(&weights) {
            let mean = &transform * mean;
            let cov = SymMatrix::from_average(&(&transform * cov.mat() * transform.transpose()));
            achieved += (cov.mat() + &mean * mean.transpose()) * *w;
            let chol = numerics::psd_sqrt(&cov, numerics::CLAMP_TOL)?.into_inner();
            normalized.push(MixtureComponent { weight: *w, mean, cov, chol });
        }
        let defect = (achieved - target_cov.mat()).abs().max();
        if defect > COV_TOL * (1.0 + target_cov.mat().abs().max()) {
            return Err(SimulatorError::Mixture(format!(
                "mixture covariance misses the target by {defect:.3e}; \
                 the target must live inside the span of the components"
            )));
        }
        Ok(MixtureSpec { components: normalized, target_cov })
    }

    /// Single zero-mean Gaussian with the target covariance.
    pub fn gaussian(target_cov: SymMatrix) -> Result<Self, SimulatorError> {
        let dim = target_cov.dim();
        Self::new(vec![(1.0, DVector::zeros(dim), target_cov.clone())], target_cov)
    }

    /// Three-component spec with seed-randomized weights, means, and spreads;
    /// the construction invariants pin its mean and covariance regardless of
    /// the draw.
    pub fn randomized(target_cov: SymMatrix, seed: u64) -> Result<Self, SimulatorError> {
        let dim = target_cov.dim();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let scale = (target_cov.trace() / dim.max(1) as f64).sqrt();
        let mut components = Vec::with_capacity(DEFAULT_COMPONENTS);
        for _ in 0..DEFAULT_COMPONENTS {
            let weight = rng.random_range(0.5..1.5);
            let mean = DVector::from_fn(dim, |_, _| {
                scale * rng.sample::<f64, _>(StandardNormal)
            });
            let spread = rng.random_range(0.3..1.0);
            let cov = SymMatrix::from_average(&(target_cov.mat() * spread));
            components.push((weight, mean, cov));
        }
        Self::new(components, target_cov)
    }

    pub fn dim(&self) -> usize {
        self.target_cov.dim()
    }

    pub fn target_cov(&self) -> &SymMatrix {
        &self.target_cov
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// One draw: pick a component by weight, then mean plus colored noise.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> DVector<f64> {
        let pick: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if pick < acc {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &c.mean + &c.chol * z
    }
}

/// Seeded i.i.d. draws from the spec.
pub fn sample_mixture(spec: &MixtureSpec, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count).map(|_| spec.sample(&mut rng)).collect()
}
