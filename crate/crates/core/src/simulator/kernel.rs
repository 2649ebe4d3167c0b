//! Difference-operator plant models in kernel form.
//!
//! A model is a matrix polynomial in the backward shift acting on the stacked
//! signal w = (y, u, d):
//!
//!   R_y(s) y_k + R_u(s) u_k + R_d(s) d_k = 0,   R_*(s) = sum_j R_*[j] s^j,
//!
//! where s is the one-step delay. With R_y[0] invertible the relation is a
//! causal recursion for y_k, which is how `KernelPlant` steps trajectories.

use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("kernel coefficient shapes are inconsistent: {0}")]
    Shape(String),
    #[error("leading output coefficient is not invertible (sigma_min/sigma_max = {ratio:.3e})")]
    SingularLeading { ratio: f64 },
    #[error("kernel lag {ell} exceeds window horizon {horizon}")]
    LagTooLong { ell: usize, horizon: usize },
    #[error("history shorter than kernel lag: have {have}, need {need}")]
    ShortHistory { have: usize, need: usize },
}

/// Kernel representation of a plant. Coefficient lists run from delay 0
/// upward and may have different lengths per channel group; the overall lag
/// is the longest one.
#[derive(Debug, Clone)]
pub struct KernelModel {
    r_y: Vec<DMatrix<f64>>,
    r_u: Vec<DMatrix<f64>>,
    r_d: Vec<DMatrix<f64>>,
    r_y0_inv: DMatrix<f64>,
}

impl KernelModel {
    pub fn new(
        r_y: Vec<DMatrix<f64>>,
        r_u: Vec<DMatrix<f64>>,
        r_d: Vec<DMatrix<f64>>,
    ) -> Result<Self, KernelError> {
        if r_y.is_empty() {
            return Err(KernelError::Shape("no output coefficients".into()));
        }
        let p = r_y[0].nrows();
        if r_y[0].ncols() != p {
            return Err(KernelError::Shape(format!(
                "leading output coefficient must be square, got {}x{}",
                r_y[0].nrows(),
                r_y[0].ncols()
            )));
        }
        for (name, list, cols) in [
            ("R_y", &r_y, p),
            ("R_u", &r_u, r_u.first().map(|m| m.ncols()).unwrap_or(0)),
            ("R_d", &r_d, r_d.first().map(|m| m.ncols()).unwrap_or(0)),
        ] {
            for (j, m) in list.iter().enumerate() {
                if m.nrows() != p || m.ncols() != cols {
                    return Err(KernelError::Shape(format!(
                        "{name}[{j}] is {}x{}, expected {}x{}",
                        m.nrows(),
                        m.ncols(),
                        p,
                        cols
                    )));
                }
            }
        }
        let svd = r_y[0].clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
        if ratio < 1e-12 {
            return Err(KernelError::SingularLeading { ratio });
        }
        let r_y0_inv = r_y[0]
            .clone()
            .try_inverse()
            .ok_or(KernelError::SingularLeading { ratio })?;
        Ok(Self { r_y, r_u, r_d, r_y0_inv })
    }

    pub fn p(&self) -> usize {
        self.r_y[0].nrows()
    }

    pub fn m(&self) -> usize {
        self.r_u.first().map(|m| m.ncols()).unwrap_or(0)
    }

    pub fn q(&self) -> usize {
        self.r_d.first().map(|m| m.ncols()).unwrap_or(0)
    }

    /// Longest delay appearing in any coefficient list.
    pub fn lag(&self) -> usize {
        [self.r_y.len(), self.r_u.len(), self.r_d.len()]
            .into_iter()
            .filter(|l| *l > 0)
            .map(|l| l - 1)
            .max()
            .unwrap_or(0)
    }

    pub fn r_y(&self) -> &[DMatrix<f64>] {
        &self.r_y
    }

    pub fn r_u(&self) -> &[DMatrix<f64>] {
        &self.r_u
    }

    pub fn r_d(&self) -> &[DMatrix<f64>] {
        &self.r_d
    }

    /// Coefficient of delay `j` for the (y, u, d) groups, zero-padded past the
    /// stored lists. Shape p x (p+m+q).
    pub fn stacked_coefficient(&self, j: usize) -> DMatrix<f64> {
        let (p, m, q) = (self.p(), self.m(), self.q());
        let mut out = DMatrix::zeros(p, p + m + q);
        if let Some(c) = self.r_y.get(j) {
            out.view_mut((0, 0), (p, p)).copy_from(c);
        }
        if let Some(c) = self.r_u.get(j) {
            out.view_mut((0, p), (p, m)).copy_from(c);
        }
        if let Some(c) = self.r_d.get(j) {
            out.view_mut((0, p + m), (p, q)).copy_from(c);
        }
        out
    }

    /// Largest kernel-equation residual over all steps of a trajectory laid
    /// out as one (p+m+q) x len matrix with rows ordered (y, u, d). Steps
    /// before the lag horizon are skipped. Zero (up to roundoff) exactly when
    /// the trajectory satisfies the model.
    pub fn residual(&self, traj: &DMatrix<f64>) -> f64 {
        let w = self.p() + self.m() + self.q();
        assert_eq!(traj.nrows(), w, "trajectory row count must match channel count");
        let ell = self.lag();
        let mut worst: f64 = 0.0;
        for s in ell..traj.ncols() {
            let mut r = DVector::zeros(self.p());
            for j in 0..=ell {
                let c = self.stacked_coefficient(j);
                r += c * traj.column(s - j);
            }
            worst = worst.max(r.amax());
        }
        worst
    }
}

/// Stateful simulator around a `KernelModel`: keeps the rolling signal
/// history and produces y_k from applied (u_k, d_k).
#[derive(Debug, Clone)]
pub struct KernelPlant {
    model: KernelModel,
    y_hist: VecDeque<DVector<f64>>,
    u_hist: VecDeque<DVector<f64>>,
    d_hist: VecDeque<DVector<f64>>,
}

impl KernelPlant {
    /// Starts from an all-zero history.
    pub fn new(model: KernelModel) -> Self {
        let ell = model.lag();
        let (p, m, q) = (model.p(), model.m(), model.q());
        Self {
            model,
            y_hist: (0..ell).map(|_| DVector::zeros(p)).collect(),
            u_hist: (0..ell).map(|_| DVector::zeros(m)).collect(),
            d_hist: (0..ell).map(|_| DVector::zeros(q)).collect(),
        }
    }

    /// Starts from given histories, most recent sample first.
    pub fn with_history(
        model: KernelModel,
        y: Vec<DVector<f64>>,
        u: Vec<DVector<f64>>,
        d: Vec<DVector<f64>>,
    ) -> Result<Self, KernelError> {
        let ell = model.lag();
        if y.len() < ell || u.len() < ell || d.len() < ell {
            return Err(KernelError::ShortHistory {
                have: y.len().min(u.len()).min(d.len()),
                need: ell,
            });
        }
        Ok(Self {
            model,
            y_hist: y.into_iter().take(ell).collect(),
            u_hist: u.into_iter().take(ell).collect(),
            d_hist: d.into_iter().take(ell).collect(),
        })
    }

    pub fn model(&self) -> &KernelModel {
        &self.model
    }

    /// Applies (u_k, d_k), returns y_k, and advances the history.
    pub fn step(&mut self, u_k: &DVector<f64>, d_k: &DVector<f64>) -> DVector<f64> {
        let ell = self.model.lag();
        let mut acc = DVector::zeros(self.model.p());
        if let Some(c) = self.model.r_u.first() {
            acc += c * u_k;
        }
        if let Some(c) = self.model.r_d.first() {
            acc += c * d_k;
        }
        for j in 1..=ell {
            if let Some(c) = self.model.r_y.get(j) {
                acc += c * &self.y_hist[j - 1];
            }
            if let Some(c) = self.model.r_u.get(j) {
                acc += c * &self.u_hist[j - 1];
            }
            if let Some(c) = self.model.r_d.get(j) {
                acc += c * &self.d_hist[j - 1];
            }
        }
        let y_k = -(&self.model.r_y0_inv) * acc;
        if ell > 0 {
            self.y_hist.push_front(y_k.clone());
            self.u_hist.push_front(u_k.clone());
            self.d_hist.push_front(d_k.clone());
            self.y_hist.truncate(ell);
            self.u_hist.truncate(ell);
            self.d_hist.truncate(ell);
        }
        y_k
    }
}

/// One explicit plant update without carrying state: histories are slices
/// with the most recent sample first.
pub fn step_plant(
    model: &KernelModel,
    y_hist: &[DVector<f64>],
    u_hist: &[DVector<f64>],
    d_hist: &[DVector<f64>],
    u_k: &DVector<f64>,
    d_k: &DVector<f64>,
) -> Result<DVector<f64>, KernelError> {
    let ell = model.lag();
    if y_hist.len() < ell || u_hist.len() < ell || d_hist.len() < ell {
        return Err(KernelError::ShortHistory {
            have: y_hist.len().min(u_hist.len()).min(d_hist.len()),
            need: ell,
        });
    }
    let mut plant = KernelPlant::with_history(
        model.clone(),
        y_hist.to_vec(),
        u_hist.to_vec(),
        d_hist.to_vec(),
    )?;
    Ok(plant.step(u_k, d_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn integrator() -> KernelModel {
        // y_k - y_{k-1} - u_k = 0.
        KernelModel::new(
            vec![DMatrix::identity(1, 1), DMatrix::from_element(1, 1, -1.0)],
            vec![DMatrix::from_element(1, 1, -1.0), DMatrix::zeros(1, 1)],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn integrator_steps_accumulate() {
        let mut plant = KernelPlant::new(integrator());
        let u = DVector::from_element(1, 1.0);
        let d = DVector::zeros(0);
        let mut y = 0.0;
        for _ in 0..5 {
            y = plant.step(&u, &d)[0];
        }
        assert_abs_diff_eq!(y, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_vanishes_on_generated_trajectory() {
        let model = integrator();
        let mut plant = KernelPlant::new(model.clone());
        let mut cols = Vec::new();
        for k in 0..10 {
            let u = DVector::from_element(1, (k as f64 * 0.7).sin());
            let y = plant.step(&u, &DVector::zeros(0));
            cols.push(DVector::from_vec(vec![y[0], u[0]]));
        }
        let traj = DMatrix::from_columns(&cols);
        assert!(model.residual(&traj) < 1e-12);
        // Perturbing one sample breaks the relation.
        let mut bad = traj.clone();
        bad[(0, 4)] += 0.1;
        assert!(model.residual(&bad) > 1e-3);
    }

    #[test]
    fn singular_leading_coefficient_is_rejected() {
        let r = KernelModel::new(vec![DMatrix::zeros(2, 2)], vec![], vec![]);
        assert!(matches!(r, Err(KernelError::SingularLeading { .. })));
    }
}
