use nalgebra::DMatrix;
use serde::Serialize;

use super::RiccatiError;
use crate::coeffmodel::{CoefficientSource, LocalCoeffs};
use crate::matcore::{psd_project, SymMatrix, PSD_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StepControl {
    /// Step doubling with local error control.
    Adaptive,
    /// `substeps` equal RK4 steps per grid interval, no error control.
    Fixed { substeps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OdeSettings {
    pub rtol: f64,
    pub atol: f64,
    /// Smallest admissible step as a fraction of the horizon.
    pub min_step_rel: f64,
    pub clamp_tol: f64,
    pub psd_tol: f64,
    pub control: StepControl,
}

impl Default for OdeSettings {
    fn default() -> Self {
        OdeSettings {
            rtol: 1e-9,
            atol: 1e-12,
            min_step_rel: 1e-12,
            clamp_tol: 1e-8,
            psd_tol: PSD_TOL,
            control: StepControl::Adaptive,
        }
    }
}

impl OdeSettings {
    pub fn fixed(substeps: usize) -> Self {
        OdeSettings {
            control: StepControl::Fixed { substeps },
            ..Default::default()
        }
    }

    pub fn with_rtol(mut self, rtol: f64) -> Self {
        self.rtol = rtol;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub min_step: f64,
    pub max_step: f64,
    /// Largest eigenvalue magnitude removed by the PSD projection.
    pub max_clamp: f64,
    pub clamped_steps: usize,
}

impl Default for StepStats {
    fn default() -> Self {
        StepStats {
            accepted: 0,
            rejected: 0,
            min_step: f64::INFINITY,
            max_step: 0.0,
            max_clamp: 0.0,
            clamped_steps: 0,
        }
    }
}

impl StepStats {
    pub fn merge(&mut self, other: &StepStats) {
        self.accepted += other.accepted;
        self.rejected += other.rejected;
        self.min_step = self.min_step.min(other.min_step);
        self.max_step = self.max_step.max(other.max_step);
        self.max_clamp = self.max_clamp.max(other.max_clamp);
        self.clamped_steps += other.clamped_steps;
    }

    fn record(&mut self, h: f64) {
        self.accepted += 1;
        self.min_step = self.min_step.min(h);
        self.max_step = self.max_step.max(h);
    }
}

/// `(Y − φᵀ) η⁻¹ (Y − φ) − λ − Y A − Aᵀ Y`.
pub fn driver(c: &LocalCoeffs, y: &DMatrix<f64>) -> DMatrix<f64> {
    let phi_zero = c.phi.iter().all(|x| *x == 0.0);
    let mut f = if phi_zero {
        y * c.eta_inv.as_matrix() * y
    } else {
        (y - c.phi.transpose()) * c.eta_inv.as_matrix() * (y - &c.phi)
    };
    f -= c.lambda.as_matrix();
    if c.a.iter().any(|x| *x != 0.0) {
        let ya = y * &c.a;
        f -= &ya;
        f -= ya.transpose();
    }
    f
}

/// Backward integration of the Riccati equation over single grid intervals.
pub(crate) struct Integrator<'a, S: CoefficientSource + ?Sized> {
    src: &'a S,
    settings: &'a OdeSettings,
    min_step: f64,
}

impl<'a, S: CoefficientSource + ?Sized> Integrator<'a, S> {
    pub fn new(src: &'a S, settings: &'a OdeSettings) -> Self {
        let min_step = settings.min_step_rel * src.tree().grid().horizon();
        Integrator {
            src,
            settings,
            min_step,
        }
    }

    /// Classical RK4 step from `t` to `t − h` with `coeffs(s)` supplying the
    /// coefficients at time `s`.
    fn rk4(
        &self,
        coeffs: &mut impl FnMut(f64) -> LocalCoeffs,
        frozen: Option<&LocalCoeffs>,
        t: f64,
        y: &DMatrix<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        let mut eval = |s: f64, y: &DMatrix<f64>| match frozen {
            Some(c) => driver(c, y),
            None => driver(&coeffs(s), y),
        };
        let k1 = eval(t, y);
        let k2 = eval(t - 0.5 * h, &(y - &k1 * (0.5 * h)));
        let k3 = eval(t - 0.5 * h, &(y - &k2 * (0.5 * h)));
        let k4 = eval(t - h, &(y - &k3 * h));
        y - (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
    }

    fn project(
        &self,
        y: &DMatrix<f64>,
        t: f64,
        stats: &mut StepStats,
    ) -> Result<DMatrix<f64>, RiccatiError> {
        if y.iter().any(|x| !x.is_finite()) {
            return Err(RiccatiError::NonFinite { t });
        }
        let sym = SymMatrix::symmetrize(y);
        let p = psd_project(&sym, self.settings.psd_tol);
        if p.clamp > 0.0 {
            stats.clamped_steps += 1;
            stats.max_clamp = stats.max_clamp.max(p.clamp);
        }
        if p.clamp > self.settings.clamp_tol {
            return Err(RiccatiError::ClampExceeded { t, clamp: p.clamp });
        }
        Ok(p.matrix.into_matrix())
    }

    /// Integrates from `t_{j+1}` back to `t_j` on `node`; `h` carries the
    /// proposed step size in and out.
    pub fn interval(
        &self,
        j: usize,
        node: usize,
        y_right: DMatrix<f64>,
        h: &mut f64,
        stats: &mut StepStats,
    ) -> Result<DMatrix<f64>, RiccatiError> {
        let grid = self.src.tree().grid();
        self.span(j, node, grid.time(j), grid.time(j + 1), y_right, h, stats)
    }

    /// Integrates from `t_hi` back to `t_lo`, both inside interval `j`.
    #[allow(clippy::too_many_arguments)]
    pub fn span(
        &self,
        j: usize,
        node: usize,
        t_lo: f64,
        t_hi: f64,
        y_right: DMatrix<f64>,
        h: &mut f64,
        stats: &mut StepStats,
    ) -> Result<DMatrix<f64>, RiccatiError> {
        let frozen = (!self.src.varies_within(j))
            .then(|| self.src.local(j, node, self.src.tree().grid().time(j)));
        let mut coeffs = |s: f64| self.src.local(j, node, s);
        let mut y = y_right;

        match self.settings.control {
            StepControl::Fixed { substeps } => {
                let n = substeps.max(1);
                let step = (t_hi - t_lo) / n as f64;
                for k in 0..n {
                    let t = t_hi - k as f64 * step;
                    let next = self.rk4(&mut coeffs, frozen.as_ref(), t, &y, step);
                    y = self.project(&next, t - step, stats)?;
                    stats.record(step);
                }
                *h = step;
                Ok(y)
            }
            StepControl::Adaptive => {
                let mut t = t_hi;
                let eps = 1e-13 * (t_hi - t_lo);
                while t - t_lo > eps {
                    let remaining = t - t_lo;
                    let last = *h >= remaining;
                    let step = if last { remaining } else { *h };
                    let full = self.rk4(&mut coeffs, frozen.as_ref(), t, &y, step);
                    let mid = self.rk4(&mut coeffs, frozen.as_ref(), t, &y, 0.5 * step);
                    let fine = self.rk4(
                        &mut coeffs,
                        frozen.as_ref(),
                        t - 0.5 * step,
                        &mid,
                        0.5 * step,
                    );
                    let err = (&fine - &full).norm() / 15.0;
                    let scale = self.settings.atol + self.settings.rtol * y.norm().max(fine.norm());
                    if err.is_finite() && err <= scale {
                        let t_next = if last { t_lo } else { t - step };
                        y = self.project(&fine, t_next, stats)?;
                        stats.record(step);
                        let factor = if err == 0.0 {
                            4.0
                        } else {
                            (0.9 * (scale / err).powf(0.2)).min(4.0)
                        };
                        let proposed = step * factor;
                        *h = if last { h.max(proposed) } else { proposed };
                        t = t_next;
                    } else {
                        stats.rejected += 1;
                        let factor = if err.is_finite() {
                            (0.9 * (scale / err).powf(0.2)).max(0.1)
                        } else {
                            0.1
                        };
                        *h = step * factor;
                        if *h < self.min_step {
                            return Err(RiccatiError::StepUnderflow { t, step: *h });
                        }
                    }
                }
                Ok(y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::SymMatrix;

    #[test]
    fn driver_scalar() {
        let c = LocalCoeffs {
            eta: SymMatrix::scalar(1, 2.0),
            eta_inv: SymMatrix::scalar(1, 0.5),
            lambda: SymMatrix::scalar(1, 1.0),
            phi: DMatrix::from_element(1, 1, 0.5),
            a: DMatrix::from_element(1, 1, 0.25),
        };
        let y = DMatrix::from_element(1, 1, 3.0);
        // (3 − 0.5)² / 2 − 1 − 2·3·0.25
        let expect = 2.5f64 * 2.5 / 2.0 - 1.0 - 1.5;
        assert!((driver(&c, &y)[(0, 0)] - expect).abs() < 1e-15);
    }
}
