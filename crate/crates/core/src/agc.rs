//! Adaptive gain control.
//!
//! A single scalar gain is computed from the mean energy of the whole input
//! tensor and applied to every element:
//!
//! ```text
//! E = (1/N) Σ x_i²
//! g = (E_target / (E + ε) − 1)·α + 1
//! y = g·x
//! ```
//!
//! The gain sits a fraction `α` of the way from 1 to the full correction
//! `E_target / (E + ε)`, without any explicit normalization of the input. There is no clamp on `g`;
//! an all-zero input yields a huge gain but a zero output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Stability constant added to the energy in the gain denominator.
pub const AGC_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgcParams {
    pub e_target: f64,
    pub alpha: f64,
    #[serde(skip, default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    AGC_EPSILON
}

impl Default for AgcParams {
    fn default() -> Self {
        Self {
            e_target: 1.0,
            alpha: 0.2,
            epsilon: AGC_EPSILON,
        }
    }
}

impl AgcParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_target.is_finite() && self.e_target > 0.0) {
            return Err(Error::Config(format!("agc.e_target {} must be positive", self.e_target)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("agc.alpha {} must lie in (0, 1]", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("agc epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Gain for a given input energy.
    pub fn gain<T: Real>(&self, energy: T) -> T {
        let e_t = T::of(self.e_target);
        let alpha = T::of(self.alpha);
        (e_t / (energy + T::of(self.epsilon)) - T::one()) * alpha + T::one()
    }

    /// dg/dE.
    fn gain_slope<T: Real>(&self, energy: T) -> T {
        let d = energy + T::of(self.epsilon);
        -T::of(self.alpha) * T::of(self.e_target) / (d * d)
    }
}

/// Mean energy per element.
pub fn energy<T: Real>(x: &[T]) -> Result<T> {
    if x.is_empty() {
        return Err(Error::InvalidInput("energy of an empty tensor".into()));
    }
    let sum: T = x.iter().map(|&v| v * v).sum();
    Ok(sum / T::of(x.len() as f64))
}

fn check_finite<T: Real>(x: &[T]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("agc input".into()));
    }
    Ok(())
}

/// Returns the gain-adjusted tensor and the gain that was applied.
pub fn agc_forward<T: Real>(x: &[T], p: &AgcParams) -> Result<(Vec<T>, T)> {
    let mut y = x.to_vec();
    let g = agc_in_place(&mut y, p)?;
    Ok((y, g))
}

/// In-place variant of [`agc_forward`]; returns the gain.
pub fn agc_in_place<T: Real>(x: &mut [T], p: &AgcParams) -> Result<T> {
    check_finite(x)?;
    let g = p.gain(energy(x)?);
    if !g.is_finite() {
        return Err(Error::NonFinite("agc gain".into()));
    }
    x.iter_mut().for_each(|v| *v *= g);
    Ok(g)
}

/// Vector-Jacobian product of [`agc_forward`].
///
/// With `y_j = g(E)·x_j` and `E = Σx²/N`, the input gradient is
/// `g·gy_i + (Σ_j gy_j x_j)·g'(E)·2x_i/N`.
pub fn agc_backward<T: Real>(x: &[T], p: &AgcParams, grad_y: &[T]) -> Result<Vec<T>> {
    if x.len() != grad_y.len() {
        return Err(Error::Shape(format!(
            "agc_backward: input has {} elements, gradient has {}",
            x.len(),
            grad_y.len()
        )));
    }
    check_finite(x)?;
    let e = energy(x)?;
    let g = p.gain(e);
    let dot: T = x.iter().zip(grad_y).map(|(&a, &b)| a * b).sum();
    let coef = dot * p.gain_slope(e) * T::of(2.0) / T::of(x.len() as f64);
    Ok(x.iter()
        .zip(grad_y)
        .map(|(&xi, &gi)| g * gi + coef * xi)
        .collect())
}
