//! Scalar loss kernels and their derivatives with respect to the residual.

use crate::error::{Error, Result};

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("huber delta must be > 0, got {delta}")))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("expectile tau must be in (0, 1), got {tau}")))
    }
}

pub fn huber(u: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(huber_unchecked(u, delta))
}

pub fn huber_grad(u: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(huber_grad_unchecked(u, delta))
}

#[inline]
pub(crate) fn huber_unchecked(u: f64, delta: f64) -> f64 {
    let a = u.abs();
    if a <= delta {
        0.5 * u * u
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[inline]
pub(crate) fn huber_grad_unchecked(u: f64, delta: f64) -> f64 {
    u.clamp(-delta, delta)
}

/// Asymmetric squared loss `|tau - 1[u < 0]| * u^2`.
pub fn expectile_loss(u: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(expectile_unchecked(u, tau))
}

pub fn expectile_grad(u: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(expectile_grad_unchecked(u, tau))
}

#[inline]
pub(crate) fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

#[inline]
pub(crate) fn expectile_unchecked(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

#[inline]
pub(crate) fn expectile_grad_unchecked(u: f64, tau: f64) -> f64 {
    2.0 * expectile_weight(u, tau) * u
}

pub fn squared_error(u: f64) -> f64 {
    u * u
}
