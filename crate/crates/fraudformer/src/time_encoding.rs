//! Time-embedding functions: sinusoidal and rotary-derived encoders over
//! integer millisecond time-ids, the time-only layer norm, and the learned
//! positional table lookup.
//!
//! Both encoders are pure functions of (id, d_model, f_base). The sinusoidal
//! layout concatenates halves (sines then cosines); the rotary layout
//! interleaves even/odd slots with a rotated (id/f_base, id/f_base) template.
//! The two layouts intentionally differ.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which time-embedding family a model variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeFamily {
    Sinusoidal,
    Rotary,
    /// No time embedding at all; the residual update skips the time term.
    #[serde(rename = "none")]
    Disabled,
}

fn check_even(d_model: usize) -> Result<()> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::config(
            "d_model",
            format!("time encoders pair dimensions; got {d_model}"),
        ));
    }
    Ok(())
}

/// Sinusoidal encoding: theta_i = f_base^(-2i/d_model) for i in
/// 0..d_model/2, output is [sin(theta * id); cos(theta * id)] with the two
/// halves concatenated.
pub fn encode_sinusoidal(id_ms: i64, d_model: usize, f_base: f64) -> Result<Vec<f64>> {
    check_even(d_model)?;
    let half = d_model / 2;
    let id = id_ms as f64;
    let mut e = vec![0.0; d_model];
    for i in 0..half {
        let theta = f_base.powf(-2.0 * i as f64 / d_model as f64);
        let arg = theta * id;
        e[i] = arg.sin();
        e[half + i] = arg.cos();
    }
    Ok(e)
}

/// Rotary-derived additive encoding: the scalar id is duplicated into a
/// template (id/f_base, id/f_base) which is rotated by phi_i = id * omega_i
/// with omega_i = f_base^(-2i/d_model), and the rotated pair is written to
/// the interleaved slots (2i, 2i+1). The template is divided by f_base while
/// the angle uses the raw id; the asymmetry is deliberate.
pub fn encode_rotary_additive(id_ms: i64, d_model: usize, f_base: f64) -> Result<Vec<f64>> {
    check_even(d_model)?;
    let id = id_ms as f64;
    let template = id / f_base;
    let mut e = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let omega = f_base.powf(-2.0 * i as f64 / d_model as f64);
        let phi = id * omega;
        let (sin, cos) = phi.sin_cos();
        e[2 * i] = template * (cos - sin);
        e[2 * i + 1] = template * (sin + cos);
    }
    Ok(e)
}

/// Dispatch on family. `Disabled` is rejected: callers skip the time term
/// entirely rather than adding a zero vector.
pub fn encode_time(family: TimeFamily, id_ms: i64, d_model: usize, f_base: f64) -> Result<Vec<f64>> {
    match family {
        TimeFamily::Sinusoidal => encode_sinusoidal(id_ms, d_model, f_base),
        TimeFamily::Rotary => encode_rotary_additive(id_ms, d_model, f_base),
        TimeFamily::Disabled => Err(Error::config(
            "family",
            "no time embedding to compute when the family is disabled",
        )),
    }
}

/// Layer norm applied only to the time embedding:
/// out = tau * (e - mean) / sqrt(var + eps) + beta, with population variance
/// (divisor d_model).
pub fn layer_norm_time(e: &[f64], beta: &[f64], tau: &[f64], eps: f64) -> Vec<f64> {
    let d = e.len();
    assert_eq!(beta.len(), d, "beta length mismatch");
    assert_eq!(tau.len(), d, "tau length mismatch");
    let mean = e.iter().sum::<f64>() / d as f64;
    let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
    let inv_std = 1.0 / (var + eps).sqrt();
    (0..d)
        .map(|i| tau[i] * (e[i] - mean) * inv_std + beta[i])
        .collect()
}

/// Row lookup into the learned positional table. No layer norm is applied to
/// the result.
pub fn positional_lookup(p: usize, table: &Array2<f64>) -> Result<Vec<f64>> {
    let l_max = table.nrows();
    if p >= l_max {
        return Err(Error::Bounds {
            what: "positional table row".into(),
            index: p,
            limit: l_max,
        });
    }
    Ok(table.row(p).to_vec())
}
