//! Unit-hypersphere geometry: normalization, angular distance, and the two
//! interpolation paths between latent codes (straight chord and great-circle arc).

use std::ops::Deref;

use crate::error::{Error, Result};

/// Vectors with a norm at or below this are rejected by [`normalize_to_sphere`].
pub const NORM_EPS: f64 = 1e-12;
/// Dot products are clamped to `[-1 + DOT_EPS, 1 - DOT_EPS]` before `acos`.
pub const DOT_EPS: f64 = 1e-7;
/// Below this subtended angle `slerp` falls back to normalized `lerp`.
pub const THETA_MIN: f64 = 1e-6;
/// Tolerance on `| |v| - 1 |` accepted by [`UnitVector::new`].
pub const UNIT_TOL: f64 = 1e-6;

/// A point on the unit hypersphere.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wraps `components` after checking they already have unit norm.
    pub fn new(components: Vec<f64>) -> Result<Self> {
        let n = norm(&components);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidArgument(format!(
                "vector norm {n} is not within {UNIT_TOL} of 1"
            )));
        }
        Ok(UnitVector(components))
    }

    /// Standard basis vector `e_axis` in `dim` dimensions.
    pub fn axis(dim: usize, axis: usize) -> Self {
        assert!(axis < dim, "axis {axis} out of range for dimension {dim}");
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        UnitVector(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for UnitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Projects `z` onto the unit hypersphere.
pub fn normalize_to_sphere(z: &[f64]) -> Result<UnitVector> {
    let n = norm(z);
    if !n.is_finite() || n <= NORM_EPS {
        return Err(Error::Degenerate(format!(
            "cannot normalize a vector of norm {n:e}"
        )));
    }
    // Already unit up to rounding: keep the bits so normalization is idempotent.
    if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(UnitVector(z.to_vec()));
    }
    Ok(UnitVector(z.iter().map(|x| x / n).collect()))
}

/// Clamped dot product used by [`angular_distance`] and the angular losses.
pub fn clamped_dot(u: &[f64], v: &[f64]) -> f64 {
    dot(u, v).clamp(-1.0 + DOT_EPS, 1.0 - DOT_EPS)
}

/// `acos` of the clamped dot product, in `[0, pi]`.
///
/// Identical inputs report `acos(1 - DOT_EPS) ~ 4.47e-4` rather than zero.
pub fn angular_distance(u: &UnitVector, v: &UnitVector) -> f64 {
    clamped_dot(u, v).acos()
}

/// Exact subtended angle, stable near 0 and pi.
pub fn subtended_angle(u: &[f64], v: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (a, b) in u.iter().zip(v) {
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

/// Chord interpolation `(1 - omega) z1 + omega z2`. Not unit-norm in general.
pub fn lerp(z1: &UnitVector, z2: &UnitVector, omega: f64) -> Vec<f64> {
    z1.iter()
        .zip(z2.iter())
        .map(|(a, b)| (1.0 - omega) * a + omega * b)
        .collect()
}

/// Great-circle interpolation from `z1` (omega = 0) to `z2` (omega = 1).
pub fn slerp(z1: &UnitVector, z2: &UnitVector, omega: f64) -> Result<UnitVector> {
    check_omega(omega)?;
    if z1.dim() != z2.dim() {
        return Err(Error::Shape(format!(
            "slerp endpoints have dimensions {} and {}",
            z1.dim(),
            z2.dim()
        )));
    }
    let theta = subtended_angle(z1, z2);
    if theta > std::f64::consts::PI - THETA_MIN {
        return Err(Error::Antipodal { angle: theta });
    }
    // Endpoints are returned verbatim so decode(slerp(.., 0)) == decode(z1) bit for bit.
    if omega == 0.0 {
        return Ok(z1.clone());
    }
    if omega == 1.0 {
        return Ok(z2.clone());
    }
    if theta < THETA_MIN {
        return normalize_to_sphere(&lerp(z1, z2, omega));
    }
    let s = theta.sin();
    let c1 = ((1.0 - omega) * theta).sin() / s;
    let c2 = (omega * theta).sin() / s;
    Ok(UnitVector(
        z1.iter().zip(z2.iter()).map(|(a, b)| c1 * a + c2 * b).collect(),
    ))
}

fn check_omega(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidArgument(format!(
            "interpolation weight {omega} outside [0, 1]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationMode {
    Linear,
    Spherical,
}

impl std::str::FromStr for InterpolationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(InterpolationMode::Linear),
            "spherical" => Ok(InterpolationMode::Spherical),
            other => Err(Error::InvalidArgument(format!(
                "unknown interpolation mode {other:?} (expected linear or spherical)"
            ))),
        }
    }
}

impl std::fmt::Display for InterpolationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InterpolationMode::Linear => "linear",
            InterpolationMode::Spherical => "spherical",
        })
    }
}

#[derive(Debug, Clone)]
pub struct InterpolationRequest {
    pub z1: UnitVector,
    pub z2: UnitVector,
    omega: f64,
    pub mode: InterpolationMode,
}

impl InterpolationRequest {
    pub fn new(z1: UnitVector, z2: UnitVector, omega: f64, mode: InterpolationMode) -> Result<Self> {
        check_omega(omega)?;
        Ok(Self { z1, z2, omega, mode })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// The interpolated vector at this request's weight.
    pub fn evaluate(&self) -> Result<Vec<f64>> {
        self.at(self.omega)
    }

    fn at(&self, omega: f64) -> Result<Vec<f64>> {
        match self.mode {
            InterpolationMode::Linear => Ok(lerp(&self.z1, &self.z2, omega)),
            InterpolationMode::Spherical => slerp(&self.z1, &self.z2, omega).map(UnitVector::into_inner),
        }
    }
}

/// Evenly spaced frames at `omega = k / (steps - 1)`; the request's own weight is ignored.
pub fn interpolation_sweep(req: &InterpolationRequest, steps: usize) -> Result<Vec<Vec<f64>>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "an interpolation sweep needs at least 2 steps, got {steps}"
        )));
    }
    (0..steps)
        .map(|k| {
            let omega = if k == steps - 1 {
                1.0
            } else {
                k as f64 / (steps - 1) as f64
            };
            req.at(omega)
        })
        .collect()
}
