//! 2D Gaussian splat parameterization, covariance math, and geometry bits.
//!
//! A splat is a position `mu` in normalized `[0,1]^2` image coordinates, a
//! rotation `theta` in `[0, pi)` (a 2D Gaussian ellipse has period pi), two
//! positive axis scales, and a feature coefficient vector. Raw network
//! outputs become valid parameters through smooth bijections: sigmoid for
//! positions, a period-pi wrap for the angle, softplus plus a floor for the
//! scales.
//!
//! Geometry compresses to 6/6/3/5/5 bits (x, y, theta, s1, s2) with uniform
//! quantizers; scales are quantized in log space over `[1e-3, 1]` since
//! splat sizes span orders of magnitude in normalized coordinates.

use std::f64::consts::PI;

/// Scale floor added after softplus so covariances stay invertible.
pub const MIN_SCALE: f64 = 1e-4;

/// Covariance determinant below this is treated as numerically singular.
pub const MIN_DET: f64 = 1e-12;

pub const POS_BITS: u32 = 6;
pub const THETA_BITS: u32 = 3;
pub const SCALE_BITS: u32 = 5;

/// Log-space quantization range for scales.
pub const SCALE_QUANT_MIN: f64 = 1e-3;
pub const SCALE_QUANT_MAX: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum GaussianError {
    #[error("covariance nearly singular: det {det:.3e} < {MIN_DET:.0e} (s1={s1:.3e}, s2={s2:.3e})")]
    IllConditioned { det: f64, s1: f64, s2: f64 },
}

/// Pre-activation splat parameters as emitted by the embedding network.
#[derive(Clone, Debug)]
pub struct RawGaussian {
    pub raw_pos: [f64; 2],
    pub raw_theta: f64,
    pub raw_scales: [f64; 2],
    pub coeff: Vec<f64>,
}

/// Activated splat. Invariants: `mu` in `[0,1]^2`, `theta` in `[0, pi)`,
/// scales >= [`MIN_SCALE`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian2D {
    pub mu: [f64; 2],
    pub theta: f64,
    pub s1: f64,
    pub s2: f64,
    pub coeff: Vec<f64>,
}

/// Covariance `sigma = (R S)(R S)^T` and its closed-form 2x2 inverse.
#[derive(Clone, Debug)]
pub struct Covariance {
    pub sigma: [[f64; 2]; 2],
    pub sigma_inv: [[f64; 2]; 2],
}

/// Bit-quantized geometry codes: x/y 6 bits, theta 3 bits, scales 5 bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizedGeometry {
    pub qx: u8,
    pub qy: u8,
    pub qtheta: u8,
    pub qs1: u8,
    pub qs2: u8,
}

/// Geometry fields recovered from codes (used where no coefficients apply).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryFields {
    pub mu: [f64; 2],
    pub theta: f64,
    pub s1: f64,
    pub s2: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Map raw parameters onto the valid splat domain.
pub fn activate(raw: &RawGaussian) -> Gaussian2D {
    Gaussian2D {
        mu: [sigmoid(raw.raw_pos[0]), sigmoid(raw.raw_pos[1])],
        theta: raw.raw_theta.rem_euclid(PI),
        s1: softplus(raw.raw_scales[0]) + MIN_SCALE,
        s2: softplus(raw.raw_scales[1]) + MIN_SCALE,
        coeff: raw.coeff.clone(),
    }
}

/// `sigma = (R S)(R S)^T = R diag(s1^2, s2^2) R^T` with the inverse computed
/// in closed form. The angle is canonicalized modulo pi first, so any two
/// angles describing the same ellipse produce bit-identical matrices.
pub fn covariance(theta: f64, s1: f64, s2: f64) -> Result<Covariance, GaussianError> {
    let det = (s1 * s1) * (s2 * s2);
    if !(det >= MIN_DET) {
        return Err(GaussianError::IllConditioned { det, s1, s2 });
    }
    let th = theta.rem_euclid(PI);
    let (sin, cos) = th.sin_cos();
    let (v1, v2) = (s1 * s1, s2 * s2);
    let sigma = [
        [cos * cos * v1 + sin * sin * v2, sin * cos * (v1 - v2)],
        [sin * cos * (v1 - v2), sin * sin * v1 + cos * cos * v2],
    ];
    let (e1, e2) = (1.0 / v1, 1.0 / v2);
    let sigma_inv = [
        [cos * cos * e1 + sin * sin * e2, sin * cos * (e1 - e2)],
        [sin * cos * (e1 - e2), sin * sin * e1 + cos * cos * e2],
    ];
    Ok(Covariance { sigma, sigma_inv })
}

impl Gaussian2D {
    pub fn covariance(&self) -> Result<Covariance, GaussianError> {
        covariance(self.theta, self.s1, self.s2)
    }

    pub fn geometry(&self) -> GeometryFields {
        GeometryFields {
            mu: self.mu,
            theta: self.theta,
            s1: self.s1,
            s2: self.s2,
        }
    }
}

fn quantize_unit(v: f64, bits: u32) -> u8 {
    let levels = ((1u32 << bits) - 1) as f64;
    (v.clamp(0.0, 1.0) * levels).round() as u8
}

fn dequantize_unit(q: u8, bits: u32) -> f64 {
    let levels = ((1u32 << bits) - 1) as f64;
    q as f64 / levels
}

fn scale_to_unit(s: f64) -> f64 {
    let lo = SCALE_QUANT_MIN.ln();
    let hi = SCALE_QUANT_MAX.ln();
    ((s.max(f64::MIN_POSITIVE).ln() - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn unit_to_scale(v: f64) -> f64 {
    let lo = SCALE_QUANT_MIN.ln();
    let hi = SCALE_QUANT_MAX.ln();
    (lo + v * (hi - lo)).exp()
}

/// Uniform geometry quantizer: position over `[0,1]`, angle over `[0, pi]`,
/// scales in log space over `[SCALE_QUANT_MIN, SCALE_QUANT_MAX]` (clamped).
pub fn quantize_geometry(g: &GeometryFields) -> QuantizedGeometry {
    QuantizedGeometry {
        qx: quantize_unit(g.mu[0], POS_BITS),
        qy: quantize_unit(g.mu[1], POS_BITS),
        qtheta: quantize_unit(g.theta / PI, THETA_BITS),
        qs1: quantize_unit(scale_to_unit(g.s1), SCALE_BITS),
        qs2: quantize_unit(scale_to_unit(g.s2), SCALE_BITS),
    }
}

/// Inverse of [`quantize_geometry`]. The top angle code decodes to pi, which
/// denotes the same ellipse as 0; it round-trips because the quantizer
/// clamps rather than wraps.
pub fn dequantize_geometry(q: &QuantizedGeometry) -> GeometryFields {
    GeometryFields {
        mu: [
            dequantize_unit(q.qx, POS_BITS),
            dequantize_unit(q.qy, POS_BITS),
        ],
        theta: dequantize_unit(q.qtheta, THETA_BITS) * PI,
        s1: unit_to_scale(dequantize_unit(q.qs1, SCALE_BITS)),
        s2: unit_to_scale(dequantize_unit(q.qs2, SCALE_BITS)),
    }
}

/// Quantize-dequantize snap for one position component.
pub fn snap_position(v: f64) -> f64 {
    dequantize_unit(quantize_unit(v, POS_BITS), POS_BITS)
}

/// Quantize-dequantize snap for the rotation angle.
pub fn snap_theta(v: f64) -> f64 {
    dequantize_unit(quantize_unit(v / PI, THETA_BITS), THETA_BITS) * PI
}

/// Quantize-dequantize snap for one scale (log-space grid).
pub fn snap_scale(v: f64) -> f64 {
    unit_to_scale(dequantize_unit(
        quantize_unit(scale_to_unit(v), SCALE_BITS),
        SCALE_BITS,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(pos: [f64; 2], theta: f64, scales: [f64; 2]) -> RawGaussian {
        RawGaussian {
            raw_pos: pos,
            raw_theta: theta,
            raw_scales: scales,
            coeff: vec![0.0; 8],
        }
    }

    #[test]
    fn activate_zero_raw_pos_centers() {
        let g = activate(&raw([0.0, 0.0], 0.0, [0.0, 0.0]));
        assert_eq!(g.mu, [0.5, 0.5]);
    }

    #[test]
    fn activate_wraps_theta_by_pi() {
        let g = activate(&raw([0.0, 0.0], PI + 0.1, [0.0, 0.0]));
        assert!((g.theta - 0.1).abs() < 1e-12, "theta = {}", g.theta);
        let g = activate(&raw([0.0, 0.0], -0.1, [0.0, 0.0]));
        assert!((g.theta - (PI - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn activate_zero_raw_scales_gives_softplus_floor() {
        let g = activate(&raw([0.0, 0.0], 0.0, [0.0, 0.0]));
        let expected = 2f64.ln() + MIN_SCALE; // 0.6932...
        assert!((g.s1 - expected).abs() < 1e-12);
        assert!((g.s2 - expected).abs() < 1e-12);
        assert!((g.s1 - 0.6932).abs() < 1e-4);
    }

    #[test]
    fn covariance_axis_aligned() {
        let c = covariance(0.0, 2.0, 1.0).unwrap();
        assert_eq!(c.sigma, [[4.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn covariance_quarter_turn_swaps_axes() {
        let c = covariance(PI / 2.0, 2.0, 1.0).unwrap();
        assert!((c.sigma[0][0] - 1.0).abs() < 1e-12);
        assert!((c.sigma[1][1] - 4.0).abs() < 1e-12);
        assert!(c.sigma[0][1].abs() < 1e-12);
    }

    #[test]
    fn covariance_isotropic_is_rotation_invariant() {
        let c = covariance(PI / 4.0, 1.0, 1.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c.sigma[i][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_inverse_is_exact() {
        let c = covariance(0.7, 0.3, 0.05).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += c.sigma[i][k] * c.sigma_inv[k][j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((acc - want).abs() < 1e-8, "sigma * inv mismatch at {i}{j}: {acc}");
            }
        }
    }

    #[test]
    fn covariance_rejects_singular() {
        match covariance(0.0, 1e-4, 1e-4) {
            Err(GaussianError::IllConditioned { det, .. }) => assert!(det < MIN_DET),
            other => panic!("expected conditioning error, got {other:?}"),
        }
    }

    #[test]
    fn covariance_period_pi() {
        // The ellipse has period pi. Bitwise equality holds whenever the
        // float add theta + pi is recoverable (about half of all doubles);
        // the rest agree to rounding error.
        let mut exact_hits = 0;
        for j in 0..512 {
            let theta = j as f64 * (PI / 512.0);
            let c0 = covariance(theta, 1.7, 0.4).unwrap();
            let c1 = covariance(theta + PI, 1.7, 0.4).unwrap();
            if (theta + PI) - PI == theta {
                exact_hits += 1;
                assert_eq!(c0.sigma, c1.sigma, "theta = {theta}");
            } else {
                for i in 0..2 {
                    for k in 0..2 {
                        assert!((c0.sigma[i][k] - c1.sigma[i][k]).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(exact_hits > 100, "only {exact_hits} recoverable angles");
    }

    #[test]
    fn quantize_position_endpoints_and_midpoint() {
        let mut g = GeometryFields {
            mu: [0.0, 1.0],
            theta: 0.0,
            s1: 0.01,
            s2: 0.01,
        };
        let q = quantize_geometry(&g);
        assert_eq!(q.qx, 0);
        assert_eq!(q.qy, 63);
        g.mu[0] = 0.5;
        let q = quantize_geometry(&g);
        assert_eq!(q.qx, 32);
        let d = dequantize_geometry(&q);
        assert!((d.mu[0] - 32.0 / 63.0).abs() < 1e-12);
        assert!((d.mu[0] - 0.50794).abs() < 1e-5);
    }

    #[test]
    fn dequantize_theta_code_four() {
        let q = QuantizedGeometry {
            qx: 0,
            qy: 0,
            qtheta: 4,
            qs1: 0,
            qs2: 0,
        };
        let d = dequantize_geometry(&q);
        assert!((d.theta - 4.0 * PI / 7.0).abs() < 1e-12);
        assert!((d.theta - 1.7952).abs() < 1e-4);
    }

    #[test]
    fn quantize_dequantize_roundtrip_all_codes() {
        for qx in 0..64u8 {
            for qtheta in 0..8u8 {
                for qs in [0u8, 7, 15, 31] {
                    let q = QuantizedGeometry {
                        qx,
                        qy: 63 - qx,
                        qtheta,
                        qs1: qs,
                        qs2: 31 - qs,
                    };
                    let rq = quantize_geometry(&dequantize_geometry(&q));
                    assert_eq!(rq, q);
                }
            }
        }
    }

    #[test]
    fn quantization_is_idempotent_and_bounded() {
        let g = GeometryFields {
            mu: [0.371, 0.829],
            theta: 1.234,
            s1: 0.0371,
            s2: 0.52,
        };
        let q1 = quantize_geometry(&g);
        let d1 = dequantize_geometry(&q1);
        let q2 = quantize_geometry(&d1);
        assert_eq!(q1, q2);
        // quantization error bounds: half a step per field
        assert!((d1.mu[0] - g.mu[0]).abs() <= 0.5 / 63.0 + 1e-12);
        assert!((d1.mu[1] - g.mu[1]).abs() <= 0.5 / 63.0 + 1e-12);
        assert!((d1.theta - g.theta).abs() <= PI / 14.0 + 1e-12);
    }
}
