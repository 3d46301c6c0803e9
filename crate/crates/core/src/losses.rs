//! Smooth convex losses `l(y, u)` with derivatives in `u` up to third order,
//! their Lipschitz/smoothness constants, and the absolute-residual score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss family and parameters. `a` is a scale, `t` a quantile level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LossSpec {
    Logcosh { a: f64 },
    PseudoHuber { a: f64 },
    SmoothedPinball { a: f64, t: f64 },
    /// `(y - u)^2`; has no global Lipschitz constant and is only meant as an
    /// exactly solvable reference.
    Squared,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::Logcosh { a: 1.0 }
    }
}

/// Constants controlling the stability bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    /// Lipschitz constant of `u -> l(y, u)`.
    pub rho: f64,
    /// Lipschitz constant of `u -> d_u l(y, u)`.
    pub beta2: f64,
    /// Lipschitz constant of `y -> d_u l(y, u)`.
    pub beta1: f64,
    /// Uniform bound on `|d_u^3 l|`.
    pub xi: f64,
    /// Lipschitz constant of the score in `u`.
    pub gamma_score: f64,
}

/// `log(cosh(v))` without overflow.
fn log_cosh(v: f64) -> f64 {
    let av = v.abs();
    av + (-2.0 * av).exp().ln_1p() - std::f64::consts::LN_2
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sech2(v: f64) -> f64 {
    let t = v.tanh();
    1.0 - t * t
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        let check_a = |a: f64| {
            if a > 0.0 && a.is_finite() {
                Ok(())
            } else {
                Err(Error::input(format!("loss scale a must be positive, got {a}")))
            }
        };
        match *self {
            LossSpec::Logcosh { a } | LossSpec::PseudoHuber { a } => check_a(a),
            LossSpec::SmoothedPinball { a, t } => {
                check_a(a)?;
                if t > 0.0 && t < 1.0 {
                    Ok(())
                } else {
                    Err(Error::input(format!("quantile level t must lie in (0, 1), got {t}")))
                }
            }
            LossSpec::Squared => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Logcosh { .. } => "logcosh",
            LossSpec::PseudoHuber { .. } => "pseudo_huber",
            LossSpec::SmoothedPinball { .. } => "smoothed_pinball",
            LossSpec::Squared => "squared",
        }
    }

    pub fn value(&self, y: f64, u: f64) -> f64 {
        match *self {
            LossSpec::Logcosh { a } => a * log_cosh((y - u) / a),
            LossSpec::PseudoHuber { a } => {
                let v = (y - u) / a;
                a * a * (v.hypot(1.0) - 1.0)
            }
            LossSpec::SmoothedPinball { a, t } => {
                let v = (y - u) / a;
                t * (y - u) + a * softplus(-v)
            }
            LossSpec::Squared => (y - u) * (y - u),
        }
    }

    /// First derivative in `u`.
    pub fn d1(&self, y: f64, u: f64) -> f64 {
        match *self {
            LossSpec::Logcosh { a } => -((y - u) / a).tanh(),
            LossSpec::PseudoHuber { a } => {
                let v = (y - u) / a;
                -a * v / v.hypot(1.0)
            }
            LossSpec::SmoothedPinball { a, t } => -t + sigmoid(-(y - u) / a),
            LossSpec::Squared => -2.0 * (y - u),
        }
    }

    /// Second derivative in `u`.
    pub fn d2(&self, y: f64, u: f64) -> f64 {
        match *self {
            LossSpec::Logcosh { a } => sech2((y - u) / a) / a,
            LossSpec::PseudoHuber { a } => {
                let v = (y - u) / a;
                (1.0 + v * v).powf(-1.5)
            }
            LossSpec::SmoothedPinball { a, .. } => {
                let s = sigmoid((y - u) / a);
                s * (1.0 - s) / a
            }
            LossSpec::Squared => 2.0,
        }
    }

    /// Third derivative in `u`.
    pub fn d3(&self, y: f64, u: f64) -> f64 {
        match *self {
            LossSpec::Logcosh { a } => {
                let v = (y - u) / a;
                2.0 * sech2(v) * v.tanh() / (a * a)
            }
            LossSpec::PseudoHuber { a } => {
                let v = (y - u) / a;
                3.0 * v * (1.0 + v * v).powf(-2.5) / a
            }
            LossSpec::SmoothedPinball { a, .. } => {
                let s = sigmoid((y - u) / a);
                -s * (1.0 - s) * (1.0 - 2.0 * s) / (a * a)
            }
            LossSpec::Squared => 0.0,
        }
    }

    /// Derivative of order 1, 2 or 3 in `u`.
    pub fn derivative(&self, order: u8, y: f64, u: f64) -> Result<f64> {
        match order {
            1 => Ok(self.d1(y, u)),
            2 => Ok(self.d2(y, u)),
            3 => Ok(self.d3(y, u)),
            _ => Err(Error::input(format!("derivative order must be 1, 2 or 3, got {order}"))),
        }
    }

    /// Closed-form constants. The squared loss is not globally Lipschitz and
    /// yields an error.
    pub fn smoothness_constants(&self) -> Result<SmoothnessConstants> {
        self.validate()?;
        let (rho, beta2, beta1, xi) = match *self {
            LossSpec::Logcosh { a } => (1.0, 1.0 / a, 1.0 / a, 1.0 / (a * a)),
            LossSpec::PseudoHuber { a } => (a, 1.0, 1.0, 1.5 * 0.8_f64.powf(2.5) / a),
            LossSpec::SmoothedPinball { a, t } => {
                let s3 = 3.0_f64.sqrt();
                let xi = (5.0 + 3.0 * s3) / (s3 + 3.0).powi(3) / (a * a);
                (t.max(1.0 - t), 0.25 / a, 0.25 / a, xi)
            }
            LossSpec::Squared => {
                return Err(Error::input(
                    "the squared loss has no finite Lipschitz constant; stability bounds are undefined",
                ))
            }
        };
        Ok(SmoothnessConstants {
            rho,
            beta2,
            beta1,
            xi,
            gamma_score: 1.0,
        })
    }
}

/// Non-conformity score `|y - u|`.
pub fn score(y: f64, u: f64) -> f64 {
    (y - u).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FAMILIES: [LossSpec; 6] = [
        LossSpec::Logcosh { a: 1.0 },
        LossSpec::Logcosh { a: 0.3 },
        LossSpec::PseudoHuber { a: 1.0 },
        LossSpec::PseudoHuber { a: 2.5 },
        LossSpec::SmoothedPinball { a: 0.2, t: 0.5 },
        LossSpec::SmoothedPinball { a: 0.7, t: 0.1 },
    ];

    #[test]
    fn values() {
        let lc = LossSpec::Logcosh { a: 1.0 };
        assert_eq!(lc.value(2.0, 2.0), 0.0);
        assert_relative_eq!(lc.value(1.0, 0.0), 1.0f64.cosh().ln(), epsilon = 1e-15);
        assert_relative_eq!(lc.value(1.0, 0.0), 0.433_781, epsilon = 1e-6);
        assert_relative_eq!(
            LossSpec::PseudoHuber { a: 1.0 }.value(1.0, 0.0),
            2.0f64.sqrt() - 1.0,
            epsilon = 1e-15
        );
        assert!(lc.value(1e6, -1e6).is_finite());
        assert_relative_eq!(lc.value(800.0, 0.0), 800.0 - std::f64::consts::LN_2);
        let pb = LossSpec::SmoothedPinball { a: 0.1, t: 0.3 };
        assert!(pb.value(-1e4, 1e4).is_finite());
    }

    #[test]
    fn derivatives() {
        let lc = LossSpec::Logcosh { a: 1.0 };
        assert_eq!(lc.d1(0.4, 0.4), 0.0);
        assert_relative_eq!(lc.d1(1.0, 0.0), -0.761_594_155_955_764_9, epsilon = 1e-15);
        let pb = LossSpec::SmoothedPinball { a: 0.2, t: 0.5 };
        assert_relative_eq!(pb.d2(0.3, 0.3), 1.25, epsilon = 1e-15);
        assert_eq!(LossSpec::Squared.d3(1.0, 5.0), 0.0);
        assert!(lc.derivative(4, 0.0, 0.0).is_err());
        assert_eq!(lc.derivative(2, 0.0, 0.0).unwrap(), lc.d2(0.0, 0.0));
    }

    #[test]
    fn constants() {
        let c = LossSpec::Logcosh { a: 1.0 }.smoothness_constants().unwrap();
        assert_eq!((c.rho, c.beta2, c.beta1, c.xi, c.gamma_score), (1.0, 1.0, 1.0, 1.0, 1.0));
        let c = LossSpec::PseudoHuber { a: 1.0 }.smoothness_constants().unwrap();
        assert_eq!((c.rho, c.beta2), (1.0, 1.0));
        assert_relative_eq!(c.xi, 0.858_650, epsilon = 1e-6);
        let c = LossSpec::SmoothedPinball { a: 0.2, t: 0.5 }.smoothness_constants().unwrap();
        assert_eq!((c.rho, c.beta2), (0.5, 1.25));
        assert_relative_eq!(c.xi * 0.04, 0.096_225, epsilon = 1e-6);
        assert_eq!(
            LossSpec::SmoothedPinball { a: 1.0, t: 0.2 }.smoothness_constants().unwrap().rho,
            0.8
        );
        assert!(LossSpec::Squared.smoothness_constants().is_err());
        assert!(LossSpec::Logcosh { a: 0.0 }.smoothness_constants().is_err());
        assert!(LossSpec::SmoothedPinball { a: 1.0, t: 1.0 }.validate().is_err());
    }

    #[test]
    fn scores() {
        assert_eq!(score(3.0, 3.0), 0.0);
        assert_eq!(score(1.0, -2.0), 3.0);
        assert_eq!(score(0.5, 2.0), 1.5);
    }

    #[test]
    fn serde_shape() {
        let l: LossSpec = serde_json::from_str(r#"{"family":"smoothed_pinball","a":0.2,"t":0.9}"#).unwrap();
        assert_eq!(l, LossSpec::SmoothedPinball { a: 0.2, t: 0.9 });
        let l: LossSpec = serde_json::from_str(r#"{"family":"squared"}"#).unwrap();
        assert_eq!(l, LossSpec::Squared);
        assert_eq!(
            serde_json::to_string(&LossSpec::Logcosh { a: 1.0 }).unwrap(),
            r#"{"family":"logcosh","a":1.0}"#
        );
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for loss in FAMILIES.iter().chain([LossSpec::Squared].iter()) {
            for _ in 0..1000 {
                let y = rng.random_range(-5.0..5.0);
                let u = rng.random_range(-5.0..5.0);
                let fd1 = (loss.value(y, u + h) - loss.value(y, u - h)) / (2.0 * h);
                let fd2 = (loss.d1(y, u + h) - loss.d1(y, u - h)) / (2.0 * h);
                let fd3 = (loss.d2(y, u + h) - loss.d2(y, u - h)) / (2.0 * h);
                for (exact, fd) in [(loss.d1(y, u), fd1), (loss.d2(y, u), fd2), (loss.d3(y, u), fd3)] {
                    assert!(
                        (exact - fd).abs() <= 1e-6 * (1.0 + exact.abs()),
                        "{loss:?} at ({y}, {u}): {exact} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn constants_bound_derivatives_on_grid() {
        for loss in FAMILIES {
            let c = loss.smoothness_constants().unwrap();
            let slack = 1e-12;
            for k in 0..10_000 {
                let r = -30.0 + 60.0 * k as f64 / 9_999.0;
                assert!(loss.d1(r, 0.0).abs() <= c.rho + slack);
                assert!(loss.d2(r, 0.0) <= c.beta2 + slack);
                assert!(loss.d2(r, 0.0) >= 0.0);
                assert!(loss.d3(r, 0.0).abs() <= c.xi + slack, "{loss:?} r={r}");
            }
        }
    }

    #[test]
    fn beta1_bounds_derivative_in_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for loss in FAMILIES {
            let c = loss.smoothness_constants().unwrap();
            for _ in 0..1000 {
                let u = rng.random_range(-3.0..3.0);
                let y = rng.random_range(-3.0..3.0);
                let y2 = rng.random_range(-3.0..3.0);
                let diff = (loss.d1(y, u) - loss.d1(y2, u)).abs();
                assert!(diff <= c.beta1 * (y - y2).abs() + 1e-12);
            }
            assert_eq!(c.beta1, c.beta2);
        }
    }

    #[test]
    fn symmetric_losses_are_minimized_at_the_target() {
        let symmetric = [
            LossSpec::Logcosh { a: 0.5 },
            LossSpec::PseudoHuber { a: 1.5 },
            LossSpec::SmoothedPinball { a: 0.3, t: 0.5 },
        ];
        for loss in symmetric {
            for y in [-2.0, 0.0, 1.7] {
                let at_y = loss.value(y, y);
                for k in 0..=400 {
                    let u = y - 4.0 + 8.0 * k as f64 / 400.0;
                    assert!(loss.value(y, u) >= at_y - 1e-15);
                }
            }
        }
        let skewed = LossSpec::SmoothedPinball { a: 0.3, t: 0.2 };
        assert!(skewed.d1(0.0, 0.0) != 0.0);
    }
}
