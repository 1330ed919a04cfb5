//! Shared scalar helpers and the abstraction that lets the same dynamics
//! formulas run on plain floats and on recorded autodiff variables.

/// Arithmetic surface shared by `f64` and tape variables. Rollout math is
/// written once against this trait so the differentiable training path and
/// the plain evaluation path cannot drift apart.
pub trait Scalar: Copy {
    fn val(self) -> f64;
    fn add(self, rhs: Self) -> Self;
    fn sub(self, rhs: Self) -> Self;
    fn mul(self, rhs: Self) -> Self;
    /// c * self
    fn scale(self, c: f64) -> Self;
    /// self + c
    fn offset(self, c: f64) -> Self;
    fn abs(self) -> Self;
    fn logistic(self) -> Self;
    fn sq(self) -> Self {
        self.mul(self)
    }
}

impl Scalar for f64 {
    fn val(self) -> f64 {
        self
    }
    fn add(self, rhs: f64) -> f64 {
        self + rhs
    }
    fn sub(self, rhs: f64) -> f64 {
        self - rhs
    }
    fn mul(self, rhs: f64) -> f64 {
        self * rhs
    }
    fn scale(self, c: f64) -> f64 {
        c * self
    }
    fn offset(self, c: f64) -> f64 {
        self + c
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn logistic(self) -> f64 {
        logistic(self)
    }
}

/// Logistic function with the pre-activation clamped so the output stays
/// strictly inside (0, 1) in f64 even for huge inputs.
pub fn logistic(x: f64) -> f64 {
    let x = x.clamp(-36.0, 36.0);
    1.0 / (1.0 + (-x).exp())
}

/// Derivative of [`logistic`] expressed through its output value.
pub fn logistic_grad_from_output(y: f64) -> f64 {
    y * (1.0 - y)
}

/// Signed power: |x|^a * sign(x) for a > 0, and sign(x) for a = 0,
/// with sign(0) = 0.
pub fn signed_power(x: f64, alpha: f64) -> f64 {
    let s = if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    };
    if alpha == 0.0 {
        s
    } else {
        x.abs().powf(alpha) * s
    }
}
