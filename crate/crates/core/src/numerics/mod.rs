//! Dense matrices, seeded randomness, optimizers and the finite-difference oracle.

mod finite_diff;
mod matrix;
mod optim;
mod rng;

pub use finite_diff::{finite_diff_grad, relative_error};
pub use matrix::Matrix;
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState, RMSPROP_EPSILON};
pub use rng::RngStream;

/// Mean of the half-normal distribution, `E|ξ| = √(2/π)` for `ξ ~ N(0, 1)`.
pub const HALF_NORMAL_MEAN: f64 = 0.797_884_560_802_865_4;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_normal_constant() {
        assert!((HALF_NORMAL_MEAN - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-16);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
