//! The Robertson (ROBER) autocatalytic reaction system.
//!
//! Three species interact through
//!
//! ```text
//! dy1/dt = -k1 y1 + k3 y2 y3
//! dy2/dt =  k1 y1 - k2 y2^2 - k3 y2 y3
//! dy3/dt =  k2 y2^2
//! ```
//!
//! The right-hand side sums to zero, so `y1 + y2 + y3` is conserved. The
//! [`OdeSystem`] trait is the integrator-facing contract; [`Rober`] is the
//! only mechanism implemented here.

use serde::{Deserialize, Serialize};

/// An autonomous or non-autonomous ODE system `y' = f(t, y)` with an
/// analytic Jacobian.
///
/// Implementations must be pure: identical inputs give bitwise-identical
/// outputs.
pub trait OdeSystem {
    fn dimension(&self) -> usize;

    /// Writes `f(t, y)` into `dy`.
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);

    /// Writes the row-major `n x n` Jacobian `jac[i * n + j] = d f_i / d y_j`.
    fn jacobian(&self, t: f64, y: &[f64], jac: &mut [f64]);

    /// Writes `d f / d t`. Autonomous systems keep the default (all zero).
    fn time_derivative(&self, _t: f64, _y: &[f64], dfdt: &mut [f64]) {
        dfdt.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Rate constants of the three ROBER reactions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConstants {
    /// First-order rate of `y1 -> y2` [1/s].
    pub k1: f64,
    /// Second-order rate of `2 y2 -> y2 + y3` [1/(conc s)].
    pub k2: f64,
    /// Second-order rate of `y2 + y3 -> y1 + y3` [1/(conc s)].
    pub k3: f64,
}

impl RateConstants {
    /// The classic Robertson parametrization (0.04, 3e7, 1e4).
    pub const ROBERTSON: RateConstants = RateConstants { k1: 0.04, k2: 3.0e7, k3: 1.0e4 };

    pub fn new(k1: f64, k2: f64, k3: f64) -> Option<Self> {
        let k = RateConstants { k1, k2, k3 };
        k.is_valid().then_some(k)
    }

    pub fn is_valid(&self) -> bool {
        [self.k1, self.k2, self.k3].iter().all(|k| k.is_finite() && *k > 0.0)
    }
}

impl Default for RateConstants {
    fn default() -> Self {
        Self::ROBERTSON
    }
}

/// Species concentrations at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub y1: f64,
    pub y2: f64,
    pub y3: f64,
}

impl StateVector {
    pub const fn new(y1: f64, y2: f64, y3: f64) -> Self {
        StateVector { y1, y2, y3 }
    }

    pub fn from_slice(y: &[f64]) -> Self {
        StateVector::new(y[0], y[1], y[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.y1, self.y2, self.y3]
    }

    pub fn is_finite(&self) -> bool {
        self.y1.is_finite() && self.y2.is_finite() && self.y3.is_finite()
    }

    /// True when every component is finite and non-negative.
    pub fn is_physical(&self) -> bool {
        self.is_finite() && self.y1 >= 0.0 && self.y2 >= 0.0 && self.y3 >= 0.0
    }
}

impl From<[f64; 3]> for StateVector {
    fn from(y: [f64; 3]) -> Self {
        StateVector::new(y[0], y[1], y[2])
    }
}

pub fn rober_rhs(y: &StateVector, k: &RateConstants) -> [f64; 3] {
    let r1 = k.k1 * y.y1;
    let r2 = k.k2 * y.y2 * y.y2;
    let r3 = k.k3 * y.y2 * y.y3;
    [-r1 + r3, r1 - r2 - r3, r2]
}

/// Row-major analytic Jacobian of [`rober_rhs`].
pub fn rober_jacobian(y: &StateVector, k: &RateConstants) -> [[f64; 3]; 3] {
    [
        [-k.k1, k.k3 * y.y3, k.k3 * y.y2],
        [k.k1, -2.0 * k.k2 * y.y2 - k.k3 * y.y3, -k.k3 * y.y2],
        [0.0, 2.0 * k.k2 * y.y2, 0.0],
    ]
}

/// Total mass `y1 + y2 + y3`, conserved by the dynamics.
pub fn mass_total(y: &StateVector) -> f64 {
    y.y1 + y.y2 + y.y3
}

/// ROBER behind the generic [`OdeSystem`] interface.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rober {
    pub rates: RateConstants,
}

impl Rober {
    pub fn new(rates: RateConstants) -> Self {
        Rober { rates }
    }
}

impl OdeSystem for Rober {
    fn dimension(&self) -> usize {
        3
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        dy[..3].copy_from_slice(&rober_rhs(&StateVector::from_slice(y), &self.rates));
    }

    fn jacobian(&self, _t: f64, y: &[f64], jac: &mut [f64]) {
        let j = rober_jacobian(&StateVector::from_slice(y), &self.rates);
        for (row, src) in jac.chunks_exact_mut(3).zip(j.iter()) {
            row.copy_from_slice(src);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const K: RateConstants = RateConstants::ROBERTSON;

    fn fd_jacobian(y: &StateVector, k: &RateConstants) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for j in 0..3 {
            let base = y.to_array();
            let step = 1e-7 * base[j].abs().max(1.0);
            let mut plus = base;
            let mut minus = base;
            plus[j] += step;
            minus[j] -= step;
            let fp = rober_rhs(&plus.into(), k);
            let fm = rober_rhs(&minus.into(), k);
            for i in 0..3 {
                out[i][j] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale == 0.0 {
            0.0
        } else {
            (a - b).abs() / scale
        }
    }

    #[test]
    fn rhs_vanishes_at_origin() {
        assert_eq!(rober_rhs(&StateVector::new(0.0, 0.0, 0.0), &K), [0.0; 3]);
        let other = RateConstants::new(1.5, 2.0, 7.0).unwrap();
        assert_eq!(rober_rhs(&StateVector::new(0.0, 0.0, 0.0), &other), [0.0; 3]);
    }

    #[test]
    fn rhs_pure_first_species() {
        let d = rober_rhs(&StateVector::new(1.0, 0.0, 0.0), &K);
        assert_eq!(d, [-0.04, 0.04, 0.0]);
    }

    #[test]
    fn rhs_sums_to_zero() {
        let d = rober_rhs(&StateVector::new(0.3, 0.2, 0.5), &K);
        let s: f64 = d.iter().sum();
        let largest = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(s.abs() <= 4.0 * largest * f64::EPSILON, "sum {s}");
    }

    #[test]
    fn jacobian_at_origin() {
        let j = rober_jacobian(&StateVector::new(0.0, 0.0, 0.0), &K);
        assert_eq!(j, [[-0.04, 0.0, 0.0], [0.04, 0.0, 0.0], [0.0, 0.0, 0.0]]);
    }

    #[test]
    fn jacobian_matches_finite_differences_at_reference_state() {
        let y = StateVector::new(0.5, 1e-5, 0.5);
        let a = rober_jacobian(&y, &K);
        let n = fd_jacobian(&y, &K);
        for i in 0..3 {
            for j in 0..3 {
                assert!(rel_err(a[i][j], n[i][j]) < 1e-6, "({i},{j}) {} vs {}", a[i][j], n[i][j]);
            }
        }
    }

    #[test]
    fn mass_examples() {
        assert_eq!(mass_total(&StateVector::new(1.0, 0.0, 0.0)), 1.0);
        let m = mass_total(&StateVector::new(0.776, 6.913e-5, 0.081));
        assert!((m - 0.85706913).abs() < 1e-15);
    }

    #[test]
    fn system_trait_matches_free_functions() {
        let sys = Rober::new(K);
        let y = [0.2, 3e-5, 0.7];
        let mut dy = [0.0; 3];
        let mut jac = [0.0; 9];
        sys.rhs(0.0, &y, &mut dy);
        sys.jacobian(0.0, &y, &mut jac);
        assert_eq!(dy, rober_rhs(&y.into(), &K));
        let j = rober_jacobian(&y.into(), &K);
        assert_eq!(jac[3..6], j[1]);
        assert_eq!(sys.dimension(), 3);
    }

    #[test]
    fn rejects_non_positive_rates() {
        assert!(RateConstants::new(0.0, 1.0, 1.0).is_none());
        assert!(RateConstants::new(1.0, -1.0, 1.0).is_none());
        assert!(RateConstants::new(1.0, 1.0, f64::NAN).is_none());
    }

    fn component() -> impl Strategy<Value = f64> {
        prop_oneof![0.0f64..=1.0, (-8.0f64..=-4.0).prop_map(|e| 10f64.powf(e))]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn conservation_holds(y1 in component(), y2 in component(), y3 in component()) {
            let d = rober_rhs(&StateVector::new(y1, y2, y3), &K);
            let largest = [K.k1 * y1, K.k2 * y2 * y2, K.k3 * y2 * y3]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let s = d[0] + d[1] + d[2];
            prop_assert!(s.abs() <= 4.0 * largest * f64::EPSILON);
        }

        #[test]
        fn jacobian_consistent(y1 in component(), y2 in component(), y3 in component()) {
            let y = StateVector::new(y1, y2, y3);
            let a = rober_jacobian(&y, &K);
            let n = fd_jacobian(&y, &K);
            for i in 0..3 {
                for j in 0..3 {
                    // Entries are polynomial in y, so central differences are exact up to
                    // cancellation, which is bounded relative to the row scale.
                    let scale = a[i].iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
                    prop_assert!((a[i][j] - n[i][j]).abs() / scale < 1e-5,
                        "({},{}) {} vs {}", i, j, a[i][j], n[i][j]);
                }
                let col: f64 = (0..3).map(|r| a[r][i]).sum();
                let scale = (0..3).map(|r| a[r][i].abs()).fold(0.0, f64::max);
                prop_assert!(col.abs() <= 4.0 * scale * f64::EPSILON);
            }
        }

        #[test]
        fn pure_and_euler_step_conserves(y1 in component(), y2 in component(), y3 in component(), dt in 1e-6f64..1e-2) {
            let y = StateVector::new(y1, y2, y3);
            let a = rober_rhs(&y, &K);
            let b = rober_rhs(&y, &K);
            prop_assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
            let stepped = StateVector::new(y1 + dt * a[0], y2 + dt * a[1], y3 + dt * a[2]);
            let drift = (mass_total(&stepped) - mass_total(&y)).abs();
            let scale = 1.0 + dt * a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(drift <= 8.0 * scale * f64::EPSILON);
        }
    }
}
