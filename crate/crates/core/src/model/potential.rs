use std::f64::consts::PI;

/// A smooth potential `V: R^m -> R`, target density proportional to `exp(-V)`.
pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, q: &[f64]) -> f64;
    fn gradient(&self, q: &[f64], out: &mut [f64]);
    /// Row-major `m x m` Hessian.
    fn hessian(&self, q: &[f64], out: &mut [f64]);
}

/// One-dimensional double well `q² - 1 + h φ_σ(q)`, where `φ_σ` is the
/// centered Gaussian density with standard deviation `σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleWell {
    pub sigma: f64,
    pub height: f64,
}

impl Default for DoubleWell {
    fn default() -> Self {
        DoubleWell { sigma: 0.2, height: 1.0 }
    }
}

impl DoubleWell {
    fn bump(&self, q: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        self.height / (2.0 * PI * s2).sqrt() * (-q * q / (2.0 * s2)).exp()
    }

    pub fn value_1d(&self, q: f64) -> f64 {
        q * q - 1.0 + self.bump(q)
    }
}

impl Potential for DoubleWell {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, q: &[f64]) -> f64 {
        self.value_1d(q[0])
    }

    fn gradient(&self, q: &[f64], out: &mut [f64]) {
        let s2 = self.sigma * self.sigma;
        out[0] = 2.0 * q[0] - self.bump(q[0]) * q[0] / s2;
    }

    fn hessian(&self, q: &[f64], out: &mut [f64]) {
        let s2 = self.sigma * self.sigma;
        let x = q[0];
        out[0] = 2.0 + self.bump(x) * (x * x / (s2 * s2) - 1.0 / s2);
    }
}

/// Ring potential `k (|q|² - 1)²`, concentrated near the unit circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub stiffness: f64,
}

impl Default for Circle {
    fn default() -> Self {
        Circle { stiffness: 100.0 }
    }
}

impl Potential for Circle {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, q: &[f64]) -> f64 {
        let s = q[0] * q[0] + q[1] * q[1] - 1.0;
        self.stiffness * s * s
    }

    fn gradient(&self, q: &[f64], out: &mut [f64]) {
        let s = q[0] * q[0] + q[1] * q[1] - 1.0;
        out[0] = 4.0 * self.stiffness * s * q[0];
        out[1] = 4.0 * self.stiffness * s * q[1];
    }

    fn hessian(&self, q: &[f64], out: &mut [f64]) {
        let k = self.stiffness;
        let s = q[0] * q[0] + q[1] * q[1] - 1.0;
        out[0] = 4.0 * k * s + 8.0 * k * q[0] * q[0];
        out[1] = 8.0 * k * q[0] * q[1];
        out[2] = out[1];
        out[3] = 4.0 * k * s + 8.0 * k * q[1] * q[1];
    }
}

/// Quadratic potential `½ qᵀ A q` with symmetric `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    dim: usize,
    a: Vec<f64>,
}

impl Quadratic {
    pub fn new(dim: usize, a: Vec<f64>) -> Self {
        assert_eq!(a.len(), dim * dim);
        Quadratic { dim, a }
    }

    pub fn isotropic(dim: usize, scale: f64) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = scale;
        }
        Quadratic { dim, a }
    }
}

impl Potential for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, q: &[f64]) -> f64 {
        0.5 * crate::linalg::quad_form(&self.a, q)
    }

    fn gradient(&self, q: &[f64], out: &mut [f64]) {
        crate::linalg::mat_vec(&self.a, q, out);
    }

    fn hessian(&self, _q: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.a);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::*;
    use proptest::prelude::*;

    fn check_derivatives(v: &dyn Potential, q: &[f64]) {
        let m = v.dim();
        let mut g = vec![0.0; m];
        v.gradient(q, &mut g);
        assert_close(&g, &fd_gradient(|x| v.value(x), q, 1e-6), 1e-6);
        let mut h = vec![0.0; m * m];
        v.hessian(q, &mut h);
        let fd = fd_jacobian(|x, out| v.gradient(x, out), q, m, 1e-6);
        assert_close(&h, &fd, 1e-5);
    }

    #[test]
    fn double_well_barrier() {
        let v = DoubleWell::default();
        // V(0) = -1 + 1/sqrt(2π·0.04)
        let expect = -1.0 + 1.0 / (2.0 * PI * 0.04_f64).sqrt();
        assert!((v.value(&[0.0]) - expect).abs() < 1e-14);
        assert!((expect - 0.994_711_402).abs() < 1e-8);
        let mut h = [0.0];
        v.hessian(&[0.0], &mut h);
        assert!(h[0] < 0.0, "the origin is a local maximum");
    }

    #[test]
    fn circle_minimum_on_unit_circle() {
        let v = Circle::default();
        let t = 0.3_f64;
        assert!(v.value(&[t.cos(), t.sin()]) < 1e-28);
        assert_eq!(v.value(&[0.0, 0.0]), 100.0);
    }

    proptest! {
        #[test]
        fn double_well_derivatives(q in -2.5..2.5f64) {
            check_derivatives(&DoubleWell::default(), &[q]);
        }

        #[test]
        fn double_well_is_even(q in -3.0..3.0f64) {
            let v = DoubleWell::default();
            prop_assert_eq!(v.value(&[q]), v.value(&[-q]));
        }

        #[test]
        fn circle_derivatives(x in -1.5..1.5f64, y in -1.5..1.5f64) {
            check_derivatives(&Circle::default(), &[x, y]);
        }

        #[test]
        fn quadratic_derivatives(x in -2.0..2.0f64, y in -2.0..2.0f64) {
            check_derivatives(&Quadratic::new(2, vec![2.0, 0.5, 0.5, 1.0]), &[x, y]);
        }
    }
}
