//! Small differentiable kernels: 2×2 Jacobian analysis, critical point
//! classification, the logistic sigmoid and a central-difference gradient
//! used as a test oracle throughout the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default classification margin in normalized field units.
pub const DEFAULT_EPS_CLASS: f64 = 1e-6;

/// Floor applied under the square root of the discriminant when
/// differentiating eigenvalue real parts, so the derivative stays finite at
/// the node/focus boundary.
pub const EPS_SQRT: f64 = 1e-12;

/// Spatial Jacobian `∂(u, v)/∂(x, y)` of a 2D vector field.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Jacobian2 {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
}

impl Jacobian2 {
    pub fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Self { a11, a12, a21, a22 }
    }

    /// Entries in row-major order `[a11, a12, a21, a22]`.
    pub fn to_array(self) -> [f64; 4] {
        [self.a11, self.a12, self.a21, self.a22]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn trace(&self) -> f64 {
        self.a11 + self.a22
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianAnalysis {
    pub trace: f64,
    pub det: f64,
    /// Discriminant `trace² − 4·det`.
    pub delta: f64,
    /// Smaller eigenvalue real part.
    pub lam1_re: f64,
    /// Larger eigenvalue real part.
    pub lam2_re: f64,
    /// True iff the eigenvalues form a complex-conjugate pair (`delta < 0`).
    pub is_complex: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticalKind {
    Sink,
    Source,
    Saddle,
    Degenerate,
}

/// Node (`Stable`, real eigenvalues) versus focus (`Unstable`, complex pair).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Unstable,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CriticalClass {
    pub kind: CriticalKind,
    pub stability: Stability,
}

impl std::fmt::Display for CriticalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CriticalKind::Sink => "sink",
            CriticalKind::Source => "source",
            CriticalKind::Saddle => "saddle",
            CriticalKind::Degenerate => "degenerate",
        };
        f.write_str(s)
    }
}

impl std::fmt::Display for Stability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
            Stability::Indeterminate => "indeterminate",
        };
        f.write_str(s)
    }
}

pub fn analyze_jacobian(j: Jacobian2) -> Result<JacobianAnalysis> {
    if !j.is_finite() {
        return Err(Error::NonFinite("jacobian"));
    }
    let trace = j.trace();
    let det = j.det();
    let delta = trace * trace - 4.0 * det;
    let (lam1_re, lam2_re, is_complex) = if delta >= 0.0 {
        let r = delta.sqrt();
        (0.5 * (trace - r), 0.5 * (trace + r), false)
    } else {
        (0.5 * trace, 0.5 * trace, true)
    };
    Ok(JacobianAnalysis {
        trace,
        det,
        delta,
        lam1_re,
        lam2_re,
        is_complex,
    })
}

pub fn classify(a: &JacobianAnalysis, eps_class: f64) -> CriticalClass {
    let kind = if a.lam2_re < -eps_class {
        CriticalKind::Sink
    } else if a.lam1_re > eps_class {
        CriticalKind::Source
    } else if a.lam1_re < -eps_class && a.lam2_re > eps_class {
        CriticalKind::Saddle
    } else {
        CriticalKind::Degenerate
    };
    // A saddle has det < 0, so its discriminant is positive.
    let stability = if kind == CriticalKind::Saddle || a.delta > eps_class {
        Stability::Stable
    } else if a.delta < -eps_class {
        Stability::Unstable
    } else {
        Stability::Indeterminate
    };
    CriticalClass { kind, stability }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`sigmoid`].
#[inline]
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Gradients of `(lam1_re, lam2_re)` with respect to the Jacobian entries
/// `[a11, a12, a21, a22]`, using the clamped square root on the node side.
pub fn eigen_real_parts_grad(j: Jacobian2) -> ([f64; 4], [f64; 4]) {
    let trace = j.trace();
    let delta = trace * trace - 4.0 * j.det();
    let d_trace = [1.0, 0.0, 0.0, 1.0];
    if delta < 0.0 {
        let g = d_trace.map(|v| 0.5 * v);
        return (g, g);
    }
    let d_delta = delta_grad(j);
    // d sqrt(max(delta, eps)) vanishes when the clamp is active.
    let root_scale = if delta > EPS_SQRT {
        0.5 / delta.max(EPS_SQRT).sqrt()
    } else {
        0.0
    };
    let mut g1 = [0.0; 4];
    let mut g2 = [0.0; 4];
    for i in 0..4 {
        let d_root = root_scale * d_delta[i];
        g1[i] = 0.5 * (d_trace[i] - d_root);
        g2[i] = 0.5 * (d_trace[i] + d_root);
    }
    (g1, g2)
}

/// Gradient of the discriminant `trace² − 4·det` with respect to the
/// Jacobian entries.
pub fn delta_grad(j: Jacobian2) -> [f64; 4] {
    let trace = j.trace();
    let d_det = [j.a22, -j.a21, -j.a12, j.a11];
    let d_trace = [1.0, 0.0, 0.0, 1.0];
    let mut g = [0.0; 4];
    for i in 0..4 {
        g[i] = 2.0 * trace * d_trace[i] - 4.0 * d_det[i];
    }
    g
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_gradient<F, E>(mut f: F, x: &[f64], h: f64) -> std::result::Result<Vec<f64>, E>
where
    F: FnMut(&[f64]) -> std::result::Result<f64, E>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn analyze(a: [f64; 4]) -> JacobianAnalysis {
        analyze_jacobian(Jacobian2::from_array(a)).unwrap()
    }

    #[test]
    fn diagonal_sink() {
        let a = analyze([-2.0, 0.0, 0.0, -1.0]);
        assert_eq!((a.trace, a.det, a.delta), (-3.0, 2.0, 1.0));
        assert_eq!((a.lam1_re, a.lam2_re), (-2.0, -1.0));
        assert!(!a.is_complex);
        let c = classify(&a, DEFAULT_EPS_CLASS);
        assert_eq!(c.kind, CriticalKind::Sink);
        assert_eq!(c.stability, Stability::Stable);
    }

    #[test]
    fn spiral_source() {
        let a = analyze([1.0, -2.0, 2.0, 1.0]);
        assert_eq!((a.trace, a.det, a.delta), (2.0, 5.0, -16.0));
        assert_eq!((a.lam1_re, a.lam2_re), (1.0, 1.0));
        assert!(a.is_complex);
        let c = classify(&a, DEFAULT_EPS_CLASS);
        assert_eq!((c.kind, c.stability), (CriticalKind::Source, Stability::Unstable));
    }

    #[test]
    fn reflection_saddle() {
        let a = analyze([0.0, 1.0, 1.0, 0.0]);
        assert_eq!((a.trace, a.det, a.delta), (0.0, -1.0, 4.0));
        assert_eq!((a.lam1_re, a.lam2_re), (-1.0, 1.0));
        let c = classify(&a, DEFAULT_EPS_CLASS);
        assert_eq!((c.kind, c.stability), (CriticalKind::Saddle, Stability::Stable));
    }

    #[test]
    fn center_is_degenerate() {
        let c = classify(&analyze([0.0, -1.0, 1.0, 0.0]), DEFAULT_EPS_CLASS);
        assert_eq!((c.kind, c.stability), (CriticalKind::Degenerate, Stability::Unstable));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(analyze_jacobian(Jacobian2::new(f64::NAN, 0.0, 0.0, 0.0)).is_err());
        assert!(analyze_jacobian(Jacobian2::new(0.0, f64::INFINITY, 0.0, 0.0)).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // 1 / (1 + e^-10)
        assert_abs_diff_eq!(sigmoid(10.0), 0.999_954_602_131_297_6, epsilon = 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn finite_differences() {
        let sq = |x: &[f64]| Ok::<_, ()>(x.iter().map(|v| v * v).sum());
        let g = finite_diff_gradient(sq, &[1.0, 2.0], 1e-4).unwrap();
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(g[1], 4.0, epsilon = 1e-8);

        let g = finite_diff_gradient(|_| Ok::<_, ()>(3.0), &[0.3, -1.0, 2.0], 1e-3).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));

        let g = finite_diff_gradient(|x| Ok::<_, ()>(x[0].sin()), &[0.0], 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn finite_differences_propagate_errors() {
        let r = finite_diff_gradient(|_| Err::<f64, _>("boom"), &[0.0], 1e-3);
        assert_eq!(r.unwrap_err(), "boom");
    }

    #[test]
    fn eigen_grad_matches_finite_differences() {
        let cases = [
            [-2.0, 0.3, 0.1, -1.0],
            [0.5, 1.5, 2.0, -0.7],
            [1.0, -2.0, 2.0, 1.0],
        ];
        for a in cases {
            let (g1, g2) = eigen_real_parts_grad(Jacobian2::from_array(a));
            let f1 = |x: &[f64]| Ok::<_, ()>(analyze([x[0], x[1], x[2], x[3]]).lam1_re);
            let f2 = |x: &[f64]| Ok::<_, ()>(analyze([x[0], x[1], x[2], x[3]]).lam2_re);
            let fd1 = finite_diff_gradient(f1, &a, 1e-6).unwrap();
            let fd2 = finite_diff_gradient(f2, &a, 1e-6).unwrap();
            for i in 0..4 {
                assert_abs_diff_eq!(g1[i], fd1[i], epsilon = 1e-6);
                assert_abs_diff_eq!(g2[i], fd2[i], epsilon = 1e-6);
            }
            let fdd = finite_diff_gradient(
                |x: &[f64]| Ok::<_, ()>(analyze([x[0], x[1], x[2], x[3]]).delta),
                &a,
                1e-6,
            )
            .unwrap();
            let gd = delta_grad(Jacobian2::from_array(a));
            for i in 0..4 {
                assert_abs_diff_eq!(gd[i], fdd[i], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn eigen_grad_finite_at_repeated_eigenvalue() {
        let (g1, g2) = eigen_real_parts_grad(Jacobian2::new(-1.0, 0.0, 0.0, -1.0));
        assert!(g1.iter().chain(g2.iter()).all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn analysis_invariants(a in prop::array::uniform4(-5.0f64..5.0)) {
            let r = analyze(a);
            prop_assert!(r.lam1_re <= r.lam2_re);
            prop_assert!((r.delta - (r.trace * r.trace - 4.0 * r.det)).abs() < 1e-12);
            prop_assert!((r.lam1_re + r.lam2_re - r.trace).abs() < 1e-10);
            if r.is_complex {
                prop_assert_eq!(r.lam1_re, r.trace / 2.0);
                prop_assert_eq!(r.lam2_re, r.trace / 2.0);
            }
            let c = classify(&r, DEFAULT_EPS_CLASS);
            if c.kind == CriticalKind::Saddle {
                prop_assert_eq!(c.stability, Stability::Stable);
            }
        }

        #[test]
        fn sigmoid_symmetry(x in -50.0f64..50.0) {
            let s = sigmoid(x);
            prop_assert!((0.0..=1.0).contains(&s));
            if x.abs() < 30.0 {
                prop_assert!(s > 0.0 && s < 1.0);
            }
            prop_assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
        }
    }
}
