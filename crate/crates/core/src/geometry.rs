//! Magnetic fields on the plane: gauge potentials, link phases, fluxes
//! through triangles and magnetic translations.

use crate::error::{invalid, Result};
use crate::linalg::{cis, ZERO};
use faer::c64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub fn wedge(x: [f64; 2], y: [f64; 2]) -> f64 {
    x[0] * y[1] - x[1] * y[0]
}

fn sub(x: [f64; 2], y: [f64; 2]) -> [f64; 2] {
    [x[0] - y[0], x[1] - y[1]]
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = x;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Real Fourier series Σ c_k e^{2πi k·x}.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FourierSeries {
    pub modes: Vec<([f64; 2], c64)>,
}

impl FourierSeries {
    pub fn value(&self, x: [f64; 2]) -> f64 {
        let mut s = ZERO;
        for (k, c) in &self.modes {
            s += c * cis(2.0 * PI * (k[0] * x[0] + k[1] * x[1]));
        }
        s.re
    }

    pub fn max_frequency(&self) -> f64 {
        self.modes
            .iter()
            .map(|(k, _)| k[0].hypot(k[1]))
            .fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        FourierSeries {
            modes: self.modes.iter().map(|(k, c)| (*k, c * s)).collect(),
        }
    }

    /// Checks the coefficients describe a real function.
    pub fn check_real(&self) -> Result<()> {
        for (k, c) in &self.modes {
            let partner: c64 = self
                .modes
                .iter()
                .filter(|(q, _)| q[0] == -k[0] && q[1] == -k[1])
                .map(|(_, d)| *d)
                .sum();
            if (partner - c.conj()).norm() > 1e-12 * (1.0 + c.norm()) {
                return invalid(format!("mode {k:?} lacks its conjugate partner"));
            }
        }
        Ok(())
    }
}

/// Periodic transverse vector potential A = (-∂₂φ, ∂₁φ).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PeriodicPotential {
    pub a1: FourierSeries,
    pub a2: FourierSeries,
}

impl PeriodicPotential {
    pub fn value(&self, x: [f64; 2]) -> [f64; 2] {
        [self.a1.value(x), self.a2.value(x)]
    }

    pub fn is_zero(&self) -> bool {
        self.a1.is_empty() && self.a2.is_empty()
    }

    /// ∫ A·dl along the segment x→y, composite 8-point Gauss-Legendre.
    pub fn line_integral(&self, x: [f64; 2], y: [f64; 2], order: usize) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let d = sub(y, x);
        let kmax = self.a1.max_frequency().max(self.a2.max_frequency());
        let panels = ((2.0 * kmax * d[0].hypot(d[1])).ceil() as usize).max(1);
        let rule = gauss_legendre(order);
        let mut acc = 0.0;
        for p in 0..panels {
            for &(t, w) in &rule {
                let s = (p as f64 + t) / panels as f64;
                let a = self.value([x[0] + s * d[0], x[1] + s * d[1]]);
                acc += w * (a[0] * d[0] + a[1] * d[1]);
            }
        }
        acc / panels as f64
    }
}

/// Solves Δφ = B for a zero-mean periodic B and returns A = (-∂₂φ, ∂₁φ).
pub fn periodic_potential_from_field(field: &FourierSeries) -> Result<PeriodicPotential> {
    field.check_real()?;
    let mut a1 = Vec::new();
    let mut a2 = Vec::new();
    for (k, c) in &field.modes {
        let k2 = k[0] * k[0] + k[1] * k[1];
        if k2 == 0.0 {
            if c.norm() > 0.0 {
                return invalid("periodic field has nonzero mean; move it into the constant part");
            }
            continue;
        }
        let phi = -c / (4.0 * PI * PI * k2);
        // ∂_j e^{2πi k·x} = 2πi k_j e^{2πi k·x}
        a1.push((*k, -c64::new(0.0, 2.0 * PI * k[1]) * phi));
        a2.push((*k, c64::new(0.0, 2.0 * PI * k[0]) * phi));
    }
    Ok(PeriodicPotential {
        a1: FourierSeries { modes: a1 },
        a2: FourierSeries { modes: a2 },
    })
}

/// Field b + B_per(x), in the transverse gauge A = (b/2)(-x₂, x₁) + A_per.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaugeField {
    pub b: f64,
    pub periodic: FourierSeries,
    pub potential: PeriodicPotential,
}

impl GaugeField {
    pub fn constant(b: f64) -> Self {
        GaugeField {
            b,
            ..Default::default()
        }
    }

    pub fn new(b: f64, periodic: FourierSeries) -> Result<Self> {
        let potential = periodic_potential_from_field(&periodic)?;
        Ok(GaugeField {
            b,
            periodic,
            potential,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.b == 0.0 && self.periodic.is_empty()
    }

    pub fn field(&self, x: [f64; 2]) -> f64 {
        self.b + self.periodic.value(x)
    }

    /// ∫_x^y A·dl.
    pub fn line_integral(&self, x: [f64; 2], y: [f64; 2], order: usize) -> f64 {
        0.5 * self.b * wedge(x, y) + self.potential.line_integral(x, y, order)
    }

    /// Λ(x,y) = exp(-i ∫_x^y A·dl) with 8-point quadrature.
    pub fn line_phase(&self, x: [f64; 2], y: [f64; 2]) -> c64 {
        cis(-self.line_integral(x, y, 8))
    }

    /// Normalized flux moment ∫₀¹ds ∫₀¹du s B(a + s(x-a) + us(y-x)).
    pub fn flux_moment(&self, a: [f64; 2], x: [f64; 2], y: [f64; 2]) -> f64 {
        if self.periodic.is_empty() {
            return 0.5 * self.b;
        }
        let rule = gauss_legendre(8);
        let mut acc = 0.0;
        for &(s, ws) in &rule {
            for &(u, wu) in &rule {
                let p = [
                    a[0] + s * (x[0] - a[0]) + u * s * (y[0] - x[0]),
                    a[1] + s * (x[1] - a[1]) + u * s * (y[1] - x[1]),
                ];
                acc += ws * wu * s * self.field(p);
            }
        }
        acc
    }

    /// Oriented flux through the triangle (x, y, z).
    pub fn triangle_flux(&self, x: [f64; 2], y: [f64; 2], z: [f64; 2]) -> f64 {
        let area2 = wedge(sub(y, x), sub(z, x));
        let diam = [sub(y, x), sub(z, y), sub(x, z)]
            .iter()
            .map(|d| d[0].hypot(d[1]))
            .fold(0.0, f64::max);
        if !self.periodic.is_empty() && diam * self.periodic.max_frequency() > 0.5 {
            let m = |p: [f64; 2], q: [f64; 2]| [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
            let (a, b, c) = (m(x, y), m(y, z), m(z, x));
            return self.triangle_flux(x, a, c)
                + self.triangle_flux(a, y, b)
                + self.triangle_flux(c, b, z)
                + self.triangle_flux(a, b, c);
        }
        self.flux_moment(x, y, z) * area2
    }

    /// Ω(x,y,z) = exp(-i flux).
    pub fn omega(&self, x: [f64; 2], y: [f64; 2], z: [f64; 2]) -> c64 {
        cis(-self.triangle_flux(x, y, z))
    }

    /// Lattice restriction Λ̃(α, β) of the constant part, e^{-i(b/2) α∧β}.
    pub fn constant_phase(&self, a: [f64; 2], b: [f64; 2]) -> c64 {
        cis(-0.5 * self.b * wedge(a, b))
    }
}

/// JSON description of the perturbing field ε(b + c·Σ modes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMode {
    pub k: [f64; 2],
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagneticFieldSpec {
    pub epsilon: f64,
    pub constant_b: f64,
    #[serde(default)]
    pub fluctuation_c: f64,
    #[serde(default)]
    pub modes: Vec<FieldMode>,
}

impl MagneticFieldSpec {
    pub fn constant(epsilon: f64, b: f64) -> Self {
        MagneticFieldSpec {
            epsilon,
            constant_b: b,
            fluctuation_c: 0.0,
            modes: Vec::new(),
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        MagneticFieldSpec {
            epsilon,
            ..self.clone()
        }
    }

    pub fn fluctuation_series(&self) -> FourierSeries {
        FourierSeries {
            modes: self
                .modes
                .iter()
                .map(|m| (m.k, c64::new(m.re, m.im)))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return invalid(format!("epsilon {} must be finite and nonnegative", self.epsilon));
        }
        if !self.constant_b.is_finite() || !self.fluctuation_c.is_finite() {
            return invalid("field amplitudes must be finite");
        }
        periodic_potential_from_field(&self.fluctuation_series())?;
        Ok(())
    }

    /// The full perturbing field at strength ε.
    pub fn gauge(&self) -> Result<GaugeField> {
        GaugeField::new(
            self.epsilon * self.constant_b,
            self.fluctuation_series().scaled(self.epsilon * self.fluctuation_c),
        )
    }

    /// Constant part εb only.
    pub fn constant_gauge(&self) -> GaugeField {
        GaugeField::constant(self.epsilon * self.constant_b)
    }

    /// Fluctuating part εc·B_per only.
    pub fn fluctuation_gauge(&self) -> Result<GaugeField> {
        GaugeField::new(
            0.0,
            self.fluctuation_series().scaled(self.epsilon * self.fluctuation_c),
        )
    }

    /// The field without the ε prefactor, b + c·B_per.
    pub fn unit_gauge(&self) -> Result<GaugeField> {
        GaugeField::new(
            self.constant_b,
            self.fluctuation_series().scaled(self.fluctuation_c),
        )
    }
}

/// Λ̃^ε(x, y) for the full field.
pub fn line_phase(spec: &MagneticFieldSpec, x: [f64; 2], y: [f64; 2]) -> Result<c64> {
    Ok(spec.gauge()?.line_phase(x, y))
}

pub fn triangle_flux(spec: &MagneticFieldSpec, x: [f64; 2], y: [f64; 2], z: [f64; 2]) -> Result<f64> {
    Ok(spec.gauge()?.triangle_flux(x, y, z))
}

pub fn omega(spec: &MagneticFieldSpec, x: [f64; 2], y: [f64; 2], z: [f64; 2]) -> Result<c64> {
    Ok(spec.gauge()?.omega(x, y, z))
}

/// Flux moments Φ_α(x,y) and Φ_{α,β}(y) of the unit field (ε factored out).
pub fn flux_moments(
    spec: &MagneticFieldSpec,
    alpha: [f64; 2],
    beta: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
) -> Result<(f64, f64)> {
    let g = spec.unit_gauge()?;
    Ok((g.flux_moment(alpha, x, y), g.flux_moment(alpha, beta, y)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in [1usize, 4, 8] {
            let r = gauss_legendre(n);
            let w: f64 = r.iter().map(|p| p.1).sum();
            assert!((w - 1.0).abs() < 1e-14);
            let deg = 2 * n - 1;
            let s: f64 = r.iter().map(|&(t, w)| w * t.powi(deg as i32)).sum();
            assert!((s - 1.0 / (deg + 1) as f64).abs() < 1e-14, "n={n}");
        }
    }

    #[test]
    fn cosine_field_potential() {
        let f = FourierSeries {
            modes: vec![([1.0, 0.0], c64::new(0.5, 0.0)), ([-1.0, 0.0], c64::new(0.5, 0.0))],
        };
        let a = periodic_potential_from_field(&f).unwrap();
        for &x in &[0.0, 0.13, 0.5, 0.77] {
            let v = a.value([x, 0.3]);
            assert!(v[0].abs() < 1e-15);
            assert!((v[1] - (2.0 * PI * x).sin() / (2.0 * PI)).abs() < 1e-15);
        }
    }

    #[test]
    fn nonzero_mean_rejected() {
        let f = FourierSeries {
            modes: vec![([0.0, 0.0], c64::new(1.0, 0.0))],
        };
        assert!(periodic_potential_from_field(&f).is_err());
    }

    #[test]
    fn constant_line_phase_example() {
        let spec = MagneticFieldSpec::constant(0.1, 2.0);
        let p = line_phase(&spec, [1.0, 0.0], [0.0, 1.0]).unwrap();
        assert!((p - cis(-0.1)).norm() < 1e-15);
        assert!((line_phase(&spec, [0.3, 0.2], [0.3, 0.2]).unwrap() - 1.0).norm() < 1e-15);
    }

    #[test]
    fn unit_triangle_flux() {
        let g = GaugeField::constant(1.0);
        let f = g.triangle_flux([0.0, 0.0], [1.0, 0.0], [0.0, 1.0]);
        assert!((f - 0.5).abs() < 1e-15);
    }
}
