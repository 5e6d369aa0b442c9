//! One-dimensional quadrature rules and Gaussian expectations.

use std::f64::consts::PI;

/// Gauss–Legendre nodes (ascending) and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_legendre needs at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 1..=m {
        let mut z = (PI * (i as f64 - 0.25) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                // one more derivative evaluation at the converged root
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
                }
                pp = nf * (z * p1 - p2) / (z * z - 1.0);
                break;
            }
        }
        x[i - 1] = -z;
        x[n - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * pp * pp);
        w[i - 1] = wi;
        w[n - i] = wi;
    }
    (x, w)
}

/// Gauss–Hermite rule for expectations under the standard normal law:
/// `E[f(Z)] ≈ Σ w_i f(x_i)`, weights summing to one.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_hermite_normal needs at least one node");
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let inv_sqrt_pi = 1.0 / PI.sqrt();
    let mut nodes: Vec<f64> = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
    let mut weights: Vec<f64> = w.iter().map(|v| v * inv_sqrt_pi).collect();
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

/// Expectations `E[f(Z)]`, `Z ~ N(0,1)`, for piecewise-smooth `f`.
///
/// The line is truncated to `[-T, T]` and cut into panels at the supplied
/// split points; each panel gets a Gauss–Legendre rule. Kinks of `f` placed on
/// panel edges do not degrade the convergence order.
#[derive(Clone, Debug)]
pub struct NormalQuadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    truncation: f64,
}

/// Longer panels are subdivided evenly.
const MAX_PANEL: f64 = 10.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl NormalQuadrature {
    pub fn new(nodes_per_panel: usize, truncation: f64) -> Self {
        let (nodes, weights) = gauss_legendre(nodes_per_panel);
        Self { nodes, weights, truncation }
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    /// `splits` must be sorted ascending; points outside `(-T, T)` are ignored.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F, splits: &[f64]) -> f64 {
        let t = self.truncation;
        let mut lo = -t;
        let mut total = 0.0;
        for &s in splits {
            if s > lo && s < t {
                total += self.panel(&mut f, lo, s);
                lo = s;
            }
        }
        total + self.panel(&mut f, lo, t)
    }

    fn panel<F: FnMut(f64) -> f64>(&self, f: &mut F, lo: f64, hi: f64) -> f64 {
        let pieces = ((hi - lo) / MAX_PANEL).ceil().max(1.0) as usize;
        if pieces > 1 {
            let h = (hi - lo) / pieces as f64;
            return (0..pieces).map(|k| self.panel(f, lo + h * k as f64, lo + h * (k + 1) as f64)).sum();
        }
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let z = mid + half * x;
            acc += w * f(z) * (-0.5 * z * z).exp();
        }
        acc * half * INV_SQRT_2PI
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_legendre() {
        let (x, w) = gauss_legendre(2);
        let r = 1.0 / 3f64.sqrt();
        assert!((x[0] + r).abs() < 1e-15 && (x[1] - r).abs() < 1e-15);
        assert!((w[0] - 1.0).abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn legendre_exact_for_degree_2n_minus_1() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((got - exact).abs() < 1e-13, "n={n} deg={deg} got={got}");
            }
        }
    }

    #[test]
    fn hermite_moments() {
        // E[Z^{2k}] = (2k-1)!!
        for n in [2usize, 5, 20, 40, 80] {
            let (x, w) = gauss_hermite_normal(n);
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-13, "n={n} sum={s}");
            let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
            assert!((m2 - 1.0).abs() < 1e-12);
            if n >= 3 {
                let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
                assert!((m4 - 3.0).abs() < 1e-11);
            }
            assert!(x.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn panel_rule_handles_kinks() {
        let q = NormalQuadrature::new(40, 10.0);
        let v = q.expect(|z| z.max(0.0).powi(2), &[0.0]);
        assert!((v - 0.5).abs() < 1e-14);
        let v = q.expect(|z| z.abs(), &[0.0]);
        assert!((v - (2.0 / PI).sqrt()).abs() < 1e-14);
        let v = q.expect(|_| 1.0, &[]);
        assert!((v - 1.0).abs() < 1e-14);
    }
}
