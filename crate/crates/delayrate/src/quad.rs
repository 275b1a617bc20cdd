//! Composite Gauss–Legendre quadrature over kink-aligned, optionally graded panels.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Nodes and weights of an n-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on P_n with the usual Chebyshev initial guess.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrate `f` over [lo, hi] with this rule.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, lo: f64, hi: f64, mut f: F) -> f64 {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let mut s = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            s += w * f(mid + half * x);
        }
        s * half
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

pub fn gl16() -> &'static GaussLegendre {
    static R: OnceLock<GaussLegendre> = OnceLock::new();
    R.get_or_init(|| GaussLegendre::new(16))
}

pub fn gl8() -> &'static GaussLegendre {
    static R: OnceLock<GaussLegendre> = OnceLock::new();
    R.get_or_init(|| GaussLegendre::new(8))
}

/// Panel edges covering [lo, hi]: every breakpoint strictly inside becomes an edge,
/// and when `rate * width > 2` a panel is split geometrically from both ends,
/// starting at width `1/rate` and doubling toward the middle.
///
/// The grading resolves the `exp(b u)` boundary layers that follow each kink when |b| is large.
pub fn panels(lo: f64, hi: f64, breaks: &[f64], rate: f64) -> Vec<f64> {
    let mut edges: Vec<f64> = Vec::with_capacity(breaks.len() + 2);
    edges.push(lo);
    for &x in breaks {
        if x > lo && x < hi {
            edges.push(x);
        }
    }
    edges.push(hi);
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * (1.0 + b.abs()));
    let rate = rate.abs();
    if !(rate > 0.0) || !rate.is_finite() {
        return edges;
    }
    let mut out = Vec::with_capacity(edges.len() * 4);
    out.push(edges[0]);
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = b - a;
        if rate * len <= 2.0 {
            out.push(b);
            continue;
        }
        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut step = 1.0 / rate;
        let (mut xl, mut xr) = (a, b);
        while xr - xl > 4.0 * step {
            xl += step;
            xr -= step;
            left.push(xl);
            right.push(xr);
            step *= 2.0;
        }
        out.extend(left);
        out.extend(right.into_iter().rev());
        out.push(b);
    }
    out
}

/// GL16 over the given panel edges.
pub fn integrate_panels<F: FnMut(f64) -> f64>(edges: &[f64], mut f: F) -> f64 {
    let rule = gl16();
    edges
        .windows(2)
        .map(|w| rule.integrate(w[0], w[1], &mut f))
        .sum()
}

/// GL16 on the panels and on every panel bisected. Returns (refined value, |difference|, ∫|f|).
pub fn integrate_checked<F: FnMut(f64) -> f64>(edges: &[f64], mut f: F) -> (f64, f64, f64) {
    let rule = gl16();
    let mut coarse = 0.0;
    let mut fine = 0.0;
    let mut scale = 0.0;
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let m = 0.5 * (a + b);
        coarse += rule.integrate(a, b, &mut f);
        let l = rule.integrate(a, m, &mut f);
        let r = rule.integrate(m, b, &mut f);
        fine += l + r;
        scale += rule.integrate(a, m, |x| f(x).abs()) + rule.integrate(m, b, |x| f(x).abs());
    }
    (fine, (fine - coarse).abs(), scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_integrates_polynomials_exactly() {
        let g = GaussLegendre::new(16);
        let s: f64 = g.weights.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        // degree 31 is the exactness limit
        let v = g.integrate(0.0, 1.0, |x| x.powi(31));
        assert!((v - 1.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn graded_panels_resolve_boundary_layer() {
        let b = -26303.0;
        let e = panels(0.0, 1.0, &[], b);
        let v = integrate_panels(&e, |u| (b * u).exp());
        let exact = (1.0 - (b * 1.0f64).exp()) / -b;
        assert!(((v - exact) / exact).abs() < 1e-13);
    }

    #[test]
    fn breakpoints_become_edges() {
        let e = panels(0.0, 3.0, &[1.0, 2.0, 5.0, -1.0], 0.0);
        assert_eq!(e, vec![0.0, 1.0, 2.0, 3.0]);
    }
}
