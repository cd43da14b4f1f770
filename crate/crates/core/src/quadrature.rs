//! Composite Gauss–Legendre quadrature with panel doubling.

use std::sync::OnceLock;

const NODES: usize = 20;
const MAX_LEVEL: u32 = 18;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P_{n-1}(x).
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(NODES))
}

/// Integrates a vector-valued `f` over `[a, b]`, doubling the number of
/// equal panels until successive estimates differ by at most `tol` in every
/// component. `f(x, out)` must add nothing and overwrite `out`.
pub fn integrate_vec<F>(a: f64, b: f64, dim: usize, tol: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(f64, &mut [f64]),
{
    let (nodes, weights) = rule();
    let mut buf = vec![0.0; dim];
    let mut estimate = |panels: usize| -> Vec<f64> {
        let mut acc = vec![0.0; dim];
        let width = (b - a) / panels as f64;
        for p in 0..panels {
            let lo = a + p as f64 * width;
            let mid = lo + 0.5 * width;
            for (x, w) in nodes.iter().zip(weights) {
                f(mid + 0.5 * width * x, &mut buf);
                let scale = 0.5 * width * w;
                for (s, v) in acc.iter_mut().zip(&buf) {
                    *s += scale * v;
                }
            }
        }
        acc
    };
    let mut prev = estimate(1);
    for level in 1..=MAX_LEVEL {
        let next = estimate(1 << level);
        let diff = prev
            .iter()
            .zip(&next)
            .map(|(p, n)| (p - n).abs())
            .fold(0.0, f64::max);
        if diff <= tol {
            return next;
        }
        prev = next;
    }
    prev
}

/// Scalar convenience wrapper around [`integrate_vec`].
pub fn integrate<F: FnMut(f64) -> f64>(a: f64, b: f64, tol: f64, mut f: F) -> f64 {
    integrate_vec(a, b, 1, tol, |x, out| out[0] = f(x))[0]
}
