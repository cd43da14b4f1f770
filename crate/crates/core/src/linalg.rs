//! Small dense solvers used on hot paths, where allocating nalgebra
//! matrices per call would dominate the cost.

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
/// `a` is `n × n` row-major and is destroyed; on success `b` holds `x`.
/// Returns `false` if a pivot falls below `pivot_tol`.
pub(crate) fn solve_in_place(a: &mut [f64], b: &mut [f64], n: usize, pivot_tol: f64) -> bool {
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for row in col + 1..n {
            let v = a[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if !(best > pivot_tol) {
            return false;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f != 0.0 {
                for j in col..n {
                    a[row * n + j] -= f * a[col * n + j];
                }
                b[row] -= f * b[col];
            }
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for j in col + 1..n {
            s -= a[col * n + j] * b[j];
        }
        b[col] = s / a[col * n + col];
    }
    true
}
