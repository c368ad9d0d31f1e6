//! Small numerical kernels used throughout the crate: quadrature, finite
//! difference weights, stable summation and interpolation.

/// Two-point Gauss-Legendre quadrature of `f` over `[a, b]`.
///
/// Composite use over grid cells gives a fourth-order accurate accumulation,
/// which is what the scale-density convergence check expects.
pub fn gauss2<E, F: Fn(f64) -> Result<f64, E>>(f: &F, a: f64, b: f64) -> Result<f64, E> {
    const NODE: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    Ok(half * (f(mid - half * NODE)? + f(mid + half * NODE)?))
}

/// log(exp(a) + exp(b)) without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Finite-difference weights for the `m`-th derivative at `x0` from the given
/// nodes (Fornberg's algorithm). Works on arbitrary node spacing.
pub fn fornberg_weights(nodes: &[f64], x0: f64, m: usize) -> Vec<f64> {
    let n = nodes.len();
    assert!(m < n);
    let mut c = vec![vec![0.0; m + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = m.min(i);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|row| row[m]).collect()
}

/// Pairwise (tree) summation; deterministic and far more accurate than a
/// naive running sum for large arrays.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Monotone cubic (Fritsch-Carlson) slopes for interpolating `ys` over `xs`.
pub fn pchip_slopes(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    assert!(n >= 2 && ys.len() == n);
    let h: Vec<f64> = (0..n - 1).map(|i| xs[i + 1] - xs[i]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    d[0] = endpoint_slope(h[0], h.get(1).copied().unwrap_or(h[0]), delta[0], *delta.get(1).unwrap_or(&delta[0]));
    d[n - 1] = endpoint_slope(
        h[n - 2],
        if n >= 3 { h[n - 3] } else { h[n - 2] },
        delta[n - 2],
        if n >= 3 { delta[n - 3] } else { delta[n - 2] },
    );
    for i in 1..n - 1 {
        if delta[i - 1] * delta[i] <= 0.0 {
            d[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
    }
    d
}

fn endpoint_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    // Moler's non-centered three-point estimate, clipped for monotonicity.
    let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s * d0 <= 0.0 {
        0.0
    } else if d0 * d1 < 0.0 && s.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        s
    }
}

/// Cubic Hermite value at `x` on `[x0, x1]` from endpoint values/derivatives.
pub fn hermite(x: f64, x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64) -> f64 {
    let h = x1 - x0;
    let s = (x - x0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    y0 * (2.0 * s3 - 3.0 * s2 + 1.0)
        + d0 * h * (s3 - 2.0 * s2 + s)
        + y1 * (-2.0 * s3 + 3.0 * s2)
        + d1 * h * (s3 - s2)
}

/// Bisect `f` for a sign change on `[a, b]`; `f(a)` and `f(b)` must differ in
/// sign. Returns the midpoint of the final bracket.
pub fn bisect_root<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> f64 {
    let mut fa = f(a);
    for _ in 0..max_iter {
        if (b - a).abs() <= tol {
            break;
        }
        let mid = 0.5 * (a + b);
        let fm = f(mid);
        if fa * fm <= 0.0 {
            b = mid;
        } else {
            a = mid;
            fa = fm;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss2_is_exact_for_cubics() {
        let f = |x: f64| -> Result<f64, ()> { Ok(3.0 * x * x * x - x + 2.0) };
        let got = gauss2(&f, -1.0, 2.0).unwrap();
        // antiderivative: 3/4 x^4 - x^2/2 + 2x
        let exact = (0.75 * 16.0 - 2.0 + 4.0) - (0.75 - 0.5 - 2.0);
        assert_relative_eq!(got, exact, max_relative = 1e-14);
    }

    #[test]
    fn fornberg_reproduces_central_weights() {
        let w = fornberg_weights(&[-2.0, -1.0, 0.0, 1.0, 2.0], 0.0, 1);
        let expect = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
        for (a, b) in w.iter().zip(expect.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fornberg_differentiates_quartic_exactly() {
        let nodes = [0.1, 0.17, 0.3, 0.34, 0.5];
        let w = fornberg_weights(&nodes, 0.3, 1);
        let f = |x: f64| x * x * x * x - 2.0 * x * x + 1.0;
        let df: f64 = nodes.iter().zip(w.iter()).map(|(x, c)| c * f(*x)).sum();
        assert_relative_eq!(df, 4.0 * 0.3f64.powi(3) - 4.0 * 0.3, epsilon = 1e-10);
    }

    #[test]
    fn log_add_exp_handles_extremes() {
        assert_relative_eq!(log_add_exp(700.0, 700.0), 700.0 + 2.0f64.ln(), epsilon = 1e-12);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, 3.0), 3.0);
    }

    #[test]
    fn pairwise_matches_exact_sum() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert_relative_eq!(pairwise_sum(&xs), naive, epsilon = 1e-9);
    }

    #[test]
    fn pchip_preserves_monotonicity() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let ys = [0.0, 0.5, 0.6, 2.0, 2.1];
        let d = pchip_slopes(&xs, &ys);
        for i in 0..4 {
            for k in 1..10 {
                let x = xs[i] + 0.1 * k as f64;
                let y = hermite(x, xs[i], xs[i + 1], ys[i], ys[i + 1], d[i], d[i + 1]);
                assert!(y >= ys[i] - 1e-12 && y <= ys[i + 1] + 1e-12);
            }
        }
    }
}
