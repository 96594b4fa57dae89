//! Small dense kernels on row-major slices.
//!
//! Every system solved by the samplers is tiny (a handful of unknowns), so
//! these routines work in place on caller-owned buffers. Scratch vectors up
//! to [`INLINE`] entries and matrices up to [`INLINE_MAT`] entries live on
//! the stack.

use smallvec::SmallVec;

pub const INLINE: usize = 8;
pub const INLINE_MAT: usize = 16;

pub(crate) type Buf = SmallVec<[f64; INLINE_MAT]>;
pub(crate) type VecBuf = SmallVec<[f64; INLINE]>;

pub(crate) fn zeros(n: usize) -> Buf {
    SmallVec::from_elem(0.0, n)
}

pub(crate) fn zeros_vec(n: usize) -> VecBuf {
    SmallVec::from_elem(0.0, n)
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean norm of `a - b`.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// `out = A v` for a row-major `n x n` matrix.
pub fn mat_vec(a: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        out[i] = dot(&a[i * n..(i + 1) * n], v);
    }
}

/// `vᵀ A v`.
pub fn quad_form(a: &[f64], v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        s += v[i] * dot(&a[i * n..(i + 1) * n], v);
    }
    s
}

/// Solves `A x = b` by LU with partial pivoting. `a` is destroyed and `b`
/// is overwritten with the solution. Returns `false` on an exactly zero pivot.
pub fn lu_solve(a: &mut [f64], b: &mut [f64]) -> bool {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    for k in 0..n {
        let mut piv = k;
        let mut best = a[k * n + k].abs();
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best == 0.0 {
            return false;
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            b.swap(k, piv);
        }
        let d = a[k * n + k];
        for i in k + 1..n {
            let f = a[i * n + k] / d;
            if f != 0.0 {
                a[i * n + k] = 0.0;
                for j in k + 1..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
                b[i] -= f * b[k];
            }
        }
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= a[i * n + j] * b[j];
        }
        b[i] = s / a[i * n + i];
    }
    true
}

/// Determinant via LU with partial pivoting; `a` is destroyed.
pub fn det_in_place(a: &mut [f64], n: usize) -> f64 {
    let mut det = 1.0;
    for k in 0..n {
        let mut piv = k;
        let mut best = a[k * n + k].abs();
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            det = -det;
        }
        let d = a[k * n + k];
        det *= d;
        for i in k + 1..n {
            let f = a[i * n + k] / d;
            for j in k + 1..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    det
}

pub fn det(a: &[f64], n: usize) -> f64 {
    let mut w = zeros(n * n);
    w.copy_from_slice(a);
    det_in_place(&mut w, n)
}

/// Singular values of a row-major `n x n` matrix, written to `out` in no
/// particular order. Closed form for `n <= 2`, one-sided Jacobi otherwise.
pub fn singular_values(a: &[f64], n: usize, out: &mut [f64]) {
    // Work on the columns of a column-major copy, scaled to avoid
    // under/overflow in the squared column norms.
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        out[..n].iter_mut().for_each(|v| *v = scale);
        return;
    }
    match n {
        1 => {
            out[0] = scale;
            return;
        }
        2 => {
            let b = [a[0] / scale, a[1] / scale, a[2] / scale, a[3] / scale];
            let t = b.iter().map(|v| v * v).sum::<f64>();
            let d = (b[0] * b[3] - b[1] * b[2]).abs();
            let smax = (0.5 * (t + (t * t - 4.0 * d * d).max(0.0).sqrt())).sqrt();
            out[0] = smax * scale;
            out[1] = d / smax * scale;
            return;
        }
        _ => {}
    }
    let mut u = zeros(n * n);
    for i in 0..n {
        for j in 0..n {
            u[j * n + i] = a[i * n + j] / scale;
        }
    }
    let tol = f64::EPSILON;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let up = u[p * n + i];
                    let uq = u[q * n + i];
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let up = u[p * n + i];
                    let uq = u[q * n + i];
                    u[p * n + i] = c * up - s * uq;
                    u[q * n + i] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    for j in 0..n {
        out[j] = scale * norm(&u[j * n..(j + 1) * n]);
    }
}

/// Numerical rank: singular values above `rel * sigma_max`.
///
/// With `rel = None` the threshold is `n * eps`, the usual matrix-rank default.
pub fn numerical_rank(a: &[f64], n: usize, rel: Option<f64>) -> usize {
    let mut s = zeros_vec(n);
    singular_values(a, n, &mut s);
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 || !smax.is_finite() {
        return 0;
    }
    let thr = rel.unwrap_or(n as f64 * f64::EPSILON) * smax;
    s.iter().filter(|&&v| v > thr).count()
}

/// In-place Cholesky factorization of a symmetric positive definite matrix.
/// On success the lower triangle holds `L` with `L Lᵀ = A` and the strict
/// upper triangle is zeroed.
pub fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let l = d.sqrt();
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / l;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

/// Solves `L x = b` in place for lower-triangular `L`.
pub fn solve_lower(l: &[f64], b: &mut [f64]) {
    let n = b.len();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `Lᵀ x = b` in place for lower-triangular `L`.
pub fn solve_lower_transpose(l: &[f64], b: &mut [f64]) {
    let n = b.len();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Inverse of an SPD matrix from its Cholesky factor.
pub fn cholesky_inverse(l: &[f64], n: usize, out: &mut [f64]) {
    let mut col = zeros_vec(n);
    for j in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        solve_lower(l, &mut col);
        solve_lower_transpose(l, &mut col);
        for i in 0..n {
            out[i * n + j] = col[i];
        }
    }
}
