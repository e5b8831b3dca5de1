//! Small dense helpers on top of nalgebra.

use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Cholesky factor of `m + shift * I` where `shift >= 0` is the smallest
/// multiple of the identity (to bisection precision) that makes the
/// factorization succeed.
pub fn cholesky_with_shift(m: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some((c, 0.0));
    }
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let shifted = |s: f64| {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += s;
        }
        Cholesky::new(a)
    };
    let mut lo = 0.0;
    let mut hi = 1e-10 * scale;
    let mut found = None;
    for _ in 0..80 {
        if let Some(c) = shifted(hi) {
            found = Some(c);
            break;
        }
        lo = hi;
        hi *= 4.0;
    }
    let mut best = found?;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-3 * hi {
            break;
        }
        match shifted(mid) {
            Some(c) => {
                best = c;
                hi = mid;
            }
            None => lo = mid,
        }
    }
    Some((best, hi))
}

/// Symmetrize in place: `m <- (m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Orthonormal basis (columns) of the orthogonal complement of `c`, built from
/// a Householder reflection. Returns a `len × (len - 1)` matrix.
pub fn null_space_of_vector(c: &DVector<f64>) -> DMatrix<f64> {
    let n = c.len();
    let norm = c.norm();
    let mut v = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    let vv = v.dot(&v);
    let mut h = DMatrix::<f64>::identity(n, n);
    if vv > 0.0 {
        h -= (&v * v.transpose()) * (2.0 / vv);
    }
    h.columns(1, n - 1).into_owned()
}

/// Orthonormal complement of the column space of `m` (`k × p`, `p < k`, full
/// column rank), via successive Householder reflections.
pub fn null_space_of_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.nrows();
    let p = m.ncols();
    let mut q = DMatrix::<f64>::identity(k, k);
    let mut a = m.clone();
    for j in 0..p {
        let x = a.view((j, j), (k - j, 1)).column(0).into_owned();
        let norm = x.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = x.clone();
        v[0] += if x[0] >= 0.0 { norm } else { -norm };
        let vv = v.dot(&v);
        let mut h = DMatrix::<f64>::identity(k, k);
        let block = (&v * v.transpose()) * (2.0 / vv);
        for r in 0..(k - j) {
            for c in 0..(k - j) {
                h[(j + r, j + c)] -= block[(r, c)];
            }
        }
        a = &h * a;
        q = q * h;
    }
    q.columns(p, k - p).into_owned()
}

/// Eigen-decomposition sorted by decreasing eigenvalue.
///
/// Householder tridiagonalization followed by the implicit QL iteration
/// (EISPACK `tred2` / `tql2`).
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mut v = m.clone();
    symmetrize(&mut v);
    let mut d = alloc::vec![0.0; n];
    let mut e = alloc::vec![0.0; n];
    if n > 0 {
        tred2(&mut v, &mut d, &mut e);
        tql2(&mut v, &mut d, &mut e);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let values = order.iter().map(|&i| d[i]).collect();
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    (values, vectors)
}

fn tred2(v: &mut DMatrix<f64>, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = libm::sqrt(h);
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for j in 0..i {
                e[j] = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[(j, i)] = f;
                g = e[j] + v[(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = 0.0;
    }
    v[(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

fn tql2(v: &mut DMatrix<f64>, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        let m = m.min(n - 1);
        if m > l {
            loop {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = libm::hypot(p, 1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for i in (l + 2)..n {
                    d[i] -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = libm::hypot(p, e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[(k, i + 1)];
                        v[(k, i + 1)] = s * v[(k, i)] + c * h;
                        v[(k, i)] = c * v[(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let (values, _) = sorted_symmetric_eigen(m);
    values[values.len() - 1]
}

/// `X^T diag(w) X`.
pub fn weighted_cross(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut out = DMatrix::zeros(p, p);
    let mut xw = alloc::vec![0.0; x.nrows()];
    for j in 0..p {
        for ((o, v), wi) in xw.iter_mut().zip(x.column(j).iter()).zip(w) {
            *o = v * wi;
        }
        for k in j..p {
            let s = dot(&xw, x.column(k).as_slice());
            out[(j, k)] = s;
            out[(k, j)] = s;
        }
    }
    out
}

/// `X^T diag(w) Y`.
pub fn weighted_cross2(x: &DMatrix<f64>, w: &[f64], y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.ncols(), y.ncols());
    let mut xw = alloc::vec![0.0; x.nrows()];
    for j in 0..x.ncols() {
        for ((o, v), wi) in xw.iter_mut().zip(x.column(j).iter()).zip(w) {
            *o = v * wi;
        }
        for k in 0..y.ncols() {
            out[(j, k)] = dot(&xw, y.column(k).as_slice());
        }
    }
    out
}

/// `X^T v` without forming the transpose.
pub fn cross_vector(x: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.ncols(), (0..x.ncols()).map(|j| dot(x.column(j).as_slice(), v)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}
